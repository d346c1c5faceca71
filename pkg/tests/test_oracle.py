import numpy as np
import pytest

from msvil import oracle
from msvil.attention import AttentionSpec, build_vil_mask, init_msa_params
from msvil.tensor import make_rng


def test_finite_differences_of_sum_of_squares():
    x = make_rng(0).standard_normal((3, 4))
    g = oracle.finite_diff_grad(lambda: float((x ** 2).sum()), x)
    assert np.allclose(g, 2 * x, atol=1e-8)


def test_grad_of_sum_softmax_is_zero():
    s = make_rng(1).standard_normal(5)

    def f():
        e = np.exp(s - s.max())
        return float((e / e.sum()).sum())

    assert np.abs(oracle.finite_diff_grad(f, s)).max() < 1e-9
    rep = oracle.grad_check(f, {"s": s}, {"s": np.zeros(5)})
    assert rep.passed(1e-4)


def test_non_finite_objective_raises():
    x = np.zeros(2)
    with pytest.raises(FloatingPointError, match="index 0"):
        oracle.finite_diff_grad(lambda: float("nan"), x)


def test_grad_check_flags_wrong_gradient():
    x = make_rng(2).standard_normal(4)
    rep = oracle.grad_check(lambda: float((x ** 3).sum()), {"x": x}, {"x": 3 * x ** 2 + 0.1})
    assert not rep.passed()
    with pytest.raises(ValueError, match="shape"):
        oracle.grad_check(lambda: 0.0, {"x": x}, {"x": np.zeros(3)})


def test_oracle_cap():
    spec = AttentionSpec(kind="full", heads=1, dim=4)
    p = init_msa_params(spec, make_rng(0))
    with pytest.raises(ValueError, match="512"):
        oracle.masked_dense_reference(np.zeros((513, 4)), p, 1)


def test_per_token_equals_masked_dense():
    rng = make_rng(3)
    spec = AttentionSpec(kind="full", heads=2, dim=8)
    p = init_msa_params(spec, rng, std=0.3, dtype=np.float64)
    x = rng.standard_normal((16, 8))
    mask = build_vil_mask(4, 4, 0, 3, "nopad")
    bias = rng.standard_normal((2, 16, 16))
    ref = oracle.masked_dense_reference(x, p, 2, mask, bias)
    y = oracle._ln(x, p.ln_g, p.ln_b)
    q, k, v = ((y @ w + b).reshape(16, 2, 4).transpose(1, 0, 2)
               for w, b in ((p.wq, p.bq), (p.wk, p.bk), (p.wv, p.bv)))
    o = oracle.per_token_reference(q, k, v, mask, bias).transpose(1, 0, 2).reshape(16, 8)
    assert np.allclose(x + o @ p.wo + p.bo, ref, atol=1e-12)
    assert np.array_equal(ref, oracle.masked_dense_reference(x, p, 2, mask, bias))
