import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msvil import oracle
from msvil.attention import (AttentionSpec, Kind, MaskingMode, attend_dense, build_global_mask,
                             build_vil_mask, global_attention_forward, init_msa_params,
                             linformer_forward, msa_backward, msa_forward, performer_attend,
                             performer_forward, redraw_features, redraw_interval,
                             sample_shift_mode, sra_forward, vil_chunk_attend, vil_chunk_backward,
                             vil_sliding_chunk_forward)
from msvil.attention.masks import vil_local_layout
from msvil.attention.mechanisms import split_heads
from msvil.attention.spec import orthogonal_features
from msvil.posenc import RpbTable, rpb_bias_matrix
from msvil.tensor import make_rng
from msvil.verify import msa_equivalence, msa_gradcheck, vil_kernel_sweep


@pytest.fixture
def rng():
    return make_rng(0)


# --- masks -------------------------------------------------------------------

def test_single_token_mask():
    for w in (1, 3, 15):
        assert build_vil_mask(1, 1, 0, w).tolist() == [[True]]


def test_exact_window_covering_grid_is_full():
    H, W = 3, 5
    assert build_vil_mask(H, W, 0, 2 * max(H, W) - 1, "exact").all()


def test_corner_chunk_attends_16_locals():
    m = build_vil_mask(8, 8, 0, 3, "nopad")
    assert m[0].sum() == 16
    ys, xs = np.divmod(np.flatnonzero(m[0]), 8)
    assert ys.max() == 3 and xs.max() == 3


@pytest.mark.parametrize("masking", list(MaskingMode))
def test_mask_invariants(masking):
    for H, W, w, n_g, s in [(5, 7, 3, 2, 0), (4, 4, 5, 1, 3), (6, 3, 1, 1, -1)]:
        m = build_vil_mask(H, W, n_g, w, masking, s)
        assert m[:n_g].all() and m[:, :n_g].all()
        assert np.diag(m).all()


def test_exact_mask_symmetric():
    m = build_vil_mask(7, 6, 0, 5, "exact")
    assert np.array_equal(m, m.T)


def test_mask_errors():
    with pytest.raises(ValueError):
        build_vil_mask(4, 4, 0, 4)
    with pytest.raises(ValueError):
        AttentionSpec(kind="full", heads=1, dim=4, shift=3)
    with pytest.raises(ValueError):
        AttentionSpec(kind="vil", heads=1, dim=4, shift=9)
    with pytest.raises(ValueError):
        build_global_mask(0, 4)


def test_global_mask_rows():
    m = build_global_mask(1, 2)
    assert m[1].tolist() == [True, True, False]
    assert m[2].tolist() == [True, False, True]
    assert m[0].all()


# --- dense -------------------------------------------------------------------

def test_attend_dense_examples(rng):
    v = rng.standard_normal((2, 1, 3))
    assert np.allclose(attend_dense(rng.standard_normal((2, 1, 3)), rng.standard_normal((2, 1, 3)), v), v)
    V = rng.standard_normal((1, 4, 2))
    out = attend_dense(np.zeros((1, 4, 2)), rng.standard_normal((1, 4, 2)), V)
    assert np.allclose(out, V.mean(axis=1, keepdims=True))
    q = np.array([[[1.0], [0.0]]])
    out = attend_dense(q, q, np.array([[[2.0], [4.0]]]))
    e = np.e
    assert out[0, 0, 0] == pytest.approx((e * 2 + 4) / (e + 1))
    assert out[0, 1, 0] == pytest.approx(3)


def test_oracle_matches_per_token_loop(rng):
    H = W = 4
    mask = build_vil_mask(H, W, 0, 3, "nopad")
    q, k, v = (rng.standard_normal((2, 16, 3)) for _ in range(3))
    ref = oracle.per_token_reference(q, k, v, mask)
    assert np.allclose(attend_dense(q, k, v, mask=mask), ref, atol=1e-12)


# --- sliding chunk -----------------------------------------------------------

def test_chunk_equivalence_small_sweep():
    cases, worst = vil_kernel_sweep(grid_max=6, windows=(1, 3, 5), seed=1)
    assert cases == 25 * 3 * 3 * 3 * 10
    assert max(worst.values()) < 1e-5, worst


@settings(max_examples=40, deadline=None)
@given(H=st.integers(1, 9), W=st.integers(1, 9), window=st.sampled_from([1, 3, 5, 7]),
       n_g=st.integers(0, 2), masking=st.sampled_from(list(MaskingMode)),
       shift=st.integers(-1, 8), seed=st.integers(0, 2 ** 16))
def test_chunk_matches_dense_f64(H, W, window, n_g, masking, shift, seed):
    rng = make_rng(seed)
    N = n_g + H * W
    q, k, v, g = (rng.standard_normal((2, N, 3)) for _ in range(4))
    rpb = RpbTable.init(2, (window + 1), rng, std=0.5, dtype=np.float64)
    out, cache = vil_chunk_attend(q, k, v, H, W, n_g, window, masking, shift, rpb)
    local, dy, dx = vil_local_layout(H, W, window, masking, shift)
    from msvil.attention.masks import with_globals
    mask = with_globals(local, n_g)
    bias = rpb_bias_matrix(rpb, H, W, n_g, mask, (dy, dx))
    ref = oracle.per_token_reference(q, k, v, mask, bias) if N <= 20 else attend_dense(q, k, v, bias, mask)
    assert np.abs(out - ref).max() < 1e-10
    dq, dk, dv, _ = vil_chunk_backward(cache, g)
    assert np.all(np.isfinite(dq)) and np.all(np.isfinite(dk)) and np.all(np.isfinite(dv))


def test_phantom_tokens_are_inert(rng):
    # 5x5 grid with 3x3 chunks pads to 6x6
    H = W = 5
    q, k, v = (rng.standard_normal((1, 25, 2)) for _ in range(3))
    out, cache = vil_chunk_attend(q, k, v, H, W, 0, 5, "nopad", 0)
    mask = build_vil_mask(H, W, 0, 5, "nopad")
    assert np.allclose(out, attend_dense(q, k, v, mask=mask))
    dq, dk, dv, _ = vil_chunk_backward(cache, np.ones_like(out))
    assert dq.shape == q.shape and dk.shape == k.shape


def test_full_window_exact_equals_full_attention(rng):
    H, W = 4, 5
    spec = AttentionSpec(kind="vil", heads=2, dim=8, n_g=0, window=2 * max(H, W) - 1, masking="exact")
    full = AttentionSpec(kind="full", heads=2, dim=8, n_g=0)
    p = init_msa_params(spec, rng)
    x = rng.standard_normal((H * W, 8))
    a, _ = vil_sliding_chunk_forward(x, p, spec, (H, W))
    b, _ = msa_forward(x, p, full, (H, W))
    assert np.allclose(a, b, atol=1e-6)


def test_zero_output_projection_is_residual(rng):
    spec = AttentionSpec(kind="vil", heads=2, dim=8, n_g=1, window=3)
    p = init_msa_params(spec, rng, rpb=True)
    p.wo[:] = 0
    x = rng.standard_normal((1 + 9, 8)).astype(np.float32)
    assert np.array_equal(msa_forward(x, p, spec, (3, 3))[0], x)


def test_zero_upstream_gradient_gives_zero_gradients(rng):
    spec = AttentionSpec(kind="vil", heads=2, dim=8, n_g=1, window=3)
    p = init_msa_params(spec, rng, rpb=True)
    x = rng.standard_normal((1 + 16, 8)).astype(np.float32)
    _, cache = msa_forward(x, p, spec, (4, 4))
    dx, grads = msa_backward(cache, p, spec, np.zeros_like(x))
    assert not dx.any()
    assert all(not g.any() for g in grads.values())
    with pytest.raises(ValueError):
        msa_backward(cache, p, spec, np.zeros((3, 8)))


def test_full_spec_equals_composition(rng):
    spec = AttentionSpec(kind="full", heads=1, dim=4, n_g=0)
    p = init_msa_params(spec, rng, std=0.5, dtype=np.float64)
    x = rng.standard_normal((5, 4))
    out, _ = msa_forward(x, p, spec)
    assert np.allclose(out, oracle.masked_dense_reference(x, p, 1), atol=1e-12)


@pytest.mark.parametrize("mech", ["full", "vil", "global", "linformer", "sra", "performer"])
def test_mechanism_matches_oracle(mech):
    assert msa_equivalence(mech, grid_max=6, cases=6, seed=3).passed


@pytest.mark.parametrize("mech", ["full", "vil", "global", "linformer", "sra", "performer"])
def test_mechanism_gradients(mech):
    r = msa_gradcheck(mech, seed=5)
    assert r.passed, r.worst


# --- global / linformer / sra ------------------------------------------------

def test_global_all_global_equals_full(rng):
    n_g = 5
    spec = AttentionSpec(kind="global", heads=1, dim=4, n_g=n_g)
    p = init_msa_params(spec, rng)
    x = rng.standard_normal((n_g + 1, 4)).astype(np.float32)
    out, _ = global_attention_forward(x, p, spec, (1, 1))
    full, _ = msa_forward(x, p, AttentionSpec(kind="full", heads=1, dim=4, n_g=n_g))
    assert np.allclose(out, full, atol=1e-6)
    with pytest.raises(ValueError):
        global_attention_forward(np.zeros((4, 4)), p, AttentionSpec(kind="global", heads=1, dim=4, n_g=0), (2, 2))


def test_linformer_identity_projection_is_full(rng):
    H = W = 3
    spec = AttentionSpec(kind="linformer", heads=2, dim=8, n_g=1, proj_dim=9)
    p = init_msa_params(spec, rng, grid=(H, W))
    p.proj = np.eye(9, dtype=np.float32)
    x = rng.standard_normal((10, 8)).astype(np.float32)
    out, _ = linformer_forward(x, p, spec, (H, W))
    ref, _ = msa_forward(x, p, AttentionSpec(kind="full", heads=2, dim=8, n_g=1))
    assert np.allclose(out, ref, atol=1e-6)
    with pytest.raises(ValueError, match="n_l=9"):
        linformer_forward(rng.standard_normal((17, 8)).astype(np.float32), p, spec, (4, 4))


def test_sra_r1_is_full_and_divisibility(rng):
    spec = AttentionSpec(kind="sra", heads=2, dim=8, n_g=1, sr_ratio=1)
    p = init_msa_params(spec, rng, grid=(4, 4))
    x = rng.standard_normal((17, 8)).astype(np.float32)
    out, _ = sra_forward(x, p, spec, (4, 4))
    ref, _ = msa_forward(x, p, AttentionSpec(kind="full", heads=2, dim=8, n_g=1))
    assert np.allclose(out, ref, atol=1e-6)
    s2 = AttentionSpec(kind="sra", heads=2, dim=8, n_g=0, sr_ratio=2)
    p2 = init_msa_params(s2, rng, grid=(4, 4))
    _, cache = sra_forward(x[1:], p2, s2, (4, 4))
    assert cache["k"].shape[1] == 4
    with pytest.raises(ValueError, match="divide"):
        sra_forward(rng.standard_normal((15, 8)).astype(np.float32), p2, s2, (3, 5))


# --- performer ---------------------------------------------------------------

def test_performer_single_token_returns_v(rng):
    q, k, v = (rng.standard_normal((2, 1, 4)) for _ in range(3))
    omega = orthogonal_features(16, 4, rng, np.float64)
    out, cache = performer_attend(q, k, v, omega)
    assert np.allclose(out, v, atol=1e-12)
    assert np.all(cache.den > 0)


def test_performer_strict_mode_raises_on_vanished_normaliser():
    # keys only excite feature 0, the query only feature 1
    omega = np.array([[30.0, 0.0], [0.0, 30.0]])
    q = np.array([[[0.0, 30.0]]])
    k = np.array([[[30.0, 0.0]]])
    v = np.ones((1, 1, 2))
    with pytest.raises(FloatingPointError):
        performer_attend(q, k, v, omega, strict=True)
    out, _ = performer_attend(q, k, v, omega)
    assert np.all(np.isfinite(out))


def test_performer_forward_shape(rng):
    spec = AttentionSpec(kind="performer", heads=2, dim=8, n_g=1, n_features=32)
    p = init_msa_params(spec, rng)
    x = rng.standard_normal((10, 8)).astype(np.float32)
    out, _ = performer_forward(x, p, spec, (3, 3))
    assert out.shape == x.shape and np.all(np.isfinite(out))


def test_redraw_schedule():
    assert redraw_interval(0) == 1
    assert redraw_interval(10) == 51
    assert redraw_interval(3, policy="fixed", every=7) == 7
    spec = AttentionSpec(kind="performer", heads=1, dim=4, n_features=8)
    p = init_msa_params(spec, make_rng(0))
    a = redraw_features(p, make_rng(5), step=0, epoch=0)
    b = redraw_features(p, make_rng(5), step=0, epoch=0)
    assert np.array_equal(a.omega, b.omega) and not np.array_equal(a.omega, p.omega)
    kept = redraw_features(p, make_rng(5), step=3, epoch=1)  # interval 6
    assert kept.omega is p.omega


# --- shift sampling ----------------------------------------------------------

def test_sample_shift_mode_phases():
    rng = make_rng(0)
    assert all(sample_shift_mode(rng, s, 100, 0.0) == 0 for s in range(100))
    assert sample_shift_mode(rng, 80, 100) == 0
    assert all(1 <= sample_shift_mode(rng, s, 100) <= 8 for s in range(75))
    with pytest.raises(ValueError):
        sample_shift_mode(rng, 0, 10, 1.5)


def test_split_heads_layout():
    x = np.arange(12.0).reshape(3, 4)
    h = split_heads(x, 2)
    assert h.shape == (2, 3, 2) and h[1, 0].tolist() == [2, 3]
