import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msvil import attn_pairs, flops_model, interior_pairs_per_token, memory_theoretical, registry_lookup
from msvil.attention import AttentionSpec, build_global_mask, build_vil_mask
from msvil.complexity import CSV_HEADER, block_flops


def vil(window=15, n_g=1, masking="nopad", shift=0, d=64):
    return AttentionSpec(kind="vil", heads=1, dim=d, n_g=n_g, window=window, masking=masking, shift=shift)


def test_full_pairs():
    assert attn_pairs(AttentionSpec(kind="full", heads=1, dim=8, n_g=1), 14, 14) == 197 ** 2 == 38809


def test_global_pairs_match_mask():
    spec = AttentionSpec(kind="global", heads=1, dim=8, n_g=3)
    assert attn_pairs(spec, 4, 5) == build_global_mask(3, 20).sum()


@settings(max_examples=150, deadline=None)
@given(H=st.integers(1, 12), W=st.integers(1, 12), window=st.sampled_from([1, 3, 5, 7, 15]),
       n_g=st.integers(0, 2), masking=st.sampled_from(["exact", "nopad", "cyclic"]),
       shift=st.integers(-1, 8))
def test_vil_pairs_equal_mask_popcount(H, W, window, n_g, masking, shift):
    spec = vil(window, n_g, masking, shift)
    assert attn_pairs(spec, H, W) == build_vil_mask(H, W, n_g, window, masking, shift).sum()


def test_interior_pairs():
    for n_g in (0, 1, 2):
        assert interior_pairs_per_token(vil(15, n_g, "exact")) == 225 + n_g
        assert interior_pairs_per_token(vil(15, n_g, "nopad")) == 24 ** 2 + n_g
    assert interior_pairs_per_token(vil(15, 1, "nopad", shift=-1)) == 64 + 1
    assert interior_pairs_per_token(vil(15, 1, "nopad", shift=2)) == 128 + 1
    with pytest.raises(ValueError):
        interior_pairs_per_token(AttentionSpec(kind="full", heads=1, dim=8))


def test_interior_count_matches_mask_centre():
    spec = vil(5, 0, "exact")
    m = build_vil_mask(21, 21, 0, 5, "exact")
    assert m[10 * 21 + 10].sum() == interior_pairs_per_token(spec)


def test_memory_full_vs_vil():
    full = AttentionSpec(kind="full", heads=1, dim=96, n_g=1)
    spec = vil(15, 1, "exact", d=96)
    assert 3137 / interior_pairs_per_token(spec) == pytest.approx(13.9, abs=0.05)
    # border queries see fewer keys, so the whole-grid ratio is larger still
    assert attn_pairs(full, 56, 56) / attn_pairs(spec, 56, 56) > 13.9
    assert memory_theoretical(spec, 56, 56) == attn_pairs(spec, 56, 56) + 3137 * 96


def test_growth_rates():
    spec = vil()
    per_token = [attn_pairs(spec, s, s) / (s * s) for s in (224, 448, 896)]
    # pairs per token stay bounded by the interior count: linear in tokens
    assert all(p < interior_pairs_per_token(spec) for p in per_token)
    assert per_token[2] / per_token[1] < 1.02
    full = AttentionSpec(kind="full", heads=1, dim=8)
    sra = AttentionSpec(kind="sra", heads=1, dim=8, sr_ratio=4)
    for s in (full, sra):
        assert attn_pairs(s, 112, 112) / attn_pairs(s, 56, 56) == pytest.approx(16, rel=0.01)


def test_block_flops_full():
    spec = AttentionSpec(kind="full", heads=2, dim=8, n_g=1)
    f = block_flops(spec, 2, 2)
    assert f == {"qkv_proj": 4 * 5 * 64, "attention": 2 * 25 * 8, "ffn": 8 * 5 * 64}


def test_report_breakdown_and_csv():
    rep = flops_model(registry_lookup("ViL-Tiny"))
    assert rep.flops == sum(r.flops for r in rep.breakdown)
    assert sum(t[2] for t in rep.stage_totals()) == rep.flops
    lines = rep.to_csv().strip().split("\n")
    assert lines[0].split(",") == CSV_HEADER
    assert len(lines) == 1 + 5 * 4 + 1
    assert lines[-1].startswith("ViL-Tiny,224x224,head,,")
    assert 1.3 < rep.gflops < 1.6


def test_flops_monotone_in_resolution():
    cfg = registry_lookup("ViL-Small")
    fl = [flops_model(cfg, r).flops for r in (224, 288, 384)]
    assert fl[0] < fl[1] < fl[2]
