"""Attention mechanisms: masked-dense reference, sliding-chunk ViL, Global, Linformer, SRA, Performer."""

from .chunk import chunk_layout, vil_chunk_attend, vil_chunk_backward
from .dense import attend_dense, attend_dense_backward
from .masks import (
    NEIGHBORS,
    build_global_mask,
    build_vil_mask,
    full_mask,
    vil_local_layout,
)
from .mechanisms import (
    global_attention_forward,
    linformer_forward,
    msa_backward,
    msa_forward,
    performer_forward,
    sra_forward,
    vil_sliding_chunk_forward,
)
from .performer import performer_attend, performer_backward, redraw_due, redraw_features, redraw_interval
from .shift import sample_shift_mode
from .spec import AttentionSpec, Kind, MaskingMode, MsaParams, init_msa_params, orthogonal_features

__all__ = [
    "AttentionSpec", "Kind", "MaskingMode", "MsaParams", "NEIGHBORS",
    "attend_dense", "attend_dense_backward", "build_global_mask", "build_vil_mask",
    "chunk_layout", "full_mask", "global_attention_forward", "init_msa_params",
    "linformer_forward", "msa_backward", "msa_forward", "orthogonal_features",
    "performer_attend", "performer_backward", "performer_forward", "redraw_due",
    "redraw_features", "redraw_interval", "sample_shift_mode", "sra_forward",
    "vil_chunk_attend", "vil_chunk_backward", "vil_local_layout", "vil_sliding_chunk_forward",
]
