"""Stage/model configurations, the named registry and the plain-text config format."""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

from .attention.spec import AttentionSpec, Kind, MaskingMode


@dataclass(frozen=True)
class StageConfig:
    """One E-ViT stage: ``n`` blocks on patches of size ``p`` with ``h`` heads of total width ``d``."""

    n: int
    p: int
    h: int
    d: int
    n_g: int = 1
    attention: Kind = Kind.VIL
    window: int = 15
    masking: MaskingMode = MaskingMode.NOPAD
    shift: int = 0
    proj_dim: int = 256
    sr_ratio: int = 1
    n_features: int = 256

    def __post_init__(self):
        object.__setattr__(self, "attention", Kind(self.attention))
        object.__setattr__(self, "masking", MaskingMode(self.masking))
        if self.n < 1 or self.p < 1:
            raise ValueError(f"stage needs n >= 1 and p >= 1, got n={self.n}, p={self.p}")
        if self.d % self.h:
            raise ValueError(f"stage dim {self.d} not divisible by heads {self.h}")

    def spec(self) -> AttentionSpec:
        return AttentionSpec(kind=self.attention, heads=self.h, dim=self.d, n_g=self.n_g,
                             window=self.window, masking=self.masking, shift=self.shift,
                             proj_dim=self.proj_dim, sr_ratio=self.sr_ratio,
                             n_features=self.n_features)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return (self.n, self.p, self.h, self.d)


@dataclass(frozen=True)
class ModelConfig:
    name: str
    stages: tuple[StageConfig, ...]
    pos_mode: str = "rpb"
    head_mode: str = "avgpool"
    num_classes: int = 1000
    in_chans: int = 3

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        if self.pos_mode not in ("ape", "rpb"):
            raise ValueError(f"pos_mode must be 'ape' or 'rpb', got {self.pos_mode!r}")
        if self.head_mode not in ("avgpool", "cls"):
            raise ValueError(f"head_mode must be 'avgpool' or 'cls', got {self.head_mode!r}")
        if self.head_mode == "cls" and self.stages[-1].n_g < 1:
            raise ValueError("CLS head needs a global token in the last stage")

    @property
    def total_stride(self) -> int:
        s = 1
        for st in self.stages:
            s *= st.p
        return s

    def grids(self, resolution) -> list[tuple[int, int]]:
        """Local grid of every stage for an input of ``resolution`` (int or (H, W))."""
        H, W = (resolution, resolution) if isinstance(resolution, int) else resolution
        out = []
        for st in self.stages:
            if H % st.p or W % st.p:
                raise ValueError(
                    f"resolution {H}x{W} not divisible by patch size {st.p} at stage {len(out) + 1}"
                )
            H, W = H // st.p, W // st.p
            out.append((H, W))
        return out

    @property
    def shapes(self) -> list[tuple[int, int, int, int]]:
        return [st.shape for st in self.stages]


def _stages(*rows, **kw):
    return tuple(StageConfig(n, p, h, d, **kw) for n, p, h, d in rows)


_TABLE = {
    "ViL-Tiny": [(1, 4, 1, 48), (1, 2, 3, 96), (9, 2, 3, 192), (1, 2, 6, 384)],
    "ViL-Small": [(1, 4, 3, 96), (2, 2, 3, 192), (8, 2, 6, 384), (1, 2, 12, 768)],
    "ViL-Medium": [(1, 4, 3, 96), (4, 2, 3, 192), (16, 2, 6, 384), (1, 2, 12, 768)],
    "ViL-Base": [(1, 4, 3, 96), (8, 2, 3, 192), (24, 2, 6, 384), (1, 2, 12, 768)],
    "Small-3stage": [(2, 8, 3, 192), (9, 2, 6, 384), (1, 2, 12, 768)],
    "Tiny-1-10-1": [(1, 8, 3, 96), (10, 2, 3, 192), (1, 2, 6, 384)],
    "Tiny-2-9-1": [(2, 8, 3, 96), (9, 2, 3, 192), (1, 2, 6, 384)],
    "Tiny-1-9-2": [(1, 8, 3, 96), (9, 2, 3, 192), (2, 2, 6, 384)],
    "Tiny-2-8-2": [(2, 8, 3, 96), (8, 2, 3, 192), (2, 2, 6, 384)],
    "Tiny-1-1-9-1": [(1, 4, 1, 48), (1, 2, 3, 96), (9, 2, 3, 192), (1, 2, 6, 384)],
    "Tiny-1-2-8-1": [(1, 4, 1, 48), (2, 2, 3, 96), (8, 2, 3, 192), (1, 2, 6, 384)],
    "Small-1-10-1": [(1, 8, 3, 192), (10, 2, 6, 384), (1, 2, 12, 768)],
    "Small-2-9-1": [(2, 8, 3, 192), (9, 2, 6, 384), (1, 2, 12, 768)],
    "Small-1-9-2": [(1, 8, 3, 192), (9, 2, 6, 384), (2, 2, 12, 768)],
    "Small-2-8-2": [(2, 8, 3, 192), (8, 2, 6, 384), (2, 2, 12, 768)],
    "Small-1-1-9-1": [(1, 4, 3, 96), (1, 2, 3, 192), (9, 2, 6, 384), (1, 2, 12, 768)],
    "Small-1-2-8-1": [(1, 4, 3, 96), (2, 2, 3, 192), (8, 2, 6, 384), (1, 2, 12, 768)],
}

_FLAT = {
    "DeiT-Tiny/16": [(12, 16, 3, 192)],
    "DeiT-Small/16": [(12, 16, 6, 384)],
}

WINDOW_PRESETS = {
    "vil-224": (15, 15, 15, 15),
    "vil-384": (13, 17, 25, 25),
}

# per-stage attention hyperparameters for 4- and 3-stage models
_ATTN_DEFAULTS = {
    "global": {4: {"n_g": (256, 256, 64, 16)}, 3: {"n_g": (256, 64, 16)}},
    "linformer": {4: {"proj_dim": (256,) * 4}, 3: {"proj_dim": (256,) * 3}},
    "sra32": {4: {"sr_ratio": (8, 4, 2, 1)}, 3: {"sr_ratio": (4, 2, 1)}},
    "sra64": {4: {"sr_ratio": (16, 8, 4, 2)}, 3: {"sr_ratio": (8, 4, 2)}},
    "performer": {4: {"n_features": (256,) * 4}, 3: {"n_features": (256,) * 3}},
}


def known_names() -> list[str]:
    return sorted(_TABLE) + sorted(_FLAT)


def registry_lookup(name: str) -> ModelConfig:
    if name in _TABLE:
        return ModelConfig(name, _stages(*_TABLE[name]), pos_mode="rpb", head_mode="avgpool")
    if name in _FLAT:
        return ModelConfig(name, _stages(*_FLAT[name], attention=Kind.FULL), pos_mode="ape",
                           head_mode="cls")
    raise KeyError(f"unknown model config {name!r}; known: {', '.join(known_names())}")


def with_windows(config: ModelConfig, windows) -> ModelConfig:
    if isinstance(windows, str):
        windows = WINDOW_PRESETS[windows]
    windows = tuple(windows)[-len(config.stages):]
    stages = tuple(replace(st, window=w) for st, w in zip(config.stages, windows))
    return replace(config, stages=stages)


def with_attention(config: ModelConfig, mechanism: str, partial: bool = False) -> ModelConfig:
    """Swap every stage (or only the first two with ``partial``) to another mechanism.

    ``mechanism`` is one of full, vil, global, linformer, sra32, sra64,
    performer; per-stage hyperparameters follow the defaults table.
    """
    kind = {"sra32": Kind.SRA, "sra64": Kind.SRA}.get(mechanism) or Kind(mechanism)
    defaults = _ATTN_DEFAULTS.get(mechanism, {}).get(len(config.stages), {})
    stages = []
    for i, st in enumerate(config.stages):
        if partial and i >= 2:
            stages.append(replace(st, attention=Kind.FULL, n_g=1))
            continue
        kw = {key: vals[i] for key, vals in defaults.items()}
        if kind is not Kind.GLOBAL:
            kw.setdefault("n_g", 1)
        stages.append(replace(st, attention=kind, **kw))
    pos_mode = config.pos_mode if kind in (Kind.VIL, Kind.FULL, Kind.GLOBAL) else "ape"
    return replace(config, stages=tuple(stages), pos_mode=pos_mode)


# --- plain-text config files -------------------------------------------------
#
#   name = my-model
#   pos_mode = rpb
#   head_mode = avgpool
#   num_classes = 1000
#   stage = n=1 p=4 h=3 d=96 n_g=1 attention=vil window=15
#   stage = n=2 p=2 h=3 d=192
#
# One ``stage`` line per stage, in order; unspecified stage keys take defaults.

_STAGE_INT = {"n", "p", "h", "d", "n_g", "window", "shift", "proj_dim", "sr_ratio", "n_features"}


def dumps_config(config: ModelConfig) -> str:
    lines = [
        f"name = {config.name}",
        f"pos_mode = {config.pos_mode}",
        f"head_mode = {config.head_mode}",
        f"num_classes = {config.num_classes}",
        f"in_chans = {config.in_chans}",
    ]
    for st in config.stages:
        parts = [f"n={st.n}", f"p={st.p}", f"h={st.h}", f"d={st.d}", f"n_g={st.n_g}",
                 f"attention={st.attention.value}", f"window={st.window}",
                 f"masking={st.masking.value}", f"shift={st.shift}", f"proj_dim={st.proj_dim}",
                 f"sr_ratio={st.sr_ratio}", f"n_features={st.n_features}"]
        lines.append("stage = " + " ".join(parts))
    return "\n".join(lines) + "\n"


def loads_config(text: str) -> ModelConfig:
    top = {}
    stages = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key == "stage":
            kw = {}
            for item in value.split():
                k, _, v = item.partition("=")
                if k not in StageConfig.__dataclass_fields__:
                    raise ValueError(f"line {lineno}: unknown stage key {k!r}")
                kw[k] = int(v) if k in _STAGE_INT else v
            stages.append(StageConfig(**kw))
        else:
            top[key] = value
    if not stages:
        raise ValueError("config has no stage lines")
    return ModelConfig(
        name=top.get("name", "custom"),
        stages=tuple(stages),
        pos_mode=top.get("pos_mode", "rpb"),
        head_mode=top.get("head_mode", "avgpool"),
        num_classes=int(top.get("num_classes", 1000)),
        in_chans=int(top.get("in_chans", 3)),
    )


def load_config(name_or_path: str) -> ModelConfig:
    """Registry name, or path to a config file."""
    try:
        return registry_lookup(name_or_path)
    except KeyError:
        path = Path(name_or_path)
        if path.is_file():
            return loads_config(path.read_text())
        raise
