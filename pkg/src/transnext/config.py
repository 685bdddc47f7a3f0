"""Stage and model configuration, stock variants, and the key=value config file."""

from __future__ import annotations

from dataclasses import dataclass, replace
from fractions import Fraction
from pathlib import Path
from typing import Optional

from .tensor import ConfigError, ShapeError

MIXERS = ("A", "M", "P", "I")   # aggregated, MHSA, plain pixel-focused, identity
MODES = ("normal", "linear")
CONFIG_KEYS = ("channels", "blocks", "mlp_ratio", "mixers", "window", "pool_mode", "pool")


@dataclass(frozen=True)
class StageConfig:
    """One backbone stage.

    ``pool`` is the pooled-grid extent at the training resolution; in normal
    mode it scales with the input, in linear mode it stays fixed.
    ``mlp_ratio == 0`` drops the channel mixer.
    """

    channels: int
    blocks: int
    mlp_ratio: float
    mixer: str = "A"
    window: Optional[int] = 3
    pool: Optional[int] = 7

    def heads(self, head_dim: int) -> int:
        return self.channels // head_dim


@dataclass(frozen=True)
class ModelConfig:
    stages: tuple[StageConfig, ...]
    pool_mode: str = "normal"
    name: str = "custom"
    head_dim: int = 24
    in_chans: int = 3
    num_classes: int = 1000
    patch_sizes: tuple[int, ...] = (7, 3, 3, 3)
    patch_strides: tuple[int, ...] = (4, 2, 2, 2)
    train_resolution: int = 224
    query_embedding: bool = True
    positional_tokens: bool = True
    convglu_variant: str = "convglu"
    cpb_hidden: int = 512

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        n = len(self.stages)
        if n == 0:
            raise ConfigError("a model needs at least one stage")
        if len(self.patch_sizes) < n or len(self.patch_strides) < n:
            raise ConfigError("patch_sizes/patch_strides shorter than the stage list")
        if self.pool_mode not in MODES:
            raise ConfigError(f"pool_mode must be one of {MODES}, got {self.pool_mode!r}")
        for i, s in enumerate(self.stages):
            if s.channels < 1 or s.blocks < 0:
                raise ConfigError(f"stage {i}: channels and blocks must be positive")
            if s.channels % self.head_dim:
                raise ConfigError(f"stage {i}: channels {s.channels} not divisible by "
                                  f"head dim {self.head_dim}")
            if s.mixer not in MIXERS:
                raise ConfigError(f"stage {i}: unknown mixer {s.mixer!r}")
            if s.mixer in ("A", "P"):
                if s.window is None or s.window < 1 or s.window % 2 == 0:
                    raise ConfigError(f"stage {i}: window must be a positive odd int")
                if s.pool is None or s.pool < 1:
                    raise ConfigError(f"stage {i}: mixer {s.mixer} needs a pool size")
            if s.mlp_ratio < 0:
                raise ConfigError(f"stage {i}: mlp_ratio must be >= 0")

    @property
    def num_stages(self) -> int:
        return len(self.stages)

    def stride(self, stage: int) -> int:
        out = 1
        for s in self.patch_strides[:stage + 1]:
            out *= s
        return out

    @property
    def total_stride(self) -> int:
        return self.stride(self.num_stages - 1)

    def check_resolution(self, h: int, w: int) -> None:
        m = self.total_stride
        if h % m or w % m or h < m or w < m:
            raise ShapeError(f"input {h}x{w} must be a positive multiple of {m}; "
                             f"resize or pad to e.g. {max(m, h // m * m)}x{max(m, w // m * m)}")

    def feature_size(self, stage: int, h: int, w: int) -> tuple[int, int]:
        s = self.stride(stage)
        return h // s, w // s

    def pool_extent(self, stage: int, h: int, w: int, mode: Optional[str] = None) -> tuple[int, int]:
        """Pooled grid of ``stage`` for an ``h x w`` input image."""
        mode = mode or self.pool_mode
        if mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
        st = self.stages[stage]
        if st.pool is None:
            return 0, 0
        if mode == "linear":
            ph = pw = st.pool
        else:
            ratio = Fraction(self.train_resolution, st.pool)
            ph, pw = Fraction(h) / ratio, Fraction(w) / ratio
            if ph.denominator != 1 or pw.denominator != 1:
                raise ShapeError(f"stage {stage}: input {h}x{w} is not a multiple of the "
                                 f"pool ratio {ratio}")
            ph, pw = int(ph), int(pw)
        fh, fw = self.feature_size(stage, h, w)
        if not (1 <= ph <= fh and 1 <= pw <= fw):
            raise ShapeError(f"stage {stage}: pooled grid {ph}x{pw} does not fit the "
                             f"{fh}x{fw} feature map")
        return ph, pw

    def to_text(self) -> str:
        def fmt(vals):
            return ",".join("-" if v is None else _num(v) for v in vals)

        rows = {
            "channels": fmt(s.channels for s in self.stages),
            "blocks": fmt(s.blocks for s in self.stages),
            "mlp_ratio": fmt(s.mlp_ratio for s in self.stages),
            "mixers": ",".join(s.mixer for s in self.stages),
            "window": fmt(s.window if s.mixer in ("A", "P") else None for s in self.stages),
            "pool_mode": self.pool_mode,
            "pool": fmt(s.pool if s.mixer in ("A", "P") else None for s in self.stages),
        }
        return "".join(f"{k}={rows[k]}\n" for k in CONFIG_KEYS)


def _num(v) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def _stock(name, channels, blocks) -> ModelConfig:
    mixers = ("A", "A", "A", "M")
    stages = tuple(
        StageConfig(c, b, r, m, 3 if m == "A" else None, 7 if m == "A" else None)
        for c, b, r, m in zip(channels, blocks, (8, 8, 4, 4), mixers))
    return ModelConfig(stages=stages, name=name)


VARIANTS = {
    "micro": _stock("micro", (48, 96, 192, 384), (2, 2, 15, 2)),
    "tiny": _stock("tiny", (72, 144, 288, 576), (2, 2, 15, 2)),
    "small": _stock("small", (72, 144, 288, 576), (5, 5, 22, 5)),
    "base": _stock("base", (96, 192, 384, 768), (5, 5, 23, 5)),
}


def toy_config(mixer: str = "A", channels: int = 24, blocks: int = 1, mlp_ratio: float = 4,
               window: int = 3, pool: int = 1, resolution: int = 16,
               num_classes: int = 10, head_dim: int = 24) -> ModelConfig:
    """Single-stage model with a 1x1, stride-1 stem; features keep the input grid."""
    stage = StageConfig(channels, blocks, mlp_ratio, mixer,
                        window if mixer in ("A", "P") else None,
                        pool if mixer in ("A", "P") else None)
    return ModelConfig(stages=(stage,), name=f"toy-{mixer}", head_dim=head_dim,
                       num_classes=num_classes, patch_sizes=(1,), patch_strides=(1,),
                       train_resolution=resolution)


NAMED = {
    **VARIANTS,
    "toy": replace(toy_config(), name="toy"),
    "toy-identity": replace(toy_config(mixer="I", mlp_ratio=0), name="toy-identity"),
}


def parse_config_text(text: str, base: Optional[ModelConfig] = None) -> ModelConfig:
    """Parse the flat ``key=value`` format; every key in ``CONFIG_KEYS`` is required."""
    rows: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, val = (p.strip() for p in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in rows:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        rows[key] = val
    missing = [k for k in CONFIG_KEYS if k not in rows]
    if missing:
        raise ConfigError(f"missing keys: {', '.join(missing)}")

    def items(key):
        return [v.strip() for v in rows[key].split(",")]

    def opt_int(v, key):
        if v == "-":
            return None
        try:
            return int(v)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer or '-', got {v!r}") from None

    try:
        channels = [int(v) for v in items("channels")]
        blocks = [int(v) for v in items("blocks")]
        ratios = [float(v) for v in items("mlp_ratio")]
    except ValueError as e:
        raise ConfigError(f"bad numeric value: {e}") from None
    mixers = items("mixers")
    windows = [opt_int(v, "window") for v in items("window")]
    pools = [opt_int(v, "pool") for v in items("pool")]
    lists = (channels, blocks, ratios, mixers, windows, pools)
    if len({len(x) for x in lists}) != 1:
        raise ConfigError("per-stage lists have different lengths")
    stages = tuple(StageConfig(*row) for row in zip(*lists))
    base = base or VARIANTS["micro"]
    n = len(stages)
    patch_sizes = base.patch_sizes if n <= len(base.patch_sizes) else (7,) + (3,) * (n - 1)
    patch_strides = base.patch_strides if n <= len(base.patch_strides) else (4,) + (2,) * (n - 1)
    return replace(base, stages=stages, pool_mode=rows["pool_mode"], name="custom",
                   patch_sizes=patch_sizes, patch_strides=patch_strides)


def load_config(source: str) -> ModelConfig:
    """A stock/toy name or a path to a config file."""
    if source in NAMED:
        return NAMED[source]
    path = Path(source)
    if not path.is_file():
        raise ConfigError(f"unknown config {source!r}: not a variant name "
                          f"({', '.join(NAMED)}) or a readable file")
    return parse_config_text(path.read_text(encoding="utf-8"))
