"""Four-stage hierarchical backbone: patch embeddings, token/channel mixer blocks, head."""

from __future__ import annotations

from dataclasses import dataclass, fields, is_dataclass
from functools import lru_cache
from typing import Iterator, Optional, Union

import numpy as np

from .aggregated import (AggAttentionParams, MhsaParams, agg_tokens, init_agg_params,
                         init_mhsa_params, interpolate_pool_bias, log_cpb, mhsa_tokens,
                         relative_coords)
from .config import ModelConfig
from .convglu import ConvGluParams, convglu_tokens, glu_hidden, init_convglu_params
from .pfa import PfaParams, init_pfa_params, pfa_tokens
from .tensor import (ConfigError, LayerNormParams, LinearParams, ShapeError, conv2d,
                     layernorm, linear, trunc_normal)
from .window import WindowGeometry, build_geometry

BIAS_MODES = ("extrapolate", "interpolate")
Mixer = Union[AggAttentionParams, PfaParams, MhsaParams, None]


@dataclass
class PatchEmbed:
    weight: np.ndarray  # [C_out, C_in, k, k]
    bias: np.ndarray
    norm: LayerNormParams
    stride: int
    pad: int


@dataclass
class Block:
    norm1: Optional[LayerNormParams]
    mixer: Mixer
    norm2: Optional[LayerNormParams]
    mlp: Optional[ConvGluParams]


@dataclass
class Stage:
    embed: PatchEmbed
    blocks: list[Block]
    norm: LayerNormParams


@dataclass
class Model:
    config: ModelConfig
    stages: list[Stage]
    head: LinearParams
    seed: Optional[int] = None

    @property
    def dtype(self) -> np.dtype:
        return self.head.weight.dtype


def _ln(dim, dtype) -> LayerNormParams:
    return LayerNormParams(np.ones(dim, dtype), np.zeros(dim, dtype))


def build_model(config: ModelConfig, seed: int = 0, dtype=np.float32) -> Model:
    """Deterministically initialised model: same config and seed give identical weights."""
    config.validate()
    rng = np.random.default_rng(seed)
    stages = []
    c_in = config.in_chans
    for i, st in enumerate(config.stages):
        k, s = config.patch_sizes[i], config.patch_strides[i]
        embed = PatchEmbed(trunc_normal(rng, (st.channels, c_in, k, k), dtype=dtype),
                           np.zeros(st.channels, dtype), _ln(st.channels, dtype), s, k // 2)
        heads = st.heads(config.head_dim)
        blocks = []
        for _ in range(st.blocks):
            if st.mixer == "A":
                mixer = init_agg_params(rng, st.channels, heads, st.window, dtype,
                                        config.query_embedding, config.positional_tokens,
                                        config.cpb_hidden)
            elif st.mixer == "P":
                mixer = init_pfa_params(rng, st.channels, heads, st.window, dtype)
            elif st.mixer == "M":
                mixer = init_mhsa_params(rng, st.channels, heads, dtype, config.query_embedding)
            else:
                mixer = None
            mlp = None
            if st.mlp_ratio > 0:
                mlp = init_convglu_params(rng, st.channels, glu_hidden(st.channels, st.mlp_ratio),
                                          dtype, config.convglu_variant)
            blocks.append(Block(_ln(st.channels, dtype) if mixer is not None else None, mixer,
                                _ln(st.channels, dtype) if mlp is not None else None, mlp))
        stages.append(Stage(embed, blocks, _ln(st.channels, dtype)))
        c_in = st.channels
    head = LinearParams(trunc_normal(rng, (config.num_classes, c_in), dtype=dtype),
                        np.zeros(config.num_classes, dtype))
    return Model(config, stages, head, seed)


# named-tensor view used by the archive and the parameter accountant

def _walk(obj, prefix: str) -> Iterator[tuple[str, object, object]]:
    """Yield ``(name, container, key)`` for every array reachable from ``obj``."""
    if isinstance(obj, list):
        for i, item in enumerate(obj):
            yield from _walk(item, f"{prefix}{i}.")
        return
    for f in fields(obj):
        val = getattr(obj, f.name)
        if isinstance(val, np.ndarray):
            yield prefix + f.name, obj, f.name
        elif isinstance(val, list) or is_dataclass(val) and not isinstance(val, ModelConfig):
            yield from _walk(val, f"{prefix}{f.name}.")


def named_tensors(model: Model) -> dict[str, np.ndarray]:
    return {name: getattr(obj, key) for name, obj, key in _walk(model, "")}


def assign_tensors(model: Model, tensors: dict[str, np.ndarray]) -> Model:
    """Replace every model tensor from ``tensors``; names and shapes must match exactly."""
    slots = {name: (obj, key) for name, obj, key in _walk(model, "")}
    missing = sorted(set(slots) - set(tensors))
    extra = sorted(set(tensors) - set(slots))
    if missing:
        raise ShapeError(f"tensor {missing[0]!r} missing from archive ({len(missing)} missing)")
    if extra:
        raise ShapeError(f"tensor {extra[0]!r} not expected by this config ({len(extra)} extra)")
    for name, (obj, key) in slots.items():
        cur, new = getattr(obj, key), tensors[name]
        if cur.shape != new.shape:
            raise ShapeError(f"tensor {name!r}: archive shape {new.shape} != expected {cur.shape}")
        setattr(obj, key, np.array(new, dtype=new.dtype, copy=True))
    return model


def parameter_count(model: Model) -> int:
    return sum(int(a.size) for a in named_tensors(model).values())


# forward

@lru_cache(maxsize=128)
def _geometry(h, w, k, ph, pw) -> WindowGeometry:
    return build_geometry(h, w, k, ph, pw)


def _pool_bias(mixer: AggAttentionParams, config: ModelConfig, stage: int,
               fh: int, fw: int, ph: int, pw: int, bias_mode: str) -> np.ndarray:
    if bias_mode == "extrapolate":
        return log_cpb(relative_coords(fh, fw, ph, pw), mixer.cpb_fc1, mixer.cpb_fc2)
    th, tw = config.feature_size(stage, config.train_resolution, config.train_resolution)
    tp = config.stages[stage].pool
    src = log_cpb(relative_coords(th, tw, tp, tp), mixer.cpb_fc1, mixer.cpb_fc2)
    return interpolate_pool_bias(src, (th, tw, tp, tp), (fh, fw, ph, pw))


def _as_batch(image: np.ndarray, model: Model) -> tuple[np.ndarray, bool]:
    x = np.asarray(image)
    if x.ndim == 3:
        x, batched = x[None], False
    elif x.ndim == 4:
        batched = True
    else:
        raise ShapeError(f"image must be [C,H,W] or [B,C,H,W], got {x.shape}")
    if x.shape[1] != model.config.in_chans:
        raise ShapeError(f"image has {x.shape[1]} channels, model expects {model.config.in_chans}")
    model.config.check_resolution(*x.shape[2:])
    return x.astype(model.dtype, copy=False), batched


def run_stage(model: Model, stage: int, x: np.ndarray, image_hw: tuple[int, int],
              mode: Optional[str] = None, bias_mode: str = "extrapolate",
              final_norm: bool = True) -> np.ndarray:
    """One stage on channel-first ``x[B, C, H, W]``; returns ``[B, H', W', C']`` tokens."""
    cfg, st = model.config, model.stages[stage]
    scfg = cfg.stages[stage]
    e = st.embed
    y = conv2d(x, e.weight, e.bias, e.stride, e.pad).transpose(0, 2, 3, 1)
    t = layernorm(y, e.norm.gamma, e.norm.beta)
    _, fh, fw, _ = t.shape
    geom = pool_bias = None
    if scfg.mixer in ("A", "P"):
        ph, pw = cfg.pool_extent(stage, *image_hw, mode)
        geom = _geometry(fh, fw, scfg.window, ph, pw)
    for blk in st.blocks:
        if blk.mixer is not None:
            h = layernorm(t, blk.norm1.gamma, blk.norm1.beta)
            if isinstance(blk.mixer, AggAttentionParams):
                pool_bias = _pool_bias(blk.mixer, cfg, stage, fh, fw, geom.pool_h,
                                       geom.pool_w, bias_mode)
                h = agg_tokens(h, blk.mixer, geom, pool_bias=pool_bias)
            elif isinstance(blk.mixer, PfaParams):
                h = pfa_tokens(h, blk.mixer, geom)
            else:
                b, hh, ww, c = h.shape
                h = mhsa_tokens(h.reshape(b, hh * ww, c), blk.mixer).reshape(h.shape)
            t = t + h
        if blk.mlp is not None:
            t = t + convglu_tokens(layernorm(t, blk.norm2.gamma, blk.norm2.beta), blk.mlp)
    if final_norm:
        t = layernorm(t, st.norm.gamma, st.norm.beta)
    return t


def forward_features(model: Model, image: np.ndarray, mode: Optional[str] = None,
                     bias_mode: str = "extrapolate", upto: Optional[int] = None,
                     final_norm: bool = True) -> list[np.ndarray]:
    """Per-stage ``[B, H', W', C']`` features up to stage ``upto`` (inclusive).

    ``final_norm=False`` leaves the last returned stage before its closing norm.
    """
    if bias_mode not in BIAS_MODES:
        raise ConfigError(f"bias_mode must be one of {BIAS_MODES}, got {bias_mode!r}")
    x, _ = _as_batch(image, model)
    hw = x.shape[2:]
    last = model.config.num_stages - 1 if upto is None else upto
    feats = []
    for i in range(last + 1):
        t = run_stage(model, i, x, hw, mode, bias_mode, final_norm or i < last)
        feats.append(t)
        x = np.ascontiguousarray(t.transpose(0, 3, 1, 2))
    return feats


def forward(model: Model, image: np.ndarray, mode: Optional[str] = None,
            bias_mode: str = "extrapolate") -> np.ndarray:
    """Class logits for ``image[3, H, W]`` (returns ``[classes]``) or a batch ``[B, 3, H, W]``.

    ``mode`` picks normal (pooled grid follows the input) or linear (fixed
    pooled grid) inference; ``bias_mode`` extrapolates the pooled-path bias
    with the coordinate MLP or interpolates the training-resolution table.
    """
    batched = np.ndim(image) == 4
    t = forward_features(model, image, mode, bias_mode)[-1]
    logits = linear(t.mean(axis=(1, 2)), model.head)
    return logits if batched else logits[0]
