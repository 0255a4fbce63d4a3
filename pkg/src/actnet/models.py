"""The two video classifiers.

``Z``: a miniature bottleneck 3D ResNet (stem -> max pool -> four residual
stages -> pooled head). ``A``: a miniature video transformer with divided
space-time attention. Both return ``(logits, embedding)`` where the
embedding is the pooled pre-classifier feature passed through a per-model
linear adapter into a shared space.
"""

from __future__ import annotations

import dataclasses
import math
import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

ARCHES = ("Z", "A")


@dataclass
class ModelConfig:
    num_classes: int = 8
    clip_frames_primary: int = 4
    clip_frames_auxiliary: int = 8
    spatial_size: int = 16
    channels: int = 3
    resnet_widths: tuple[int, ...] = (8, 16, 32, 64)
    resnet_blocks: tuple[int, ...] = (1, 1, 1, 1)
    resnet_bottleneck: int = 2
    resnet_head_dropout: float = 0.5
    vit_patch: int = 4
    vit_embed: int = 32
    vit_heads: int = 2
    vit_layers: int = 2
    vit_mlp_hidden: int = 64
    embed_dim_out: int = 32
    ln_eps: float = 1e-6
    gelu_tanh: bool = True

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.spatial_size % self.vit_patch:
            raise ValueError(f"spatial_size {self.spatial_size} not divisible by vit_patch {self.vit_patch}")
        if self.vit_embed % self.vit_heads:
            raise ValueError(f"vit_embed {self.vit_embed} not divisible by vit_heads {self.vit_heads}")
        if len(self.resnet_widths) != 4 or len(self.resnet_blocks) != 4:
            raise ValueError("resnet_widths and resnet_blocks need one entry per stage (4)")
        if min(self.resnet_widths) < 1 or min(self.resnet_blocks) < 1:
            raise ValueError("resnet widths and block counts must be positive")
        if not 0.0 <= self.resnet_head_dropout < 1.0:
            raise ValueError("resnet_head_dropout must be in [0, 1)")
        for name in ("clip_frames_primary", "clip_frames_auxiliary", "channels", "vit_layers",
                     "vit_mlp_hidden", "embed_dim_out", "resnet_bottleneck"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass
class ModelParams:
    params: dict[str, Tensor]
    init_seed: int
    arch_tag: str
    config: ModelConfig = field(default_factory=ModelConfig)

    def __getitem__(self, key: str) -> Tensor:
        return self.params[key]

    def __iter__(self):
        return iter(self.params.items())

    def __len__(self) -> int:
        return len(self.params)

    def num_parameters(self) -> int:
        return int(np.sum([p.size for p in self.params.values()]))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def copy(self) -> "ModelParams":
        return ModelParams(
            {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()},
            self.init_seed,
            self.arch_tag,
            dataclasses.replace(self.config),
        )


# --------------------------------------------------------------------------
# initialisation


def _stage_layout(cfg: ModelConfig) -> Iterable[tuple[str, int, int, int, int]]:
    """Yield (block name, in width, out width, spatial stride, temporal kernel)."""
    width_in = cfg.resnet_widths[0]
    for s, (width, blocks) in enumerate(zip(cfg.resnet_widths, cfg.resnet_blocks)):
        stage = s + 2  # res2..res5
        for b in range(blocks):
            stride = 2 if (b == 0 and stage > 2) else 1
            kt = 3 if stage >= 4 else 1
            yield f"res{stage}.{b}", width_in, width, stride, kt
            width_in = width


def _inner_width(cfg: ModelConfig, width: int) -> int:
    return max(1, width // cfg.resnet_bottleneck)


class _Init:
    def __init__(self, seed: int, dtype):
        self.rng = np.random.default_rng(seed)
        self.dtype = dtype
        self.out: dict[str, Tensor] = {}

    def normal(self, name, shape, fan_in, gain=2.0):
        std = math.sqrt(gain / fan_in)
        self.out[name] = Tensor(self.rng.normal(0.0, std, size=shape).astype(self.dtype), requires_grad=True)

    def zeros(self, name, shape):
        self.out[name] = Tensor(np.zeros(shape, dtype=self.dtype), requires_grad=True)

    def ones(self, name, shape):
        self.out[name] = Tensor(np.ones(shape, dtype=self.dtype), requires_grad=True)

    def linear(self, name, d_in, d_out, gain=1.0):
        self.normal(f"{name}.w", (d_in, d_out), d_in, gain)
        self.zeros(f"{name}.b", (d_out,))


def _init_primary(cfg: ModelConfig, ini: _Init) -> None:
    C, w0 = cfg.channels, cfg.resnet_widths[0]
    ini.normal("stem.w", (w0, C, 3, 3, 3), C * 27)
    ini.zeros("stem.b", (w0,))
    for name, cin, cout, _stride, kt in _stage_layout(cfg):
        inner = _inner_width(cfg, cout)
        ini.normal(f"{name}.a.w", (inner, cin, kt, 1, 1), cin * kt)
        ini.zeros(f"{name}.a.b", (inner,))
        ini.normal(f"{name}.b.w", (inner, inner, 1, 3, 3), inner * 9)
        ini.zeros(f"{name}.b.b", (inner,))
        # residual branch output starts small so identity paths dominate early
        ini.normal(f"{name}.c.w", (cout, inner, 1, 1, 1), inner, gain=0.5)
        ini.zeros(f"{name}.c.b", (cout,))
        if cin != cout or _stride != 1:
            ini.normal(f"{name}.proj.w", (cout, cin, 1, 1, 1), cin, gain=1.0)
            ini.zeros(f"{name}.proj.b", (cout,))
    feat = cfg.resnet_widths[-1]
    ini.linear("head", feat, cfg.num_classes)
    ini.linear("adapter", feat, cfg.embed_dim_out)


def _init_auxiliary(cfg: ModelConfig, ini: _Init) -> None:
    D, p = cfg.vit_embed, cfg.vit_patch
    n_patch = (cfg.spatial_size // p) ** 2
    ini.linear("patch", cfg.channels * p * p, D)
    ini.normal("pos_embed", (n_patch, D), 1, gain=0.02 ** 2)
    ini.normal("time_embed", (cfg.clip_frames_auxiliary, D), 1, gain=0.02 ** 2)
    for i in range(cfg.vit_layers):
        for part in ("temporal", "spatial"):
            ini.ones(f"block{i}.{part}.ln.g", (D,))
            ini.zeros(f"block{i}.{part}.ln.b", (D,))
            ini.linear(f"block{i}.{part}.qkv", D, 3 * D)
            ini.linear(f"block{i}.{part}.out", D, D)
        ini.ones(f"block{i}.mlp.ln.g", (D,))
        ini.zeros(f"block{i}.mlp.ln.b", (D,))
        ini.linear(f"block{i}.mlp.fc1", D, cfg.vit_mlp_hidden, gain=2.0)
        ini.linear(f"block{i}.mlp.fc2", cfg.vit_mlp_hidden, D)
    ini.ones("norm.g", (D,))
    ini.zeros("norm.b", (D,))
    ini.linear("head", D, cfg.num_classes)
    ini.linear("adapter", D, cfg.embed_dim_out)


def init_params(config: ModelConfig, arch: str, seed: int, dtype=None) -> ModelParams:
    """Fan-in scaled normal weights, zero biases, unit layer-norm gains."""
    config.validate()
    if arch not in ARCHES:
        raise ValueError(f"arch must be one of {ARCHES}, got {arch!r}")
    # distinct streams for Z and A even under a shared seed
    ini = _Init(seed * 1009 + zlib.crc32(arch.encode()), dtype or T.default_dtype())
    (_init_primary if arch == "Z" else _init_auxiliary)(config, ini)
    return ModelParams(ini.out, seed, arch, dataclasses.replace(config))


def vit_param_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count of the auxiliary transformer."""
    D, M, p = cfg.vit_embed, cfg.vit_mlp_hidden, cfg.vit_patch
    n_patch = (cfg.spatial_size // p) ** 2
    patch = cfg.channels * p * p * D + D
    embeds = n_patch * D + cfg.clip_frames_auxiliary * D
    attn = 2 * D + (D * 3 * D + 3 * D) + (D * D + D)
    mlp = 2 * D + (D * M + M) + (M * D + D)
    head = 2 * D + (D * cfg.num_classes + cfg.num_classes) + (D * cfg.embed_dim_out + cfg.embed_dim_out)
    return patch + embeds + cfg.vit_layers * (2 * attn + mlp) + head


# --------------------------------------------------------------------------
# forward passes


def _linear(x: Tensor, P: ModelParams, name: str) -> Tensor:
    return T.linear(x, P[f"{name}.w"], P[f"{name}.b"])


def _conv(x, P, name, stride=1, padding=0):
    return T.conv3d(x, P[f"{name}.w"], P[f"{name}.b"], stride=stride, padding=padding)


def _check_clip(clip: Tensor, cfg: ModelConfig, frames: int, who: str) -> None:
    want = (cfg.channels, frames, cfg.spatial_size, cfg.spatial_size)
    if clip.ndim != 5 or tuple(clip.shape[1:]) != want:
        raise ShapeError(who, f"expected clip batch B x {'x'.join(map(str, want))}, got {clip.shape}")


def _bottleneck(x: Tensor, P: ModelParams, name: str, stride: int, kt: int) -> Tensor:
    h = T.relu(_conv(x, P, f"{name}.a", padding=(kt // 2, 0, 0)))
    h = T.relu(_conv(h, P, f"{name}.b", stride=(1, stride, stride), padding=(0, 1, 1)))
    h = _conv(h, P, f"{name}.c")
    short = _conv(x, P, f"{name}.proj", stride=(1, stride, stride)) if f"{name}.proj.w" in P.params else x
    return T.relu(T.add(h, short))


def primary_features(params: ModelParams, clip: Tensor) -> Tensor:
    """Globally pooled res5 features, (B, widths[-1])."""
    cfg = params.config
    _check_clip(clip, cfg, cfg.clip_frames_primary, "primary_forward")
    h = T.relu(_conv(clip, params, "stem", stride=(1, 2, 2), padding=(1, 1, 1)))
    h = T.max_pool3d(h, (1, 2, 2), (1, 2, 2))
    for name, _cin, _cout, stride, kt in _stage_layout(cfg):
        h = _bottleneck(h, params, name, stride, kt)
    return T.global_avg_pool(h)


def primary_forward(
    params: ModelParams,
    clip: Tensor,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, Tensor]:
    if params.arch_tag != "Z":
        raise ValueError("primary_forward needs Z parameters")
    pooled = primary_features(params, clip)
    embedding = _linear(pooled, params, "adapter")
    h = T.dropout(pooled, params.config.resnet_head_dropout, rng, train=train_mode)
    logits = _linear(h, params, "head")
    return logits, embedding


def _mha(x: Tensor, P: ModelParams, name: str, heads: int) -> Tensor:
    """Multi-head self-attention over axis -2 of (..., L, D)."""
    qkv = _linear(x, P, f"{name}.qkv")  # ..., L, 3D
    return _linear(T.multi_head_attention(qkv, heads), P, f"{name}.out")


def _ln(x: Tensor, P: ModelParams, name: str, eps: float) -> Tensor:
    return T.layer_norm(x, P[f"{name}.g"], P[f"{name}.b"], eps)


def temporal_attention(x: Tensor, P: ModelParams, name: str, heads: int, eps: float) -> Tensor:
    """Residual attention across frames at each spatial position; x is (B, T, N, D)."""
    h = _ln(x, P, f"{name}.ln", eps)
    h = T.transpose(h, (0, 2, 1, 3))  # B, N, T, D
    h = _mha(h, P, name, heads)
    return T.add(x, T.transpose(h, (0, 2, 1, 3)))


def spatial_attention(x: Tensor, P: ModelParams, name: str, heads: int, eps: float) -> Tensor:
    """Residual attention among patches within each frame; x is (B, T, N, D)."""
    h = _mha(_ln(x, P, f"{name}.ln", eps), P, name, heads)
    return T.add(x, h)


def _mlp(x: Tensor, P: ModelParams, name: str, eps: float) -> Tensor:
    h = _ln(x, P, f"{name}.ln", eps)
    h = T.gelu(_linear(h, P, f"{name}.fc1"), approximate=P.config.gelu_tanh)
    return T.add(x, _linear(h, P, f"{name}.fc2"))


def patchify(clip: Tensor, patch: int) -> Tensor:
    """(B, C, T, H, W) -> (B, T, N, C*p*p) with patches in row-major order."""
    B, C, Tn, H, W = clip.shape
    hp, wp = H // patch, W // patch
    x = T.reshape(clip, (B, C, Tn, hp, patch, wp, patch))
    x = T.transpose(x, (0, 2, 3, 5, 1, 4, 6))
    return T.reshape(x, (B, Tn, hp * wp, C * patch * patch))


def auxiliary_tokens(params: ModelParams, clip: Tensor) -> Tensor:
    """Final normalised token grid, (B, T, N, D)."""
    cfg = params.config
    _check_clip(clip, cfg, cfg.clip_frames_auxiliary, "auxiliary_forward")
    x = _linear(patchify(clip, cfg.vit_patch), params, "patch")
    x = T.add(x, params["pos_embed"])  # N, D broadcasts over B, T
    x = T.add(x, T.reshape(params["time_embed"], (cfg.clip_frames_auxiliary, 1, cfg.vit_embed)))
    for i in range(cfg.vit_layers):
        x = temporal_attention(x, params, f"block{i}.temporal", cfg.vit_heads, cfg.ln_eps)
        x = spatial_attention(x, params, f"block{i}.spatial", cfg.vit_heads, cfg.ln_eps)
        x = _mlp(x, params, f"block{i}.mlp", cfg.ln_eps)
    return _ln(x, params, "norm", cfg.ln_eps)


def auxiliary_forward(
    params: ModelParams,
    clip: Tensor,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, Tensor]:
    if params.arch_tag != "A":
        raise ValueError("auxiliary_forward needs A parameters")
    x = auxiliary_tokens(params, clip)
    pooled = T.mean(x, axis=(1, 2))
    return _linear(pooled, params, "head"), _linear(pooled, params, "adapter")


def forward(
    params: ModelParams,
    clip: Tensor,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, Tensor]:
    """Dispatch on the parameter set's architecture tag."""
    fn = primary_forward if params.arch_tag == "Z" else auxiliary_forward
    return fn(params, clip, train_mode, rng)


def embed(params: ModelParams, clip: Tensor) -> Tensor:
    """Embedding head only (eval mode)."""
    if params.arch_tag == "Z":
        return _linear(primary_features(params, clip), params, "adapter")
    pooled = T.mean(auxiliary_tokens(params, clip), axis=(1, 2))
    return _linear(pooled, params, "adapter")


def frames_for(params: ModelParams) -> int:
    cfg = params.config
    return cfg.clip_frames_primary if params.arch_tag == "Z" else cfg.clip_frames_auxiliary


ForwardFn = Callable[..., tuple[Tensor, Tensor]]
