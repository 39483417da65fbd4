"""Encoder, reconstruction decoder, and multi-level anatomy classifier.

The encoder is a staged transformer: full self-attention within each stage,
2x2 patch merging between stages (spatial extent halves, channel dim
doubles), learned absolute positional embeddings, pre-norm blocks with
stochastic depth on both residual branches. The decoder is one linear +
pixel-shuffle rearrangement per upsampling step ending in a sigmoid; the
classifier mean-pools final-stage tokens through a 2-layer MLP to one
sigmoid score per ontology node.

Masked-patch corruption happens in embedding space, before positional
embeddings are added, so masked tokens still carry position information.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from sonomim.autodiff import Tensor, ops
from sonomim.imaging import patchify_array


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    patch_size: int = 4
    channels: int = 1
    embed_dim: int = 64
    depths: tuple[int, ...] = (2, 2)
    downsample: int = 2
    heads: int = 2
    mlp_ratio: float = 4.0
    drop_path: float = 0.1
    classifier_hidden: int = 128
    level_counts: tuple[int, int, int] = (2, 4, 8)

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ModelError("patch size must divide image size")
        if self.channels not in (1, 3):
            raise ModelError("channels must be 1 or 3")
        if not self.depths:
            raise ModelError("need at least one stage")
        if not 0.0 <= self.drop_path < 1.0:
            raise ModelError("drop-path rate must be in [0, 1)")
        for s in range(self.n_stages):
            if self.stage_dim(s) % self.heads:
                raise ModelError(f"stage {s} dim not divisible by {self.heads} heads")
        g = self.base_grid
        for _ in range(self.n_stages - 1):
            if g % self.downsample:
                raise ModelError("grid not divisible by downsample factor")
            g //= self.downsample

    @property
    def n_stages(self) -> int:
        return len(self.depths)

    @property
    def base_grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_tokens(self) -> int:
        return self.base_grid * self.base_grid

    def stage_grid(self, s: int) -> int:
        return self.base_grid // (self.downsample**s)

    def stage_dim(self, s: int) -> int:
        return self.embed_dim * (self.downsample**s)

    @property
    def final_dim(self) -> int:
        return self.stage_dim(self.n_stages - 1)

    @property
    def n_classes(self) -> int:
        return int(sum(self.level_counts))

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "patch_size": self.patch_size,
            "channels": self.channels,
            "embed_dim": self.embed_dim,
            "depths": list(self.depths),
            "downsample": self.downsample,
            "heads": self.heads,
            "mlp_ratio": self.mlp_ratio,
            "drop_path": self.drop_path,
            "classifier_hidden": self.classifier_hidden,
            "level_counts": list(self.level_counts),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["depths"] = tuple(d["depths"])
        d["level_counts"] = tuple(d["level_counts"])
        return cls(**d)


@dataclass
class ModelParams:
    cfg: ModelConfig
    tensors: dict[str, Tensor]
    dtype: np.dtype = field(default_factory=lambda: np.dtype(np.float32))

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors.keys())

    def values(self) -> list[Tensor]:
        return list(self.tensors.values())

    def count(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def all_finite(self) -> bool:
        return all(np.isfinite(t.data).all() for t in self.tensors.values())


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float32):
    """Normal(0, std) resampled until every entry lies within 2 std."""
    out = rng.normal(0.0, std, size=shape)
    while True:
        bad = np.abs(out) > 2.0 * std
        n_bad = int(bad.sum())
        if n_bad == 0:
            break
        out[bad] = rng.normal(0.0, std, size=n_bad)
    return out.astype(dtype)


def init_params(
    cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32
) -> ModelParams:
    """Truncated-normal projections, zero biases, unit layer-norm scales."""
    dtype = np.dtype(dtype)
    t: dict[str, Tensor] = {}

    def proj(name, shape):
        t[name] = Tensor(trunc_normal(rng, shape, dtype=dtype), requires_grad=True)

    def zeros(name, shape):
        t[name] = Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    def ones(name, shape):
        t[name] = Tensor(np.ones(shape, dtype=dtype), requires_grad=True)

    proj("patch_embed.weight", (cfg.patch_dim, cfg.embed_dim))
    zeros("patch_embed.bias", (cfg.embed_dim,))
    proj("pos_embed", (1, cfg.n_tokens, cfg.embed_dim))
    proj("mask_token", (cfg.embed_dim,))

    for s, depth in enumerate(cfg.depths):
        dim = cfg.stage_dim(s)
        hidden = int(round(dim * cfg.mlp_ratio))
        for b in range(depth):
            pre = f"stages.{s}.blocks.{b}"
            ones(f"{pre}.norm1.gamma", (dim,))
            zeros(f"{pre}.norm1.beta", (dim,))
            proj(f"{pre}.attn.qkv.weight", (dim, 3 * dim))
            # no key bias: softmax cancels a constant shift of the keys,
            # which would leave an exactly-zero-gradient parameter
            zeros(f"{pre}.attn.q_bias", (dim,))
            zeros(f"{pre}.attn.v_bias", (dim,))
            proj(f"{pre}.attn.proj.weight", (dim, dim))
            zeros(f"{pre}.attn.proj.bias", (dim,))
            ones(f"{pre}.norm2.gamma", (dim,))
            zeros(f"{pre}.norm2.beta", (dim,))
            proj(f"{pre}.mlp.fc1.weight", (dim, hidden))
            zeros(f"{pre}.mlp.fc1.bias", (hidden,))
            proj(f"{pre}.mlp.fc2.weight", (hidden, dim))
            zeros(f"{pre}.mlp.fc2.bias", (dim,))
        if s < cfg.n_stages - 1:
            ds = cfg.downsample
            proj(f"merge.{s}.weight", (ds * ds * dim, ds * dim))
            zeros(f"merge.{s}.bias", (ds * dim,))

    ones("final_norm.gamma", (cfg.final_dim,))
    zeros("final_norm.beta", (cfg.final_dim,))

    # decoder: one linear + pixel shuffle per upsampling step
    ds = cfg.downsample
    for s in range(cfg.n_stages - 1):
        dim = cfg.final_dim // (ds**s)
        proj(f"decoder.up{s}.weight", (dim, ds * ds * (dim // ds)))
        zeros(f"decoder.up{s}.bias", (ds * ds * (dim // ds),))
    proj("decoder.out.weight", (cfg.embed_dim, cfg.patch_dim))
    zeros("decoder.out.bias", (cfg.patch_dim,))

    proj("classifier.fc1.weight", (cfg.final_dim, cfg.classifier_hidden))
    zeros("classifier.fc1.bias", (cfg.classifier_hidden,))
    proj("classifier.fc2.weight", (cfg.classifier_hidden, cfg.n_classes))
    zeros("classifier.fc2.bias", (cfg.n_classes,))

    return ModelParams(cfg=cfg, tensors=t, dtype=dtype)


# ---------------------------------------------------------------------------
# forward pieces

def apply_drop_path(
    x: Tensor,
    rate: float,
    rng: np.random.Generator | None,
    training: bool,
) -> Tensor:
    """Stochastic depth on a residual branch of shape (B, ...).

    In training each sample's branch is zeroed with probability ``rate`` and
    scaled by 1/(1-rate) otherwise; in eval mode this is the identity.
    """
    if not 0.0 <= rate < 1.0:
        raise ModelError(f"drop-path rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ModelError("training-mode drop path needs an rng")
    keep = (rng.random(x.shape[0]) >= rate).astype(x.data.dtype)
    keep /= np.float64(1.0 - rate).astype(x.data.dtype)
    shape = (x.shape[0],) + (1,) * (x.ndim - 1)
    return ops.mul(x, ops.constant(keep.reshape(shape)))


def _linear(x: Tensor, params: ModelParams, name: str) -> Tensor:
    return ops.add(ops.matmul(x, params[f"{name}.weight"]), params[f"{name}.bias"])


def _attention(x: Tensor, params: ModelParams, pre: str, heads: int) -> Tensor:
    b, n, c = x.shape
    dh = c // heads

    def split_heads(t):
        return ops.transpose(ops.reshape(t, (b, n, heads, dh)), (0, 2, 1, 3))

    qkv = ops.matmul(x, params[f"{pre}.attn.qkv.weight"])  # (B, N, 3C)
    q = split_heads(ops.add(ops.slice_(qkv, (..., slice(0, c))), params[f"{pre}.attn.q_bias"]))
    k = split_heads(ops.slice_(qkv, (..., slice(c, 2 * c))))
    v = split_heads(ops.add(ops.slice_(qkv, (..., slice(2 * c, 3 * c))), params[f"{pre}.attn.v_bias"]))
    scores = ops.matmul(q, ops.transpose(k, (0, 1, 3, 2)))
    scores = ops.mul(scores, 1.0 / np.sqrt(dh))
    attn = ops.softmax(scores)
    out = ops.matmul(attn, v)  # (B, H, N, dh)
    out = ops.reshape(ops.transpose(out, (0, 2, 1, 3)), (b, n, c))
    return _linear(out, params, f"{pre}.attn.proj")


def _block(
    x: Tensor,
    params: ModelParams,
    pre: str,
    cfg: ModelConfig,
    rng,
    training: bool,
) -> Tensor:
    h = ops.layer_norm(x, params[f"{pre}.norm1.gamma"], params[f"{pre}.norm1.beta"])
    h = _attention(h, params, pre, cfg.heads)
    x = ops.add(x, apply_drop_path(h, cfg.drop_path, rng, training))
    h = ops.layer_norm(x, params[f"{pre}.norm2.gamma"], params[f"{pre}.norm2.beta"])
    h = ops.gelu(_linear(h, params, f"{pre}.mlp.fc1"))
    h = _linear(h, params, f"{pre}.mlp.fc2")
    return ops.add(x, apply_drop_path(h, cfg.drop_path, rng, training))


def _merge_patches(x: Tensor, params: ModelParams, s: int, cfg: ModelConfig) -> Tensor:
    """Concatenate ds x ds neighborhoods and project: halves the grid extent,
    doubles the channel dim."""
    b, g, _, c = x.shape
    ds = cfg.downsample
    go = g // ds
    x = ops.reshape(x, (b, go, ds, go, ds, c))
    x = ops.transpose(x, (0, 1, 3, 2, 4, 5))
    x = ops.reshape(x, (b, go, go, ds * ds * c))
    x = ops.add(ops.matmul(x, params[f"merge.{s}.weight"]), params[f"merge.{s}.bias"])
    return x


def encode(
    params: ModelParams,
    corrupted: Tensor,
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> list[Tensor]:
    """Run the staged encoder over (B, N, D) token embeddings.

    Returns one (B, g, g, C_s) feature map per stage; the last one is
    post final-layer-norm. Eval mode is a pure function of (params, input).
    """
    cfg = params.cfg
    b, n, d = corrupted.shape
    if n != cfg.n_tokens or d != cfg.embed_dim:
        raise ModelError(
            f"expected (B, {cfg.n_tokens}, {cfg.embed_dim}) embeddings, got {corrupted.shape}"
        )
    x = ops.add(corrupted, params["pos_embed"])
    feats: list[Tensor] = []
    for s, depth in enumerate(cfg.depths):
        g = cfg.stage_grid(s)
        for blk in range(depth):
            x = _block(x, params, f"stages.{s}.blocks.{blk}", cfg, rng, training)
        if s == cfg.n_stages - 1:
            x = ops.layer_norm(x, params["final_norm.gamma"], params["final_norm.beta"])
        stage_map = ops.reshape(x, (b, g, g, cfg.stage_dim(s)))
        feats.append(stage_map)
        if s < cfg.n_stages - 1:
            merged = _merge_patches(stage_map, params, s, cfg)
            go = cfg.stage_grid(s + 1)
            x = ops.reshape(merged, (b, go * go, cfg.stage_dim(s + 1)))
    return feats


def _pixel_shuffle(x: Tensor, r: int) -> Tensor:
    b, h, w, c = x.shape
    co = c // (r * r)
    x = ops.reshape(x, (b, h, w, r, r, co))
    x = ops.transpose(x, (0, 1, 3, 2, 4, 5))
    return ops.reshape(x, (b, h * r, w * r, co))


def reconstruct(params: ModelParams, feats: Sequence[Tensor]) -> Tensor:
    """Upsample final-stage features back to a full (B, H, W, C) image in
    (0, 1): one linear + pixel-shuffle per step, sigmoid at the end."""
    cfg = params.cfg
    x = feats[-1]
    for s in range(cfg.n_stages - 1):
        x = _linear(x, params, f"decoder.up{s}")
        x = _pixel_shuffle(x, cfg.downsample)
    x = _linear(x, params, "decoder.out")  # (B, g, g, p*p*C)
    x = _pixel_shuffle(x, cfg.patch_size)
    if x.shape[1:] != (cfg.image_size, cfg.image_size, cfg.channels):
        raise ModelError(f"decoder produced {x.shape}, config wants {cfg.image_size}")
    return ops.sigmoid(x)


def classify(params: ModelParams, feats: Sequence[Tensor]) -> Tensor:
    """Mean-pool final-stage tokens -> 2-layer MLP -> per-node sigmoid."""
    cfg = params.cfg
    x = feats[-1]
    b = x.shape[0]
    x = ops.reshape(x, (b, -1, cfg.final_dim))
    x = ops.mean(x, axis=1)
    x = ops.gelu(_linear(x, params, "classifier.fc1"))
    x = _linear(x, params, "classifier.fc2")
    return ops.sigmoid(x)


def embed_patches(params: ModelParams, patches) -> Tensor:
    """Project raw (B, N, p*p*C) patch vectors into embedding space."""
    if not isinstance(patches, Tensor):
        patches = ops.constant(np.asarray(patches, dtype=params.dtype))
    return ops.add(
        ops.matmul(patches, params["patch_embed.weight"]), params["patch_embed.bias"]
    )


def forward_pretrain(
    params: ModelParams,
    images: np.ndarray,
    mask_bool: np.ndarray,
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> tuple[Tensor, Tensor]:
    """Shared corrupted forward for both heads.

    images: (B, H, W, C) float array; mask_bool: (B, N). Returns the
    reconstructed batch and the (B, n_classes) scores.
    """
    from sonomim.imaging import substitute_mask_token

    cfg = params.cfg
    patches = patchify_array(np.asarray(images, dtype=params.dtype), cfg.patch_size)
    emb = embed_patches(params, patches)
    corrupted = substitute_mask_token(emb, mask_bool, params["mask_token"])
    feats = encode(params, corrupted, rng=rng, training=training)
    return reconstruct(params, feats), classify(params, feats)
