"""Toy ViT encoder and the pair-scoring head.

One set of transformer weights serves two inputs: a single image (retrieval
embedding) and a query/gallery pair glued side by side along the width (the
reranker).  The two inputs differ only in which positional table they use.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_MAGIC = b"STIRW01\0"


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    image_h: int = 32
    image_w: int = 32
    channels: int = 3
    patch_size: int = 8
    embed_dim: int = 64
    num_heads: int = 4
    depth: int = 2
    mlp_ratio: float = 2.0
    normalize_embeddings: bool = True
    head_dropout: float = 0.5

    def __post_init__(self):
        for name in ("image_h", "image_w", "channels", "patch_size", "embed_dim", "num_heads", "depth"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.image_h % self.patch_size or self.image_w % self.patch_size:
            raise ConfigError("image dimensions must be divisible by patch_size")
        if self.embed_dim % self.num_heads:
            raise ConfigError("embed_dim must be divisible by num_heads")
        if self.embed_dim % 2:
            raise ConfigError("embed_dim must be even (pair head halves it)")
        if self.mlp_ratio <= 0:
            raise ConfigError("mlp_ratio must be positive")
        if not 0.0 <= self.head_dropout < 1.0:
            raise ConfigError("head_dropout must lie in [0, 1)")

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_h // self.patch_size, self.image_w // self.patch_size

    @property
    def num_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def hidden_dim(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))

    @classmethod
    def from_dict(cls, d: Mapping) -> EncoderConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown encoder config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def parameter_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    D, H = config.embed_dim, config.hidden_dim
    shapes: dict[str, tuple[int, ...]] = {
        "patch.w": (config.patch_dim, D),
        "patch.b": (D,),
        "pos.single": (config.num_patches, D),
        "pos.pair": (2 * config.num_patches, D),
    }
    for i in range(config.depth):
        p = f"blocks.{i}."
        shapes.update(
            {
                p + "ln1.g": (D,),
                p + "ln1.b": (D,),
                p + "attn.wq": (D, D),
                p + "attn.bq": (D,),
                p + "attn.wk": (D, D),
                p + "attn.bk": (D,),
                p + "attn.wv": (D, D),
                p + "attn.bv": (D,),
                p + "attn.wo": (D, D),
                p + "attn.bo": (D,),
                p + "ln2.g": (D,),
                p + "ln2.b": (D,),
                p + "mlp.w1": (D, H),
                p + "mlp.b1": (H,),
                p + "mlp.w2": (H, D),
                p + "mlp.b2": (D,),
            }
        )
    shapes.update(
        {
            "norm.g": (D,),
            "norm.b": (D,),
            "head.w1": (D, D // 2),
            "head.b1": (D // 2,),
            "head.w2": (D // 2, 1),
            "head.b2": (1,),
        }
    )
    return shapes


HEAD_PARAMS = ("head.w1", "head.b1", "head.w2", "head.b2")


class EncoderWeights:
    """Named parameter arrays for the encoder plus the pair head."""

    def __init__(self, config: EncoderConfig, params: Mapping[str, np.ndarray]):
        expected = parameter_shapes(config)
        if set(params) != set(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise CheckpointError(f"parameter set mismatch; missing={missing} extra={extra}")
        for name, shape in expected.items():
            if tuple(params[name].shape) != shape:
                raise CheckpointError(f"{name}: expected shape {shape}, got {params[name].shape}")
        self.config = config
        self.params = {name: np.asarray(params[name]) for name in expected}

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def names(self) -> list[str]:
        return list(self.params)

    def encoder_names(self) -> list[str]:
        return [n for n in self.params if not n.startswith("head.")]

    def embedding_names(self) -> list[str]:
        """Parameters read by the single-image path."""
        return [n for n in self.encoder_names() if n != "pos.pair"]

    def pair_names(self) -> list[str]:
        """Parameters read by the pair path (encoder with the pair table, plus head)."""
        return [n for n in self.params if n != "pos.single"]

    def copy(self) -> EncoderWeights:
        return EncoderWeights(self.config, {k: v.copy() for k, v in self.params.items()})

    def astype(self, dtype) -> EncoderWeights:
        return EncoderWeights(self.config, {k: v.astype(dtype) for k, v in self.params.items()})

    def tensors(self, trainable: Iterable[str] = ()) -> dict[str, Tensor]:
        trainable = set(trainable)
        return {k: Tensor(v, requires_grad=k in trainable, dtype=v.dtype) for k, v in self.params.items()}

    def equals(self, other: EncoderWeights, names: Iterable[str] | None = None) -> bool:
        names = self.names() if names is None else list(names)
        return all(np.array_equal(self.params[n], other.params[n]) for n in names)


def pair_positions_from_single(pos_single: np.ndarray, config: EncoderConfig) -> np.ndarray:
    """Duplicate the single-image table over both halves of the doubled-width grid."""
    gh, gw = config.grid
    grid = pos_single.reshape(gh, gw, -1)
    return np.concatenate([grid, grid], axis=1).reshape(2 * gh * gw, -1).copy()


def init_weights(config: EncoderConfig, rng_seed: int) -> EncoderWeights:
    rng = np.random.default_rng(rng_seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in parameter_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if name == "pos.pair":
            continue
        if name == "pos.single":
            arr = rng.normal(0.0, 0.02, shape)
        elif name == "head.w2":
            arr = np.zeros(shape)
        elif len(shape) == 2:
            std = math.sqrt(2.0 / (shape[0] + shape[1]))
            arr = rng.normal(0.0, std, shape)
        elif leaf == "g":
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        params[name] = arr.astype(ad.DEFAULT_DTYPE)
    params["pos.pair"] = pair_positions_from_single(params["pos.single"], config)
    return EncoderWeights(config, params)


def pair_init_from_triplet(weights: EncoderWeights) -> EncoderWeights:
    """Copy of trained single-image weights with the pair table re-derived from the single one."""
    out = weights.copy()
    out.params["pos.pair"] = pair_positions_from_single(out.params["pos.single"], out.config)
    return out


# -- forward passes ----------------------------------------------------------------
def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """Split ``[h, w, c]`` (or ``[b, h, w, c]``) into row-major flattened patches."""
    image = np.asarray(image)
    single = image.ndim == 3
    if single:
        image = image[None]
    if image.ndim != 4:
        raise ConfigError(f"expected [h,w,c] or [b,h,w,c] image, got shape {image.shape}")
    b, h, w, c = image.shape
    if h % patch_size or w % patch_size:
        raise ConfigError(f"image {h}x{w} not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    out = (
        image.reshape(b, gh, patch_size, gw, patch_size, c)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(b, gh * gw, patch_size * patch_size * c)
    )
    return out[0] if single else out


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return x @ w + b


def _attention(x: Tensor, p: Mapping[str, Tensor], prefix: str, num_heads: int) -> Tensor:
    B, T, D = x.shape
    dh = D // num_heads

    def heads(t: Tensor) -> Tensor:
        return t.reshape(B, T, num_heads, dh).transpose(0, 2, 1, 3)

    q = heads(_linear(x, p[prefix + "wq"], p[prefix + "bq"]))
    k = heads(_linear(x, p[prefix + "wk"], p[prefix + "bk"]))
    v = heads(_linear(x, p[prefix + "wv"], p[prefix + "bv"]))
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
    attn = ad.softmax(scores, axis=-1)
    ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(B, T, D)
    return _linear(ctx, p[prefix + "wo"], p[prefix + "bo"])


def encode_patches(patches, params: Mapping[str, Tensor], config: EncoderConfig, pos_key: str = "pos.single") -> Tensor:
    """Transformer over ``[B, T, patch_dim]`` patches; returns mean-pooled ``[B, D]`` (no L2)."""
    if not isinstance(patches, Tensor):
        patches = Tensor(patches, dtype=params["patch.w"].dtype)
    if patches.ndim != 3 or patches.shape[-1] != config.patch_dim:
        raise ConfigError(f"patch tensor shape {patches.shape} does not match patch_dim {config.patch_dim}")
    pos = params[pos_key]
    if patches.shape[1] != pos.shape[0]:
        raise ConfigError(f"{patches.shape[1]} tokens but positional table {pos_key} has {pos.shape[0]}")
    x = _linear(patches, params["patch.w"], params["patch.b"]) + pos
    for i in range(config.depth):
        pre = f"blocks.{i}."
        h = ad.layernorm(x, params[pre + "ln1.g"], params[pre + "ln1.b"])
        x = x + _attention(h, params, pre + "attn.", config.num_heads)
        h = ad.layernorm(x, params[pre + "ln2.g"], params[pre + "ln2.b"])
        h = ad.gelu(_linear(h, params[pre + "mlp.w1"], params[pre + "mlp.b1"]))
        x = x + _linear(h, params[pre + "mlp.w2"], params[pre + "mlp.b2"])
    x = ad.layernorm(x, params["norm.g"], params["norm.b"])
    return x.mean(axis=1)


def _check_images(images: np.ndarray, config: EncoderConfig, width: int) -> np.ndarray:
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    expected = (config.image_h, width, config.channels)
    if images.ndim != 4 or images.shape[1:] != expected:
        raise ConfigError(f"image batch shape {images.shape} does not match {expected}")
    return images


def forward_embed(params: Mapping[str, Tensor], images: np.ndarray, config: EncoderConfig) -> Tensor:
    """Differentiable retrieval embeddings for a ``[B, h, w, c]`` batch."""
    images = _check_images(images, config, config.image_w)
    dtype = params["patch.w"].dtype
    pooled = encode_patches(patchify(images.astype(dtype), config.patch_size), params, config)
    return ad.l2_normalize(pooled, axis=-1) if config.normalize_embeddings else pooled


def concat_pair(left: np.ndarray, right: np.ndarray) -> np.ndarray:
    """Place images side by side along the width axis."""
    return np.concatenate([np.asarray(left), np.asarray(right)], axis=-2)


def pair_features(params: Mapping[str, Tensor], left: np.ndarray, right: np.ndarray, config: EncoderConfig) -> Tensor:
    left = _check_images(left, config, config.image_w)
    right = _check_images(right, config, config.image_w)
    if left.shape != right.shape:
        raise ConfigError("left and right pair batches differ in shape")
    dtype = params["patch.w"].dtype
    patches = patchify(concat_pair(left, right).astype(dtype), config.patch_size)
    return encode_patches(patches, params, config, pos_key="pos.pair")


def pair_head(features: Tensor, params: Mapping[str, Tensor], config: EncoderConfig, train: bool, rng) -> Tensor:
    """MLP head: linear, sigmoid, dropout, linear, sigmoid -> negative-pair probability ``[B]``."""
    h = ad.sigmoid(_linear(features, params["head.w1"], params["head.b1"]))
    h = ad.dropout(h, config.head_dropout, rng, train)
    logit = _linear(h, params["head.w2"], params["head.b2"])
    return ad.sigmoid(logit).reshape(-1)


def forward_pair(
    params: Mapping[str, Tensor],
    left: np.ndarray,
    right: np.ndarray,
    config: EncoderConfig,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    return pair_head(pair_features(params, left, right, config), params, config, train, rng)


def encode(image: np.ndarray, weights: EncoderWeights, config: EncoderConfig | None = None) -> np.ndarray:
    config = config or weights.config
    single = np.asarray(image).ndim == 3
    out = forward_embed(weights.tensors(), image, config).data
    return out[0] if single else out


def encode_batch(images: np.ndarray, weights: EncoderWeights, batch_size: int = 64) -> np.ndarray:
    images = np.asarray(images)
    params = weights.tensors()
    chunks = [forward_embed(params, images[i : i + batch_size], weights.config).data for i in range(0, len(images), batch_size)]
    if not chunks:
        return np.zeros((0, weights.config.embed_dim), dtype=ad.DEFAULT_DTYPE)
    return np.concatenate(chunks, axis=0)


def score_pair(
    image_q: np.ndarray,
    image_g: np.ndarray,
    weights: EncoderWeights,
    config: EncoderConfig | None = None,
    train_mode: bool = False,
    rng_seed: int | None = None,
) -> float:
    """Probability that (query, gallery) is a negative pair; lower means more similar."""
    config = config or weights.config
    rng = np.random.default_rng(rng_seed) if train_mode else None
    return float(forward_pair(weights.tensors(), image_q, image_g, config, train_mode, rng).data[0])


def score_pairs(left: np.ndarray, right: np.ndarray, weights: EncoderWeights) -> np.ndarray:
    """Eval-mode batched pair scores in float64."""
    return forward_pair(weights.tensors(), left, right, weights.config).data.astype(np.float64)


# -- checkpoint IO ---------------------------------------------------------------------
def save_checkpoint(path, weights: EncoderWeights) -> None:
    cfg = json.dumps(weights.config.to_dict(), sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(cfg)), cfg, struct.pack("<I", len(weights.params))]
    for name, arr in weights.params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> EncoderWeights:
    buf = Path(path).read_bytes()
    pos = 0

    def read(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated checkpoint")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    if read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    (cfg_len,) = struct.unpack("<I", read(4))
    try:
        config = EncoderConfig.from_dict(json.loads(read(cfg_len).decode("utf-8")))
    except (json.JSONDecodeError, UnicodeDecodeError, TypeError) as exc:
        raise CheckpointError(f"{path}: unreadable config block") from exc
    expected = parameter_shapes(config)
    (count,) = struct.unpack("<I", read(4))
    params = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", read(4))
        name = read(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<I", read(4))
        shape = struct.unpack(f"<{ndim}I", read(4 * ndim))
        if name not in expected or tuple(shape) != expected[name]:
            raise CheckpointError(f"{path}: parameter {name} shape {shape} inconsistent with config")
        size = int(np.prod(shape)) if shape else 1
        params[name] = np.frombuffer(read(4 * size), dtype="<f4").astype(ad.DEFAULT_DTYPE).reshape(shape)
    if pos != len(buf):
        raise CheckpointError(f"{path}: trailing bytes after parameters")
    return EncoderWeights(config, params)
