"""Pre-norm transformer encoder over patch tokens, with T/S/B/L presets.

The encoder follows the standard recipe: per block, LayerNorm -> multi-head
attention -> residual, then LayerNorm -> MLP (GELU) -> residual; a final
LayerNorm closes the stack. The image representation is the class token's
output, mapped to a 512-d embedding and L2-normalized so dot products are
cosine similarities.
"""

from __future__ import annotations

import io
import math
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataFormatError, ShapeError
from .patches import PatchGridSpec, TokenSequence, embed_tokens, extract_patches
from .tensor import (Tensor, gelu, l2_normalize, layer_norm, softmax,
                     trunc_normal, zeros, ones)

# depth, width, heads per named variant; mlp_ratio is 4 for all of them
VARIANT_PRESETS = {
    "T": (12, 192, 3),
    "S": (12, 384, 6),
    "B": (12, 768, 12),
    "L": (24, 1024, 16),
}

EMBED_DIM = 512

CHECKPOINT_MAGIC = b"EVITCKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ViTConfig:
    """Encoder hyperparameters bound to a patch grid.

    ``variant`` is one of T/S/B/L for the presets, or "custom" for reduced
    desk-scale models. Named variants always use the 512-d embedding head.
    """

    variant: str
    depth: int
    width: int
    heads: int
    grid: PatchGridSpec
    mlp_ratio: float = 4.0
    embed_dim: int = EMBED_DIM
    channels: int = 1

    def __post_init__(self):
        if self.width % self.heads != 0:
            raise ConfigError(f"width {self.width} not divisible by {self.heads} heads")
        if self.variant in VARIANT_PRESETS and self.embed_dim != EMBED_DIM:
            raise ConfigError(f"variant {self.variant} requires a {EMBED_DIM}-d embedding head")
        if self.depth < 0:
            raise ConfigError(f"depth must be non-negative, got {self.depth}")
        if self.channels not in (1, 3):
            raise ConfigError(f"channels must be 1 or 3, got {self.channels}")

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.width * self.mlp_ratio))

    @property
    def head_dim(self) -> int:
        return self.width // self.heads

    @property
    def patch_len(self) -> int:
        return self.channels * self.grid.patch_size ** 2

    @property
    def label(self) -> str:
        return f"{self.variant}_{self.grid.label}"


def config_for(variant: str, grid: PatchGridSpec, channels: int = 1) -> ViTConfig:
    """Bind a named T/S/B/L preset to a patch grid."""
    if variant not in VARIANT_PRESETS:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {sorted(VARIANT_PRESETS)}")
    depth, width, heads = VARIANT_PRESETS[variant]
    return ViTConfig(variant=variant, depth=depth, width=width, heads=heads,
                     grid=grid, channels=channels)


class ModelParams:
    """Flat, ordered name -> Tensor map for one encoder instance.

    The ordering is fixed by construction, so the optimizer, the checkpoint
    writer, and gradient checks all walk parameters identically.
    """

    def __init__(self, config: ViTConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def items(self):
        return self.tensors.items()

    def values(self):
        return self.tensors.values()

    def num_params(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None


def param_shapes(config: ViTConfig) -> dict[str, tuple[int, ...]]:
    """Names and shapes of every parameter block, in canonical order."""
    d, grid = config.width, config.grid
    shapes: dict[str, tuple[int, ...]] = {
        "patch_proj.w": (config.patch_len, d),
        "patch_proj.b": (d,),
        "pos": (grid.tokens + 1, d),
        "cls": (d,),
    }
    for i in range(config.depth):
        pre = f"blocks.{i}."
        shapes[pre + "ln1.g"] = (d,)
        shapes[pre + "ln1.b"] = (d,)
        shapes[pre + "qkv.w"] = (d, 3 * d)
        shapes[pre + "qkv.b"] = (3 * d,)
        shapes[pre + "attn_out.w"] = (d, d)
        shapes[pre + "attn_out.b"] = (d,)
        shapes[pre + "ln2.g"] = (d,)
        shapes[pre + "ln2.b"] = (d,)
        shapes[pre + "mlp1.w"] = (d, config.mlp_hidden)
        shapes[pre + "mlp1.b"] = (config.mlp_hidden,)
        shapes[pre + "mlp2.w"] = (config.mlp_hidden, d)
        shapes[pre + "mlp2.b"] = (d,)
    shapes["ln_f.g"] = (d,)
    shapes["ln_f.b"] = (d,)
    shapes["head.w"] = (d, config.embed_dim)
    shapes["head.b"] = (config.embed_dim,)
    return shapes


def init_params(config: ViTConfig, rng: np.random.Generator) -> ModelParams:
    """Truncated-normal(0.02) projections, zero biases, identity norms."""
    t: dict[str, Tensor] = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".w") or name in ("pos", "cls"):
            t[name] = trunc_normal(shape, rng, std=0.02, requires_grad=True)
        elif name.endswith("ln1.g") or name.endswith("ln2.g") or name == "ln_f.g":
            t[name] = ones(shape, requires_grad=True)
        else:
            t[name] = zeros(shape, requires_grad=True)
    return ModelParams(config, t)


def attention(x: Tensor, qkv_w: Tensor, qkv_b: Tensor, out_w: Tensor,
              out_b: Tensor, heads: int, return_weights: bool = False):
    """Multi-head scaled dot-product self-attention over [.. x T x D] tokens.

    Scale is 1/sqrt(D/H). Returns the output projection; with
    ``return_weights`` also the [.. x H x T x T] attention weights.
    """
    d = x.shape[-1]
    if d % heads != 0:
        raise ConfigError(f"token width {d} not divisible by {heads} heads")
    hd = d // heads
    t_len = x.shape[-2]
    batched = x.ndim == 3
    lead = (x.shape[0],) if batched else ()

    qkv = x @ qkv_w + qkv_b                       # [.., T, 3D]
    qkv = qkv.reshape(*lead, t_len, 3, heads, hd)
    axis0 = 1 if batched else 0
    qkv = qkv.swapaxes(axis0, axis0 + 1).swapaxes(axis0 + 1, axis0 + 2)  # [.., 3, H, T, hd]
    sl = (slice(None),) if batched else ()
    q = qkv[sl + (0,)]
    k = qkv[sl + (1,)]
    v = qkv[sl + (2,)]

    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(hd))
    weights = softmax(scores, axis=-1)            # [.., H, T, T]
    ctx = weights @ v                             # [.., H, T, hd]
    ctx = ctx.swapaxes(axis0, axis0 + 1).reshape(*lead, t_len, d)
    out = ctx @ out_w + out_b
    if return_weights:
        return out, weights
    return out


def encoder_forward(seq: TokenSequence, params: ModelParams) -> TokenSequence:
    """Run the pre-norm block stack plus final LayerNorm."""
    cfg = params.config
    if seq.width != cfg.width:
        raise ShapeError(f"token width {seq.width} does not match model width {cfg.width}")
    x = seq.tokens
    for i in range(cfg.depth):
        pre = f"blocks.{i}."
        normed = layer_norm(x, params[pre + "ln1.g"], params[pre + "ln1.b"])
        x = x + attention(normed, params[pre + "qkv.w"], params[pre + "qkv.b"],
                          params[pre + "attn_out.w"], params[pre + "attn_out.b"],
                          cfg.heads)
        normed = layer_norm(x, params[pre + "ln2.g"], params[pre + "ln2.b"])
        hidden = gelu(normed @ params[pre + "mlp1.w"] + params[pre + "mlp1.b"])
        x = x + (hidden @ params[pre + "mlp2.w"] + params[pre + "mlp2.b"])
    x = layer_norm(x, params["ln_f.g"], params["ln_f.b"])
    return TokenSequence(tokens=x, grid=seq.grid)


def extract_embedding(seq: TokenSequence, params: ModelParams) -> Tensor:
    """Map the class-token output to a unit-norm embedding vector.

    Returns [embed_dim] for a single sequence, [B x embed_dim] for a batch.
    """
    batched = seq.tokens.ndim == 3
    cls_out = seq.tokens[:, 0, :] if batched else seq.tokens[0, :]
    raw = (cls_out if batched else cls_out.reshape(1, -1)) @ params["head.w"] + params["head.b"]
    norms = np.sqrt((raw.data ** 2).sum(axis=-1))
    if np.any(norms == 0.0):
        raise ShapeError("embedding collapsed to the zero vector before normalization")
    unit = l2_normalize(raw)
    return unit if batched else unit.reshape(-1)


def forward_embeddings(images: Tensor, params: ModelParams) -> Tensor:
    """Full pipeline image(s) -> unit embeddings; accepts [C,W,W] or [B,C,W,W]."""
    cfg = params.config
    patches = extract_patches(images, cfg.grid)
    seq = embed_tokens(patches, params["patch_proj.w"], params["patch_proj.b"],
                       params["pos"], params["cls"], cfg.grid)
    encoded = encoder_forward(seq, params)
    return extract_embedding(encoded, params)


# -- checkpoint serialization -------------------------------------------------
#
# Layout (all little-endian):
#   magic "EVITCKPT" | u32 version
#   u8 variant length | variant utf-8
#   u32 x 9: depth width heads mlp_hidden embed_dim channels W P S
#   u32 block count, then per block:
#     u16 name length | name utf-8 | u8 ndim | i64 dims... | float64 data


def _write_block(buf: io.BytesIO, name: str, arr: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    buf.write(struct.pack("<H", len(encoded)))
    buf.write(encoded)
    buf.write(struct.pack("<B", arr.ndim))
    for dim in arr.shape:
        buf.write(struct.pack("<q", dim))
    buf.write(arr.astype("<f8", copy=False).tobytes(order="C"))


def _read_exact(fh, n: int) -> bytes:
    chunk = fh.read(n)
    if len(chunk) != n:
        raise DataFormatError("checkpoint truncated")
    return chunk


def _read_block(fh) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
    name = _read_exact(fh, name_len).decode("utf-8")
    (ndim,) = struct.unpack("<B", _read_exact(fh, 1))
    shape = tuple(struct.unpack("<q", _read_exact(fh, 8))[0] for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(_read_exact(fh, count * 8), dtype="<f8").reshape(shape)
    return name, data.astype(np.float64)


def save_checkpoint(path: str, params: ModelParams,
                    extra: dict[str, np.ndarray] | None = None) -> None:
    """Write params (plus optional extra blocks) atomically; bit-exact."""
    cfg = params.config
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    variant = cfg.variant.encode("utf-8")
    buf.write(struct.pack("<B", len(variant)))
    buf.write(variant)
    buf.write(struct.pack("<9I", cfg.depth, cfg.width, cfg.heads, cfg.mlp_hidden,
                          cfg.embed_dim, cfg.channels, cfg.grid.image_size,
                          cfg.grid.patch_size, cfg.grid.stride))
    blocks = list(params.items()) + sorted((extra or {}).items())
    buf.write(struct.pack("<I", len(blocks)))
    for name, value in blocks:
        arr = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
        _write_block(buf, name, arr)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path: str) -> tuple[ModelParams, dict[str, np.ndarray]]:
    """Read a checkpoint; returns model params and any extra blocks."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 8) != CHECKPOINT_MAGIC:
            raise DataFormatError(f"{path} is not a checkpoint (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != CHECKPOINT_VERSION:
            raise DataFormatError(f"unsupported checkpoint version {version}")
        (vlen,) = struct.unpack("<B", _read_exact(fh, 1))
        variant = _read_exact(fh, vlen).decode("utf-8")
        depth, width, heads, mlp_hidden, embed_dim, channels, w, p, s = struct.unpack(
            "<9I", _read_exact(fh, 36))
        grid = PatchGridSpec(w, p, s)
        cfg = ViTConfig(variant=variant, depth=depth, width=width, heads=heads,
                        grid=grid, mlp_ratio=mlp_hidden / width,
                        embed_dim=embed_dim, channels=channels)
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        blocks = dict(_read_block(fh) for _ in range(count))

    expected = param_shapes(cfg)
    tensors: dict[str, Tensor] = {}
    extra: dict[str, np.ndarray] = {}
    for name, arr in blocks.items():
        if name in expected:
            if arr.shape != expected[name]:
                raise DataFormatError(
                    f"checkpoint block {name} has shape {arr.shape}, "
                    f"expected {expected[name]}")
            tensors[name] = Tensor(arr, requires_grad=True)
        else:
            extra[name] = arr
    missing = set(expected) - set(tensors)
    if missing:
        raise DataFormatError(f"checkpoint missing parameter blocks: {sorted(missing)}")
    ordered = {name: tensors[name] for name in expected}
    return ModelParams(cfg, ordered), extra
