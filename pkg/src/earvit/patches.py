"""Overlapping patch grids and token embedding.

A W x W image is cut into P x P windows whose top-left corners sit at
multiples of the stride S. When S == P the windows tile the image; when
S < P adjacent windows share pixels. S > P would leave uncovered gaps and
is rejected, as is any combination where (W - P) is not a multiple of S
(that would truncate the last window).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, GridError, ShapeError
from .tensor import Tensor, concat


@dataclass(frozen=True)
class PatchGridSpec:
    """Validated (W, P, S) triple with the derived token count N.

    N = ((W - P) / S + 1) ** 2, the number of untruncated windows.
    """

    image_size: int
    patch_size: int
    stride: int
    tokens: int = field(init=False)

    def __post_init__(self):
        w, p, s = self.image_size, self.patch_size, self.stride
        if p < 1 or p > w:
            raise GridError(f"patch size {p} must lie in [1, {w}]")
        if s < 1:
            raise GridError(f"stride {s} must be at least 1")
        if s > p:
            raise GridError(f"stride {s} exceeds patch size {p}; grid would leave gaps")
        if (w - p) % s != 0:
            raise GridError(
                f"(W - P) = {w - p} is not divisible by stride {s}; "
                f"the last window would be truncated"
            )
        object.__setattr__(self, "tokens", self.side_count ** 2)

    @property
    def side_count(self) -> int:
        return (self.image_size - self.patch_size) // self.stride + 1

    @property
    def label(self) -> str:
        return f"p{self.patch_size}_s{self.stride}"


def patch_count(image_size: int, patch_size: int, stride: int) -> int:
    """Number of untruncated P x P windows at stride S over a W x W image."""
    return PatchGridSpec(image_size, patch_size, stride).tokens


def pixel_multiplicity(grid: PatchGridSpec) -> np.ndarray:
    """How many windows cover each pixel; brute-force accumulation."""
    counts = np.zeros((grid.image_size, grid.image_size), dtype=np.int64)
    for i in range(grid.side_count):
        for j in range(grid.side_count):
            r, c = i * grid.stride, j * grid.stride
            counts[r:r + grid.patch_size, c:c + grid.patch_size] += 1
    return counts


def extract_patches(image: Tensor, grid: PatchGridSpec) -> Tensor:
    """Cut an image [C x W x W] (or batch [B x C x W x W]) into flat patches.

    Output rows follow row-major order over the window grid; each row is the
    window flattened channel-major then row-major, length C*P*P. Returns
    [N x C*P*P], or [B x N x C*P*P] for batched input.
    """
    batched = image.ndim == 4
    if image.ndim not in (3, 4):
        raise ShapeError(f"expected image [C x W x W] or [B x C x W x W], got {image.shape}")
    w = grid.image_size
    if image.shape[-2:] != (w, w):
        raise ShapeError(f"image spatial shape {image.shape[-2:]} does not match grid W={w}")

    x = image.data if batched else image.data[None]
    b, c = x.shape[0], x.shape[1]
    n_side, p, s = grid.side_count, grid.patch_size, grid.stride
    out = np.empty((b, grid.tokens, c * p * p), dtype=np.float64)
    for i in range(n_side):
        for j in range(n_side):
            window = x[:, :, i * s:i * s + p, j * s:j * s + p]
            out[:, i * n_side + j, :] = window.reshape(b, c * p * p)
    if not batched:
        out = out[0]

    def bwd(g: np.ndarray) -> None:
        gb = g if batched else g[None]
        full = np.zeros_like(x)
        for i in range(n_side):
            for j in range(n_side):
                piece = gb[:, i * n_side + j, :].reshape(b, c, p, p)
                full[:, :, i * s:i * s + p, j * s:j * s + p] += piece
        image._accumulate(full if batched else full[0])

    return Tensor._result(out, (image,), bwd, "extract_patches")


@dataclass
class TokenSequence:
    """Class token plus projected patch tokens, [(N+1) x D] per image.

    ``tokens`` may carry a leading batch axis: [B x (N+1) x D].
    """

    tokens: Tensor
    grid: PatchGridSpec

    def __post_init__(self):
        if self.tokens.shape[-2] != self.grid.tokens + 1:
            raise ConfigError(
                f"token count {self.tokens.shape[-2]} does not match grid "
                f"{self.grid.label} (expected {self.grid.tokens + 1} incl. class token)"
            )

    @property
    def width(self) -> int:
        return self.tokens.shape[-1]


def embed_tokens(patches: Tensor, proj_w: Tensor, proj_b: Tensor,
                 pos: Tensor, cls: Tensor, grid: PatchGridSpec) -> TokenSequence:
    """Project flat patches to model width and attach class/positional tokens.

    token 0 = cls + pos[0]; token k = patches[k-1] @ proj_w + proj_b + pos[k].
    The positional table length is tied to the grid, so swapping in a table
    built for a different (P, S) is rejected rather than silently reused.
    """
    batched = patches.ndim == 3
    n = grid.tokens
    if patches.shape[-2] != n:
        raise ShapeError(f"got {patches.shape[-2]} patches for a {n}-window grid")
    if pos.shape[0] != n + 1:
        raise ConfigError(
            f"positional table has {pos.shape[0]} rows but grid {grid.label} "
            f"needs {n + 1} (N patches + class token)"
        )
    d = proj_w.shape[1]
    if patches.shape[-1] != proj_w.shape[0]:
        raise ShapeError(
            f"patch length {patches.shape[-1]} does not match projection input {proj_w.shape[0]}"
        )

    projected = patches @ proj_w + proj_b
    if batched:
        # broadcast the shared class token across the batch
        b = patches.shape[0]
        cls_block = cls.reshape(1, 1, d) + Tensor(np.zeros((b, 1, d)))
        tokens = concat([cls_block, projected], axis=1) + pos
    else:
        tokens = concat([cls.reshape(1, d), projected], axis=0) + pos
    return TokenSequence(tokens=tokens, grid=grid)
