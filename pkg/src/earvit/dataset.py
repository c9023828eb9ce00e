"""Dataset ingestion, image preprocessing, and synthetic identity generation.

Directory layout: ``root/<subject>/<side>/*.pgm`` with the side level
optional. Each (subject, side) pair is one identity; left and right ears of
the same person never form genuine pairs. PGM/PPM decoding is implemented
here so correctness does not depend on an external decoder; PNG works too
when Pillow is importable.

Preprocessing: decode, bilinear-resize to W x W (half-pixel centers, edge
clamped), scale to [0, 1], then standardize with mean 0.5 / std 0.5 so
values land in [-1, 1].
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError, DatasetError
from .tensor import Tensor

_RASTER_EXTENSIONS = {".pgm", ".ppm", ".pnm", ".png"}

NORM_MEAN = 0.5
NORM_STD = 0.5


@dataclass(frozen=True)
class DatasetRecord:
    identity_key: str
    subject: str
    side: str  # "left", "right", or "unspecified"
    path: str
    image_id: str


@dataclass
class DatasetIndex:
    records: list[DatasetRecord]
    errors: list[tuple[str, str]] = field(default_factory=list)

    @property
    def identity_keys(self) -> list[str]:
        return sorted({r.identity_key for r in self.records})

    @property
    def num_identities(self) -> int:
        return len({r.identity_key for r in self.records})

    def label_map(self) -> dict[str, int]:
        return {key: i for i, key in enumerate(self.identity_keys)}


def _identity_key(subject: str, side: str) -> str:
    return subject if side == "unspecified" else f"{subject}:{side}"


def load_dataset(root: str | Path, verify: bool = True) -> DatasetIndex:
    """Index a dataset tree with deterministic lexicographic ordering.

    With ``verify`` each file is decoded once up front; undecodable files go
    to ``index.errors`` instead of aborting the scan.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    records: list[DatasetRecord] = []
    errors: list[tuple[str, str]] = []
    for subject_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        side_dirs = sorted(p for p in subject_dir.iterdir() if p.is_dir())
        sources = [(d.name, d) for d in side_dirs] or [("unspecified", subject_dir)]
        for side, folder in sources:
            for f in sorted(folder.iterdir()):
                if not (f.is_file() and f.suffix.lower() in _RASTER_EXTENSIONS):
                    continue
                if verify:
                    try:
                        decode_image(f.read_bytes(), str(f))
                    except DataFormatError as exc:
                        errors.append((str(f), str(exc)))
                        continue
                records.append(DatasetRecord(
                    identity_key=_identity_key(subject_dir.name, side),
                    subject=subject_dir.name, side=side, path=str(f),
                    image_id=str(f.relative_to(root))))
    if not records and not errors:
        raise DatasetError(f"dataset root {root} contains no images")
    return DatasetIndex(records=records, errors=errors)


# -- decoding -------------------------------------------------------------------

# match() anchors at the given offset, so no ^ anchor here
_PNM_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _pnm_tokens(data: bytes, count: int, offset: int) -> tuple[list[bytes], int]:
    tokens = []
    pos = offset
    while len(tokens) < count:
        m = _PNM_TOKEN.match(data, pos)
        if not m:
            raise DataFormatError("truncated PNM header")
        tokens.append(m.group(1))
        pos = m.end()
    return tokens, pos


def decode_pnm(data: bytes, name: str = "<bytes>") -> np.ndarray:
    """Decode P2/P3 (ASCII) or P5/P6 (binary) into uint8 [C x H x W]."""
    if len(data) < 2 or data[0:1] != b"P" or data[1:2] not in b"2356":
        raise DataFormatError(f"{name}: not a supported PNM file")
    kind = data[1:2]
    channels = 3 if kind in (b"3", b"6") else 1
    try:
        (w_tok, h_tok, max_tok), pos = _pnm_tokens(data, 3, 2)
        width, height, maxval = int(w_tok), int(h_tok), int(max_tok)
    except (ValueError, DataFormatError) as exc:
        raise DataFormatError(f"{name}: bad PNM header ({exc})") from None
    if width < 1 or height < 1:
        raise DataFormatError(f"{name}: bad PNM dimensions {width}x{height}")
    if maxval != 255:
        raise DataFormatError(f"{name}: only maxval 255 supported, got {maxval}")
    n = width * height * channels
    if kind in (b"5", b"6"):
        start = pos + 1  # single whitespace byte after maxval
        raw = data[start:start + n]
        if len(raw) != n:
            raise DataFormatError(f"{name}: expected {n} pixel bytes, got {len(raw)}")
        flat = np.frombuffer(raw, dtype=np.uint8)
    else:
        try:
            values = [int(v) for v in data[pos:].split()]
        except ValueError:
            raise DataFormatError(f"{name}: non-numeric ASCII pixel data") from None
        if len(values) != n or min(values) < 0 or max(values) > maxval:
            raise DataFormatError(f"{name}: bad ASCII pixel data")
        flat = np.array(values, dtype=np.uint8)
    img = flat.reshape(height, width, channels)
    return np.ascontiguousarray(img.transpose(2, 0, 1))


def decode_image(data: bytes, name: str = "<bytes>") -> np.ndarray:
    """Decode raster bytes to uint8 [C x H x W]; C is 1 or 3."""
    if data[:1] == b"P" and data[1:2] in b"2356":
        return decode_pnm(data, name)
    if data[:8] == b"\x89PNG\r\n\x1a\n":
        try:
            from PIL import Image  # optional; PPM/PGM never need it
        except ImportError:
            raise DataFormatError(
                f"{name}: PNG input needs the optional Pillow dependency") from None
        import io
        with Image.open(io.BytesIO(data)) as im:
            im = im.convert("L") if im.mode in ("L", "I;16", "1") else im.convert("RGB")
            arr = np.asarray(im, dtype=np.uint8)
        if arr.ndim == 2:
            arr = arr[None]
        else:
            arr = arr.transpose(2, 0, 1)
        return np.ascontiguousarray(arr)
    raise DataFormatError(f"{name}: unsupported raster format")


def encode_pgm(gray: np.ndarray) -> bytes:
    """uint8 [H x W] -> binary PGM (P5)."""
    if gray.ndim != 2 or gray.dtype != np.uint8:
        raise ConfigError(f"encode_pgm wants uint8 [H x W], got {gray.dtype} {gray.shape}")
    h, w = gray.shape
    return b"P5\n%d %d\n255\n" % (w, h) + gray.tobytes()


# -- preprocessing ---------------------------------------------------------------

def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize float [C x H x W] with half-pixel-center sampling, edges clamped."""
    c, h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0.0, h - 1.0)
    xs = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[None, :, None]
    wx = (xs - x0)[None, None, :]
    top = img[:, y0][:, :, x0] * (1 - wx) + img[:, y0][:, :, x1] * wx
    bot = img[:, y1][:, :, x0] * (1 - wx) + img[:, y1][:, :, x1] * wx
    return top * (1 - wy) + bot * wy


def preprocess(data: bytes, image_size: int, name: str = "<bytes>") -> Tensor:
    """Decode + resize + standardize to a [C x W x W] tensor in [-1, 1]."""
    raw = decode_image(data, name)
    scaled = raw.astype(np.float64) / 255.0
    resized = bilinear_resize(scaled, image_size, image_size)
    return Tensor((resized - NORM_MEAN) / NORM_STD)


def preprocess_file(path: str | Path, image_size: int) -> Tensor:
    return preprocess(Path(path).read_bytes(), image_size, str(path))


@dataclass
class TrainingData:
    """Preprocessed images plus integer labels, ready for the trainer."""

    images: np.ndarray  # [n, C, W, W] standardized float64
    labels: np.ndarray  # [n] int64
    identity_keys: list[str]
    image_ids: list[str]

    @property
    def num_classes(self) -> int:
        return len(self.identity_keys)


def load_training_data(index: DatasetIndex, image_size: int) -> TrainingData:
    """Preprocess every indexed image into one array (desk-scale datasets)."""
    label_map = index.label_map()
    images, labels, ids = [], [], []
    for rec in index.records:
        images.append(preprocess_file(rec.path, image_size).data)
        labels.append(label_map[rec.identity_key])
        ids.append(rec.image_id)
    channels = {img.shape[0] for img in images}
    if len(channels) > 1:
        raise DatasetError(f"mixed channel counts in dataset: {sorted(channels)}")
    return TrainingData(images=np.stack(images), labels=np.array(labels, dtype=np.int64),
                        identity_keys=index.identity_keys, image_ids=ids)


# -- synthetic identities ----------------------------------------------------------

def _identity_template(rng: np.random.Generator, size: int) -> np.ndarray:
    """A grating plus a few blobs; parameters differ per identity."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    freq = rng.uniform(1.5, 5.0)
    theta = rng.uniform(0.0, np.pi)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    img = 0.5 + 0.35 * np.sin(2.0 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    for _ in range(3):
        cy, cx = rng.uniform(0.15, 0.85, size=2)
        sigma = rng.uniform(0.08, 0.22)
        amp = rng.uniform(0.2, 0.45) * rng.choice([-1.0, 1.0])
        img += amp * np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma ** 2)))
    return np.clip(img, 0.02, 0.98)


def synth_dataset(out_dir: str | Path, n_ids: int, imgs_per_id: int, image_size: int,
                  noise_std: float, seed: int) -> DatasetIndex:
    """Write a deterministic procedural dataset in the directory layout above.

    Each identity gets a distinct template; each image is the template plus
    Gaussian pixel noise, quantized to 8-bit PGM. noise_std 0 makes all of an
    identity's images byte-identical.
    """
    if n_ids < 2:
        raise ConfigError(f"need at least 2 identities for verification, got {n_ids}")
    if imgs_per_id < 1:
        raise ConfigError(f"imgs_per_id must be positive, got {imgs_per_id}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    templates = synth_templates(n_ids, image_size, seed)
    noise_children = np.random.SeedSequence(seed).spawn(n_ids)
    for i in range(n_ids):
        subject_dir = out_dir / f"id_{i:03d}"
        subject_dir.mkdir(exist_ok=True)
        noise_rng = np.random.default_rng(noise_children[i].spawn(1)[0])
        for j in range(imgs_per_id):
            img = templates[i]
            if noise_std > 0:
                img = img + noise_rng.standard_normal(img.shape) * noise_std
            quantized = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
            (subject_dir / f"img_{j:03d}.pgm").write_bytes(encode_pgm(quantized))
    return load_dataset(out_dir)


def synth_templates(n_ids: int, image_size: int, seed: int) -> np.ndarray:
    """Noiseless per-identity templates, [n_ids x W x W]; brute-force oracle aid."""
    children = np.random.SeedSequence(seed).spawn(n_ids)
    return np.stack([_identity_template(np.random.default_rng(children[i]), image_size)
                     for i in range(n_ids)])
