"""Dataset ingestion: PGM/IDX readers, patch sampling, split preprocessing, noise."""

from __future__ import annotations

import logging
import re
import struct
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .model import FormatError

log = logging.getLogger(__name__)

MNIST_IMAGE_MAGIC = 2051


@dataclass
class PatchSet:
    """Non-negative network inputs, one row per patch."""

    patches: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.patches = np.asarray(self.patches, dtype=np.float64)
        if self.patches.ndim != 2:
            raise ValueError("patches must be a P x M array")
        if np.any(self.patches < 0) or not np.all(np.isfinite(self.patches)):
            raise ValueError("patches must be finite and non-negative")

    @property
    def dim(self):
        return self.patches.shape[1]

    def __len__(self):
        return self.patches.shape[0]


# --- PGM -----------------------------------------------------------------

_PGM_HEADER = re.compile(rb"\AP5(?:\s|#[^\n]*\n)+(\d+)(?:\s|#[^\n]*\n)+(\d+)(?:\s|#[^\n]*\n)+(\d+)\s")


def load_pgm(path):
    """Read a binary (P5) PGM file as a float image in [0, 1]."""
    data = Path(path).read_bytes()
    if not data.startswith(b"P5"):
        raise FormatError(f"{path}: bad magic {data[:2]!r}")
    m = _PGM_HEADER.match(data)
    if m is None:
        raise FormatError(f"{path}: truncated header")
    width, height, maxval = (int(g) for g in m.groups())
    if not 0 < maxval <= 65535:
        raise FormatError(f"{path}: unsupported maxval {maxval}")
    dtype = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    need = width * height * dtype.itemsize
    body = data[m.end():m.end() + need]
    if len(body) < need:
        raise FormatError(f"{path}: truncated pixel data ({len(body)} of {need} bytes)")
    img = np.frombuffer(body, dtype=dtype).reshape(height, width)
    return img.astype(np.float64) / maxval


def save_pgm(path, img, maxval=255):
    """Write a [0, 1] float image as 8-bit P5 PGM (values clipped and rounded)."""
    img = np.asarray(img, dtype=np.float64)
    q = np.rint(np.clip(img, 0.0, 1.0) * maxval).astype(np.uint8)
    h, w = q.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n%d\n" % (w, h, maxval))
        fh.write(q.tobytes())


def reference_image():
    """The bundled 256 x 256 grayscale test image, values in [0, 1]."""
    with resources.as_file(resources.files("spikedict") / "data" / "camera256.pgm") as p:
        return load_pgm(p)


# --- MNIST IDX3 ----------------------------------------------------------

def load_mnist_idx(images_path):
    """Read an IDX3 image file into a PatchSet of flattened images scaled by 1/255."""
    data = Path(images_path).read_bytes()
    if len(data) < 16:
        raise FormatError(f"{images_path}: truncated header")
    magic, count, rows, cols = struct.unpack(">iiii", data[:16])
    if magic != MNIST_IMAGE_MAGIC:
        raise FormatError(f"{images_path}: bad magic {magic}")
    if (rows, cols) != (28, 28):
        log.warning("%s: dimension mismatch, images are %dx%d (expected 28x28)", images_path, rows, cols)
    need = count * rows * cols
    if len(data) - 16 < need:
        raise FormatError(f"{images_path}: truncated ({len(data) - 16} of {need} pixel bytes)")
    pixels = np.frombuffer(data, dtype=np.uint8, count=need, offset=16)
    return PatchSet(pixels.reshape(count, rows * cols) / 255.0,
                    {"source": str(images_path), "rows": rows, "cols": cols})


# --- patches -------------------------------------------------------------

def sample_patches(img, patch_size, count, seed):
    """Draw ``count`` square patches at uniformly random positions; returns a count x p^2 array."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    if patch_size > h or patch_size > w:
        raise ValueError(f"patch larger than image ({patch_size} > {h}x{w})")
    rng = np.random.default_rng(seed)
    rows = rng.integers(0, h - patch_size + 1, size=count)
    cols = rng.integers(0, w - patch_size + 1, size=count)
    out = np.empty((count, patch_size * patch_size))
    for k, (r, c) in enumerate(zip(rows, cols)):
        out[k] = img[r:r + patch_size, c:c + patch_size].ravel()
    return out


def split_channels(v):
    """Stack the positive and negative parts of each row: [max(v, 0), max(-v, 0)]."""
    v = np.asarray(v, dtype=np.float64)
    return np.concatenate([np.maximum(v, 0.0), np.maximum(-v, 0.0)], axis=-1)


def merge_channels(y):
    """Inverse of :func:`split_channels` (positive minus negative half)."""
    y = np.asarray(y, dtype=np.float64)
    half = y.shape[-1] // 2
    return y[..., :half] - y[..., half:]


def center_normalize(raw):
    """Subtract each row's mean and scale to unit l2 norm.

    Returns ``(unit, means, norms)``; rows whose centred norm is zero get a
    zero ``unit`` row and norm 0.
    """
    raw = np.asarray(raw, dtype=np.float64)
    means = raw.mean(axis=1)
    v = raw - means[:, None]
    norms = np.linalg.norm(v, axis=1)
    unit = np.zeros_like(v)
    ok = norms > 0
    unit[ok] = v[ok] / norms[ok, None]
    return unit, means, norms


def preprocess_split(raw, provenance=None):
    """Centre, l2-normalise and split raw patches into a non-negative PatchSet.

    Constant patches cannot be normalised and are dropped; the number dropped
    is stored under ``provenance['dropped']``.
    """
    unit, _, norms = center_normalize(raw)
    keep = norms > 0
    info = dict(provenance or {})
    info["dropped"] = int((~keep).sum())
    if info["dropped"]:
        log.info("dropped %d constant patches", info["dropped"])
    return PatchSet(split_channels(unit[keep]), info)


# --- PST1 patch cache ----------------------------------------------------

def save_pst(path, patchset):
    P = np.ascontiguousarray(patchset.patches, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(b"PST1 %d %d\n" % P.shape)
        fh.write(P.tobytes())


def load_pst(path):
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    parts = data[:nl].split() if nl >= 0 else []
    if len(parts) != 3 or parts[0] != b"PST1":
        raise FormatError(f"{path}: bad magic")
    count, dim = int(parts[1]), int(parts[2])
    if len(data) - nl - 1 < count * dim * 8:
        raise FormatError(f"{path}: truncated")
    P = np.frombuffer(data, dtype="<f8", count=count * dim, offset=nl + 1).reshape(count, dim)
    return PatchSet(P.copy(), {"source": str(path)})


# --- noise ---------------------------------------------------------------

def add_gaussian_noise(img, sigma, seed):
    """Add N(0, sigma^2) noise from a seeded generator and clamp to [0, 1]."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    img = np.asarray(img, dtype=np.float64)
    if sigma == 0:
        return img.copy()
    z = np.random.default_rng(seed).standard_normal(img.shape)
    return np.clip(img + sigma * z, 0.0, 1.0)


def calibrate_sigma(img, target_psnr, seed, lo=0.0, hi=1.0, tol=1e-6):
    """Bisect on sigma so the noisy image hits ``target_psnr`` dB for this seed.

    With a fixed noise field the clamped error grows monotonically in sigma.
    """
    from .metrics import psnr

    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if psnr(img, add_gaussian_noise(img, mid, seed)) > target_psnr:
            lo = mid
        else:
            hi = mid
        if hi - lo < tol:
            break
    return 0.5 * (lo + hi)
