"""Deterministic baseline featurizer and the embedding types used downstream.

The featurizer stands in for a CNN backbone's 512-D pooled output so the
model, index, and retrieval layers can run and be tested without trained
networks. A real backbone can replace it behind the same signature: any
function mapping a raster patch to a 512-vector slots in unchanged.

Search vectors are L2-normalized and compared by cosine distance.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FEATURE_DIM = 512
TASK_FEATURE_DIM = 128

#: Side of the canonical resampling grid. Patches are resampled here first by
#: nearest neighbor, which makes the descriptor exactly invariant to integer
#: pixel replication and well defined for 1-pixel inputs.
_CANON = 48
_GRID = 3
_HUE_BINS = 32
_SAT_BINS = 8
_VAL_BINS = 8
_GRAD_BINS = 8
_CELL_DIMS = _HUE_BINS + _SAT_BINS + _VAL_BINS + _GRAD_BINS  # 56


class DistanceMetric(enum.Enum):
    """Metrics the search stack understands; cosine is the only member so
    far, and everything downstream assumes unit-norm inputs for it."""

    COSINE = "cosine"


@dataclass(frozen=True)
class Embedding:
    """Unit-norm 512-D search vector plus optional per-task 128-D vectors."""

    base: np.ndarray
    task_features: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.base.shape != (FEATURE_DIM,):
            raise ValueError(f"base embedding must be {FEATURE_DIM}-D, got {self.base.shape}")
        n = float(np.linalg.norm(self.base))
        if abs(n - 1.0) > 1e-6:
            raise ValueError(f"base embedding must be unit norm, got |v| = {n}")
        for name, v in self.task_features.items():
            if v.shape != (TASK_FEATURE_DIM,):
                raise ValueError(f"task feature {name!r} must be {TASK_FEATURE_DIM}-D")


def _as_rgb_float(patch: np.ndarray) -> np.ndarray:
    if patch.ndim == 2:
        patch = np.stack([patch] * 3, axis=-1)
    if patch.ndim != 3 or patch.shape[2] < 3:
        raise ValueError(f"expected an RGB raster, got shape {patch.shape}")
    patch = patch[:, :, :3]
    if np.issubdtype(patch.dtype, np.integer):
        return patch.astype(np.float64) / 255.0
    if not np.isfinite(patch).all():
        raise ValueError("raster contains non-finite pixels")
    return np.clip(patch.astype(np.float64), 0.0, 1.0)


def _rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    # Same convention as colorsys.rgb_to_hsv: h in [0,1), gray pixels get h=0;
    # channel-tie precedence is red, then green, then blue.
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    delta = maxc - minc
    safe_max = np.where(maxc > 0, maxc, 1.0)
    safe_delta = np.where(delta > 0, delta, 1.0)
    s = np.where(maxc > 0, delta / safe_max, 0.0)
    rc = (maxc - r) / safe_delta
    gc = (maxc - g) / safe_delta
    bc = (maxc - b) / safe_delta
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, maxc], axis=-1)


def _resample_nearest(img: np.ndarray, size: int) -> np.ndarray:
    h, w = img.shape[:2]
    rows = np.floor((np.arange(size) + 0.5) * h / size).astype(np.intp)
    cols = np.floor((np.arange(size) + 0.5) * w / size).astype(np.intp)
    return img[rows][:, cols]


def _hist(values: np.ndarray, bins: int, weights: np.ndarray | None = None) -> np.ndarray:
    idx = np.minimum((values * bins).astype(np.intp), bins - 1)
    out = np.bincount(idx.ravel(), weights=None if weights is None else weights.ravel(),
                      minlength=bins).astype(np.float64)
    total = out.sum()
    if total > 0:
        out /= total
    return out


def baseline_featurize(patch: np.ndarray) -> np.ndarray:
    """Compute the 512-D descriptor of a raster patch.

    Layout: a 3x3 spatial grid of per-cell histograms (32 hue bins, 8
    saturation, 8 value, 8 gradient-orientation bins weighted by gradient
    magnitude), 9 x 56 = 504 dims, followed by 8 global statistics: RGB
    means, RGB standard deviations, the patch aspect ratio (width/height),
    and a constant 0. Count histograms are normalized to sum 1 per cell;
    the gradient histogram is normalized by total magnitude and stays all
    zero on constant cells.
    """
    if patch.size == 0:
        raise ValueError("cannot featurize an empty raster")
    rgb_native = _as_rgb_float(patch)
    orig_h, orig_w = rgb_native.shape[:2]
    rgb = _resample_nearest(rgb_native, _CANON)
    hsv = _rgb_to_hsv(rgb)

    v = hsv[..., 2]
    gy, gx = np.gradient(v)
    mag = np.hypot(gx, gy)
    theta = np.mod(np.arctan2(gy, gx), 2.0 * np.pi) / (2.0 * np.pi)

    cell = _CANON // _GRID
    out = np.zeros(FEATURE_DIM, dtype=np.float64)
    pos = 0
    for gy_i in range(_GRID):
        for gx_i in range(_GRID):
            sl = (slice(gy_i * cell, (gy_i + 1) * cell), slice(gx_i * cell, (gx_i + 1) * cell))
            out[pos:pos + _HUE_BINS] = _hist(hsv[..., 0][sl], _HUE_BINS)
            pos += _HUE_BINS
            out[pos:pos + _SAT_BINS] = _hist(hsv[..., 1][sl], _SAT_BINS)
            pos += _SAT_BINS
            out[pos:pos + _VAL_BINS] = _hist(hsv[..., 2][sl], _VAL_BINS)
            pos += _VAL_BINS
            out[pos:pos + _GRAD_BINS] = _hist(theta[sl], _GRAD_BINS, weights=mag[sl])
            pos += _GRAD_BINS
    out[pos:pos + 3] = rgb.reshape(-1, 3).mean(axis=0)
    out[pos + 3:pos + 6] = rgb.reshape(-1, 3).std(axis=0)
    out[pos + 6] = orig_w / orig_h
    out[pos + 7] = 0.0
    return out


def normalize(v: np.ndarray) -> np.ndarray:
    """v / ||v||2; raises on (near-)zero vectors."""
    n = float(np.linalg.norm(v))
    if n <= 1e-12:
        raise ValueError("cannot normalize a zero vector")
    return np.asarray(v, dtype=np.float64) / n


def cosine_distance(a: np.ndarray, b: np.ndarray, *, unit_tol: float = 1e-4) -> float:
    """1 - dot(a, b) for unit vectors; result lies in [0, 2]."""
    for name, v in (("a", a), ("b", b)):
        n = float(np.linalg.norm(v))
        if abs(n - 1.0) > unit_tol:
            raise ValueError(f"vector {name} is not unit norm (|v| = {n})")
    d = 1.0 - float(np.dot(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)))
    return min(2.0, max(0.0, d))


# -- embedding file format -------------------------------------------------
#
# Binary layout: magic "STCH", version u16, count u64, dim u16, then
# count*dim little-endian float32 values in row-major order. Item ids live in
# a sidecar text file (one id per line, same order), by default "<path>.ids".

_EMB_MAGIC = b"STCH"
_EMB_VERSION = 1


class EmbeddingFileError(ValueError):
    """Raised for malformed or truncated embedding files."""


def embedding_ids_path(path: str | Path) -> Path:
    return Path(str(path) + ".ids")


def save_embeddings(
    path: str | Path, ids: list[str], matrix: np.ndarray, ids_path: str | Path | None = None
) -> None:
    matrix = np.ascontiguousarray(matrix, dtype="<f4")
    if matrix.ndim != 2 or matrix.shape[0] != len(ids):
        raise ValueError(f"matrix shape {matrix.shape} does not match {len(ids)} ids")
    header = _EMB_MAGIC + struct.pack("<HQH", _EMB_VERSION, matrix.shape[0], matrix.shape[1])
    Path(path).write_bytes(header + matrix.tobytes())
    ids_file = Path(ids_path) if ids_path is not None else embedding_ids_path(path)
    ids_file.write_text("".join(f"{i}\n" for i in ids), encoding="utf-8")


def load_embeddings(
    path: str | Path, ids_path: str | Path | None = None
) -> tuple[list[str], np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != _EMB_MAGIC:
        raise EmbeddingFileError(f"{path}: not an embedding file")
    version, count, dim = struct.unpack("<HQH", raw[4:16])
    if version != _EMB_VERSION:
        raise EmbeddingFileError(f"{path}: unsupported version {version}")
    expected = 16 + count * dim * 4
    if len(raw) != expected:
        raise EmbeddingFileError(f"{path}: expected {expected} bytes, found {len(raw)}")
    matrix = np.frombuffer(raw[16:], dtype="<f4").reshape(count, dim).copy()
    ids_file = Path(ids_path) if ids_path is not None else embedding_ids_path(path)
    ids = ids_file.read_text(encoding="utf-8").splitlines()
    if len(ids) != count:
        raise EmbeddingFileError(
            f"{ids_file}: {len(ids)} ids do not match {count} embedding rows"
        )
    return ids, matrix
