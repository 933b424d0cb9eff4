"""Covariance descriptors over feature-tensor cells.

A feature tensor holds m maps of w x h cells; every cell contributes one
m-dimensional observation. A region mask selects image pixels, which map
onto feature-map cells by coordinate scaling; the (regularized) sample
covariance of the selected observations is the region's descriptor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import DegenerateRegionError, ValidationError
from .spdcore import matrix_log, symmetrize
from .tensorio import FeatureTensor, RegionMask

DEFAULT_EPSILON = 1e-4

GLOBAL_CHANNEL = "global"


def _round_half_away(v: float) -> int:
    return int(math.floor(v + 0.5)) if v >= 0 else int(math.ceil(v - 0.5))


def map_pixel(x: int, y: int, image_w: int, image_h: int,
              map_w: int, map_h: int) -> tuple:
    """Map an image pixel onto a feature-map cell.

    The pixel (x, y) scales by (map_w / image_w, map_h / image_h), rounds
    half away from zero, and clamps into the map. Clamping absorbs the
    boundary overflow that rounding can introduce.
    """
    if image_w < 1 or image_h < 1 or map_w < 1 or map_h < 1:
        raise ValidationError("image and map dimensions must be >= 1")
    if map_w > image_w or map_h > image_h:
        raise ValidationError("feature maps cannot exceed the image size")
    if not (0 <= x < image_w and 0 <= y < image_h):
        raise ValidationError(f"pixel ({x}, {y}) outside {image_w}x{image_h} image")
    mx = min(max(_round_half_away(x * map_w / image_w), 0), map_w - 1)
    my = min(max(_round_half_away(y * map_h / image_h), 0), map_h - 1)
    return mx, my


def extract_features(tensor: FeatureTensor) -> np.ndarray:
    """Observation matrix over all cells: shape (m, w*h), float64, row-major cells."""
    return tensor.values.reshape(tensor.m, -1).astype(np.float64)


def extract_region_features(tensor: FeatureTensor, mask: RegionMask) -> np.ndarray:
    """Observation matrix over a region's distinct mapped cells.

    Mask pixels map onto feature-map cells, duplicates collapse, and the
    surviving cells are ordered row-major (y, then x). A region covering
    fewer than two distinct cells cannot produce a covariance and is
    rejected.

    Returns
    -------
    ndarray of shape (m, r') with r' >= 2 distinct cells as columns.
    """
    if mask.image_w < tensor.w or mask.image_h < tensor.h:
        raise ValidationError(
            f"mask {mask.region_id!r} image size {mask.image_w}x{mask.image_h} "
            f"smaller than the {tensor.w}x{tensor.h} feature maps"
        )
    sx = tensor.w / mask.image_w
    sy = tensor.h / mask.image_h
    mx = np.floor(mask.pixels[:, 0] * sx + 0.5).astype(np.int64)
    my = np.floor(mask.pixels[:, 1] * sy + 0.5).astype(np.int64)
    np.clip(mx, 0, tensor.w - 1, out=mx)
    np.clip(my, 0, tensor.h - 1, out=my)
    cells = np.unique(np.stack([my, mx], axis=1), axis=0)  # sorted (y, x)
    if cells.shape[0] < 2:
        raise DegenerateRegionError(mask.region_id, int(cells.shape[0]))
    return tensor.values[:, cells[:, 0], cells[:, 1]].astype(np.float64)


@dataclass(eq=False)
class CovDescriptor:
    """A regularized covariance matrix with lazily computed log."""

    matrix: np.ndarray
    epsilon: float
    n_obs: int
    region_id: str | None = None

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @cached_property
    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.matrix)[0])

    @property
    def positive_definite(self) -> bool:
        return self.min_eigenvalue > 0.0

    @cached_property
    def log_matrix(self) -> np.ndarray:
        return matrix_log(self.matrix)


def compute_covariance(observations: np.ndarray, epsilon: float = DEFAULT_EPSILON,
                       region_id: str | None = None) -> CovDescriptor:
    """Regularized sample covariance of column observations.

    C = (1 / (n - 1)) * sum_i (v_i - mean)(v_i - mean)^T + epsilon * I,
    computed two-pass (mean first) and symmetrized after accumulation.
    With epsilon = 0 a rank-deficient result is returned but flagged not
    positive definite; regularize before any manifold operation.

    Parameters
    ----------
    observations : ndarray of shape (m, n)
        n >= 2 observations of dimension m as columns.
    epsilon : float
        Non-negative ridge added to the diagonal.
    """
    obs = np.asarray(observations, dtype=np.float64)
    if obs.ndim != 2:
        raise ValidationError("observations must be a 2-D (m, n) array")
    m, n = obs.shape
    if n < 2:
        raise ValidationError(f"need at least 2 observations for a covariance, got {n}")
    if not np.all(np.isfinite(obs)):
        raise ValidationError("observations contain non-finite values")
    if epsilon < 0:
        raise ValidationError(f"epsilon must be >= 0, got {epsilon}")
    mu = obs.mean(axis=1, keepdims=True)
    X = obs - mu
    C = (X @ X.T) / (n - 1)
    C = symmetrize(C)
    if epsilon > 0:
        C[np.diag_indices(m)] += epsilon
    return CovDescriptor(matrix=C, epsilon=float(epsilon), n_obs=n, region_id=region_id)


def descriptor_set(tensor: FeatureTensor, masks=(),
                   epsilon: float = DEFAULT_EPSILON) -> dict:
    """Global descriptor plus one per region mask, keyed by channel id.

    The global channel uses every cell; region channels use the mask's
    distinct mapped cells. The key ``"global"`` is reserved.
    """
    out = {GLOBAL_CHANNEL: compute_covariance(extract_features(tensor), epsilon)}
    for mask in masks:
        if mask.region_id == GLOBAL_CHANNEL:
            raise ValidationError(f"region id {GLOBAL_CHANNEL!r} is reserved")
        if mask.region_id in out:
            raise ValidationError(f"duplicate region id {mask.region_id!r}")
        obs = extract_region_features(tensor, mask)
        out[mask.region_id] = compute_covariance(obs, epsilon, region_id=mask.region_id)
    return out


def resize_maps(tensor: FeatureTensor, new_w: int, new_h: int) -> FeatureTensor:
    """Bilinear per-map resize (half-pixel centers), e.g. 7x7 -> 14x14.

    Returns a float64 tensor; constant maps stay constant exactly up to
    rounding of the interpolation weights.
    """
    if new_w < 1 or new_h < 1:
        raise ValidationError("target dimensions must be >= 1")
    m, h, w = tensor.values.shape
    src_x = np.clip((np.arange(new_w) + 0.5) * (w / new_w) - 0.5, 0.0, w - 1.0)
    src_y = np.clip((np.arange(new_h) + 0.5) * (h / new_h) - 0.5, 0.0, h - 1.0)
    x0 = np.floor(src_x).astype(np.int64)
    y0 = np.floor(src_y).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (src_x - x0)[None, None, :]
    fy = (src_y - y0)[None, :, None]
    v = tensor.values.astype(np.float64)
    top = v[:, y0][:, :, x0] * (1 - fx) + v[:, y0][:, :, x1] * fx
    bot = v[:, y1][:, :, x0] * (1 - fx) + v[:, y1][:, :, x1] * fx
    out = top * (1 - fy) + bot * fy
    return FeatureTensor(values=out, source_id=tensor.source_id)
