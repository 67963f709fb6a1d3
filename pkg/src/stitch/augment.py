"""Catalog-to-wild augmentation: paste white-background product shots onto
natural background patches with gradient-domain blending.

The chain is: threshold away the white backdrop, keep the largest foreground
component, dilate it for breathing room, sample a random background patch,
then solve the discrete Poisson equation over the pasted region so the
foreground keeps its own gradients while matching the patch at the seam.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

WHITE_THRESHOLD_DEFAULT = 240
DILATE_RADIUS_DEFAULT = 3
#: Foreground components smaller than this fraction of the image are specks.
MIN_COMPONENT_FRACTION = 0.001
#: Pixels of clearance kept between the pasted mask and the patch border.
BLEND_MARGIN = 2

_DIRS = ((-1, 0), (1, 0), (0, -1), (0, 1))


class SolverConvergenceError(RuntimeError):
    """Conjugate gradient hit its iteration cap before reaching tolerance."""

    def __init__(self, iterations: int, residual: float, tol: float) -> None:
        super().__init__(
            f"no convergence after {iterations} iterations "
            f"(relative residual {residual:.3e} > tol {tol:.3e})"
        )
        self.iterations = iterations
        self.residual = residual


@dataclass(frozen=True)
class BlendRequest:
    """Source raster, target raster, foreground mask, and paste position.

    The mask has the source's dimensions; ``offset`` is the (row, col) of the
    mask origin in the target frame. Every masked pixel must land strictly
    inside the target with at least one pixel of border, so each has a full
    4-neighborhood.
    """

    source: np.ndarray
    target: np.ndarray
    mask: np.ndarray
    offset: tuple[int, int] = (0, 0)

    def __post_init__(self) -> None:
        if self.mask.shape != self.source.shape[:2]:
            raise ValueError(
                f"mask shape {self.mask.shape} does not match source {self.source.shape[:2]}"
            )
        if self.mask.dtype != np.bool_:
            object.__setattr__(self, "mask", self.mask.astype(bool))
        if self.mask.any():
            ys, xs = np.nonzero(self.mask)
            oy, ox = self.offset
            th, tw = self.target.shape[:2]
            if (
                ys.min() + oy < 1 or xs.min() + ox < 1
                or ys.max() + oy > th - 2 or xs.max() + ox > tw - 2
            ):
                raise ValueError("mask must sit strictly inside the target with a 1-pixel margin")


def white_threshold_mask(image: np.ndarray, threshold: int = WHITE_THRESHOLD_DEFAULT) -> np.ndarray:
    """Foreground mask: a pixel is background iff all channels are >= threshold.

    Threshold is in 8-bit channel units; float images in [0,1] are compared
    against threshold/255.
    """
    if image.size == 0:
        raise ValueError("empty image")
    chans = image if image.ndim == 3 else image[..., None]
    t = threshold / 255.0 if np.issubdtype(chans.dtype, np.floating) else threshold
    return ~(chans >= t).all(axis=-1)


def dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    """Morphological dilation with a square (2r+1)-sided structuring element."""
    if radius < 0:
        raise ValueError("radius must be >= 0")
    mask = mask.astype(bool)
    if radius == 0 or not mask.any():
        return mask.copy()
    h, w = mask.shape
    padded = np.zeros((h + 2 * radius, w + 2 * radius), dtype=bool)
    padded[radius:radius + h, radius:radius + w] = mask
    out = np.zeros_like(mask)
    for dy in range(2 * radius + 1):
        for dx in range(2 * radius + 1):
            out |= padded[dy:dy + h, dx:dx + w]
    return out


def largest_component(
    mask: np.ndarray, min_fraction: float = MIN_COMPONENT_FRACTION
) -> np.ndarray:
    """The largest 4-connected foreground component, or an all-false mask if
    even the largest one is a speck (below min_fraction of the image area)."""
    mask = mask.astype(bool)
    remaining = mask.copy()
    best = np.zeros_like(mask)
    best_area = 0
    while remaining.any():
        seed_flat = int(np.argmax(remaining))
        comp = np.zeros_like(mask)
        comp.flat[seed_flat] = True
        while True:
            grown = comp.copy()
            grown[1:, :] |= comp[:-1, :]
            grown[:-1, :] |= comp[1:, :]
            grown[:, 1:] |= comp[:, :-1]
            grown[:, :-1] |= comp[:, 1:]
            grown &= remaining
            if (grown == comp).all():
                break
            comp = grown
        remaining &= ~comp
        area = int(comp.sum())
        if area > best_area:
            best, best_area = comp, area
    if best_area < min_fraction * mask.size:
        return np.zeros_like(mask)
    return best


def sample_background(
    repo: list[np.ndarray],
    min_size: tuple[int, int],
    rng: np.random.Generator | int,
) -> np.ndarray:
    """Seeded-random rectangle from a seeded-random repository image.

    Picks uniformly among images at least min_size, then a uniform rectangle
    height/width in [min, image size] and a uniform position. Returns a copy.
    """
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    if not repo:
        raise ValueError("background repository is empty")
    min_h, min_w = min_size
    eligible = [im for im in repo if im.shape[0] >= min_h and im.shape[1] >= min_w]
    if not eligible:
        raise ValueError(f"no background image is at least {min_h}x{min_w}")
    image = eligible[int(rng.integers(len(eligible)))]
    h = int(rng.integers(min_h, image.shape[0] + 1))
    w = int(rng.integers(min_w, image.shape[1] + 1))
    y0 = int(rng.integers(0, image.shape[0] - h + 1))
    x0 = int(rng.integers(0, image.shape[1] - w + 1))
    return image[y0:y0 + h, x0:x0 + w].copy()


def _conjugate_gradient(matvec, b, x0, tol, max_iters):
    """CG on a symmetric positive-definite system; returns (x, iterations)."""
    x = x0.astype(np.float64).copy()
    r = b - matvec(x)
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        bnorm = 1.0
    rnorm2 = float(r @ r)
    if np.sqrt(rnorm2) / bnorm <= tol:
        return x, 0
    p = r.copy()
    for it in range(1, max_iters + 1):
        ap = matvec(p)
        alpha = rnorm2 / float(p @ ap)
        x += alpha * p
        r -= alpha * ap
        new_rnorm2 = float(r @ r)
        if np.sqrt(new_rnorm2) / bnorm <= tol:
            return x, it
        p = r + (new_rnorm2 / rnorm2) * p
        rnorm2 = new_rnorm2
    raise SolverConvergenceError(max_iters, float(np.sqrt(rnorm2)) / bnorm, tol)


def _blend_system(req: BlendRequest):
    """Neighbor indexing and right-hand sides of the discrete Poisson system.

    For each masked pixel p the equation is
        4 f_p - sum_{q in N_p inside} f_q
            = sum_{q in N_p outside} target_q + sum_{q in N_p} (g_p - g_q)
    with N_p the 4-neighborhood in the target frame and g the source. Source
    edges replicate when the mask touches the source border.
    """
    src = np.atleast_3d(req.source).astype(np.float64)
    tgt = np.atleast_3d(req.target).astype(np.float64)
    ys, xs = np.nonzero(req.mask)
    oy, ox = req.offset
    ty, tx = ys + oy, xs + ox
    sh, sw = req.mask.shape
    th, tw = tgt.shape[:2]

    index = np.full((th, tw), -1, dtype=np.intp)
    index[ty, tx] = np.arange(len(ys))

    neighbor_idx = []
    channels = tgt.shape[2]
    b = np.zeros((len(ys), channels), dtype=np.float64)
    g_center = src[ys, xs]
    for dy, dx in _DIRS:
        nidx = index[ty + dy, tx + dx]
        inside = nidx >= 0
        neighbor_idx.append((nidx, inside))
        # Dirichlet data from the target where the neighbor leaves the mask.
        b[~inside] += tgt[ty[~inside] + dy, tx[~inside] + dx]
        # Guidance field: the source's own gradients.
        nsy = np.clip(ys + dy, 0, sh - 1)
        nsx = np.clip(xs + dx, 0, sw - 1)
        b += g_center - src[nsy, nsx]
    return tgt, (ty, tx), neighbor_idx, b


def blend_values(
    req: BlendRequest, tol: float = 1e-8, max_iters: int | None = None
) -> np.ndarray:
    """Solve the blend and return the unclamped float64 result.

    Pixels outside the mask are exact copies of the target; masked pixels hold
    the conjugate-gradient solution of the Poisson system, solved per channel
    to a relative residual of ``tol``.
    """
    squeeze = req.target.ndim == 2
    tgt, (ty, tx), neighbor_idx, b = _blend_system(req)
    out = tgt.copy()
    n = len(ty)
    if n:
        if max_iters is None:
            max_iters = max(10 * n, 100)

        def matvec(x):
            ax = 4.0 * x
            for nidx, inside in neighbor_idx:
                ax[inside] -= x[nidx[inside]]
            return ax

        for c in range(tgt.shape[2]):
            x0 = tgt[ty, tx, c]
            out[ty, tx, c], _ = _conjugate_gradient(matvec, b[:, c], x0, tol, max_iters)
    return out[:, :, 0] if squeeze else out


def poisson_blend(
    req: BlendRequest, tol: float = 1e-8, max_iters: int | None = None
) -> np.ndarray:
    """Seamless clone of the masked source region into the target.

    Returns a raster with the target's dtype; 8-bit targets are clamped to
    [0, 255] and rounded only after solving. Float targets come back
    unclamped (identical to blend_values).
    """
    values = blend_values(req, tol=tol, max_iters=max_iters)
    if np.issubdtype(req.target.dtype, np.integer):
        return np.clip(np.round(values), 0, 255).astype(req.target.dtype)
    return values.astype(req.target.dtype)


def augment_catalog_image(
    image: np.ndarray,
    background_repo: list[np.ndarray],
    threshold: int = WHITE_THRESHOLD_DEFAULT,
    dilate_radius: int = DILATE_RADIUS_DEFAULT,
    seed: int = 0,
    margin: int = BLEND_MARGIN,
) -> np.ndarray:
    """Blend a white-background product image onto a random background patch.

    Images without a white-dominant backdrop (under 20% white pixels) pass
    through unchanged with a warning. An all-background image yields the
    sampled patch as-is. Deterministic for a fixed seed.
    """
    mask = white_threshold_mask(image, threshold)
    white_fraction = 1.0 - mask.mean()
    if white_fraction < 0.2:
        warnings.warn(
            f"background is only {white_fraction:.0%} white; returning image unchanged",
            stacklevel=2,
        )
        return image.copy()
    rng = np.random.default_rng(seed)
    h, w = mask.shape
    patch = sample_background(
        background_repo, (h + 2 * margin, w + 2 * margin), rng
    )
    component = largest_component(mask)
    if not component.any():
        return patch
    grown = dilate(component, dilate_radius)
    req = BlendRequest(source=image, target=patch, mask=grown, offset=(margin, margin))
    return poisson_blend(req)
