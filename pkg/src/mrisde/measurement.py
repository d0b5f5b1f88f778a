"""K-space measurement model: sampling masks, coil sensitivities, the forward
operator mask * F * S with its adjoint, the data-consistency mapping, spectral
norm verification, and a phantom generator.

Conventions baked in here:
  - 1D mask kinds select whole columns (phase-encoding direction = axis 1,
    readout = axis 0).
  - Measured multi-coil k-space is stored zero-filled on the full (c, H, W)
    grid; the mask implicitly carries the acquired set.
  - Gaussian mask densities use std = width / 6; the Poisson-disc radius law
    is r(k) = r0 * (1 + 2 |k| / k_max) with r0 tuned by bisection so the kept
    fraction lands within 10% of 1/R.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    ConfigurationError,
    DegeneratePixelError,
    ParameterError,
    ShapeMismatchError,
    SizeError,
)
from .grid import Rng, dft2c, dft2c_stack, idft2c, idft2c_stack

MASK_KINDS = ("uniform1d", "gaussian1d", "gaussian2d", "poisson_vd", "full")


@dataclass(frozen=True)
class SamplingMask:
    """Binary k-space selector with acceleration and ACS metadata."""

    keep: np.ndarray  # bool (H, W)
    kind: str
    requested_accel: float
    acs_fraction: float

    @property
    def shape(self):
        return self.keep.shape

    def measured_accel(self) -> float:
        kept = int(self.keep.sum())
        if kept == 0:
            raise ConfigurationError("mask keeps no samples")
        return self.keep.size / kept


@dataclass(frozen=True)
class SensitivityMaps:
    """Stack of c complex coil maps of identical shape (c, H, W)."""

    maps: np.ndarray  # complex (c, H, W)
    support: np.ndarray | None = None  # bool (H, W); None means everywhere

    @property
    def coils(self) -> int:
        return self.maps.shape[0]

    @property
    def shape(self):
        return self.maps.shape[1:]


@dataclass(frozen=True)
class MultiCoilKspace:
    """Per-coil masked k-space, zero-filled on the full grid."""

    data: np.ndarray  # complex (c, H, W)
    mask: SamplingMask

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ShapeMismatchError(f"k-space must be (c, H, W), got {self.data.shape}")
        if self.data.shape[1:] != self.mask.shape:
            raise ShapeMismatchError(
                f"k-space grid {self.data.shape[1:]} != mask grid {self.mask.shape}"
            )

    @property
    def coils(self) -> int:
        return self.data.shape[0]


# ---------------------------------------------------------------------------
# sampling masks


def _centered_block(n: int, size: int):
    start = (n - size) // 2
    return start, start + size


def _equispaced_picks(available: np.ndarray, count: int):
    """Deterministic rounded-equispaced selection from a sorted index list."""
    if count <= 0:
        return available[:0]
    L = len(available)
    pos = np.round((np.arange(count) + 0.5) * L / count - 0.5).astype(int)
    pos = np.clip(pos, 0, L - 1)
    return available[np.unique(pos)]


def _column_mask(h: int, w: int, cols) -> np.ndarray:
    keep = np.zeros((h, w), dtype=bool)
    keep[:, np.asarray(cols, dtype=int)] = True
    return keep


def _gaussian_weights(n: int, std: float) -> np.ndarray:
    c = (n - 1) / 2.0
    x = np.arange(n) - c
    return np.exp(-0.5 * (x / std) ** 2)


def _poisson_vd_keep(h, w, acs_radius, order, r0):
    """Dart throwing over a shuffled pixel order with a center-growing radius.

    Returns the maximal keep mask for a given base radius r0.  The central
    disc of ``acs_radius`` is pre-accepted.  ``order`` fixes the candidate
    sequence so bisection over r0 is deterministic.
    """
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    k_max = math.hypot(h / 2.0, w / 2.0)
    ys, xs = np.divmod(order, w)
    dist = np.hypot(ys - cy, xs - cx)
    radius = r0 * (1.0 + 2.0 * dist / k_max)

    keep = np.zeros((h, w), dtype=bool)
    if acs_radius > 0:
        yy, xx = np.mgrid[0:h, 0:w]
        keep[np.hypot(yy - cy, xx - cx) <= acs_radius] = True

    # bucket grid for neighbor queries; cell size >= max radius
    cell = max(r0 * 3.0, 1.0)
    gh, gw = int(h / cell) + 1, int(w / cell) + 1
    buckets = [[[] for _ in range(gw)] for _ in range(gh)]
    for y, x in zip(*np.nonzero(keep)):
        buckets[int(y / cell)][int(x / cell)].append((y, x))

    for idx in range(len(order)):
        y, x = int(ys[idx]), int(xs[idx])
        if keep[y, x]:
            continue
        r = radius[idx]
        by, bx = int(y / cell), int(x / cell)
        ok = True
        for gy in range(max(0, by - 1), min(gh, by + 2)):
            for gx in range(max(0, bx - 1), min(gw, bx + 2)):
                for (py, px) in buckets[gy][gx]:
                    if (py - y) ** 2 + (px - x) ** 2 < r * r:
                        ok = False
                        break
                if not ok:
                    break
            if not ok:
                break
        if ok:
            keep[y, x] = True
            buckets[by][bx].append((y, x))
    return keep


def make_mask(kind: str, height: int, width: int, accel: float,
              acs_fraction: float = 0.0, rng: Rng | None = None) -> SamplingMask:
    """Generate a sampling mask of the requested kind and acceleration.

    The fully kept ACS region is a centered column block for 1D kinds, a
    centered square for gaussian2d, and a centered disc for poisson_vd, each
    covering ``acs_fraction`` of the total area.  Measured acceleration lands
    within 10% of ``accel`` for R <= 16.
    """
    if kind not in MASK_KINDS:
        raise ConfigurationError(f"unknown mask kind: {kind!r}")
    if height < 1 or width < 1:
        raise SizeError("mask dimensions must be positive")
    if accel < 1:
        raise ConfigurationError("acceleration must be >= 1")
    if not 0 <= acs_fraction <= 0.5:
        raise ConfigurationError("acs_fraction must lie in [0, 0.5]")

    if kind == "full":
        keep = np.ones((height, width), dtype=bool)
        return SamplingMask(keep, kind, 1.0, acs_fraction)

    total = height * width
    budget = int(round(total / accel))

    if kind in ("uniform1d", "gaussian1d"):
        n_cols = int(round(width / accel))
        if n_cols < 1:
            raise ConfigurationError(f"R={accel} leaves no columns on width {width}")
        n_acs = int(acs_fraction * width)
        if n_acs > n_cols:
            raise ConfigurationError(
                f"ACS ({n_acs} columns) alone exceeds the sampling budget ({n_cols})"
            )
        lo, hi = _centered_block(width, n_acs)
        acs_cols = np.arange(lo, hi)
        rest = np.setdiff1d(np.arange(width), acs_cols)
        n_rest = n_cols - n_acs
        if kind == "uniform1d":
            picked = _equispaced_picks(rest, n_rest)
        else:
            if rng is None:
                raise ConfigurationError("gaussian1d mask needs an rng")
            weights = _gaussian_weights(width, width / 6.0)[rest]
            weights = weights / weights.sum()
            g = rng.generator()
            picked = g.choice(rest, size=n_rest, replace=False, p=weights)
        keep = _column_mask(height, width, np.concatenate([acs_cols, picked]))
        return SamplingMask(keep, kind, float(accel), acs_fraction)

    if kind == "gaussian2d":
        side = int(round(math.sqrt(acs_fraction * total)))
        n_acs = side * side
        if n_acs > budget:
            raise ConfigurationError(
                f"ACS ({n_acs} px) alone exceeds the sampling budget ({budget})"
            )
        keep = np.zeros((height, width), dtype=bool)
        r0, r1 = _centered_block(height, side)
        c0, c1 = _centered_block(width, side)
        keep[r0:r1, c0:c1] = True
        if rng is None:
            raise ConfigurationError("gaussian2d mask needs an rng")
        wy = _gaussian_weights(height, width / 6.0)
        wx = _gaussian_weights(width, width / 6.0)
        weights = np.outer(wy, wx)
        weights[keep] = 0.0
        flat = weights.ravel()
        flat = flat / flat.sum()
        g = rng.generator()
        picked = g.choice(total, size=budget - n_acs, replace=False, p=flat)
        keep.ravel()[picked] = True
        return SamplingMask(keep, kind, float(accel), acs_fraction)

    # poisson_vd: bisection on the base radius until the kept fraction matches
    acs_radius = math.sqrt(acs_fraction * total / math.pi)
    if acs_fraction > 0:
        yy, xx = np.mgrid[0:height, 0:width]
        in_disc = np.hypot(yy - (height - 1) / 2.0, xx - (width - 1) / 2.0) <= acs_radius
        n_acs = int(in_disc.sum())
    else:
        n_acs = 0
    if n_acs > budget:
        raise ConfigurationError(
            f"ACS disc ({n_acs} px) alone exceeds the sampling budget ({budget})"
        )
    if rng is None:
        raise ConfigurationError("poisson_vd mask needs an rng")
    order = rng.generator().permutation(total)
    target = 1.0 / accel
    lo, hi = 0.25, float(max(height, width))
    keep = None
    for _ in range(40):
        mid = math.sqrt(lo * hi)
        cand = _poisson_vd_keep(height, width, acs_radius, order, mid)
        frac = cand.sum() / total
        if abs(frac - target) <= 0.06 * target:
            keep = cand
            break
        if frac > target:
            lo = mid  # too dense -> grow radius
        else:
            hi = mid
    if keep is None:
        raise ConfigurationError(
            f"poisson_vd radius tuning failed for R={accel} on {height}x{width}"
        )
    return SamplingMask(keep, kind, float(accel), acs_fraction)


# ---------------------------------------------------------------------------
# coil sensitivities


def normalize_sensitivities(maps: SensitivityMaps) -> SensitivityMaps:
    """Scale the coil stack so sum_k |S_k(p)|^2 = 1 on the support.

    Phase of each coil is preserved; pixels outside the support are set to
    exactly zero in every coil.
    """
    stack = np.asarray(maps.maps, dtype=complex)
    energy = np.sum(np.abs(stack) ** 2, axis=0)
    support = maps.support if maps.support is not None else np.ones(energy.shape, bool)
    if np.any(energy[support] == 0):
        raise DegeneratePixelError("all coils vanish at a pixel inside the support")
    out = np.zeros_like(stack)
    norm = np.sqrt(energy, where=support, out=np.ones_like(energy))
    out[:, support] = stack[:, support] / norm[support]
    return SensitivityMaps(out, maps.support)


def simulate_sensitivities(coils: int, height: int, width: int, rng: Rng,
                           support: np.ndarray | None = None) -> SensitivityMaps:
    """Smooth synthetic coil maps: Gaussian-bump magnitudes centered at
    equispaced angles around the FOV with linear phase ramps, normalized.

    A single coil reduces to the identity map (all ones on the support).
    """
    if coils < 1:
        raise ConfigurationError("need at least one coil")
    if coils == 1:
        ones = np.ones((1, height, width), dtype=complex)
        if support is not None:
            ones[:, ~support] = 0.0
        return SensitivityMaps(ones, support)

    g = rng.generator()
    v, u = np.mgrid[0:height, 0:width]
    u = (2 * u - (width - 1)) / max(width - 1, 1)
    v = (2 * v - (height - 1)) / max(height - 1, 1)
    stack = np.empty((coils, height, width), dtype=complex)
    for k in range(coils):
        ang = 2 * math.pi * k / coils + g.uniform(-0.1, 0.1)
        cu, cv = 0.9 * math.cos(ang), 0.9 * math.sin(ang)
        widthk = 0.8 + g.uniform(-0.05, 0.05)
        mag = 0.05 + np.exp(-((u - cu) ** 2 + (v - cv) ** 2) / (2 * widthk**2))
        phase = g.uniform(-1.0, 1.0) * u + g.uniform(-1.0, 1.0) * v + g.uniform(0, 2 * math.pi)
        stack[k] = mag * np.exp(1j * phase)
    return normalize_sensitivities(SensitivityMaps(stack, support))


def support_from_magnitude(img, dilation: int = 2) -> np.ndarray:
    """Support = pixels with nonzero magnitude, dilated by ``dilation`` px."""
    from scipy.ndimage import binary_dilation

    base = np.abs(np.asarray(img)) > 0
    if dilation > 0:
        base = binary_dilation(base, iterations=dilation)
    return base


# ---------------------------------------------------------------------------
# forward model


def _check_maps(x_shape, maps: SensitivityMaps | None):
    if maps is not None and maps.shape != x_shape:
        raise ShapeMismatchError(f"maps grid {maps.shape} != image grid {x_shape}")


def forward(x, mask: SamplingMask, maps: SensitivityMaps | None = None) -> MultiCoilKspace:
    """Apply A = mask * F * S; single-coil (maps=None) uses A = mask * F."""
    x = np.asarray(x, dtype=complex)
    if x.shape != mask.shape:
        raise ShapeMismatchError(f"image grid {x.shape} != mask grid {mask.shape}")
    _check_maps(x.shape, maps)
    if maps is None:
        data = (mask.keep * dft2c(x))[None]
    else:
        data = mask.keep * dft2c_stack(maps.maps * x)
    return MultiCoilKspace(data, mask)


def adjoint(y: MultiCoilKspace, maps: SensitivityMaps | None = None) -> np.ndarray:
    """Apply A* = S* * F^{-1} * mask; returns the (H, W) complex image."""
    _check_maps(y.mask.shape, maps)
    masked = y.data * y.mask.keep
    if maps is None:
        if y.coils != 1:
            raise ShapeMismatchError("adjoint without maps expects single-coil data")
        return idft2c(masked[0])
    if maps.coils != y.coils:
        raise ShapeMismatchError(f"{maps.coils} maps for {y.coils} coils")
    return np.sum(np.conj(maps.maps) * idft2c_stack(masked), axis=0)


def zero_filled(y: MultiCoilKspace, maps: SensitivityMaps | None = None) -> np.ndarray:
    """Zero-filled reconstruction A* y (the standard aliased baseline)."""
    return adjoint(y, maps)


def zero_filled_ssos(y: MultiCoilKspace) -> np.ndarray:
    """Root-sum-of-squares of per-coil zero-filled images."""
    per_coil = idft2c_stack(y.data * y.mask.keep)
    return np.sqrt(np.sum(np.abs(per_coil) ** 2, axis=0))


def data_consistency(x, y: MultiCoilKspace, maps: SensitivityMaps | None = None,
                     lam: float = 1.0) -> np.ndarray:
    """x + lam * A*(y - A x).  For single coil and lam=1 this exactly replaces
    the acquired k-space entries of x with y."""
    if not 0.0 <= lam <= 1.0:
        raise ParameterError(f"lambda={lam} outside [0, 1]")
    residual = MultiCoilKspace(y.data - forward(x, y.mask, maps).data, y.mask)
    return np.asarray(x, dtype=complex) + lam * adjoint(residual, maps)


def nonexpansive_bound(mask: SamplingMask, maps: SensitivityMaps | None = None,
                       lam: float = 1.0, iters: int = 50, tol: float = 1e-8,
                       rng: Rng | None = None) -> float:
    """Power-iteration estimate of the spectral norm of I - lam * A*A.

    The operator is Hermitian PSD for lam in [0, 1] and normalized maps, so
    the power iteration converges to its largest eigenvalue; the contract is
    that the estimate never exceeds 1 + 1e-6.
    """
    if not 0.0 <= lam <= 1.0:
        raise ParameterError(f"lambda={lam} outside [0, 1]")
    g = (rng or Rng(0)).generator()
    v = g.standard_normal(mask.shape) + 1j * g.standard_normal(mask.shape)
    v /= np.linalg.norm(v)

    def op(w):
        return w - lam * adjoint(forward(w, mask, maps), maps)

    est = None
    for _ in range(max(iters, 50)):
        w = op(v)
        norm = float(np.linalg.norm(w))
        if norm == 0:
            return 0.0
        stagnated = est is not None and abs(norm - est) <= tol
        est = norm  # = ||T v|| for unit v, a lower bound on the spectral norm
        if stagnated:
            break
        v = w / norm
    return est


# ---------------------------------------------------------------------------
# phantom

# Ellipse table (intensity, semi-axis a, semi-axis b, x center, y center,
# rotation in degrees), the widely used high-contrast variant.
_ELLIPSES = [
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.8740, 0.0, -0.0184, 0.0),
    (-0.2, 0.1100, 0.3100, 0.22, 0.0, -18.0),
    (-0.2, 0.1600, 0.4100, -0.22, 0.0, 18.0),
    (0.1, 0.2100, 0.2500, 0.0, 0.35, 0.0),
    (0.1, 0.0460, 0.0460, 0.0, 0.1, 0.0),
    (0.1, 0.0460, 0.0460, 0.0, -0.1, 0.0),
    (0.1, 0.0460, 0.0230, -0.08, -0.605, 0.0),
    (0.1, 0.0230, 0.0230, 0.0, -0.606, 0.0),
    (0.1, 0.0230, 0.0460, 0.06, -0.605, 0.0),
]

# fixed low-order polynomial coefficients for the smooth-phase option
_PHASE_COEFFS = (0.3, 0.9, -0.7, 0.5, 0.6, -0.4)


def random_ellipses(height: int, width: int, rng: Rng, count_range=(4, 10)) -> np.ndarray:
    """Random piecewise-constant ellipse image with intensities in [0, 1].

    Desk-scale training data with the same local statistics as the phantom:
    overlapping ellipses of random position, size, orientation, and signed
    intensity, clipped to [0, 1].
    """
    g = rng.generator()
    yy, xx = np.mgrid[0:height, 0:width]
    u = (2 * xx - (width - 1)) / (width - 1)
    v = (2 * yy - (height - 1)) / (height - 1)
    img = np.zeros((height, width), float)
    for _ in range(g.integers(count_range[0], count_range[1] + 1)):
        a, b = g.uniform(0.1, 0.8, size=2)
        x0, y0 = g.uniform(-0.6, 0.6, size=2)
        th = g.uniform(0, math.pi)
        amp = g.uniform(-0.6, 1.0)
        du, dv = u - x0, v - y0
        ur = du * math.cos(th) + dv * math.sin(th)
        vr = -du * math.sin(th) + dv * math.cos(th)
        img[(ur / a) ** 2 + (vr / b) ** 2 <= 1.0] += amp
    return np.clip(img, 0.0, 1.0)


def shepp_logan(height: int, width: int, phase: str = "none") -> np.ndarray:
    """Standard ellipse phantom with intensity in [0, 1], background 0.

    phase='smooth' multiplies by exp(i phi) with phi a fixed low-order 2D
    polynomial, leaving the magnitude untouched but making the image
    genuinely complex-valued.
    """
    if height < 32 or width < 32:
        raise SizeError("phantom dimensions must be >= 32")
    if phase not in ("none", "smooth"):
        raise ParameterError(f"unknown phase option: {phase!r}")
    yy, xx = np.mgrid[0:height, 0:width]
    u = (2 * xx - (width - 1)) / (width - 1)
    v = -(2 * yy - (height - 1)) / (height - 1)
    img = np.zeros((height, width), float)
    for amp, a, b, x0, y0, deg in _ELLIPSES:
        th = math.radians(deg)
        du, dv = u - x0, v - y0
        ur = du * math.cos(th) + dv * math.sin(th)
        vr = -du * math.sin(th) + dv * math.cos(th)
        img[(ur / a) ** 2 + (vr / b) ** 2 <= 1.0] += amp
    img = np.clip(img, 0.0, 1.0)
    if phase == "none":
        return img.astype(complex)
    a0, a1, a2, a3, a4, a5 = _PHASE_COEFFS
    phi = a0 + a1 * u + a2 * v + a3 * u * v + a4 * u**2 + a5 * v**2
    return img * np.exp(1j * phi)
