"""Synthetic ground truth: parameter maps, decay series, motion, cohorts.

The phantom is a smoothed ellipsoidal "lung" (high diffusivity) inside a
uniform background, with an ROI eroded a little from the ellipsoid so the
boundary blur barely touches the ROI statistics.  Everything is a pure
function of (spec, seed).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .maturity import CohortPoint, SaturationFit, predict_adc
from .signal_model import ParameterMaps, forward_signal
from .volume import BValueSeries, DisplacementField, RoiMask, ScalarVolume, warp

DEFAULT_BVALUES = (0.0, 50.0, 100.0, 200.0, 400.0, 600.0)


@dataclass(frozen=True)
class PhantomSpec:
    """Geometry, tissue parameters, noise and motion of a synthetic case."""

    dims: tuple = (96, 96, 16)
    lung_adc: float = 2.5e-3  # mm^2/s
    background_adc: float = 1.0e-3
    lung_s0: float = 1.0
    background_s0: float = 0.55
    roi_center: tuple | None = None  # voxels; defaults to the volume center
    roi_radii: tuple | None = None  # voxels; defaults to ~30% of each extent
    roi_margin: float = 2.0  # erosion of the ROI vs. the ellipsoid, voxels
    boundary_sigma: float = 1.0  # gaussian blur of the lung boundary, voxels
    s0_texture: float = 0.15  # relative amplitude of smooth S0 variation
    adc_texture: float = 0.08  # relative amplitude of smooth ADC variation
    noise_sigma: float = 0.0  # additive noise std, fraction of max S0
    motion_amplitude: float = 0.0  # max displacement magnitude, voxels
    motion_smoothness: float = 48.0  # approx. wavelength of the fields, voxels
    bvalues: tuple = DEFAULT_BVALUES
    seed: int = 0

    def __post_init__(self):
        if self.noise_sigma < 0 or self.motion_amplitude < 0:
            raise ValueError("noise_sigma and motion_amplitude must be >= 0")
        if min(self.dims) < 2:
            raise ValueError("phantom dims must be >= 2 along every axis")

    def center(self) -> tuple:
        if self.roi_center is not None:
            return tuple(float(c) for c in self.roi_center)
        return tuple((n - 1) / 2.0 for n in self.dims)

    def radii(self) -> tuple:
        if self.roi_radii is not None:
            return tuple(float(r) for r in self.roi_radii)
        nx, ny, nz = self.dims
        return (max(0.3 * nx, 2.0), max(0.3 * ny, 2.0), max(0.25 * nz, 2.0))


def _ellipsoid_mask(dims, center, radii) -> np.ndarray:
    grids = np.ogrid[tuple(slice(0, n) for n in dims)]
    q = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, radii))
    return q <= 1.0


def _texture(dims, center, radii) -> np.ndarray:
    """Fixed smooth zero-mean modulation pattern, ~2 cycles per lung radius."""
    grids = np.ogrid[tuple(slice(0, n) for n in dims)]
    t = 1.0
    for g, c, r in zip(grids, center, radii):
        t = t * np.sin(2.0 * np.pi * (g - c) / r + 0.7)
    u = 1.0
    for g, c, r in zip(grids, center, radii):
        u = u * np.cos(1.3 * np.pi * (g - c) / r + 0.3)
    return t + 0.6 * u


def make_phantom(spec: PhantomSpec):
    """Build ground-truth parameter maps and the lung ROI.

    Returns (ParameterMaps, RoiMask).  The ADC and S0 maps blend lung and
    background values across a gaussian-smoothed ellipsoid boundary; the ROI
    is the ellipsoid eroded by roi_margin voxels, so the ROI-mean true ADC
    sits within a couple percent of lung_adc.
    """
    dims = spec.dims
    center = spec.center()
    radii = spec.radii()
    for c, r, n in zip(center, radii, dims):
        if r <= 0:
            raise ValueError("roi out of bounds: non-positive radius")
        if c - r < 0 or c + r > n - 1:
            raise ValueError(
                f"roi out of bounds: center {center} radii {radii} in dims {dims}"
            )
    lung = _ellipsoid_mask(dims, center, radii).astype(np.float64)
    blend = gaussian_filter(lung, sigma=spec.boundary_sigma, mode="nearest")
    adc = spec.background_adc + (spec.lung_adc - spec.background_adc) * blend
    s0 = spec.background_s0 + (spec.lung_s0 - spec.background_s0) * blend
    # smooth parenchyma-like texture so per-voxel decay is motion-sensitive
    # away from the boundary too; zero-mean modulation restricted to the lung
    tex = _texture(dims, center, radii)
    s0 = s0 * (1.0 + spec.s0_texture * blend * tex)
    adc = adc * (1.0 + spec.adc_texture * blend * tex)
    # keep at least half of each radius so small phantoms retain an ROI
    roi_radii = tuple(max(r - spec.roi_margin, 0.5 * r) for r in radii)
    if min(roi_radii) <= 0:
        raise ValueError("roi radii collapse to zero after erosion")
    roi = RoiMask(_ellipsoid_mask(dims, center, roi_radii))
    if roi.count == 0:
        raise ValueError("empty ROI")
    maps = ParameterMaps(ScalarVolume(np.log(s0)), ScalarVolume(adc))
    return maps, roi


def simulate_series(maps: ParameterMaps, roi: RoiMask, bvalues, noise_sigma: float, seed: int):
    """Generate a decay series from the maps plus clipped Gaussian noise.

    Noise std is noise_sigma * max(S0); negative samples clip to 0.
    """
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    rng = np.random.default_rng(seed)
    s0 = np.exp(maps.log_s0.data)
    adc = maps.adc.data
    sigma = noise_sigma * float(s0.max())
    vols = []
    for b in bvalues:
        clean = forward_signal(s0, adc, float(b))
        if sigma > 0:
            noisy = clean + rng.normal(0.0, sigma, size=clean.shape)
            clean = np.maximum(noisy, 0.0)
        vols.append(ScalarVolume(clean))
    return BValueSeries(tuple(float(b) for b in bvalues), tuple(vols))


def _smooth_random_field(dims, amplitude, smoothness, rng) -> DisplacementField:
    """Low-frequency random field with max voxel magnitude == amplitude.

    Each component is a bulk translation term plus a few sinusoidal modes
    whose per-axis cycle counts are capped by dims/smoothness; the whole
    field is then rescaled so its largest displacement vector has length
    `amplitude`.
    """
    if amplitude == 0.0:
        return DisplacementField.zero(dims)
    max_cycles = [max(1, int(n / smoothness)) for n in dims]
    grids = [np.arange(n, dtype=np.float64) / n for n in dims]
    xg = grids[0][:, None, None]
    yg = grids[1][None, :, None]
    zg = grids[2][None, None, :]
    u = np.zeros(tuple(dims) + (3,), dtype=np.float64)
    # bulk translation plus low-frequency deformation; the through-plane
    # component dominates because that is where a few voxels of motion
    # carry anatomy across the thin slab
    for c, t_std in enumerate((0.6, 0.6, 1.0)):
        u[..., c] += float(rng.normal(0.0, t_std))
        for _ in range(2):
            f = [int(rng.integers(0, m + 1)) for m in max_cycles]
            if all(v == 0 for v in f):
                f[int(rng.integers(0, 3))] = 1
            amp = float(rng.normal(0.0, 0.4))
            phase = float(rng.uniform(0.0, 2.0 * np.pi))
            u[..., c] += amp * np.sin(2.0 * np.pi * (f[0] * xg + f[1] * yg + f[2] * zg) + phase)
    mag = np.sqrt((u * u).sum(axis=-1)).max()
    if mag > 0:
        u *= amplitude / mag
    return DisplacementField(u)


def apply_synthetic_motion(series: BValueSeries, spec: PhantomSpec, seed: int):
    """Deform every b > 0 image by its own smooth random field.

    The b = 0 image stays fixed as the reference frame.  Per-image severity
    varies (fetal motion leaves some acquisitions nearly clean and corrupts
    others fully): each field's max magnitude is a uniform[0.3, 1] fraction
    of spec.motion_amplitude.  Returns the moved series and the true
    per-b-value fields (zero field first).
    """
    rng = np.random.default_rng(seed)
    fields = [DisplacementField.zero(series.dims)]
    vols = [series.volumes[0]]
    for vol in series.volumes[1:]:
        severity = float(rng.uniform(0.3, 1.0)) if spec.motion_amplitude > 0 else 0.0
        f = _smooth_random_field(
            series.dims, severity * spec.motion_amplitude, spec.motion_smoothness, rng
        )
        fields.append(f)
        vols.append(warp(vol, f))
    return BValueSeries(series.bvalues, tuple(vols)), fields


def make_cohort(n: int, ga_range, sat_params, adc_noise: float, seed: int):
    """Sample a synthetic cohort from the saturation model.

    sat_params is (adc_sat, alpha); GA is uniform over ga_range and the ADC
    gets additive Gaussian noise of std adc_noise.
    """
    if n < 3:
        raise ValueError("need n >= 3 cohort cases")
    adc_sat, alpha = sat_params
    truth = SaturationFit(adc_sat=adc_sat, alpha=alpha, r2=1.0)
    rng = np.random.default_rng(seed)
    pts = []
    for i in range(n):
        ga = float(rng.uniform(*ga_range))
        adc = predict_adc(ga, truth) + float(rng.normal(0.0, adc_noise))
        pts.append(CohortPoint(f"sim{i:03d}", ga, adc))
    return pts
