"""Parametric cardiac phantoms: nested-ellipse anatomy, class-dependent texture.

Each phantom is a stack of short-axis slices. The left ventricle (LV) is a
disk whose radius follows a half-ellipsoid taper from base to apex, wrapped
by a closed myocardial ring of constant thickness; the right ventricle (RV)
is a crescent hugging the ring. The heart sits inside a soft-tissue body
ellipse with a bright fat shell, so percentile normalization anchors on
air (low) and fat (high) and class contrast survives preprocessing.

Pathology presets shift geometry the way the corresponding diseases do:
DCM dilates the LV, HCM thickens the myocardium, DRV dilates the RV.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .data_io import Subject, SubjectMeta, preprocess
from .errors import GeometryError

# native generation grid (preprocessing resamples/crops to 128 @ 1.5mm)
NATIVE_PX = 192
NATIVE_MM = 1.25

# raw intensity palette (arbitrary scanner units)
AIR_RAW = 0.0
TISSUE_RAW = 260.0
FAT_RAW = 1000.0
MYO_RAW = 380.0
BLOOD_RAW = 800.0
RV_BLOOD_FRACTION = 0.8
NOISE_RAW = 26.0

BODY_SEMI_MM = (84.0, 72.0)   # (row, col)
FAT_SHELL_MM = 7.0
HEART_OFFSET_MM = (4.0, -10.0)  # heart center relative to body center


@dataclass
class PhantomParams:
    lv_radius_mm: float = 22.0
    myo_thickness_mm: float = 8.0
    rv_radius_mm: float = 18.0
    n_slices: int = 10
    apex_taper: float = 0.92
    texture_seed: int = 0
    pathology: str = "NOR"
    blood_brightness: float = 0.90   # scales blood levels; the style knob
    slice_mm: float = 10.0

    def __post_init__(self):
        if min(self.lv_radius_mm, self.myo_thickness_mm, self.rv_radius_mm) <= 0:
            raise GeometryError("radii and thickness must be positive")
        if not 6 <= self.n_slices <= 13:
            raise GeometryError(f"n_slices {self.n_slices} outside [6, 13]")
        if not 0 < self.apex_taper <= 1:
            raise GeometryError(f"apex_taper {self.apex_taper} outside (0, 1]")


PRESETS: dict[str, PhantomParams] = {
    "NOR": PhantomParams(lv_radius_mm=22.0, myo_thickness_mm=8.0, rv_radius_mm=18.0,
                         pathology="NOR"),
    "DCM": PhantomParams(lv_radius_mm=33.0, myo_thickness_mm=6.5, rv_radius_mm=19.0,
                         pathology="DCM"),
    "HCM": PhantomParams(lv_radius_mm=17.0, myo_thickness_mm=17.0, rv_radius_mm=17.0,
                         pathology="HCM"),
    "DRV": PhantomParams(lv_radius_mm=21.0, myo_thickness_mm=8.0, rv_radius_mm=31.0,
                         pathology="DRV"),
}

# severity pushes the pathognomonic parameter further out of distribution
_SEVERITY_GAIN = {"DCM": ("lv_radius_mm", 0.28), "HCM": ("myo_thickness_mm", 0.45),
                  "DRV": ("rv_radius_mm", 0.32), "NOR": (None, 0.0)}


def lv_volume_analytic_ml(params: PhantomParams) -> float:
    """Continuous volume of the tapered LV blood pool, in mL."""
    length_mm = params.n_slices * params.slice_mm
    return (np.pi * params.lv_radius_mm ** 2 * length_mm
            * (1.0 - params.apex_taper / 3.0)) / 1000.0


def _taper(z: float, apex_taper: float) -> float:
    return float(np.sqrt(max(0.0, 1.0 - apex_taper * z * z)))


def generate_phantom(params: PhantomParams, conform: bool = True,
                     subject_id: str = "phantom", phase: str = "ED",
                     vendor: str = "simA") -> Subject:
    """Render a phantom Subject; deterministic in (params, texture_seed).

    With ``conform=True`` (default) the standard preprocessing pipeline is
    applied, so the result is 128x128 in-plane at 1.5 mm with intensities
    in [-1, 1].
    """
    outer_max = params.lv_radius_mm + params.myo_thickness_mm
    rv_extent = outer_max + 1.3 * params.rv_radius_mm
    fov_half = NATIVE_PX * NATIVE_MM / 2.0
    if rv_extent + abs(HEART_OFFSET_MM[1]) > fov_half - 6 * NATIVE_MM or rv_extent > 88.0:
        raise GeometryError(
            f"anatomy exceeds field of view (max extent {rv_extent:.1f} mm)")

    rows_mm = (np.arange(NATIVE_PX) - NATIVE_PX / 2 + 0.5) * NATIVE_MM
    rr, cc = np.meshgrid(rows_mm, rows_mm, indexing="ij")
    body_r, body_c = BODY_SEMI_MM
    body = (rr / body_r) ** 2 + (cc / body_c) ** 2 <= 1.0
    fat = body & ((rr / (body_r - FAT_SHELL_MM)) ** 2
                  + (cc / (body_c - FAT_SHELL_MM)) ** 2 > 1.0)
    hr, hc = HEART_OFFSET_MM

    labels = np.zeros((params.n_slices, NATIVE_PX, NATIVE_PX), dtype=np.int16)
    image = np.zeros_like(labels, dtype=np.float32)
    lv_raw = BLOOD_RAW * params.blood_brightness
    rv_raw = lv_raw * RV_BLOOD_FRACTION

    for i in range(params.n_slices):
        z = (i + 0.5) / params.n_slices
        t = _taper(z, params.apex_taper)
        r_lv = params.lv_radius_mm * t
        r_out = r_lv + params.myo_thickness_mm
        d_lv = np.hypot(rr - hr, cc - hc)
        myo = d_lv <= r_out
        lv = d_lv <= r_lv
        sl = np.zeros((NATIVE_PX, NATIVE_PX), dtype=np.int16)
        sl[myo] = 2
        sl[lv] = 3
        if t > 0.25:  # RV ends above the apex
            rv_c = hc - (r_out + 0.35 * params.rv_radius_mm)
            a_row = 1.15 * params.rv_radius_mm * t
            a_col = 0.85 * params.rv_radius_mm * t
            rv = (((rr - hr) / a_row) ** 2 + ((cc - rv_c) / a_col) ** 2 <= 1.0)
            sl[rv & (sl == 0)] = 1
        labels[i] = sl

        img = np.full((NATIVE_PX, NATIVE_PX), AIR_RAW, dtype=np.float32)
        img[body] = TISSUE_RAW
        img[fat] = FAT_RAW
        img[sl == 2] = MYO_RAW
        img[sl == 1] = rv_raw
        img[sl == 3] = lv_raw
        image[i] = img

    rng = np.random.default_rng(params.texture_seed)
    noise = rng.normal(size=image.shape).astype(np.float32)
    noise = ndimage.gaussian_filter(noise, sigma=(0, 2.5, 2.5))
    image = image + NOISE_RAW * noise / max(noise.std(), 1e-8)

    meta = SubjectMeta(subject_id=subject_id, pathology=params.pathology,
                       vendor=vendor, phase=phase)
    subject = Subject(image=image, labels=labels,
                      spacing=(NATIVE_MM, NATIVE_MM, params.slice_mm), meta=meta)
    return preprocess(subject) if conform else subject


def sample_params(pathology: str, rng: np.random.Generator, phase: str = "ED",
                  severity: float = 0.0,
                  brightness_range: tuple[float, float] = (0.82, 0.98)) -> PhantomParams:
    """Draw jittered per-subject parameters around a pathology preset."""
    base = PRESETS[pathology]
    params = replace(
        base,
        lv_radius_mm=base.lv_radius_mm * rng.uniform(0.88, 1.12),
        myo_thickness_mm=base.myo_thickness_mm * rng.uniform(0.88, 1.12),
        rv_radius_mm=base.rv_radius_mm * rng.uniform(0.88, 1.12),
        n_slices=int(rng.integers(8, 12)),
        apex_taper=rng.uniform(0.82, 0.99),
        texture_seed=int(rng.integers(2 ** 31)),
        blood_brightness=rng.uniform(*brightness_range),
    )
    field_name, gain = _SEVERITY_GAIN[pathology]
    if field_name and severity > 0:
        params = replace(params, **{
            field_name: getattr(params, field_name) * (1.0 + gain * severity)})
    if phase == "ES":
        params = replace(params,
                         lv_radius_mm=params.lv_radius_mm * 0.72,
                         rv_radius_mm=params.rv_radius_mm * 0.78,
                         myo_thickness_mm=params.myo_thickness_mm * 1.18)
    return params


def generate_cohort(pathology: str, count: int, seed: int, phase: str = "ED",
                    severity: float = 0.0, id_prefix: str | None = None,
                    brightness_range: tuple[float, float] = (0.82, 0.98),
                    conform: bool = True) -> list[Subject]:
    """Generate ``count`` jittered subjects of one pathology class."""
    rng = np.random.default_rng(seed)
    prefix = id_prefix or pathology
    subjects = []
    for k in range(count):
        params = sample_params(pathology, rng, phase=phase, severity=severity,
                               brightness_range=brightness_range)
        subjects.append(generate_phantom(
            params, conform=conform, subject_id=f"{prefix}{k:03d}_{phase}", phase=phase))
    return subjects
