"""Subject loading, preprocessing, and persistence.

A :class:`Subject` couples an image volume with its integer label volume
(0 background, 1 right ventricle, 2 myocardium, 3 left ventricle), voxel
spacing, and metadata. The preprocessing pipeline brings any subject into
the geometry the models consume: 1.5 x 1.5 mm in-plane, 128 x 128 pixels
around the heart, intensities percentile-mapped to [-1, 1].

File convention per subject id: ``<id>.vol`` (image), ``<id>_gt.vol``
(labels); both NIfTI-1 (``.nii``/``.nii.gz`` also accepted). Cohort
directories carry a ``manifest.txt`` with one ``key=value`` record per
line describing pathology, vendor and phase.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import niftio
from .errors import (
    GeometryError,
    LabelDomainError,
    MissingFileError,
    NormalizationError,
    ShapeMismatchError,
)

LABEL_CLASSES = (0, 1, 2, 3)
N_CLASSES = 4
PATHOLOGIES = ("NOR", "DCM", "HCM", "DRV", "UNKNOWN")
TARGET_INPLANE_MM = 1.5
TARGET_SIZE_PX = 128


@dataclass
class SubjectMeta:
    subject_id: str = "unknown"
    pathology: str = "UNKNOWN"
    vendor: str = "unknown"
    phase: str = "ED"


@dataclass
class Subject:
    """An image volume, its labels, voxel spacing, and metadata.

    ``image`` and ``labels`` are (n_slices, rows, cols); ``spacing`` is
    (row_mm, col_mm, slice_mm).
    """

    image: np.ndarray
    labels: np.ndarray
    spacing: tuple[float, float, float]
    meta: SubjectMeta = field(default_factory=SubjectMeta)

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int16)
        self.spacing = tuple(float(s) for s in self.spacing)
        if self.image.shape != self.labels.shape:
            raise ShapeMismatchError(
                f"image {self.image.shape} vs labels {self.labels.shape}")
        _check_label_domain(self.labels)
        if any(s <= 0 for s in self.spacing):
            raise GeometryError(f"non-positive spacing {self.spacing}")

    @property
    def n_slices(self) -> int:
        return self.image.shape[0]

    def is_conforming(self) -> bool:
        """True when in the standard model geometry (128x128 @ 1.5mm)."""
        return (self.image.shape[1:] == (TARGET_SIZE_PX, TARGET_SIZE_PX)
                and abs(self.spacing[0] - TARGET_INPLANE_MM) < 1e-9
                and abs(self.spacing[1] - TARGET_INPLANE_MM) < 1e-9)


def _check_label_domain(labels: np.ndarray) -> None:
    bad = np.setdiff1d(np.unique(labels), LABEL_CLASSES)
    if bad.size:
        raise LabelDomainError(f"labels contain out-of-domain values {bad.tolist()}")


# ---------------------------------------------------------------------------
# persistence

def _paths_for(path: str | Path) -> tuple[Path, Path]:
    path = Path(path)
    suffix = "".join(path.suffixes)
    stem = path.name[: len(path.name) - len(suffix)] if suffix else path.name
    if stem.endswith("_gt"):
        stem = stem[:-3]
    img = path.with_name(stem + suffix)
    lab = path.with_name(stem + "_gt" + suffix)
    return img, lab


def save_subject(subject: Subject, path: str | Path) -> tuple[Path, Path]:
    """Write ``<id>.vol`` and ``<id>_gt.vol`` next to each other."""
    img_path, lab_path = _paths_for(path)
    img_path.parent.mkdir(parents=True, exist_ok=True)
    niftio.write_volume(img_path, subject.image.astype(np.float32), subject.spacing)
    niftio.write_volume(lab_path, subject.labels.astype(np.int16), subject.spacing)
    return img_path, lab_path


def load_subject(path: str | Path, meta: SubjectMeta | None = None,
                 require_labels: bool = True) -> Subject:
    """Load a subject from its image path (labels from the ``_gt`` sibling).

    Metadata comes from ``meta`` if given, else from a ``manifest.txt``
    sitting next to the file, else defaults.
    """
    img_path, lab_path = _paths_for(path)
    image, spacing = niftio.read_volume(img_path)
    if lab_path.is_file():
        labels, lab_spacing = niftio.read_volume(lab_path)
        if labels.shape != image.shape:
            raise ShapeMismatchError(
                f"{img_path}: image {image.shape} vs labels {labels.shape}")
    elif require_labels:
        raise MissingFileError(f"label file not found: {lab_path}")
    else:
        labels = np.zeros(image.shape, dtype=np.int16)
    if meta is None:
        subject_id = _subject_id_from(img_path)
        meta = SubjectMeta(subject_id=subject_id)
        manifest_path = img_path.parent / "manifest.txt"
        if manifest_path.is_file():
            entries = read_manifest(manifest_path)
            if subject_id in entries:
                meta = entries[subject_id]
    return Subject(image=image, labels=labels, spacing=spacing, meta=meta)


def load_labels_only(path: str | Path, meta: SubjectMeta | None = None) -> Subject:
    """Load a label-only subject (image filled with zeros)."""
    _, lab_path = _paths_for(path)
    labels, spacing = niftio.read_volume(lab_path)
    subject_id = _subject_id_from(lab_path).removesuffix("_gt")
    return Subject(image=np.zeros(labels.shape, np.float32), labels=labels,
                   spacing=spacing, meta=meta or SubjectMeta(subject_id=subject_id))


def _subject_id_from(path: Path) -> str:
    name = path.name
    for suffix in (".nii.gz", ".nii", ".vol", ".gz"):
        if name.endswith(suffix):
            name = name[: -len(suffix)]
            break
    return name


def read_manifest(path: str | Path) -> dict[str, SubjectMeta]:
    """Parse a manifest: one subject per line, ``key=value`` tokens."""
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"manifest not found: {path}")
    entries: dict[str, SubjectMeta] = {}
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        kv = dict(tok.split("=", 1) for tok in line.split() if "=" in tok)
        meta = SubjectMeta(
            subject_id=kv.get("subject_id", "unknown"),
            pathology=kv.get("pathology", "UNKNOWN"),
            vendor=kv.get("vendor", "unknown"),
            phase=kv.get("phase", "ED"),
        )
        entries[meta.subject_id] = meta
    return entries


def write_manifest(metas: list[SubjectMeta], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["# subject_id=<id> pathology=<NOR|DCM|HCM|DRV|UNKNOWN> vendor=<tag> phase=<ED|ES>"]
    for m in metas:
        lines.append(f"subject_id={m.subject_id} pathology={m.pathology} "
                     f"vendor={m.vendor} phase={m.phase}")
    path.write_text("\n".join(lines) + "\n")
    return path


# ---------------------------------------------------------------------------
# preprocessing

def resample_inplane(subject: Subject, target_mm: float = TARGET_INPLANE_MM) -> Subject:
    """Resample rows/cols to ``target_mm`` spacing; slices untouched.

    Image uses linear interpolation, labels nearest-neighbor so the label
    domain is preserved.
    """
    if target_mm <= 0:
        raise GeometryError(f"non-positive target spacing {target_mm}")
    row_mm, col_mm, slice_mm = subject.spacing
    if abs(row_mm - target_mm) < 1e-9 and abs(col_mm - target_mm) < 1e-9:
        return replace(subject, image=subject.image.copy(), labels=subject.labels.copy())
    scale_r = target_mm / row_mm
    scale_c = target_mm / col_mm
    out_r = max(1, int(round(subject.image.shape[1] / scale_r)))
    out_c = max(1, int(round(subject.image.shape[2] / scale_c)))
    # output pixel i sits at input coordinate i*scale; identical grid for both volumes
    matrix = np.diag([scale_r, scale_c])
    image = np.empty((subject.n_slices, out_r, out_c), dtype=np.float32)
    labels = np.empty((subject.n_slices, out_r, out_c), dtype=np.int16)
    for k in range(subject.n_slices):
        image[k] = ndimage.affine_transform(
            subject.image[k], matrix, output_shape=(out_r, out_c), order=1, mode="nearest")
        labels[k] = ndimage.affine_transform(
            subject.labels[k], matrix, output_shape=(out_r, out_c), order=0, mode="nearest")
    return Subject(image=image, labels=labels,
                   spacing=(target_mm, target_mm, slice_mm), meta=subject.meta)


def crop_around_heart(subject: Subject, size_px: int = TARGET_SIZE_PX) -> Subject:
    """Crop/pad in-plane to ``size_px`` square centered on the 3D heart centroid.

    A single window, from the centroid of all non-background voxels, is
    shared by every slice; out-of-bounds regions pad with background (label
    0, image minimum).
    """
    fg = subject.labels > 0
    if not fg.any():
        raise LabelDomainError("cannot crop: label volume is all background")
    _, rows, cols = np.nonzero(fg)
    cr = int(round(rows.mean()))
    cc = int(round(cols.mean()))
    half = size_px // 2
    r0, c0 = cr - half, cc - half
    img_pad = float(subject.image.min())

    image = np.full((subject.n_slices, size_px, size_px), img_pad, dtype=np.float32)
    labels = np.zeros((subject.n_slices, size_px, size_px), dtype=np.int16)
    src_r = slice(max(r0, 0), min(r0 + size_px, subject.image.shape[1]))
    src_c = slice(max(c0, 0), min(c0 + size_px, subject.image.shape[2]))
    dst_r = slice(src_r.start - r0, src_r.stop - r0)
    dst_c = slice(src_c.start - c0, src_c.stop - c0)
    image[:, dst_r, dst_c] = subject.image[:, src_r, src_c]
    labels[:, dst_r, dst_c] = subject.labels[:, src_r, src_c]
    return Subject(image=image, labels=labels, spacing=subject.spacing, meta=subject.meta)


def normalize_intensity(subject: Subject, lo_pct: float = 1.0, hi_pct: float = 99.0) -> Subject:
    """Map the [lo_pct, hi_pct] intensity window linearly to [-1, 1], clipping outside."""
    if hi_pct <= lo_pct:
        raise NormalizationError(f"hi_pct {hi_pct} must exceed lo_pct {lo_pct}")
    lo, hi = np.percentile(subject.image, [lo_pct, hi_pct])
    if hi <= lo:
        raise NormalizationError(
            f"degenerate volume: percentiles coincide ({lo} == {hi})")
    image = np.clip((subject.image - lo) / (hi - lo) * 2.0 - 1.0, -1.0, 1.0)
    return replace(subject, image=image.astype(np.float32), labels=subject.labels.copy())


def preprocess(subject: Subject, target_mm: float = TARGET_INPLANE_MM,
               size_px: int = TARGET_SIZE_PX, lo_pct: float = 1.0,
               hi_pct: float = 99.0) -> Subject:
    """resample -> crop -> normalize; the standard pipeline."""
    out = resample_inplane(subject, target_mm)
    out = crop_around_heart(out, size_px)
    return normalize_intensity(out, lo_pct, hi_pct)


# ---------------------------------------------------------------------------
# one-hot encoding

def one_hot(labels: np.ndarray) -> np.ndarray:
    """Encode a 2D integer label map as a (4, H, W) binary indicator map.

    Channel order: background, right ventricle, myocardium, left ventricle.
    """
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ShapeMismatchError(f"expected 2D label map, got shape {labels.shape}")
    _check_label_domain(labels)
    out = np.zeros((N_CLASSES,) + labels.shape, dtype=np.float32)
    for c in LABEL_CLASSES:
        out[c] = labels == c
    return out


def one_hot_to_labels(channels: np.ndarray) -> np.ndarray:
    """argmax over channels; inverse of :func:`one_hot` for valid inputs."""
    channels = np.asarray(channels)
    if channels.ndim != 3 or channels.shape[0] != N_CLASSES:
        raise ShapeMismatchError(f"expected (4, H, W) map, got shape {channels.shape}")
    return np.argmax(channels, axis=0).astype(np.int16)
