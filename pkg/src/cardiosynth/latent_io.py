"""Binary exchange files for latent matrices, cohort stats, correlation models.

All files are little-endian with a 4-byte magic, so tools in any language
can consume them. Layouts (offsets in bytes, ``u32`` = uint32 LE,
``f64[n]`` = n IEEE-754 doubles LE, matrices row-major):

``.lat`` (latent subject)::

    magic   4s   b"CSL1"
    id_len  u32
    id      id_len bytes, UTF-8
    n_s     u32
    n_z     u32
    codes   f64[n_s * n_z]

``.stats`` (pathology statistics)::

    magic    4s   b"CSS1"
    tag_len  u32
    tag      tag_len bytes, UTF-8
    n_subj   u32
    n_s      u32
    n_z      u32
    mu, sigma, min, max   4 consecutive f64[n_s * n_z] blocks

``.corr`` (correlation model)::

    magic    4s   b"CSC1"
    n_z      u32
    n_s      u32
    jitter_z f64[1]
    jitter_s f64[1]
    corr_z, chol_z   f64[n_z * n_z] each
    corr_s, chol_s   f64[n_s * n_s] each
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import CorruptHeaderError, MissingFileError
from .latent_ops import CorrelationModel, LatentSubject, PathologyStats

_LAT_MAGIC = b"CSL1"
_STATS_MAGIC = b"CSS1"
_CORR_MAGIC = b"CSC1"


def _read(path: str | Path, magic: bytes) -> bytes:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"file not found: {path}")
    raw = path.read_bytes()
    if raw[:4] != magic:
        raise CorruptHeaderError(f"{path}: expected magic {magic!r}, got {raw[:4]!r}")
    return raw


def save_latent(ls: LatentSubject, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    sid = ls.subject_id.encode("utf-8")
    blob = (_LAT_MAGIC + struct.pack("<I", len(sid)) + sid
            + struct.pack("<II", ls.n_s, ls.n_z)
            + np.ascontiguousarray(ls.codes, np.float64).tobytes())
    path.write_bytes(blob)
    return path


def load_latent(path: str | Path) -> LatentSubject:
    raw = _read(path, _LAT_MAGIC)
    (id_len,) = struct.unpack_from("<I", raw, 4)
    sid = raw[8:8 + id_len].decode("utf-8")
    off = 8 + id_len
    n_s, n_z = struct.unpack_from("<II", raw, off)
    codes = np.frombuffer(raw, np.float64, n_s * n_z, off + 8).reshape(n_s, n_z)
    return LatentSubject(codes=codes.copy(), subject_id=sid)


def save_stats(stats: PathologyStats, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tag = stats.pathology.encode("utf-8")
    n_s, n_z = stats.mu.shape
    blob = (_STATS_MAGIC + struct.pack("<I", len(tag)) + tag
            + struct.pack("<III", stats.n_subjects, n_s, n_z))
    for m in (stats.mu, stats.sigma, stats.min, stats.max):
        blob += np.ascontiguousarray(m, np.float64).tobytes()
    path.write_bytes(blob)
    return path


def load_stats(path: str | Path) -> PathologyStats:
    raw = _read(path, _STATS_MAGIC)
    (tag_len,) = struct.unpack_from("<I", raw, 4)
    tag = raw[8:8 + tag_len].decode("utf-8")
    off = 8 + tag_len
    n_subj, n_s, n_z = struct.unpack_from("<III", raw, off)
    off += 12
    blocks = []
    for _ in range(4):
        blocks.append(np.frombuffer(raw, np.float64, n_s * n_z, off).reshape(n_s, n_z).copy())
        off += n_s * n_z * 8
    return PathologyStats(mu=blocks[0], sigma=blocks[1], min=blocks[2], max=blocks[3],
                          pathology=tag, n_subjects=n_subj)


def save_correlation_model(model: CorrelationModel, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n_z = model.corr_z.shape[0]
    n_s = model.corr_s.shape[0]
    blob = (_CORR_MAGIC + struct.pack("<II", n_z, n_s)
            + struct.pack("<dd", model.jitter_z, model.jitter_s))
    for m in (model.corr_z, model.chol_z, model.corr_s, model.chol_s):
        blob += np.ascontiguousarray(m, np.float64).tobytes()
    path.write_bytes(blob)
    return path


def load_correlation_model(path: str | Path) -> CorrelationModel:
    raw = _read(path, _CORR_MAGIC)
    n_z, n_s = struct.unpack_from("<II", raw, 4)
    jitter_z, jitter_s = struct.unpack_from("<dd", raw, 12)
    off = 28
    mats = []
    for d in (n_z, n_z, n_s, n_s):
        mats.append(np.frombuffer(raw, np.float64, d * d, off).reshape(d, d).copy())
        off += d * d * 8
    return CorrelationModel(corr_z=mats[0], chol_z=mats[1], corr_s=mats[2],
                            chol_s=mats[3], jitter_z=jitter_z, jitter_s=jitter_s)
