"""Pipeline configuration, provenance, and stage orchestration.

Every stage writes its artifacts under deterministic paths plus a
``<artifact>.prov.json`` sidecar holding the config hash, seed, and
content hashes of the inputs; a stage re-run skips artifacts whose
sidecars still match (restartability). Sidecars carry no timestamps so
identical runs produce byte-identical artifacts.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import latent_io, latent_ops
from .data_io import (
    Subject,
    SubjectMeta,
    load_labels_only,
    load_subject,
    one_hot,
    preprocess,
    read_manifest,
    save_subject,
    write_manifest,
)
from .errors import ConfigError, MissingFileError
from .generator import GanConfig, SynthesisModel, load_gan, save_gan, synthesize_subject, train_gan
from .label_vae import (
    LabelVae,
    VaeConfig,
    inverse_frequency_weights,
    load_vae,
    save_train_log,
    save_vae,
    train_vae,
)
from .latent_ops import (
    CorrelationModel,
    LatentSubject,
    PathologyStats,
    correlate_sample,
    decode_subject,
    encode_subject,
    estimate_correlation_model,
    estimate_pathology_stats,
    intra_subject_interpolate,
    inter_subject_interpolate,
    pathology_interpolate,
    sample_truncated_normal,
)
from .phantom import PRESETS, generate_cohort
from .segmentation import AugmentConfig, SegTrainConfig


@dataclass
class SynthesisConfig:
    n_target_slices: int = 32
    alphas: tuple[float, ...] = latent_ops.DEFAULT_ALPHAS
    pathologies: tuple[str, ...] = ("DCM", "HCM", "DRV")
    correlated: bool = True
    recenter: bool = True


@dataclass
class PipelineConfig:
    out_root: str = "runs/out"
    data_root: str = "runs/data"
    seed: int = 0
    vae: VaeConfig = field(default_factory=VaeConfig)
    gan: GanConfig = field(default_factory=GanConfig)
    seg: SegTrainConfig = field(default_factory=SegTrainConfig)
    synthesis: SynthesisConfig = field(default_factory=SynthesisConfig)


def load_pipeline_config(path: str | Path | None, overrides: dict | None = None) -> PipelineConfig:
    """Build a PipelineConfig from a YAML file plus flag overrides."""
    import yaml

    data: dict = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse config {path}: {e}") from e
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        section, _, leaf = key.partition(".")
        if leaf:
            data.setdefault(section, {})[leaf] = value
        else:
            data[key] = value
    try:
        nested = {}
        for name, cls in (("vae", VaeConfig), ("gan", GanConfig),
                          ("seg", SegTrainConfig), ("synthesis", SynthesisConfig)):
            section = dict(data.pop(name, {}))
            if name == "seg" and "augment" in section:
                section["augment"] = AugmentConfig(**section["augment"])
            for k, v in section.items():
                if isinstance(v, list):
                    section[k] = tuple(v)
            nested[name] = cls(**section)
        return PipelineConfig(**{**data, **nested})
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid configuration: {e}") from e


# ---------------------------------------------------------------------------
# provenance / restartability

def content_hash(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_hash(obj) -> str:
    blob = json.dumps(asdict(obj) if hasattr(obj, "__dataclass_fields__") else obj,
                      sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _sidecar_path(artifact: Path) -> Path:
    return artifact.with_name(artifact.name + ".prov.json")


def write_sidecar(artifact: str | Path, stage: str, cfg_hash: str, seed: int,
                  inputs: dict[str, str] | None = None) -> None:
    artifact = Path(artifact)
    payload = {"stage": stage, "config_hash": cfg_hash, "seed": seed,
               "inputs": dict(sorted((inputs or {}).items())),
               "artifact_sha256": content_hash(artifact)}
    _sidecar_path(artifact).write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")


def artifact_fresh(artifact: str | Path, cfg_hash: str,
                   inputs: dict[str, str] | None = None) -> bool:
    """True when the artifact exists and its sidecar matches config+inputs."""
    artifact = Path(artifact)
    sidecar = _sidecar_path(artifact)
    if not (artifact.is_file() and sidecar.is_file()):
        return False
    try:
        payload = json.loads(sidecar.read_text())
    except json.JSONDecodeError:
        return False
    return (payload.get("config_hash") == cfg_hash
            and payload.get("inputs") == dict(sorted((inputs or {}).items()))
            and payload.get("artifact_sha256") == content_hash(artifact))


# ---------------------------------------------------------------------------
# dataset helpers

def list_subject_ids(data_dir: str | Path) -> list[str]:
    data_dir = Path(data_dir)
    manifest = data_dir / "manifest.txt"
    if manifest.is_file():
        return sorted(read_manifest(manifest))
    ids = set()
    for f in data_dir.glob("*.vol"):
        name = f.name[: -len(".vol")]
        if not name.endswith("_gt"):
            ids.add(name)
    return sorted(ids)


def load_cohort(data_dir: str | Path, labels_only: bool = False) -> list[Subject]:
    data_dir = Path(data_dir)
    ids = list_subject_ids(data_dir)
    if not ids:
        raise MissingFileError(f"no subjects found under {data_dir}")
    metas = {}
    manifest = data_dir / "manifest.txt"
    if manifest.is_file():
        metas = read_manifest(manifest)
    out = []
    for sid in ids:
        path = data_dir / f"{sid}.vol"
        if labels_only or not path.is_file():
            out.append(load_labels_only(data_dir / f"{sid}_gt.vol", metas.get(sid)))
        else:
            out.append(load_subject(path, metas.get(sid)))
    return out


def subjects_to_onehot_slices(subjects: list[Subject]) -> np.ndarray:
    """(N, 4, H, W) float32 one-hot maps of every slice of every subject."""
    maps = [one_hot(s.labels[i]) for s in subjects for i in range(s.n_slices)]
    return np.stack(maps)


def per_class_areas(labels: np.ndarray) -> np.ndarray:
    """(n_slices, 3) voxel counts of RV/MYO/LV per slice."""
    labels = np.asarray(labels)
    return np.stack([(labels == c).sum(axis=(1, 2)) for c in (1, 2, 3)], axis=1)


def slice_roughness(labels: np.ndarray) -> float:
    """Mean absolute adjacent-slice difference of per-class areas."""
    areas = per_class_areas(labels).astype(np.float64)
    return float(np.abs(np.diff(areas, axis=0)).mean())


# ---------------------------------------------------------------------------
# stage implementations

def stage_phantom(preset: str, count: int, out_dir: str | Path, seed: int,
                  phase: str = "ED", severity: float = 0.0,
                  brightness_range: tuple[float, float] = (0.82, 0.98)) -> list[Path]:
    """Generate a phantom cohort and write subjects plus a manifest."""
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = config_hash({"preset": preset, "count": count, "phase": phase,
                       "severity": severity, "brightness": brightness_range})
    subjects = generate_cohort(preset, count, seed, phase=phase, severity=severity,
                               brightness_range=brightness_range)
    written = []
    metas = []
    for s in subjects:
        img_path = out_dir / f"{s.meta.subject_id}.vol"
        metas.append(s.meta)
        if artifact_fresh(img_path, cfg):
            written.append(img_path)
            continue
        save_subject(s, img_path)
        write_sidecar(img_path, "phantom", cfg, seed)
        written.append(img_path)
    write_manifest(metas, out_dir / "manifest.txt")
    return written


def stage_preprocess(in_dir: str | Path, out_dir: str | Path, seed: int = 0) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = config_hash({"stage": "preprocess", "target_mm": 1.5, "size": 128})
    written = []
    metas = []
    for sid in list_subject_ids(in_dir):
        src = Path(in_dir) / f"{sid}.vol"
        dst = out_dir / f"{sid}.vol"
        inputs = {str(src): content_hash(src)}
        metas.append(load_subject(src).meta)
        if artifact_fresh(dst, cfg, inputs):
            written.append(dst)
            continue
        subject = preprocess(load_subject(src))
        save_subject(subject, dst)
        write_sidecar(dst, "preprocess", cfg, seed, inputs)
        written.append(dst)
    write_manifest(metas, out_dir / "manifest.txt")
    return written


def stage_train_vae(data_dir: str | Path, out_path: str | Path, config: VaeConfig,
                    progress: bool = False) -> Path:
    out_path = Path(out_path)
    subjects = load_cohort(data_dir)
    data = subjects_to_onehot_slices(subjects)
    if config.ce_class_weights == (1.0, 1.0, 1.0, 1.0):
        config = VaeConfig(**{**asdict(config),
                              "ce_class_weights": inverse_frequency_weights(data)})
    cfg = config_hash(config)
    inputs = {str(data_dir): config_hash({"ids": list_subject_ids(data_dir)})}
    if artifact_fresh(out_path, cfg, inputs):
        return out_path
    model, log = train_vae(data, config, progress=progress)
    save_vae(model, out_path, log)
    save_train_log(log, out_path.with_suffix(".log.tsv"))
    write_sidecar(out_path, "train-vae", cfg, config.seed, inputs)
    return out_path


def stage_encode(vae_path: str | Path, data_dir: str | Path,
                 out_dir: str | Path, seed: int = 0) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    vae = load_vae(vae_path)
    cfg = config_hash({"vae": content_hash(vae_path)})
    written = []
    metas = []
    for subject in load_cohort(data_dir):
        dst = out_dir / f"{subject.meta.subject_id}.lat"
        metas.append(subject.meta)
        src = Path(data_dir) / f"{subject.meta.subject_id}_gt.vol"
        inputs = {str(src): content_hash(src)}
        if artifact_fresh(dst, cfg, inputs):
            written.append(dst)
            continue
        latent_io.save_latent(encode_subject(vae, subject), dst)
        write_sidecar(dst, "encode", cfg, seed, inputs)
        written.append(dst)
    write_manifest(metas, out_dir / "manifest.txt")
    return written


def load_latent_cohort(latents_dir: str | Path,
                       pathology: str | None = None) -> list[LatentSubject]:
    latents_dir = Path(latents_dir)
    metas = {}
    manifest = latents_dir / "manifest.txt"
    if manifest.is_file():
        metas = read_manifest(manifest)
    out = []
    for f in sorted(latents_dir.glob("*.lat")):
        sid = f.name[: -len(".lat")]
        if pathology is not None:
            meta = metas.get(sid)
            if meta is None or meta.pathology != pathology:
                continue
        out.append(latent_io.load_latent(f))
    return out


def stage_synth_intra(latents_dir: str | Path, out_dir: str | Path,
                      n_target: int = 32, seed: int = 0) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = config_hash({"n_target": n_target})
    written = []
    for f in sorted(Path(latents_dir).glob("*.lat")):
        dst = out_dir / f.name
        inputs = {str(f): content_hash(f)}
        if artifact_fresh(dst, cfg, inputs):
            written.append(dst)
            continue
        ls = intra_subject_interpolate(latent_io.load_latent(f), n_target)
        latent_io.save_latent(ls, dst)
        write_sidecar(dst, "synth-intra", cfg, seed, inputs)
        written.append(dst)
    manifest = Path(latents_dir) / "manifest.txt"
    if manifest.is_file():
        (out_dir / "manifest.txt").write_text(manifest.read_text())
    return written


def stage_synth_inter(latents_dir: str | Path, a_id: str, b_id: str,
                      alphas: list[float], out_dir: str | Path,
                      vae_path: str | Path | None = None, seed: int = 0) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    a = latent_io.load_latent(Path(latents_dir) / f"{a_id}.lat")
    b = latent_io.load_latent(Path(latents_dir) / f"{b_id}.lat")
    morphs = inter_subject_interpolate(a, b, alphas)
    vae = load_vae(vae_path) if vae_path else None
    written = []
    for alpha, ls in zip(alphas, morphs):
        dst = out_dir / f"{a_id}_to_{b_id}_a{alpha:g}.lat"
        latent_io.save_latent(ls, dst)
        written.append(dst)
        if vae is not None:
            labels = decode_subject(vae, ls)
            from . import niftio
            lab_path = out_dir / f"{a_id}_to_{b_id}_a{alpha:g}_gt.vol"
            niftio.write_volume(lab_path, labels, (1.5, 1.5, 10.0 * a.n_s / ls.n_s))
            written.append(lab_path)
    return written


def build_pathology_model(cohort32: list[LatentSubject],
                          nor32: LatentSubject, tag: str) -> tuple[PathologyStats, CorrelationModel]:
    """Cohort statistics plus the dimension/slice correlation model.

    The dimension correlation pools the target-pathology cohort; the slice
    correlation comes from the normal subject chosen for interpolation.
    """
    stats = estimate_pathology_stats(cohort32, tag)
    model = estimate_correlation_model(cohort32, nor32)
    return stats, model


def draw_pseudo_sample(stats: PathologyStats, model: CorrelationModel,
                       rng: np.random.Generator, correlated: bool = True,
                       recenter: bool = True) -> tuple[LatentSubject, LatentSubject]:
    """Draw a truncated-normal sample and its correlated version.

    With ``recenter`` the correlation acts on the deviation from the cohort
    mean (the mean anatomy profile is preserved); without it the raw draw
    itself is transformed.
    """
    raw = sample_truncated_normal(stats, rng, subject_id=f"pseudo_{stats.pathology}")
    if not correlated:
        return raw, raw
    if recenter:
        delta = LatentSubject(codes=raw.codes - stats.mu, subject_id=raw.subject_id)
        corr = correlate_sample(delta, model)
        corr = LatentSubject(codes=stats.mu + corr.codes,
                             subject_id=f"{raw.subject_id}_corr")
    else:
        corr = correlate_sample(raw, model)
    return raw, corr


def synth_pathology_sequence(vae: LabelVae, nor32: LatentSubject,
                             pseudo: LatentSubject,
                             alphas: tuple[float, ...] = latent_ops.DEFAULT_ALPHAS
                             ) -> list[tuple[float, LatentSubject, np.ndarray]]:
    """Interpolate normal -> pseudo-pathological and decode each step."""
    steps = pathology_interpolate(nor32, pseudo, alphas)
    return [(alpha, ls, decode_subject(vae, ls)) for alpha, ls in zip(alphas, steps)]


def stage_synth_pathology(latents32_dir: str | Path, target: str, nor_id: str,
                          vae_path: str | Path, out_dir: str | Path, seed: int,
                          steps: int = 5, correlated: bool = True,
                          recenter: bool = True,
                          gan_path: str | Path | None = None,
                          style_data_dir: str | Path | None = None) -> list[Path]:
    """Appendix-style pathology synthesis: stats, correlation, sample, blend.

    Writes one labeled subject per interpolation step (label volumes plus
    latent sidecars, and rendered images when a generator checkpoint and a
    style data dir are supplied), alongside the stats/correlation artifacts.
    """
    from . import niftio

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    vae = load_vae(vae_path)
    cohort = load_latent_cohort(latents32_dir, pathology=target)
    if not cohort:
        raise MissingFileError(f"no {target} latents under {latents32_dir}")
    nor_path = Path(latents32_dir) / f"{nor_id}.lat"
    nor32 = latent_io.load_latent(nor_path)

    stats, model = build_pathology_model(cohort, nor32, target)
    latent_io.save_stats(stats, out_dir / f"{target}.stats")
    latent_io.save_correlation_model(model, out_dir / f"{target}_{nor_id}.corr")

    rng = np.random.default_rng(seed)
    _, pseudo = draw_pseudo_sample(stats, model, rng, correlated=correlated,
                                   recenter=recenter)
    alphas = tuple(np.linspace(0, 1, steps + 1)[1:]) if steps != 5 else latent_ops.DEFAULT_ALPHAS
    sequence = synth_pathology_sequence(vae, nor32, pseudo, alphas)

    gan = load_gan(gan_path) if gan_path else None
    style_subject = None
    if gan is not None:
        if style_data_dir is None:
            raise ConfigError("rendering requires --data with the NOR style subject")
        style_subject = load_subject(Path(style_data_dir) / f"{nor_id}.vol")

    cfg = config_hash({"target": target, "nor": nor_id, "steps": steps,
                       "correlated": correlated, "recenter": recenter})
    written = []
    metas = []
    for alpha, ls, labels in sequence:
        stem = f"{nor_id}_to_{target}_a{alpha:g}"
        latent_io.save_latent(ls, out_dir / f"{stem}.lat")
        lab_path = out_dir / f"{stem}_gt.vol"
        slice_mm = 10.0 * nor32.n_s / ls.n_s
        if gan is not None:
            subject = synthesize_subject(gan, labels, style_subject, subject_id=stem)
            meta = SubjectMeta(subject_id=stem, pathology=target,
                               vendor="synth", phase=style_subject.meta.phase)
            subject = Subject(image=subject.image, labels=subject.labels,
                              spacing=subject.spacing, meta=meta)
            save_subject(subject, out_dir / f"{stem}.vol")
            written.append(out_dir / f"{stem}.vol")
            metas.append(meta)
        else:
            niftio.write_volume(lab_path, labels, (1.5, 1.5, slice_mm))
            metas.append(SubjectMeta(subject_id=stem, pathology=target, vendor="synth"))
        if gan is None:
            written.append(lab_path)
        write_sidecar(written[-1], "synth-pathology", cfg, seed,
                      {str(nor_path): content_hash(nor_path)})
    write_manifest(metas, out_dir / "manifest.txt")
    return written


def stage_train_gan(data_dir: str | Path, out_path: str | Path, config: GanConfig,
                    progress: bool = False) -> Path:
    out_path = Path(out_path)
    subjects = load_cohort(data_dir)
    images = np.concatenate([s.image for s in subjects])
    labels = subjects_to_onehot_slices(subjects)
    cfg = config_hash(config)
    inputs = {str(data_dir): config_hash({"ids": list_subject_ids(data_dir)})}
    if artifact_fresh(out_path, cfg, inputs):
        return out_path
    model, _, log = train_gan(images, labels, config, progress=progress)
    save_gan(model, out_path, log)
    write_sidecar(out_path, "train-gan", cfg, config.seed, inputs)
    return out_path


def stage_render(gan_path: str | Path, labels_dir: str | Path, style_id: str,
                 style_data_dir: str | Path, out_dir: str | Path, seed: int = 0) -> list[Path]:
    """Render label-only subjects into full subjects with one style source."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    gan = load_gan(gan_path)
    style_subject = load_subject(Path(style_data_dir) / f"{style_id}.vol")
    written = []
    metas = []
    for lab_file in sorted(Path(labels_dir).glob("*_gt.vol")):
        stem = lab_file.name[: -len("_gt.vol")]
        sub = load_labels_only(lab_file)
        rendered = synthesize_subject(gan, sub.labels, style_subject, subject_id=stem)
        manifest = Path(labels_dir) / "manifest.txt"
        meta = SubjectMeta(subject_id=stem, vendor="synth")
        if manifest.is_file():
            meta = read_manifest(manifest).get(stem, meta)
        rendered = Subject(image=rendered.image, labels=rendered.labels,
                           spacing=(sub.spacing if sub.spacing[2] > 0 else rendered.spacing),
                           meta=meta)
        save_subject(rendered, out_dir / f"{stem}.vol")
        written.append(out_dir / f"{stem}.vol")
        metas.append(meta)
    write_manifest(metas, out_dir / "manifest.txt")
    return written
