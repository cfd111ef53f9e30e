"""Segmentation training, augmentation, metrics, and the experiment matrix.

The segmenter is a compact 2D encoder-decoder with batch normalization
trained on Dice + cross-entropy, with the plateau schedule (factor-5 drop
after 50 stale epochs, early stop below lr 1e-6). Metrics are Dice,
volumetric 3D Hausdorff distance over boundary voxels scaled by spacing,
and ventricular volumes; predictions are post-processed by keeping the
largest 26-connected component per class.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import ndimage
from scipy.spatial import cKDTree

from .data_io import N_CLASSES, Subject
from .errors import ShapeMismatchError, TrainingError

FOREGROUND_CLASSES = (1, 2, 3)
CLASS_NAMES = {0: "BG", 1: "RV", 2: "MYO", 3: "LV"}


# ---------------------------------------------------------------------------
# metrics

def ventricular_volumes(subject: Subject) -> dict[int, float]:
    """Per-class label volume in mL (voxel count times voxel volume)."""
    row_mm, col_mm, slice_mm = subject.spacing
    voxel_ml = row_mm * col_mm * slice_mm / 1000.0
    return {c: float((subject.labels == c).sum()) * voxel_ml for c in FOREGROUND_CLASSES}


def dice(pred: np.ndarray, gt: np.ndarray, class_id: int) -> float:
    """2|P n G| / (|P| + |G|); 1.0 when both masks are empty."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeMismatchError(f"pred {pred.shape} vs gt {gt.shape}")
    p = pred == class_id
    g = gt == class_id
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * float(np.logical_and(p, g).sum()) / denom


def _boundary_voxels(mask: np.ndarray) -> np.ndarray:
    """(k, 3) coordinates of voxels with at least one background-adjacent face."""
    if mask.ndim == 2:
        mask = mask[None]
    structure = ndimage.generate_binary_structure(3, 1)  # 6-connectivity faces
    interior = ndimage.binary_erosion(mask, structure=structure, border_value=0)
    return np.argwhere(mask & ~interior)


def hausdorff(pred: np.ndarray, gt: np.ndarray, class_id: int,
              spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)) -> float:
    """Symmetric Hausdorff distance between class boundaries, in mm.

    Volumetric 3D; 2D inputs are treated as single-slice volumes. Returns
    NaN (the "undefined" sentinel) when either mask is empty.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeMismatchError(f"pred {pred.shape} vs gt {gt.shape}")
    a = _boundary_voxels(pred == class_id)
    b = _boundary_voxels(gt == class_id)
    if a.size == 0 or b.size == 0:
        return float("nan")
    scale = np.array([spacing[2], spacing[0], spacing[1]], dtype=np.float64)
    a_mm = a * scale
    b_mm = b * scale
    d_ab = cKDTree(b_mm).query(a_mm)[0].max()
    d_ba = cKDTree(a_mm).query(b_mm)[0].max()
    return float(max(d_ab, d_ba))


def largest_component_filter(pred: np.ndarray) -> np.ndarray:
    """Keep only the largest 26-connected 3D component per foreground class."""
    pred = np.asarray(pred)
    vol = pred[None] if pred.ndim == 2 else pred
    out = vol.copy()
    structure = np.ones((3, 3, 3), dtype=bool)
    for c in FOREGROUND_CLASSES:
        mask = vol == c
        if not mask.any():
            continue
        comp, n = ndimage.label(mask, structure=structure)
        if n <= 1:
            continue
        sizes = ndimage.sum_labels(mask, comp, index=np.arange(1, n + 1))
        keep = int(np.argmax(sizes)) + 1
        out[mask & (comp != keep)] = 0
    return out if pred.ndim == 3 else out[0]


# ---------------------------------------------------------------------------
# augmentation

@dataclass
class AugmentConfig:
    """Per-transform probabilities and parameter ranges.

    The additive brightness "factor" u in [0.7, 1.3] is applied as
    image + (u - 1); the multiplicative perturbation has the stated mean 0
    and std 0.3 around a unit gain: image * (1 + N(0, 0.3)).
    """

    scale_prob: float = 0.3
    scale_range: tuple[float, float] = (0.7, 1.4)
    rotate_prob: float = 0.7
    rotate_range_deg: tuple[float, float] = (-60.0, 60.0)
    hflip_prob: float = 0.3
    vflip_prob: float = 0.3
    elastic_prob: float = 0.3
    elastic_grid_px: int = 32
    elastic_std_px: float = 6.0
    gamma_prob: float = 0.3
    gamma_range: tuple[float, float] = (0.5, 1.6)
    add_brightness_prob: float = 0.3
    add_brightness_factor: tuple[float, float] = (0.7, 1.3)
    mult_brightness_prob: float = 0.3
    mult_brightness_mean: float = 0.0
    mult_brightness_std: float = 0.3
    noise_prob: float = 0.2
    noise_std: float = 0.1

    def __post_init__(self):
        for name in ("scale_prob", "rotate_prob", "hflip_prob", "vflip_prob",
                     "elastic_prob", "gamma_prob", "add_brightness_prob",
                     "mult_brightness_prob", "noise_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name}={p} outside [0, 1]")
        for name in ("scale_range", "rotate_range_deg", "gamma_range",
                     "add_brightness_factor"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} bounds out of order: ({lo}, {hi})")

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(scale_prob=0, rotate_prob=0, hflip_prob=0, vflip_prob=0,
                   elastic_prob=0, gamma_prob=0, add_brightness_prob=0,
                   mult_brightness_prob=0, noise_prob=0)


def _center_fit(arr: np.ndarray, shape: tuple[int, int], fill) -> np.ndarray:
    out = np.full(shape, fill, dtype=arr.dtype)
    r = min(arr.shape[0], shape[0])
    c = min(arr.shape[1], shape[1])
    sr = (arr.shape[0] - r) // 2
    sc = (arr.shape[1] - c) // 2
    dr = (shape[0] - r) // 2
    dc = (shape[1] - c) // 2
    out[dr:dr + r, dc:dc + c] = arr[sr:sr + r, sc:sc + c]
    return out


def augment(image: np.ndarray, labels: np.ndarray, config: AugmentConfig,
            rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Stochastic paired augmentation of one 2D slice.

    Geometric transforms hit image and labels identically (nearest-neighbor
    for labels); intensity transforms touch the image only. Shapes and the
    label domain are preserved.
    """
    image = np.asarray(image, np.float32)
    labels = np.asarray(labels, np.int16)
    if image.shape != labels.shape:
        raise ShapeMismatchError(f"image {image.shape} vs labels {labels.shape}")
    shape = image.shape
    img_fill = float(image.min())

    if rng.uniform() < config.scale_prob:
        f = rng.uniform(*config.scale_range)
        image = _center_fit(ndimage.zoom(image, f, order=1, mode="nearest"), shape, img_fill)
        labels = _center_fit(ndimage.zoom(labels, f, order=0, mode="nearest"), shape, 0)
    if rng.uniform() < config.rotate_prob:
        angle = rng.uniform(*config.rotate_range_deg)
        image = ndimage.rotate(image, angle, reshape=False, order=1,
                               mode="constant", cval=img_fill)
        labels = ndimage.rotate(labels, angle, reshape=False, order=0,
                                mode="constant", cval=0)
    if rng.uniform() < config.hflip_prob:
        image = image[:, ::-1]
        labels = labels[:, ::-1]
    if rng.uniform() < config.vflip_prob:
        image = image[::-1]
        labels = labels[::-1]
    if rng.uniform() < config.elastic_prob:
        coarse = (int(np.ceil(shape[0] / config.elastic_grid_px)) + 2,
                  int(np.ceil(shape[1] / config.elastic_grid_px)) + 2)
        rr, cc = np.meshgrid(np.arange(shape[0]), np.arange(shape[1]), indexing="ij")
        coords = []
        for base in (rr, cc):
            disp = rng.normal(0.0, config.elastic_std_px, size=coarse)
            disp = ndimage.zoom(disp, (shape[0] / coarse[0], shape[1] / coarse[1]),
                                order=3)[:shape[0], :shape[1]]
            coords.append(base + disp)
        image = ndimage.map_coordinates(image, coords, order=1, mode="nearest")
        labels = ndimage.map_coordinates(labels, coords, order=0, mode="nearest")

    if rng.uniform() < config.gamma_prob:
        g = rng.uniform(*config.gamma_range)
        lo, hi = float(image.min()), float(image.max())
        if hi > lo:
            image = lo + (hi - lo) * ((image - lo) / (hi - lo)) ** g
    if rng.uniform() < config.add_brightness_prob:
        image = image + (rng.uniform(*config.add_brightness_factor) - 1.0)
    if rng.uniform() < config.mult_brightness_prob:
        image = image * (1.0 + rng.normal(config.mult_brightness_mean,
                                          config.mult_brightness_std))
    if rng.uniform() < config.noise_prob:
        image = image + rng.normal(0.0, config.noise_std, size=shape)

    return np.ascontiguousarray(image, np.float32), np.ascontiguousarray(labels, np.int16)


# ---------------------------------------------------------------------------
# segmenter

@dataclass
class SegTrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 3e-5
    plateau_factor: float = 5.0
    plateau_threshold: float = 5e-3
    plateau_patience: int = 50
    max_epochs: int = 1000
    lr_floor: float = 1e-6
    batch_size: int = 8
    seed: int = 0
    base_width: int = 32
    levels: int = 4
    val_fraction: float = 0.2
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.lr_floor >= self.learning_rate:
            raise ValueError("lr_floor must be below the initial learning rate")
        for name in ("learning_rate", "weight_decay", "plateau_factor",
                     "plateau_threshold", "max_epochs", "batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


class PlateauScheduler:
    """Divide lr by ``factor`` after ``patience`` epochs without improvement.

    Improvement means the monitored loss drops below the best seen by more
    than ``threshold``. ``step`` returns the current lr; ``should_stop``
    turns True once lr falls below ``floor``.
    """

    def __init__(self, lr: float, factor: float = 5.0, patience: int = 50,
                 threshold: float = 5e-3, floor: float = 1e-6):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.threshold = threshold
        self.floor = floor
        self.best = float("inf")
        self.bad_epochs = 0
        self.drops = 0

    def step(self, val_loss: float) -> float:
        if val_loss < self.best - self.threshold:
            self.best = val_loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr /= self.factor
                self.drops += 1
                self.bad_epochs = 0
        return self.lr

    @property
    def should_stop(self) -> bool:
        return self.lr < self.floor


def _double_conv(c_in: int, c_out: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, padding=1), nn.BatchNorm2d(c_out), nn.ReLU(inplace=True),
        nn.Conv2d(c_out, c_out, 3, padding=1), nn.BatchNorm2d(c_out), nn.ReLU(inplace=True))


class SegUNet(nn.Module):
    """Encoder-decoder 2D segmenter with batch normalization."""

    def __init__(self, base_width: int = 32, levels: int = 4):
        super().__init__()
        w = [base_width * 2 ** i for i in range(levels)]
        self.enc = nn.ModuleList(
            [_double_conv(1 if i == 0 else w[i - 1], w[i]) for i in range(levels)])
        self.bottleneck = _double_conv(w[-1], 2 * w[-1])
        self.up = nn.ModuleList(
            [nn.ConvTranspose2d((2 * w[-1]) if i == 0 else w[levels - i], w[levels - 1 - i], 2, stride=2)
             for i in range(levels)])
        self.dec = nn.ModuleList(
            [_double_conv(2 * w[levels - 1 - i], w[levels - 1 - i]) for i in range(levels)])
        self.head = nn.Conv2d(w[0], N_CLASSES, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        skips = []
        h = x
        for block in self.enc:
            h = block(h)
            skips.append(h)
            h = F.max_pool2d(h, 2)
        h = self.bottleneck(h)
        for i, (up, block) in enumerate(zip(self.up, self.dec)):
            h = up(h)
            h = block(torch.cat([h, skips[-1 - i]], dim=1))
        return self.head(h)


def dice_ce_loss(logits: torch.Tensor, target_idx: torch.Tensor) -> torch.Tensor:
    """Soft Dice over foreground classes plus pixel cross-entropy."""
    ce = F.cross_entropy(logits, target_idx)
    probs = torch.softmax(logits, dim=1)
    onehot = F.one_hot(target_idx, N_CLASSES).permute(0, 3, 1, 2).to(probs.dtype)
    dims = (0, 2, 3)
    eps = 1e-6
    inter = (probs * onehot).sum(dim=dims)
    denom = probs.sum(dim=dims) + onehot.sum(dim=dims)
    soft_dice = (2 * inter + eps) / (denom + eps)
    return ce + (1 - soft_dice[1:].mean())


def _subjects_to_slices(subjects: list[Subject]) -> tuple[np.ndarray, np.ndarray]:
    imgs = np.concatenate([s.image for s in subjects]).astype(np.float32)
    labs = np.concatenate([s.labels for s in subjects]).astype(np.int64)
    return imgs, labs


def train_segmenter(train_sets: list[list[Subject]], config: SegTrainConfig,
                    progress: bool = False) -> tuple[SegUNet, list[dict]]:
    """Train on the union of the given datasets.

    A pathology-stratified 20% of subjects forms the validation split;
    the checkpoint of the best validation loss is restored at the end.
    The per-epoch log records losses, lr, plateau drops, and the stop flag.
    """
    pool = [s for ds in train_sets for s in ds]
    if not pool:
        raise TrainingError("empty training pool")
    rng = np.random.default_rng(config.seed)

    by_tag: dict[str, list[Subject]] = {}
    for s in pool:
        by_tag.setdefault(s.meta.pathology, []).append(s)
    train_subj: list[Subject] = []
    val_subj: list[Subject] = []
    for tag in sorted(by_tag):
        group = by_tag[tag]
        order = rng.permutation(len(group))
        n_val = max(1, int(round(config.val_fraction * len(group)))) if len(group) > 1 else 0
        val_subj += [group[i] for i in order[:n_val]]
        train_subj += [group[i] for i in order[n_val:]]
    if not train_subj:
        train_subj, val_subj = val_subj, []

    x_train, y_train = _subjects_to_slices(train_subj)
    has_val = bool(val_subj)
    if has_val:
        x_val, y_val = _subjects_to_slices(val_subj)
        x_val_t = torch.from_numpy(x_val)[:, None]
        y_val_t = torch.from_numpy(y_val)

    torch.manual_seed(config.seed)
    model = SegUNet(config.base_width, config.levels)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate,
                           weight_decay=config.weight_decay)
    sched = PlateauScheduler(config.learning_rate, config.plateau_factor,
                             config.plateau_patience, config.plateau_threshold,
                             config.lr_floor)

    best_state = copy.deepcopy(model.state_dict())
    best_val = float("inf")
    log: list[dict] = []
    for epoch in range(config.max_epochs):
        model.train()
        order = rng.permutation(len(x_train))
        total = 0.0
        n_batches = 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            imgs, labs = [], []
            for i in idx:
                im, la = augment(x_train[i], y_train[i], config.augment, rng)
                imgs.append(im)
                labs.append(la.astype(np.int64))
            xb = torch.from_numpy(np.stack(imgs))[:, None]
            yb = torch.from_numpy(np.stack(labs))
            loss = dice_ce_loss(model(xb), yb)
            if not torch.isfinite(loss):
                raise TrainingError(f"NaN/inf segmentation loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss)
            n_batches += 1

        if has_val:
            model.eval()
            with torch.no_grad():
                val_loss = float(dice_ce_loss(model(x_val_t), y_val_t))
        else:
            val_loss = total / n_batches
        if val_loss < best_val:
            best_val = val_loss
            best_state = copy.deepcopy(model.state_dict())

        lr = sched.step(val_loss)
        for group in opt.param_groups:
            group["lr"] = lr
        log.append({"epoch": epoch, "train_loss": total / n_batches,
                    "val_loss": val_loss, "lr": lr, "drops": sched.drops,
                    "stopped": sched.should_stop})
        if progress and (epoch % 10 == 0 or epoch == config.max_epochs - 1):
            print(f"[seg] epoch {epoch}: train={total / n_batches:.4f} "
                  f"val={val_loss:.4f} lr={lr:g}")
        if sched.should_stop:
            break

    model.load_state_dict(best_state)
    model.eval()
    return model, log


def save_segmenter(model: SegUNet, config: SegTrainConfig, path: str | Path,
                   train_log: list[dict] | None = None) -> Path:
    from dataclasses import asdict

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cfg = asdict(config)
    cfg["augment"] = asdict(config.augment)
    torch.save({"config": cfg, "state_dict": model.state_dict(),
                "train_log": train_log or []}, path)
    return path


def load_segmenter(path: str | Path) -> tuple[SegUNet, SegTrainConfig]:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    cfg_dict = dict(blob["config"])
    cfg_dict["augment"] = AugmentConfig(**{
        k: tuple(v) if isinstance(v, list) else v
        for k, v in cfg_dict["augment"].items()})
    config = SegTrainConfig(**cfg_dict)
    model = SegUNet(config.base_width, config.levels)
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, config


def predict_labels(model: SegUNet, subject: Subject,
                   postprocess: bool = True) -> np.ndarray:
    """Per-slice argmax prediction for a whole subject volume."""
    model.eval()
    with torch.no_grad():
        logits = model(torch.from_numpy(subject.image.astype(np.float32))[:, None])
        pred = logits.argmax(dim=1).numpy().astype(np.int16)
    return largest_component_filter(pred) if postprocess else pred


# ---------------------------------------------------------------------------
# experiment matrix

def evaluate_model(model: SegUNet, subjects: list[Subject]) -> list[dict]:
    """Per-subject, per-class Dice/HD records on held-out subjects."""
    records = []
    for s in subjects:
        pred = predict_labels(model, s)
        for c in FOREGROUND_CLASSES:
            records.append({
                "subject_id": s.meta.subject_id, "pathology": s.meta.pathology,
                "class_id": c, "class_name": CLASS_NAMES[c],
                "dice": dice(pred, s.labels, c),
                "hd_mm": hausdorff(pred, s.labels, c, s.spacing),
            })
    return records


def run_experiment_matrix(combos: dict[str, list[list[Subject]]],
                          eval_subjects: list[Subject], config: SegTrainConfig,
                          progress: bool = False) -> dict:
    """Train one segmenter per declared dataset combination and evaluate all.

    Returns {"header", "rows", "long", "logs"}: one summary row per
    (model, class) with mean/std Dice and HD (undefined HDs counted and
    excluded), the long-format per-subject records, and per-model train logs.
    """
    header = {
        "hd_definition": "volumetric 3D Hausdorff over face-boundary voxels, mm",
        "postprocessing": "largest 26-connected component per class",
        "n_eval_subjects": len(eval_subjects),
    }
    rows: list[dict] = []
    long: list[dict] = []
    logs: dict[str, list[dict]] = {}
    for name in combos:
        model, log = train_segmenter(combos[name], config, progress=progress)
        logs[name] = log
        records = evaluate_model(model, eval_subjects)
        for r in records:
            long.append({"model": name, **r})
        for c in FOREGROUND_CLASSES:
            sub = [r for r in records if r["class_id"] == c]
            hds = np.array([r["hd_mm"] for r in sub])
            defined = hds[~np.isnan(hds)]
            rows.append({
                "model": name, "class_id": c, "class_name": CLASS_NAMES[c],
                "dice_mean": float(np.mean([r["dice"] for r in sub])),
                "dice_std": float(np.std([r["dice"] for r in sub])),
                "hd_mean_mm": float(defined.mean()) if defined.size else float("nan"),
                "hd_std_mm": float(defined.std()) if defined.size else float("nan"),
                "hd_undefined": int(np.isnan(hds).sum()),
            })
    return {"header": header, "rows": rows, "long": long, "logs": logs}


def write_report(report: dict, out_dir: str | Path) -> Path:
    """Write the metrics table (TSV), long-format records (CSV), and logs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = out_dir / "metrics_table.tsv"
    hdr_lines = [f"# {k}: {v}" for k, v in report["header"].items()]
    cols = ["model", "class_name", "dice_mean", "dice_std", "hd_mean_mm",
            "hd_std_mm", "hd_undefined"]
    lines = hdr_lines + ["\t".join(cols)]
    for row in report["rows"]:
        lines.append("\t".join(
            f"{row[c]:.4f}" if isinstance(row[c], float) else str(row[c]) for c in cols))
    table.write_text("\n".join(lines) + "\n")

    long_path = out_dir / "metrics_long.csv"
    cols_l = ["model", "subject_id", "pathology", "class_name", "dice", "hd_mm"]
    lines = [",".join(cols_l)]
    for r in report["long"]:
        lines.append(",".join(
            f"{r[c]:.6f}" if isinstance(r[c], float) else str(r[c]) for c in cols_l))
    long_path.write_text("\n".join(lines) + "\n")

    for name, log in report.get("logs", {}).items():
        log_path = out_dir / f"train_log_{name}.tsv"
        lines = ["epoch\ttrain_loss\tval_loss\tlr\tdrops\tstopped"]
        for e in log:
            lines.append(f"{e['epoch']}\t{e['train_loss']:.6f}\t{e['val_loss']:.6f}"
                         f"\t{e['lr']:g}\t{e['drops']}\t{int(e['stopped'])}")
        log_path.write_text("\n".join(lines) + "\n")
    return table
