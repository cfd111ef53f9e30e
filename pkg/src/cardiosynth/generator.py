"""Label-conditional image synthesis.

A small ResNet-style encoder maps a reference slice to a style code; the
generator renders a one-hot label map into an image, with every block
modulated by spatially adaptive denormalization (per-channel batch
standardization rescaled by gamma/beta maps predicted from the label map).
Training is adversarial: hinge loss against a two-scale patch
discriminator plus a feature-matching term.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data_io import N_CLASSES, Subject, one_hot
from .errors import ShapeMismatchError, TrainingError


@dataclass
class GanConfig:
    style_dim: int = 64
    gen_base_width: int = 32
    disc_base_width: int = 32
    n_disc_scales: int = 2
    feature_matching_weight: float = 10.0
    epochs: int = 40
    batch_size: int = 8
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    beta1: float = 0.5
    seed: int = 0
    image_size: int = 128

    def __post_init__(self):
        if min(self.style_dim, self.gen_base_width, self.disc_base_width) <= 0:
            raise ValueError("dimensions must be positive")


# ---------------------------------------------------------------------------
# spatially adaptive denormalization

def spade_modulate(h, gamma, beta, mean=None, std=None, eps: float = 1e-5):
    """out = gamma * (h - mean) / std + beta, per channel.

    When mean/std are omitted they are the per-channel batch statistics of
    ``h`` over (batch, height, width). Accepts numpy arrays or torch
    tensors (echoing the input type); scalars broadcast.
    """
    was_numpy = not isinstance(h, torch.Tensor)
    t = lambda a: torch.as_tensor(np.asarray(a, np.float64)) if not isinstance(a, torch.Tensor) else a
    h_t, gamma_t, beta_t = t(h), t(gamma), t(beta)
    squeeze = h_t.ndim == 3
    if squeeze:
        h_t = h_t[None]
    if h_t.ndim not in (0, 4) and not squeeze:
        h_t = h_t.reshape(1, 1, 1, -1) if h_t.ndim <= 1 else h_t
    if mean is None:
        dims = (0, 2, 3) if h_t.ndim == 4 else None
        mean_t = h_t.mean(dim=dims, keepdim=True) if dims else h_t.mean()
        var = h_t.var(dim=dims, keepdim=True, unbiased=False) if dims else h_t.var(unbiased=False)
        std_t = torch.sqrt(var + eps)
    else:
        mean_t, std_t = t(mean), t(std)
        if h_t.ndim == 4 and mean_t.ndim == 1:
            mean_t = mean_t.view(1, -1, 1, 1)
            std_t = std_t.view(1, -1, 1, 1)
    out = gamma_t * (h_t - mean_t) / std_t + beta_t
    if squeeze:
        out = out[0]
    return out.numpy() if was_numpy else out


class SpadeNorm(nn.Module):
    """Param-free BN followed by label-conditioned gamma/beta modulation."""

    def __init__(self, channels: int, label_nc: int = N_CLASSES, hidden: int = 32):
        super().__init__()
        self.norm = nn.BatchNorm2d(channels, affine=False)
        self.shared = nn.Sequential(nn.Conv2d(label_nc, hidden, 3, padding=1), nn.ReLU())
        self.to_gamma = nn.Conv2d(hidden, channels, 3, padding=1)
        self.to_beta = nn.Conv2d(hidden, channels, 3, padding=1)

    def forward(self, h: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
        label = F.interpolate(label, size=h.shape[2:], mode="nearest")
        a = self.shared(label)
        gamma = 1.0 + self.to_gamma(a)   # head outputs identity modulation at init
        beta = self.to_beta(a)
        return gamma * self.norm(h) + beta


class SpadeResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, label_nc: int = N_CLASSES):
        super().__init__()
        c_mid = min(c_in, c_out)
        self.spade1 = SpadeNorm(c_in, label_nc)
        self.conv1 = nn.Conv2d(c_in, c_mid, 3, padding=1)
        self.spade2 = SpadeNorm(c_mid, label_nc)
        self.conv2 = nn.Conv2d(c_mid, c_out, 3, padding=1)
        self.learn_skip = c_in != c_out
        if self.learn_skip:
            self.spade_s = SpadeNorm(c_in, label_nc)
            self.conv_s = nn.Conv2d(c_in, c_out, 1, bias=False)

    def forward(self, h: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
        skip = self.conv_s(self.spade_s(h, label)) if self.learn_skip else h
        x = self.conv1(F.leaky_relu(self.spade1(h, label), 0.2))
        x = self.conv2(F.leaky_relu(self.spade2(x, label), 0.2))
        return skip + x


class StyleEncoder(nn.Module):
    """Residual downsampling encoder from one slice to a style vector."""

    def __init__(self, config: GanConfig):
        super().__init__()
        w = config.disc_base_width
        self.stem = nn.Conv2d(1, w, 3, stride=2, padding=1)
        self.blocks = nn.ModuleList()
        c = w
        for _ in range(3):
            nxt = min(2 * c, 4 * w)
            self.blocks.append(nn.ModuleDict({
                "norm": nn.InstanceNorm2d(c, affine=False),
                "conv1": nn.Conv2d(c, nxt, 3, stride=2, padding=1),
                "conv2": nn.Conv2d(nxt, nxt, 3, padding=1),
                "skip": nn.Conv2d(c, nxt, 1, stride=2, bias=False),
            }))
            c = nxt
        self.head = nn.Linear(c, config.style_dim)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        h = F.leaky_relu(self.stem(img), 0.2)
        for b in self.blocks:
            x = F.leaky_relu(b["conv1"](b["norm"](h)), 0.2)
            x = F.leaky_relu(b["conv2"](x), 0.2)
            h = x + b["skip"](h)
        h = h.mean(dim=(2, 3))
        return self.head(h)


class Generator(nn.Module):
    def __init__(self, config: GanConfig):
        super().__init__()
        self.config = config
        b = config.gen_base_width
        self.start = config.image_size // 16
        widths = [4 * b, 2 * b, b, b, max(b // 2, 8)]
        self.fc = nn.Linear(config.style_dim, widths[0] * self.start ** 2)
        self.blocks = nn.ModuleList(
            [SpadeResBlock(widths[i], widths[i + 1]) for i in range(4)])
        self.final_block = SpadeResBlock(widths[4], widths[4])
        self.to_image = nn.Conv2d(widths[4], 1, 3, padding=1)
        self.w0 = widths[0]

    def forward(self, label: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
        h = self.fc(style).view(-1, self.w0, self.start, self.start)
        for block in self.blocks:
            h = block(h, label)
            h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = self.final_block(h, label)
        return torch.tanh(self.to_image(F.leaky_relu(h, 0.2)))


class SynthesisModel(nn.Module):
    """Style encoder + SPADE generator bundle."""

    def __init__(self, config: GanConfig):
        super().__init__()
        self.config = config
        self.style_encoder = StyleEncoder(config)
        self.generator = Generator(config)


class PatchDiscriminator(nn.Module):
    def __init__(self, config: GanConfig):
        super().__init__()
        b = config.disc_base_width
        self.layers = nn.ModuleList([
            nn.Conv2d(1 + N_CLASSES, b, 4, stride=2, padding=1),
            nn.Conv2d(b, 2 * b, 4, stride=2, padding=1),
            nn.Conv2d(2 * b, 4 * b, 4, stride=2, padding=1),
            nn.Conv2d(4 * b, 1, 4, padding=1),
        ])
        self.norms = nn.ModuleList([nn.Identity(), nn.InstanceNorm2d(2 * b),
                                    nn.InstanceNorm2d(4 * b), nn.Identity()])

    def forward(self, img: torch.Tensor, label: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        h = torch.cat([img, label], dim=1)
        for i, (conv, norm) in enumerate(zip(self.layers, self.norms)):
            h = conv(h)
            if i < len(self.layers) - 1:
                h = F.leaky_relu(norm(h), 0.2)
            feats.append(h)
        return feats  # feats[-1] are the patch logits


class MultiScaleDiscriminator(nn.Module):
    def __init__(self, config: GanConfig):
        super().__init__()
        self.scales = nn.ModuleList(
            [PatchDiscriminator(config) for _ in range(config.n_disc_scales)])

    def forward(self, img: torch.Tensor, label: torch.Tensor) -> list[list[torch.Tensor]]:
        out = []
        for i, disc in enumerate(self.scales):
            if i:
                img = F.avg_pool2d(img, 2)
                label = F.avg_pool2d(label, 2)
            out.append(disc(img, label))
        return out


# ---------------------------------------------------------------------------
# numpy-facing operations

def style_encode(model: SynthesisModel, image: np.ndarray) -> np.ndarray:
    """Style code of one normalized (H, W) slice; deterministic."""
    image = np.asarray(image, np.float32)
    size = model.config.image_size
    if image.shape != (size, size):
        raise ShapeMismatchError(f"expected ({size}, {size}) slice, got {image.shape}")
    model.eval()
    with torch.no_grad():
        code = model.style_encoder(torch.from_numpy(image)[None, None])
    return code[0].numpy().astype(np.float64)


def generate(model: SynthesisModel, label: np.ndarray, style: np.ndarray) -> np.ndarray:
    """Render one (4, H, W) one-hot map with a style code; output in [-1, 1]."""
    label = np.asarray(label, np.float32)
    size = model.config.image_size
    if label.shape != (N_CLASSES, size, size):
        raise ShapeMismatchError(f"expected ({N_CLASSES}, {size}, {size}) map, got {label.shape}")
    style_t = torch.from_numpy(np.asarray(style, np.float32).reshape(1, -1))
    if style_t.shape[1] != model.config.style_dim:
        raise ShapeMismatchError(
            f"style length {style_t.shape[1]} != style_dim {model.config.style_dim}")
    model.eval()
    with torch.no_grad():
        img = model.generator(torch.from_numpy(label)[None], style_t)
    return img[0, 0].numpy().astype(np.float32)


def synthesize_subject(model: SynthesisModel, labels: np.ndarray,
                       style_source: Subject, subject_id: str | None = None) -> Subject:
    """Render a label volume slice-by-slice, styles taken from the source.

    Each output slice uses the style of the source slice at the matching
    normalized position, preserving through-plane intensity consistency.
    Slice spacing is rescaled so the physical extent is kept.
    """
    labels = np.asarray(labels, np.int16)
    n_out = labels.shape[0]
    n_src = style_source.n_slices
    if n_src < 1:
        raise ShapeMismatchError("style source has no slices")
    image = np.empty(labels.shape, dtype=np.float32)
    style_cache: dict[int, np.ndarray] = {}
    for i in range(n_out):
        pos = i / max(n_out - 1, 1)
        src = int(round(pos * (n_src - 1)))
        if src not in style_cache:
            style_cache[src] = style_encode(model, style_source.image[src])
        image[i] = generate(model, one_hot(labels[i]), style_cache[src])
    row_mm, col_mm, slice_mm = style_source.spacing
    meta = type(style_source.meta)(
        subject_id=subject_id or f"{style_source.meta.subject_id}_synth",
        pathology=style_source.meta.pathology,
        vendor=style_source.meta.vendor, phase=style_source.meta.phase)
    return Subject(image=image, labels=labels,
                   spacing=(row_mm, col_mm, slice_mm * n_src / n_out), meta=meta)


# ---------------------------------------------------------------------------
# adversarial training

def _hinge_d(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    return (F.relu(1.0 - real_logits).mean() + F.relu(1.0 + fake_logits).mean())


def train_gan(images: np.ndarray, labels_onehot: np.ndarray, config: GanConfig,
              progress: bool = False) -> tuple[SynthesisModel, MultiScaleDiscriminator, list[dict]]:
    """Train on paired (N, H, W) images and (N, 4, H, W) one-hot label maps."""
    images = np.asarray(images, np.float32)
    labels_onehot = np.asarray(labels_onehot, np.float32)
    if images.shape[0] == 0:
        raise TrainingError("empty paired dataset")
    if images.shape[0] != labels_onehot.shape[0]:
        raise ShapeMismatchError("image/label pair count mismatch")

    torch.manual_seed(config.seed)
    model = SynthesisModel(config)
    disc = MultiScaleDiscriminator(config)
    opt_g = torch.optim.Adam(model.parameters(), lr=config.lr_g,
                             betas=(config.beta1, 0.999))
    opt_d = torch.optim.Adam(disc.parameters(), lr=config.lr_d,
                             betas=(config.beta1, 0.999))
    x_img = torch.from_numpy(images)[:, None]
    x_lab = torch.from_numpy(labels_onehot)
    rng = np.random.default_rng(config.seed)

    log: list[dict] = []
    for epoch in range(config.epochs):
        model.train()
        disc.train()
        order = rng.permutation(images.shape[0])
        sums = {"loss_d": 0.0, "loss_g": 0.0, "loss_fm": 0.0, "d_acc": 0.0}
        n_batches = 0
        for start in range(0, len(order), config.batch_size):
            img = x_img[order[start:start + config.batch_size]]
            lab = x_lab[order[start:start + config.batch_size]]

            style = model.style_encoder(img)
            fake = model.generator(lab, style)

            # discriminator step
            d_real = disc(img, lab)
            d_fake = disc(fake.detach(), lab)
            loss_d = sum(_hinge_d(r[-1], f[-1]) for r, f in zip(d_real, d_fake))
            opt_d.zero_grad()
            loss_d.backward()
            opt_d.step()

            # generator step
            d_fake_g = disc(fake, lab)
            d_real_ref = disc(img, lab)
            loss_adv = -sum(f[-1].mean() for f in d_fake_g)
            loss_fm = sum(
                F.l1_loss(f_feat, r_feat.detach())
                for fs, rs in zip(d_fake_g, d_real_ref)
                for f_feat, r_feat in zip(fs[:-1], rs[:-1]))
            loss_g = loss_adv + config.feature_matching_weight * loss_fm
            opt_g.zero_grad()
            loss_g.backward()
            opt_g.step()

            if not (torch.isfinite(loss_d) and torch.isfinite(loss_g)):
                raise TrainingError(f"NaN/inf GAN loss at epoch {epoch}")

            with torch.no_grad():
                acc = 0.5 * ((d_real[0][-1] > 0).float().mean()
                             + (d_fake[0][-1] < 0).float().mean())
            sums["loss_d"] += float(loss_d)
            sums["loss_g"] += float(loss_adv)
            sums["loss_fm"] += float(loss_fm)
            sums["d_acc"] += float(acc)
            n_batches += 1

        entry = {"epoch": epoch, **{k: v / n_batches for k, v in sums.items()}}
        log.append(entry)
        if progress and (epoch % 5 == 0 or epoch == config.epochs - 1):
            print(f"[gan] epoch {epoch}: d={entry['loss_d']:.3f} g={entry['loss_g']:.3f} "
                  f"fm={entry['loss_fm']:.3f} d_acc={entry['d_acc']:.2f}")
    return model, disc, log


def save_gan(model: SynthesisModel, path: str | Path,
             train_log: list[dict] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"config": asdict(model.config), "state_dict": model.state_dict(),
                "train_log": train_log or []}, path)
    return path


def load_gan(path: str | Path) -> SynthesisModel:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    model = SynthesisModel(GanConfig(**blob["config"]))
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model
