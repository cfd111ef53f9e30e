"""Convolutional beta-VAE over one-hot cardiac label maps.

Encoder: four convolutional blocks (three 3x3 conv layers each, BN +
LeakyReLU, the first conv of a block strided for 2x downsampling), then
four fully connected layers producing the Gaussian posterior (mu,
log-variance). Decoder: FC from z, four blocks of nearest upsampling plus
two conv layers (BN + LeakyReLU), and a final block of conv + BN + conv to
four channels with softmax. Loss is class-weighted cross-entropy plus a
beta-weighted KL divergence to the unit Gaussian prior.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeMismatchError, TrainingError

N_CLASSES = 4


@dataclass
class VaeConfig:
    n_z: int = 16
    beta: float = 15.0
    ce_class_weights: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    epochs: int = 60
    batch_size: int = 16
    learning_rate: float = 1e-4
    seed: int = 0
    image_size: int = 128
    n_blocks: int = 4
    base_width: int = 32
    fc_hidden: tuple[int, int, int] = (256, 128, 64)
    leaky_slope: float = 0.2
    val_fraction: float = 0.15

    def __post_init__(self):
        if self.n_z < 2:
            raise ValueError(f"n_z must be >= 2, got {self.n_z}")
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if len(self.ce_class_weights) != N_CLASSES:
            raise ValueError("ce_class_weights needs exactly 4 entries")
        if len(self.fc_hidden) != 3:
            raise ValueError("fc_hidden needs 3 entries (4 FC layers total)")
        if self.image_size % (2 ** self.n_blocks) != 0:
            raise ValueError("image_size must be divisible by 2**n_blocks")


@dataclass(frozen=True)
class LatentCode:
    """Gaussian posterior parameters for one encoded label map."""

    mu: np.ndarray
    log_var: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, np.float64).reshape(-1)
        lv = np.asarray(self.log_var, np.float64).reshape(-1)
        if mu.shape != lv.shape:
            raise ShapeMismatchError("mu and log_var must have equal length")
        if not (np.isfinite(mu).all() and np.isfinite(lv).all()):
            raise ValueError("latent code has non-finite entries")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "log_var", lv)


def reparameterize(code: LatentCode, noise: np.ndarray) -> np.ndarray:
    """z = mu + exp(0.5 * log_var) * noise."""
    noise = np.asarray(noise, np.float64).reshape(-1)
    if noise.shape != code.mu.shape:
        raise ShapeMismatchError("noise length must match n_z")
    return code.mu + np.exp(0.5 * code.log_var) * noise


def _conv_block_enc(c_in: int, c_out: int, slope: float) -> nn.Sequential:
    layers: list[nn.Module] = []
    for j in range(3):
        stride = 2 if j == 0 else 1
        layers += [nn.Conv2d(c_in if j == 0 else c_out, c_out, 3, stride=stride, padding=1),
                   nn.BatchNorm2d(c_out), nn.LeakyReLU(slope)]
    return nn.Sequential(*layers)


def _conv_block_dec(c_in: int, c_out: int, slope: float) -> nn.Sequential:
    return nn.Sequential(
        nn.Upsample(scale_factor=2, mode="nearest"),
        nn.Conv2d(c_in, c_out, 3, padding=1), nn.BatchNorm2d(c_out), nn.LeakyReLU(slope),
        nn.Conv2d(c_out, c_out, 3, padding=1), nn.BatchNorm2d(c_out), nn.LeakyReLU(slope),
    )


class LabelVae(nn.Module):
    def __init__(self, config: VaeConfig):
        super().__init__()
        self.config = config
        w = [config.base_width * 2 ** i for i in range(config.n_blocks)]
        self.widths = w
        self.bottom = config.image_size // 2 ** config.n_blocks
        flat = w[-1] * self.bottom ** 2

        self.encoder_blocks = nn.ModuleList(
            [_conv_block_enc(N_CLASSES if i == 0 else w[i - 1], w[i], config.leaky_slope)
             for i in range(config.n_blocks)])
        fc_dims = [flat, *config.fc_hidden, 2 * config.n_z]
        self.fc_layers = nn.ModuleList(
            [nn.Linear(fc_dims[i], fc_dims[i + 1]) for i in range(4)])

        self.fc_decode = nn.Linear(config.n_z, flat)
        self.decoder_blocks = nn.ModuleList(
            [_conv_block_dec(w[-1 - i], w[-2 - i] if i < config.n_blocks - 1 else w[0],
                             config.leaky_slope)
             for i in range(config.n_blocks)])
        self.final_conv1 = nn.Conv2d(w[0], w[0], 3, padding=1)
        self.final_bn = nn.BatchNorm2d(w[0])
        self.final_conv2 = nn.Conv2d(w[0], N_CLASSES, 3, padding=1)

    # -- torch paths -------------------------------------------------------
    def encode_t(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = x
        for block in self.encoder_blocks:
            h = block(h)
        h = h.flatten(1)
        for k, fc in enumerate(self.fc_layers):
            h = fc(h)
            if k < len(self.fc_layers) - 1:
                h = F.leaky_relu(h, self.config.leaky_slope)
        mu, log_var = h.chunk(2, dim=1)
        return mu, log_var

    def decode_logits_t(self, z: torch.Tensor) -> torch.Tensor:
        h = self.fc_decode(z)
        h = h.view(-1, self.widths[-1], self.bottom, self.bottom)
        for block in self.decoder_blocks:
            h = block(h)
        h = self.final_conv2(self.final_bn(self.final_conv1(h)))
        return h

    def forward(self, x: torch.Tensor):
        mu, log_var = self.encode_t(x)
        std = torch.exp(0.5 * log_var)
        z = mu + std * torch.randn_like(std)
        return self.decode_logits_t(z), mu, log_var

    # -- numpy-facing contract ---------------------------------------------
    def _check_input(self, label: np.ndarray) -> None:
        want = (N_CLASSES, self.config.image_size, self.config.image_size)
        if tuple(label.shape) != want:
            raise ShapeMismatchError(f"expected label map {want}, got {tuple(label.shape)}")

    def encode(self, label: np.ndarray) -> LatentCode:
        """Posterior parameters of one (4, H, W) one-hot map; deterministic."""
        label = np.asarray(label, np.float32)
        self._check_input(label)
        self.eval()
        with torch.no_grad():
            mu, log_var = self.encode_t(torch.from_numpy(label)[None])
        return LatentCode(mu=mu[0].numpy(), log_var=log_var[0].numpy())

    def decode(self, z: np.ndarray) -> np.ndarray:
        """Class-probability map (4, H, W) for one latent vector."""
        z = np.asarray(z, np.float32).reshape(-1)
        if z.shape[0] != self.config.n_z:
            raise ShapeMismatchError(f"expected z of length {self.config.n_z}, got {z.shape[0]}")
        self.eval()
        with torch.no_grad():
            logits = self.decode_logits_t(torch.from_numpy(z)[None])
            probs = torch.softmax(logits, dim=1)
        return probs[0].numpy()

    # -- introspection -------------------------------------------------------
    def layer_manifest(self) -> dict:
        """Structured architecture description, stored in checkpoints."""
        def describe(seq: nn.Sequential) -> list[str]:
            out = []
            for m in seq:
                if isinstance(m, nn.Conv2d):
                    out.append(f"conv3x3(s{m.stride[0]},{m.in_channels}->{m.out_channels})")
                elif isinstance(m, nn.BatchNorm2d):
                    out.append("bn")
                elif isinstance(m, nn.LeakyReLU):
                    out.append("lrelu")
                elif isinstance(m, nn.Upsample):
                    out.append("upsample2x")
            return out

        return {
            "encoder_blocks": [describe(b) for b in self.encoder_blocks],
            "fc_layers": [f"fc({fc.in_features}->{fc.out_features})" for fc in self.fc_layers],
            "decoder_blocks": [describe(b) for b in self.decoder_blocks],
            "final_block": [
                f"conv3x3(s1,{self.final_conv1.in_channels}->{self.final_conv1.out_channels})",
                "bn",
                f"conv3x3(s1,{self.final_conv2.in_channels}->{self.final_conv2.out_channels})",
                "softmax",
            ],
            "downsampling": "strided first conv per encoder block (2x each)",
        }


# ---------------------------------------------------------------------------
# loss

def _to_tensor(a) -> torch.Tensor:
    return a if isinstance(a, torch.Tensor) else torch.as_tensor(np.asarray(a))


def kld_term(mu, log_var) -> torch.Tensor:
    """-0.5 * sum_j (1 + log_var - mu^2 - exp(log_var)), batch-averaged."""
    mu = _to_tensor(mu)
    log_var = _to_tensor(log_var)
    if mu.ndim == 1:
        mu, log_var = mu[None], log_var[None]
    per_sample = -0.5 * (1 + log_var - mu.pow(2) - log_var.exp()).sum(dim=1)
    return per_sample.mean()


def cross_entropy_term(pred, target, class_weights) -> torch.Tensor:
    """Class-weighted mean pixel cross-entropy from probability maps.

    Per-pixel CE is -log p at the true class; pixels are averaged with the
    true-class weights (weighted mean, torch convention).
    """
    pred = _to_tensor(pred)
    target = _to_tensor(target).to(pred.dtype)
    if pred.ndim == 3:
        pred, target = pred[None], target[None]
    if pred.shape != target.shape:
        raise ShapeMismatchError(f"pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    w = torch.as_tensor(class_weights, dtype=pred.dtype).view(1, -1, 1, 1)
    logp = torch.log(pred.clamp_min(1e-12))
    num = -(w * target * logp).sum()
    den = (w * target).sum()
    return num / den


def vae_loss(pred, target, code, config: VaeConfig) -> dict[str, float]:
    """{'ce', 'kld', 'total'} with total = ce + beta * kld."""
    mu = code.mu if isinstance(code, LatentCode) else code[0]
    log_var = code.log_var if isinstance(code, LatentCode) else code[1]
    ce = cross_entropy_term(pred, target, config.ce_class_weights)
    kld = kld_term(mu, log_var)
    total = ce + config.beta * kld
    return {"ce": float(ce), "kld": float(kld), "total": float(total)}


def inverse_frequency_weights(dataset: np.ndarray) -> tuple[float, float, float, float]:
    """Inverse class-frequency weights over (N, 4, H, W) one-hot maps, mean 1."""
    counts = np.asarray(dataset).sum(axis=(0, 2, 3)).astype(np.float64)
    counts = np.maximum(counts, 1.0)
    inv = 1.0 / counts
    w = inv / inv.mean()
    return tuple(float(x) for x in w)


# ---------------------------------------------------------------------------
# training

def train_vae(dataset: np.ndarray, config: VaeConfig,
              progress: bool = False) -> tuple[LabelVae, list[dict]]:
    """Train on (N, 4, H, W) one-hot maps; returns (model, per-epoch log).

    The log records ce/kld/total on the training set and the total loss on
    a held-out validation split each epoch.
    """
    data = np.asarray(dataset, np.float32)
    if data.ndim != 4 or data.shape[0] == 0:
        raise TrainingError(f"need a nonempty (N, 4, H, W) dataset, got {data.shape}")

    torch.manual_seed(config.seed)
    model = LabelVae(config)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    w = torch.as_tensor(config.ce_class_weights, dtype=torch.float32).view(1, -1, 1, 1)

    rng = np.random.default_rng(config.seed)
    perm = rng.permutation(data.shape[0])
    n_val = max(1, int(round(config.val_fraction * data.shape[0]))) if data.shape[0] > 4 else 0
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    if train_idx.size == 0:
        train_idx, val_idx = perm, perm[:0]
    x_train = torch.from_numpy(data[train_idx])
    x_val = torch.from_numpy(data[val_idx]) if n_val else None

    def weighted_ce(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
        logp = F.log_softmax(logits, dim=1)
        return -(w * target * logp).sum() / (w * target).sum()

    log: list[dict] = []
    for epoch in range(config.epochs):
        model.train()
        order = rng.permutation(x_train.shape[0])
        ce_sum = kld_sum = 0.0
        n_batches = 0
        for start in range(0, len(order), config.batch_size):
            batch = x_train[order[start:start + config.batch_size]]
            logits, mu, log_var = model(batch)
            ce = weighted_ce(logits, batch)
            kld = kld_term(mu, log_var)
            loss = ce + config.beta * kld
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"NaN/inf loss at epoch {epoch} (ce={float(ce)}, kld={float(kld)})")
            opt.zero_grad()
            loss.backward()
            opt.step()
            ce_sum += float(ce)
            kld_sum += float(kld)
            n_batches += 1

        entry = {"epoch": epoch, "ce": ce_sum / n_batches, "kld": kld_sum / n_batches,
                 "total": ce_sum / n_batches + config.beta * kld_sum / n_batches}
        if x_val is not None:
            model.eval()
            with torch.no_grad():
                logits, mu, log_var = model(x_val)
                vce = weighted_ce(logits, x_val)
                vkld = kld_term(mu, log_var)
            entry["val_total"] = float(vce + config.beta * vkld)
        else:
            entry["val_total"] = entry["total"]
        log.append(entry)
        if progress and (epoch % 10 == 0 or epoch == config.epochs - 1):
            print(f"[vae] epoch {epoch}: ce={entry['ce']:.4f} kld={entry['kld']:.4f} "
                  f"val={entry['val_total']:.4f}")
    return model, log


def save_vae(model: LabelVae, path: str | Path, train_log: list[dict] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"config": asdict(model.config), "state_dict": model.state_dict(),
                "layer_manifest": model.layer_manifest(),
                "train_log": train_log or []}, path)
    return path


def load_vae(path: str | Path) -> LabelVae:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    cfg_dict = dict(blob["config"])
    for key in ("ce_class_weights", "fc_hidden"):
        cfg_dict[key] = tuple(cfg_dict[key])
    model = LabelVae(VaeConfig(**cfg_dict))
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model


def save_train_log(log: list[dict], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["epoch\tce\tkld\ttotal\tval_total"]
    for e in log:
        lines.append(f"{e['epoch']}\t{e['ce']:.6f}\t{e['kld']:.6f}"
                     f"\t{e['total']:.6f}\t{e['val_total']:.6f}")
    path.write_text("\n".join(lines) + "\n")
    return path
