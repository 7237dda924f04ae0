"""Conditional Wasserstein GAN mapping shot gathers to velocity images.

The generator is an encoder-decoder without skip connections: seven
``k x 1`` convolutions shrink the 1000-sample time axis to 32, square
stride-2 convolutions and a final 8x8 convolution collapse everything to a
1x1 latent, and transposed convolutions grow it back to at least the target
image before a centre crop, a 1x1 convolution and tanh. The critic is five
conv/BN/LeakyReLU/max-pool blocks, global average pooling and two fully
connected layers, with no output squashing.
"""

from __future__ import annotations

import csv
import math
import os
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import engine, formats
from .dataset import DatasetManifest, Normalization, load_split, to_network_layout
from .wavesim import Grid2D, VelocityModel

SUPPORTED_SHAPES = ((100, 100), (150, 100))
INPUT_SHAPE = (6, 1000, 32)

ENCODER_COLUMN = [  # (channels, kernel height, stride)
    (32, 7, 2), (64, 3, 2), (64, 3, 2), (128, 3, 2), (128, 3, 2), (256, 3, 1), (256, 3, 1),
]
ENCODER_SQUARE = [(512, 2), (512, 2), (512, 1)]  # (channels, stride); 32 -> 16 -> 8 -> 8
LATENT = 512
DECODER = [256, 128, 64, 32, 16]
CRITIC = [32, 64, 128, 256, 512]
CRITIC_HIDDEN = 128

HISTORY_FIELDS = ("epoch", "d_loss", "g_adv", "g_mae", "g_mse", "val_mae", "val_mse", "lr")


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, step: int, last_good: Path | None):
        super().__init__(f"non-finite loss at epoch {epoch}, step {step}; last good checkpoint: {last_good}")
        self.epoch, self.step, self.last_good = epoch, step, last_good


def _w(c: int, width: float) -> int:
    return max(1, int(round(c * width)))


def _block(layers, name, conv, c_out, norm=True):
    layers.append((f"{name}_conv", conv))
    layers.append((f"{name}_bn", engine.batchnorm2d(c_out) if norm else nn.Identity()))
    layers.append((f"{name}_act", engine.leaky_relu()))


def build_generator(out_shape=(100, 100), width: float = 1.0, seed: int = 0) -> engine.Graph:
    out_shape = tuple(out_shape)
    if out_shape not in SUPPORTED_SHAPES:
        raise ConfigError(f"unsupported output shape {out_shape}; choose one of {SUPPORTED_SHAPES}")
    layers = []
    c_in = INPUT_SHAPE[0]
    for i, (c, k, s) in enumerate(ENCODER_COLUMN, 1):
        c = _w(c, width)
        _block(layers, f"enc{i}", engine.conv2d(c_in, c, (k, 1), (s, 1), (k // 2, 0)), c)
        c_in = c
    for i, (c, s) in enumerate(ENCODER_SQUARE, 1):
        c = _w(c, width)
        _block(layers, f"sq{i}", engine.conv2d(c_in, c, 3, s, 1), c)
        c_in = c
    latent = _w(LATENT, width)
    _block(layers, "latent", engine.conv2d(c_in, latent, 8, 1, 0), latent)
    _block(layers, "dec0", engine.conv_transpose2d(latent, latent, 6, 1, 0), latent)
    c_in = latent
    for i, c in enumerate(DECODER, 1):
        c = _w(c, width)
        _block(layers, f"dec{i}", engine.conv_transpose2d(c_in, c, 3, 2, 1), c)
        c_in = c
    layers.append(("crop", engine.CenterCrop(out_shape)))
    layers.append(("head", engine.conv2d(c_in, 1, 1)))
    layers.append(("tanh", nn.Tanh()))
    return engine.Graph(layers, INPUT_SHAPE, seed=seed)


def build_discriminator(in_shape=(100, 100), batchnorm: bool = True, width: float = 1.0,
                        seed: int = 1) -> engine.Graph:
    """Wasserstein critic; accepts any image size that survives five 2x2 poolings."""
    layers = []
    c_in = 1
    for i, c in enumerate(CRITIC, 1):
        c = _w(c, width)
        _block(layers, f"blk{i}", engine.conv2d(c_in, c, 3, 1, 1), c, norm=batchnorm)
        layers.append((f"blk{i}_pool", engine.maxpool2x2()))
        c_in = c
    hidden = _w(CRITIC_HIDDEN, width)
    layers += [("gap", engine.GlobalAvgPool()), ("fc1", engine.linear(c_in, hidden)),
               ("fc1_act", engine.leaky_relu()), ("fc2", engine.linear(hidden, 1)),
               ("score", engine.Flatten())]
    net = engine.Graph(layers, (1,) + tuple(in_shape), seed=seed, fixed_spatial=False)
    return net


def critic_scores(D, x: torch.Tensor) -> torch.Tensor:
    return D(x).reshape(x.shape[0])


def gradient_penalty(D, real: torch.Tensor, fake: torch.Tensor, rng: torch.Generator | None = None) -> torch.Tensor:
    """Mean of ``(||grad_x D(x)||_2 - 1)^2`` at random points between real and fake."""
    if real.shape != fake.shape:
        raise engine.ShapeError(f"real {tuple(real.shape)} and fake {tuple(fake.shape)} differ")
    eps = torch.rand((real.shape[0],) + (1,) * (real.dim() - 1), generator=rng, dtype=real.dtype)
    x_hat = (eps * real.detach() + (1 - eps) * fake.detach()).requires_grad_(True)
    scores = critic_scores(D, x_hat)
    (grad,) = torch.autograd.grad(scores.sum(), x_hat, create_graph=True)
    norms = grad.reshape(grad.shape[0], -1).norm(dim=1)
    return ((norms - 1.0) ** 2).mean()


def d_loss(D, real, fake, lambda_gp: float = 10.0, rng: torch.Generator | None = None) -> torch.Tensor:
    loss = critic_scores(D, fake).mean() - critic_scores(D, real).mean()
    if lambda_gp:
        loss = loss + lambda_gp * gradient_penalty(D, real, fake, rng)
    return loss


def g_loss(D, fake, label, lambda_mae: float, lambda_mse: float, adv_weight: float = 1.0):
    """Returns ``(total, adversarial, mae, mse)``; content terms are per-pixel means averaged over the batch."""
    diff = fake - label
    mae = diff.abs().mean()
    mse = (diff ** 2).mean()
    if adv_weight and D is not None:
        adv = -critic_scores(D, fake).mean()
    else:
        adv = torch.zeros((), dtype=fake.dtype)
    total = adv_weight * adv + lambda_mae * mae + lambda_mse * mse
    return total, adv, mae, mse


@dataclass
class GanHyper:
    lambda_gp: float = 10.0
    lambda_mae: float = 0.0
    lambda_mse: float = 100.0
    critic_steps: int = 5
    batch: int = 50
    lr: float = 1e-4
    warm_epochs: int = 120
    decay_epochs: int = 170
    epochs: int = 290
    seed: int = 0
    adversarial: bool = True
    disc_batchnorm: bool = True
    width: float = 1.0

    def __post_init__(self):
        if min(self.lambda_gp, self.lambda_mae, self.lambda_mse) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.critic_steps < 1:
            raise ConfigError("critic_steps must be at least 1")
        if self.batch < 2:
            raise ConfigError("batch must be at least 2 for batch normalisation")
        if self.lr <= 0 or self.epochs < 0 or self.warm_epochs < 0 or self.decay_epochs < 0:
            raise ConfigError("lr must be positive and epoch counts non-negative")
        if self.width <= 0:
            raise ConfigError("width must be positive")

    @classmethod
    def desk(cls, **kw) -> "GanHyper":
        base = dict(batch=10, epochs=30)
        base.update(kw)
        return cls(**base)

    def to_text(self) -> str:
        return formats.dump_kv(asdict(self), "GAN training configuration")

    @classmethod
    def from_text(cls, text: str) -> "GanHyper":
        kv = formats.parse_kv(text)
        known = {f.name: f for f in fields(cls)}
        unknown = set(kv) - set(known)
        if unknown:
            raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
        values = {}
        for key, raw in kv.items():
            kind = type(getattr(cls(), key))
            try:
                values[key] = formats.parse_bool(raw) if kind is bool else kind(raw)
            except (ValueError, formats.FormatError) as exc:
                raise ConfigError(f"{key}: {exc}") from None
        return cls(**values)


def lr_at(hyper: GanHyper, epoch: int) -> float:
    """Constant for ``warm_epochs`` epochs, then linear to zero over ``decay_epochs``."""
    if epoch < hyper.warm_epochs:
        return hyper.lr
    if hyper.decay_epochs == 0:
        return 0.0
    frac = (epoch - hyper.warm_epochs) / hyper.decay_epochs
    return hyper.lr * max(0.0, 1.0 - frac)


def _configure_torch() -> None:
    threads = os.environ.get("FWI_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    torch.use_deterministic_algorithms(True)


def evaluate(G, seismic: torch.Tensor, labels: torch.Tensor, chunk: int = 16) -> tuple[float, float]:
    """Mean per-image MAE and MSE of ``G`` in eval mode on normalised images."""
    was = G.training
    G.eval()
    mae = mse = 0.0
    with torch.no_grad():
        for i in range(0, seismic.shape[0], chunk):
            d = G(seismic[i:i + chunk]) - labels[i:i + chunk]
            mae += float(d.abs().mean(dim=(1, 2, 3)).double().sum())
            mse += float((d ** 2).mean(dim=(1, 2, 3)).double().sum())
    G.train(was)
    n = seismic.shape[0]
    return mae / n, mse / n


def _meta(manifest: DatasetManifest, hyper: GanHyper, epoch: int, **extra) -> dict:
    norm = manifest.normalization
    return dict(out_shape=list(manifest.label_shape), width=hyper.width, disc_batchnorm=hyper.disc_batchnorm,
                v_min=norm.v_min, v_max=norm.v_max, p_scale=norm.p_scale, vz_scale=norm.vz_scale,
                dx=5.0, epoch=epoch, hyper=asdict(hyper), **extra)


def write_history(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for r in rows:
            w.writerow([r["epoch"]] + [repr(float(r[k])) for k in HISTORY_FIELDS[1:]])


def train(manifest: DatasetManifest, hyper: GanHyper, out_dir, log=print):
    """Alternating critic/generator training.

    Each epoch walks the shuffled training split in batches. With the
    adversarial term on, every batch drives one critic update and every
    ``critic_steps``-th batch additionally drives one generator update;
    without it every batch is a generator update on the content loss.

    Writes ``history.csv``, ``best.nnc`` (lowest validation MAE),
    ``final.nnc`` and ``summary.txt`` into ``out_dir`` and returns
    ``(final checkpoint path, history rows)``.
    """
    _configure_torch()
    log = log or (lambda *_: None)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(hyper.seed)
    shape = manifest.label_shape
    G = build_generator(shape, hyper.width, seed=hyper.seed)
    D = build_discriminator(shape, hyper.disc_batchnorm, hyper.width, seed=hyper.seed + 1)
    opt_g = engine.make_adam(G.parameters(), hyper.lr)
    opt_d = engine.make_adam(D.parameters(), hyper.lr)
    gp_rng = torch.Generator().manual_seed(hyper.seed)

    x_tr, y_tr = (torch.from_numpy(a) for a in load_split(manifest, "train"))
    x_va, y_va = (torch.from_numpy(a) for a in load_split(manifest, "val"))
    n_train = x_tr.shape[0]
    n_batches = n_train // hyper.batch
    if n_batches < 1:
        raise ConfigError(f"training split of {n_train} samples is smaller than one batch of {hyper.batch}")

    init_mae, init_mse = evaluate(G, x_va, y_va)
    log(f"untrained generator: val_mae={init_mae:.5f} val_mse={init_mse:.5f}")
    best_mae = math.inf
    best_epoch = -1
    best_path = out / "best.nnc"
    history = []
    step = 0

    for epoch in range(hyper.epochs):
        lr = lr_at(hyper, epoch)
        engine.set_lr(opt_g, lr)
        engine.set_lr(opt_d, lr)
        order = np.random.default_rng([hyper.seed, epoch]).permutation(n_train)
        sums = dict(d_loss=0.0, g_adv=0.0, g_mae=0.0, g_mse=0.0)
        n_d = n_g = 0
        t0 = time.perf_counter()
        G.train(); D.train()
        for b in range(n_batches):
            idx = torch.from_numpy(order[b * hyper.batch:(b + 1) * hyper.batch])
            x, y = x_tr[idx], y_tr[idx]
            step += 1
            gen_step = True
            if hyper.adversarial:
                with torch.no_grad():
                    fake = G(x)
                opt_d.zero_grad(set_to_none=False)
                loss_d = d_loss(D, y, fake, hyper.lambda_gp, gp_rng)
                if not torch.isfinite(loss_d):
                    raise TrainingDiverged(epoch, step, best_path if best_epoch >= 0 else None)
                loss_d.backward()
                engine.adam_step(opt_d)
                sums["d_loss"] += loss_d.item()
                n_d += 1
                gen_step = (b + 1) % hyper.critic_steps == 0
            if gen_step:
                opt_g.zero_grad(set_to_none=False)
                total, adv, mae, mse = g_loss(D, G(x), y, hyper.lambda_mae, hyper.lambda_mse,
                                              1.0 if hyper.adversarial else 0.0)
                if not torch.isfinite(total):
                    raise TrainingDiverged(epoch, step, best_path if best_epoch >= 0 else None)
                total.backward()
                engine.adam_step(opt_g)
                sums["g_adv"] += adv.item(); sums["g_mae"] += mae.item(); sums["g_mse"] += mse.item()
                n_g += 1
        val_mae, val_mse = evaluate(G, x_va, y_va)
        row = dict(epoch=epoch, d_loss=sums["d_loss"] / max(n_d, 1), g_adv=sums["g_adv"] / max(n_g, 1),
                   g_mae=sums["g_mae"] / max(n_g, 1), g_mse=sums["g_mse"] / max(n_g, 1),
                   val_mae=val_mae, val_mse=val_mse, lr=lr)
        history.append(row)
        write_history(out / "history.csv", history)
        if val_mae < best_mae:
            best_mae, best_epoch = val_mae, epoch
            engine.save_checkpoint(best_path, {"G": G, "D": D}, meta=_meta(manifest, hyper, epoch))
        log(f"epoch {epoch}: d={row['d_loss']:.4f} g_adv={row['g_adv']:.4f} g_mse={row['g_mse']:.5f} "
            f"val_mae={val_mae:.5f} val_mse={val_mse:.5f} lr={lr:.2e} ({time.perf_counter() - t0:.0f}s)")

    final = out / "final.nnc"
    engine.save_checkpoint(final, {"G": G, "D": D}, {"G": opt_g, "D": opt_d},
                           meta=_meta(manifest, hyper, hyper.epochs - 1))
    summary = dict(initial_val_mae=init_mae, initial_val_mse=init_mse, best_epoch=best_epoch,
                   best_val_mae=best_mae if history else init_mae, epochs=hyper.epochs)
    (out / "summary.txt").write_text(formats.dump_kv(summary, "training summary"))
    (out / "config.txt").write_text(hyper.to_text())
    return final, history


def read_history(path) -> list[dict]:
    with open(path) as f:
        rows = list(csv.DictReader(f))
    return [{k: (int(v) if k == "epoch" else float(v)) for k, v in r.items()} for r in rows]


class Inference:
    """Eval-mode generator restored from a checkpoint."""

    def __init__(self, checkpoint):
        meta, entries = engine.read_checkpoint(checkpoint)
        self.meta = meta
        self.G = build_generator(tuple(meta["out_shape"]), meta["width"])
        engine.load_into(self.G, "G", entries)
        self.G.eval()
        self.norm = Normalization(meta["p_scale"], meta["vz_scale"], meta["v_min"], meta["v_max"])

    def predict_normalized(self, seismic: np.ndarray) -> np.ndarray:
        """``(n, 32, 1000, 6)`` or single ``(32, 1000, 6)`` seismic -> ``(n, nz, nx)`` images in [-1, 1]."""
        arr = np.asarray(seismic, dtype=np.float32)
        if arr.ndim == 3:
            arr = arr[None]
        x = torch.from_numpy(np.stack([to_network_layout(a) for a in arr]))
        with torch.no_grad():
            return self.G(x)[:, 0].numpy()

    def __call__(self, seismic: np.ndarray) -> list[VelocityModel]:
        images = self.predict_normalized(seismic)
        grid = Grid2D(*images.shape[1:], dx=self.meta.get("dx", 5.0))
        return [VelocityModel(grid, self.norm.velocity(img)) for img in images]


def infer(checkpoint, seismic: np.ndarray) -> VelocityModel:
    """Velocity model for one normalised ``(32, 1000, 6)`` seismic tensor."""
    return Inference(checkpoint)(seismic)[0]
