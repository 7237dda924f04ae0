"""Layer engine for the encoder-decoder and critic networks.

Thin layer over torch: tensors are ``(n, c, h, w)`` float32, reverse-mode
gradients come from autograd. What lives here is the part torch does not
hand us directly: chains whose shapes are checked when they are built,
deterministic initialisation, a central-difference gradient checker that
runs a float64 copy of a layer, and the ``NNC1`` checkpoint format.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch
from torch import nn

LEAKY_SLOPE = 0.2
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
CHECKPOINT_MAGIC = b"NNC1"


class ShapeError(ValueError):
    pass


def tensor4(values, requires_grad: bool = False) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(values, dtype=np.float32))
    if t.dim() != 4:
        raise ShapeError(f"expected a (n, c, h, w) tensor, got shape {tuple(t.shape)}")
    if not torch.isfinite(t).all():
        raise ValueError("tensor contains non-finite values")
    return t.requires_grad_(requires_grad)


class CenterCrop(nn.Module):
    """Crop the trailing two dims to ``size``; odd margins lose the extra row/column at the bottom/right."""

    def __init__(self, size: tuple[int, int]):
        super().__init__()
        self.size = tuple(size)

    def forward(self, x):
        h, w = x.shape[-2:]
        th, tw = self.size
        if th > h or tw > w:
            raise ShapeError(f"cannot crop {(h, w)} to {(th, tw)}")
        top = (h - th) // 2
        left = (w - tw) // 2
        return x[..., top:top + th, left:left + tw]

    def extra_repr(self):
        return f"size={self.size}"


class GlobalAvgPool(nn.Module):
    def forward(self, x):
        return x.mean(dim=(2, 3))


class Flatten(nn.Module):
    def forward(self, x):
        return x.reshape(x.shape[0], -1)


def conv2d(c_in, c_out, kernel, stride=1, pad=0) -> nn.Conv2d:
    return nn.Conv2d(c_in, c_out, kernel, stride, pad)


def conv_transpose2d(c_in, c_out, kernel, stride=1, pad=0) -> nn.ConvTranspose2d:
    return nn.ConvTranspose2d(c_in, c_out, kernel, stride, pad)


class BatchNorm2d(nn.BatchNorm2d):
    """Per-channel batch normalisation that refuses single-sample training batches."""

    def forward(self, x):
        if self.training and x.shape[0] < 2:
            raise ValueError("batch normalisation in training mode needs a batch of at least 2")
        return super().forward(x)


def batchnorm2d(c) -> BatchNorm2d:
    return BatchNorm2d(c, eps=BN_EPS, momentum=BN_MOMENTUM)


def leaky_relu() -> nn.LeakyReLU:
    return nn.LeakyReLU(LEAKY_SLOPE)


def maxpool2x2() -> nn.MaxPool2d:
    return nn.MaxPool2d(2)


def linear(n_in, n_out) -> nn.Linear:
    return nn.Linear(n_in, n_out)


class Graph(nn.Module):
    """Feed-forward chain of named layers with build-time shape checking."""

    def __init__(self, layers, input_shape: tuple[int, ...], seed: int = 0, fixed_spatial: bool = True):
        super().__init__()
        self.layers = nn.ModuleDict(OrderedDict(layers))
        self.input_shape = tuple(input_shape)
        self.fixed_spatial = fixed_spatial
        self.shapes = self._trace(self.input_shape)
        init_weights(self, seed)

    def _trace(self, shape):
        # eval mode so running statistics are left untouched
        x = torch.zeros((2,) + tuple(shape))
        shapes = OrderedDict()
        was_training = self.training
        self.eval()
        try:
            with torch.no_grad():
                for name, layer in self.layers.items():
                    before = tuple(x.shape[1:])
                    try:
                        x = layer(x)
                    except (RuntimeError, ShapeError, ValueError) as exc:
                        raise ShapeError(f"layer {name!r} ({layer}) cannot take input of shape "
                                         f"{before}: {exc}") from None
                    shapes[name] = tuple(x.shape[1:])
        finally:
            self.train(was_training)
        return shapes

    @property
    def output_shape(self) -> tuple[int, ...]:
        return next(reversed(self.shapes.values())) if self.shapes else self.input_shape

    def forward(self, x):
        n_check = len(self.input_shape) if self.fixed_spatial else 1
        if x.dim() != len(self.input_shape) + 1 or tuple(x.shape[1:1 + n_check]) != self.input_shape[:n_check]:
            raise ShapeError(f"expected input (n, {', '.join(map(str, self.input_shape))}), got {tuple(x.shape)}")
        for layer in self.layers.values():
            x = layer(x)
        return x


def init_weights(module: nn.Module, seed: int) -> None:
    """Kaiming-uniform (fan-in, leaky slope 0.2) weights, zero biases, unit BN scale."""
    gen = torch.Generator().manual_seed(int(seed))
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            with torch.no_grad():
                if isinstance(m, nn.ConvTranspose2d):
                    # weight is (c_in, c_out, kh, kw); fan-in is c_out*kh*kw from the output's view
                    fan_in = m.weight.shape[0] * m.weight.shape[2] * m.weight.shape[3]
                    gain = nn.init.calculate_gain("leaky_relu", LEAKY_SLOPE)
                    bound = gain * np.sqrt(3.0 / fan_in)
                    m.weight.uniform_(-bound, bound, generator=gen)
                else:
                    nn.init.kaiming_uniform_(m.weight, a=LEAKY_SLOPE, nonlinearity="leaky_relu", generator=gen)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def make_adam(params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=lr, betas=betas, eps=eps)


def adam_step(opt: torch.optim.Optimizer, lr: float | None = None) -> None:
    """Apply one bias-corrected Adam update, then zero the gradients."""
    if lr is not None:
        set_lr(opt, lr)
    opt.step()
    opt.zero_grad(set_to_none=False)


def set_lr(opt: torch.optim.Optimizer, lr: float) -> None:
    for group in opt.param_groups:
        group["lr"] = lr


def fd_gradient_check(fn, inputs: list[torch.Tensor], eps: float = 1e-3, n_probe: int | None = None,
                      seed: int = 0) -> float:
    """Largest relative error between autograd and central differences.

    ``fn`` maps the list of float64 ``inputs`` to a scalar. Each probed
    coordinate is perturbed by ``eps``; ``n_probe`` limits how many
    coordinates per input are probed (all by default).
    """
    inputs = [x.detach().double().requires_grad_(True) for x in inputs]
    out = fn(inputs)
    grads = torch.autograd.grad(out, inputs, allow_unused=True)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for x, g in zip(inputs, grads):
        g = torch.zeros_like(x) if g is None else g
        flat = x.detach().view(-1)
        idx = np.arange(flat.numel())
        if n_probe is not None and n_probe < flat.numel():
            idx = rng.choice(flat.numel(), n_probe, replace=False)
        num = np.empty(len(idx))
        with torch.no_grad():
            for k, i in enumerate(idx):
                orig = flat[i].item()
                flat[i] = orig + eps
                plus = fn(inputs).item()
                flat[i] = orig - eps
                minus = fn(inputs).item()
                flat[i] = orig
                num[k] = (plus - minus) / (2 * eps)
        ana = g.detach().view(-1)[idx].numpy()
        scale = max(np.linalg.norm(num), np.linalg.norm(ana), 1e-12)
        worst = max(worst, float(np.linalg.norm(num - ana) / scale))
    return worst


def layer_gradient_check(layer: nn.Module, input_shape, eps: float = 1e-3, seed: int = 0,
                         n_probe: int | None = None) -> float:
    """Check input and parameter gradients of one layer on a float64 copy.

    The scalar probed is ``sum(layer(x) * r)`` for a fixed random ``r``.
    """
    import copy

    shadow = copy.deepcopy(layer).double()
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(tuple(input_shape), generator=gen, dtype=torch.float64)
    # keep inputs clear of the kink at zero so piecewise-linear layers are differentiable at every probe
    x = x + torch.sign(x) * 10 * eps
    names = [n for n, _ in shadow.named_parameters()]
    params = [p.detach().clone() for _, p in shadow.named_parameters()]
    with torch.no_grad():
        r = torch.randn(shadow(x).shape, generator=gen, dtype=torch.float64)

    def fn(tensors):
        xin, *ps = tensors
        out = torch.func.functional_call(shadow, dict(zip(names, ps)), (xin,))
        return (out * r).sum()

    return fd_gradient_check(fn, [x] + params, eps, n_probe, seed)


def save_checkpoint(path, modules: dict[str, nn.Module], optimizers: dict[str, torch.optim.Optimizer] | None = None,
                    meta: dict | None = None) -> None:
    """Write named module states and Adam moments in the ``NNC1`` format."""
    entries = []
    for prefix, mod in modules.items():
        for name, t in mod.state_dict().items():
            entries.append((f"{prefix}.{name}", t))
    for prefix, opt in (optimizers or {}).items():
        state = opt.state_dict()
        for pid, st in sorted(state["state"].items()):
            for key in ("step", "exp_avg", "exp_avg_sq"):
                if key in st:
                    entries.append((f"adam.{prefix}.{pid}.{key}", torch.as_tensor(st[key])))
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(meta_bytes)))
        f.write(meta_bytes)
        f.write(struct.pack("<I", len(entries)))
        for name, t in entries:
            arr = t.detach().cpu().numpy().astype("<f4")
            nb = name.encode()
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def read_checkpoint(path) -> tuple[dict, "OrderedDict[str, np.ndarray]"]:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not an NNC1 checkpoint")
    off = 4
    (mlen,) = struct.unpack_from("<I", raw, off); off += 4
    meta = json.loads(raw[off:off + mlen]); off += mlen
    (n,) = struct.unpack_from("<I", raw, off); off += 4
    entries = OrderedDict()
    for _ in range(n):
        (nl,) = struct.unpack_from("<H", raw, off); off += 2
        name = raw[off:off + nl].decode(); off += nl
        (nd,) = struct.unpack_from("<B", raw, off); off += 1
        shape = struct.unpack_from(f"<{nd}I", raw, off); off += 4 * nd
        count = int(np.prod(shape)) if nd else 1
        entries[name] = np.frombuffer(raw, "<f4", count, off).reshape(shape).copy(); off += 4 * count
    return meta, entries


def load_into(module: nn.Module, prefix: str, entries) -> None:
    state = module.state_dict()
    new = {}
    for name, ref in state.items():
        key = f"{prefix}.{name}"
        if key not in entries:
            raise KeyError(f"checkpoint lacks {key}")
        arr = entries[key]
        if tuple(arr.shape) != tuple(ref.shape):
            raise ShapeError(f"{key}: checkpoint shape {arr.shape} != model shape {tuple(ref.shape)}")
        new[name] = torch.as_tensor(arr).to(ref.dtype)
    module.load_state_dict(new)


def load_adam(opt: torch.optim.Optimizer, prefix: str, entries) -> None:
    state = opt.state_dict()
    params = [p for g in state["param_groups"] for p in g["params"]]
    restored = {}
    for pid in params:
        base = f"adam.{prefix}.{pid}"
        if f"{base}.exp_avg" not in entries:
            continue
        restored[pid] = {
            "step": torch.tensor(float(entries[f"{base}.step"])),
            "exp_avg": torch.as_tensor(entries[f"{base}.exp_avg"]),
            "exp_avg_sq": torch.as_tensor(entries[f"{base}.exp_avg_sq"]),
        }
    state["state"] = restored
    opt.load_state_dict(state)
