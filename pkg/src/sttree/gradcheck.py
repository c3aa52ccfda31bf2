"""Central finite-difference check of every trainable scalar of a model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import EncoderConfig
from .model import ModelConfig, STTreeModel
from .tensor import Tensor
from .trainer import cross_entropy

# denominators below this are treated as this, so FD round-off on
# near-zero gradients does not register as relative error
REL_FLOOR = 1e-6


@dataclass
class GradReport:
    max_rel_err: float
    worst: str
    per_tensor: dict[str, float]
    checked: int

    def ok(self, tol: float = 1e-4) -> bool:
        return self.max_rel_err < tol


def rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float = REL_FLOOR) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def check_gradients(loss_fn, params: dict[str, Tensor], h: float = 1e-5,
                    max_per_tensor: int | None = None, seed: int = 0) -> GradReport:
    """Compare tape gradients with (f(p+h) - f(p-h)) / 2h, entry by entry.

    ``loss_fn()`` must rebuild the loss from the current parameter values.
    With ``max_per_tensor`` only a seeded random subset of each tensor's
    entries is probed.
    """
    for p in params.values():
        p.grad = None
    T.backward(loss_fn())
    rng = np.random.default_rng(seed)
    per = {}
    worst_name, worst = "", 0.0
    checked = 0
    for name, p in params.items():
        g = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_per_tensor is not None and flat.size > max_per_tensor:
            idx = np.sort(rng.choice(flat.size, max_per_tensor, replace=False))
        num = np.empty(len(idx))
        with T.no_grad():
            for n, j in enumerate(idx):
                old = flat[j]
                flat[j] = old + h
                fp = float(loss_fn().data)
                flat[j] = old - h
                fm = float(loss_fn().data)
                flat[j] = old
                num[n] = (fp - fm) / (2 * h)
        err = float(rel_err(g.reshape(-1)[idx], num).max())
        per[name] = err
        checked += len(idx)
        if err >= worst:
            worst, worst_name = err, name
        p.grad = None
    return GradReport(worst, worst_name, per, checked)


def tiny_model(num_channels=2, length=16, embed_dim=8, depth=2, proto_size=2, num_classes=3,
               batch=2, seed=0, use_attention=True, mlp_hidden=16, window_size=2):
    """A small model plus a random batch for gradient checking."""
    cfg = ModelConfig(
        EncoderConfig(num_channels=num_channels, num_classes=num_classes, embed_dim=embed_dim,
                      mlp_hidden=mlp_hidden, window_size=window_size, use_attention=use_attention),
        depth=depth, proto_size=proto_size, seed=seed,
    )
    model = STTreeModel(cfg)
    rng = np.random.default_rng(seed + 1000)
    x = rng.normal(size=(batch, num_channels, length))
    y = rng.integers(0, num_classes, size=batch)
    return model, x, y


def check_model(model: STTreeModel, x: np.ndarray, y: np.ndarray, h: float = 1e-5,
                max_per_tensor: int | None = None) -> GradReport:
    xt = Tensor(x)
    return check_gradients(lambda: cross_entropy(model(xt).y_hat, y),
                           dict(model.named_parameters()), h, max_per_tensor)
