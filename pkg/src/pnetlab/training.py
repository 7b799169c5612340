"""Mini-batch SGD for the float networks, with input-noise variants.

Three noise modes share one loop:

* ``none``  -- plain training.
* ``fixed`` -- Gaussian augmentation with a constant input sigma (the model
  behind the RND-GF baseline).
* ``dnt``   -- dynamic noise training: each epoch draws its own sigma
  uniformly from ``[0, sigma_max]``, every batch gets fresh per-element
  noise at that sigma.

Data order and noise come from two separate child streams of ``cfg.seed``.
That keeps ``dnt`` with ``sigma_max = 0`` bit-identical to plain training.
"""
from __future__ import annotations

import configparser
import csv
import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ParameterError, TrainingError
from .nets import FloatModel, Layer, cross_entropy
from .numerics import child_seeds, make_rng

log = logging.getLogger(__name__)

NOISE_MODES = ("none", "fixed", "dnt")


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 0.01
    momentum: float = 0.9
    lr_decay: float = 1.0  # multiply lr by this every lr_step epochs
    lr_step: int = 1
    seed: int = 0
    noise_mode: str = "none"
    sigma: float = 0.0  # input sigma for "fixed", sigma_max for "dnt"
    dataset: str = "mnist"
    arch: str = "mnist"
    n_train: int | None = None  # optional prefix of the training set
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.noise_mode not in NOISE_MODES:
            raise ConfigError(f"noise_mode must be one of {NOISE_MODES}, got {self.noise_mode!r}")
        if self.sigma < 0:
            raise ParameterError(f"sigma must be >= 0, got {self.sigma}")


_INT_KEYS = {"epochs", "batch_size", "lr_step", "seed", "n_train"}
_FLOAT_KEYS = {"learning_rate", "momentum", "lr_decay", "sigma"}


def load_train_config(path) -> TrainConfig:
    """Read a ``[train]`` section of ``key = value`` lines.

    Keys: epochs, batch_size, learning_rate, momentum, lr_decay, lr_step,
    seed, noise_mode (none|fixed|dnt), sigma, dataset, arch, n_train.
    Unknown keys (e.g. ``bits``, ``output``) are kept in ``extra``.
    """
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise ConfigError(f"cannot read training config {path}")
    if "train" not in cp:
        raise ConfigError(f"{path}: missing [train] section")
    kwargs, extra = {}, {}
    for key, raw in cp["train"].items():
        try:
            if key in _INT_KEYS:
                kwargs[key] = int(raw)
            elif key in _FLOAT_KEYS:
                kwargs[key] = float(raw)
            elif key in ("noise_mode", "dataset", "arch"):
                kwargs[key] = raw.strip()
            else:
                extra[key] = raw.strip()
        except ValueError as e:
            raise ConfigError(f"{path}: bad value for {key}: {raw!r}") from e
    return TrainConfig(**kwargs, extra=extra)


def _fit(model: FloatModel, x, y, cfg: TrainConfig, sigma_for_epoch):
    model = model.copy()
    order_seed, noise_seed = child_seeds(cfg.seed, 2, 0x7EA1)
    order_rng, noise_rng = make_rng(order_seed), make_rng(noise_seed)
    layers = model.param_layers()
    velocity = [{k: np.zeros_like(v) for k, v in layer.params().items()} for layer in layers]
    n = len(x)
    history = []
    lr = cfg.learning_rate
    for epoch in range(cfg.epochs):
        if epoch and epoch % cfg.lr_step == 0:
            lr *= cfg.lr_decay
        sigma = sigma_for_epoch(noise_rng)
        perm = order_rng.permutation(n)
        total_loss, correct = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            xb = x[idx]
            if sigma > 0:
                xb = xb + sigma * noise_rng.standard_normal(xb.shape)
            logits = model.forward(xb)
            loss, g = cross_entropy(logits, y[idx])
            if not np.isfinite(loss):
                raise TrainingError("loss is not finite", epoch)
            total_loss += loss * len(idx)
            correct += int((logits.argmax(axis=1) == y[idx]).sum())
            model.backward(g)
            if lr == 0:
                continue
            for layer, vel in zip(layers, velocity):
                for name, p in layer.params().items():
                    v = vel[name]
                    v *= cfg.momentum
                    v -= lr * layer.grads[name]
                    p += v
        row = {"epoch": epoch + 1, "loss": total_loss / n, "train_acc": correct / n, "sigma": sigma, "lr": lr}
        history.append(row)
        log.info("epoch %d loss %.4f acc %.4f sigma %.4f", row["epoch"], row["loss"], row["train_acc"], sigma)
    return model, history


def train(model: FloatModel, x, y, cfg: TrainConfig):
    """Train a copy of ``model``; returns ``(trained_model, history)``."""
    if cfg.noise_mode == "dnt":
        return train_dnt(model, x, y, cfg)
    sigma = cfg.sigma if cfg.noise_mode == "fixed" else 0.0
    return _fit(model, np.asarray(x, dtype=np.float64), np.asarray(y), cfg, lambda rng: sigma)


def train_dnt(model: FloatModel, x, y, cfg: TrainConfig):
    """Dynamic noise training; ``cfg.sigma`` is sigma_max."""
    sigma_max = cfg.sigma
    if sigma_max < 0:
        raise ParameterError(f"sigma_max must be >= 0, got {sigma_max}")

    def draw(rng):
        return float(rng.uniform(0.0, sigma_max)) if sigma_max > 0 else 0.0

    return _fit(model, np.asarray(x, dtype=np.float64), np.asarray(y), cfg, draw)


def write_history_csv(path, history) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "loss", "train_acc", "sigma", "lr"])
        w.writeheader()
        for row in history:
            w.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in row.items()})


def _rel_err(a, b):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def grad_check(target, x, y=None, step=1e-5, max_entries=200, seed=0) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``target`` is a :class:`FloatModel` (loss = softmax cross-entropy against
    ``y``) or a single layer (loss = <r, layer(x)> for a fixed random r).
    Checks every parameter tensor and the input gradient, sampling at most
    ``max_entries`` coordinates of each.
    """
    rng = make_rng(seed)
    x = np.array(x, dtype=np.float64)

    if isinstance(target, FloatModel):
        def loss_fn(inp):
            return cross_entropy(target.forward(inp), y)[0]

        def analytic(inp):
            _, g = cross_entropy(target.forward(inp), y)
            return target.backward(g)

        layers = target.param_layers()
    elif isinstance(target, Layer):
        r = rng.standard_normal(target.forward(x).shape)

        def loss_fn(inp):
            return float((r * target.forward(inp)).sum())

        def analytic(inp):
            target.forward(inp)
            return target.backward(r)

        layers = [target] if target.params() else []
    else:
        raise TypeError(f"cannot grad-check {type(target).__name__}")

    dx = analytic(x)
    grads = [{k: v.copy() for k, v in layer.grads.items()} for layer in layers]
    worst = 0.0

    def check(arr, analytic_grad, evaluate):
        nonlocal worst
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        ag = analytic_grad.reshape(-1)
        for i in idx:
            old = flat[i]
            flat[i] = old + step
            up = evaluate()
            flat[i] = old - step
            down = evaluate()
            flat[i] = old
            num = (up - down) / (2 * step)
            worst = max(worst, float(_rel_err(ag[i], num)))

    for layer, g in zip(layers, grads):
        for name, p in layer.params().items():
            check(p, g[name], lambda: loss_fn(x))
    check(x, dx, lambda: loss_fn(x))
    return worst


def config_dict(cfg: TrainConfig) -> dict:
    return dataclasses.asdict(cfg)
