"""l-inf gradient-sign attacks (FGSM, PGD) and robust accuracy."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, InputError
from .likelihood import _as_batch, _input_dtype, cross_entropy
from .models import forward_logits
from .tensor import Tensor


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "pgd"
    eps: float = 8 / 255
    step_size: float = 2 / 255
    iters: int = 5
    random_start: bool = False

    def __post_init__(self):
        if self.kind not in ("fgsm", "pgd"):
            raise ConfigError(f"unknown attack kind {self.kind!r}")
        if self.eps < 0:
            raise ConfigError("attack eps must be >= 0")
        if self.kind == "pgd" and (self.iters < 1 or not self.step_size > 0):
            raise ConfigError("pgd needs iters >= 1 and step_size > 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad attack config: {exc}") from exc


PRESETS = {
    "pgd-cifar": AttackConfig("pgd", 8 / 255, 2 / 255, 5),
    "pgd-fmnist": AttackConfig("pgd", 25 / 255, 6.25 / 255, 10),
    "fgsm": AttackConfig("fgsm", 8 / 255, 8 / 255, 1),
}


def preset(name: str, eps: float | None = None) -> AttackConfig:
    """Named attack; ``eps`` overrides the budget (the fgsm preset's step follows it)."""
    try:
        cfg = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown attack preset {name!r}; expected one of {sorted(PRESETS)}") from None
    if eps is not None:
        step = eps if cfg.kind == "fgsm" else cfg.step_size
        cfg = AttackConfig(cfg.kind, float(eps), step, cfg.iters, cfg.random_start)
    return cfg


def loss_input_gradient(model, x, y) -> np.ndarray:
    """Gradient of the summed cross-entropy with respect to the inputs."""
    batch, _ = _as_batch(model, x)
    xt = Tensor(batch, requires_grad=True, dtype=_input_dtype(model))
    loss = cross_entropy(forward_logits(model, xt), y, reduction="sum")
    return T.grad(loss, xt)[0].data


def project(x_adv: np.ndarray, x: np.ndarray, eps: float) -> np.ndarray:
    """Clip into the eps-ball around ``x`` and then into [0, 1]."""
    eps = x.dtype.type(eps)
    out = np.clip(x_adv, x - eps, x + eps)
    out = np.clip(out, 0.0, 1.0)
    # x + eps can round up; step such entries back toward x until within budget
    over = np.abs(out - x) > eps
    while over.any():
        out[over] = np.nextafter(out[over], x[over])
        over = np.abs(out - x) > eps
    return out


def _sign_step(model, x0, xt, y, step, eps):
    g = loss_input_gradient(model, xt, y)
    return project(xt + x0.dtype.type(step) * np.sign(g).astype(x0.dtype), x0, eps)


def fgsm(model, x, y, eps: float) -> np.ndarray:
    """x + eps * sign(grad CE), projected; sign(0) = 0 leaves such pixels untouched."""
    batch, single = _as_batch(model, x)
    y = np.atleast_1d(np.asarray(y))
    out = _sign_step(model, batch, batch, y, eps, eps)
    return out[0] if single else out


def pgd(model, x, y, config: AttackConfig, seed=None) -> np.ndarray:
    """Iterated signed-gradient ascent projected onto the eps-ball and [0, 1]."""
    if config.kind != "pgd":
        raise ConfigError("pgd() needs a config with kind='pgd'")
    batch, single = _as_batch(model, x)
    y = np.atleast_1d(np.asarray(y))
    xt = batch
    if config.random_start and config.eps > 0:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        xt = project(batch + rng.uniform(-config.eps, config.eps, size=batch.shape).astype(batch.dtype), batch, config.eps)
    for _ in range(config.iters):
        xt = _sign_step(model, batch, xt, y, config.step_size, config.eps)
    return xt[0] if single else xt


def attack(model, x, y, config: AttackConfig, seed=None) -> np.ndarray:
    if config.kind == "fgsm":
        return fgsm(model, x, y, config.eps)
    return pgd(model, x, y, config, seed)


def predict(model, x, batch_size: int = 512) -> np.ndarray:
    batch, _ = _as_batch(model, x)
    out = []
    with T.no_grad():
        for i in range(0, len(batch), batch_size):
            z = forward_logits(model, Tensor(batch[i:i + batch_size], dtype=_input_dtype(model)))
            out.append(z.data.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.intp)


def clean_accuracy(model, dataset) -> float:
    if len(dataset) == 0:
        raise InputError("accuracy needs a nonempty dataset")
    return float(np.mean(predict(model, dataset.inputs) == dataset.labels))


def adversarial_accuracy(model, dataset, config: AttackConfig | None, seed=0, batch_size: int = 256) -> float:
    """Fraction of samples still classified correctly after the attack."""
    if len(dataset) == 0:
        raise InputError("accuracy needs a nonempty dataset")
    if config is None or config.eps == 0:
        return clean_accuracy(model, dataset)
    rng = np.random.default_rng(seed)
    correct = 0
    for i in range(0, len(dataset), batch_size):
        x, y = dataset.inputs[i:i + batch_size], dataset.labels[i:i + batch_size]
        x_adv = attack(model, x, y, config, rng)
        correct += int(np.sum(predict(model, x_adv) == y))
    return correct / len(dataset)
