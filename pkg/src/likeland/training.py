"""Training with four defense modes and the Jacobian-norm machinery behind them.

Defense modes: ``none``, ``adversarial_training`` (train on PGD examples),
``jacobian_reg`` (penalize the squared Frobenius norm of the input-output
Jacobian) and ``ams_reg`` (penalize the probability-weighted Jacobian
``diag(p) J``, whose squared norm times the class count bounds the squared
likelihood-gradient norm).

Squared Frobenius norms are estimated by random projection: for ``v`` drawn
uniformly from the unit sphere in R^C, ``E ||v^T M||^2 = ||M||_F^2 / C``, so
``C / n_proj * sum_mu ||d(v_mu . z)/dx||^2`` is unbiased. Each projection
costs one backward pass, recorded with ``create_graph`` so the penalty stays
differentiable in the parameters. The strength is called ``lam`` everywhere.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .attacks import AttackConfig, clean_accuracy, pgd
from .errors import ConfigError, NumericError, TrainingDivergence
from .likelihood import _as_batch, cross_entropy, input_jacobian, likelihood_gradient
from .models import Model, forward_logits
from .tensor import Tensor

__all__ = [
    "DefenseConfig", "TrainConfig", "ProjectionEstimate", "NormBoundResult", "SGD",
    "cross_entropy", "jacobian_frob_estimate", "ams_frob_estimate", "weighted_jacobian_sq_norm",
    "verify_norm_bound", "joint_loss", "adversarial_train_step", "train_step", "train",
]

logger = logging.getLogger(__name__)

MODES = ("none", "adversarial_training", "jacobian_reg", "ams_reg")


@dataclass(frozen=True)
class DefenseConfig:
    mode: str = "none"
    lam: float = 0.0
    n_proj: int = 1
    attack: AttackConfig | None = None
    mix_clean: bool = False
    detach_probs: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown defense mode {self.mode!r}; expected one of {MODES}")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if self.n_proj < 1:
            raise ConfigError("n_proj must be >= 1")
        if self.mode == "adversarial_training" and self.attack is None:
            object.__setattr__(self, "attack", AttackConfig("pgd", 8 / 255, 2 / 255, 10))

    @property
    def is_regularizer(self) -> bool:
        return self.mode in ("jacobian_reg", "ams_reg")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["attack"] = self.attack.to_dict() if self.attack else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DefenseConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        if isinstance(d.get("attack"), dict):
            d["attack"] = AttackConfig.from_dict(d["attack"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad defense config: {exc}") from exc


@dataclass(frozen=True)
class TrainConfig:
    """SGD-with-momentum schedule.

    ``lr_decay_epochs=None`` places the decays at 1/2 and 3/4 of the run
    (100 and 150 of 200 in the full protocol). The learning rate used in
    epoch ``e`` (1-based) is multiplied by ``decay_factor`` once for every
    decay epoch strictly below ``e``.
    """

    epochs: int = 60
    batch_size: int = 32
    learning_rate: float = 0.01
    momentum: float = 0.9
    lr_decay_epochs: tuple | None = None
    decay_factor: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if not self.learning_rate > 0 or not 0 <= self.momentum < 1:
            raise ConfigError("need learning_rate > 0 and 0 <= momentum < 1")
        if self.lr_decay_epochs is None:
            decays = sorted({e for e in (self.epochs // 2, (3 * self.epochs) // 4) if 1 <= e <= self.epochs})
        else:
            decays = [int(e) for e in self.lr_decay_epochs]
            if any(b <= a for a, b in zip(decays, decays[1:])):
                raise ConfigError("lr_decay_epochs must be strictly increasing")
            if decays and (decays[0] < 1 or decays[-1] > self.epochs):
                raise ConfigError("lr_decay_epochs must lie within [1, epochs]")
        object.__setattr__(self, "lr_decay_epochs", tuple(decays))

    def lr_at(self, epoch: int) -> float:
        n = sum(1 for d in self.lr_decay_epochs if epoch > d)
        return self.learning_rate * self.decay_factor ** n

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_decay_epochs"] = list(self.lr_decay_epochs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if d.get("lr_decay_epochs") is not None:
            d["lr_decay_epochs"] = tuple(d["lr_decay_epochs"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad train config: {exc}") from exc


@dataclass(frozen=True)
class ProjectionEstimate:
    value: float
    n_proj: int
    kind: str


@dataclass(frozen=True)
class NormBoundResult:
    lhs: float
    rhs: float
    holds: bool


# -- projection estimators ------------------------------------------------------

def unit_sphere(rng, shape) -> np.ndarray:
    v = rng.standard_normal(shape)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def projected_sq_norms(model, x, vectors, weighted: bool, create_graph: bool = False,
                       detach_probs: bool = False, logits_out: list | None = None) -> Tensor:
    """Per-sample ``C / n_proj * sum_mu ||v_mu^T W J||^2`` as a (B,) tensor.

    ``vectors`` is (n_proj, B, C); ``W`` is the identity, or ``diag(p)`` when
    ``weighted``. All projections share one backward pass by stacking
    ``n_proj`` copies of the batch.
    """
    vectors = np.asarray(vectors)
    n_proj, b, c = vectors.shape
    batch = np.concatenate([x] * n_proj) if n_proj > 1 else x
    xt = Tensor(batch, requires_grad=True, dtype=np.result_type(model.dtype, T.get_dtype()))
    z = forward_logits(model, xt)
    if logits_out is not None:
        logits_out.append(z)
    v = Tensor(vectors.reshape(n_proj * b, c), dtype=z.dtype)
    if weighted:
        p = T.softmax(z, axis=1)
        if detach_probs:
            p = p.detach()
        v = v * p
    gx = T.grad(z, xt, grad_outputs=v, create_graph=create_graph)[0]
    sq = (gx * gx).reshape(n_proj, b, -1).sum(axis=(0, 2))
    return sq * (c / n_proj)


def _estimate(model, x, n_proj, seed, weighted, basis):
    batch, _ = _as_batch(model, x)
    c = model.num_classes
    if n_proj < 1:
        raise ConfigError("n_proj must be >= 1")
    if basis:
        vectors = np.broadcast_to(np.eye(c)[:, None, :], (c, len(batch), c))
        n_proj = c
    else:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        vectors = unit_sphere(rng, (n_proj, len(batch), c))
    sq = projected_sq_norms(model, batch, vectors, weighted)
    kind = "weighted_jacobian" if weighted else "plain_jacobian"
    return ProjectionEstimate(float(np.mean(sq.data)), n_proj, kind)


def jacobian_frob_estimate(model, x, n_proj: int = 1, seed=0, basis: bool = False) -> ProjectionEstimate:
    """Random-projection estimate of ||J(x)||_F^2 (batch mean for a batch).

    ``basis=True`` projects on every standard basis vector instead, which
    recovers the exact value.
    """
    return _estimate(model, x, n_proj, seed, weighted=False, basis=basis)


def ams_frob_estimate(model, x, n_proj: int = 1, seed=0, basis: bool = False) -> ProjectionEstimate:
    """Random-projection estimate of ||diag(p(.|x)) J(x)||_F^2."""
    return _estimate(model, x, n_proj, seed, weighted=True, basis=basis)


def weighted_jacobian_sq_norm(model, x) -> float:
    """Exact ||diag(p) J||_F^2 from K backward passes."""
    jac, p = input_jacobian(model, x)
    jw = p[..., None] * jac.reshape(jac.shape[0], jac.shape[1], -1)
    return float(np.sum(jw[0] ** 2)) if jw.shape[0] == 1 else float(np.mean(np.sum(jw ** 2, axis=(1, 2))))


def verify_norm_bound(model, x, rel_slack: float = 1e-9, _flip: bool = False) -> NormBoundResult:
    """Check ||d log p / dx||^2 <= C ||diag(p) J||^2 with exact Jacobians."""
    batch, single = _as_batch(model, x)
    if not single:
        raise ConfigError("verify_norm_bound takes one sample")
    grad = likelihood_gradient(model, batch[0])
    jac, p = input_jacobian(model, batch)
    k = jac.shape[1]
    rows = [p[0, c] * jac[0, c] for c in range(k)]
    lhs = float(np.sum(grad ** 2))
    rhs = float(k * sum(float(np.sum(r ** 2)) for r in rows))
    holds = lhs <= rhs + rel_slack * abs(rhs)
    if _flip:
        holds = lhs > rhs + rel_slack * abs(rhs)
    return NormBoundResult(lhs, rhs, holds)


# -- losses and steps ------------------------------------------------------------

def joint_loss(model, x, y, defense: DefenseConfig, rng=None, vectors=None) -> Tensor:
    """Summed cross-entropy plus ``lam / 2`` times the batch-mean penalty.

    ``vectors`` fixes the projection directions, shaped (n_proj, B, C);
    otherwise fresh ones are drawn from ``rng``.
    """
    batch, _ = _as_batch(model, x)
    y = np.asarray(y)
    if not defense.is_regularizer or defense.lam == 0:
        z = forward_logits(model, Tensor(batch, dtype=np.result_type(model.dtype, T.get_dtype())))
        return cross_entropy(z, y, reduction="sum")
    if vectors is None:
        rng = rng if rng is not None else np.random.default_rng()
        vectors = unit_sphere(rng, (defense.n_proj, len(batch), model.num_classes))
    logits: list = []
    sq = projected_sq_norms(
        model, batch, vectors, weighted=defense.mode == "ams_reg", create_graph=True,
        detach_probs=defense.detach_probs, logits_out=logits,
    )
    z = logits[0][: len(batch)]
    return cross_entropy(z, y, reduction="sum") + sq.mean() * (defense.lam / 2.0)


class SGD:
    """Heavy-ball momentum: ``v <- rho v + g``, ``theta <- theta - lr v``."""

    def __init__(self, params, lr: float, momentum: float = 0.9):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        for p, v in zip(self.params, self._velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad.data.astype(v.dtype)
            p.data -= self.lr * v


def _apply(loss: Tensor, optimizer: SGD | None) -> float:
    value = loss.item()
    if not np.isfinite(value):
        raise NumericError("non-finite loss")
    if optimizer is not None:
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
    return value


def adversarial_train_step(model, x, y, attack_cfg: AttackConfig, mix_clean: bool = False,
                           optimizer: SGD | None = None, rng=None) -> float:
    """One cross-entropy step on PGD examples crafted against the current parameters.

    With ``mix_clean`` the loss is the even average of the clean and the
    adversarial summed cross-entropies.
    """
    batch, _ = _as_batch(model, x)
    y = np.asarray(y)
    x_adv = pgd(model, batch, y, attack_cfg, rng) if attack_cfg.eps > 0 else batch
    dtype = np.result_type(model.dtype, T.get_dtype())
    loss = cross_entropy(forward_logits(model, Tensor(x_adv, dtype=dtype)), y, reduction="sum")
    if mix_clean:
        clean = cross_entropy(forward_logits(model, Tensor(batch, dtype=dtype)), y, reduction="sum")
        loss = (loss + clean) * 0.5
    return _apply(loss, optimizer)


def train_step(model, x, y, defense: DefenseConfig, optimizer: SGD | None = None, rng=None) -> float:
    if defense.mode == "adversarial_training":
        return adversarial_train_step(model, x, y, defense.attack, defense.mix_clean, optimizer, rng)
    return _apply(joint_loss(model, x, y, defense, rng), optimizer)


def train(model: Model, dataset, train_cfg: TrainConfig, defense_cfg: DefenseConfig | None = None,
          probe=None, flatness_kwargs: dict | None = None, on_epoch=None) -> tuple[Model, list]:
    """Train a copy of ``model``; returns it with one metrics record per epoch.

    A record holds ``epoch``, mean per-batch ``loss``, training ``clean_acc``,
    the ``lr`` used, and ``phi`` (mean phi on ``probe``) when a probe set is given.
    """
    from .flatness import dataset_flatness

    defense_cfg = defense_cfg or DefenseConfig()
    model = model.copy()
    rng = np.random.default_rng(train_cfg.seed)
    opt = SGD(model.parameters(), train_cfg.learning_rate, train_cfg.momentum)
    n = len(dataset)
    log = []
    for epoch in range(1, train_cfg.epochs + 1):
        opt.lr = train_cfg.lr_at(epoch)
        order = rng.permutation(n)
        losses = []
        for i in range(0, n, train_cfg.batch_size):
            idx = order[i:i + train_cfg.batch_size]
            try:
                # overflow surfaces as NumericError from the op that produced it
                with np.errstate(over="ignore", invalid="ignore"):
                    losses.append(train_step(model, dataset.inputs[idx], dataset.labels[idx], defense_cfg, opt, rng))
            except NumericError as exc:
                raise TrainingDivergence(epoch, f"training diverged at epoch {epoch}: {exc}") from exc
        if not all(np.all(np.isfinite(p.data)) for p in model.parameters()):
            raise TrainingDivergence(epoch)
        record = {
            "epoch": epoch,
            "loss": float(np.mean(losses)),
            "clean_acc": clean_accuracy(model, dataset),
            "lr": opt.lr,
        }
        if probe is not None:
            record["phi"] = dataset_flatness(model, probe, **(flatness_kwargs or {})).Phi
        logger.debug("epoch %d: %s", epoch, record)
        log.append(record)
        if on_epoch is not None:
            on_epoch(record)
    return model, log
