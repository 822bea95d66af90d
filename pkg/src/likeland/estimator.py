"""scikit-learn style front end.

``LikelihoodLandscapeClassifier`` trains one of the package models under a
chosen defense and exposes the energy-based reading of it: ``score_samples``
returns the unnormalized log-likelihood of each row and ``flatness`` the
per-sample phi. Inputs are 2-D arrays with features in [0, 1]; pass
``input_shape`` to feed image rows to the convolutional preset.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import tensor as T
from .attacks import AttackConfig, adversarial_accuracy, predict
from .data import Dataset
from .flatness import dataset_flatness
from .landscape import GridSpec
from .likelihood import log_likelihoods
from .models import ArchitectureConfig, build, forward_logits
from .training import DefenseConfig, TrainConfig, train


class LikelihoodLandscapeClassifier(ClassifierMixin, BaseEstimator):
    def __init__(self, architecture="mlp", hidden=(32,), input_shape=None, defense="none", lam=0.0,
                 n_proj=1, attack_eps=8 / 255, attack_step=2 / 255, attack_iters=10, mix_clean=False,
                 epochs=40, batch_size=32, learning_rate=5e-4, momentum=0.9, seed=0, precision="high"):
        self.architecture = architecture
        self.hidden = hidden
        self.input_shape = input_shape
        self.defense = defense
        self.lam = lam
        self.n_proj = n_proj
        self.attack_eps = attack_eps
        self.attack_step = attack_step
        self.attack_iters = attack_iters
        self.mix_clean = mix_clean
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.seed = seed
        self.precision = precision

    def _check_inputs(self, X, reset=False):
        X = check_array(X, dtype=np.float64)
        if X.size and (X.min() < 0.0 or X.max() > 1.0):
            raise ValueError("features must lie in [0, 1]")
        if reset:
            self.n_features_in_ = X.shape[1]
        elif X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        shape = tuple(self.input_shape) if self.input_shape is not None else (X.shape[1],)
        if int(np.prod(shape)) != X.shape[1]:
            raise ValueError(f"input_shape {shape} does not hold {X.shape[1]} features")
        return X.reshape((len(X),) + shape)

    def _arch(self, n_features, k):
        if self.architecture == "mlp":
            return ArchitectureConfig("mlp", (n_features, *self.hidden, k))
        if self.architecture == "lenet-small":
            if self.input_shape is None:
                raise ValueError("lenet-small needs input_shape=(C, H, W)")
            hidden = self.hidden[0] if self.hidden else 64
            return ArchitectureConfig("lenet-small", input_shape=tuple(self.input_shape), num_classes=k, hidden=hidden)
        raise ValueError(f"unknown architecture {self.architecture!r}")

    def _defense(self):
        attack = AttackConfig("pgd", self.attack_eps, self.attack_step, self.attack_iters)
        if self.defense == "adversarial_training":
            return DefenseConfig(self.defense, attack=attack, mix_clean=self.mix_clean)
        return DefenseConfig(self.defense, lam=self.lam, n_proj=self.n_proj)

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        check_classification_targets(y)
        self.classes_, codes = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        inputs = self._check_inputs(X, reset=True)
        defense = self._defense()
        cfg = TrainConfig(self.epochs, self.batch_size, self.learning_rate, self.momentum, seed=self.seed)
        with T.precision(self.precision):
            model = build(self._arch(X.shape[1], len(self.classes_)), seed=self.seed)
            self.model_, self.history_ = train(model, Dataset(inputs, codes.astype(np.intp)), cfg, defense)
        return self

    def decision_function(self, X):
        """Raw logits, one column per class."""
        check_is_fitted(self, "model_")
        inputs = self._check_inputs(X)
        with T.precision(self.precision), T.no_grad():
            z = forward_logits(self.model_, T.Tensor(inputs, dtype=self.model_.dtype)).data
        return z

    def predict_proba(self, X):
        z = self.decision_function(X)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X):
        check_is_fitted(self, "model_")
        with T.precision(self.precision):
            return self.classes_[predict(self.model_, self._check_inputs(X))]

    def score_samples(self, X):
        """Unnormalized log p(x): logsumexp of the logits."""
        check_is_fitted(self, "model_")
        with T.precision(self.precision):
            return log_likelihoods(self.model_, self._check_inputs(X))

    def flatness(self, X, n_planes=1, eps_max=8 / 255, resolution=10, seed=0):
        """Per-sample phi; its mean is the dataset flatness Phi."""
        check_is_fitted(self, "model_")
        inputs = self._check_inputs(X)
        with T.precision(self.precision):
            report = dataset_flatness(self.model_, inputs, n_planes, GridSpec(eps_max, resolution), seed)
        return np.asarray(report.per_sample_phi)

    def robust_score(self, X, y, eps=None, step=None, iters=None, seed=0):
        """Accuracy under PGD; defaults to the attack the estimator was built with."""
        check_is_fitted(self, "model_")
        inputs = self._check_inputs(X)
        index = {c: i for i, c in enumerate(self.classes_)}
        try:
            codes = np.array([index[v] for v in np.asarray(y)], dtype=np.intp)
        except KeyError as exc:
            raise ValueError(f"label {exc.args[0]!r} not seen in fit") from None
        cfg = AttackConfig(
            "pgd", self.attack_eps if eps is None else eps, self.attack_step if step is None else step,
            self.attack_iters if iters is None else iters,
        )
        with T.precision(self.precision):
            return adversarial_accuracy(self.model_, Dataset(inputs, codes), cfg, seed)
