"""Likelihood landscapes of classifiers read as energy-based models.

A classifier's logits define an unnormalized input density through their
logsumexp. This package measures how flat that density is around inputs,
trains models that flatten it (adversarial training, Jacobian and weighted
Jacobian regularizers), and attacks them with FGSM and PGD. Everything runs
on a small reverse-mode autodiff engine over numpy.
"""

from .attacks import AttackConfig, adversarial_accuracy, clean_accuracy, fgsm, pgd
from .data import Dataset, load_cifar10_bin, load_dataset, load_idx, subset, synthetic_blobs
from .errors import (
    ArtifactCorruption, ConfigError, ContractError, DimensionError, FormatError, InputError,
    LikelandError, NumericError, TrainingDivergence,
)
from .estimator import LikelihoodLandscapeClassifier
from .flatness import FlatnessReport, dataset_flatness, phi_flatness
from .landscape import GridSpec, fgsm_plane, random_plane, surface
from .likelihood import ams_score, likelihood_gradient, log_likelihood, log_likelihoods, relative_log_likelihood
from .models import ArchitectureConfig, build, load_checkpoint, save_checkpoint
from .tensor import Tensor, grad, no_grad
from .training import DefenseConfig, TrainConfig, train

__version__ = "0.1.0"
