"""Self-checking battery behind the ``verify`` command.

Every check compares the implementation against something computed a
different way: central differences for gradients, row-by-row Jacobians for
the weighted-sum likelihood gradient and the norm bound, closed forms on
linear models for the projection estimators, and the l-inf box for attacks.
The op registry ``GRAD_CASES`` is shared with the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attacks import AttackConfig, fgsm, pgd
from .likelihood import cross_entropy, likelihood_gradient
from .models import ArchitectureConfig, build
from .tensor import Tensor, finite_diff_check
from .training import DefenseConfig, ams_frob_estimate, jacobian_frob_estimate, joint_loss, verify_norm_bound

GRAD_TOL = 1e-4
DUAL_PATH_TOL = 1e-8
ESTIMATOR_TOL = 0.05


@dataclass
class CheckResult:
    name: str
    passed: bool
    cases: int
    worst: float
    detail: str = ""


# -- gradient cases -------------------------------------------------------------
# Each builder takes a Generator and returns (f, x): f maps a Tensor shaped like
# x to a scalar Tensor. Random output weights keep every gradient entry
# informative; inputs near kinks and ties are pushed away from them.

def _away_from_zero(rng, shape, gap=0.05):
    v = rng.uniform(gap, 1.0, size=shape)
    return v * rng.choice([-1.0, 1.0], size=shape)


def _distinct(rng, shape):
    # spacing of 0.1 between values keeps every window's max unambiguous
    n = int(np.prod(shape))
    return (rng.permutation(n) * 0.1 + rng.uniform(0, 0.01, n)).reshape(shape)


def _case_binary(op):
    def build_case(rng):
        shape = tuple(rng.integers(1, 4, size=2))
        other = Tensor(_away_from_zero(rng, shape) + (1.5 if op is T.div else 0.0))
        w = rng.standard_normal(shape)
        return (lambda x: (op(x, other) * Tensor(w)).sum()), rng.standard_normal(shape)
    return build_case


def _case_unary(fn, make_x=None):
    def build_case(rng):
        shape = tuple(rng.integers(1, 4, size=2))
        x = make_x(rng, shape) if make_x else rng.standard_normal(shape)
        w = rng.standard_normal(shape)
        return (lambda t: (fn(t) * Tensor(w)).sum()), x
    return build_case


def _case_reduce(fn):
    def build_case(rng):
        shape = tuple(rng.integers(1, 4, size=3))
        axis = int(rng.integers(0, 3))
        x = rng.standard_normal(shape)
        w = rng.standard_normal(fn(Tensor(x), axis).shape)
        return (lambda t: (fn(t, axis) * Tensor(w)).sum()), x
    return build_case


def _case_matmul(rng):
    m, k, n = rng.integers(1, 5, size=3)
    b = Tensor(rng.standard_normal((k, n)))
    w = rng.standard_normal((m, n))
    return (lambda x: (T.matmul(x, b) * Tensor(w)).sum()), rng.standard_normal((m, k))


def _case_matmul_right(rng):
    m, k, n = rng.integers(1, 5, size=3)
    a = Tensor(rng.standard_normal((m, k)))
    w = rng.standard_normal((m, n))
    return (lambda x: (T.matmul(a, x) * Tensor(w)).sum()), rng.standard_normal((k, n))


def _case_transpose(rng):
    x = rng.standard_normal(tuple(rng.integers(1, 4, size=3)))
    axes = tuple(rng.permutation(3))
    w = rng.standard_normal(np.transpose(x, axes).shape)
    return (lambda t: (T.transpose(t, axes) * Tensor(w)).sum()), x


def _case_reshape(rng):
    x = rng.standard_normal(tuple(rng.integers(1, 4, size=2)))
    w = rng.standard_normal(x.size)
    return (lambda t: (T.reshape(t, (x.size,)) * Tensor(w)).sum()), x


def _case_broadcast(rng):
    n = int(rng.integers(1, 4))
    x = rng.standard_normal((1, n))
    m = int(rng.integers(1, 4))
    w = rng.standard_normal((m, n))
    return (lambda t: (T.broadcast_to(t, (m, n)) * Tensor(w)).sum()), x


def _case_gather(rng):
    x = rng.standard_normal(tuple(rng.integers(2, 4, size=2)))
    index = rng.integers(0, x.size, size=int(rng.integers(1, 8)))
    w = rng.standard_normal(index.shape)
    return (lambda t: (T.gather(t, index) * Tensor(w)).sum()), x


def _case_getitem(rng):
    x = rng.standard_normal((4, 3))
    key = (slice(1, 3), np.array([0, 2]))[: int(rng.integers(1, 3))]
    w = rng.standard_normal(x[key].shape)
    return (lambda t: (t[key] * Tensor(w)).sum()), x


def _case_stack(rng):
    shape = tuple(rng.integers(1, 4, size=2))
    other = Tensor(rng.standard_normal(shape))
    axis = int(rng.integers(0, 3))
    w = rng.standard_normal(np.stack([np.zeros(shape)] * 2, axis=axis).shape)
    return (lambda t: (T.stack([t, other], axis=axis) * Tensor(w)).sum()), rng.standard_normal(shape)


def _case_softmax_like(fn):
    def build_case(rng):
        shape = tuple(rng.integers(1, 5, size=2))
        axis = int(rng.integers(0, 2))
        w = rng.standard_normal(shape)
        return (lambda t: (fn(t, axis) * Tensor(w)).sum()), rng.standard_normal(shape) * 3
    return build_case


def _case_logsumexp(rng):
    shape = tuple(rng.integers(1, 5, size=2))
    axis = int(rng.integers(0, 2))
    w = rng.standard_normal(shape[1 - axis])
    return (lambda t: (T.logsumexp(t, axis) * Tensor(w)).sum()), rng.standard_normal(shape) * 3


def _case_cross_entropy(rng):
    b, k = rng.integers(1, 5), rng.integers(2, 5)
    y = rng.integers(0, k, size=b)
    return (lambda t: cross_entropy(t, y, reduction="sum")), rng.standard_normal((b, k)) * 3


def _case_pad(rng):
    x = rng.standard_normal((1, 2, 3, 3))
    p = int(rng.integers(1, 3))
    w = rng.standard_normal((1, 2, 3 + 2 * p, 3 + 2 * p))
    return (lambda t: (T.pad2d(t, p) * Tensor(w)).sum()), x


def _conv_dims(rng):
    c, cout, k = int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.integers(1, 4))
    stride, padding = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    h = int(rng.integers(k, k + 3))
    return c, cout, k, stride, padding, h


def _case_conv_input(rng):
    c, cout, k, stride, padding, h = _conv_dims(rng)
    weight, bias = Tensor(rng.standard_normal((cout, c, k, k))), Tensor(rng.standard_normal(cout))
    x = rng.standard_normal((1, c, h, h))
    w = rng.standard_normal(T.conv2d(x, weight, bias, stride, padding).shape)
    return (lambda t: (T.conv2d(t, weight, bias, stride, padding) * Tensor(w)).sum()), x


def _case_conv_weight(rng):
    c, cout, k, stride, padding, h = _conv_dims(rng)
    x = Tensor(rng.standard_normal((2, c, h, h)))
    weight = rng.standard_normal((cout, c, k, k))
    w = rng.standard_normal(T.conv2d(x, weight, None, stride, padding).shape)
    return (lambda t: (T.conv2d(x, t, None, stride, padding) * Tensor(w)).sum()), weight


def _case_maxpool(rng):
    k = int(rng.integers(1, 3))
    x = _distinct(rng, (1, 2, 2 * k + int(rng.integers(0, 2)), 2 * k))
    w = rng.standard_normal(T.max_pool2d(x, k).shape)
    return (lambda t: (T.max_pool2d(t, k) * Tensor(w)).sum()), x


def _case_joint_loss(rng):
    """Regularized loss as a function of one weight matrix (double backprop)."""
    mode = ("jacobian_reg", "ams_reg")[int(rng.integers(0, 2))]
    d, h, k, b = 3, 4, 3, 2
    with T.precision("high"):
        model = build(ArchitectureConfig("mlp", (d, h, k)), seed=int(rng.integers(2**31)))
    x = rng.uniform(0, 1, size=(b, d))
    y = rng.integers(0, k, size=b)
    vectors = rng.standard_normal((2, b, k))
    defense = DefenseConfig(mode, lam=float(rng.uniform(0.1, 2.0)), n_proj=2)
    w0 = model.params["0.weight"].data.copy()

    def f(t):
        model.params["0.weight"] = t
        return joint_loss(model, x, y, defense, vectors=vectors)
    return f, w0


GRAD_CASES = {
    "add": _case_binary(T.add),
    "sub": _case_binary(T.sub),
    "mul": _case_binary(T.mul),
    "div": _case_binary(T.div),
    "neg": _case_unary(T.neg),
    "power": _case_unary(lambda t: T.power(t, 3)),
    "exp": _case_unary(T.exp),
    "log": _case_unary(T.log, lambda rng, s: rng.uniform(0.2, 3.0, size=s)),
    "relu": _case_unary(T.relu, _away_from_zero),
    "matmul_left": _case_matmul,
    "matmul_right": _case_matmul_right,
    "transpose": _case_transpose,
    "reshape": _case_reshape,
    "sum": _case_reduce(lambda t, a: T.tsum(t, a)),
    "mean": _case_reduce(lambda t, a: T.mean(t, a)),
    "broadcast_to": _case_broadcast,
    "gather": _case_gather,
    "getitem": _case_getitem,
    "stack": _case_stack,
    "logsumexp": _case_logsumexp,
    "softmax": _case_softmax_like(T.softmax),
    "log_softmax": _case_softmax_like(T.log_softmax),
    "cross_entropy": _case_cross_entropy,
    "pad2d": _case_pad,
    "conv2d_input": _case_conv_input,
    "conv2d_weight": _case_conv_weight,
    "max_pool2d": _case_maxpool,
    "joint_loss": _case_joint_loss,
}


def gradient_errors(name: str, n_cases: int, seed: int = 0) -> list[float]:
    rng = np.random.default_rng([seed, sorted(GRAD_CASES).index(name)])
    errors = []
    for _ in range(n_cases):
        f, x = GRAD_CASES[name](rng)
        errors.append(finite_diff_check(f, x))
    return errors


def check_gradients(n_cases: int = 10, seed: int = 0) -> CheckResult:
    worst, bad = 0.0, []
    for name in GRAD_CASES:
        err = max(gradient_errors(name, n_cases, seed))
        worst = max(worst, err)
        if not err < GRAD_TOL:
            bad.append(name)
    return CheckResult("gradients", not bad, n_cases * len(GRAD_CASES), worst, ",".join(bad))


# -- random models ------------------------------------------------------------------

def random_model(rng, k: int | None = None, dim: int | None = None, scale: float | None = None):
    """Small random MLP in high precision, weights optionally inflated to sharpen the softmax."""
    k = int(rng.integers(1, 6)) if k is None else k
    dim = int(rng.integers(2, 7)) if dim is None else dim
    hidden = tuple(int(h) for h in rng.integers(2, 8, size=int(rng.integers(0, 3))))
    with T.precision("high"):
        model = build(ArchitectureConfig("mlp", (dim, *hidden, k)), seed=int(rng.integers(2**31)))
    s = float(rng.choice([0.5, 1.0, 3.0])) if scale is None else scale
    for p in model.parameters():
        p.data *= s
        if p.data.ndim == 1:
            p.data += rng.standard_normal(p.data.shape) * 0.1
    return model


def check_dual_path(n_cases: int = 100, seed: int = 1) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_cases):
        model = random_model(rng, k=int(rng.integers(2, 6)))
        x = rng.uniform(0, 1, size=(int(rng.integers(1, 4)),) + model.input_shape)
        a = likelihood_gradient(model, x, "autodiff")
        w = likelihood_gradient(model, x, "weighted")
        worst = max(worst, float(np.max(np.abs(a - w))))
    return CheckResult("dual_path", worst < DUAL_PATH_TOL, n_cases, worst)


def check_norm_bound(n_cases: int = 1000, seed: int = 2, inject_fault: bool = False) -> CheckResult:
    """The norm bound on random models; every fifth case has a single class, where it is an equality."""
    rng = np.random.default_rng(seed)
    failures, worst_ratio, equal_fail = 0, 0.0, 0
    for i in range(n_cases):
        single = i % 5 == 0
        model = random_model(rng, k=1 if single else int(rng.integers(2, 6)))
        x = rng.uniform(0, 1, size=model.input_shape)
        res = verify_norm_bound(model, x, _flip=inject_fault)
        failures += not res.holds
        if res.rhs > 0:
            worst_ratio = max(worst_ratio, res.lhs / res.rhs)
        if single and res.lhs != res.rhs:
            equal_fail += 1
    detail = f"violations={failures} k1_inequalities={equal_fail}"
    return CheckResult("norm_bound", failures == 0 and equal_fail == 0, n_cases, worst_ratio, detail)


def linear_closed_forms(model, x):
    """Exact ||W||_F^2 and ||diag(p) W||_F^2 for a one-layer model."""
    w, b = model.params["0.weight"].data, model.params["0.bias"].data
    z = x.reshape(-1) @ w.T + b
    p = np.exp(z - z.max())
    p /= p.sum()
    return float(np.sum(w ** 2)), float(np.sum((p[:, None] * w) ** 2))


def check_estimators(n_models: int = 5, n_proj: int = 10_000, seed: int = 3) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    basis_exact = True
    for _ in range(n_models):
        k, d = int(rng.integers(2, 6)), int(rng.integers(2, 8))
        with T.precision("high"):
            model = build(ArchitectureConfig("mlp", (d, k)), seed=int(rng.integers(2**31)))
        model.params["0.bias"].data += rng.standard_normal(k)
        x = rng.uniform(0, 1, size=(d,))
        plain, weighted = linear_closed_forms(model, x)
        est_p = jacobian_frob_estimate(model, x, n_proj, seed=rng).value
        est_w = ams_frob_estimate(model, x, n_proj, seed=rng).value
        worst = max(worst, abs(est_p / plain - 1), abs(est_w / weighted - 1))
        bp = jacobian_frob_estimate(model, x, basis=True).value
        bw = ams_frob_estimate(model, x, basis=True).value
        basis_exact &= bool(np.isclose(bp, plain, rtol=1e-12, atol=0) and np.isclose(bw, weighted, rtol=1e-12, atol=0))
    return CheckResult("estimators", worst < ESTIMATOR_TOL and basis_exact, n_models, worst,
                       "" if basis_exact else "basis variant inexact")


def check_attacks(n_runs: int = 200, seed: int = 4) -> CheckResult:
    """Budget and box hold exactly for PGD; one full-size PGD step equals FGSM bitwise."""
    rng = np.random.default_rng(seed)
    violations, mismatches = 0, 0
    worst = 0.0
    for _ in range(n_runs):
        model = random_model(rng, k=int(rng.integers(2, 5)))
        x = rng.uniform(0, 1, size=(3,) + model.input_shape)
        y = rng.integers(0, model.num_classes, size=3)
        eps = float(rng.choice([0.0, 1 / 255, 8 / 255, 0.1, 0.5]))
        cfg = AttackConfig("pgd", eps, float(rng.uniform(0.001, 0.2)), int(rng.integers(1, 6)),
                           bool(rng.integers(0, 2)))
        with T.precision("high"):
            adv = pgd(model, x, y, cfg, seed=rng)
        gap = float(np.max(np.abs(adv - x)))
        worst = max(worst, gap - eps)
        violations += gap > eps or adv.min() < 0.0 or adv.max() > 1.0
        one = AttackConfig("pgd", eps, eps * float(rng.uniform(1.0, 2.0)) + 1e-12, 1)
        with T.precision("high"):
            mismatches += not np.array_equal(pgd(model, x, y, one), fgsm(model, x, y, eps))
    return CheckResult("attacks", violations == 0 and mismatches == 0, n_runs, worst,
                       f"violations={violations} fgsm_mismatches={mismatches}")


def run_battery(inject_fault: bool = False, quick: bool = False) -> list[CheckResult]:
    return [
        check_gradients(3 if quick else 10),
        check_dual_path(20 if quick else 100),
        check_norm_bound(1000, inject_fault=inject_fault),
        check_estimators(2 if quick else 5),
        check_attacks(40 if quick else 200),
    ]


def format_table(results: list[CheckResult]) -> str:
    lines = [f"{'check':<12} {'status':<6} {'cases':>6} {'worst':>12}  detail"]
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{r.name:<12} {status:<6} {r.cases:>6} {r.worst:>12.3e}  {r.detail}")
    return "\n".join(lines)
