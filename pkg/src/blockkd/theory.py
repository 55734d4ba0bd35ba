"""Numerical checks of the gradient-level analysis behind block-wise distillation.

Three claims are exercised:

1. High-temperature limit: for zero-mean logits the softened-KL gradient
   (softmax(y_s/tau) - softmax(y_t/tau)) / tau approaches
   (y_s - y_t) / (tau^2 K), with relative error shrinking as tau grows.
2. First-order feature gradient: through a fixed projector M, the gradient of
   the logit distance w.r.t. the projected feature approaches
   J^T (J (f_p - f_t)) / (tau^2 K) with J the Jacobian of M at f_p, and the
   residual scales first-order in the feature perturbation.
3. Alignment pull: descending the logit distance on a feature drags it toward
   the reference feature on a convex-enough (linear + softmax) tail.

Convention note: the distance used during training carries a tau^2 factor so
its gradient scale is temperature-stable; the expressions above quote the
pre-tau^2 per-sample gradient, so the checks divide the autodiff gradient of
the training distance by tau^2 before comparing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, PreconditionError
from .losses import kl_logit_distance
from .tensor import Tensor, no_grad

HIGH_TEMP_TOLERANCE = 0.05      # rel err bound at tau = 50 * max|logit|
HIGH_TEMP_RATIO = 50.0
TAYLOR_LINEAR_TOLERANCE = 1e-3  # linear tail at high tau
TAYLOR_RATIO_WINDOW = (0.05, 0.5)
TAYLOR_EPS_LADDER = (1e-1, 1e-2, 1e-3)
TAYLOR_HIGH_TAU = 1e5


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def _rel_err(approx: np.ndarray, exact: np.ndarray) -> float:
    denom = float(np.linalg.norm(exact))
    diff = float(np.linalg.norm(approx - exact))
    if denom == 0.0:
        return 0.0 if diff == 0.0 else float("inf")
    return diff / denom


@dataclass
class ApproxReport:
    """Per-temperature comparison of the exact and limiting KL gradients."""

    taus: tuple[float, ...]
    exact_norms: tuple[float, ...]
    approx_norms: tuple[float, ...]
    rel_errs: tuple[float, ...]
    monotone_from: float
    monotone: bool


def check_high_temp_gradient(y_s, y_t, tau_list) -> ApproxReport:
    """Scan temperatures and report the error of the linearized KL gradient.

    Both logit vectors must be zero-mean (that assumption is part of the
    claim); the scan must cover at least 5 temperatures spanning two decades.
    The verdict is strict error decrease for every tau at or above max|logit|.
    """
    y_s = np.asarray(y_s.data if isinstance(y_s, Tensor) else y_s, dtype=np.float64)
    y_t = np.asarray(y_t.data if isinstance(y_t, Tensor) else y_t, dtype=np.float64)
    if y_s.ndim != 1 or y_s.shape != y_t.shape:
        raise ConfigError(f"need two K-vectors, got {y_s.shape} and {y_t.shape}")
    scale_floor = 1.0 + max(np.abs(y_s).max(), np.abs(y_t).max(), 0.0)
    if abs(y_s.sum()) > 1e-9 * scale_floor or abs(y_t.sum()) > 1e-9 * scale_floor:
        raise PreconditionError(
            "logits must be zero-meaned; the limiting form assumes it")
    taus = tuple(float(t) for t in tau_list)
    if len(taus) < 5 or min(taus) <= 0 or max(taus) / min(taus) < 100.0:
        raise ConfigError(
            "temperature scan needs >= 5 positive values spanning >= 2 decades")

    k = y_s.shape[0]
    exact_norms, approx_norms, rel_errs = [], [], []
    for tau in taus:
        exact = (_softmax(y_s / tau) - _softmax(y_t / tau)) / tau
        approx = (y_s - y_t) / (tau * tau * k)
        exact_norms.append(float(np.linalg.norm(exact)))
        approx_norms.append(float(np.linalg.norm(approx)))
        rel_errs.append(_rel_err(approx, exact))

    threshold = float(max(np.abs(y_s).max(), np.abs(y_t).max()))
    order = np.argsort(taus)
    in_range = [i for i in order if taus[i] >= threshold]
    monotone = all(rel_errs[a] > rel_errs[b] or rel_errs[a] == rel_errs[b] == 0.0
                   for a, b in zip(in_range, in_range[1:]))
    return ApproxReport(taus=taus,
                        exact_norms=tuple(exact_norms),
                        approx_norms=tuple(approx_norms),
                        rel_errs=tuple(rel_errs),
                        monotone_from=threshold,
                        monotone=monotone)


# ---------------------------------------------------------------------------
# projector tails


class TheoryTail:
    """A fixed projector from feature space to logits, f (1 x D...) -> (1 x K)."""

    feature_shape: tuple

    def logits(self, f: Tensor) -> Tensor:
        raise NotImplementedError

    def logits_np(self, flat: np.ndarray) -> np.ndarray:
        with no_grad():
            out = self.logits(Tensor(flat.reshape((1,) + self.feature_shape)))
        return out.data.ravel().copy()


class LinearTail(TheoryTail):
    def __init__(self, k: int, d: int, seed: int):
        rng = np.random.default_rng(seed)
        self.w = rng.normal(size=(d, k)) / np.sqrt(d)
        self.feature_shape = (d,)

    def logits(self, f: Tensor) -> Tensor:
        from . import tensor as T
        return T.matmul(f, Tensor(self.w))


class SmoothTail(TheoryTail):
    """Dense -> softmax -> dense: a smooth nonlinear projector with O(1)
    curvature, so first-order residual scaling is clean (a ReLU tail is
    piecewise linear and has no stable leading-order term)."""

    def __init__(self, k: int, d: int, hidden: int, seed: int):
        rng = np.random.default_rng(seed)
        self.w1 = rng.normal(size=(d, hidden)) * (2.0 / np.sqrt(d))
        self.w2 = rng.normal(size=(hidden, k)) * 2.0
        self.feature_shape = (d,)

    def logits(self, f: Tensor) -> Tensor:
        from . import tensor as T
        return T.matmul(T.softmax(T.matmul(f, Tensor(self.w1))), Tensor(self.w2))


class StoneTail(TheoryTail):
    """The frozen teacher tail above block ``index`` of a composite net."""

    def __init__(self, teacher, index: int):
        self.teacher = teacher
        self.index = index
        self.feature_shape = tuple(teacher.blocks[index - 1].out_shape)

    def logits(self, f: Tensor) -> Tensor:
        return self.teacher.forward_tail(f, self.index, training=False)


def finite_diff_jacobian(tail: TheoryTail, f_flat: np.ndarray,
                         h: float = 1e-5) -> np.ndarray:
    """K x D Jacobian of the tail, one central difference per input column."""
    d = f_flat.size
    cols = []
    for j in range(d):
        bump = np.zeros(d)
        bump[j] = h
        cols.append((tail.logits_np(f_flat + bump)
                     - tail.logits_np(f_flat - bump)) / (2.0 * h))
    return np.stack(cols, axis=1)


def exact_feature_gradient(tail: TheoryTail, f_p: np.ndarray, f_t: np.ndarray,
                           tau: float) -> np.ndarray:
    """Autodiff gradient of the (un-tau^2-scaled) distance w.r.t. the feature."""
    fp = Tensor(f_p.reshape((1,) + tail.feature_shape), requires_grad=True,
                name="f_p")
    y_t = tail.logits_np(f_t)
    loss = kl_logit_distance(tail.logits(fp), y_t[None, :], tau)
    loss.backward()
    return fp.grad.ravel() / (tau * tau)


@dataclass
class TaylorReport:
    eps: tuple[float, ...]
    rel_errs: tuple[float, ...]

    @property
    def ratios(self) -> tuple[float, ...]:
        return tuple(b / a if a > 0 else float("inf")
                     for a, b in zip(self.rel_errs, self.rel_errs[1:]))


def check_taylor_feature_gradient(tail: TheoryTail, f_p, direction, eps_list,
                                  tau: float) -> TaylorReport:
    """Compare the exact feature gradient against the first-order expression
    J^T (J (f_p - f_t)) / (tau^2 K) for f_t = f_p + eps * direction."""
    f_p = np.asarray(f_p, dtype=np.float64).ravel()
    direction = np.asarray(direction, dtype=np.float64).ravel()
    norm = np.linalg.norm(direction)
    if norm == 0:
        raise ConfigError("perturbation direction must be nonzero")
    direction = direction / norm
    eps_list = tuple(float(e) for e in eps_list)
    if any(e <= 0 for e in eps_list):
        raise ConfigError(f"perturbation scales must be positive, got {eps_list}")

    jac = finite_diff_jacobian(tail, f_p)
    k = jac.shape[0]
    rel_errs = []
    for eps in eps_list:
        f_t = f_p + eps * direction
        exact = exact_feature_gradient(tail, f_p, f_t, tau)
        first_order = jac.T @ (jac @ (f_p - f_t)) / (tau * tau * k)
        rel_errs.append(_rel_err(first_order, exact))
    return TaylorReport(eps=eps_list, rel_errs=tuple(rel_errs))


def alignment_pull_demo(tail: TheoryTail, f_p0, f_t, steps: int, lr: float,
                        tau: float) -> np.ndarray:
    """Gradient-descend the logit distance on f_p; return ||f_p - f_t|| per step."""
    f_p = np.asarray(f_p0, dtype=np.float64).ravel().copy()
    f_t = np.asarray(f_t, dtype=np.float64).ravel()
    y_target = tail.logits_np(f_t)
    trace = [float(np.linalg.norm(f_p - f_t))]
    for _ in range(steps):
        fp = Tensor(f_p.reshape((1,) + tail.feature_shape), requires_grad=True)
        loss = kl_logit_distance(tail.logits(fp), y_target[None, :], tau)
        loss.backward()
        f_p -= lr * fp.grad.ravel()
        trace.append(float(np.linalg.norm(f_p - f_t)))
    return np.asarray(trace)


# ---------------------------------------------------------------------------
# seeded drivers shared by the CLI and the acceptance suite


def zero_mean_logits(rng: np.random.Generator, k: int) -> np.ndarray:
    y = rng.uniform(-1.0, 1.0, size=k)
    return y - y.mean()


def run_hightemp(seeds, k: int = 10):
    """Rows (seed, tau, exact_norm, approx_norm, rel_err) plus failure notes."""
    rows, failures = [], []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        y_s = zero_mean_logits(rng, k)
        y_t = zero_mean_logits(rng, k)
        m = max(np.abs(y_s).max(), np.abs(y_t).max())
        report = check_high_temp_gradient(y_s, y_t, tuple(r * m for r in
                                                          (1, 5, 20, 50, 200)))
        for tau, en, an, re in zip(report.taus, report.exact_norms,
                                   report.approx_norms, report.rel_errs):
            rows.append((seed, tau, en, an, re))
        err_at_50 = report.rel_errs[3]
        if err_at_50 > HIGH_TEMP_TOLERANCE:
            failures.append(f"seed {seed}: rel err {err_at_50:.4f} at tau="
                            f"{report.taus[3]:.4g} exceeds {HIGH_TEMP_TOLERANCE}")
        if not report.monotone:
            failures.append(f"seed {seed}: rel err not strictly decreasing in tau")
    return rows, failures


def run_taylor(seeds, k: int = 8, d: int = 6):
    """Rows (seed, tail, eps, rel_err) plus failure notes."""
    rows, failures = [], []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        f_p = 0.5 * rng.normal(size=d)
        direction = rng.normal(size=d)

        linear = LinearTail(k, d, seed)
        lin = check_taylor_feature_gradient(linear, f_p, direction, (1e-2,),
                                            tau=TAYLOR_HIGH_TAU)
        rows.append((seed, "linear", lin.eps[0], lin.rel_errs[0]))
        if lin.rel_errs[0] > TAYLOR_LINEAR_TOLERANCE:
            failures.append(f"seed {seed}: linear tail rel err "
                            f"{lin.rel_errs[0]:.2e} exceeds "
                            f"{TAYLOR_LINEAR_TOLERANCE}")

        smooth = SmoothTail(k, d, hidden=10, seed=seed)
        rep = check_taylor_feature_gradient(smooth, f_p, direction,
                                            TAYLOR_EPS_LADDER,
                                            tau=TAYLOR_HIGH_TAU)
        for eps, err in zip(rep.eps, rep.rel_errs):
            rows.append((seed, "smooth", eps, err))
        lo, hi = TAYLOR_RATIO_WINDOW
        for (e_a, e_b), ratio in zip(zip(rep.eps, rep.eps[1:]), rep.ratios):
            if not lo <= ratio <= hi:
                failures.append(
                    f"seed {seed}: error ratio {ratio:.3f} for eps {e_a:g}->{e_b:g} "
                    f"outside [{lo}, {hi}]")
    return rows, failures


def run_pull(seeds, k: int = 8, d: int = 4, steps: int = 100, lr: float = 1e-2,
             tau: float = 2.0):
    """Rows (seed, step, distance) plus failure notes."""
    rows, failures = [], []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        tail = LinearTail(k, d, seed)
        f_t = rng.normal(size=d)
        f_p0 = f_t + 0.5 * rng.normal(size=d)
        trace = alignment_pull_demo(tail, f_p0, f_t, steps=steps, lr=lr, tau=tau)
        for step, dist in enumerate(trace):
            rows.append((seed, step, float(dist)))
        head = trace[:11]
        if np.any(np.diff(head) > 1e-12):
            failures.append(f"seed {seed}: distance increased within the "
                            "first 10 steps")
        if not trace[-1] < trace[0]:
            failures.append(f"seed {seed}: final distance {trace[-1]:.4f} not "
                            f"below initial {trace[0]:.4f}")
    return rows, failures
