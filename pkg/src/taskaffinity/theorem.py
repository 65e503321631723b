"""Empirical convergence harness for the affinity score on a strongly convex model.

The model is L2-regularized logistic regression; the penalty is written
lambda * ||theta||^2 (no 1/2), which makes the loss satisfy

    L(y) >= L(x) + grad L(x)^T (y - x) + lambda * ||y - x||^2

exactly with mu = l2_lambda.  Noisy SGD follows the full-batch gradient plus
isotropic Gaussian noise; the running Polyak average of the iterates is
recorded at log-spaced checkpoints (10 per decade).  At each checkpoint the
affinity score between the Fisher diagonals of the averaged parameters on
two same-distribution datasets is compared against its value at the true
optimum: the gap should shrink toward zero as steps accumulate.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import fisher
from .nnet import Batch

GUARD_NORM = 1e8
_SOLVER_CAP = 200_000


class DivergenceError(RuntimeError):
    """Noisy SGD left the guard ball; .step is the offending step index."""

    def __init__(self, step: int, norm: float):
        super().__init__(f"iterate norm {norm:.3e} exceeded {GUARD_NORM:.0e} at step {step}")
        self.step = step


@dataclass(frozen=True, eq=False)
class ConvexProblem:
    """Binary logistic regression data with an L2 penalty coefficient."""

    features: np.ndarray
    labels: np.ndarray
    l2_lambda: float

    def __post_init__(self) -> None:
        x = np.ascontiguousarray(self.features, dtype=np.float64)
        y = np.ascontiguousarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0] or x.shape[0] < 1:
            raise ValueError("features must be (n, d) aligned with 1-D labels")
        if not set(np.unique(y)) <= {0, 1}:
            raise ValueError("labels must be binary 0/1")
        if self.l2_lambda <= 0:
            raise ValueError("l2_lambda must be positive (strong convexity)")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class StepSchedule:
    """constant: eta_t = eta0.  polynomial: eta_t = eta0 * t^(-exponent), exponent in (0.5, 1)."""

    kind: str
    eta0: float
    exponent: float = 0.75

    def __post_init__(self) -> None:
        if self.kind not in ("constant", "polynomial"):
            raise ValueError("kind must be 'constant' or 'polynomial'")
        if self.eta0 <= 0:
            raise ValueError("eta0 must be positive")
        if self.kind == "polynomial" and not 0.5 < self.exponent < 1:
            raise ValueError("polynomial exponent must be in (0.5, 1)")

    def eta(self, t: int) -> float:
        if self.kind == "constant":
            return self.eta0
        return self.eta0 * t ** (-self.exponent)


@dataclass(frozen=True)
class NoisySGDConfig:
    step_schedule: StepSchedule
    noise_sigma: float
    total_steps: int
    seed: int

    def __post_init__(self) -> None:
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")


@dataclass
class Trajectory:
    """Running Polyak averages at strictly increasing checkpoint times."""

    times: np.ndarray
    theta_bars: np.ndarray
    theta_star: Optional[np.ndarray] = None
    iterates: Optional[np.ndarray] = None  # full history, kept only on request


@dataclass
class TasSeries:
    """Affinity values at the checkpoints plus the score at the optimum."""

    times: np.ndarray
    values: np.ndarray
    s_star: float


@dataclass(frozen=True)
class ConvergenceReport:
    passed: bool
    final_gap_median: float
    trend: tuple[float, ...]  # median gap at the last three checkpoints
    abs_tol: float
    n_seeds: int


# ---------------------------------------------------------------------------
# objective


def _signs(labels: np.ndarray) -> np.ndarray:
    return 2.0 * labels - 1.0


def loss_value(p: ConvexProblem, theta: np.ndarray) -> float:
    margins = _signs(p.labels) * (p.features @ theta)
    return float(np.mean(np.logaddexp(0.0, -margins)) + p.l2_lambda * theta @ theta)


def gradient(p: ConvexProblem, theta: np.ndarray) -> np.ndarray:
    s = _signs(p.labels)
    w = -s * _sigmoid(-s * (p.features @ theta))
    return p.features.T @ w / p.features.shape[0] + 2.0 * p.l2_lambda * theta


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def per_sample_gradients(
    features: np.ndarray, labels: np.ndarray, theta: np.ndarray, l2_lambda: float
) -> np.ndarray:
    """Row i is the gradient of sample i's regularized loss; the mean recovers gradient()."""
    s = _signs(np.asarray(labels, dtype=np.int64))
    w = -s * _sigmoid(-s * (np.asarray(features) @ theta))
    return np.asarray(features) * w[:, None] + 2.0 * l2_lambda * theta[None, :]


def fisher_diag_at(theta: np.ndarray, data: Batch, l2_lambda: float) -> fisher.FisherDiagonal:
    """Unit-trace Fisher diagonal of the logistic model at theta over a dataset."""
    g = per_sample_gradients(data.features, data.labels, theta, l2_lambda)
    return fisher.normalize_unit_trace(fisher.fisher_from_grads(g))


# ---------------------------------------------------------------------------
# optimization


def solve_optimum(
    p: ConvexProblem,
    tol: float = 1e-10,
    fixed_step: Optional[float] = None,
    max_iters: int = _SOLVER_CAP,
) -> np.ndarray:
    """Full-batch gradient descent to gradient norm < tol.

    Default uses Armijo backtracking; passing fixed_step runs plain descent
    at that rate (the cross-check route).  Raises if the budget runs out.
    """
    theta = np.zeros(p.dim)
    for _ in range(max_iters):
        g = gradient(p, theta)
        gnorm = float(np.linalg.norm(g))
        if gnorm < tol:
            return theta
        if fixed_step is not None:
            theta = theta - fixed_step * g
            continue
        step = 1.0
        base = loss_value(p, theta)
        while loss_value(p, theta - step * g) > base - 0.25 * step * gnorm * gnorm:
            step *= 0.5
            if step < 1e-20:
                raise RuntimeError("line search collapsed; gradient may be inconsistent")
        theta = theta - step * g
    raise RuntimeError(f"optimizer did not reach tol={tol} within {max_iters} iterations")


def checkpoint_times(total_steps: int) -> np.ndarray:
    """Log-spaced step indices, 10 per decade, always ending at total_steps."""
    ts = {total_steps}
    k = 0
    while True:
        t = int(round(10.0 ** (k / 10.0)))
        if t > total_steps:
            break
        ts.add(max(t, 1))
        k += 1
    return np.array(sorted(ts), dtype=np.int64)


def noisy_sgd(p: ConvexProblem, cfg: NoisySGDConfig, keep_iterates: bool = False) -> Trajectory:
    """theta_{t+1} = theta_t - eta_t * (grad L(theta_t) + eps_t), eps_t ~ N(0, sigma^2 I).

    Starts at the origin.  The running mean of iterates theta_1..theta_t is
    recorded at the checkpoint times.  keep_iterates stores the raw iterates
    too (tests recompute the running means from them).
    """
    rng = np.random.default_rng(cfg.seed)
    theta = np.zeros(p.dim)
    running_sum = np.zeros(p.dim)
    ckpts = checkpoint_times(cfg.total_steps)
    bars = np.empty((ckpts.size, p.dim))
    raw = np.empty((cfg.total_steps, p.dim)) if keep_iterates else None
    next_idx = 0
    chunk = 8192
    t = 0
    while t < cfg.total_steps:
        block = min(chunk, cfg.total_steps - t)
        noise = rng.standard_normal((block, p.dim)) * cfg.noise_sigma
        for b in range(block):
            t += 1
            g = gradient(p, theta) + noise[b]
            theta = theta - cfg.step_schedule.eta(t) * g
            nrm = float(np.linalg.norm(theta))
            if nrm > GUARD_NORM:
                raise DivergenceError(t, nrm)
            running_sum += theta
            if raw is not None:
                raw[t - 1] = theta
            if next_idx < ckpts.size and t == int(ckpts[next_idx]):
                bars[next_idx] = running_sum / t
                next_idx += 1
    return Trajectory(times=ckpts, theta_bars=bars, iterates=raw)


def tas_trajectory(
    traj: Trajectory, data_a_query: Batch, data_b_support: Batch, p: ConvexProblem
) -> TasSeries:
    """Affinity between the two datasets' Fisher diagonals at each averaged
    checkpoint, plus the same quantity at the optimum stored on the trajectory."""
    if traj.theta_star is None:
        raise ValueError("trajectory needs theta_star; run solve_optimum first")

    def score_at(theta: np.ndarray, where: str) -> float:
        try:
            f_a = fisher_diag_at(theta, data_a_query, p.l2_lambda)
            f_b = fisher_diag_at(theta, data_b_support, p.l2_lambda)
        except ValueError as exc:
            raise ValueError(f"degenerate Fisher at {where}: {exc}") from None
        return fisher.tas(f_a, f_b).value

    values = np.array(
        [score_at(tb, f"checkpoint t={int(t)}") for t, tb in zip(traj.times, traj.theta_bars)]
    )
    return TasSeries(traj.times.copy(), values, score_at(traj.theta_star, "the optimum"))


def convergence_check(series: list[TasSeries], abs_tol: float) -> ConvergenceReport:
    """Pass iff the median |s_t - s*| over seeds is below abs_tol at the final
    checkpoint and the median gap is non-increasing over the last three."""
    if len(series) < 5:
        raise ValueError("need at least 5 seeds for a stable median")
    times = series[0].times
    for s in series[1:]:
        if not np.array_equal(s.times, times):
            raise ValueError("all series must share checkpoint times")
    gaps = np.stack([np.abs(s.values - s.s_star) for s in series])
    medians = np.median(gaps, axis=0)
    tail = medians[-3:] if medians.size >= 3 else medians
    non_increasing = bool(np.all(np.diff(tail) <= 0.0))
    final = float(medians[-1])
    return ConvergenceReport(
        passed=(final < abs_tol) and non_increasing,
        final_gap_median=final,
        trend=tuple(float(x) for x in tail),
        abs_tol=abs_tol,
        n_seeds=len(series),
    )


# ---------------------------------------------------------------------------
# reference data generator


def make_logistic_fixture(
    dim: int,
    n_support: int,
    n_query: int,
    l2_lambda: float,
    seed: int,
) -> tuple[ConvexProblem, Batch, Batch]:
    """(training problem, A-query batch, B-support batch), all drawn from one
    distribution: x ~ N(0, I), y ~ Bernoulli(sigmoid(x . theta_true))."""
    rng = np.random.default_rng(seed)
    theta_true = rng.standard_normal(dim) * (2.0 / np.sqrt(dim))

    def draw(n: int) -> tuple[np.ndarray, np.ndarray]:
        x = rng.standard_normal((n, dim))
        y = (rng.random(n) < _sigmoid(x @ theta_true)).astype(np.int64)
        return x, y

    xs, ys = draw(n_support)
    xa, ya = draw(n_query)
    xb, yb = draw(n_query)
    return ConvexProblem(xs, ys, l2_lambda), Batch(xa, ya), Batch(xb, yb)
