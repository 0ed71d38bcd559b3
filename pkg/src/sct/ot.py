"""Entropic optimal transport via stabilized log-domain Sinkhorn iteration.

Solves min_{A >= 0} <C, A> + eps * sum(A log A) subject to A 1 = mu and
A^T 1 = nu, by alternating dual-potential updates. Every iteration is
instrumented with dual/plan/marginal residuals; after the final iteration
one exact column rescaling makes the column marginals hold to machine
precision (downstream gating consumes columns).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegeneratePlanError, DimensionError, ParameterError, ValidationError
from .numerics import as_matrix, as_vector, logsumexp_rows


def uniform_marginals(n: int) -> np.ndarray:
    return np.full(n, 1.0 / n)


@dataclass(frozen=True)
class TransportProblem:
    """Cost matrix with simplex row/column marginals and entropic weight."""

    cost: np.ndarray
    row_marginals: np.ndarray
    col_marginals: np.ndarray
    epsilon: float

    def __post_init__(self):
        cost = as_matrix(self.cost, "cost")
        mu = as_vector(self.row_marginals, "row_marginals")
        nu = as_vector(self.col_marginals, "col_marginals")
        if not (self.epsilon > 0):
            raise ParameterError(f"epsilon must be > 0, got {self.epsilon}")
        n, l = cost.shape
        if mu.shape[0] != n:
            raise DimensionError(f"row_marginals length {mu.shape[0]} != cost rows {n}")
        if nu.shape[0] != l:
            raise DimensionError(f"col_marginals length {nu.shape[0]} != cost cols {l}")
        if np.any(mu < 0) or np.any(nu < 0):
            raise ValidationError("marginals must be nonnegative")
        if abs(mu.sum() - 1.0) > 1e-12 or abs(nu.sum() - 1.0) > 1e-12:
            raise ValidationError("marginals must each sum to 1 within 1e-12")
        if cost.min() < -1e-9 or cost.max() > 1.0 + 1e-9:
            raise ValidationError("cost entries must lie in [0, 1]")
        object.__setattr__(self, "cost", cost)
        object.__setattr__(self, "row_marginals", mu)
        object.__setattr__(self, "col_marginals", nu)

    @classmethod
    def with_uniform_marginals(cls, cost, epsilon: float) -> "TransportProblem":
        cost = as_matrix(cost, "cost")
        n, l = cost.shape
        return cls(cost, uniform_marginals(n), uniform_marginals(l), epsilon)


@dataclass
class TraceRecord:
    r_f: float
    r_g: float
    r_A: float
    r_row: float
    r_col: float
    r_marg: float
    entropy: float
    objective: float
    dual_objective: float


@dataclass
class ConvergenceTrace:
    """Per-iteration residual log of one Sinkhorn solve."""

    r_f: list[float] = field(default_factory=list)
    r_g: list[float] = field(default_factory=list)
    r_A: list[float] = field(default_factory=list)
    r_row: list[float] = field(default_factory=list)
    r_col: list[float] = field(default_factory=list)
    r_marg: list[float] = field(default_factory=list)
    entropy: list[float] = field(default_factory=list)
    objective: list[float] = field(default_factory=list)
    dual_objective: list[float] = field(default_factory=list)

    def append(self, rec: TraceRecord) -> None:
        self.r_f.append(rec.r_f)
        self.r_g.append(rec.r_g)
        self.r_A.append(rec.r_A)
        self.r_row.append(rec.r_row)
        self.r_col.append(rec.r_col)
        self.r_marg.append(rec.r_marg)
        self.entropy.append(rec.entropy)
        self.objective.append(rec.objective)
        self.dual_objective.append(rec.dual_objective)

    def __len__(self) -> int:
        return len(self.r_f)

    def write_csv(self, fh) -> None:
        fh.write("iter,r_f,r_g,r_A,r_row,r_col,r_marg\n")
        for k in range(len(self)):
            vals = (self.r_f[k], self.r_g[k], self.r_A[k], self.r_row[k], self.r_col[k], self.r_marg[k])
            fh.write(str(k + 1) + "," + ",".join(format(v, ".17g") for v in vals) + "\n")


@dataclass
class TransportResult:
    plan: np.ndarray
    dual_f: np.ndarray
    dual_g: np.ndarray
    trace: ConvergenceTrace
    iterations_run: int


@dataclass
class GateWeights:
    """Row-normalized plan weights plus their per-row max-normalized form.

    ``omega`` rows live on the simplex (magnitude ~1/L); ``omega_scaled``
    rescales each row so its strongest patch has weight exactly 1, which is
    what the gating function consumes.
    """

    omega: np.ndarray
    omega_scaled: np.ndarray


@dataclass(frozen=True)
class IterateSnapshot:
    dual_f: np.ndarray
    dual_g: np.ndarray
    plan: np.ndarray


def plan_entropy(plan: np.ndarray) -> float:
    """sum(A log A) with the 0 log 0 = 0 convention (negative-entropy sign)."""
    p = plan[plan > 0]
    return float(np.sum(p * np.log(p)))


def compute_residuals(prev: IterateSnapshot, curr: IterateSnapshot, mu, nu) -> TraceRecord:
    """One trace record from consecutive iterate snapshots.

    r_f/r_g are l2 norms of the dual deltas, r_A the Frobenius norm of the
    plan delta; r_row = (1/2) sum_i |(A1)_i - mu_i| and
    r_col = (1/L) sum_j |(A^T 1)_j - nu_j|, summed into r_marg.
    """
    mu = as_vector(mu, "mu")
    nu = as_vector(nu, "nu")
    if prev.dual_f.shape != curr.dual_f.shape or prev.dual_g.shape != curr.dual_g.shape:
        raise DimensionError("snapshot dual shapes differ")
    if prev.plan.shape != curr.plan.shape:
        raise DimensionError("snapshot plan shapes differ")
    if curr.plan.shape != (mu.shape[0], nu.shape[0]):
        raise DimensionError("plan shape inconsistent with marginals")
    r_f = float(np.linalg.norm(curr.dual_f - prev.dual_f))
    r_g = float(np.linalg.norm(curr.dual_g - prev.dual_g))
    r_a = float(np.linalg.norm(curr.plan - prev.plan))
    r_row = 0.5 * float(np.abs(curr.plan.sum(axis=1) - mu).sum())
    r_col = float(np.abs(curr.plan.sum(axis=0) - nu).sum()) / nu.shape[0]
    return TraceRecord(
        r_f=r_f,
        r_g=r_g,
        r_A=r_a,
        r_row=r_row,
        r_col=r_col,
        r_marg=r_row + r_col,
        entropy=0.0,
        objective=0.0,
        dual_objective=0.0,
    )


def solve_entropic_ot(problem: TransportProblem, max_iters: int = 40, tol: float = 0.0) -> TransportResult:
    """Run the log-domain Sinkhorn loop for ``max_iters`` iterations.

    One iteration is an f-update followed by a g-update; with tol > 0 the
    loop stops early once r_marg < tol. The returned plan gets a final
    exact column rescaling so A^T 1 = nu to machine precision.
    """
    if max_iters < 1:
        raise ParameterError(f"max_iters must be >= 1, got {max_iters}")
    if tol < 0:
        raise ParameterError(f"tol must be >= 0, got {tol}")

    # zero-mass rows/columns carry no transport: solve on the positive
    # support and embed back, keeping duals and residuals finite
    row_live = problem.row_marginals > 0
    col_live = problem.col_marginals > 0
    if not (np.all(row_live) and np.all(col_live)):
        sub = TransportProblem(
            problem.cost[np.ix_(row_live, col_live)],
            problem.row_marginals[row_live],
            problem.col_marginals[col_live],
            problem.epsilon,
        )
        res = solve_entropic_ot(sub, max_iters, tol)
        plan = np.zeros_like(problem.cost)
        plan[np.ix_(row_live, col_live)] = res.plan
        dual_f = np.full(problem.cost.shape[0], -np.inf)
        dual_f[row_live] = res.dual_f
        dual_g = np.full(problem.cost.shape[1], -np.inf)
        dual_g[col_live] = res.dual_g
        return TransportResult(plan, dual_f, dual_g, res.trace, res.iterations_run)

    cost = problem.cost
    mu = problem.row_marginals
    nu = problem.col_marginals
    eps = problem.epsilon
    n, l = cost.shape

    log_mu = np.log(mu)
    log_nu = np.log(nu)

    f = np.zeros(n)
    g = np.zeros(l)
    plan = np.exp((f[:, None] + g[None, :] - cost) / eps)
    prev = IterateSnapshot(f.copy(), g.copy(), plan)
    trace = ConvergenceTrace()
    iterations = 0

    for _ in range(max_iters):
        f = f + eps * (log_mu - logsumexp_rows((f[:, None] + g[None, :] - cost) / eps))
        g = g + eps * (log_nu - logsumexp_rows(((f[:, None] + g[None, :] - cost) / eps).T))
        plan = np.exp((f[:, None] + g[None, :] - cost) / eps)
        curr = IterateSnapshot(f.copy(), g.copy(), plan)
        rec = compute_residuals(prev, curr, mu, nu)
        rec.entropy = plan_entropy(plan)
        rec.objective = float(np.sum(cost * plan)) + eps * rec.entropy
        rec.dual_objective = float(f @ mu + g @ nu - eps * plan.sum())
        trace.append(rec)
        prev = curr
        iterations += 1
        if tol > 0 and rec.r_marg < tol:
            break

    # exact column feasibility for downstream per-patch consumers
    col_sums = plan.sum(axis=0)
    scale = np.divide(nu, col_sums, out=np.zeros_like(nu), where=col_sums > 0)
    plan = plan * scale[None, :]
    return TransportResult(plan=plan, dual_f=f, dual_g=g, trace=trace, iterations_run=iterations)


def plan_to_gate_weights(plan) -> GateWeights:
    """Row-normalize a plan to simplex weights and max-normalize each row."""
    plan = as_matrix(plan, "plan")
    if plan.min() < 0:
        raise ValidationError("plan entries must be nonnegative")
    row_sums = plan.sum(axis=1)
    if np.any(row_sums <= 0):
        starved = int(np.argmin(row_sums))
        raise DegeneratePlanError(f"plan row {starved} has zero mass (starved part)")
    omega = plan / row_sums[:, None]
    omega_scaled = omega / omega.max(axis=1)[:, None]
    return GateWeights(omega=omega, omega_scaled=omega_scaled)


def hard_plan(plan) -> np.ndarray:
    """Column-wise argmax part assignment; ties go to the smaller part index."""
    plan = as_matrix(plan, "plan")
    return np.argmax(plan, axis=0)
