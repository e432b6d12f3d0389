"""Optimization engine: linearization, H/b assembly, GN / LM / damped-GN loops.

One iteration linearizes every active factor at the current estimate,
accumulates H = sum J^T (gamma Omega) J and b = sum J^T (gamma Omega) e in
block form (Fixed variables suppressed), solves H dx = -b through the
block-sparse Cholesky and applies dx with the per-type boxplus.

The cost driving termination and LM accept/reject is F = sum_k 2 rho(u_k),
which reduces to the plain chi2 sum when no robust kernel is configured.
Levenberg-Marquardt damps the system with lambda * diag(H) (or lambda * I),
halves lambda on accepted steps, doubles it and rolls the state back from
the variables' backup stacks on rejected ones.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import manifold as mf
from . import robust
from . import sparse_block as sb
from .graph import VariableStatus
from .sparse_block import NotPositiveDefinite


class AllFactorsInvalid(RuntimeError):
    """Every active factor was invalid at the linearization point."""


class DimensionMismatch(ValueError):
    pass


@dataclass
class LmConfig:
    lambda_init_tau: float = 1e-5
    lambda_up: float = 2.0
    lambda_down: float = 0.5
    max_inner: int = 10
    damping: str = "diag_scaled"  # or "identity"

    def validate(self):
        if not self.lambda_up > 1.0:
            raise ValueError("lambda_up must be > 1")
        if not 0.0 < self.lambda_down < 1.0:
            raise ValueError("lambda_down must be in (0, 1)")
        if self.max_inner < 1:
            raise ValueError("max_inner must be >= 1")
        if self.damping not in ("diag_scaled", "identity"):
            raise ValueError(f"unknown damping {self.damping!r}")


@dataclass
class SolverConfig:
    algorithm: str = "gn"  # gn | lm | dgn
    max_iterations: int = 25
    epsilon: float = 1e-6
    lm: LmConfig = field(default_factory=LmConfig)
    dgn_lambda: float = 1e-3
    auto_fix_first: bool = False
    recompute_H_inliers: bool = False
    ordering: str = "amd"  # or "natural"

    def validate(self):
        if self.algorithm not in ("gn", "lm", "dgn"):
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        self.lm.validate()


@dataclass
class IterationStats:
    iteration: int
    chi2: float
    lam: float | None
    num_inliers: int
    num_outliers: int
    num_invalid: int
    t_linearize: float = 0.0
    t_solve: float = 0.0
    t_update: float = 0.0


def stats_lines(stats, include_times=True):
    """Line-delimited stats records; field order is fixed (see README).

    Wall times are the only non-deterministic fields, so reproducibility
    comparisons should pass include_times=False.
    """
    cols = "iter chi2 lambda n_inliers n_outliers n_invalid"
    if include_times:
        cols += " t_linearize t_solve t_update"
    lines = ["# " + cols]
    for s in stats:
        lam = "-" if s.lam is None else repr(float(s.lam))
        line = f"{s.iteration} {float(s.chi2)!r} {lam} {s.num_inliers} {s.num_outliers} {s.num_invalid}"
        if include_times:
            line += f" {s.t_linearize!r} {s.t_solve!r} {s.t_update!r}"
        lines.append(line)
    return lines


@dataclass
class Linearization:
    error: np.ndarray
    jacobians: dict  # local variable index -> block (non-Fixed variables only)


def linearize(factor, variables):
    """Error and per-variable Jacobian blocks at the current values.

    Returns None when the factor is invalid at this estimate.  Jacobians
    are computed only for non-Fixed variables; Fixed ones are suppressed.
    """
    values = [v.value for v in variables]
    e = factor.error(values)
    if e is None:
        return None
    wanted = [i for i, v in enumerate(variables) if v.status != VariableStatus.FIXED]
    if not wanted:
        return Linearization(np.asarray(e, dtype=float), {})
    jac = factor.jacobians(values)
    return Linearization(np.asarray(e, dtype=float), {i: jac[i] for i in wanted})


def update_Hb(H, b, factor, variables, kernel, block_index):
    """Accumulate one factor into H/b; returns its chi2, or None if invalid.

    Fixed variables contribute nothing (their block rows/columns are
    suppressed); the robustifier rescales Omega by gamma(sqrt(chi2)).
    """
    values = [v.value for v in variables]
    direct = factor.hb_contribution(values)
    layout = H.layout
    if direct is not None:
        h_blocks, b_blocks, chi2 = direct
        gamma, _ = robust.robustify(kernel, chi2)
        for (a, c), M in h_blocks.items():
            ka, kc = factor.variables[a], factor.variables[c]
            if variables[a].status == VariableStatus.FIXED or variables[c].status == VariableStatus.FIXED:
                continue
            H.accumulate_block(block_index[ka], block_index[kc], gamma * np.asarray(M))
        for a, vec in b_blocks.items():
            if variables[a].status == VariableStatus.FIXED:
                continue
            sl = layout.slice_of(block_index[factor.variables[a]])
            b[sl] += gamma * np.asarray(vec)
        return chi2

    lin = linearize(factor, variables)
    if lin is None:
        return None
    e = lin.error
    omega = factor.information
    chi2 = float(e @ omega @ e)
    gamma, _ = robust.robustify(kernel, chi2)
    omega_t = gamma * omega
    locs = sorted(lin.jacobians)
    jt_om = {a: lin.jacobians[a].T @ omega_t for a in locs}
    for a in locs:
        sl = layout.slice_of(block_index[factor.variables[a]])
        ba = jt_om[a] @ e
        if ba.shape[0] != sl.stop - sl.start:
            raise DimensionMismatch(
                f"factor {factor.key}: jacobian block for variable {factor.variables[a]} "
                f"has {ba.shape[0]} rows, layout expects {sl.stop - sl.start}"
            )
        b[sl] += ba
    for ai, a in enumerate(locs):
        for c in locs[: ai + 1]:
            H.accumulate_block(
                block_index[factor.variables[a]],
                block_index[factor.variables[c]],
                jt_om[a] @ lin.jacobians[c],
            )
    return chi2


def update_solution(graph, dx, active, layout):
    """Apply the solved perturbation: each Active variable gets its slice."""
    dx = np.asarray(dx, dtype=float)
    if dx.size != layout.total_dim:
        raise DimensionMismatch(f"dx has {dx.size} entries, layout expects {layout.total_dim}")
    for i, var in enumerate(active):
        var.value = mf.boxplus(var.value, dx[layout.slice_of(i)])


class _Workspace:
    """Active-variable indexing shared by all iterations of a solve."""

    def __init__(self, graph):
        self.graph = graph
        self.active = [
            v for v in graph.solver_variables() if v.status == VariableStatus.ACTIVE
        ]
        if not self.active:
            raise ValueError("no Active variable to optimize")
        self.block_index = {v.key: i for i, v in enumerate(self.active)}
        self.layout = sb.BlockLayout([v.perturbation_dim for v in self.active])
        self.perm = None  # fill-reducing ordering, fixed after the first build

    def iter_factors(self):
        for entry in self.graph.solver_factor_entries():
            if not self.graph.factor_is_active(entry):
                continue
            if hasattr(entry, "iterate"):
                yield from entry.iterate()
            else:
                yield entry

    def kernel_of(self, factor, policy):
        if factor.kernel is not None:
            return factor.kernel
        if policy is not None:
            return policy.kernel_for(factor)
        return robust.QUADRATIC

    def build(self, policy):
        H = sb.BlockSparseMatrix(self.layout)
        b = np.zeros(self.layout.total_dim)
        cost = 0.0
        n_in = n_out = n_inv = 0
        for factor in self.iter_factors():
            variables = [self.graph.resolve(k) for k in factor.variables]
            kernel = self.kernel_of(factor, policy)
            chi2 = update_Hb(H, b, factor, variables, kernel, self.block_index)
            if chi2 is None:
                n_inv += 1
                continue
            _, rho = robust.robustify(kernel, chi2)
            cost += 2.0 * rho
            if math.sqrt(chi2) <= kernel.c:
                n_in += 1
            else:
                n_out += 1
        if n_in + n_out == 0:
            raise AllFactorsInvalid("no valid factor at the current estimate")
        return H, b, cost, (n_in, n_out, n_inv)

    def cost_only(self, policy):
        """Robust total cost without touching H/b (used by the LM inner loop)."""
        cost = 0.0
        for factor in self.iter_factors():
            values = [self.graph.resolve(k).value for k in factor.variables]
            e = factor.error(values)
            if e is None:
                continue
            chi2 = float(e @ factor.information @ e)
            kernel = self.kernel_of(factor, policy)
            _, rho = robust.robustify(kernel, chi2)
            cost += 2.0 * rho
        return cost

    def ordering(self, H, method):
        if self.perm is None:
            self.perm = sb.ordering_for(H, method)
        return self.perm

    def solve_system(self, H, rhs, method):
        perm = self.ordering(H, method)
        try:
            return sb.factorize(H, perm).solve(rhs)
        except NotPositiveDefinite as exc:
            key = self.active[exc.block].key if exc.block < len(self.active) else exc.block
            raise NotPositiveDefinite(
                exc.block,
                f"H is not positive definite around variable {key}; the gauge is "
                f"likely unconstrained - fix at least one variable (e.g. --fix first)",
            ) from None


def _maybe_fix_first(graph, config):
    if not config.auto_fix_first:
        return
    variables = graph.solver_variables()
    if any(v.status == VariableStatus.FIXED for v in variables):
        return
    poses = [v for v in variables if isinstance(v.value, (mf.Isometry3, mf.Isometry2))]
    target = poses[0] if poses else variables[0]
    target.status = VariableStatus.FIXED


def _converged(prev, cur, eps):
    if not math.isfinite(prev):
        return False
    return abs(prev - cur) <= eps * max(1.0, prev)


def gauss_newton(graph, config: SolverConfig, policy=None):
    """Plain or damped Gauss-Newton; returns per-iteration stats."""
    config.validate()
    _maybe_fix_first(graph, config)
    ws = _Workspace(graph)
    damped = config.algorithm == "dgn"
    stats = []
    prev_cost = math.inf
    for it in range(1, config.max_iterations + 1):
        t0 = time.perf_counter()
        H, b, cost, (n_in, n_out, n_inv) = ws.build(policy)
        t1 = time.perf_counter()
        Hs = H.add_scaled_diagonal(config.dgn_lambda, scaled=False) if damped else H
        dx = ws.solve_system(Hs, -b, config.ordering)
        t2 = time.perf_counter()
        update_solution(graph, dx, ws.active, ws.layout)
        t3 = time.perf_counter()
        stats.append(
            IterationStats(
                it,
                cost,
                config.dgn_lambda if damped else None,
                n_in,
                n_out,
                n_inv,
                t1 - t0,
                t2 - t1,
                t3 - t2,
            )
        )
        if _converged(prev_cost, cost, config.epsilon):
            break
        prev_cost = cost
    return stats


def levenberg_marquardt(graph, config: SolverConfig, policy=None):
    """LM with backup-stack roll-back; accepted chi2 sequence is non-increasing."""
    config.validate()
    _maybe_fix_first(graph, config)
    ws = _Workspace(graph)
    lmc = config.lm
    stats = []
    lam = None
    prev_cost = math.inf
    for it in range(1, config.max_iterations + 1):
        t0 = time.perf_counter()
        H, b, cost_internal, (n_in, n_out, n_inv) = ws.build(policy)
        t1 = time.perf_counter()
        if lam is None:
            lam = lmc.lambda_init_tau * max(H.max_abs_diagonal(), np.finfo(float).tiny)
        if _converged(prev_cost, cost_internal, config.epsilon):
            stats.append(
                IterationStats(it, cost_internal, lam, n_in, n_out, n_inv, t1 - t0, 0.0, 0.0)
            )
            break
        accepted = False
        cost_new = cost_internal
        t_solve = t_update = 0.0
        rejects = 0
        while rejects < lmc.max_inner:
            ts = time.perf_counter()
            Hd = H.add_scaled_diagonal(lam, scaled=(lmc.damping == "diag_scaled"))
            try:
                dx = ws.solve_system(Hd, -b, config.ordering)
            except NotPositiveDefinite:
                lam *= lmc.lambda_up
                rejects += 1
                t_solve += time.perf_counter() - ts
                continue
            t_solve += time.perf_counter() - ts
            tu = time.perf_counter()
            graph.push_values()
            update_solution(graph, dx, ws.active, ws.layout)
            cost_new = ws.cost_only(policy)
            if cost_new < cost_internal:
                graph.discard_top()
                lam *= lmc.lambda_down
                accepted = True
                t_update += time.perf_counter() - tu
                break
            graph.pop_values()
            lam *= lmc.lambda_up
            rejects += 1
            t_update += time.perf_counter() - tu
        stats.append(
            IterationStats(
                it,
                cost_new if accepted else cost_internal,
                lam,
                n_in,
                n_out,
                n_inv,
                t1 - t0,
                t_solve,
                t_update,
            )
        )
        if not accepted:
            break
        prev_cost = cost_internal
    return stats


def solve(graph, config: SolverConfig, policy=None):
    if config.algorithm in ("gn", "dgn"):
        return gauss_newton(graph, config, policy)
    if config.algorithm == "lm":
        return levenberg_marquardt(graph, config, policy)
    raise ValueError(f"unknown algorithm {config.algorithm!r}")


def total_chi2(graph, policy=None):
    """Robust total cost of a graph at its current values (2*rho per factor)."""
    return _Workspace(graph).cost_only(policy)


def compute_covariance(graph, targets, config: SolverConfig | None = None, policy=None):
    """Marginal covariance blocks of H^{-1} for the target variable keys.

    With config.recompute_H_inliers the robustifier bias is undone first: H
    is rebuilt with the quadratic kernel over factors whose u <= c only.
    """
    config = config or SolverConfig()
    ws = _Workspace(graph)
    if config.recompute_H_inliers:
        H = sb.BlockSparseMatrix(ws.layout)
        b = np.zeros(ws.layout.total_dim)
        kept = 0
        for factor in ws.iter_factors():
            variables = [graph.resolve(k) for k in factor.variables]
            kernel = ws.kernel_of(factor, policy)
            e = factor.error([v.value for v in variables])
            if e is None:
                continue
            chi2 = float(e @ factor.information @ e)
            if math.sqrt(chi2) > kernel.c:
                continue
            update_Hb(H, b, factor, variables, robust.QUADRATIC, ws.block_index)
            kept += 1
        if kept == 0:
            raise AllFactorsInvalid("no inlier factor for covariance recomputation")
    else:
        H, _, _, _ = ws.build(policy)
    perm = ws.ordering(H, config.ordering)
    wanted = [ws.block_index[k] for k in targets]
    blocks = sb.marginal_covariance(H, perm, wanted)
    return dict(zip(targets, blocks))
