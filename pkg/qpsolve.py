"""Minimum-variance balancing weights for one treatment path.

    minimize    sum(w ** 2)
    subject to  b - delta <= A w <= b + delta,  sum(w) = 1,  w >= 0

The solver is an over-relaxed ADMM on the splitting (w, [w; A w]) whose
projection step is an exact simplex projection plus an interval clip. Every
few iterations the current support and active rows are handed to an
active-set polish that solves the reduced equality KKT system directly; a
polished point that passes every KKT check ends the solve. Infeasibility is
certified by a phase-1 LP that minimizes total interval violation; when ADMM
runs out of iterations, a primal active-set pass started from the LP point
finishes the solve.

Dual convention (all multipliers nonnegative):

    L = |w|^2 - lam_lo'(A w - l) - lam_up'(u - A w) - nu (1'w - 1) - mu'w
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from joblib import Parallel, delayed
from scipy import linalg, optimize

logger = logging.getLogger('bao.qpsolve')

solver_statuses = ('optimal', 'infeasible', 'max_iter')

_POLISH_TOL = 1e-11
_EQ_TOL = 1e-14


@dataclass(frozen=True)
class SolverOptions:
    eps: float = 1e-8
    max_iter: int | None = None
    rho: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6
    polish_every: int = 25
    feasibility_tol: float = 1e-7
    ladder: tuple = (1.0, 2.0, 4.0, 8.0, 16.0, 32.0)

    def iteration_cap(self, m, K):
        return self.max_iter or 100 * (m + K)

    def to_dict(self):
        return {
            'eps': self.eps,
            'max_iter': self.max_iter,
            'rho': self.rho,
            'sigma': self.sigma,
            'alpha': self.alpha,
            'polish_every': self.polish_every,
            'feasibility_tol': self.feasibility_tol,
            'ladder': list(self.ladder),
        }


@dataclass(frozen=True, eq=False)
class QpProblem:
    path: object
    members: np.ndarray
    A: np.ndarray
    b: np.ndarray
    delta: np.ndarray
    row_labels: tuple = ()

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        b = np.atleast_1d(np.asarray(self.b, dtype=float))
        delta = np.atleast_1d(np.asarray(self.delta, dtype=float))
        members = np.asarray(self.members, dtype=np.intp)
        if A.shape[1] < 1:
            raise ValueError('QpProblem needs at least one unit')
        if members.shape != (A.shape[1],):
            raise ValueError(f'{members.size} members for {A.shape[1]} constraint columns')
        if b.shape != (A.shape[0],) or delta.shape != (A.shape[0],):
            raise ValueError('targets and tolerances must have one entry per constraint row')
        if np.isnan(delta).any() or (delta < 0).any():
            raise ValueError('tolerances must be nonnegative')
        if not np.isfinite(A).all() or not np.isfinite(b).all():
            raise ValueError('constraint matrix and targets must be finite')
        object.__setattr__(self, 'A', A)
        object.__setattr__(self, 'b', b)
        object.__setattr__(self, 'delta', delta)
        object.__setattr__(self, 'members', members)

    @property
    def m(self):
        return self.A.shape[1]

    @property
    def K(self):
        return self.A.shape[0]

    @property
    def lower(self):
        return self.b - self.delta

    @property
    def upper(self):
        return self.b + self.delta

    def scaled(self, multiplier):
        return replace(self, delta=self.delta * float(multiplier))


@dataclass(frozen=True)
class KktReport:
    stationarity: float
    primal: float
    complementarity: float

    @property
    def worst(self):
        return max(self.stationarity, self.primal, self.complementarity)

    def ok(self, tol=1e-6):
        return self.worst <= tol

    def to_dict(self):
        return {'stationarity': self.stationarity, 'primal': self.primal,
                'complementarity': self.complementarity}


@dataclass(frozen=True, eq=False)
class WeightSolution:
    path: object
    members: np.ndarray
    weights: np.ndarray
    status: str
    lambda_lower: np.ndarray
    lambda_upper: np.ndarray
    nu: float
    mu: np.ndarray
    kkt: KktReport
    iterations: int = 0
    violated: int | None = None
    violation: float = 0.0
    polished: bool = False
    extras: dict = field(default_factory=dict)

    @property
    def m(self):
        return self.weights.size

    @property
    def objective(self):
        return float(self.weights @ self.weights)

    @property
    def ess(self):
        total = self.weights.sum()
        return float(total * total / (self.weights @ self.weights))

    @property
    def cv(self):
        mean = self.weights.mean()
        return float(self.weights.std() / mean) if mean > 0 else math.nan

    @property
    def max_weight(self):
        return float(self.weights.max())

    @property
    def optimal(self):
        return self.status == 'optimal'

    def to_dict(self):
        return {
            'path': str(self.path),
            'status': self.status,
            'm': self.m,
            'objective': self.objective,
            'ess': self.ess,
            'cv': self.cv,
            'max_weight': self.max_weight,
            'iterations': self.iterations,
            'polished': self.polished,
            'violated': self.violated,
            'violation': self.violation,
            'nu': self.nu,
            'kkt': self.kkt.to_dict(),
        }


def project_simplex(v):
    """Euclidean projection onto {w >= 0, sum(w) = 1}; ties keep index order."""
    order = np.argsort(-v, kind='stable')
    u = v[order]
    css = np.cumsum(u) - 1.0
    ind = np.arange(1, v.size + 1)
    r = ind[u - css / ind > 0][-1]
    theta = css[r - 1] / r
    return np.maximum(v - theta, 0.0)


def _multipliers(A, weights, lam_signed, support):
    """Recover nu and mu from stationarity given the interval multipliers."""
    g = 2.0 * weights - A.T @ lam_signed
    nu = float(g[support].mean()) if support.any() else float(g.min())
    mu = np.maximum(g - nu, 0.0)
    mu[support] = 0.0
    return nu, mu


def kkt_check(problem, solution):
    """KKT residuals (max-norm) in the problem's own units."""
    w = solution.weights
    finite = np.isfinite(problem.delta)
    A = problem.A[finite]
    lo, hi = problem.lower[finite], problem.upper[finite]
    lam_lo = solution.lambda_lower[finite]
    lam_up = solution.lambda_upper[finite]

    stationarity = 2.0 * w - A.T @ (lam_lo - lam_up) - solution.nu - solution.mu
    Aw = A @ w
    primal = max(
        float(np.max(-w, initial=0.0)),
        abs(float(w.sum()) - 1.0),
        float(np.max(lo - Aw, initial=0.0)),
        float(np.max(Aw - hi, initial=0.0)),
    )
    complementarity = max(
        float(np.max(np.abs(lam_lo * (Aw - lo)), initial=0.0)),
        float(np.max(np.abs(lam_up * (hi - Aw)), initial=0.0)),
        float(np.max(np.abs(solution.mu * w), initial=0.0)),
    )
    return KktReport(stationarity=float(np.max(np.abs(stationarity), initial=0.0)),
                     primal=primal, complementarity=complementarity)


def dual_objective(problem, solution):
    """Value of the dual with rho(v) = -v^2/4; equals the primal when mu = 0."""
    finite = np.isfinite(problem.delta)
    lam = (solution.lambda_lower - solution.lambda_upper)[finite]
    A, b, d = problem.A[finite], problem.b[finite], problem.delta[finite]
    v = A.T @ lam + solution.nu
    return float(-(v ** 2).sum() / 4.0 + b @ lam + solution.nu - d @ np.abs(lam))


class _ScaledProblem:
    """Rows with finite tolerance, each scaled to unit max-norm."""

    def __init__(self, problem):
        self.finite = np.isfinite(problem.delta)
        A = problem.A[self.finite]
        scale = np.abs(A).max(axis=1) if A.size else np.ones(0)
        scale[scale == 0] = 1.0
        self.scale = scale
        self.A = A / scale[:, None]
        self.lo = problem.lower[self.finite] / scale
        self.hi = problem.upper[self.finite] / scale
        self.eq = (self.hi - self.lo) <= _EQ_TOL * np.maximum(1.0, np.abs(self.lo))

    @property
    def K(self):
        return self.A.shape[0]

    def unscale(self, lam_scaled, K_full):
        lam = np.zeros(K_full)
        lam[self.finite] = lam_scaled / self.scale
        return lam


def _reduced_system(sp, support, lower, upper):
    """Equality KKT system of the working set restricted to the support."""
    rows = np.flatnonzero(lower | upper)
    cols = np.flatnonzero(support)
    M = np.vstack([sp.A[rows][:, cols], np.ones((1, cols.size))])
    rhs = 2.0 * np.append(np.where(lower[rows], sp.lo[rows], sp.hi[rows]), 1.0)
    G = M @ M.T
    theta = linalg.lstsq(G, rhs, lapack_driver='gelsy')[0]
    consistent = np.max(np.abs(G @ theta - rhs)) <= 1e-9 * max(1.0, np.abs(rhs).max())
    return rows, cols, M, theta, consistent


def _polish(sp, support, lower, upper, max_rounds):
    """Active-set refinement from a guessed support and working set.

    Returns (weights, signed multipliers) on success, None otherwise.
    """
    A, lo, hi, eq = sp.A, sp.lo, sp.hi, sp.eq
    m = A.shape[1]
    support = support.copy()
    lower = lower.copy() | eq
    upper = upper.copy() & ~eq
    added = [int(k) for k in np.flatnonzero((lower | upper) & ~eq)]

    for _ in range(max_rounds):
        if not support.any():
            return None
        rows, cols, M, theta, consistent = _reduced_system(sp, support, lower, upper)
        if not consistent:
            # The newest working row replaces an older one it conflicts with
            for k in reversed(added[:-1]):
                trial_lower, trial_upper = lower.copy(), upper.copy()
                trial_lower[k] = trial_upper[k] = False
                if _reduced_system(sp, support, trial_lower, trial_upper)[4]:
                    lower, upper = trial_lower, trial_upper
                    added.remove(k)
                    break
            else:
                return None
            continue

        w = np.zeros(m)
        w[cols] = M.T @ theta / 2.0
        lam = np.zeros(sp.K)
        lam[rows] = theta[:-1]
        nu = theta[-1]

        # Negative weights leave the support
        if w[cols].min() < -_POLISH_TOL:
            support[cols[np.argmin(w[cols])]] = False
            continue

        # Rows outside the working set must hold
        Aw = A @ w
        free = ~(lower | upper)
        below = np.where(free, lo - Aw, -np.inf)
        above = np.where(free, Aw - hi, -np.inf)
        if max(below.max(initial=-np.inf), above.max(initial=-np.inf)) > _POLISH_TOL:
            if below.max() >= above.max():
                k = int(np.argmax(below))
                lower[k] = True
            else:
                k = int(np.argmax(above))
                upper[k] = True
            added.append(k)
            continue

        # Multiplier signs on inequality rows
        wrong = np.where(lower & ~eq, -lam, -np.inf)
        wrong = np.maximum(wrong, np.where(upper, lam, -np.inf))
        if wrong.max(initial=-np.inf) > _POLISH_TOL:
            k = int(np.argmax(wrong))
            lower[k] = upper[k] = False
            if k in added:
                added.remove(k)
            continue

        # Units held at zero must not want positive weight
        pull = np.where(support, -np.inf, nu + A.T @ lam)
        if pull.max(initial=-np.inf) > _POLISH_TOL:
            support[np.argmax(pull)] = True
            continue

        w = np.maximum(w, 0.0)
        return w / w.sum(), lam
    return None


def _active_set(sp, start, max_rounds):
    """Primal active-set method from a feasible point.

    Constraints join the working set only when they block a step, so the
    working set stays linearly independent and every reduced system is
    solvable. Returns (weights, signed multipliers), or None when the rounds
    run out.
    """
    A, lo, hi, eq = sp.A, sp.lo, sp.hi, sp.eq
    m, K = A.shape[1], sp.K
    w = np.maximum(start, 0.0)
    w /= w.sum()
    at_zero = np.zeros(m, dtype=bool)
    lower = eq.copy()
    upper = np.zeros(K, dtype=bool)

    for _ in range(max_rounds):
        rows, cols, M, theta, _ = _reduced_system(sp, ~at_zero, lower, upper)
        target = np.zeros(m)
        target[cols] = M.T @ theta / 2.0
        step = target - w

        if np.abs(step).max() <= _POLISH_TOL:
            lam = np.zeros(K)
            lam[rows] = theta[:-1]
            nu = theta[-1]
            row_wrong = np.maximum(np.where(lower & ~eq, -lam, -np.inf), np.where(upper, lam, -np.inf))
            zero_wrong = np.where(at_zero, nu + A.T @ lam, -np.inf)
            worst_row = row_wrong.max(initial=-np.inf)
            worst_zero = zero_wrong.max(initial=-np.inf)
            if max(worst_row, worst_zero) <= _POLISH_TOL:
                w = np.maximum(target, 0.0)
                return w / w.sum(), lam
            if worst_row >= worst_zero:
                k = np.argmax(row_wrong)
                lower[k] = upper[k] = False
            else:
                at_zero[np.argmax(zero_wrong)] = False
            continue

        alpha, block = 1.0, None
        shrinking = np.flatnonzero(~at_zero & (step < -_EQ_TOL))
        if shrinking.size:
            ratios = np.maximum(w[shrinking], 0.0) / -step[shrinking]
            j = int(np.argmin(ratios))
            if ratios[j] < alpha:
                alpha, block = ratios[j], ('zero', shrinking[j])
        Aw, As = A @ w, A @ step
        for k in np.flatnonzero(~(lower | upper) & (np.abs(As) > _EQ_TOL)):
            side = 'lower' if As[k] < 0 else 'upper'
            bound = lo[k] if side == 'lower' else hi[k]
            ratio = max((bound - Aw[k]) / As[k], 0.0)
            if ratio < alpha:
                alpha, block = ratio, (side, k)

        w = w + alpha * step
        if block is not None:
            kind, k = block
            if kind == 'zero':
                at_zero[k] = True
                w[k] = 0.0
            elif kind == 'lower':
                lower[k] = True
            else:
                upper[k] = True
    return None


def _phase_one(sp):
    """Minimum total interval violation over the simplex (scaled units)."""
    m, K = sp.A.shape[1], sp.K
    c = np.concatenate([np.zeros(m), np.ones(2 * K)])
    eye = np.eye(K)
    A_ub = np.vstack([
        np.hstack([-sp.A, -eye, np.zeros((K, K))]),
        np.hstack([sp.A, np.zeros((K, K)), -eye]),
    ])
    b_ub = np.concatenate([-sp.lo, sp.hi])
    A_eq = np.concatenate([np.ones(m), np.zeros(2 * K)])[None, :]
    res = optimize.linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=[1.0],
                           bounds=(0, None), method='highs')
    if res.status != 0:
        raise RuntimeError(f'phase-1 LP failed: {res.message}')
    slack = res.x[m:m + K] + res.x[m + K:]
    return res.x[:m], float(res.fun), int(np.argmax(slack)), slack


def _make_solution(problem, sp, weights, lam_scaled, status, iterations, polished=False,
                   violated=None, violation=0.0):
    lam = sp.unscale(lam_scaled, problem.K)
    support = weights > 0
    A = problem.A.copy()
    A[~sp.finite] = 0.0
    nu, mu = _multipliers(A, weights, lam, support)
    solution = WeightSolution(
        path=problem.path,
        members=problem.members,
        weights=weights,
        status=status,
        lambda_lower=np.maximum(lam, 0.0),
        lambda_upper=np.maximum(-lam, 0.0),
        nu=nu,
        mu=mu,
        kkt=KktReport(math.nan, math.nan, math.nan),
        iterations=iterations,
        polished=polished,
        violated=violated,
        violation=violation,
    )
    return replace(solution, kkt=kkt_check(problem, solution))


def _uniform(problem):
    m = problem.m
    weights = np.full(m, 1.0 / m)
    zeros = np.zeros(problem.K)
    solution = WeightSolution(
        path=problem.path, members=problem.members, weights=weights, status='optimal',
        lambda_lower=zeros, lambda_upper=zeros.copy(), nu=2.0 / m, mu=np.zeros(m),
        kkt=KktReport(math.nan, math.nan, math.nan), polished=True)
    return replace(solution, kkt=kkt_check(problem, solution))


def solve_path(problem, options=None):
    options = options or SolverOptions()
    sp = _ScaledProblem(problem)
    m, K = problem.m, sp.K
    if K == 0:
        return _uniform(problem)

    # Straight active-set attempt from the uniform point
    polished = _polish(sp, np.ones(m, dtype=bool), np.zeros(K, dtype=bool), np.zeros(K, dtype=bool),
                       max_rounds=m + 4 * K + 10)
    if polished is not None:
        return _make_solution(problem, sp, polished[0], polished[1], 'optimal', 0, polished=True)

    lp_weights, violation, worst, _ = _phase_one(sp)
    if violation > options.feasibility_tol:
        logger.debug('path %s infeasible: total violation %.3g, worst row %d', problem.path, violation, worst)
        worst_row = int(np.flatnonzero(sp.finite)[worst])
        return _make_solution(problem, sp, lp_weights, np.zeros(K), 'infeasible', 0,
                              violated=worst_row, violation=violation)

    solution = _admm(problem, sp, options)
    if solution.optimal and solution.kkt.ok():
        return solution
    refined = _active_set(sp, lp_weights, max_rounds=20 * (m + K) + 100)
    if refined is not None:
        candidate = _make_solution(problem, sp, refined[0], refined[1], 'optimal', solution.iterations,
                                   polished=True)
        if candidate.kkt.ok():
            logger.debug('path %s finished by the active-set pass from the phase-1 point', problem.path)
            return candidate
    logger.warning('path %s unsolved after %d iterations; KKT residual %.3g',
                   problem.path, solution.iterations, solution.kkt.worst)
    return replace(solution, status='max_iter')


def _admm(problem, sp, options):
    A, lo, hi = sp.A, sp.lo, sp.hi
    m, K = A.shape[1], sp.K
    alpha, sigma, eps = options.alpha, options.sigma, options.eps
    rho_s = options.rho
    rho_c = np.where(sp.eq, 1e3 * options.rho, options.rho)
    a = 2.0 + sigma + rho_s
    chol = linalg.cho_factor(a * np.diag(1.0 / rho_c) + A @ A.T)

    def solve_linear(v):
        return (v - A.T @ linalg.cho_solve(chol, A @ v)) / a

    x = np.full(m, 1.0 / m)
    z_s = x.copy()
    z_c = np.clip(A @ x, lo, hi)
    y_s = np.zeros(m)
    y_c = np.zeros(K)
    best = (math.inf, z_s, y_c)
    cap = options.iteration_cap(m, K)

    for it in range(1, cap + 1):
        xt = solve_linear(sigma * x + rho_s * z_s - y_s + A.T @ (rho_c * z_c - y_c))
        zt_c = A @ xt
        x = alpha * xt + (1.0 - alpha) * x
        v_s = alpha * xt + (1.0 - alpha) * z_s
        v_c = alpha * zt_c + (1.0 - alpha) * z_c
        z_s_new = project_simplex(v_s + y_s / rho_s)
        z_c_new = np.clip(v_c + y_c / rho_c, lo, hi)
        y_s = y_s + rho_s * (v_s - z_s_new)
        y_c = y_c + rho_c * (v_c - z_c_new)
        z_s, z_c = z_s_new, z_c_new

        Ax = A @ x
        prim = max(np.abs(x - z_s).max(), np.abs(Ax - z_c).max(initial=0.0))
        dual = np.abs(2.0 * x + y_s + A.T @ y_c).max()
        prim_tol = eps + eps * max(np.abs(x).max(), np.abs(Ax).max(initial=0.0), np.abs(z_s).max())
        dual_tol = eps + eps * max(2.0 * np.abs(x).max(), np.abs(y_s).max(), np.abs(A.T @ y_c).max())
        if max(prim, dual) < best[0]:
            best = (max(prim, dual), z_s.copy(), y_c.copy())
        converged = prim <= prim_tol and dual <= dual_tol

        if converged or it % options.polish_every == 0:
            guess_lower = (z_c <= lo) & (y_c < 0)
            guess_upper = (z_c >= hi) & (y_c > 0)
            polished = _polish(sp, z_s > 0, guess_lower, guess_upper, max_rounds=4 * (K + 1) + 50)
            if polished is not None:
                logger.debug('path %s polished after %d iterations', problem.path, it)
                return _make_solution(problem, sp, polished[0], polished[1], 'optimal', it, polished=True)
        if converged:
            logger.debug('path %s converged in %d iterations without polish', problem.path, it)
            return _make_solution(problem, sp, z_s, -y_c, 'optimal', it)

        # Rebalance rho when one residual lags the other by a wide margin
        if it % options.polish_every == 0 and prim > 0 and dual > 0:
            ratio = math.sqrt((prim / prim_tol) / (dual / dual_tol))
            if not 0.2 <= ratio <= 5.0:
                ratio = min(max(ratio, 1e-3), 1e3)
                rho_s *= ratio
                rho_c = rho_c * ratio
                a = 2.0 + sigma + rho_s
                chol = linalg.cho_factor(a * np.diag(1.0 / rho_c) + A @ A.T)

    logger.debug('path %s hit the ADMM iteration cap (%d); residual %.3g', problem.path, cap, best[0])
    return _make_solution(problem, sp, best[1], -best[2], 'max_iter', cap)


def solve_simultaneous(problems, prevalences=None, options=None, n_jobs=1):
    """Solve the joint program over all paths.

    The joint objective sum_paths P_S(path)^2 * sum(w^2) and its constraints
    separate across paths, so each path's solution is solve_path's.
    """
    paths = list(problems)
    if n_jobs and n_jobs > 1 and len(paths) > 1:
        solved = Parallel(n_jobs=n_jobs, prefer='threads')(
            delayed(solve_path)(problems[path], options) for path in paths)
    else:
        solved = [solve_path(problems[path], options) for path in paths]
    solutions = dict(zip(paths, solved))

    if prevalences is not None:
        joint = sum(prevalences[path] ** 2 * sol.objective for path, sol in solutions.items())
        logger.debug('joint objective %.6g over %d paths', joint, len(paths))
    return solutions


def relax_to_feasible(problem, ladder, options=None):
    """Scale tolerances along the ladder until the problem becomes feasible.

    Returns (multiplier, solution); multiplier is None when every entry is
    infeasible or the solver stops without a certified solution.
    """
    ladder = tuple(float(v) for v in ladder)
    if not ladder:
        raise ValueError('relaxation ladder is empty')
    if any(not math.isfinite(v) or v < 0 for v in ladder):
        raise ValueError('ladder entries must be finite and nonnegative')
    if any(b <= a for a, b in zip(ladder, ladder[1:])):
        raise ValueError('ladder must be strictly increasing')

    solution = None
    for multiplier in ladder:
        solution = solve_path(problem.scaled(multiplier), options)
        if solution.status == 'max_iter':
            logger.error('path %s: no certified solution at tolerance x%g', problem.path, multiplier)
            return None, solution
        if solution.optimal:
            if multiplier != ladder[0]:
                logger.warning('path %s feasible after relaxing tolerances x%g', problem.path, multiplier)
            return multiplier, solution
    logger.warning('path %s infeasible at every ladder entry (up to x%g)', problem.path, ladder[-1])
    return None, solution
