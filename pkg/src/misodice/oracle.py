"""Exact tabular ground truth for the occupancy-matching stage.

Everything here works on the full joint space ``(S, A)`` of a
:class:`TabularTeamMDP`. The regularised matching problem

    minimise   sum rho log(rho / rho_E) + alpha * sum rho log(rho / rho_U)
    subject to rho >= 0 satisfying the Bellman flow equations

is solved twice, by independent routes: a Newton solve of its dual in the
state-value table ``nu`` (with the inner maximiser over ``w`` substituted in
closed form) and a policy mirror-descent run on the primal. They must agree
before a result is returned.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, xlogy

from .data import Dataset
from .env import ConvergenceError, JointPolicy, TabularTeamMDP


class OracleDisagreement(RuntimeError):
    pass


@dataclass(frozen=True)
class OccupancyTable:
    rho: np.ndarray      # (S, A)

    def __post_init__(self):
        if np.any(self.rho < 0) or abs(self.rho.sum() - 1.0) > 1e-9:
            raise ValueError("an occupancy table is a non-negative table summing to 1")


def _table(rho):
    return rho.rho if isinstance(rho, OccupancyTable) else np.asarray(rho, dtype=float)


def exact_occupancy(mdp: TabularTeamMDP, policy) -> OccupancyTable:
    """Discounted state-action visitation of ``policy`` by a direct linear solve."""
    pi = policy.table if isinstance(policy, JointPolicy) else np.asarray(policy, dtype=float)
    P = np.einsum("sa,sat->st", pi, mdp.transition)
    d = np.linalg.solve(np.eye(mdp.n_states) - mdp.discount * P.T, (1.0 - mdp.discount) * mdp.init_dist)
    if not np.all(np.isfinite(d)):
        raise np.linalg.LinAlgError("flow system is numerically singular")
    rho = np.clip(d, 0.0, None)[:, None] * pi
    return OccupancyTable(rho / rho.sum())


def inflow(rho, mdp: TabularTeamMDP) -> np.ndarray:
    """``(1 - gamma) P0(s) + gamma * sum T(s | s', a') rho(s', a')``."""
    rho = _table(rho)
    return (1.0 - mdp.discount) * mdp.init_dist + mdp.discount * np.einsum("sa,sat->t", rho, mdp.transition)


def flow_residual(rho, mdp: TabularTeamMDP) -> float:
    rho = _table(rho)
    return float(np.max(np.abs(rho.sum(axis=1) - inflow(rho, mdp))))


def primal_objective(rho, rho_E, rho_U, alpha: float) -> float:
    """``KL(rho || rho_E) + alpha * KL(rho || rho_U)``; ``inf`` marks missing support."""
    rho, rho_E, rho_U = _table(rho), _table(rho_E), _table(rho_U)
    pos = rho > 0
    if np.any(pos & (rho_E <= 0)) or (alpha > 0 and np.any(pos & (rho_U <= 0))):
        return float("inf")
    kl_e = xlogy(rho, rho).sum() - xlogy(rho, np.where(pos, rho_E, 1.0)).sum()
    kl_u = xlogy(rho, rho).sum() - xlogy(rho, np.where(pos, rho_U, 1.0)).sum() if alpha > 0 else 0.0
    return float(kl_e + alpha * kl_u)


def empirical_occupancy(dataset: Dataset, mdp: TabularTeamMDP, gamma: float | None = None) -> np.ndarray:
    """``gamma**t``-weighted step frequencies of a dataset on the joint table."""
    tr = dataset.transitions(mdp.discount if gamma is None else gamma)
    s = mdp.state_of_obs(tr.obs)
    a = mdp.joint_action_index(tr.actions)
    out = np.zeros((mdp.n_states, mdp.n_joint_actions))
    np.add.at(out, (s, a), tr.weights)
    return out / out.sum()


# -- dual route -----------------------------------------------------------------

@dataclass(frozen=True)
class DiceSolution:
    nu: np.ndarray           # (S,)
    w: np.ndarray            # (S, A); zero where rho_U or rho_E vanishes
    rho: np.ndarray          # rho_U * w
    dual_value: float
    primal_value: float      # objective of the independent primal solve
    primal_rho: np.ndarray
    iterations: int


def _log_ratio(rho_E, rho_U):
    with np.errstate(divide="ignore"):
        return np.where(rho_U > 0, np.log(rho_E) - np.log(np.where(rho_U > 0, rho_U, 1.0)), -np.inf)


def dual_parts(nu, rho_E, rho_U, mdp, alpha):
    """Dual value, gradient and Hessian at ``nu``, plus the closed-form ``w``."""
    g = mdp.discount
    r = _log_ratio(rho_E, rho_U)
    A = r + g * (mdp.transition @ nu) - nu[:, None]
    live = np.isfinite(A) & (rho_U > 0)
    w = np.zeros_like(rho_U)
    w[live] = np.exp(A[live] / (1.0 + alpha) - 1.0)
    value = (1.0 - g) * mdp.init_dist @ nu + (1.0 + alpha) * np.sum(rho_U * w)
    # direction of A in nu for each cell: gamma * T(.|s,a) - e_s
    m = rho_U * w
    grad = (1.0 - g) * mdp.init_dist + g * np.einsum("sa,sat->t", m, mdp.transition) - m.sum(axis=1)
    V = g * mdp.transition.copy()
    V[np.arange(mdp.n_states), :, np.arange(mdp.n_states)] -= 1.0
    hess = np.einsum("sa,sai,saj->ij", m / (1.0 + alpha), V, V)
    return float(value), grad, hess, w


def solve_dual(rho_E, rho_U, mdp: TabularTeamMDP, alpha: float, tol: float = 1e-10, max_iter: int = 500):
    """Damped Newton descent of the dual in ``nu`` until the gradient norm is below ``tol``."""
    rho_E, rho_U = _table(rho_E), _table(rho_U)
    S = mdp.n_states
    nu = np.zeros(S)
    # states with no data support carry no free dual variable
    free = rho_U.sum(axis=1) > 0
    for it in range(max_iter):
        val, grad, hess, w = dual_parts(nu, rho_E, rho_U, mdp, alpha)
        if np.any(grad[~free] > 1e-12):
            raise ValueError("the data support admits no feasible flow (rho_U misses a reachable state)")
        gf = grad[free]
        if np.linalg.norm(gf) < tol:
            return nu, w, val, it
        H = hess[np.ix_(free, free)] + 1e-14 * np.eye(free.sum())
        step = np.zeros(S)
        step[free] = -np.linalg.solve(H, gf)
        t = 1.0
        while True:
            cand = nu + t * step
            cval = dual_parts(cand, rho_E, rho_U, mdp, alpha)[0]
            if cval <= val + 1e-4 * t * gf @ step[free] + 1e-14 * max(1.0, abs(val)) or t < 1e-12:
                break
            t *= 0.5
        nu = cand
    raise ConvergenceError(f"dual solve did not reach gradient norm {tol} in {max_iter} iterations")


# -- primal route -----------------------------------------------------------------

def solve_primal_mirror(rho_E, rho_U, mdp: TabularTeamMDP, alpha: float, tol: float = 1e-9,
                        max_iter: int = 20_000, step: float = 0.25):
    """Policy mirror descent on the primal.

    Occupancies are parametrised by policies supported on cells where both
    data distributions are positive. Each iteration evaluates the Q-function
    of the linearised objective ``grad f(rho_k)`` under ``pi_k`` and takes an
    exponentiated step ``pi <- pi * exp(-eta * Q)`` with
    ``eta = step / (1 + alpha)``. A fixed point has ``Q`` constant over each
    state's support, the first-order optimality condition of the convex
    program. Policies are kept in the log domain; the step is halved whenever
    the objective would rise.
    """
    rho_E, rho_U = _table(rho_E), _table(rho_U)
    support = (rho_E > 0) & (rho_U > 0)
    if not support.any(axis=1)[rho_U.sum(axis=1) > 0].all():
        raise ValueError("some data-supported state has no cell shared by rho_E and rho_U")
    g, S = mdp.discount, mdp.n_states
    eta = base = step / (1.0 + alpha)
    with np.errstate(divide="ignore"):
        c = np.where(support, np.log(np.where(support, rho_E, 1.0))
                     + alpha * np.log(np.where(support, rho_U, 1.0)), 0.0)
    dead = ~support.any(axis=1)
    logpi = np.where(support, 0.0, -np.inf)
    logpi[dead] = 0.0     # states off the data support: any policy, they stay unvisited

    def evaluate(lp):
        lp = lp - logsumexp(lp, axis=1, keepdims=True)
        pi = np.exp(lp)
        P = np.einsum("sa,sat->st", pi, mdp.transition)
        d = np.linalg.solve(np.eye(S) - g * P.T, (1.0 - g) * mdp.init_dist)
        if np.any(d[~dead] <= 0) or not np.all(np.isfinite(d)):
            raise ConvergenceError("primal iterate lost support on a data-supported state")
        d = np.clip(d, 0.0, None)
        with np.errstate(divide="ignore"):
            logrho = np.where(support, np.log(np.where(d > 0, d, 1.0))[:, None] + lp, -np.inf)
        rho = np.exp(logrho)
        obj = float(np.sum(rho * np.where(support, (1.0 + alpha) * logrho - c, 0.0)))
        return lp, pi, rho, logrho, obj

    logpi, pi, rho, logrho, obj = evaluate(logpi)
    for it in range(max_iter):
        G = np.where(support, (1.0 + alpha) * (1.0 + logrho) - c, 0.0)
        P = np.einsum("sa,sat->st", pi, mdp.transition)
        V = np.linalg.solve(np.eye(S) - g * P, (pi * G).sum(axis=1))
        Q = np.where(support, G + g * mdp.transition @ V, np.inf)
        Qmin = Q.min(axis=1, keepdims=True)
        Qmin[dead] = 0.0
        spread = np.where(support, Q - Qmin, 0.0).max(axis=1)
        scale = 1.0 + np.abs(np.where(support, Q, 0.0)).max()
        if spread[~dead].max() < tol * scale:
            return rho, obj, it
        while True:
            cand = evaluate(np.where(support, logpi - eta * (Q - Qmin), logpi))
            if cand[4] <= obj + 1e-15 * max(1.0, abs(obj)):
                break
            eta *= 0.5
            if eta < 1e-6 * base:
                # no descent left at working precision
                if spread[~dead].max() < 1e3 * tol * scale:
                    return rho, obj, it
                raise ConvergenceError(f"primal mirror descent stalled with stationarity gap {spread.max():.3g}")
        logpi, pi, rho, logrho, obj = cand
        eta = min(2.0 * eta, base)
    raise ConvergenceError(f"primal mirror descent did not reach stationarity {tol} in {max_iter} iterations")


def solve_dice_exact(rho_E, rho_U, mdp: TabularTeamMDP, alpha: float, tol: float = 1e-10,
                     agree_tol: float = 1e-6) -> DiceSolution:
    """Optimal ``nu``, ``w`` and ``rho* = w * rho_U`` with a primal cross-check."""
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    rho_E, rho_U = _table(rho_E), _table(rho_U)
    if np.any((rho_E > 0) & (rho_U <= 0)):
        raise ValueError("rho_U must be positive wherever rho_E is")
    nu, w, dual_value, iters = solve_dual(rho_E, rho_U, mdp, alpha, tol)
    rho_star = w * rho_U
    p_rho, p_val, _ = solve_primal_mirror(rho_E, rho_U, mdp, alpha)
    # strong duality: the dual minimum equals minus the primal minimum
    if abs(dual_value + p_val) > agree_tol:
        raise OracleDisagreement(
            f"dual value {dual_value:.12g} vs primal {-p_val:.12g} differ by {abs(dual_value + p_val):.3g}")
    return DiceSolution(nu, w, rho_star, dual_value, p_val, p_rho, iters)


def total_variation(p, q) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())
