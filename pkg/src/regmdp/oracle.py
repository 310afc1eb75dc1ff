"""Ground truth via soft value iteration, plus the optimal duals of both saddle problems."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.special import logsumexp, softmax

from .errors import (
    MaxIterExceededError,
    NonPositiveTauError,
    NonPositiveValueError,
    SolveFailureError,
    ValidationError,
)
from .mdp import MdpModel, _check_policy, _check_vector, transition_under_policy


@dataclass(frozen=True, eq=False)
class OracleSolution:
    v_star: np.ndarray
    pi_star: np.ndarray
    u_circ: np.ndarray
    u_star: np.ndarray
    tau: float
    alpha: float
    weight: np.ndarray
    iterations: int = 0
    residual: float = 0.0


def _check_tau(tau):
    if not tau > 0:
        raise NonPositiveTauError(f"tau must be positive, got {tau}")


def _q_values(mdp: MdpModel, v: np.ndarray) -> np.ndarray:
    return mdp.reward + mdp.discount * mdp.apply_P(v)


def soft_bellman_operator(mdp: MdpModel, tau: float, v) -> np.ndarray:
    """``phi(v)_s = tau * logsumexp_a((r[s, a] + gamma (P_a v)_s) / tau)``, max-subtracted."""
    _check_tau(tau)
    v = _check_vector(mdp, v)
    return tau * logsumexp(_q_values(mdp, v) / tau, axis=1)


def default_vi_tol(mdp: MdpModel) -> float:
    return 1e-12 * (1.0 + np.abs(mdp.reward).max() / (1.0 - mdp.discount))


def solve_value_iteration(mdp: MdpModel, tau: float, tol: float | None = None,
                          max_iter: int = 1_000_000, residuals: list | None = None) -> np.ndarray:
    """Iterate ``v <- phi(v)`` from zero until ``||phi(v) - v||_inf <= tol``.

    If ``residuals`` is a list, the sup-norm residual of every sweep is appended to it.
    Raises :class:`MaxIterExceededError` carrying the last residual otherwise.
    """
    _check_tau(tau)
    if tol is None:
        tol = default_vi_tol(mdp)
    if not tol > 0:
        raise ValidationError(f"tol must be positive, got {tol}")
    v = np.zeros(mdp.num_states)
    res = np.inf
    for _ in range(max_iter):
        new = tau * logsumexp(_q_values(mdp, v) / tau, axis=1)
        res = float(np.max(np.abs(new - v)))
        if residuals is not None:
            residuals.append(res)
        v = new
        if res <= tol:
            # the returned phi(v) has residual <= gamma * res by contraction
            return v
    raise MaxIterExceededError(
        f"value iteration stopped after {max_iter} sweeps with residual {res:.3e}",
        residual=res, iterations=max_iter)


def policy_from_value(mdp: MdpModel, tau: float, v) -> np.ndarray:
    """Softmax policy ``pi[s, a] ∝ exp((r[s, a] + gamma (P_a v)_s) / tau)``."""
    _check_tau(tau)
    v = _check_vector(mdp, v)
    return softmax(_q_values(mdp, v) / tau, axis=1)


def _factor_k_pi(mdp: MdpModel, pi: np.ndarray):
    k_pi = np.eye(mdp.num_states) - mdp.discount * transition_under_policy(mdp, pi)
    try:
        lu = scipy.linalg.lu_factor(k_pi, check_finite=True)
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise SolveFailureError(str(exc)) from exc
    return lu


def _solve_transposed(lu, rhs):
    x = scipy.linalg.lu_solve(lu, rhs, trans=1)
    if not np.all(np.isfinite(x)):
        raise SolveFailureError("K_pi^T solve produced non-finite values")
    return x


def optimal_dual_standard(mdp: MdpModel, pi_star, weight=None, *, _lu=None) -> np.ndarray:
    """``u°[s, a] = pi*[s, a] * (K_pi*^{-T} e)_s``, the dual of the linear-weight problem."""
    pi = _check_policy(mdp, pi_star, strict=True)
    e = np.ones(mdp.num_states) if weight is None else _check_vector(mdp, weight)
    if np.any(e <= 0):
        raise ValidationError("weight vector must be strictly positive")
    lu = _lu if _lu is not None else _factor_k_pi(mdp, pi)
    u_tilde = _solve_transposed(lu, e)
    return pi * u_tilde[:, None]


def optimal_dual_quadratic(mdp: MdpModel, pi_star, v_star, alpha: float, *, _lu=None) -> np.ndarray:
    """``u*[s, a] = pi*[s, a] * w_s`` with ``w = alpha K_pi*^{-T} v*``."""
    if not alpha > 0:
        raise ValidationError(f"alpha must be positive, got {alpha}")
    pi = _check_policy(mdp, pi_star, strict=True)
    v = _check_vector(mdp, v_star)
    lu = _lu if _lu is not None else _factor_k_pi(mdp, pi)
    w = alpha * _solve_transposed(lu, v)
    if np.any(w <= 0):
        raise NonPositiveValueError(
            f"alpha K^-T v* has a nonpositive entry ({w.min():.3e}); are rewards nonnegative?")
    return pi * w[:, None]


def primal_feasibility_residual(mdp: MdpModel, tau: float, v) -> np.ndarray:
    """``v - phi(v)``; ``v`` is primal feasible iff every entry is nonnegative."""
    v = _check_vector(mdp, v)
    return v - soft_bellman_operator(mdp, tau, v)


def solve_oracle(mdp: MdpModel, tau: float, alpha: float, weight=None, tol: float | None = None,
                 max_iter: int = 1_000_000) -> OracleSolution:
    """Compute ``v*``, ``pi*``, ``u°`` and ``u*`` for one ``(tau, alpha, e)``."""
    residuals: list[float] = []
    v_star = solve_value_iteration(mdp, tau, tol=tol, max_iter=max_iter, residuals=residuals)
    pi_star = policy_from_value(mdp, tau, v_star)
    e = np.ones(mdp.num_states) if weight is None else np.asarray(weight, dtype=float)
    lu = _factor_k_pi(mdp, pi_star)
    u_circ = optimal_dual_standard(mdp, pi_star, e, _lu=lu)
    u_star = optimal_dual_quadratic(mdp, pi_star, v_star, alpha, _lu=lu)
    return OracleSolution(v_star=v_star, pi_star=pi_star, u_circ=u_circ, u_star=u_star,
                          tau=float(tau), alpha=float(alpha), weight=e,
                          iterations=len(residuals), residual=residuals[-1])
