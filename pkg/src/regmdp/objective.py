"""Primal-dual objectives, their derivatives, and the Lyapunov diagnostics.

Sign convention for the dual Hessian: :func:`hessian_u_block` returns
``H_s = diag(1/u_s) - (1/ũ_s) 11^T``, which is positive semi-definite; the
Hessian of ``E`` with respect to ``u_s`` is ``-tau * H_s``.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np
from scipy.special import softmax

from .errors import COutOfRangeError, NonPositiveDualError, NonPositiveTauError
from .mdp import MdpModel, _check_dual, _check_vector
from .oracle import OracleSolution


class GradientPair(NamedTuple):
    grad_v: np.ndarray
    grad_u: np.ndarray


def _positive_dual(u) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if not np.all(u > 0):
        raise NonPositiveDualError("dual variable must be strictly positive")
    return u


def _check_c(c):
    if not 0.0 <= c < 1.0:
        raise COutOfRangeError(f"c must lie in [0, 1), got {c}")


def _log_policy(u):
    return np.log(u) - np.log(u.sum(axis=1, keepdims=True))


def _entropy_term(u):
    return float(np.sum(u * _log_policy(u)))


def eval_E0(mdp: MdpModel, tau: float, weight, v, u) -> float:
    """Standard objective ``e.v + sum u (r - K v) - tau sum u log(u/ũ)``."""
    v = _check_vector(mdp, v)
    u = _positive_dual(_check_dual(mdp, u))
    e = _check_vector(mdp, weight)
    return float(e @ v + np.sum(u * (mdp.reward - mdp.apply_K(v))) - tau * _entropy_term(u))


def eval_E(mdp: MdpModel, tau: float, alpha: float, v, u) -> float:
    """Quadratically convexified objective: ``e.v`` replaced by ``alpha/2 |v|^2``."""
    v = _check_vector(mdp, v)
    u = _positive_dual(_check_dual(mdp, u))
    return float(0.5 * alpha * (v @ v) + np.sum(u * (mdp.reward - mdp.apply_K(v)))
                 - tau * _entropy_term(u))


def grad_E(mdp: MdpModel, tau: float, alpha: float, v, u) -> GradientPair:
    v = _check_vector(mdp, v)
    u = _positive_dual(_check_dual(mdp, u))
    grad_v = alpha * v - mdp.apply_KT(u)
    grad_u = mdp.reward - mdp.apply_K(v) - tau * _log_policy(u)
    return GradientPair(grad_v, grad_u)


def hessian_u_block(u, tau: float, state: int) -> np.ndarray:
    """``H_s`` for one state; the u-Hessian block of ``E`` is ``-tau * H_s``.

    ``tau`` only enters through that scaling and is validated, not applied.
    """
    if not tau > 0:
        raise NonPositiveTauError(f"tau must be positive, got {tau}")
    u_s = _positive_dual(u)[state]
    return np.diag(1.0 / u_s) - 1.0 / u_s.sum()


def interpolating_preconditioner(u, c: float, state: int) -> np.ndarray:
    """``ũ_s (diag(pi_s) - c pi_s pi_s^T)``; reduces to ``diag(u_s)`` at ``c = 0``."""
    _check_c(c)
    u_s = _positive_dual(u)[state]
    # same matrix written as diag(u_s) - c u_s u_s^T / ũ_s, exact at c = 0
    return np.diag(u_s) - (c / u_s.sum()) * np.outer(u_s, u_s)


def _bregman_kl(target, x):
    return np.sum(target * np.log(target / x) + x - target)


def lyapunov_L(v, u, solution: OracleSolution, alpha: float, tau: float) -> float:
    """``alpha/2 |v - v*|^2 + tau sum(u* log(u*/u) + u - u*)``."""
    u = _positive_dual(u)
    dv = np.asarray(v, dtype=float) - solution.v_star
    return float(0.5 * alpha * (dv @ dv) + tau * _bregman_kl(solution.u_star, u))


def lyapunov_Lc(v, u, solution: OracleSolution, alpha: float, tau: float, c: float) -> float:
    """``L`` plus ``tau c/(1-c)`` times the same divergence on the row sums."""
    _check_c(c)
    base = lyapunov_L(v, u, solution, alpha, tau)
    if c == 0.0:
        return base
    u = np.asarray(u, dtype=float)
    extra = _bregman_kl(solution.u_star.sum(axis=1), u.sum(axis=1))
    return float(base + tau * c / (1.0 - c) * extra)


def lyapunov_gradient(v, u, solution: OracleSolution, alpha: float, tau: float,
                      c: float = 0.0) -> GradientPair:
    """Gradient of ``L_c`` (``L`` at ``c = 0``)."""
    _check_c(c)
    u = _positive_dual(u)
    u_t = u.sum(axis=1, keepdims=True)
    ut_star = solution.u_star.sum(axis=1, keepdims=True)
    g_u = tau * ((u - solution.u_star) / u + c / (1.0 - c) * (u_t - ut_star) / u_t)
    return GradientPair(alpha * (np.asarray(v, dtype=float) - solution.v_star), g_u)


def ngad_flow(mdp: MdpModel, tau: float, alpha: float, v, u) -> GradientPair:
    """Right-hand side of the continuous NGAD dynamics in ``(v, u)``."""
    return ingad_flow(mdp, tau, alpha, 0.0, v, u)


def ingad_flow(mdp: MdpModel, tau: float, alpha: float, c: float, v, u) -> GradientPair:
    """Right-hand side of the interpolating dynamics; ``c = 0`` gives NGAD."""
    _check_c(c)
    v = _check_vector(mdp, v)
    u = _positive_dual(_check_dual(mdp, u))
    dv = -(v - mdp.apply_KT(u) / alpha)
    d = _log_policy(u) - (mdp.reward - mdp.apply_K(v)) / tau
    u_t = u.sum(axis=1, keepdims=True)
    pi = u / u_t
    du = -u_t * (pi * d - c * pi * np.sum(pi * d, axis=1, keepdims=True))
    return GradientPair(dv, du)


def lyapunov_dissipation(v, u, solution: OracleSolution, alpha: float, tau: float) -> float:
    """Closed-form time derivative of ``L`` (and of every ``L_c``) along its flow.

    ``-alpha |v - v*|^2 - tau sum (u - u*)(log(u/ũ) - log(u*/ũ*))``, always ``<= 0``.
    """
    u = _positive_dual(u)
    dv = np.asarray(v, dtype=float) - solution.v_star
    du = u - solution.u_star
    dlog = _log_policy(u) - _log_policy(solution.u_star)
    return float(-alpha * (dv @ dv) - tau * np.sum(du * dlog))


def first_order_residual(mdp: MdpModel, tau: float, alpha: float, v, u) -> float:
    """Max-norm residual of the stationarity equations of ``E`` over all |S| + |S||A| rows."""
    g = grad_E(mdp, tau, alpha, v, u)
    return float(max(np.max(np.abs(g.grad_v)), np.max(np.abs(g.grad_u))))


def first_order_residual_standard(mdp: MdpModel, tau: float, weight, v, u) -> float:
    """Same as :func:`first_order_residual` for the linear-weight objective ``E0``."""
    v = _check_vector(mdp, v)
    u = _positive_dual(_check_dual(mdp, u))
    r_v = np.asarray(weight, dtype=float) - mdp.apply_KT(u)
    r_u = mdp.reward - mdp.apply_K(v) - tau * _log_policy(u)
    return float(max(np.max(np.abs(r_v)), np.max(np.abs(r_u))))


def policy_of(u) -> np.ndarray:
    """``pi = u / ũ``."""
    u = np.asarray(u, dtype=float)
    return u / u.sum(axis=1, keepdims=True)


def policy_of_theta(theta) -> np.ndarray:
    return softmax(theta, axis=1)
