"""Tabular MDP model, random instances and policy-conditioned Bellman machinery.

Array conventions used throughout the package:

* ``transition[a, s, s']`` is the probability of ``s -> s'`` under action ``a``.
* ``reward[s, a]`` is the (nonnegative) reward of taking ``a`` in ``s``.
* policies and duals are ``(S, A)`` arrays, value functions are ``(S,)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse

from .errors import (
    DimensionMismatchError,
    DiscountOutOfRangeError,
    NegativeRewardError,
    NonPositivePolicyEntryError,
    NonStochasticRowError,
    SolveFailureError,
    SupportTooLargeError,
)

ROW_SUM_TOL = 1e-12
POLICY_FLOOR = 1e-300


def _frozen(x, dtype=float):
    x = np.array(x, dtype=dtype, copy=True)
    x.setflags(write=False)
    return x


@dataclass(frozen=True, eq=False)
class MdpModel:
    """Immutable finite MDP ``(S, A, P, r, gamma)``.

    When the transition rows have small support, ``support_indices`` and
    ``support_prob`` (both ``(S, A, k)``) carry a sparse copy of the same
    kernel and the K-operator products go through CSR matrices built from it
    instead of the dense tensor.
    """

    transition: np.ndarray
    reward: np.ndarray
    discount: float
    support_indices: np.ndarray | None = None
    support_prob: np.ndarray | None = None
    _p_rows: np.ndarray = field(init=False, repr=False)
    _p_csr: object = field(init=False, repr=False, default=None)
    _pt_csr: object = field(init=False, repr=False, default=None)

    def __post_init__(self):
        object.__setattr__(self, "transition", _frozen(self.transition))
        object.__setattr__(self, "reward", _frozen(self.reward))
        object.__setattr__(self, "discount", float(self.discount))
        if self.support_indices is not None:
            object.__setattr__(self, "support_indices", _frozen(self.support_indices, np.int64))
            object.__setattr__(self, "support_prob", _frozen(self.support_prob))
        n_a, n_s, _ = self.transition.shape
        # (S*A, S) with row index s*A + a, the layout every product below uses
        rows = np.ascontiguousarray(self.transition.transpose(1, 0, 2).reshape(n_s * n_a, n_s))
        rows.setflags(write=False)
        object.__setattr__(self, "_p_rows", rows)
        if self.support_indices is not None:
            k = self.support_indices.shape[2]
            csr = scipy.sparse.csr_matrix(
                (self.support_prob.ravel(), self.support_indices.ravel(),
                 np.arange(0, n_s * n_a * k + 1, k)), shape=(n_s * n_a, n_s))
            csr.sum_duplicates()
            object.__setattr__(self, "_p_csr", csr)
            object.__setattr__(self, "_pt_csr", csr.T.tocsr())

    @property
    def num_states(self) -> int:
        return self.transition.shape[1]

    @property
    def num_actions(self) -> int:
        return self.transition.shape[0]

    @property
    def is_sparse(self) -> bool:
        return self.support_indices is not None

    @property
    def transition_rows(self) -> np.ndarray:
        """Read-only ``(S*A, S)`` view of P with row ``s*A + a``."""
        return self._p_rows

    # Unchecked fast paths; the solvers call these every iteration.
    def apply_P(self, v: np.ndarray) -> np.ndarray:
        """``(P_a v)_s`` as an ``(S, A)`` array."""
        if self._p_csr is not None:
            return (self._p_csr @ v).reshape(self.num_states, self.num_actions)
        return (self._p_rows @ v).reshape(self.num_states, self.num_actions)

    def apply_PT(self, u: np.ndarray) -> np.ndarray:
        """``sum_{s,a} P[a, s, s'] u[s, a]`` as an ``(S,)`` array."""
        if self._pt_csr is not None:
            return self._pt_csr @ u.ravel()
        return self._p_rows.T @ u.ravel()

    def apply_K(self, v: np.ndarray) -> np.ndarray:
        return v[:, None] - self.discount * self.apply_P(v)

    def apply_KT(self, u: np.ndarray) -> np.ndarray:
        return u.sum(axis=1) - self.discount * self.apply_PT(u)

    def with_reward(self, reward) -> "MdpModel":
        return build_mdp(self.transition, reward, self.discount,
                         support_indices=self.support_indices, support_prob=self.support_prob)

    def dense(self) -> "MdpModel":
        """Same model without the sparse representation."""
        return MdpModel(self.transition, self.reward, self.discount)


def build_mdp(transition, reward, discount, *, support_indices=None, support_prob=None) -> MdpModel:
    """Validate arrays and return an :class:`MdpModel`."""
    P = np.asarray(transition, dtype=float)
    r = np.asarray(reward, dtype=float)
    if P.ndim != 3 or P.shape[1] != P.shape[2]:
        raise DimensionMismatchError(f"transition must have shape (A, S, S), got {P.shape}")
    n_a, n_s, _ = P.shape
    if r.shape != (n_s, n_a):
        raise DimensionMismatchError(f"reward must have shape ({n_s}, {n_a}), got {r.shape}")
    if not np.all(np.isfinite(P)) or np.any(P < 0):
        raise NonStochasticRowError("transition entries must be finite and nonnegative")
    row_err = np.abs(P.sum(axis=2) - 1.0)
    if np.any(row_err > ROW_SUM_TOL):
        a, s = np.unravel_index(np.argmax(row_err), row_err.shape)
        raise NonStochasticRowError(
            f"row (a={a}, s={s}) sums to {P[a, s].sum():.17g}, not 1")
    if not np.all(np.isfinite(r)):
        raise NegativeRewardError("rewards must be finite")
    if np.any(r < 0):
        raise NegativeRewardError(f"rewards must be nonnegative, min is {r.min():.17g}")
    if not 0.0 < discount < 1.0:
        raise DiscountOutOfRangeError(f"discount must lie in (0, 1), got {discount}")
    if support_indices is not None:
        idx = np.asarray(support_indices, dtype=np.int64)
        prob = np.broadcast_to(np.asarray(support_prob, dtype=float), idx.shape)
        if idx.ndim != 3 or idx.shape[:2] != (n_s, n_a):
            raise DimensionMismatchError(f"support_indices must have shape ({n_s}, {n_a}, k)")
        if idx.min() < 0 or idx.max() >= n_s:
            raise DimensionMismatchError("support index out of range")
        support_indices, support_prob = idx, prob
    return MdpModel(P, r, discount, support_indices, support_prob)


def mdp_from_support(support_indices, support_prob, reward, discount) -> MdpModel:
    """Build a model from sparse rows; the dense tensor is assembled from them."""
    idx = np.asarray(support_indices, dtype=np.int64)
    prob = np.broadcast_to(np.asarray(support_prob, dtype=float), idx.shape)
    n_s, n_a, _ = idx.shape
    P = np.zeros((n_a, n_s, n_s))
    s_grid, a_grid = np.meshgrid(np.arange(n_s), np.arange(n_a), indexing="ij")
    np.add.at(P, (a_grid[..., None], s_grid[..., None], idx), prob)
    return build_mdp(P, reward, discount, support_indices=idx, support_prob=prob)


def generate_random_mdp(num_states: int, num_actions: int, support_size: int, seed: int,
                        discount: float = 0.99) -> MdpModel:
    """Random instance with uniform transitions over random supports.

    Each row ``(s, a)`` puts mass ``1/support_size`` on a uniformly drawn subset
    of states; rewards are ``r[s, a] = U[s, a] * U[s]`` with independent
    uniform draws. The stream is ``numpy.random.default_rng(seed)`` (PCG64),
    consumed as: support keys, then ``U[s, a]``, then ``U[s]``.
    """
    if not 1 <= support_size <= num_states:
        raise SupportTooLargeError(
            f"support_size must be in [1, {num_states}], got {support_size}")
    rng = np.random.default_rng(seed)
    keys = rng.random((num_states, num_actions, num_states))
    if support_size == num_states:
        idx = np.broadcast_to(np.arange(num_states), keys.shape)
    else:
        idx = np.argpartition(keys, support_size - 1, axis=2)[:, :, :support_size]
    idx = np.sort(idx, axis=2)
    u_sa = rng.random((num_states, num_actions))
    u_s = rng.random(num_states)
    reward = u_sa * u_s[:, None]
    prob = np.full(idx.shape, 1.0 / support_size)
    return mdp_from_support(idx, prob, reward, discount)


def shift_rewards(mdp: MdpModel, shift: float) -> MdpModel:
    """Add a constant to every reward.

    The optimal policy is unchanged and ``v*`` moves by ``shift / (1 - gamma)``.
    """
    return mdp.with_reward(mdp.reward + shift)


def _check_policy(mdp: MdpModel, policy, strict: bool) -> np.ndarray:
    pi = np.asarray(policy, dtype=float)
    if pi.shape != (mdp.num_states, mdp.num_actions):
        raise DimensionMismatchError(
            f"policy must have shape ({mdp.num_states}, {mdp.num_actions}), got {pi.shape}")
    if strict and np.any(pi < POLICY_FLOOR):
        raise NonPositivePolicyEntryError("policy entries must be strictly positive")
    return pi


def _check_vector(mdp: MdpModel, v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.shape != (mdp.num_states,):
        raise DimensionMismatchError(f"expected a vector of length {mdp.num_states}, got {v.shape}")
    return v


def _check_dual(mdp: MdpModel, u) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if u.shape != (mdp.num_states, mdp.num_actions):
        raise DimensionMismatchError(
            f"expected an ({mdp.num_states}, {mdp.num_actions}) array, got {u.shape}")
    return u


def uniform_policy(mdp: MdpModel) -> np.ndarray:
    return np.full((mdp.num_states, mdp.num_actions), 1.0 / mdp.num_actions)


def transition_under_policy(mdp: MdpModel, policy) -> np.ndarray:
    """``(P_pi)[s, s'] = sum_a pi[s, a] P[a, s, s']``."""
    pi = _check_policy(mdp, policy, strict=False)
    return np.einsum("sa,ast->st", pi, mdp.transition)


def reward_and_entropy_under_policy(mdp: MdpModel, policy) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(r_pi, h_pi)`` with ``h_pi`` the negative Shannon entropy per state."""
    pi = _check_policy(mdp, policy, strict=True)
    r_pi = np.sum(pi * mdp.reward, axis=1)
    h_pi = np.sum(pi * np.log(pi), axis=1)
    return r_pi, h_pi


def evaluate_policy(mdp: MdpModel, policy, tau: float) -> np.ndarray:
    """Regularized value of ``policy``: solves ``(I - gamma P_pi) v = r_pi - tau h_pi``."""
    if tau < 0:
        raise ValueError(f"tau must be nonnegative, got {tau}")
    r_pi, h_pi = reward_and_entropy_under_policy(mdp, policy)
    k_pi = np.eye(mdp.num_states) - mdp.discount * transition_under_policy(mdp, policy)
    rhs = r_pi - tau * h_pi
    try:
        v = np.linalg.solve(k_pi, rhs)
    except np.linalg.LinAlgError as exc:
        raise SolveFailureError(str(exc)) from exc
    if not np.all(np.isfinite(v)):
        raise SolveFailureError("policy evaluation produced non-finite values")
    return v


def apply_K(mdp: MdpModel, v) -> np.ndarray:
    """``(K_a v)_s = v_s - gamma sum_s' P[a, s, s'] v_s'`` as an ``(S, A)`` array."""
    return mdp.apply_K(_check_vector(mdp, v))


def apply_K_transpose(mdp: MdpModel, u) -> np.ndarray:
    """``sum_{s,a} K[a, s, s'] u[s, a]`` as an ``(S,)`` array."""
    return mdp.apply_KT(_check_dual(mdp, u))
