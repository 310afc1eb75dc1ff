"""NGAD and interpolating NGAD iterations in the log-dual parametrization ``u = exp(theta)``.

Both engines update ``v`` first and then ``theta`` using the new ``v``, the
order of the algorithm listings. The convergence metric is

    q = max(|v_new - v| / |v|, |u_new - u| / |u|)

with Euclidean (Frobenius) norms.
"""
from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import objective
from .errors import COutOfRangeError, NonFiniteStateError, ValidationError, ZeroNormReferenceError
from .mdp import MdpModel
from .oracle import OracleSolution

DIAGNOSTICS = ("lyapunov", "policy_error", "value_error", "fo_residual")


class Variant(str, enum.Enum):
    NGAD = "NGAD"
    INGAD = "INGAD"


@dataclass(frozen=True)
class SolverConfig:
    alpha: float = 0.1
    tau: float = 0.01
    eta: float = 8e-3
    c: float = 0.0
    eps_tol: float = 1e-5
    max_iter: int = 200_000
    record_every: int = 10
    diagnostics: frozenset = frozenset(DIAGNOSTICS)

    def __post_init__(self):
        object.__setattr__(self, "diagnostics", frozenset(self.diagnostics))
        for name in ("alpha", "tau", "eta", "eps_tol"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 <= self.c < 1.0:
            raise COutOfRangeError(f"c must lie in [0, 1), got {self.c}")
        if self.max_iter < 1 or self.record_every < 1:
            raise ValidationError("max_iter and record_every must be positive")
        unknown = self.diagnostics - set(DIAGNOSTICS)
        if unknown:
            raise ValidationError(f"unknown diagnostics: {sorted(unknown)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["diagnostics"] = sorted(self.diagnostics)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SolverConfig":
        d = dict(d)
        if "diagnostics" in d:
            d["diagnostics"] = frozenset(d["diagnostics"])
        return cls(**d)


@dataclass(frozen=True, eq=False)
class SolverState:
    v: np.ndarray
    theta: np.ndarray

    @property
    def u(self) -> np.ndarray:
        return np.exp(self.theta)

    @property
    def policy(self) -> np.ndarray:
        return objective.policy_of_theta(self.theta)

    @classmethod
    def zeros(cls, num_states: int, num_actions: int) -> "SolverState":
        """Default start: ``v = 0`` and ``u`` all ones."""
        return cls(np.zeros(num_states), np.zeros((num_states, num_actions)))

    @classmethod
    def from_oracle(cls, solution: OracleSolution) -> "SolverState":
        return cls(solution.v_star.copy(), np.log(solution.u_star))


@dataclass
class IterationRecord:
    iter: int
    q: float
    lyapunov: float | None = None
    policy_error: float | None = None
    value_error: float | None = None
    fo_residual: float | None = None


@dataclass
class SolverTrace:
    records: list
    final_state: SolverState
    converged: bool
    iterations: int
    config: SolverConfig
    variant: str
    metadata: dict = field(default_factory=dict)

    @property
    def final(self) -> IterationRecord:
        return self.records[-1]

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=float)


def _logsumexp_rows(theta):
    m = theta.max(axis=1, keepdims=True)
    return m + np.log(np.exp(theta - m).sum(axis=1, keepdims=True))


def _update(op, reward, v, theta, u, alpha, tau, eta, c):
    """One Gauss-Seidel sweep; ``op`` supplies ``apply_K`` / ``apply_KT``."""
    v_new = (1.0 - eta) * v + (eta / alpha) * op.apply_KT(u)
    lse = _logsumexp_rows(theta)
    g = reward - op.apply_K(v_new)
    theta_new = (1.0 - eta) * theta + eta * lse + (eta / tau) * g
    if c != 0.0:
        # (I - c 1 pi^T) applied to the NGAD direction d = theta - lse - g/tau
        pi = np.exp(theta - lse)
        d = theta - lse - g / tau
        theta_new = theta_new + (eta * c) * np.sum(pi * d, axis=1, keepdims=True)
    return v_new, theta_new


def _step(mdp, state, config, c):
    v = np.asarray(state.v, dtype=float)
    theta = np.asarray(state.theta, dtype=float)
    with np.errstate(over="ignore", invalid="ignore"):
        v_new, theta_new = _update(mdp, mdp.reward, v, theta, np.exp(theta),
                                   config.alpha, config.tau, config.eta, c)
    if not (np.all(np.isfinite(v_new)) and np.all(np.isfinite(theta_new))):
        raise NonFiniteStateError("iterate became non-finite; reduce eta")
    return SolverState(v_new, theta_new)


def ngad_step(mdp: MdpModel, state: SolverState, config: SolverConfig) -> SolverState:
    """One NGAD update (the ``c`` of ``config`` is ignored)."""
    return _step(mdp, state, config, 0.0)


def ingad_step(mdp: MdpModel, state: SolverState, config: SolverConfig) -> SolverState:
    """One interpolating NGAD update with metric coefficient ``config.c``."""
    return _step(mdp, state, config, config.c)


def _relative_change(new, old) -> float:
    ref = math.sqrt(float(np.vdot(old, old)))
    diff = new - old
    num = math.sqrt(float(np.vdot(diff, diff)))
    if ref == 0.0:
        if num == 0.0:
            return 0.0
        raise ZeroNormReferenceError("reference iterate has zero norm")
    return num / ref


def convergence_metric(prev, new) -> float:
    """``max(|v' - v| / |v|, |u' - u| / |u|)`` for ``prev = (v, u)``, ``new = (v', u')``."""
    (v0, u0), (v1, u1) = prev, new
    return max(_relative_change(np.asarray(v1, float), np.asarray(v0, float)),
               _relative_change(np.asarray(u1, float), np.asarray(u0, float)))


def _loop_metric(v_new, v, u_new, u) -> float:
    # A zero reference (e.g. the default v = 0 start) cannot certify convergence.
    try:
        return convergence_metric((v, u), (v_new, u_new))
    except ZeroNormReferenceError:
        return math.inf


class _Recorder:
    def __init__(self, config, c, oracle, exact_mdp):
        self.config = config
        self.c = c
        self.oracle = oracle
        self.mdp = exact_mdp
        wanted = config.diagnostics
        if oracle is None:
            wanted = wanted & {"fo_residual"}
        self.wanted = wanted
        if oracle is not None:
            self.v_norm = float(np.linalg.norm(oracle.v_star))
            self.pi_norm = float(np.linalg.norm(oracle.pi_star))

    def __call__(self, i, q, v, theta, u) -> IterationRecord:
        rec = IterationRecord(iter=i, q=float(q))
        cfg, sol, w = self.config, self.oracle, self.wanted
        if "lyapunov" in w:
            if self.c == 0.0:
                rec.lyapunov = objective.lyapunov_L(v, u, sol, cfg.alpha, cfg.tau)
            else:
                rec.lyapunov = objective.lyapunov_Lc(v, u, sol, cfg.alpha, cfg.tau, self.c)
        if "policy_error" in w:
            pi = objective.policy_of_theta(theta)
            rec.policy_error = float(np.linalg.norm(pi - sol.pi_star)) / self.pi_norm
        if "value_error" in w:
            rec.value_error = float(np.linalg.norm(v - sol.v_star)) / self.v_norm
        if "fo_residual" in w:
            rec.fo_residual = objective.first_order_residual(self.mdp, cfg.tau, cfg.alpha, v, u)
        return rec


def run_iterations(provider: Callable, exact_mdp: MdpModel, config: SolverConfig, init: SolverState,
                   c: float, variant: str, oracle: OracleSolution | None = None,
                   metadata: dict | None = None) -> SolverTrace:
    """Shared outer loop.

    ``provider(i)`` returns ``(op, reward)`` used by iteration ``i``: ``op`` exposes
    ``apply_K`` and ``apply_KT`` (an exact model or an estimate). ``exact_mdp``
    is only used for the first-order residual diagnostic.
    """
    record = _Recorder(config, c, oracle, exact_mdp)
    v = np.array(init.v, dtype=float)
    theta = np.array(init.theta, dtype=float)
    u = np.exp(theta)
    q = 1.0 + config.eps_tol
    records = [record(0, q, v, theta, u)]
    i = 0
    alpha, tau, eta, eps = config.alpha, config.tau, config.eta, config.eps_tol
    while q > eps and i < config.max_iter:
        op, reward = provider(i)
        with np.errstate(over="ignore", invalid="ignore"):
            v_new, theta_new = _update(op, reward, v, theta, u, alpha, tau, eta, c)
            u_new = np.exp(theta_new)
        if not (np.all(np.isfinite(v_new)) and np.all(np.isfinite(u_new))
                and np.all(np.isfinite(theta_new))):
            raise NonFiniteStateError(f"iterate became non-finite at iteration {i + 1}; reduce eta",
                                      iteration=i + 1)
        q = _loop_metric(v_new, v, u_new, u)
        v, theta, u = v_new, theta_new, u_new
        i += 1
        if i % config.record_every == 0 or q <= eps or i == config.max_iter:
            records.append(record(i, q, v, theta, u))
    return SolverTrace(records=records, final_state=SolverState(v, theta), converged=bool(q <= eps),
                       iterations=i, config=config, variant=str(variant),
                       metadata=dict(metadata or {}))


def run_solver(mdp: MdpModel, config: SolverConfig, init: SolverState | None = None,
               variant: Variant | str = Variant.INGAD,
               oracle: OracleSolution | None = None) -> SolverTrace:
    """Run NGAD or INGAD on an exactly known model until ``q <= eps_tol`` or ``max_iter``.

    Hitting ``max_iter`` is not an error: the trace comes back with ``converged=False``.
    """
    variant = Variant(variant)
    if variant is Variant.NGAD and config.c != 0.0:
        raise ValidationError("NGAD requires c = 0")
    if init is None:
        init = SolverState.zeros(mdp.num_states, mdp.num_actions)
    c = config.c if variant is Variant.INGAD else 0.0
    return run_iterations(lambda i: (mdp, mdp.reward), mdp, config, init, c, variant.value, oracle)
