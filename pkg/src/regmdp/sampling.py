"""Stochastic-information runs: Gaussian reward noise and buffer/batch transition estimates."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse

from .errors import DimensionMismatchError, EmptyBufferError, InsufficientSamplesError, ValidationError
from .mdp import MdpModel
from .oracle import OracleSolution
from .solvers import SolverConfig, SolverState, SolverTrace, Variant, run_iterations

FALLBACKS = ("fallback_buffer", "fallback_uniform", "carry_previous")
COLLECT_CHUNK = 1 << 22


@dataclass(frozen=True)
class NoiseConfig:
    sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.sigma >= 0:
            raise ValidationError(f"sigma must be nonnegative, got {self.sigma}")


@dataclass(frozen=True, eq=False)
class SampleBuffer:
    """Stored ``(s, a, s')`` transitions as three int32 columns."""

    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    num_states: int
    num_actions: int
    seed: int | None = None

    def __post_init__(self):
        cols = []
        for name in ("states", "actions", "next_states"):
            col = np.array(getattr(self, name), dtype=np.int32, copy=True)
            col.setflags(write=False)
            object.__setattr__(self, name, col)
            cols.append(col)
        if not (cols[0].shape == cols[1].shape == cols[2].shape) or cols[0].ndim != 1:
            raise DimensionMismatchError("buffer columns must be 1-d and of equal length")
        n_s, n_a = self.num_states, self.num_actions
        if len(cols[0]) and (cols[0].min() < 0 or cols[0].max() >= n_s or cols[2].min() < 0
                             or cols[2].max() >= n_s or cols[1].min() < 0 or cols[1].max() >= n_a):
            raise DimensionMismatchError("sample index out of range")

    def __len__(self):
        return len(self.states)

    @property
    def capacity(self) -> int:
        return len(self.states)

    @cached_property
    def pair_index(self) -> np.ndarray:
        """Row index ``s*A + a`` of every sample."""
        return self.states.astype(np.int64) * self.num_actions + self.actions

    @cached_property
    def counts(self) -> np.ndarray:
        """``counts[s, a, s']`` over the whole buffer."""
        n_s, n_a = self.num_states, self.num_actions
        flat = self.pair_index * n_s + self.next_states
        return np.bincount(flat, minlength=n_s * n_a * n_s).reshape(n_s, n_a, n_s)

    @cached_property
    def empirical_rows(self) -> scipy.sparse.csr_matrix:
        """Row-normalized counts as an ``(S*A, S)`` CSR matrix.

        Pairs the buffer never visited get the uniform row.
        """
        n_s, n_a = self.num_states, self.num_actions
        c = self.counts.reshape(n_s * n_a, n_s).astype(float)
        tot = c.sum(axis=1)
        empty = tot == 0
        c[empty] = 1.0
        tot[empty] = n_s
        return scipy.sparse.csr_matrix(c / tot[:, None])

    @cached_property
    def empirical_rows_T(self) -> scipy.sparse.csr_matrix:
        return self.empirical_rows.T.tocsr()

    def empirical_transition(self) -> np.ndarray:
        """Buffer-empirical tensor in ``[a, s, s']`` layout."""
        n_s, n_a = self.num_states, self.num_actions
        return self.empirical_rows.toarray().reshape(n_s, n_a, n_s).transpose(1, 0, 2).copy()


def _row_sampler(mdp: MdpModel):
    """Flattened offset CDF for vectorized inverse-CDF sampling of all rows at once."""
    n_rows = mdp.num_states * mdp.num_actions
    if mdp.is_sparse:
        idx = mdp.support_indices.reshape(n_rows, -1)
        prob = mdp.support_prob.reshape(n_rows, -1)
    else:
        prob = mdp.transition_rows
        idx = np.broadcast_to(np.arange(mdp.num_states), prob.shape)
    cdf = np.cumsum(prob, axis=1)
    positive = prob > 0
    last = prob.shape[1] - 1 - np.argmax(positive[:, ::-1], axis=1)
    cdf[np.arange(n_rows), last] = 1.0
    cdf[np.arange(prob.shape[1])[None, :] > last[:, None]] = 1.0
    offset = (cdf + np.arange(n_rows)[:, None]).ravel()
    return idx, offset, last


def collect_buffer(mdp: MdpModel, n_samples: int, seed: int) -> SampleBuffer:
    """Draw ``n_samples`` transitions: ``(s, a)`` uniform over S x A, then ``s' ~ P(.|s, a)``.

    Samples are generated in fixed-size chunks, chunk ``j`` using child ``j`` of
    ``SeedSequence(seed)``, so the result depends only on ``(mdp, n_samples, seed)``.
    """
    n_s, n_a = mdp.num_states, mdp.num_actions
    if n_samples < n_s * n_a:
        raise InsufficientSamplesError(
            f"need at least |S||A| = {n_s * n_a} samples, got {n_samples}")
    idx, offset, last = _row_sampler(mdp)
    width = idx.shape[1]
    n_chunks = -(-n_samples // COLLECT_CHUNK)
    children = np.random.SeedSequence(seed).spawn(n_chunks)
    states = np.empty(n_samples, dtype=np.int32)
    actions = np.empty(n_samples, dtype=np.int32)
    nxt = np.empty(n_samples, dtype=np.int32)
    for j, child in enumerate(children):
        lo, hi = j * COLLECT_CHUNK, min(n_samples, (j + 1) * COLLECT_CHUNK)
        rng = np.random.default_rng(child)
        pair = rng.integers(0, n_s * n_a, size=hi - lo)
        draw = rng.random(hi - lo)
        pos = np.searchsorted(offset, pair + draw, side="right") - pair * width
        pos = np.minimum(pos, last[pair])
        states[lo:hi] = pair // n_a
        actions[lo:hi] = pair % n_a
        nxt[lo:hi] = idx[pair, pos]
    return SampleBuffer(states, actions, nxt, n_s, n_a, seed)


@dataclass(eq=False)
class BatchEstimate:
    """Per-iteration empirical kernel ``K̂ = I - gamma P̂``, applied lazily.

    Rows with batch samples use batch frequencies; the remaining rows come
    from ``base`` (an ``(S*A, S)`` matrix, sparse or dense).
    """

    gamma: float
    num_states: int
    num_actions: int
    pair_index: np.ndarray
    next_states: np.ndarray
    coverage: np.ndarray
    base: object
    base_T: object
    batch_size: int = field(default=0)

    @property
    def covered(self) -> np.ndarray:
        return self.coverage > 0

    def apply_P(self, v):
        n = self.coverage
        out = np.asarray(self.base @ v, dtype=float)
        batch = np.bincount(self.pair_index, weights=v[self.next_states], minlength=len(n))
        mask = n > 0
        out[mask] = batch[mask] / n[mask]
        return out.reshape(self.num_states, self.num_actions)

    def apply_PT(self, u):
        flat = u.ravel()
        n = self.coverage
        mask = n > 0
        scaled = np.where(mask, flat / np.maximum(n, 1), 0.0)
        out = np.bincount(self.next_states, weights=scaled[self.pair_index], minlength=self.num_states)
        return out + self.base_T @ np.where(mask, 0.0, flat)

    def apply_K(self, v):
        return v[:, None] - self.gamma * self.apply_P(v)

    def apply_KT(self, u):
        return u.sum(axis=1) - self.gamma * self.apply_PT(u)

    @property
    def k_hat(self):
        """The estimate itself exposes the K-operator interface."""
        return self

    def p_hat(self) -> np.ndarray:
        """Dense ``P̂`` in ``[a, s, s']`` layout (for inspection and tests)."""
        n_s, n_a = self.num_states, self.num_actions
        base = self.base.toarray() if hasattr(self.base, "toarray") else np.asarray(self.base)
        rows = np.array(base, dtype=float)
        mask = self.covered
        counts = np.bincount(self.pair_index * n_s + self.next_states,
                             minlength=n_s * n_a * n_s).reshape(n_s * n_a, n_s)
        rows[mask] = counts[mask] / self.coverage[mask][:, None]
        return rows.reshape(n_s, n_a, n_s).transpose(1, 0, 2)


class _UniformRows:
    def __init__(self, n_rows, n_s):
        self.n_rows, self.n_s = n_rows, n_s

    def __matmul__(self, v):
        return np.full(self.n_rows, np.mean(v))

    def toarray(self):
        return np.full((self.n_rows, self.n_s), 1.0 / self.n_s)


class _UniformRowsT:
    def __init__(self, n_s):
        self.n_s = n_s

    def __matmul__(self, w):
        return np.full(self.n_s, np.sum(w) / self.n_s)


class KHatEstimator:
    """Draws successive batches from a buffer and builds :class:`BatchEstimate` objects.

    With ``carry_previous`` an uncovered row keeps the value it had in the last
    estimate (initially the buffer-empirical row); such an estimate is only
    valid until the next :meth:`draw`.
    """

    def __init__(self, buffer: SampleBuffer, batch_size: int, gamma: float, rng=None,
                 fallback: str = "fallback_buffer"):
        if len(buffer) == 0:
            raise EmptyBufferError("buffer holds no samples")
        if not 1 <= batch_size <= len(buffer):
            raise ValidationError(f"batch_size must be in [1, {len(buffer)}], got {batch_size}")
        if fallback not in FALLBACKS:
            raise ValidationError(f"fallback must be one of {FALLBACKS}, got {fallback!r}")
        self.buffer = buffer
        self.batch_size = int(batch_size)
        self.gamma = float(gamma)
        self.rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        self.fallback = fallback
        n_rows = buffer.num_states * buffer.num_actions
        if fallback == "fallback_buffer":
            self._base, self._base_T = buffer.empirical_rows, buffer.empirical_rows_T
        elif fallback == "fallback_uniform":
            self._base, self._base_T = _UniformRows(n_rows, buffer.num_states), _UniformRowsT(buffer.num_states)
        else:
            self._prev = buffer.empirical_rows.toarray()
            self._base, self._base_T = self._prev, self._prev.T

    def draw(self) -> BatchEstimate:
        buf = self.buffer
        n = len(buf)
        if self.batch_size == n:
            pick = slice(None)
        else:
            pick = self.rng.choice(n, size=self.batch_size, replace=False)
        pair = buf.pair_index[pick]
        nxt = buf.next_states[pick].astype(np.int64)
        coverage = np.bincount(pair, minlength=buf.num_states * buf.num_actions)
        est = BatchEstimate(self.gamma, buf.num_states, buf.num_actions, pair, nxt, coverage,
                            self._base, self._base_T, self.batch_size)
        if self.fallback == "carry_previous":
            # updated after the estimate is built; its covered rows never read base
            mask = coverage > 0
            n_s = buf.num_states
            counts = np.bincount(pair * n_s + nxt, minlength=len(coverage) * n_s).reshape(-1, n_s)
            self._prev[mask] = counts[mask] / coverage[mask][:, None]
        return est


def estimate_k_hat(buffer: SampleBuffer, batch_size: int, gamma: float, rng_state=None,
                   fallback: str = "fallback_buffer") -> BatchEstimate:
    """One batch estimate; ``rng_state`` is a seed or a ``numpy.random.Generator``."""
    return KHatEstimator(buffer, batch_size, gamma, rng_state, fallback).draw()


def noise_generator(noise: NoiseConfig, iteration: int) -> np.random.Generator:
    """Stream for iteration ``i``: child ``i`` of ``SeedSequence(noise.seed)``."""
    ss = np.random.SeedSequence(noise.seed, spawn_key=(int(iteration),))
    return np.random.Generator(np.random.PCG64(ss))


def noisy_reward(mdp: MdpModel, noise: NoiseConfig, iteration: int) -> np.ndarray:
    """``r + xi`` with i.i.d. ``N(0, sigma^2)`` entries; ``sigma = 0`` returns ``r`` itself."""
    if noise.sigma == 0:
        return mdp.reward
    xi = noise_generator(noise, iteration).standard_normal(mdp.reward.shape)
    return mdp.reward + noise.sigma * xi


def run_noisy_reward_ingad(mdp: MdpModel, noise: NoiseConfig, config: SolverConfig,
                           init: SolverState | None = None,
                           oracle: OracleSolution | None = None) -> SolverTrace:
    """INGAD where iteration ``i`` sees the reward ``r + xi^(i)``; the model is exact."""
    if init is None:
        init = SolverState.zeros(mdp.num_states, mdp.num_actions)
    meta = {"noise_sigma": noise.sigma, "noise_seed": noise.seed}
    return run_iterations(lambda i: (mdp, noisy_reward(mdp, noise, i)), mdp, config, init,
                          config.c, Variant.INGAD.value, oracle, meta)


def run_sample_based_ingad(mdp_for_oracle: MdpModel, buffer: SampleBuffer, config: SolverConfig,
                           batch_size: int, init: SolverState | None = None,
                           oracle: OracleSolution | None = None, seed: int = 0,
                           fallback: str = "fallback_buffer") -> SolverTrace:
    """INGAD with ``K`` replaced by a fresh batch estimate ``K̂^(i)`` in both updates.

    Rewards and the discount come from ``mdp_for_oracle``; transitions only from
    ``buffer``. Batches are drawn from ``numpy.random.default_rng(seed)``.
    """
    mdp = mdp_for_oracle
    if (buffer.num_states, buffer.num_actions) != (mdp.num_states, mdp.num_actions):
        raise DimensionMismatchError("buffer and model dimensions differ")
    if init is None:
        init = SolverState.zeros(mdp.num_states, mdp.num_actions)
    estimator = KHatEstimator(buffer, batch_size, mdp.discount, np.random.default_rng(seed), fallback)
    meta = {"buffer_size": len(buffer), "buffer_seed": buffer.seed, "batch_size": batch_size,
            "batch_seed": seed, "fallback": fallback}
    return run_iterations(lambda i: (estimator.draw(), mdp.reward), mdp, config, init,
                          config.c, Variant.INGAD.value, oracle, meta)
