import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from regmdp.errors import COutOfRangeError, NonFiniteStateError, ValidationError, ZeroNormReferenceError
from regmdp.mdp import generate_random_mdp
from regmdp.oracle import solve_oracle
from regmdp.solvers import (
    SolverConfig,
    SolverState,
    Variant,
    convergence_metric,
    ingad_step,
    ngad_step,
    run_solver,
)

from conftest import random_dense_mdp


def transcribed_step(mdp, v, theta, alpha, tau, eta, c):
    """Element-wise loops over the algorithm listing, v first, then theta with v_new."""
    P, g = mdp.transition, mdp.discount
    n_a, n_s, _ = P.shape
    K = lambda a, s, t: (1.0 if s == t else 0.0) - g * P[a, s, t]
    u = np.exp(theta)
    v_new = np.zeros(n_s)
    for t in range(n_s):
        acc = sum(K(a, s, t) * u[s, a] for s in range(n_s) for a in range(n_a))
        v_new[t] = (1 - eta) * v[t] + eta / alpha * acc
    theta_new = np.zeros_like(theta)
    for s in range(n_s):
        lse = math.log(sum(u[s]))
        d = np.zeros(n_a)
        for a in range(n_a):
            kv = sum(K(a, s, t) * v_new[t] for t in range(n_s))
            d[a] = theta[s, a] - lse - (mdp.reward[s, a] - kv) / tau
        w = u[s] / sum(u[s])
        for a in range(n_a):
            # row a of (I - c 1 w^T) d
            theta_new[s, a] = theta[s, a] - eta * (d[a] - c * sum(w[b] * d[b] for b in range(n_a)))
    return v_new, theta_new


@pytest.fixture(scope="module")
def problem():
    mdp = generate_random_mdp(12, 4, 3, seed=5, discount=0.9)
    return mdp, solve_oracle(mdp, 0.1, 0.1)


def cfg(**kw):
    base = dict(alpha=0.1, tau=0.1, eta=0.01, c=0.0, eps_tol=1e-8, max_iter=100_000)
    base.update(kw)
    return SolverConfig(**base)


def rand_state(mdp, rng):
    return SolverState(rng.normal(size=mdp.num_states) + 3, rng.normal(size=(mdp.num_states, mdp.num_actions)))


# config ------------------------------------------------------------------

def test_config_validation():
    with pytest.raises(COutOfRangeError):
        cfg(c=1.0)
    with pytest.raises(ValidationError):
        cfg(eta=0.0)
    with pytest.raises(ValidationError):
        cfg(diagnostics={"bogus"})


def test_config_round_trip():
    c = cfg(c=0.5, diagnostics={"lyapunov"})
    assert SolverConfig.from_dict(c.to_dict()) == c


def test_ngad_rejects_c(problem):
    mdp, _ = problem
    with pytest.raises(ValidationError):
        run_solver(mdp, cfg(c=0.5), variant=Variant.NGAD)


# single steps ------------------------------------------------------------

def test_ngad_matches_transcription(rng):
    mdp = random_dense_mdp(5, 3, seed=3)
    s = rand_state(mdp, rng)
    out = ngad_step(mdp, s, cfg(eta=0.05, tau=0.3, alpha=0.4))
    v_ref, th_ref = transcribed_step(mdp, s.v, s.theta, 0.4, 0.3, 0.05, 0.0)
    np.testing.assert_allclose(out.v, v_ref, rtol=0, atol=1e-13)
    np.testing.assert_allclose(out.theta, th_ref, rtol=0, atol=1e-13)


def test_ingad_matches_transcription(rng):
    mdp = random_dense_mdp(5, 3, seed=4)
    s = rand_state(mdp, rng)
    out = ingad_step(mdp, s, cfg(eta=0.05, tau=0.3, alpha=0.4, c=0.9))
    v_ref, th_ref = transcribed_step(mdp, s.v, s.theta, 0.4, 0.3, 0.05, 0.9)
    np.testing.assert_allclose(out.v, v_ref, rtol=0, atol=1e-13)
    np.testing.assert_allclose(out.theta, th_ref, rtol=0, atol=1e-13)


def test_ingad_c_zero_is_ngad(problem, rng):
    mdp, _ = problem
    s = rand_state(mdp, rng)
    a, b = ngad_step(mdp, s, cfg()), ingad_step(mdp, s, cfg(c=0.0))
    np.testing.assert_array_equal(a.v, b.v)
    np.testing.assert_array_equal(a.theta, b.theta)


def test_zero_step_is_identity(problem, rng):
    mdp, _ = problem
    s = rand_state(mdp, rng)
    # eta must be positive in a config; bypass validation for the degenerate map
    zero = cfg()
    object.__setattr__(zero, "eta", 0.0)
    for step in (ngad_step, ingad_step):
        out = step(mdp, s, zero)
        np.testing.assert_array_equal(out.v, s.v)
        np.testing.assert_array_equal(out.theta, s.theta)


@pytest.mark.parametrize("c", [0.0, 0.5, 0.98])
def test_oracle_is_fixed_point(problem, c):
    mdp, sol = problem
    s = SolverState.from_oracle(sol)
    for step in (ngad_step, ingad_step):
        out = step(mdp, s, cfg(c=c, eta=0.5))
        np.testing.assert_allclose(out.v, s.v, rtol=0, atol=1e-10)
        np.testing.assert_allclose(out.theta, s.theta, rtol=0, atol=1e-10)


def test_step_overflow_raises(problem):
    mdp, _ = problem
    s = SolverState(np.zeros(12), np.full((12, 4), 800.0))
    with pytest.raises(NonFiniteStateError):
        ngad_step(mdp, s, cfg())


def test_positivity_by_construction(problem, rng):
    mdp, _ = problem
    s = rand_state(mdp, rng)
    for _ in range(50):
        s = ingad_step(mdp, s, cfg(c=0.9, eta=0.01))
        assert np.all(s.u > 0)


# convergence metric ------------------------------------------------------

def test_metric_identical(rng):
    v, u = rng.normal(size=4), rng.random((4, 2))
    assert convergence_metric((v, u), (v, u)) == 0.0


def test_metric_doubled_v(rng):
    v, u = rng.normal(size=4), rng.random((4, 2))
    assert convergence_metric((v, u), (2 * v, u)) == 1.0


def test_metric_hand_computation(rng):
    v0, v1 = rng.normal(size=(2, 5))
    u0, u1 = rng.random((2, 5, 3))
    ref = max(math.sqrt(sum((v1 - v0) ** 2)) / math.sqrt(sum(v0**2)),
              math.sqrt(np.sum((u1 - u0) ** 2)) / math.sqrt(np.sum(u0**2)))
    assert convergence_metric((v0, u0), (v1, u1)) == pytest.approx(ref, rel=1e-15, abs=0)


def test_metric_zero_reference():
    with pytest.raises(ZeroNormReferenceError):
        convergence_metric((np.zeros(3), np.ones((3, 2))), (np.ones(3), np.ones((3, 2))))


# full runs ---------------------------------------------------------------

def test_run_from_oracle_converges_immediately(problem):
    mdp, sol = problem
    trace = run_solver(mdp, cfg(c=0.9), SolverState.from_oracle(sol), Variant.INGAD, sol)
    assert trace.converged and trace.iterations <= 2
    assert trace.final.q <= 1e-10


@pytest.mark.parametrize("variant,c", [(Variant.NGAD, 0.0), (Variant.INGAD, 0.9)])
def test_run_converges_to_oracle(problem, variant, c):
    mdp, sol = problem
    trace = run_solver(mdp, cfg(c=c, eps_tol=1e-10), variant=variant, oracle=sol)
    assert trace.converged
    assert trace.final.q <= 1e-10
    assert trace.final.value_error <= 1e-6
    assert trace.final.policy_error <= 1e-6
    L = trace.column("lyapunov")
    # absolute slack for the roundoff floor of L near the optimum
    assert np.all(L[1:] <= L[:-1] * (1 + 1e-8) + 1e-12)
    assert L[-1] / L[0] <= 1e-6


def test_fo_residual_tail(problem):
    mdp, sol = problem
    trace = run_solver(mdp, cfg(c=0.9, eps_tol=1e-9), oracle=sol)
    res = trace.column("fo_residual")
    tail = res[len(res) // 2:]
    assert np.all(np.diff(tail) <= 0)
    assert tail[-1] < 1e-4


def test_trace_structure(problem):
    mdp, sol = problem
    trace = run_solver(mdp, cfg(c=0.9, max_iter=95, record_every=10), oracle=sol)
    iters = [r.iter for r in trace.records]
    assert iters == [0, 10, 20, 30, 40, 50, 60, 70, 80, 90, 95]
    assert not trace.converged and trace.iterations == 95
    assert trace.records[0].q == 1 + 1e-8
    assert all(r.q >= 0 for r in trace.records)


def test_trace_without_oracle(problem):
    mdp, _ = problem
    trace = run_solver(mdp, cfg(c=0.9, max_iter=20))
    rec = trace.final
    assert rec.lyapunov is None and rec.policy_error is None and rec.fo_residual is not None


def test_run_is_deterministic(problem):
    mdp, sol = problem
    a = run_solver(mdp, cfg(c=0.9, max_iter=300), oracle=sol)
    b = run_solver(mdp, cfg(c=0.9, max_iter=300), oracle=sol)
    np.testing.assert_array_equal(a.final_state.theta, b.final_state.theta)
    assert [r.q for r in a.records] == [r.q for r in b.records]


def test_run_diverges_loudly(problem):
    mdp, _ = problem
    with pytest.raises(NonFiniteStateError) as info:
        run_solver(mdp, cfg(eta=10.0))
    assert info.value.iteration is not None


# properties --------------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 0.99), st.floats(1e-4, 0.2))
def test_c_zero_reduction_property(seed, c, eta):
    mdp = generate_random_mdp(6, 3, 2, seed % 1000, discount=0.9)
    s = rand_state(mdp, np.random.default_rng(seed))
    a = ngad_step(mdp, s, cfg(eta=eta))
    b = ingad_step(mdp, s, cfg(eta=eta, c=0.0))
    assert np.max(np.abs(a.theta - b.theta)) <= 1e-15 and np.max(np.abs(a.v - b.v)) <= 1e-15
    # the interpolating step only shifts each theta row by a constant
    d = ingad_step(mdp, s, cfg(eta=eta, c=c)).theta - a.theta
    np.testing.assert_allclose(d, d[:, :1] * np.ones((1, 3)), atol=1e-12)
