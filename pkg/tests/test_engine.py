import warnings

import numpy as np
import pytest

from plqt import (
    CoarseStepWarning,
    Custom,
    DarkJumpError,
    JumpChannel,
    NormPreservingDrift,
    NormPreservingJumps,
    PseudoLindbladModel,
    SignedState,
    StepSizeError,
    apply_jump,
    bloch_state,
    drift_step,
    eternal_qubit,
    jump_rates,
    plqt_step,
    predict_mean_sign,
    run_ensemble,
    run_trajectory,
    trace_deviation_diagnostic,
)
from plqt import rng as plqt_rng
from plqt.engine import BLOCK_SIZE, _statistics, _step_block, select_branch
from plqt.linops import SIGMA_MINUS, SIGMA_Z, random_hermitian, random_operator, random_state
from plqt.systems import BlochVector, eternal_qubit_sign_flip_rate


class FixedDraw:
    def __init__(self, u):
        self.u = u

    def random(self):
        return self.u


def dephasing_qubit(g=0.3):
    return PseudoLindbladModel(0.5 * SIGMA_Z, [JumpChannel("z", SIGMA_Z, g)])


# --- rates ------------------------------------------------------------------


@pytest.mark.parametrize("t", [0.0, 0.3, 2.5])
def test_eternal_qubit_rates(t):
    rng = np.random.default_rng(0)
    m = eternal_qubit()
    for _ in range(5):
        st = SignedState(3.0 * random_state(2, rng), 1, t)
        assert np.allclose(jump_rates(m, st), [0.5, 0.5, np.tanh(t) / 2], atol=1e-14)


def test_rates_dead_and_dark_channels():
    m = PseudoLindbladModel(np.zeros((2, 2)), [JumpChannel("minus", SIGMA_MINUS, 1.0),
                                               JumpChannel("dead", SIGMA_Z, 0.0)])
    assert np.allclose(jump_rates(m, SignedState([1, 0], 1)), [0, 0])
    assert np.allclose(jump_rates(m, SignedState([0, 1], 1)), [1, 0])


def test_policy_validation():
    m = eternal_qubit()
    st = SignedState([1, 0], 1, 0.5)
    with pytest.raises(ValueError, match="zero rate"):
        jump_rates(m, st, Custom(lambda t, g, n, p: np.array([[0.5], [0.0], [0.1]])))
    with pytest.raises(ValueError):
        jump_rates(m, st, Custom(lambda t, g, n, p: -np.ones_like(g)))
    bad_split = NormPreservingDrift([lambda t: 0.25, lambda t: 0.25, lambda t: 0.9])
    with pytest.raises(ValueError, match="norm-preserving drift"):
        jump_rates(m, st, bad_split)
    r = jump_rates(m, st, NormPreservingDrift.eternal_qubit())
    assert np.allclose(r, [0.25, 0.25, (1 - np.tanh(0.5)) / 2])


# --- single updates -----------------------------------------------------------


def test_negative_jump_flips_sign_and_keeps_norm():
    rng = np.random.default_rng(1)
    m = eternal_qubit()
    psi = 1.7 * random_state(2, rng)
    st = SignedState(psi, 1, 0.8)
    r = jump_rates(m, st)
    out = apply_jump(st, m, 2, r[2])
    assert out.sign == -1
    assert out.norm_sq == pytest.approx(st.norm_sq, rel=1e-12)
    assert abs(abs(np.vdot(out.psi, SIGMA_Z @ psi)) - np.linalg.norm(psi) ** 2) < 1e-12
    assert out.t == st.t
    pos = apply_jump(st, m, 0, r[0])
    assert pos.sign == 1


def test_sigma_x_jump_reflects_bloch_vector():
    m = eternal_qubit()
    st = SignedState(bloch_state(0.9, 0.4), 1, 0.0)
    b0 = BlochVector.from_state(st.psi)
    b1 = BlochVector.from_state(apply_jump(st, m, 0, 0.5).psi)
    assert np.allclose(b1.as_array(), [b0.x, -b0.y, -b0.z], atol=1e-12)


def test_dark_jump_raises():
    m = PseudoLindbladModel(np.zeros((2, 2)), [JumpChannel("minus", SIGMA_MINUS, 1.0)])
    with pytest.raises(DarkJumpError):
        apply_jump(SignedState([1, 0], 1), m, 0, 0.5)
    with pytest.raises(ValueError):
        apply_jump(SignedState([0, 1], 1), m, 0, 0.0)


def test_drift_norm_growth_eternal_qubit():
    m = eternal_qubit()
    t = 0.7
    ratios = []
    for dt in (1e-2, 5e-3):
        st = SignedState(bloch_state(0.3, 1.1), 1, t)
        r = jump_rates(m, st, t_eval=t + dt / 2)
        out = drift_step(st, m, dt, r)
        assert out.t == pytest.approx(t + dt)
        ratio = np.sqrt(out.norm_sq / st.norm_sq)
        ratios.append(abs(ratio - (1 + dt * r[2])))
    assert ratios[0] < 2 * 1e-2**2
    assert 3.0 < ratios[0] / ratios[1] < 5.0


def test_drift_positive_channels_second_order_and_trivial():
    m = dephasing_qubit()
    psi = bloch_state(1.0, 0.2)
    for dt in (1e-2, 1e-3):
        st = SignedState(psi, 1, 0.0)
        out = drift_step(st, m, dt, jump_rates(m, st))
        assert abs(out.norm_sq - 1) < 2 * dt**2
    free = PseudoLindbladModel(np.zeros((3, 3)))
    psi3 = random_state(3, np.random.default_rng(2))
    assert np.array_equal(drift_step(SignedState(psi3, -1), free, 0.1, []).psi, psi3)


def test_euler_drift_is_the_first_order_formula():
    rng = np.random.default_rng(3)
    h = random_hermitian(3, rng)
    L = random_operator(3, rng)
    m = PseudoLindbladModel(h, [JumpChannel("a", L, 0.4), JumpChannel("b", L @ L, -0.2)])
    st = SignedState(random_state(3, rng), 1, 0.0)
    dt = 0.01
    r = np.array([0.3, 0.2])
    heff = h - 0.5j * (0.4 * L.conj().T @ L - 0.2 * (L @ L).conj().T @ (L @ L))
    want = (st.psi - 1j * dt * heff @ st.psi) / np.sqrt(1 - dt * r.sum())
    assert np.allclose(drift_step(st, m, dt, r, drift="euler").psi, want, atol=1e-14)


def test_invalid_step_raises():
    st = SignedState([1, 0], 1)
    with pytest.raises(StepSizeError):
        drift_step(st, eternal_qubit(), 1.0, [0.5, 0.5, 0.1])
    with pytest.raises(StepSizeError, match="t="):
        plqt_step(SignedState([1, 0], 1, 3.0), eternal_qubit(), 1.0, rng_stream=FixedDraw(0.5))


def test_coarse_step_warns():
    with pytest.warns(CoarseStepWarning):
        plqt_step(SignedState([1, 0], 1, 1.0), eternal_qubit(), 0.2, rng_stream=FixedDraw(0.99))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        plqt_step(SignedState([1, 0], 1, 1.0), eternal_qubit(), 0.01, rng_stream=FixedDraw(0.99))


# --- branch selection ---------------------------------------------------------


def test_branch_bins():
    r = [0.5, 0.5, np.tanh(1.0) / 2]
    assert select_branch(r, 0.01, 0.004) == 0
    assert select_branch(r, 0.01, 0.005) == 1
    assert select_branch(r, 0.01, 0.0101) == 2
    assert select_branch(r, 0.01, 0.999) == -1
    st = plqt_step(SignedState(bloch_state(0.5, 0.5), 1, 1.0), eternal_qubit(), 0.01, rng_stream=FixedDraw(0.004))
    b = BlochVector.from_state(bloch_state(0.5, 0.5))
    assert np.allclose(BlochVector.from_state(st.psi).as_array(), [b.x, -b.y, -b.z], atol=1e-12)
    assert st.sign == 1


def test_branch_frequencies_multinomial():
    m = eternal_qubit()
    n = 10**6
    dt, t = 0.05, 1.0
    psi = np.repeat(bloch_state(0.7, 0.2)[None, :], n, axis=0)
    u = plqt_rng.stream(plqt_rng.split(2024, 0)).random(n)
    _, signs, branch, _ = _step_block(m, psi, np.ones(n, dtype=np.int64), t, dt, NormPreservingJumps(), u)
    tm = t + dt / 2
    p = np.array([0.5, 0.5, np.tanh(tm) / 2]) * dt
    p = np.append(p, 1 - p.sum())
    counts = np.bincount(branch, minlength=4)
    sd = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) < 4 * sd), (counts, n * p)
    assert np.all(signs[branch == 2] == -1) and np.all(signs[branch != 2] == 1)


# --- trajectories ---------------------------------------------------------------


def test_trivial_model_constant_observables():
    rng = np.random.default_rng(4)
    m = PseudoLindbladModel(np.zeros((3, 3)))
    a = random_hermitian(3, rng)
    psi = random_state(3, rng)
    rec = run_trajectory(m, psi, 1, np.linspace(0, 1, 11), [a], seed=1)
    assert np.allclose(rec.observables[0], np.vdot(psi, a @ psi))
    assert np.all(rec.sign == 1)


def test_seed_determinism():
    m = eternal_qubit()
    grid = np.linspace(0, 2, 201)
    args = (m, bloch_state(np.pi / 4, np.pi / 4), 1, grid, [SIGMA_Z])
    a = run_trajectory(*args, seed=7)
    b = run_trajectory(*args, seed=7)
    c = run_trajectory(*args, seed=8)
    assert np.array_equal(a.observables, b.observables) and np.array_equal(a.sign, b.sign)
    assert not np.array_equal(a.sign, c.sign) or not np.array_equal(a.observables, c.observables)


def test_sign_and_norm_bookkeeping():
    m = eternal_qubit()
    dt = 0.01
    grid = np.round(np.arange(301) * dt, 12)
    for seed in range(20):
        rec = run_trajectory(m, bloch_state(0.4, 0.1), 1, grid, [], seed=seed)
        assert rec.sign[-1] == (-1) ** rec.n_jumps[2]
        # jumps keep the norm, drifts grow it; it never decreases
        assert np.all(np.diff(rec.norm_sq) >= -1e-12)
    # step by step: a drift multiplies the norm by exp(-dt (1 - tanh/2)) / (1 - dt (1 + tanh/2))
    stream = plqt_rng.stream(17)
    st = SignedState(bloch_state(0.4, 0.1), 1, 0.0)
    drifts = jumps = 0
    for _ in range(300):
        tm = st.t + dt / 2
        factor = np.exp(-dt * (1 - np.tanh(tm) / 2)) / (1 - dt * (1 + np.tanh(tm) / 2))
        nxt = plqt_step(st, m, dt, rng_stream=stream)
        ratio = nxt.norm_sq / st.norm_sq
        if abs(ratio - 1) < 1e-12:
            jumps += 1
        else:
            drifts += 1
            assert ratio == pytest.approx(factor, rel=1e-12)
        st = nxt
    assert jumps > 0 and drifts > 0


def test_sign_flips_match_step_by_step_replay():
    m = eternal_qubit()
    stream = plqt_rng.stream(99)
    st = SignedState(bloch_state(1.0, 0.3), 1, 0.0)
    flips = 0
    for _ in range(400):
        before = st.sign
        st = plqt_step(st, m, 0.01, rng_stream=stream)
        flips += st.sign != before
        assert st.sign == (-1) ** flips


# --- ensembles ----------------------------------------------------------------


def test_workers_do_not_change_results():
    m = eternal_qubit()
    grid = np.linspace(0, 0.5, 26)
    n = BLOCK_SIZE + 1500
    obs = [SIGMA_Z, SIGMA_MINUS]
    one = run_ensemble(m, bloch_state(0.6, 0.2), 1, grid, obs, n_traj=n, master_seed=5, workers=1)
    many = run_ensemble(m, bloch_state(0.6, 0.2), 1, grid, obs, n_traj=n, master_seed=5, workers=8)
    for f in ("mean", "stderr", "mean_sign", "stderr_sign", "signed_trace", "n_jumps"):
        assert np.array_equal(getattr(one, f), getattr(many, f)), f


def test_single_trajectory_ensemble():
    m = dephasing_qubit()
    psi = bloch_state(1.2, 0.3)
    grid = np.linspace(0, 1, 21)
    stats = run_ensemble(m, psi, 1, grid, [SIGMA_MINUS], n_traj=1, master_seed=11)
    rec = run_trajectory(m, psi, 1, grid, [SIGMA_MINUS], seed=plqt_rng.split(11, 0))
    assert np.allclose(stats.mean[0], rec.observables[0] / rec.norm_sq, atol=1e-15)
    assert np.all(stats.stderr == 0)


def test_undefined_mean_where_trace_vanishes():
    tot = {"sx": np.array([[1.0 + 0j, 2.0]]), "m2_re": np.zeros((1, 2)), "m2_im": np.zeros((1, 2)),
           "sn": np.array([0.0, 2.0]), "m2_n": np.zeros(2), "s": np.array([0.0, 2.0]),
           "jumps": np.zeros(1, dtype=int), "worst": (0.0, 0.0)}
    stats = _statistics(np.array([0.0, 1.0]), tot, 2, 0)
    assert np.isnan(stats.mean[0, 0]) and stats.mean[0, 1] == 1.0


def test_mean_sign_law_eternal_qubit():
    m = eternal_qubit()
    grid = np.round(np.arange(301) * 0.01, 12)
    stats = run_ensemble(m, bloch_state(0.5, 0.5), 1, grid, [], n_traj=10**4, master_seed=3)
    pred = predict_mean_sign(eternal_qubit_sign_flip_rate, grid)
    # binomial stderr of the sign mean implied by the prediction (the sample
    # estimate is exactly zero before the first flip)
    se = np.sqrt((1 - pred**2) / stats.n_traj)
    assert np.all(np.abs(stats.mean_sign - pred) <= 4 * se + 1e-12)


def test_predict_mean_sign():
    grid = np.linspace(0, 5, 2001)
    assert np.abs(predict_mean_sign(eternal_qubit_sign_flip_rate, grid) - 1 / np.cosh(grid)).max() < 1e-5
    assert np.all(predict_mean_sign(0.0, grid) == 1.0)
    assert np.allclose(predict_mean_sign(lambda t: 0.3, grid), np.exp(-0.6 * grid), rtol=1e-12)
    with pytest.raises(ValueError):
        predict_mean_sign(-1.0, grid)


def test_trace_deviation_diagnostic():
    m = eternal_qubit()
    grid = np.linspace(0, 1, 101)
    psi = bloch_state(0.3, 0.3)
    (n, dev), = trace_deviation_diagnostic(m, psi, grid, ensemble_sizes=[1], master_seed=4)
    rec = run_trajectory(m, psi, 1, grid, [], seed=plqt_rng.split(4, 0))
    assert n == 1 and dev == pytest.approx(np.abs(rec.norm_sq * rec.sign - 1).max(), rel=1e-12)
    # positive strengths: no sampling noise, only the O(dt^2) per-step drift residual
    devs = []
    for dt in (0.01, 0.005):
        pos = trace_deviation_diagnostic(dephasing_qubit(), psi, grid, ensemble_sizes=[10, 100], dt=dt)
        devs.append(pos[1][1])
    assert devs[0] < 1e-3 and 1.8 < devs[0] / devs[1] < 2.2
    with pytest.raises(ValueError):
        trace_deviation_diagnostic(m, psi, grid, ensemble_sizes=[100, 10])


def test_rng_split_is_documented_seed_sequence():
    a = plqt_rng.split(123, 4)
    b = int(np.random.SeedSequence(123, spawn_key=(4,)).generate_state(1, np.uint64)[0])
    assert a == b
    assert plqt_rng.split(123, 4) != plqt_rng.split(123, 5)
    u = plqt_rng.uniforms([plqt_rng.stream(1), plqt_rng.stream(2)], 3)
    assert u.shape == (3, 2)
    assert np.array_equal(u[:, 0], np.random.Generator(np.random.Philox(1)).random(3))
