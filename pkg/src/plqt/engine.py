"""Sign-carrying quantum-jump trajectories for pseudo-Lindblad models.

A trajectory is a pure state ``psi`` (not normalized) plus a sign ``s``. In each
step of length ``dt`` channel ``i`` fires with probability ``r_i dt``:

    psi -> sqrt(|gamma_i|) L_i psi / sqrt(r_i),    s -> sign(gamma_i) s

otherwise the state drifts,

    psi -> U psi / sqrt(1 - dt sum_i r_i),   U = exp(-i dt Heff)

(``drift="euler"`` replaces ``U`` by its first-order form ``1 - i dt Heff``).
Time-dependent model quantities are evaluated at the step midpoint.

The ensemble estimate of ``rho`` is ``sum_n s_n |psi_n><psi_n| / sum_n s_n <psi_n|psi_n>``.

Trajectories are integrated in fixed-size blocks of ``BLOCK_SIZE`` as stacked
arrays. Block partial sums are combined in block order, so ensemble output is
bit-identical for any number of workers.
"""
from __future__ import annotations

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import rng as _rng
from scipy.linalg import expm

from .linops import as_operator, as_vector
from .model import PseudoLindbladModel

logger = logging.getLogger(__name__)

BLOCK_SIZE = 4096
COARSE_STEP_THRESHOLD = 0.1
_DRAW_CHUNK = 512


class StepSizeError(ValueError):
    """Raised when ``dt * sum_i r_i >= 1``, so the drift probability is not positive."""


class DarkJumpError(RuntimeError):
    """Raised when a jump is sampled on a state the jump operator annihilates."""


class CoarseStepWarning(UserWarning):
    pass


@dataclass(frozen=True)
class SignedState:
    psi: np.ndarray
    sign: int = 1
    t: float = 0.0

    def __post_init__(self):
        psi = as_vector(self.psi)
        if self.sign not in (-1, 1):
            raise ValueError(f"sign must be -1 or +1, got {self.sign!r}")
        if not np.vdot(psi, psi).real > 0:
            raise ValueError("state has zero norm")
        object.__setattr__(self, "psi", psi)
        object.__setattr__(self, "sign", int(self.sign))
        object.__setattr__(self, "t", float(self.t))

    @property
    def norm_sq(self) -> float:
        return float(np.vdot(self.psi, self.psi).real)

    def projector(self) -> np.ndarray:
        """``s |psi><psi|``."""
        return self.sign * np.outer(self.psi, np.conj(self.psi))


# --------------------------------------------------------------------------
# rate policies


class RatePolicy:
    """Chooses the sampling rates ``r_i`` of a step.

    ``rates`` receives arrays of shape ``(C, B)`` (channels x trajectories) for
    ``gammas`` and ``image_norm_sq = ||L_i psi||^2``, and ``norm_sq`` of shape
    ``(B,)``; it returns rates of shape ``(C, B)``.
    """

    name = "policy"

    def rates(self, t, gammas, image_norm_sq, norm_sq) -> np.ndarray:
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}()"


class NormPreservingJumps(RatePolicy):
    """``r_i = |gamma_i| ||L_i psi||^2 / ||psi||^2``: jumps leave the norm unchanged."""

    name = "jumps"

    def rates(self, t, gammas, image_norm_sq, norm_sq):
        return np.abs(gammas) * image_norm_sq / norm_sq


class NormPreservingDrift(RatePolicy):
    """State-independent rates whose sum keeps the drift norm-preserving.

    The drift conserves the norm when
    ``sum_i r_i = sum_i gamma_i ||L_i psi||^2 / ||psi||^2``; only that sum is
    fixed, the split between channels is a choice. ``rate_functions`` gives one
    callable of ``t`` per channel. The sum condition is checked every step
    (relative tolerance ``tol``); channels whose gamma vanishes get rate zero.
    """

    name = "drift"

    def __init__(self, rate_functions: Sequence[Callable[[float], float]], tol: float = 1e-9):
        self.rate_functions = tuple(rate_functions)
        self.tol = tol

    @classmethod
    def eternal_qubit(cls) -> "NormPreservingDrift":
        """``r_x = r_y = 1/4``, ``r_z = (1 - tanh t)/2`` for the eternal qubit."""
        return cls([lambda t: 0.25, lambda t: 0.25, lambda t: 0.5 * (1.0 - np.tanh(t))])

    def rates(self, t, gammas, image_norm_sq, norm_sq):
        if len(self.rate_functions) != gammas.shape[0]:
            raise ValueError(
                f"{len(self.rate_functions)} rate functions for {gammas.shape[0]} channels"
            )
        r = np.array([float(f(t)) for f in self.rate_functions])[:, None] * np.ones_like(gammas)
        r = np.where(gammas == 0.0, 0.0, r)
        target = np.sum(gammas * image_norm_sq, axis=0) / norm_sq
        total = r.sum(axis=0)
        bad = np.abs(total - target) > self.tol * np.maximum(1.0, np.abs(target))
        if np.any(bad):
            j = int(np.argmax(bad))
            raise ValueError(
                f"rates at t={t:.6g} sum to {total[j]:.6g}, norm-preserving drift needs {target[j]:.6g}"
            )
        return r


class Custom(RatePolicy):
    """User-supplied rates: ``fn(t, gammas, image_norm_sq, norm_sq) -> (C, B)``."""

    name = "custom"

    def __init__(self, fn):
        self.fn = fn

    def rates(self, t, gammas, image_norm_sq, norm_sq):
        return np.asarray(self.fn(t, gammas, image_norm_sq, norm_sq), dtype=float) * np.ones_like(gammas)


def _checked_rates(policy: RatePolicy, t, gammas, image_norm_sq, norm_sq) -> np.ndarray:
    r = np.asarray(policy.rates(t, gammas, image_norm_sq, norm_sq), dtype=float)
    if r.shape != gammas.shape:
        raise ValueError(f"rate policy returned shape {r.shape}, expected {gammas.shape}")
    if np.any(~np.isfinite(r)) or np.any(r < 0):
        raise ValueError(f"rate policy produced negative or non-finite rates at t={t:.6g}")
    r = np.where(gammas == 0.0, 0.0, r)
    # A live channel without a sampling rate would be silently dropped from the average.
    starved = (r == 0.0) & (gammas != 0.0) & (image_norm_sq > 0.0)
    if np.any(starved):
        c = int(np.argwhere(starved)[0][0])
        raise ValueError(f"rate policy gave zero rate to active channel {c} at t={t:.6g}")
    return r


# --------------------------------------------------------------------------
# batched kernels; psis has shape (B, D)


def _stacked_operators(model: PseudoLindbladModel) -> np.ndarray:
    cache = getattr(model, "_plqt_stacked", None)
    if cache is None:
        d = model.dimension
        cache = np.array([ch.L for ch in model.channels]) if model.channels else np.zeros((0, d, d), complex)
        model._plqt_stacked = cache
    return cache


DRIFT_SCHEMES = ("exponential", "euler")


@dataclass
class JumpBatch:
    """Channel data for a block of states.

    ``gammas`` and ``norm_sq = ||L_i psi||^2`` have shape ``(C, B)``;
    ``images(channels, rows)`` returns ``L_c psi_b`` for the requested pairs
    only, so jump images need not be built for trajectories that drift.
    """

    gammas: np.ndarray
    norm_sq: np.ndarray
    images: Callable[[np.ndarray, np.ndarray], np.ndarray]


def _dense_batch(gam, images) -> JumpBatch:
    return JumpBatch(gam, _sq_norm(images), lambda ch, rows: images[ch, rows])


def _jump_data(model: PseudoLindbladModel, psis: np.ndarray, t: float) -> JumpBatch:
    """Strengths, image norms and lazy jump images for every channel and state.

    Refreshers may provide ``batch(psis, t) -> (gammas, norm_sq, images)``
    with ``gammas`` of shape ``(C,)`` or ``(C, B)`` and ``images`` as in
    :class:`JumpBatch`; otherwise they are called row by row.
    """
    b = psis.shape[0]
    ref = model.refresher
    if ref is None:
        gam = model.gammas(t)
        images = psis @ np.swapaxes(_stacked_operators(model), 1, 2)
        return _dense_batch(np.repeat(gam[:, None], b, axis=1), images)
    if hasattr(ref, "batch"):
        gam, norm_sq, images = ref.batch(psis, t)
        gam = np.asarray(gam, dtype=float)
        if gam.ndim == 1:
            gam = np.repeat(gam[:, None], b, axis=1)
        return JumpBatch(gam, np.asarray(norm_sq, dtype=float), images)
    gam_rows, img_rows = [], []
    for psi in psis:
        chans = model.channels_at(psi, t)
        gam_rows.append([ch.strength(t) for ch in chans])
        img_rows.append([ch.L @ psi for ch in chans])
    c = len(gam_rows[0])
    gam = np.array(gam_rows, dtype=float).T.reshape(c, b)
    images = np.array(img_rows, dtype=complex).reshape(b, c, -1).transpose(1, 0, 2)
    return _dense_batch(gam, images)


def _propagator(heff: np.ndarray, dt: float, drift: str) -> np.ndarray:
    if drift == "exponential":
        return expm(-1j * dt * heff)
    if drift == "euler":
        return np.eye(heff.shape[0]) - 1j * dt * heff
    raise ValueError(f"drift must be one of {DRIFT_SCHEMES}, got {drift!r}")


def _time_independent(model: PseudoLindbladModel) -> bool:
    if model.time_dependent_hamiltonian:
        return False
    if model.refresher is not None:
        return bool(getattr(model.refresher, "time_independent", False))
    return all(hasattr(ch.gamma, "constant") for ch in model.channels)


def _state_independent_heff(model: PseudoLindbladModel, t: float):
    if model.refresher is None:
        return model.effective_hamiltonian(t)
    heff = getattr(model.refresher, "effective_hamiltonian", None)
    return heff(t) if heff is not None else None


def _drifted(model: PseudoLindbladModel, psis: np.ndarray, t: float, dt: float, drift: str) -> np.ndarray:
    """``U psis`` with ``U = exp(-i dt Heff(t))`` (or ``1 - i dt Heff`` for Euler), unnormalized."""
    static = _time_independent(model)
    if static:
        cache = model.__dict__.setdefault("_plqt_propagators", {})
        U = cache.get((dt, drift))
        if U is None:
            U = cache[(dt, drift)] = _propagator(_state_independent_heff(model, t), dt, drift)
        return psis @ U.T
    heff = _state_independent_heff(model, t)
    if heff is not None:
        return psis @ _propagator(heff, dt, drift).T
    rows = []
    for psi in psis:
        chans = model.channels_at(psi, t)
        rows.append(_propagator(model.effective_hamiltonian(t, chans), dt, drift) @ psi)
    return np.array(rows)


def _sq_norm(x: np.ndarray) -> np.ndarray:
    """Squared Euclidean norm along the last axis."""
    if x.flags.c_contiguous and x.dtype == np.complex128:
        f = x.view(np.float64)
        return np.einsum("...i,...i->...", f, f)
    return np.sum(x.real**2 + x.imag**2, axis=-1)


def _jump_rows(image: np.ndarray, gamma: np.ndarray, rate: np.ndarray, t: float) -> np.ndarray:
    if np.any(_sq_norm(image) == 0.0):
        raise DarkJumpError(f"jump sampled on a dark state at t={t:.6g} (L psi = 0 with r > 0)")
    return image * np.sqrt(np.abs(gamma) / rate)[:, None]


def _drift_rows(drifted, total):
    return drifted / np.sqrt(1.0 - total)[:, None]


def _check_total(total: np.ndarray, t: float) -> float:
    worst = float(np.max(total)) if total.size else 0.0
    if worst >= 1.0:
        raise StepSizeError(f"invalid step at t={t:.6g}: sum(r_i) * dt = {worst:.6g} >= 1")
    return worst


def select_branch(rates, dt: float, u: float) -> int:
    """Index of the channel whose cumulative bin of widths ``r_i dt`` holds ``u``; ``-1`` for drift."""
    cum = np.cumsum(np.asarray(rates, dtype=float) * dt)
    k = int(np.searchsorted(cum, u, side="right"))
    return -1 if k >= cum.size else k


def evaluation_time(t: float, dt: float) -> float:
    """Time at which ``H``, ``gamma_i`` and refreshed channels are evaluated for the step ``[t, t+dt)``."""
    return t + 0.5 * dt


def _step_block(model, psis, signs, t, dt, policy, u, drift="exponential"):
    """Advance ``B`` trajectories one step. Returns ``(psis, signs, branch, worst_total)``.

    ``branch[b]`` is the channel index that fired, or ``C`` for drift.
    """
    t = evaluation_time(t, dt)
    jd = _jump_data(model, psis, t)
    gam = jd.gammas
    c = gam.shape[0]
    r = _checked_rates(policy, t, gam, jd.norm_sq, _sq_norm(psis))
    widths = r * dt
    total = widths.sum(axis=0)
    worst = _check_total(total, t)
    cum = np.cumsum(widths, axis=0)
    branch = np.sum(u[None, :] >= cum, axis=0) if c else np.zeros(psis.shape[0], dtype=np.int64)

    out = np.empty_like(psis)
    new_signs = signs.copy()
    stay = branch == c
    if np.any(stay):
        out[stay] = _drift_rows(_drifted(model, psis[stay], t, dt, drift), total[stay])
    jumped = ~stay
    if np.any(jumped):
        rows = np.nonzero(jumped)[0]
        ch = branch[rows]
        g = gam[ch, rows]
        out[rows] = _jump_rows(jd.images(ch, rows), g, r[ch, rows], t)
        new_signs[rows] = signs[rows] * np.where(g < 0, -1, 1)
    return out, new_signs, branch, worst


# --------------------------------------------------------------------------
# single-state operations


def jump_rates(m: PseudoLindbladModel, st: SignedState, policy: RatePolicy | None = None,
               t_eval: float | None = None) -> np.ndarray:
    """Sampling rates at ``t_eval`` (default ``st.t``)."""
    policy = policy or NormPreservingJumps()
    t = st.t if t_eval is None else t_eval
    psis = st.psi[None, :]
    jd = _jump_data(m, psis, t)
    return _checked_rates(policy, t, jd.gammas, jd.norm_sq, _sq_norm(psis))[:, 0]


def apply_jump(st: SignedState, m: PseudoLindbladModel, channel_index: int, rate: float,
               t_eval: float | None = None) -> SignedState:
    """Jump through channel ``channel_index``; ``L`` and ``gamma`` are taken at ``t_eval`` (default ``st.t``)."""
    if not rate > 0:
        raise ValueError("jump rate must be positive")
    t = st.t if t_eval is None else t_eval
    psis = st.psi[None, :]
    jd = _jump_data(m, psis, t)
    g = jd.gammas[channel_index, 0]
    zero = np.zeros(1, dtype=np.int64)
    psi = _jump_rows(jd.images(zero + channel_index, zero), jd.gammas[channel_index], np.array([rate]), t)[0]
    sign = st.sign * (-1 if g < 0 else 1)
    return SignedState(psi, sign, st.t)


def drift_step(st: SignedState, m: PseudoLindbladModel, dt: float, rates, drift: str = "exponential") -> SignedState:
    """No-jump branch over ``[st.t, st.t + dt)``: ``U psi / sqrt(1 - dt sum r)``.

    ``U = exp(-i dt Heff)`` by default; ``drift="euler"`` uses ``1 - i dt Heff``.
    ``Heff`` is evaluated at the step midpoint.
    """
    total = np.array([float(np.sum(rates)) * dt])
    _check_total(total, st.t)
    psis = st.psi[None, :]
    psi = _drift_rows(_drifted(m, psis, evaluation_time(st.t, dt), dt, drift), total)[0]
    return SignedState(psi, st.sign, st.t + dt)


def plqt_step(st: SignedState, m: PseudoLindbladModel, dt: float, policy: RatePolicy | None = None,
              rng_stream=None, drift: str = "exponential") -> SignedState:
    """One stochastic step. ``rng_stream`` needs a ``random()`` method returning one uniform."""
    policy = policy or NormPreservingJumps()
    if rng_stream is None:
        rng_stream = np.random.default_rng()
    u = np.array([float(rng_stream.random())])
    psis, signs, _, worst = _step_block(m, st.psi[None, :], np.array([st.sign]), st.t, dt, policy, u, drift)
    if worst > COARSE_STEP_THRESHOLD:
        warnings.warn(_coarse_message(worst, st.t), CoarseStepWarning, stacklevel=2)
    return SignedState(psis[0], int(signs[0]), st.t + dt)


def _coarse_message(worst, t):
    return f"sum(r_i)*dt reached {worst:.3g} > {COARSE_STEP_THRESHOLD} at t={t:.6g}; step too coarse"


# --------------------------------------------------------------------------
# trajectories and ensembles


@dataclass
class TrajectoryRecord:
    grid: np.ndarray
    observables: np.ndarray  # (n_obs, n_times) complex, <psi|A|psi> of the unnormalized state
    norm_sq: np.ndarray
    sign: np.ndarray
    n_jumps: np.ndarray  # per channel
    seed: int
    warnings: list = field(default_factory=list)


@dataclass
class EnsembleStatistics:
    grid: np.ndarray
    mean: np.ndarray  # (n_obs, n_times) complex; NaN where the signed trace vanishes
    stderr: np.ndarray  # complex: real part for Re(mean), imaginary part for Im(mean)
    mean_sign: np.ndarray
    stderr_sign: np.ndarray
    signed_trace: np.ndarray  # sum_n s_n <psi_n|psi_n> / N
    stderr_trace: np.ndarray
    n_traj: int
    n_jumps: np.ndarray
    master_seed: int
    warnings: list = field(default_factory=list)


def _time_stepping(grid, dt):
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size < 1:
        raise ValueError("grid must be a non-empty 1-d array")
    if grid.size == 1:
        return grid, (dt or 0.0), 1
    spacing = np.diff(grid)
    if np.any(spacing <= 0):
        raise ValueError("grid must be strictly increasing")
    h = spacing[0]
    if not np.allclose(spacing, h, rtol=1e-9, atol=1e-12):
        raise ValueError("grid must be uniformly spaced")
    if dt is None:
        dt = h
    stride = int(round(h / dt))
    if stride < 1 or abs(stride * dt - h) > 1e-9 * h:
        raise ValueError(f"dt={dt} does not divide the grid spacing {h}")
    return grid, dt, stride


def _expectations(obs, psis):
    # (K, B): <psi_b|A_k|psi_b>
    if obs.shape[0] == 0:
        return np.zeros((0, psis.shape[0]), complex)
    return np.einsum("bi,kbi->kb", np.conj(psis), psis @ np.swapaxes(obs, 1, 2))


class _Block:
    """Integrates one block of trajectories over the whole grid."""

    def __init__(self, model, psi0, s0, grid, dt, stride, obs, policy, drift):
        if drift not in DRIFT_SCHEMES:
            raise ValueError(f"drift must be one of {DRIFT_SCHEMES}, got {drift!r}")
        self.model, self.psi0, self.s0 = model, psi0, s0
        self.grid, self.dt, self.stride = grid, dt, stride
        self.obs, self.policy, self.drift = obs, policy, drift

    def run(self, seeds, keep):
        b = len(seeds)
        n_t = self.grid.size
        streams = [_rng.stream(s) for s in seeds]
        psis = np.repeat(self.psi0[None, :], b, axis=0)
        signs = np.full(b, self.s0, dtype=np.int64)
        n_ch = len(self.model.channels_at(self.psi0, self.grid[0]))
        jumps = np.zeros((n_ch, b), dtype=np.int64)
        worst = 0.0
        worst_t = self.grid[0]

        if keep:
            rec_obs = np.empty((self.obs.shape[0], n_t, b), complex)
            rec_norm = np.empty((n_t, b))
            rec_sign = np.empty((n_t, b), dtype=np.int64)
        else:
            k = self.obs.shape[0]
            acc = {
                "sx": np.zeros((k, n_t), complex),
                "m2_re": np.zeros((k, n_t)),
                "m2_im": np.zeros((k, n_t)),
                "sn": np.zeros(n_t),
                "m2_n": np.zeros(n_t),
                "s": np.zeros(n_t),
            }

        def record(j):
            vals = _expectations(self.obs, psis)
            nrm = _sq_norm(psis)
            if keep:
                rec_obs[:, j] = vals
                rec_norm[j] = nrm
                rec_sign[j] = signs
                return
            # sums and centered second moments; blocks are merged pairwise
            x = vals * signs
            sx = x.sum(axis=1)
            acc["sx"][:, j] = sx
            dx = x - (sx / b)[:, None]
            acc["m2_re"][:, j] = (dx.real**2).sum(axis=1)
            acc["m2_im"][:, j] = (dx.imag**2).sum(axis=1)
            sn = nrm * signs
            acc["sn"][j] = sn.sum()
            acc["m2_n"][j] = ((sn - acc["sn"][j] / b) ** 2).sum()
            acc["s"][j] = signs.sum()

        record(0)
        n_steps = (n_t - 1) * self.stride
        t0 = self.grid[0]
        draws = None
        for step in range(n_steps):
            if step % _DRAW_CHUNK == 0:
                draws = _rng.uniforms(streams, min(_DRAW_CHUNK, n_steps - step))
            t = t0 + step * self.dt
            psis, signs, branch, w = _step_block(
                self.model, psis, signs, t, self.dt, self.policy, draws[step % _DRAW_CHUNK], self.drift
            )
            if n_ch:
                fired = branch < n_ch
                if np.any(fired):
                    np.add.at(jumps, (branch[fired], np.nonzero(fired)[0]), 1)
            if w > worst:
                worst, worst_t = w, t
            if (step + 1) % self.stride == 0:
                record((step + 1) // self.stride)

        if keep:
            return rec_obs, rec_norm, rec_sign, jumps, (worst, worst_t)
        acc["n"] = b
        acc["jumps"] = jumps.sum(axis=1)
        acc["worst"] = (worst, worst_t)
        return acc


def _prepare(m, psi0, s0, obs, policy):
    psi0 = as_vector(psi0)
    if psi0.size != m.dimension:
        raise ValueError(f"initial state has dimension {psi0.size}, model has {m.dimension}")
    if s0 not in (-1, 1):
        raise ValueError("initial sign must be -1 or +1")
    obs = [as_operator(a) for a in obs]
    for a in obs:
        if a.shape != (m.dimension, m.dimension):
            raise ValueError(f"observable shape {a.shape} does not match model dimension {m.dimension}")
    obs = np.array(obs, dtype=complex).reshape(len(obs), m.dimension, m.dimension)
    return psi0, obs, policy or NormPreservingJumps()


def _warn_list(worst):
    w, t = worst
    if w > COARSE_STEP_THRESHOLD:
        msg = _coarse_message(w, t)
        logger.warning(msg)
        return [msg]
    return []


def run_trajectory(m, psi0, s0=1, grid=(0.0,), observables=(), policy=None, seed=0, dt=None,
                   drift="exponential") -> TrajectoryRecord:
    """Integrate a single trajectory and record ``<psi|A|psi>``, norm and sign on ``grid``.

    ``dt`` defaults to the grid spacing and must divide it. Observables are
    sampled after the step that lands on each grid time.
    """
    psi0, obs, policy = _prepare(m, psi0, s0, observables, policy)
    grid, dt, stride = _time_stepping(grid, dt)
    block = _Block(m, psi0, s0, grid, dt, stride, obs, policy, drift)
    rec_obs, rec_norm, rec_sign, jumps, worst = block.run([seed], keep=True)
    return TrajectoryRecord(
        grid=grid,
        observables=rec_obs[:, :, 0],
        norm_sq=rec_norm[:, 0],
        sign=rec_sign[:, 0],
        n_jumps=jumps[:, 0],
        seed=int(seed),
        warnings=_warn_list(worst),
    )


def run_ensemble(m, psi0, s0=1, grid=(0.0,), observables=(), policy=None, n_traj=1, master_seed=0,
                 workers=1, dt=None, drift="exponential") -> EnsembleStatistics:
    """Signed, normalized ensemble average over ``n_traj`` trajectories.

    Trajectory ``n`` uses seed ``rng.split(master_seed, n)``. Standard errors
    treat the signed trace as fixed: ``stderr = std(s <A>) / sqrt(N) / (trace/N)``.
    """
    if n_traj < 1:
        raise ValueError("n_traj must be at least 1")
    if workers < 1:
        raise ValueError("workers must be at least 1")
    psi0, obs, policy = _prepare(m, psi0, s0, observables, policy)
    grid, dt, stride = _time_stepping(grid, dt)
    block = _Block(m, psi0, s0, grid, dt, stride, obs, policy, drift)
    seeds = [_rng.split(master_seed, n) for n in range(n_traj)]
    chunks = [seeds[i:i + BLOCK_SIZE] for i in range(0, n_traj, BLOCK_SIZE)]

    def work(chunk):
        return block.run(chunk, keep=False)

    if workers == 1 or len(chunks) == 1:
        parts = [work(c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(work, chunks))

    tot = parts[0]
    for p in parts[1:]:
        tot = _merge(tot, p)
    return _statistics(grid, tot, n_traj, master_seed)


def _merge(a, b):
    """Combine two blocks' sums and centered moments (pairwise update)."""
    na, nb = a["n"], b["n"]
    n = na + nb
    out = {"n": n, "jumps": a["jumps"] + b["jumps"]}
    out["worst"] = b["worst"] if b["worst"][0] > a["worst"][0] else a["worst"]
    for s_key, parts in (("sx", (("m2_re", np.real), ("m2_im", np.imag))), ("sn", (("m2_n", np.real),))):
        delta = b[s_key] / nb - a[s_key] / na
        for m_key, part in parts:
            out[m_key] = a[m_key] + b[m_key] + part(delta) ** 2 * (na * nb / n)
        out[s_key] = a[s_key] + b[s_key]
    out["s"] = a["s"] + b["s"]
    return out


def _sample_stderr(m2, n):
    """Standard error of the mean from the centered second moment."""
    if n < 2:
        return np.zeros_like(m2)
    return np.sqrt(m2 / (n - 1) / n)


def _statistics(grid, tot, n, master_seed):
    trace = tot["sn"] / n
    with np.errstate(invalid="ignore", divide="ignore"):
        inv = np.where(trace != 0.0, 1.0 / np.where(trace != 0.0, trace, 1.0), np.nan)
        mean = tot["sx"] / n * inv
        se_re = _sample_stderr(tot["m2_re"], n) * np.abs(inv)
        se_im = _sample_stderr(tot["m2_im"], n) * np.abs(inv)
    mean_sign = tot["s"] / n
    # s**2 == 1, so sum (s - mean)**2 = N (1 - mean**2) exactly
    se_sign = _sample_stderr(n * np.maximum(1.0 - mean_sign**2, 0.0), n)
    se_trace = _sample_stderr(tot["m2_n"], n)
    return EnsembleStatistics(
        grid=grid,
        mean=mean,
        stderr=se_re + 1j * se_im,
        mean_sign=mean_sign,
        stderr_sign=se_sign,
        signed_trace=trace,
        stderr_trace=se_trace,
        n_traj=n,
        n_jumps=tot["jumps"],
        master_seed=int(master_seed),
        warnings=_warn_list(tot["worst"]),
    )


# --------------------------------------------------------------------------
# diagnostics


def predict_mean_sign(R, grid) -> np.ndarray:
    """``exp(-2 int_0^t R)`` by trapezoidal quadrature on ``grid`` (which starts at 0)."""
    grid = np.asarray(grid, dtype=float)
    vals = np.array([float(R(t)) for t in grid]) if callable(R) else np.broadcast_to(np.asarray(R, float), grid.shape)
    if np.any(vals < 0):
        raise ValueError("sign-flip rate must be non-negative")
    integral = np.concatenate([[0.0], np.cumsum(0.5 * (vals[1:] + vals[:-1]) * np.diff(grid))])
    return np.exp(-2.0 * integral)


def trace_deviation_diagnostic(m, psi0, grid, policy=None, ensemble_sizes=(100, 1000), master_seed=0,
                               s0=1, workers=1, dt=None, drift="exponential"):
    """``[(N, max_t |trace/N - 1|), ...]`` for each ensemble size."""
    sizes = list(ensemble_sizes)
    if sizes != sorted(sizes):
        raise ValueError("ensemble sizes must be ascending")
    out = []
    for n in sizes:
        stats = run_ensemble(m, psi0, s0, grid, (), policy, n, master_seed, workers, dt, drift)
        out.append((n, float(np.max(np.abs(stats.signed_trace - 1.0)))))
    return out
