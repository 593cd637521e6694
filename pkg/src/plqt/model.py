"""Pseudo-Lindblad models: a Hamiltonian plus jump channels whose strengths may be negative.

The generator is

    d rho/dt = -i[H, rho] + sum_i gamma_i(t) (L_i rho L_i^+ - 1/2 {L_i^+ L_i, rho})

with real ``gamma_i`` of either sign. Time-dependent quantities are callables of
``t``; constants are wrapped.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np

from .linops import HERMITIAN_TOL, as_operator, dagger, frozen, hermiticity_error

Rate = Union[float, Callable[[float], float]]


def _constant(value: float) -> Callable[[float], float]:
    value = float(value)

    def gamma(t: float) -> float:
        return value

    gamma.constant = value
    return gamma


@dataclass(frozen=True)
class JumpChannel:
    """One dissipation channel ``(L, gamma(t))``.

    ``gamma`` may be a number or a callable of time. ``LdagL`` is cached at
    construction; use :meth:`with_operator` to obtain a channel with a new ``L``.
    """

    label: str
    L: np.ndarray
    gamma: Rate = 1.0
    LdagL: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        L = frozen(as_operator(self.L))
        object.__setattr__(self, "L", L)
        object.__setattr__(self, "LdagL", frozen(dagger(L) @ L))
        if not callable(self.gamma):
            object.__setattr__(self, "gamma", _constant(self.gamma))

    def strength(self, t: float) -> float:
        g = float(self.gamma(t))
        if not np.isfinite(g):
            raise ValueError(f"channel {self.label!r}: gamma({t}) is not finite")
        return g

    def with_operator(self, L) -> "JumpChannel":
        return JumpChannel(self.label, L, self.gamma)


# A refresher rebuilds the channel list from the current (unnormalized) state.
# It must be a pure function of (psi, t). Objects may additionally provide a
# vectorized ``batch(psis, t)``; see ``plqt.engine``.
Refresher = Callable[[np.ndarray, float], Sequence[JumpChannel]]


class PseudoLindbladModel:
    """Hamiltonian plus an ordered list of signed jump channels.

    Parameters
    ----------
    hamiltonian : array or callable
        Hermitian ``D x D`` matrix, or a callable ``t -> matrix``.
    channels : sequence of JumpChannel
        Ordered; stochastic channel selection follows this order.
    refresher : callable, optional
        ``(psi, t) -> channels``. When present the trajectory engine rebuilds the
        channels from the state before every step. The static ``channels`` are
        still used by :meth:`master_rhs`, so the refresher must describe the same
        generator for every state.
    """

    def __init__(self, hamiltonian, channels: Sequence[JumpChannel] = (), refresher: Refresher | None = None):
        if callable(hamiltonian):
            self._h_static = None
            self._h_func = hamiltonian
            h0 = as_operator(hamiltonian(0.0))
        else:
            h0 = frozen(as_operator(hamiltonian))
            self._h_static = h0
            self._h_func = None
        err = hermiticity_error(h0)
        if err > HERMITIAN_TOL:
            raise ValueError(f"Hamiltonian is not Hermitian (relative deviation {err:.3e})")
        self.dimension = h0.shape[0]
        self.channels = tuple(channels)
        for ch in self.channels:
            if ch.L.shape != (self.dimension, self.dimension):
                raise ValueError(
                    f"channel {ch.label!r} has shape {ch.L.shape}, model dimension is {self.dimension}"
                )
        self.refresher = refresher

    def __repr__(self):
        labels = ", ".join(ch.label for ch in self.channels)
        return f"PseudoLindbladModel(D={self.dimension}, channels=[{labels}])"

    @property
    def time_dependent_hamiltonian(self) -> bool:
        return self._h_func is not None

    def hamiltonian_at(self, t: float) -> np.ndarray:
        if self._h_static is not None:
            return self._h_static
        return as_operator(self._h_func(t))

    def gammas(self, t: float) -> np.ndarray:
        return np.array([ch.strength(t) for ch in self.channels], dtype=float)

    def channels_at(self, psi: np.ndarray, t: float) -> Sequence[JumpChannel]:
        if self.refresher is None:
            return self.channels
        return tuple(self.refresher(psi, t))

    def effective_hamiltonian(self, t: float, channels: Sequence[JumpChannel] | None = None) -> np.ndarray:
        chans = self.channels if channels is None else channels
        heff = np.array(self.hamiltonian_at(t), dtype=complex)
        for ch in chans:
            g = ch.strength(t)
            if g != 0.0:
                heff -= 0.5j * g * ch.LdagL
        return heff

    def master_rhs(self, rho: np.ndarray, t: float) -> np.ndarray:
        h = self.hamiltonian_at(t)
        out = -1j * (h @ rho - rho @ h)
        for ch in self.channels:
            g = ch.strength(t)
            if g == 0.0:
                continue
            L = ch.L
            out += g * (L @ rho @ dagger(L) - 0.5 * (ch.LdagL @ rho + rho @ ch.LdagL))
        return out


def effective_hamiltonian(m: PseudoLindbladModel, t: float) -> np.ndarray:
    """``H(t) - (i/2) sum_i gamma_i(t) L_i^+ L_i`` (non-Hermitian in general)."""
    return m.effective_hamiltonian(t)


def master_rhs(m: PseudoLindbladModel, rho, t: float) -> np.ndarray:
    return m.master_rhs(np.asarray(rho, dtype=complex), t)


def one_step_average(m: PseudoLindbladModel, state, dt: float, rates) -> np.ndarray:
    """Exact outcome-weighted average of one trajectory step, without sampling.

    Returns ``sum_i r_i dt sigma_i + (1 - sum_i r_i dt) sigma_0`` where
    ``sigma = s |psi><psi|`` after jump ``i`` or after the drift, with model
    quantities taken at the step midpoint like the trajectory engine does.
    Channels with ``r_i = 0`` contribute nothing. Agrees with
    ``sigma + dt * master_rhs(sigma, t)`` up to ``O(dt**2)``.
    """
    from .engine import apply_jump, drift_step, evaluation_time

    rates = np.asarray(rates, dtype=float)
    if dt < 0:
        raise ValueError("dt must be non-negative")
    total = float(np.sum(rates)) * dt
    if total >= 1.0:
        raise ValueError(f"invalid step: sum(r_i) * dt = {total:.6g} >= 1")
    if np.any(rates < 0):
        raise ValueError("rates must be non-negative")

    def sigma(st):
        return st.sign * np.outer(st.psi, np.conj(st.psi))

    out = (1.0 - total) * sigma(drift_step(state, m, dt, rates))
    for i, r in enumerate(rates):
        if r > 0.0:
            out += r * dt * sigma(apply_jump(state, m, i, r, t_eval=evaluation_time(state.t, dt)))
    return out
