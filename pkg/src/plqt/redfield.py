"""Redfield dynamics for Ohmic baths, rewritten as a pseudo-Lindblad model.

Each coupling ``S_i`` talks to its own bath. The convolution operator has
eigenbasis elements ``<n|SS_i|m> = w(E_n - E_m) <n|S_i|m>`` with the Bose weight
``w(D) = gamma D / (exp(D/T) - 1)`` (real part only). The dissipator splits into
``L_{i,+-} = (lam S_i +- SS_i / lam) / sqrt(2)`` with strengths ``+-1``; every
``lam > 0`` yields the same generator.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .linops import (
    EigenDecomposition,
    as_operator,
    as_vector,
    dagger,
    frozen,
    hermitian_eigendecomposition,
)
from .model import JumpChannel, PseudoLindbladModel

_SMALL_RATIO = 1e-8


@dataclass(frozen=True)
class BathSpec:
    """Ohmic bath ``J(E) = coupling_gamma * E`` at ``temperature``."""

    coupling_gamma: float
    temperature: float

    def __post_init__(self):
        if not self.coupling_gamma >= 0:
            raise ValueError("coupling_gamma must be non-negative")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")


def bose_weight(delta, bath: BathSpec):
    """``gamma * delta / (exp(delta/T) - 1)``, continued to ``gamma * T`` at ``delta = 0``."""
    d = np.asarray(delta, dtype=float)
    x = d / bath.temperature
    small = np.abs(x) < _SMALL_RATIO
    safe = np.where(small, 1.0, x)
    w = np.where(small, bath.coupling_gamma * bath.temperature,
                 bath.coupling_gamma * bath.temperature * safe / np.expm1(safe))
    return float(w) if w.ndim == 0 else w


def build_convolution_operator(eig: EigenDecomposition, S, bath: BathSpec) -> np.ndarray:
    S = as_operator(S)
    if S.shape[0] != eig.dimension:
        raise ValueError("coupling operator does not match the Hamiltonian dimension")
    E = eig.eigenvalues
    weights = bose_weight(E[:, None] - E[None, :], bath)
    return eig.from_eigenbasis(weights * eig.to_eigenbasis(S))


def lamb_shift(couplings: Sequence, conv_ops: Sequence) -> np.ndarray:
    """``(1/2i) sum_i (S_i SS_i - (S_i SS_i)^+)``."""
    if len(couplings) != len(conv_ops):
        raise ValueError("couplings and convolution operators are not aligned")
    if not couplings:
        raise ValueError("no couplings")
    out = np.zeros_like(as_operator(couplings[0]))
    for S, SS in zip(couplings, conv_ops):
        X = as_operator(S) @ as_operator(SS)
        out = out + (X - dagger(X)) / 2j
    return 0.5 * (out + dagger(out))


def decompose(S, SS, lam: float):
    """``(L_plus, L_minus)`` with ``L_pm = (lam S +- SS / lam) / sqrt(2)``."""
    if not lam > 0 or not np.isfinite(lam):
        raise ValueError(f"lambda must be positive and finite, got {lam}")
    S, SS = as_operator(S), as_operator(SS)
    a, b = lam * S, SS / lam
    return (a + b) / np.sqrt(2), (a - b) / np.sqrt(2)


def negative_channel_norm(S, SS, lam: float) -> float:
    """``tr L_minus^+ L_minus`` as a function of ``lam``."""
    _, Lm = decompose(S, SS, lam)
    return float(np.real(np.vdot(Lm, Lm)))


def lambda_global(S, SS) -> float:
    """``lam`` with ``lam**4 = tr SS^+ SS / tr S S``, minimizing ``tr L_minus^+ L_minus``."""
    S, SS = as_operator(S), as_operator(SS)
    tss = float(np.real(np.trace(S @ S)))
    if not tss > 0:
        raise ValueError("null coupling operator: tr(S S) = 0")
    tconv = float(np.real(np.vdot(SS, SS)))
    if not tconv > 0:
        raise ValueError("convolution operator vanishes; lambda is undetermined")
    return (tconv / tss) ** 0.25


def lambda_local(S, SS, psi, fallback: float | None = None) -> float:
    """``lam`` with ``lam**2 = ||SS psi|| / ||S psi||``, minimizing the negative jump rate.

    Falls back to ``fallback`` (default: :func:`lambda_global`) when either
    vector is below ``1e-12 ||psi||``.
    """
    psi = as_vector(psi)
    eps = 1e-12 * np.linalg.norm(psi)
    a = np.linalg.norm(as_operator(S) @ psi)
    b = np.linalg.norm(as_operator(SS) @ psi)
    if a < eps or b < eps:
        return lambda_global(S, SS) if fallback is None else fallback
    return float(np.sqrt(b / a))


def negative_rate(S, SS, psi, lam: float) -> float:
    """Rate of the negative channel for the normalized state:
    ``(lam^2 ||S psi||^2 + ||SS psi||^2 / lam^2 - 2 Re <S SS>) / 2``."""
    psi = as_vector(psi)
    psi = psi / np.linalg.norm(psi)
    Sp = as_operator(S) @ psi
    SSp = as_operator(SS) @ psi
    cross = np.vdot(Sp, SSp).real  # <psi|S SS|psi> with S Hermitian
    return float(0.5 * (lam**2 * np.vdot(Sp, Sp).real + np.vdot(SSp, SSp).real / lam**2 - 2 * cross))


@dataclass(frozen=True)
class LambdaPolicy:
    """How to choose ``lam_i``: ``fixed`` (one value or one per coupling), ``global`` or ``local``."""

    mode: str
    values: tuple = ()

    def __post_init__(self):
        if self.mode not in ("fixed", "global", "local"):
            raise ValueError(f"unknown lambda mode {self.mode!r}")
        if self.mode == "fixed":
            vals = tuple(float(v) for v in np.atleast_1d(self.values))
            if not vals or any(not (v > 0 and np.isfinite(v)) for v in vals):
                raise ValueError("fixed lambda values must be positive and finite")
            object.__setattr__(self, "values", vals)

    @classmethod
    def fixed(cls, *values) -> "LambdaPolicy":
        return cls("fixed", values)

    @classmethod
    def global_(cls) -> "LambdaPolicy":
        return cls("global")

    @classmethod
    def local(cls) -> "LambdaPolicy":
        return cls("local")

    @classmethod
    def parse(cls, text: str) -> "LambdaPolicy":
        """``"global"``, ``"local"``, ``"fixed:0.7"`` or ``"fixed:0.5,2"``."""
        text = text.strip().lower()
        if text in ("global", "local"):
            return cls(text)
        if text.startswith("fixed:"):
            return cls("fixed", tuple(float(v) for v in text[6:].split(",")))
        raise ValueError(f"cannot parse lambda mode {text!r}")


class RedfieldModel:
    """System Hamiltonian with Ohmic couplings; convolution operators and Lamb shift are cached."""

    def __init__(self, hamiltonian, couplings: Sequence, include_lamb_shift: bool = True):
        h = frozen(as_operator(hamiltonian))
        self.hamiltonian = h
        self.eig = hermitian_eigendecomposition(h)
        self.couplings = []
        conv = []
        for S, bath in couplings:
            S = frozen(as_operator(S))
            if S.shape != h.shape:
                raise ValueError("coupling operator does not match the Hamiltonian dimension")
            self.couplings.append((S, bath))
            conv.append(frozen(build_convolution_operator(self.eig, S, bath)))
        self.conv_ops = tuple(conv)
        self.include_lamb_shift = bool(include_lamb_shift)
        if self.couplings:
            self.lamb_shift = frozen(lamb_shift([S for S, _ in self.couplings], self.conv_ops))
        else:
            self.lamb_shift = frozen(np.zeros_like(h))

    @property
    def dimension(self) -> int:
        return self.hamiltonian.shape[0]

    @property
    def coupling_operators(self):
        return [S for S, _ in self.couplings]

    def system_hamiltonian(self) -> np.ndarray:
        return self.hamiltonian + self.lamb_shift if self.include_lamb_shift else self.hamiltonian

    def global_lambdas(self):
        return [lambda_global(S, SS) for S, SS in zip(self.coupling_operators, self.conv_ops)]


def _channels(rm: RedfieldModel, lams) -> list:
    chans = []
    for i, ((S, _), SS, lam) in enumerate(zip(rm.couplings, rm.conv_ops, lams)):
        Lp, Lm = decompose(S, SS, lam)
        chans.append(JumpChannel(f"{i}+", Lp, 1.0))
        chans.append(JumpChannel(f"{i}-", Lm, -1.0))
    return chans


def _real_view(z):
    """Interleaved (re, im) float view of a complex array; last axis doubles."""
    z = np.ascontiguousarray(z, dtype=complex)
    return z.view(np.float64)


class LocalLambdaRefresher:
    """Rebuilds ``L_{i,+-}`` with ``lam_i = lambda_local(S_i, SS_i, psi)`` before each step.

    ``batch`` is the vectorized form used by the trajectory engine. The
    combination ``L_+^+ L_+ - L_-^+ L_-`` equals ``S SS + SS^+ S`` for every
    ``lam``, so the effective Hamiltonian does not depend on the state.
    """

    time_independent = True

    def __init__(self, rm: RedfieldModel):
        self.rm = rm
        self.S = np.array(rm.coupling_operators)
        self.SS = np.array(rm.conv_ops)
        self.fallback = np.array(rm.global_lambdas())
        anti = sum((S @ SS + dagger(SS) @ S for S, SS in zip(self.S, self.SS)), np.zeros_like(rm.hamiltonian))
        self.heff = rm.system_hamiltonian() - 0.5j * anti
        self.gammas = np.tile([1.0, -1.0], len(self.S))
        # psi @ W gives S_0 psi, SS_0 psi, S_1 psi, ... side by side
        blocks = [M.T for S, SS in zip(self.S, self.SS) for M in (S, SS)]
        self._W = np.concatenate(blocks, axis=1) if blocks else np.zeros((rm.dimension, 0), complex)

    def _images(self, psis):
        n, d = len(self.S), psis.shape[-1]
        return (psis @ self._W).reshape(psis.shape[0], n, 2, d)

    def lambdas(self, psis: np.ndarray) -> np.ndarray:
        """Local ``lam`` per coupling and trajectory, shape ``(n_couplings, B)``."""
        psis = np.atleast_2d(psis)
        return self._lambdas_from(self._images(psis), psis).T

    def _lambdas_from(self, v, psis, sq=None):
        # v: (B, n, 2, D); returns (B, n)
        if sq is None:
            vf = _real_view(v)
            sq = np.einsum("bkjd,bkjd->bkj", vf, vf)
        a2, b2 = sq[..., 0], sq[..., 1]
        pf = _real_view(psis)
        p2 = np.einsum("bd,bd->b", pf, pf)
        eps2 = 1e-24 * p2[:, None]
        ok = (a2 >= eps2) & (b2 >= eps2)
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = (b2 / a2) ** 0.25
        return np.where(ok, lam, self.fallback[None, :])

    def __call__(self, psi, t):
        lams = self.lambdas(np.asarray(psi, complex)[None, :])[:, 0]
        return _channels(self.rm, lams)

    def batch(self, psis, t):
        """``(gammas, ||L psi||^2, images)`` in the engine's block protocol."""
        v = self._images(psis)
        vf = _real_view(v)
        sq = np.einsum("bkjd,bkjd->bkj", vf, vf)
        lam = self._lambdas_from(v, psis, sq)
        lam2 = lam * lam
        cross = np.einsum("bkd,bkd->bk", vf[:, :, 0], vf[:, :, 1])
        # ||(lam a +- b/lam)/sqrt2||^2 = (lam^2 |a|^2 + |b|^2/lam^2 +- 2 Re<a|b>) / 2
        even = 0.5 * (lam2 * sq[..., 0] + sq[..., 1] / lam2)
        norm_sq = np.empty((psis.shape[0], lam.shape[1], 2))
        norm_sq[..., 0] = even + cross
        norm_sq[..., 1] = np.maximum(even - cross, 0.0)

        def images(ch, rows):
            k, j = np.divmod(ch, 2)
            l = lam[rows, k][:, None]
            x = v[rows, k, 0] * (l / np.sqrt(2.0))
            y = v[rows, k, 1] / (l * np.sqrt(2.0))
            return np.where((j == 0)[:, None], x + y, x - y)

        return self.gammas, norm_sq.reshape(psis.shape[0], -1).T, images

    def effective_hamiltonian(self, t):
        return self.heff


def to_pseudo_lindblad(rm: RedfieldModel, policy: LambdaPolicy) -> PseudoLindbladModel:
    """Pseudo-Lindblad form: ``H + H_LS`` and channels ``(L_{i+}, +1), (L_{i-}, -1)`` per coupling."""
    n = len(rm.couplings)
    if policy.mode == "fixed":
        lams = policy.values if len(policy.values) == n else policy.values * n if len(policy.values) == 1 else None
        if lams is None:
            raise ValueError(f"{len(policy.values)} fixed lambda values for {n} couplings")
        return PseudoLindbladModel(rm.system_hamiltonian(), _channels(rm, lams))
    glob = rm.global_lambdas()
    if policy.mode == "global":
        return PseudoLindbladModel(rm.system_hamiltonian(), _channels(rm, glob))
    return PseudoLindbladModel(rm.system_hamiltonian(), _channels(rm, glob), refresher=LocalLambdaRefresher(rm))


def redfield_rhs(rm: RedfieldModel, rho) -> np.ndarray:
    """Redfield generator in commutator form, ``-i[H, rho] - sum_i [S_i, SS_i rho - rho SS_i^+]``.

    The Lamb shift is implicit in this form; with ``include_lamb_shift=False``
    it is subtracted again so the result matches the pseudo-Lindblad model.
    """
    rho = np.asarray(rho, dtype=complex)
    h = rm.hamiltonian
    out = -1j * (h @ rho - rho @ h)
    for (S, _), SS in zip(rm.couplings, rm.conv_ops):
        X = SS @ rho - rho @ dagger(SS)
        out -= S @ X - X @ S
    if not rm.include_lamb_shift:
        out += 1j * (rm.lamb_shift @ rho - rho @ rm.lamb_shift)
    return out
