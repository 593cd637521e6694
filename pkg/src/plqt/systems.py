"""Model builders: the eternal non-Markovian qubit and the extended spinless-fermion chain."""
from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from math import comb

import numpy as np

from .linops import SIGMA_X, SIGMA_Y, SIGMA_Z
from .model import JumpChannel, PseudoLindbladModel


# --------------------------------------------------------------------------
# eternal qubit


def eternal_qubit() -> PseudoLindbladModel:
    """``H = 0`` with channels ``sigma_x`` (1/2), ``sigma_y`` (1/2), ``sigma_z`` (-tanh(t)/2).

    The sigma_z strength is negative for every ``t > 0``.
    """
    return PseudoLindbladModel(
        np.zeros((2, 2), dtype=complex),
        [
            JumpChannel("x", SIGMA_X, 0.5),
            JumpChannel("y", SIGMA_Y, 0.5),
            JumpChannel("z", SIGMA_Z, lambda t: -0.5 * np.tanh(t)),
        ],
    )


def eternal_qubit_sign_flip_rate(t: float) -> float:
    return 0.5 * np.tanh(t)


@dataclass(frozen=True)
class BlochVector:
    x: float
    y: float
    z: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    def density_matrix(self) -> np.ndarray:
        return 0.5 * np.array(
            [[1 + self.z, self.x - 1j * self.y], [self.x + 1j * self.y, 1 - self.z]], dtype=complex
        )

    @classmethod
    def from_state(cls, psi) -> "BlochVector":
        psi = np.asarray(psi, dtype=complex)
        rho = np.outer(psi, np.conj(psi)) / np.vdot(psi, psi).real
        return cls.from_density_matrix(rho)

    @classmethod
    def from_density_matrix(cls, rho) -> "BlochVector":
        return cls(2 * rho[0, 1].real, -2 * rho[0, 1].imag, (rho[0, 0] - rho[1, 1]).real)


def bloch_state(theta: float, phi: float) -> np.ndarray:
    return np.array([np.cos(theta / 2), np.exp(1j * phi) * np.sin(theta / 2)], dtype=complex)


def eternal_qubit_analytic(bloch0: BlochVector, t: float) -> BlochVector:
    # x, y decay at 1 - tanh(t); z at 2
    a = 0.5 * (1 + np.exp(-2 * t))
    return BlochVector(bloch0.x * a, bloch0.y * a, bloch0.z * np.exp(-2 * t))


# --------------------------------------------------------------------------
# spinless fermions


@dataclass(frozen=True)
class FermionBasis:
    """Fixed-particle-number sector; site ``l`` is bit ``l`` of each occupation word."""

    sites: int
    particles: int
    states: tuple
    index: dict

    @classmethod
    def build(cls, sites: int, particles: int) -> "FermionBasis":
        if sites < 2:
            raise ValueError("need at least two sites")
        if not 0 <= particles <= sites:
            raise ValueError(f"invalid sector: {particles} particles on {sites} sites")
        words = sorted(sum(1 << s for s in occ) for occ in combinations(range(sites), particles))
        assert len(words) == comb(sites, particles)
        return cls(sites, particles, tuple(words), {w: k for k, w in enumerate(words)})

    @property
    def size(self) -> int:
        return len(self.states)

    def word(self, pattern: str) -> int:
        """Occupation word of a pattern string, site 0 leftmost."""
        if len(pattern) != self.sites or set(pattern) - {"0", "1"}:
            raise ValueError(f"pattern {pattern!r} is not a {self.sites}-site occupation string")
        return sum(1 << l for l, c in enumerate(pattern) if c == "1")

    def pattern(self, word: int) -> str:
        return "".join("1" if word >> l & 1 else "0" for l in range(self.sites))


def _parity_below(word: int, site: int) -> int:
    return -1 if bin(word & ((1 << site) - 1)).count("1") % 2 else 1


def hop(word: int, i: int, j: int):
    """Apply ``a_i^+ a_j`` to an occupation word. Returns ``(sign, new_word)`` or ``None``."""
    if not word >> j & 1:
        return None
    sign = _parity_below(word, j)
    word ^= 1 << j
    if word >> i & 1:
        return None
    sign *= _parity_below(word, i)
    return sign, word | (1 << i)


def _bonds(sites: int, boundary: str):
    if boundary == "periodic":
        return [(l, (l + 1) % sites) for l in range(sites)] if sites > 2 else [(0, 1), (1, 0)]
    if boundary == "open":
        return [(l, l + 1) for l in range(sites - 1)]
    raise ValueError(f"boundary must be 'periodic' or 'open', got {boundary!r}")


def _pair_count(word: int, bonds) -> int:
    return sum(1 for a, b in bonds if word >> a & 1 and word >> b & 1)


def hubbard_chain(sites: int, particles: int, J: float, V: float, boundary: str = "periodic"):
    """Extended Hubbard chain of spinless fermions in a fixed-number sector.

    ``H = -J sum_l (a_l^+ a_{l+1} + h.c.) + V sum_l n_l n_{l+1}``; the periodic
    bond ``(M-1, 0)`` carries the Jordan-Wigner parity sign. Returns ``(H, basis)``.
    """
    basis = FermionBasis.build(sites, particles)
    bonds = _bonds(sites, boundary)
    h = np.zeros((basis.size, basis.size), dtype=complex)
    for k, w in enumerate(basis.states):
        h[k, k] += V * _pair_count(w, bonds)
        for a, b in bonds:
            for i, j in ((a, b), (b, a)):
                res = hop(w, i, j)
                if res is not None:
                    sign, w2 = res
                    h[basis.index[w2], k] += -J * sign
    return h, basis


def site_density_couplings(basis: FermionBasis) -> list:
    return [
        np.diag([float(w >> l & 1) for w in basis.states]).astype(complex)
        for l in range(basis.sites)
    ]


def interaction_energy_observable(basis: FermionBasis, V: float, boundary: str = "periodic") -> np.ndarray:
    bonds = _bonds(basis.sites, boundary)
    return np.diag([V * _pair_count(w, bonds) for w in basis.states]).astype(complex)


def cdw_state(basis: FermionBasis, pattern: str | None = None) -> np.ndarray:
    """Unit vector on an occupation pattern; default is ``0110110...`` truncated to the chain."""
    if pattern is None:
        pattern = ("011" * basis.sites)[: basis.sites]
    w = basis.word(pattern)
    if w not in basis.index:
        raise ValueError(f"pattern {pattern!r} is outside the {basis.particles}-particle sector")
    psi = np.zeros(basis.size, dtype=complex)
    psi[basis.index[w]] = 1.0
    return psi
