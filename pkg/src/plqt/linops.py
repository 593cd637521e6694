"""Dense complex linear algebra used throughout the package.

Vectors and operators are plain ``numpy`` arrays of dtype ``complex128``;
the helpers here add the dimension and Hermiticity checks the rest of the
code relies on.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

HERMITIAN_TOL = 1e-10

SIGMA_X = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
SIGMA_Z = np.array([[1, 0], [0, -1]], dtype=complex)
SIGMA_MINUS = np.array([[0, 1], [0, 0]], dtype=complex)  # |0><1|, lowers |1> -> |0>
IDENTITY_2 = np.eye(2, dtype=complex)

for _m in (SIGMA_X, SIGMA_Y, SIGMA_Z, SIGMA_MINUS, IDENTITY_2):
    _m.setflags(write=False)


def as_vector(v) -> np.ndarray:
    v = np.asarray(v, dtype=complex)
    if v.ndim != 1 or v.size < 1:
        raise ValueError(f"expected a 1-d vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("vector has non-finite entries")
    return v


def as_operator(a) -> np.ndarray:
    a = np.asarray(a, dtype=complex)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    return a


def frozen(a: np.ndarray) -> np.ndarray:
    """Return a read-only copy of ``a``."""
    a = np.array(a, dtype=complex, copy=True)
    a.setflags(write=False)
    return a


def dagger(a: np.ndarray) -> np.ndarray:
    return np.conj(np.swapaxes(a, -1, -2))


def hermiticity_error(a: np.ndarray) -> float:
    """Max-entry deviation from Hermiticity, relative to the largest entry."""
    scale = max(np.max(np.abs(a)), 1.0)
    return float(np.max(np.abs(a - dagger(a))) / scale)


def is_hermitian(a: np.ndarray, tol: float = HERMITIAN_TOL) -> bool:
    return hermiticity_error(a) <= tol


def _check_dims(a: np.ndarray, v: np.ndarray) -> None:
    if a.shape[1] != v.shape[0]:
        raise ValueError(f"dimension mismatch: operator {a.shape} vs vector {v.shape}")


def apply(a, v) -> np.ndarray:
    a = as_operator(a)
    v = as_vector(v)
    _check_dims(a, v)
    return a @ v


def expectation(a, v) -> complex:
    """<v|A|v> for an unnormalized ``v``."""
    a = as_operator(a)
    v = as_vector(v)
    _check_dims(a, v)
    return complex(np.vdot(v, a @ v))


def norm_sq(v) -> float:
    v = np.asarray(v)
    return float(np.real(np.vdot(v, v)))


@dataclass(frozen=True)
class EigenDecomposition:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    @property
    def dimension(self) -> int:
        return self.eigenvalues.size

    def reconstruct(self) -> np.ndarray:
        u = self.eigenvectors
        return (u * self.eigenvalues) @ dagger(u)

    def to_eigenbasis(self, a: np.ndarray) -> np.ndarray:
        u = self.eigenvectors
        return dagger(u) @ a @ u

    def from_eigenbasis(self, a: np.ndarray) -> np.ndarray:
        u = self.eigenvectors
        return u @ a @ dagger(u)


def hermitian_eigendecomposition(a) -> EigenDecomposition:
    """Eigenvalues (ascending) and unitary eigenvectors of a Hermitian matrix.

    Raises ``ValueError`` if ``a`` is not Hermitian to within 1e-10.
    """
    a = as_operator(a)
    err = hermiticity_error(a)
    if err > HERMITIAN_TOL:
        raise ValueError(f"matrix is not Hermitian (relative deviation {err:.3e})")
    h = 0.5 * (a + dagger(a))
    evals, evecs = np.linalg.eigh(h)
    evals.setflags(write=False)
    evecs.setflags(write=False)
    return EigenDecomposition(evals, evecs)


def random_hermitian(d: int, rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
    x = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
    return scale * 0.5 * (x + dagger(x))


def random_operator(d: int, rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
    return scale * (rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))) / np.sqrt(2 * d)


def random_state(d: int, rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=d) + 1j * rng.normal(size=d)
    return v / np.linalg.norm(v)


def random_density_matrix(d: int, rng: np.random.Generator) -> np.ndarray:
    x = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
    rho = x @ dagger(x)
    return rho / np.trace(rho).real
