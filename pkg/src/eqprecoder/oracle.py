"""Brute-force recovery of equivariant linear-layer structure.

For a group representation rho, the admissible weight matrices W are the
solutions of a homogeneous linear system (e.g. rho(g) W = W rho(g) for all
g). We sample group elements, stack the constraints on vec(W), and read off
the null space numerically. Complex unknowns are realified so the null-space
computation itself only ever sees real matrices.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

KINDS = ("unitary_left", "unitary_absorb", "perm_diag", "perm_pair")
NULL_TOL = 1e-9


class InsufficientSamplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class ConstraintFamily:
    kind: str
    n: int = 1
    k: int = 1
    num_group_samples: int = 64

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown constraint family {self.kind!r}; expected one of {KINDS}")
        if self.n < 1 or self.k < 1:
            raise ValueError("n and k must be >= 1")
        if self.num_group_samples < 20:
            raise ValueError("num_group_samples must be >= 20")

    @property
    def unknown_shape(self) -> tuple[int, int]:
        nk = self.n * self.k
        if self.kind == "unitary_left":
            return nk, nk
        if self.kind == "unitary_absorb":
            return nk, self.k
        return self.k * self.k, self.k * self.k

    @property
    def label(self) -> str:
        if self.kind.startswith("unitary"):
            return f"N={self.n},K={self.k}"
        return f"K={self.k}"


@dataclass
class SolutionSpace:
    basis: list = field(repr=False)
    dimension: int
    residual: float


def haar_unitary(rng: np.random.Generator, n: int) -> np.ndarray:
    z = (rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))) / np.sqrt(2.0)
    q, r = np.linalg.qr(z)
    d = np.diag(r)
    return q * (d / np.abs(d))


def random_permutation(rng: np.random.Generator, k: int) -> np.ndarray:
    return np.eye(k)[rng.permutation(k)]


def sample_group_element(family: ConstraintFamily, rng: np.random.Generator) -> np.ndarray:
    """The representation matrix rho(g) acting on the layer's (vectorized) output."""
    if family.kind.startswith("unitary"):
        return np.kron(np.eye(family.k), haar_unitary(rng, family.n))
    if family.kind == "perm_diag":
        p = random_permutation(rng, family.k)
        return np.kron(p, p)
    return np.kron(random_permutation(rng, family.k), random_permutation(rng, family.k))


def special_elements(family: ConstraintFamily) -> list:
    if family.kind.startswith("unitary"):
        return [np.kron(np.eye(family.k), -np.eye(family.n))]
    return []


def constraint_operator(family: ConstraintFamily, rho: np.ndarray) -> np.ndarray:
    """Matrix A with A vec(W) = vec(constraint residual), column-major vec."""
    rows, cols = family.unknown_shape
    if family.kind == "unitary_absorb":
        # rho W - W
        return np.kron(np.eye(cols), rho) - np.eye(rows * cols)
    # rho W - W rho
    return np.kron(np.eye(cols), rho) - np.kron(rho.T, np.eye(rows))


def constraint_residual(family: ConstraintFamily, rho: np.ndarray, W: np.ndarray) -> float:
    if family.kind == "unitary_absorb":
        return float(np.linalg.norm(rho @ W - W))
    return float(np.linalg.norm(rho @ W - W @ rho))


def realify(A: np.ndarray) -> np.ndarray:
    return np.block([[A.real, -A.imag], [A.imag, A.real]])


def _refine(Z: np.ndarray, A: np.ndarray) -> np.ndarray:
    """Restrict the real null-space basis Z to also satisfy A z = 0."""
    if Z.shape[1] == 0:
        return Z
    AZ = realify(A) @ Z
    _, s, vt = np.linalg.svd(AZ, full_matrices=AZ.shape[0] < AZ.shape[1])
    scale = max(1.0, s[0] if s.size else 0.0)
    rank = int(np.sum(s > NULL_TOL * scale))
    return Z @ vt[rank:].T


def _complex_basis(Z: np.ndarray, shape) -> list:
    d = Z.shape[0] // 2
    if Z.shape[1] == 0:
        return []
    W = Z[:d] + 1j * Z[d:]
    u, s, _ = np.linalg.svd(W, full_matrices=False)
    m = int(np.sum(s > NULL_TOL * s[0]))
    # column-major vec -> matrix
    return [u[:, i].reshape(shape, order="F") for i in range(m)]


def _null_space(family: ConstraintFamily, elements, Z=None) -> np.ndarray:
    if Z is None:
        rows, cols = family.unknown_shape
        Z = np.eye(2 * rows * cols)
    for rho in elements:
        Z = _refine(Z, constraint_operator(family, rho))
    return Z


def solve_commutant(family: ConstraintFamily, rng: np.random.Generator) -> SolutionSpace:
    """Numerical basis of all linear maps obeying the family's constraint."""
    elements = special_elements(family) + [
        sample_group_element(family, rng) for _ in range(family.num_group_samples)
    ]
    Z = _null_space(family, elements)
    extra = [sample_group_element(family, rng) for _ in range(family.num_group_samples)]
    Z2 = _null_space(family, extra, Z)
    if Z.shape[1] != Z2.shape[1]:
        raise InsufficientSamplingError(
            f"{family.kind} ({family.label}): null-space dimension changed from "
            f"{Z.shape[1] // 2} to {Z2.shape[1] // 2} after doubling the group samples"
        )
    if Z2.shape[1] % 2:
        raise RuntimeError("realified null space has odd dimension; constraint is not complex-linear")
    basis = _complex_basis(Z2, family.unknown_shape)
    residual = 0.0
    for B in basis:
        for rho in elements + extra:
            residual = max(residual, constraint_residual(family, rho, B))
    return SolutionSpace(basis=basis, dimension=len(basis), residual=residual)


def verify_kronecker_structure(W, n: int, k: int) -> dict:
    """Least-squares fit W ~ G^T kron I_N. Returns ``{"g": G, "residual": rel}``."""
    W = np.asarray(W)
    if W.shape != (n * k, n * k):
        raise ValueError(f"W must be {n * k} x {n * k}, got {W.shape}")
    blocks = W.reshape(k, n, k, n)  # blocks[i, :, j, :] is the (i, j) N x N block
    # block (i, j) of G^T kron I is G[j, i] * I
    gt = np.trace(blocks, axis1=1, axis2=3) / n
    G = gt.T
    fit = np.kron(G.T, np.eye(n))
    total = np.linalg.norm(W)
    residual = 0.0 if total == 0 else float(np.linalg.norm(W - fit) / total)
    return {"g": G, "residual": residual}


def default_families(num_group_samples: int = 64) -> list[ConstraintFamily]:
    return [
        ConstraintFamily("unitary_left", n=3, k=2, num_group_samples=num_group_samples),
        ConstraintFamily("unitary_absorb", n=3, k=2, num_group_samples=num_group_samples),
        ConstraintFamily("perm_diag", k=4, num_group_samples=num_group_samples),
        ConstraintFamily("perm_pair", k=4, num_group_samples=num_group_samples),
    ]


def structure_report(families, rng: np.random.Generator) -> list[dict]:
    rows = []
    for fam in families:
        space = solve_commutant(fam, rng)
        rows.append({
            "family": fam.kind,
            "size": fam.label,
            "n": fam.n,
            "k": fam.k,
            "dimension": space.dimension,
            "residual": space.residual,
        })
    return rows
