import numpy as np
import pytest

from eqprecoder.oracle import (
    ConstraintFamily, InsufficientSamplingError, constraint_residual, default_families,
    sample_group_element, solve_commutant, structure_report, verify_kronecker_structure,
)
import eqprecoder.oracle as oracle


@pytest.fixture(scope="module")
def spaces():
    rng = np.random.default_rng(3)
    return {f.kind: (f, solve_commutant(f, rng)) for f in default_families()}


@pytest.mark.parametrize("kind,dim", [("unitary_left", 4), ("unitary_absorb", 0), ("perm_diag", 15), ("perm_pair", 4)])
def test_dimensions(spaces, kind, dim):
    _, space = spaces[kind]
    assert space.dimension == dim
    assert space.residual < 1e-8


def test_unitary_left_basis_is_kronecker(spaces):
    fam, space = spaces["unitary_left"]
    for B in space.basis:
        assert verify_kronecker_structure(B, fam.n, fam.k)["residual"] < 1e-8


def test_basis_orthonormal(spaces):
    for _, space in spaces.values():
        if not space.basis:
            continue
        M = np.stack([b.ravel() for b in space.basis])
        np.testing.assert_allclose(M.conj() @ M.T, np.eye(len(space.basis)), atol=1e-10)


def test_out_of_sample_constraints(spaces):
    rng = np.random.default_rng(99)
    for fam, space in spaces.values():
        for _ in range(100):
            rho = sample_group_element(fam, rng)
            for B in space.basis:
                assert constraint_residual(fam, rho, B) < 1e-8


def test_pair_strictly_stronger(spaces):
    assert spaces["perm_pair"][1].dimension < spaces["perm_diag"][1].dimension


def test_unitary_left_single_ue():
    space = solve_commutant(ConstraintFamily("unitary_left", n=3, k=1), np.random.default_rng(0))
    assert space.dimension == 1
    B = space.basis[0]
    np.testing.assert_allclose(B / B[0, 0], np.eye(3), atol=1e-10)


@pytest.mark.parametrize("k,diag,pair", [(2, 8, 4), (3, 14, 4), (5, 15, 4)])
def test_permutation_dimensions_other_sizes(k, diag, pair):
    # perm_diag: set partitions of the 4 index slots into at most K blocks
    # (1 + 7 for K = 2, 15 - 1 for K = 3); perm_pair: 2 x 2 for any K >= 2
    rng = np.random.default_rng(k)
    assert solve_commutant(ConstraintFamily("perm_diag", k=k), rng).dimension == diag
    assert solve_commutant(ConstraintFamily("perm_pair", k=k), rng).dimension == pair


def test_kronecker_fit_cases(rng):
    n, k = 3, 2
    G = rng.standard_normal((k, k)) + 1j * rng.standard_normal((k, k))
    out = verify_kronecker_structure(np.kron(G.T, np.eye(n)), n, k)
    assert out["residual"] < 1e-12
    np.testing.assert_allclose(out["g"], G, atol=1e-12)
    dense = rng.standard_normal((n * k, n * k))
    assert verify_kronecker_structure(dense, n, k)["residual"] > 0.1
    zero = verify_kronecker_structure(np.zeros((n * k, n * k)), n, k)
    assert zero["residual"] == 0.0 and np.all(zero["g"] == 0)
    with pytest.raises(ValueError):
        verify_kronecker_structure(np.zeros((5, 5)), n, k)


def test_family_validation():
    with pytest.raises(ValueError):
        ConstraintFamily("banana")
    with pytest.raises(ValueError):
        ConstraintFamily("perm_diag", k=0)
    with pytest.raises(ValueError):
        ConstraintFamily("perm_diag", k=3, num_group_samples=5)


def test_unstable_sampling_detected(monkeypatch):
    # a sampler that only ever returns the identity leaves the full space free;
    # switching to real samples for the doubling pass shrinks it
    fam = ConstraintFamily("perm_diag", k=3, num_group_samples=20)
    real = oracle.sample_group_element
    calls = {"n": 0}

    def lazy(family, rng):
        calls["n"] += 1
        if calls["n"] <= family.num_group_samples:
            return np.eye(family.k * family.k)
        return real(family, rng)

    monkeypatch.setattr(oracle, "sample_group_element", lazy)
    with pytest.raises(InsufficientSamplingError, match="doubling"):
        solve_commutant(fam, np.random.default_rng(0))


def test_structure_report_rows():
    rows = structure_report(default_families(), np.random.default_rng(0))
    assert [r["dimension"] for r in rows] == [4, 0, 15, 4]
    assert all(set(r) >= {"family", "size", "dimension", "residual"} for r in rows)
