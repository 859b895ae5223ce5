import itertools
from functools import reduce

import numpy as np
import pytest

from nafons.spin_model import (HamiltonianParams, ParamRef, SpinModelError, SpinSystem,
                               all_param_refs, build_hamiltonian, pauli_embed, restrict_to_species,
                               zero_cross_species)

from conftest import TABLE_D, TABLE_J, TABLE_SHIFTS

I2 = np.eye(2)
X = np.array([[0, 1], [1, 0]], dtype=complex)
Y = np.array([[0, -1j], [1j, 0]])
Z = np.diag([1.0, -1.0]).astype(complex)


def op_at(m, site, n):
    return reduce(np.kron, [m if i == site else I2 for i in range(n)])


def reference_hamiltonian(species, shifts, D, J):
    """Straight transcription of the model with explicit Kronecker products."""
    n = len(species)
    h = np.zeros((2**n, 2**n), dtype=complex)
    for j in range(n):
        h += np.pi * shifts[j] * op_at(Z, j, n)
    for j, k in itertools.combinations(range(n), 2):
        h += np.pi * (D[j, k] + J[j, k]) * op_at(Z, j, n) @ op_at(Z, k, n)
        if species[j] == species[k]:
            ff = op_at(X, j, n) @ op_at(X, k, n) + op_at(Y, j, n) @ op_at(Y, k, n)
            h += np.pi * (J[j, k] - D[j, k] / 2) * ff
    return h


def random_params(rng, n, scale=1000.0):
    a = np.triu(rng.normal(0, scale, (n, n)), 1)
    b = np.triu(rng.normal(0, 10, (n, n)), 1)
    return HamiltonianParams(rng.normal(0, scale, n), a + a.T, b + b.T)


def test_pauli_z_single_spin():
    assert np.array_equal(pauli_embed("Z", 0, 1), np.diag([1, -1]))


def test_pauli_x_involution():
    x = pauli_embed("X", 1, 2)
    assert np.allclose(x @ x, np.eye(4))
    assert np.allclose(x, np.kron(I2, X))


def test_zz_by_hand():
    zz = pauli_embed("Z", 0, 2) @ pauli_embed("Z", 1, 2)
    assert np.allclose(zz, np.diag([1, -1, -1, 1]))


@pytest.mark.parametrize("axis,site,n", [("Q", 0, 2), ("X", 2, 2), ("Z", -1, 3), ("Z", 0, 11)])
def test_pauli_embed_errors(axis, site, n):
    with pytest.raises(SpinModelError):
        pauli_embed(axis, site, n)


def test_single_spin_eigenvalues():
    sys = SpinSystem.from_pairs([("A", "1H")])
    h = build_hamiltonian(sys, HamiltonianParams([100.0], [[0.0]], [[0.0]]))
    assert np.allclose(np.sort(np.linalg.eigvalsh(h)), [-100 * np.pi, 100 * np.pi])


def test_heteronuclear_pair_is_diagonal():
    sys = SpinSystem.from_pairs([("H", "1H"), ("F", "19F")])
    p = HamiltonianParams([0, 0], [[0, 500], [500, 0]], [[0, 10], [10, 0]])
    h = build_hamiltonian(sys, p)
    assert np.allclose(h, np.diag([510, -510, -510, 510]) * np.pi)


def test_homonuclear_flip_flop_element():
    sys = SpinSystem.from_pairs([("A", "1H"), ("B", "1H")])
    D, J = -700.0, 12.0
    h = build_hamiltonian(sys, HamiltonianParams([0, 0], [[0, D], [D, 0]], [[0, J], [J, 0]]))
    # <01|H|10>, basis order |00>,|01>,|10>,|11>
    assert h[1, 2] == pytest.approx(np.pi * (2 * J - D))


def test_matches_kronecker_reference(rng):
    species = ["1H", "1H", "19F", "1H"]
    sys = SpinSystem.from_pairs([(f"S{i}", s) for i, s in enumerate(species)])
    p = random_params(rng, 4)
    ref = reference_hamiltonian(species, p.shifts_hz, p.dipolar_hz, p.scalar_hz)
    assert np.allclose(build_hamiltonian(sys, p), ref, atol=1e-9)


def test_hermitian_traceless(rng):
    sys = SpinSystem.from_pairs([("a", "1H"), ("b", "1H"), ("c", "13C")])
    h = build_hamiltonian(sys, random_params(rng, 3))
    assert np.allclose(h, h.conj().T, atol=1e-12)
    assert abs(np.trace(h)) < 1e-9


def test_linearity(rng):
    sys = SpinSystem.from_pairs([("a", "1H"), ("b", "1H"), ("c", "19F")])
    p1, p2 = random_params(rng, 3), random_params(rng, 3)
    lhs = build_hamiltonian(sys, 2.5 * p1 + (-0.75) * p2)
    rhs = 2.5 * build_hamiltonian(sys, p1) - 0.75 * build_hamiltonian(sys, p2)
    assert np.allclose(lhs, rhs, atol=1e-8)


def test_all_heteronuclear_commutes_with_z(rng):
    sys = SpinSystem.from_pairs([("a", "1H"), ("b", "19F"), ("c", "13C")])
    h = build_hamiltonian(sys, random_params(rng, 3))
    for j in range(3):
        z = pauli_embed("Z", j, 3)
        assert np.allclose(h @ z, z @ h)


def test_permutation_covariance(rng):
    species = ["1H", "1H", "19F"]
    sys = SpinSystem.from_pairs([(f"s{i}", s) for i, s in enumerate(species)])
    p = random_params(rng, 3)
    perm = [2, 0, 1]
    sys2 = SpinSystem(tuple(sys.spins[i] for i in perm))
    p2 = HamiltonianParams(p.shifts_hz[perm], p.dipolar_hz[np.ix_(perm, perm)], p.scalar_hz[np.ix_(perm, perm)])
    e1 = np.linalg.eigvalsh(build_hamiltonian(sys, p))
    e2 = np.linalg.eigvalsh(build_hamiltonian(sys2, p2))
    assert np.allclose(e1, e2, atol=1e-8)


def test_dimension_mismatch():
    sys = SpinSystem.from_pairs([("a", "1H"), ("b", "1H")])
    with pytest.raises(SpinModelError):
        build_hamiltonian(sys, HamiltonianParams.zeros(3))


def test_non_symmetric_couplings_rejected():
    with pytest.raises(SpinModelError):
        HamiltonianParams([0, 0], [[0, 1], [2, 0]], np.zeros((2, 2)))
    with pytest.raises(SpinModelError):
        HamiltonianParams([0, 0], [[1, 0], [0, 0]], np.zeros((2, 2)))
    with pytest.raises(SpinModelError):
        HamiltonianParams([0, np.nan], np.zeros((2, 2)), np.zeros((2, 2)))


def test_spin_system_invariants():
    with pytest.raises(SpinModelError):
        SpinSystem.from_pairs([])
    with pytest.raises(SpinModelError):
        SpinSystem.from_pairs([("a", "1H"), ("a", "19F")])
    with pytest.raises(SpinModelError):
        SpinSystem.from_pairs([("a", "")])
    s = SpinSystem.from_pairs([("a", "1H"), ("b", "1H"), ("c", "19F")])
    assert s.is_homonuclear(0, 1) and not s.is_homonuclear(1, 2)


def test_vector_round_trip(rng):
    p = random_params(rng, 4)
    q = HamiltonianParams.from_vector(p.to_vector(), 4)
    assert np.array_equal(q.dipolar_hz, p.dipolar_hz)
    assert np.array_equal(q.scalar_hz, p.scalar_hz)


def test_param_ref_names_and_order():
    sys = SpinSystem.from_pairs([("H1", "1H"), ("H2", "1H"), ("F5", "19F")])
    refs = all_param_refs(3)
    assert [r.flat_index(3) for r in refs] == list(range(9))
    assert [r.name(sys) for r in refs[:4]] == ["nu[H1]", "nu[H2]", "nu[F5]", "D[H1,H2]"]
    assert ParamRef.parse("J[F5,H2]", sys) == ParamRef("scalar", 1, 2)
    with pytest.raises(SpinModelError):
        ParamRef.parse("K[H1]", sys)


def test_restrict_fluorine_matches_table(dfba):
    sub, p = restrict_to_species(*dfba, {"19F"})
    assert sub.labels == ["F5", "F6"]
    assert list(p.shifts_hz) == [TABLE_SHIFTS["F5"], TABLE_SHIFTS["F6"]]
    assert p.dipolar_hz[0, 1] == TABLE_D[("F5", "F6")]
    assert p.scalar_hz[0, 1] == TABLE_J[("F5", "F6")]


def test_restrict_protons_upper_left_block(dfba):
    sys, full = dfba
    sub, p = restrict_to_species(sys, full, {"1H"})
    assert sub.labels == ["H1", "H2", "H3", "H4"]
    for (a, b), v in TABLE_D.items():
        if a.startswith("H") and b.startswith("H"):
            assert p.dipolar_hz[sub.index(a), sub.index(b)] == v
            assert p.scalar_hz[sub.index(a), sub.index(b)] == TABLE_J[(a, b)]


def test_restrict_identity_and_errors(dfba):
    sys, p = dfba
    sub, q = restrict_to_species(sys, p, {"1H", "19F"})
    assert sub == sys and np.array_equal(q.to_vector(), p.to_vector())
    with pytest.raises(SpinModelError):
        restrict_to_species(sys, p, set())
    with pytest.raises(SpinModelError):
        restrict_to_species(sys, p, {"13C"})


def test_zero_cross_species(dfba):
    sys, p = dfba
    q = zero_cross_species(sys, p)
    assert q.dipolar_hz[0, 4] == 0 and q.dipolar_hz[0, 1] == p.dipolar_hz[0, 1]
