import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from msrs.subspace import (
    ActivationBank,
    AlignedSubspace,
    Block,
    ExtractionConfig,
    SubspaceBasis,
    _cap_ranks,
    aggregate,
    build_aligned,
    energy_rank,
    extract_private,
    extract_shared,
    extract_subspaces,
    orthonormality_error,
    principal_angles,
    projector,
)
from msrs.toymodel import ModelConfig, forward_capture, init_model


def random_bank(seed, n=2, d=32, per=40, layer=0):
    rng = np.random.default_rng(seed)
    return ActivationBank(
        {f"a{i}": rng.standard_normal((per, d)) + 3 * rng.standard_normal(d) for i in range(n)}, layer
    )


# ---------------------------------------------------------------------------
# ActivationBank


def test_singleton_mean():
    v = np.array([[1.0, -2.0, 3.0]])
    assert np.array_equal(ActivationBank({"a": v}, 0).means["a"], v[0])


def test_two_point_mean():
    bank = ActivationBank({"a": np.array([[1.0, 0.0], [0.0, 1.0]])}, 0)
    assert np.array_equal(bank.means["a"], [0.5, 0.5])


def test_mean_matches_streaming_oracle():
    x = np.random.default_rng(0).standard_normal((100, 16)) * 5
    bank = ActivationBank({"a": x}, 0)
    assert np.abs(bank.means["a"] - oracles.streaming_mean(x)).max() <= 1e-12


def test_bank_validation():
    with pytest.raises(ValueError):
        ActivationBank({}, 0)
    with pytest.raises(ValueError):
        ActivationBank({"a": np.ones((2, 3)), "b": np.ones((2, 4))}, 0)
    with pytest.raises(ValueError):
        ActivationBank({"a": np.full((2, 3), np.inf)}, 0)


def test_aggregate_uses_last_token():
    model = init_model(ModelConfig())
    seqs = [[1, 2, 3], [4, 5, 6, 7]]
    bank = aggregate({"x": seqs}, 1, model)
    for row, s in zip(bank.samples["x"], seqs):
        assert np.array_equal(row, forward_capture(model, s, 1)[1].states[-1])
    with pytest.raises(ValueError):
        aggregate({"x": []}, 1, model)


# ---------------------------------------------------------------------------
# energy_rank


def test_energy_rank_boundary_equality():
    assert energy_rank([9.0, 0.6, 0.4], 0.90) == 1


def test_energy_rank_forced_arithmetic():
    assert energy_rank([5.0, 4.0, 1.0], 0.90) == 2


def test_energy_rank_validation():
    for bad in ([], [1.0, 2.0], [-1.0], [0.0, 0.0]):
        with pytest.raises(ValueError):
            energy_rank(bad)
    with pytest.raises(ValueError):
        energy_rank([1.0], 0.0)
    assert energy_rank([3.0, 2.0, 1.0], 1.0) == 3


@settings(max_examples=300, deadline=None)
@given(
    st.lists(st.floats(0.0, 1e6, allow_nan=False), min_size=1, max_size=20),
    st.floats(0.01, 1.0),
)
def test_energy_rank_matches_scan(values, threshold):
    s = sorted(values, reverse=True)
    if sum(s) == 0:
        return
    r = energy_rank(s, threshold)
    assert r == oracles.energy_rank_scan(s, threshold)
    assert 1 <= r <= len(s)


# ---------------------------------------------------------------------------
# Shared and private extraction


def test_shared_rank_one():
    tau = np.array([3.0, 4.0, 0.0])
    shared = extract_shared(ActivationBank({"a": tau[None]}, 0))
    assert shared.rank == 1
    assert np.allclose(shared.basis[0], tau / 5.0, atol=1e-15)


def test_shared_equal_spectrum():
    bank = ActivationBank({"a": np.array([[2.0, 0, 0, 0]]), "b": np.array([[0, 2.0, 0, 0]])}, 0)
    shared = extract_shared(bank)
    assert shared.rank == 2
    assert np.allclose(projector(shared.basis), np.diag([1.0, 1, 0, 0]), atol=1e-15)


def test_shared_planted_noiseless():
    rng = np.random.default_rng(3)
    q, _ = np.linalg.qr(rng.standard_normal((32, 2)))
    means = (q @ rng.standard_normal((2, 3))).T
    bank = ActivationBank({i: means[i][None] for i in range(3)}, 0)
    shared = extract_shared(bank, threshold=0.999999)
    assert shared.rank == 2
    assert principal_angles(shared.basis, q.T).max() <= 1e-6


def test_shared_rejects_zero_means():
    with pytest.raises(ValueError):
        extract_shared(ActivationBank({"a": np.zeros((3, 4))}, 0))


def test_private_empty_when_inside_shared():
    rng = np.random.default_rng(4)
    shared = SubspaceBasis("shared", np.eye(6)[:2], 1.0)
    x = rng.standard_normal((10, 2)) @ shared.basis
    p = extract_private(ActivationBank({"a": x}, 0), "a", shared)
    assert p.rank == 0 and p.is_empty


def test_private_rank_one_residual():
    rng = np.random.default_rng(5)
    shared = SubspaceBasis("shared", np.eye(6)[:2], 1.0)
    u = np.array([0, 0, 1.0, 2.0, 0, -2.0])
    x = rng.standard_normal((10, 2)) @ shared.basis + rng.uniform(0.5, 2, (10, 1)) * u
    p = extract_private(ActivationBank({"a": x}, 0), "a", shared)
    assert p.rank == 1
    assert abs(abs(p.basis[0] @ u) / np.linalg.norm(u) - 1.0) < 1e-12


def test_private_mean_source_is_rank_one():
    bank = random_bank(6, n=3)
    shared = extract_shared(bank, threshold=0.3)
    assert shared.rank == 1
    p = extract_private(bank, "a0", shared, residual_source="mean")
    assert p.rank == 1


def test_private_validation():
    bank = random_bank(7)
    shared = extract_shared(bank)
    with pytest.raises(KeyError):
        extract_private(bank, "nope", shared)
    with pytest.raises(ValueError):
        extract_private(bank, "a0", shared, residual_source="median")
    with pytest.raises(ValueError):
        extract_private(bank, "a0", SubspaceBasis("shared", np.eye(8)[:1], 1.0))


@pytest.mark.parametrize("n", [1, 2, 3])
@pytest.mark.parametrize("cross", [False, True])
def test_orthogonality_of_extraction(n, cross):
    for seed in range(5):
        shared, privates, aligned = extract_subspaces(random_bank(seed, n=n), ExtractionConfig(cross_orthogonalize=cross))
        assert orthonormality_error(shared.basis) <= 1e-8
        for p in privates:
            assert orthonormality_error(p.basis) <= 1e-8
            assert np.abs(shared.basis @ p.basis.T).max(initial=0) <= 1e-8
        if cross:
            for i in range(n):
                for j in range(i):
                    assert np.abs(privates[i].basis @ privates[j].basis.T).max(initial=0) <= 1e-8


def test_energy_captured_meets_threshold():
    shared, privates, _ = extract_subspaces(random_bank(8))
    assert shared.energy_captured >= 0.9
    assert all(p.energy_captured >= 0.9 for p in privates)


def test_sigma_squared_energy_never_needs_more_rank():
    bank = random_bank(9)
    a = extract_subspaces(bank, ExtractionConfig(energy="sigma"))
    b = extract_subspaces(bank, ExtractionConfig(energy="sigma_squared"))
    assert all(pb.rank <= pa.rank for pa, pb in zip(a[1], b[1]))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.permutations([0, 1, 2]))
def test_shared_projector_permutation_invariant(seed, perm):
    bank = random_bank(seed, n=3, per=5)
    names = bank.attributes
    permuted = ActivationBank({names[i]: bank.samples[names[i]] for i in perm}, 0)
    pa = projector(extract_shared(bank).basis)
    pb = projector(extract_shared(permuted).basis)
    assert np.abs(pa - pb).max() <= 1e-8


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-3, 1e3))
def test_projectors_scale_invariant(seed, c):
    bank = random_bank(seed, n=2, per=12)
    scaled = ActivationBank({k: c * v for k, v in bank.samples.items()}, 0)
    a = extract_subspaces(bank)
    b = extract_subspaces(scaled)
    assert np.abs(projector(a[0].basis) - projector(b[0].basis)).max() <= 1e-8
    for pa, pb in zip(a[1], b[1]):
        assert np.abs(projector(pa.basis) - projector(pb.basis)).max() <= 1e-8


# ---------------------------------------------------------------------------
# Aligned subspace


def test_build_aligned_layout():
    rng = np.random.default_rng(10)
    q, _ = np.linalg.qr(rng.standard_normal((32, 8)))
    q = q.T
    shared = SubspaceBasis("shared", q[:2], 0.9)
    pa = SubspaceBasis("private", q[2:5], 0.9, "A")
    pb = SubspaceBasis("private", q[5:8], 0.9, "B")
    al = build_aligned(shared, [pa, pb])
    assert al.r == 8
    assert [(b.offset, b.length) for b in al.layout] == [(0, 2), (2, 3), (5, 3)]
    assert al.attribute_order == ["A", "B"]
    for basis, attr in ((shared, None), (pa, "A"), (pb, "B")):
        assert np.array_equal(al.rows(attr), basis.basis)


def test_build_aligned_empty_private():
    shared = SubspaceBasis("shared", np.eye(4)[:2], 1.0)
    empty = SubspaceBasis("private", np.zeros((0, 4)), 0.0, "A")
    al = build_aligned(shared, [empty])
    assert np.array_equal(al.matrix, shared.basis)
    assert al.block("A").length == 0


def test_layout_checks():
    m = np.eye(4)[:3]
    with pytest.raises(ValueError, match="layout"):
        AlignedSubspace(m, (Block("shared", None, 0, 2),))
    with pytest.raises(ValueError, match="layout"):
        AlignedSubspace(m, (Block("private", "a", 0, 3),))
    with pytest.raises(ValueError, match="layout"):
        AlignedSubspace(m, (Block("shared", None, 0, 1), Block("private", "a", 2, 2)))


def test_basis_orthonormality_enforced():
    with pytest.raises(ValueError, match="orthonormality"):
        SubspaceBasis("shared", np.array([[1.0, 0.0], [1.0, 0.0]]), 1.0)
    with pytest.raises(ValueError):
        SubspaceBasis("shared", np.zeros((0, 3)), 1.0)


@pytest.mark.parametrize(
    "ranks,cap,expected",
    [([2, 3, 3], 8, [2, 3, 3]), ([2, 23, 23], 8, [1, 3, 4]), ([1, 10, 0], 4, [1, 3, 0]), ([5, 5], 2, [1, 1])],
)
def test_cap_ranks(ranks, cap, expected):
    out = _cap_ranks(ranks, cap)
    assert out == expected and sum(out) == min(cap, sum(ranks))


def test_max_total_rank_applied():
    shared, privates, al = extract_subspaces(random_bank(11, n=2), ExtractionConfig(max_total_rank=8))
    assert al.r == 8 and shared.rank >= 1 and all(p.rank >= 1 for p in privates)


# ---------------------------------------------------------------------------
# Principal angles


def test_principal_angles_identity_and_orthogonal():
    b = np.linalg.qr(np.random.default_rng(12).standard_normal((6, 3)))[0].T
    assert np.abs(principal_angles(b, b)).max() <= 1e-7
    assert np.allclose(principal_angles(np.eye(3)[:1], np.eye(3)[1:2]), [np.pi / 2])


def test_principal_angles_match_gram_schmidt_oracle():
    rng = np.random.default_rng(13)
    for _ in range(20):
        a = oracles.gram_schmidt(rng.standard_normal((3, 7)))
        b = oracles.gram_schmidt(rng.standard_normal((3, 7)))
        # Oracle: cosines are the singular values of A B^T, via Jacobi on the Gram matrix.
        c = oracles.singular_values(a @ b.T)
        expected = np.sort(np.arccos(np.clip(c, 0, 1)))
        got = principal_angles(a, b)
        assert np.all(np.diff(got) >= -1e-12)
        assert np.allclose(got, expected, atol=1e-7)


def test_principal_angles_small_angle_accuracy():
    e = np.eye(4)
    theta = 1e-9
    b = np.array([np.cos(theta) * e[0] + np.sin(theta) * e[2]])
    assert abs(principal_angles(e[:1], b)[0] - theta) < 1e-15
