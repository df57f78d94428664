import numpy as np
from hypothesis import given, strategies as st
from scipy.stats import chisquare

from cartnet.augment import (
    EquivariantStub, augment_graph, quaternion_to_matrix, random_rotation, rotate_adp,
    rotate_graph, rotation_consistency,
)
from cartnet.graph import build_graph
from cartnet.training import l1_adp_loss

from synth import random_rotation_qr, random_spd, random_structure, rotation_z, toy_dataset


def sphere_bins(points, n_z=10, n_phi=10):
    """Equal-area binning of unit vectors: uniform slabs in z times azimuth sectors."""
    iz = np.minimum(((points[:, 2] + 1) / 2 * n_z).astype(int), n_z - 1)
    phi = np.arctan2(points[:, 1], points[:, 0]) + np.pi
    ip = np.minimum((phi / (2 * np.pi) * n_phi).astype(int), n_phi - 1)
    return np.bincount(iz * n_phi + ip, minlength=n_z * n_phi)


class TestRandomRotation:
    def test_orthonormal(self, rng):
        for _ in range(200):
            r = random_rotation(rng)
            np.testing.assert_allclose(r.T @ r, np.eye(3), atol=1e-12)
            assert abs(np.linalg.det(r) - 1) < 1e-12

    def test_quaternion_sign(self, rng):
        q = rng.normal(size=4)
        np.testing.assert_allclose(quaternion_to_matrix(q), quaternion_to_matrix(-q), atol=1e-15)
        np.testing.assert_allclose(quaternion_to_matrix(np.array([1.0, 0, 0, 0])), np.eye(3))

    def test_uniformity(self):
        rng = np.random.default_rng(7)
        rs = np.stack([random_rotation(rng) for _ in range(100_000)])
        assert np.abs(rs.mean(axis=0)).max() < 0.01
        for axis in range(3):
            counts = sphere_bins(rs[:, :, axis])
            assert chisquare(counts).pvalue > 0.001

    def test_deterministic(self):
        a = random_rotation(np.random.default_rng(3))
        b = random_rotation(np.random.default_rng(3))
        assert np.array_equal(a, b)


class TestRotateAdp:
    def test_quarter_turn(self):
        out = rotate_adp(np.diag([1.0, 2.0, 3.0]), rotation_z(90))
        np.testing.assert_allclose(out, np.diag([2.0, 1.0, 3.0]), atol=1e-15)

    @given(st.integers(0, 2**32 - 1))
    def test_group_action(self, seed):
        rng = np.random.default_rng(seed)
        u = random_spd(rng)
        r1, r2 = random_rotation(rng), random_rotation_qr(rng)
        np.testing.assert_allclose(rotate_adp(rotate_adp(u, r2), r1), rotate_adp(u, r1 @ r2),
                                   atol=1e-10 * np.abs(u).max())
        np.testing.assert_allclose(rotate_adp(rotate_adp(u, r1), r1.T), u, atol=1e-14)

    @given(st.integers(0, 2**32 - 1))
    def test_spectrum_and_symmetry(self, seed):
        rng = np.random.default_rng(seed)
        u = random_spd(rng)
        out = rotate_adp(u, random_rotation(rng))
        assert np.array_equal(out, out.T)
        np.testing.assert_allclose(np.linalg.eigvalsh(out), np.linalg.eigvalsh(u), atol=1e-15)

    def test_stack(self, rng):
        us = np.stack([random_spd(rng) for _ in range(5)])
        r = random_rotation(rng)
        out = rotate_adp(us, r)
        for a, b in zip(out, us):
            np.testing.assert_allclose(a, rotate_adp(b, r), atol=1e-16)


class TestRotateGraph:
    def test_only_directions_change(self, rng):
        g = build_graph(random_structure(rng, 4))
        r = random_rotation(rng)
        gr = rotate_graph(g, r)
        np.testing.assert_allclose(gr.v_hat, g.v_hat @ r.T, atol=1e-15)
        for name in ("src", "dst", "shift", "d", "z", "adp", "node_has_target"):
            assert np.array_equal(getattr(gr, name), getattr(g, name))
        np.testing.assert_allclose(np.linalg.norm(gr.v_hat, axis=1), 1.0, atol=1e-14)
        assert gr.temperature == g.temperature

    def test_augment_rotates_targets(self, rng):
        g = build_graph(random_structure(rng, 4, elements=(6, 8)))
        r = random_rotation(rng)
        ga = augment_graph(g, r)
        np.testing.assert_allclose(ga.adp, rotate_adp(g.adp, r), atol=1e-16)
        assert np.array_equal(ga.d, g.d)

    def test_original_untouched(self, rng):
        g = build_graph(random_structure(rng, 3))
        v = g.v_hat.copy()
        augment_graph(g, random_rotation(rng))
        assert np.array_equal(g.v_hat, v)


class TestHarness:
    def graphs(self):
        return [build_graph(s) for s in toy_dataset(3, seed=4, n_atoms=3)]

    def test_stub_loss_invariant(self, rng):
        graphs = self.graphs()
        stub = EquivariantStub(graphs)
        for _ in range(20):
            r = random_rotation(rng)
            for g in graphs:
                ga = augment_graph(g, r)
                pred = stub.predict_graphs([ga])[0]
                loss = float(l1_adp_loss(pred, ga.adp[ga.node_has_target]).value)
                assert loss <= 1e-12

    def test_identity_rotation(self):
        graphs = self.graphs()
        rep = rotation_consistency(EquivariantStub(graphs), graphs, rotations=[np.eye(3)])
        assert rep.aggregates["mae"]["mean"] == 0.0
        assert abs(rep.aggregates["s12"]["mean"]) < 1e-12
        assert rep.aggregates["iou"]["mean"] == 100.0
        assert rep.meta == {"n_rotations": 1, "n_structures": 3}

    def test_stub_random_rotations(self):
        graphs = self.graphs()
        rep = rotation_consistency(EquivariantStub(graphs), graphs, n_rotations=5,
                                   rng=np.random.default_rng(0))
        n_atoms = sum(int(g.node_has_target.sum()) for g in graphs)
        assert len(rep.records) == 5 * n_atoms
        assert rep.aggregates["mae"]["mean"] <= 1e-12
        assert rep.aggregates["iou"]["mean"] == 100.0

    def test_non_equivariant_detected(self):
        graphs = self.graphs()
        # a frame-blind predictor: the same anisotropic tensor whatever the rotation
        aniso = [np.stack([np.diag([0.01, 0.02, 0.05])] * int(g.node_has_target.sum()))
                 for g in graphs]
        rep = rotation_consistency(lambda gs: aniso, graphs, n_rotations=3,
                                   rng=np.random.default_rng(1))
        assert rep.aggregates["mae"]["mean"] > 1e-4
        assert rep.aggregates["iou"]["mean"] < 100.0
