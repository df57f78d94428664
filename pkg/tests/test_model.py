import math
from dataclasses import replace

import numpy as np
import pytest

from cartnet import kernels as K
from cartnet.crystal import AtomSite, CrystalStructure, LatticeCell
from cartnet.errors import ConfigMismatch, MissingTemperature, NoAtoms
from cartnet.graph import build_graph, collate
from cartnet.model import (
    CartNet, ModelConfig, TemperatureStats, atom_encoder, cart_layer, cholesky_head,
    edge_encoder, envelope, lower_cholesky_product, rbf_centers, rbf_expand, rbf_width,
    scalar_head,
)

from synth import cubic_one_atom, finite_difference, random_structure, rel_error

# Oracles (plain-Python evaluation of the closed forms):
RBF_BETA_K2_RC5 = 1.0136133277864963   # (1 - e^-5)^-2
LN2_SQUARED = 0.4804530139182014


def zero_params(params):
    for p in params:
        p.value = np.zeros_like(p.value)


def small_model(**kw):
    cfg = dict(num_layers=2, dim=8, rbf_k=8)
    cfg.update(kw)
    return CartNet(ModelConfig(**cfg), seed=3, temperature_stats=TemperatureStats(200.0, 50.0))


class TestConfig:
    def test_defaults(self):
        c = ModelConfig()
        assert (c.num_layers, c.dim, c.cutoff, c.n_vocab, c.head) == (4, 256, 5.0, 103, "cholesky")

    @pytest.mark.parametrize("bad", [dict(dim=7), dict(num_layers=0), dict(rbf_k=1),
                                     dict(head="x"), dict(cutoff=0)])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            ModelConfig(**bad)

    def test_round_trip(self):
        c = ModelConfig(dim=16, head="scalar", use_temperature=False)
        assert ModelConfig.from_dict(c.to_dict()) == c


class TestRbfEnvelope:
    def test_peaks(self):
        mu = rbf_centers(16, 5.0)
        for k in range(16):
            assert rbf_expand(-np.log(mu[k]), 16, 5.0)[k] == 1.0

    def test_range(self, rng):
        r = rbf_expand(rng.uniform(1e-3, 5.0, 100), 64, 5.0)
        # positive in exact arithmetic; far-off centres underflow to 0.0 in float64
        assert np.all(r >= 0) and np.all(r <= 1)
        assert np.all(r.max(axis=1) > 0.5)

    def test_k2_spot_values(self):
        np.testing.assert_allclose(rbf_centers(2, 5.0), [math.exp(-5), 1.0], rtol=1e-15)
        assert abs(rbf_width(2, 5.0) - RBF_BETA_K2_RC5) < 1e-12
        assert abs(rbf_expand(5.0, 2, 5.0)[1] - math.exp(-1)) < 1e-12

    def test_envelope(self):
        assert envelope(0.0, 5.0) == 1.0
        assert envelope(5.0, 5.0) == 0.0
        assert abs(envelope(2.5, 5.0) - 0.5) < 1e-15


class TestEncoders:
    def test_atom_encoder(self):
        m = small_model()
        h = atom_encoder(np.array([5, 5, 7]), np.array([0.3, 0.3, 0.3]), m.atom_encoder)
        assert h.shape == (3, 8)
        np.testing.assert_array_equal(h.value[0], h.value[1])
        zero_params(m.atom_encoder.params())
        h = atom_encoder(np.array([5, 7]), np.array([0.3, -1.0]), m.atom_encoder)
        np.testing.assert_array_equal(h.value, 0.0)

    def test_temperature_term(self):
        m = small_model()
        a = atom_encoder(np.array([5]), np.array([0.0]), m.atom_encoder).value
        b = atom_encoder(np.array([5]), np.array([1.0]), m.atom_encoder).value
        c = atom_encoder(np.array([5]), np.array([1.0]), m.atom_encoder, use_temperature=False).value
        assert not np.allclose(a, b)
        d = atom_encoder(np.array([5]), np.array([-9.0]), m.atom_encoder, use_temperature=False).value
        np.testing.assert_array_equal(c, d)

    def test_edge_encoder(self, rng):
        m = small_model()
        d = rng.uniform(1, 5, 4)
        v = rng.normal(size=(4, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        e = edge_encoder(d, v, m.edge_encoder, 8, 5.0)
        assert e.shape == (4, 8)
        assert not np.allclose(e.value, edge_encoder(d, -v, m.edge_encoder, 8, 5.0).value)
        zero_params(m.edge_encoder.params())
        np.testing.assert_array_equal(edge_encoder(d, v, m.edge_encoder, 8, 5.0).value, 0.0)


class TestCartLayer:
    def setup_graph(self):
        g = build_graph(random_structure(np.random.default_rng(1), 3), 5.0)
        return g

    def test_zero_mlps_identity(self, rng):
        g = self.setup_graph()
        m = small_model()
        layer = m.layers[0]
        zero_params(layer.mlp_gate.params() + layer.mlp_msg.params())
        h = rng.normal(size=(g.n_nodes, 8))
        e = rng.normal(size=(g.n_edges, 8))
        env = envelope(g.d, 5.0)
        bn_eps = layer.bn_gate.eps
        h2, e2 = cart_layer(K.Var(h), K.Var(e), g.src, g.dst, env, layer, training=False)
        np.testing.assert_array_equal(h2.value, h)
        # BN(0) with identity running stats is 0 (eps only rescales zero)
        assert bn_eps > 0
        np.testing.assert_allclose(e2.value, e + 0.5 * env[:, None], atol=1e-15)
        assert h2.shape == h.shape and e2.shape == e.shape

    def test_gate_zero_at_cutoff(self, rng):
        m = small_model()
        layer = m.layers[0]
        h = rng.normal(size=(2, 8))
        e = rng.normal(size=(3, 8))
        src, dst = np.array([0, 1, 0]), np.array([1, 0, 1])
        env = envelope(np.array([1.0, 2.0, 5.0]), 5.0)
        _, e2 = cart_layer(K.Var(h), K.Var(e), src, dst, env, layer, training=False)
        np.testing.assert_array_equal(e2.value[2], e[2])


class TestCholeskyHead:
    def test_zero_features(self):
        u = lower_cholesky_product(np.zeros((1, 6))).value[0]
        np.testing.assert_allclose(u, LN2_SQUARED * np.eye(3), rtol=1e-15)

    def test_unit_lower_triangle(self):
        c = math.log(math.e - 1)  # softplus^-1(1)
        u = lower_cholesky_product(np.array([[c, c, c, 1.0, 1.0, 1.0]])).value[0]
        np.testing.assert_allclose(u, [[1, 1, 1], [1, 2, 2], [1, 2, 3]], atol=1e-14)

    def test_placement_convention(self):
        # l21 = o4, l32 = o5, l31 = o6 with unit diagonal
        c = math.log(math.e - 1)
        u = lower_cholesky_product(np.array([[c, c, c, 2.0, 3.0, 5.0]])).value[0]
        low = np.array([[1, 0, 0], [2, 1, 0], [5, 3, 1.0]])
        np.testing.assert_allclose(u, low @ low.T, atol=1e-13)

    def test_spd_fuzz(self, rng):
        u = lower_cholesky_product(rng.normal(size=(2000, 6)) * 3).value
        assert np.array_equal(u, np.swapaxes(u, 1, 2))
        assert np.all(np.linalg.eigvalsh(u)[:, 0] > 0)

    def test_gradient(self, rng):
        o = rng.normal(size=(3, 6))
        w = rng.normal(size=(3, 3, 3))
        v = K.Var(o, requires_grad=True)
        K.total(K.mul(lower_cholesky_product(v), w)).backward()
        num = finite_difference(lambda x: float(np.sum(w * lower_cholesky_product(x).value)), o)
        assert rel_error(v.grad, num) < 1e-7


class TestScalarHead:
    def test_single_node_and_zero(self, rng):
        m = small_model(head="scalar")
        h = K.Var(rng.normal(size=(1, 8)))
        s = scalar_head(h, np.array([0]), 1, m.head)
        np.testing.assert_allclose(s.value, m.head.mlp(h).value[:, 0])
        zero_params(m.head.params())
        np.testing.assert_array_equal(scalar_head(h, np.array([0]), 1, m.head).value, 0.0)

    def test_duplicate_nodes(self, rng):
        m = small_model(head="scalar")
        h = rng.normal(size=(3, 8))
        a = scalar_head(K.Var(h), np.zeros(3, int), 1, m.head).value
        b = scalar_head(K.Var(np.vstack([h, h])), np.zeros(6, int), 1, m.head).value
        np.testing.assert_allclose(a, b, rtol=1e-14)

    def test_empty(self):
        m = small_model(head="scalar")
        with pytest.raises(NoAtoms):
            scalar_head(K.Var(np.zeros((0, 8))), np.zeros(0, int), 1, m.head)


class TestForward:
    def test_one_atom_cube(self):
        m = small_model()
        g = build_graph(cubic_one_atom(5.0))
        assert g.n_edges == 6
        u = m.forward(collate([g])).value
        assert u.shape == (1, 3, 3)
        assert np.array_equal(u[0], u[0].T) and np.linalg.eigvalsh(u[0])[0] > 0

    def test_missing_temperature(self):
        m = small_model()
        s = replace(cubic_one_atom(5.0), temperature=None)
        with pytest.raises(MissingTemperature):
            m.forward(collate([build_graph(s)]))
        m2 = small_model(use_temperature=False)
        m2.forward(collate([build_graph(s)]))

    def test_permutation_equivariance(self, rng):
        m = small_model()
        s = random_structure(rng, 5, elements=(6, 7, 8))
        perm = rng.permutation(5)
        sp = s.with_sites([s.sites[i] for i in perm])
        for training in (False, True):
            a = m.forward(collate([build_graph(s)]), training).value
            b = m.forward(collate([build_graph(sp)]), training).value
            np.testing.assert_allclose(b, a[perm], atol=1e-12)

    def test_translation_invariance(self, rng):
        m = small_model()
        s = random_structure(rng, 4, elements=(6, 8))
        shift = rng.uniform(-3, 3, 3)
        moved = s.with_sites([AtomSite(x.atomic_number, x.frac_pos + np.linalg.solve(
            s.cell.matrix.T, shift), x.cart_pos + shift, x.adp) for x in s.sites])
        a = m.forward(collate([build_graph(s)])).value
        b = m.forward(collate([build_graph(moved)])).value
        np.testing.assert_allclose(a, b, atol=1e-9)

    def test_zeroed_extra_layers(self, rng):
        base = small_model(num_layers=2)
        deep = small_model(num_layers=4)
        arrays = base.state_arrays()
        full = deep.state_arrays()
        full.update(arrays)
        for name in list(full):
            if name.startswith(("layers.2.", "layers.3.")) and ".mlp_" in name:
                full[name] = np.zeros_like(full[name])
        deep.load_state_arrays(full)
        g = collate([build_graph(random_structure(rng, 4, elements=(6, 8)))])
        np.testing.assert_allclose(deep.forward(g).value, base.forward(g).value, atol=1e-15)

    def test_envelope_edge_at_cutoff_eval(self, rng):
        m = small_model()
        g = build_graph(random_structure(rng, 3, elements=(6, 8)))
        extra = g.with_edges(src=np.append(g.src, 0), dst=np.append(g.dst, 1),
                             shift=np.vstack([g.shift, [[9, 9, 9]]]),
                             d=np.append(g.d, 5.0), v_hat=np.vstack([g.v_hat, [[1.0, 0, 0]]]))
        a = m.forward(collate([g])).value
        b = m.forward(collate([extra])).value
        np.testing.assert_array_equal(a, b)

    def test_scalar_forward(self, rng):
        m = small_model(head="scalar")
        gs = [build_graph(random_structure(rng, 3, sid=str(i))) for i in range(3)]
        out = m.forward(collate(gs)).value
        assert out.shape == (3,)
        np.testing.assert_allclose(m.predict_graphs(gs), out, atol=1e-15)

    def test_predict_graphs_splits(self, rng):
        m = small_model()
        gs = [build_graph(random_structure(rng, n, sid=str(n))) for n in (2, 3, 4)]
        preds = m.predict_graphs(gs, batch_size=2)
        assert [len(p) for p in preds] == [int(g.node_has_target.sum()) for g in gs]


class TestPersistence:
    def test_save_load(self, tmp_path, rng):
        m = small_model()
        g = collate([build_graph(random_structure(rng, 4))])
        m.forward(g, training=True)  # move running stats away from defaults
        m.save(tmp_path / "m.ckpt")
        m2 = CartNet.load(tmp_path / "m.ckpt")
        assert m2.config == m.config
        assert m2.temperature_stats == m.temperature_stats
        assert m.forward(g).value.tobytes() == m2.forward(g).value.tobytes()

    def test_mismatch(self, tmp_path):
        small_model(dim=8).save(tmp_path / "a.ckpt")
        other = small_model(dim=16)
        arrays, _ = K.load_arrays(tmp_path / "a.ckpt")
        with pytest.raises(ConfigMismatch, match="shape"):
            other.load_state_arrays(arrays)

    def test_copy_independent(self):
        m = small_model()
        c = m.copy()
        c.parameters()[0].value += 1.0
        assert not np.array_equal(c.parameters()[0].value, m.parameters()[0].value)
