"""CartNet: atom/edge encoders, gated message-passing layers and output heads."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np
from scipy.special import expit

from . import kernels as K
from .errors import (
    BatchTooSmall,
    ConfigMismatch,
    MissingTemperature,
    NoAtoms,
    ShapeMismatch,
)
from .graph import collate
from .kernels import BatchNorm, Var

HEADS = ("cholesky", "scalar")


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 4
    dim: int = 256
    rbf_k: int = 64
    cutoff: float = 5.0
    use_temperature: bool = True
    head: str = "cholesky"
    n_vocab: int = 103
    use_envelope: bool = True
    use_direction: bool = True

    def __post_init__(self):
        if self.dim < 2 or self.dim % 2:
            raise ValueError(f"dim must be even and >= 2, got {self.dim}")
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if self.rbf_k < 2:
            raise ValueError("rbf_k must be >= 2")
        if not self.cutoff > 0:
            raise ValueError("cutoff must be positive")
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}, got {self.head!r}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


# --- fixed (non-learned) edge features -------------------------------------------

def rbf_centers(k, r_c):
    return np.linspace(np.exp(-r_c), 1.0, k)


def rbf_width(k, r_c):
    return (2.0 / k * (1.0 - np.exp(-r_c))) ** -2


def rbf_expand(d, k, r_c):
    """Gaussians in exp(-d) with centres evenly spaced on [exp(-r_c), 1]."""
    d = np.asarray(d, dtype=np.float64)
    mu = rbf_centers(k, r_c)
    beta = rbf_width(k, r_c)
    return np.exp(-beta * (np.exp(-d)[..., None] - mu) ** 2)


def envelope(d, r_c):
    """Cosine decay from 1 at d = 0 to 0 at d = r_c."""
    return 0.5 * (np.cos(np.pi * np.asarray(d, dtype=np.float64) / r_c) + 1.0)


# --- learned blocks ---------------------------------------------------------------

class Dense:
    def __init__(self, rng, d_in, d_out, name):
        self.weight, self.bias = K.init_linear(rng, d_in, d_out, name)

    def __call__(self, x):
        return K.linear(x, self.weight, self.bias)

    def params(self):
        return [self.weight, self.bias]


class MLP:
    """Linear -> SiLU -> Linear, optionally followed by a final SiLU."""

    def __init__(self, rng, d_in, d_hidden, d_out, name, final_silu=False):
        self.first = Dense(rng, d_in, d_hidden, f"{name}.0")
        self.second = Dense(rng, d_hidden, d_out, f"{name}.1")
        self.final_silu = final_silu

    def __call__(self, x):
        out = self.second(K.silu(self.first(x)))
        return K.silu(out) if self.final_silu else out

    def params(self):
        return self.first.params() + self.second.params()


class AtomEncoder:
    def __init__(self, rng, config, name="atom_encoder"):
        wide = 2 * config.dim
        self.embedding = K.init_embedding(rng, config.n_vocab, wide, f"{name}.embedding")
        self.temperature = Dense(rng, 1, wide, f"{name}.temperature")
        self.out = Dense(rng, wide, config.dim, f"{name}.out")

    def params(self):
        return [self.embedding] + self.temperature.params() + self.out.params()


class EdgeEncoder:
    def __init__(self, rng, config, name="edge_encoder"):
        d_in = config.rbf_k + (3 if config.use_direction else 0)
        self.mlp = MLP(rng, d_in, 2 * config.dim, config.dim, name, final_silu=True)

    def params(self):
        return self.mlp.params()


class CartLayerParams:
    def __init__(self, rng, dim, name):
        self.mlp_gate = MLP(rng, 3 * dim, dim, dim, f"{name}.mlp_gate")
        self.mlp_msg = MLP(rng, 3 * dim, dim, dim, f"{name}.mlp_msg")
        self.bn_gate = BatchNorm(dim, f"{name}.bn_gate")
        self.bn_node = BatchNorm(dim, f"{name}.bn_node")

    def params(self):
        return (self.mlp_gate.params() + self.mlp_msg.params()
                + self.bn_gate.params() + self.bn_node.params())

    def batch_norms(self):
        return [self.bn_gate, self.bn_node]


class Head:
    def __init__(self, rng, dim, n_out, name="head"):
        self.mlp = MLP(rng, dim, dim // 2, n_out, name)

    def params(self):
        return self.mlp.params()


# --- forward pieces ---------------------------------------------------------------

def atom_encoder(z_index, t_std, enc, use_temperature=True):
    """SiLU(W2 SiLU(Emb(z) + W1 T + b1) + b2); the temperature term is dropped when unused."""
    h = K.embedding(z_index, enc.embedding)
    if use_temperature:
        t = np.asarray(t_std, dtype=np.float64).reshape(-1, 1)
        h = K.add(h, enc.temperature(t))
    return K.silu(enc.out(K.silu(h)))


def edge_encoder(d, v_hat, enc, rbf_k, r_c, use_direction=True):
    feats = rbf_expand(d, rbf_k, r_c)
    if use_direction:
        v_hat = np.asarray(v_hat, dtype=np.float64)
        if v_hat.shape != (len(feats), 3):
            raise ShapeMismatch(f"v_hat shape {v_hat.shape} for {len(feats)} edges")
        feats = np.concatenate([feats, v_hat], axis=1)
    return enc.mlp(feats)


def cart_layer(h, e, src, dst, env, layer, training):
    """One gated message-passing update; returns new node and edge states.

    ``env`` is the per-edge envelope weight. Receivers are ``dst``.
    """
    n = h.shape[0]
    if training and (n < 2 or e.shape[0] < 2):
        raise BatchTooSmall(f"training needs >= 2 nodes and edges, got {n} and {e.shape[0]}")
    pair = K.concat([K.gather(h, dst), e, K.gather(h, src)], axis=1)
    gate = K.mul(K.sigmoid(K.batch_norm(layer.mlp_gate(pair), layer.bn_gate, training)),
                 np.asarray(env, dtype=np.float64)[:, None])
    msg = K.mul(layer.mlp_msg(pair), gate)
    agg = K.segment_sum(msg, dst, n)
    h_new = K.add(h, K.silu(K.batch_norm(agg, layer.bn_node, training)))
    e_new = K.add(e, gate)
    return h_new, e_new


def lower_cholesky_product(o):
    """U = L L^T with L built from six features per row.

    Diagonal: softplus(o1..o3); below it l21 = o4, l32 = o5, l31 = o6.
    The result is symmetrized so U equals U^T bit for bit.
    """
    o = K.as_var(o)
    if o.value.ndim != 2 or o.shape[1] != 6:
        raise ShapeMismatch(f"expected [n, 6] features, got {o.shape}")
    v = o.value
    n = v.shape[0]
    low = np.zeros((n, 3, 3))
    low[:, 0, 0] = K.softplus_value(v[:, 0])
    low[:, 1, 1] = K.softplus_value(v[:, 1])
    low[:, 2, 2] = K.softplus_value(v[:, 2])
    low[:, 1, 0] = v[:, 3]
    low[:, 2, 1] = v[:, 4]
    low[:, 2, 0] = v[:, 5]
    u = np.einsum("nik,njk->nij", low, low)
    u = 0.5 * (u + np.swapaxes(u, 1, 2))

    def back(g):
        gs = 0.5 * (g + np.swapaxes(g, 1, 2))
        g_low = 2.0 * np.einsum("nij,njk->nik", gs, low)
        go = np.empty_like(v)
        go[:, 0] = g_low[:, 0, 0] * expit(v[:, 0])
        go[:, 1] = g_low[:, 1, 1] * expit(v[:, 1])
        go[:, 2] = g_low[:, 2, 2] * expit(v[:, 2])
        go[:, 3] = g_low[:, 1, 0]
        go[:, 4] = g_low[:, 2, 1]
        go[:, 5] = g_low[:, 2, 0]
        K._send(o, go)

    return Var(u, (o,), back)


def cholesky_head(h, head):
    return lower_cholesky_product(head.mlp(h))


def scalar_head(h, node_graph, n_graphs, head):
    """Mean over each graph's nodes of a per-node scalar."""
    if h.shape[0] == 0:
        raise NoAtoms("scalar head needs at least one node")
    per_node = head.mlp(h)
    sums = K.segment_sum(per_node, node_graph, n_graphs)
    counts = np.bincount(node_graph, minlength=n_graphs).astype(np.float64)
    if np.any(counts == 0):
        raise NoAtoms("a graph in the batch has no nodes")
    return K.reshape(K.mul(sums, 1.0 / counts[:, None]), (n_graphs,))


# --- the network ------------------------------------------------------------------

@dataclass
class TemperatureStats:
    """Mean and standard deviation (K) of training-split temperatures."""

    mean: float
    std: float

    def __post_init__(self):
        if not self.std > 0:
            raise ValueError(f"temperature std must be positive, got {self.std}")

    def standardize(self, t):
        return (np.asarray(t, dtype=np.float64) - self.mean) / self.std


class CartNet:
    """Parameter container plus forward pass for a batch of crystal graphs."""

    def __init__(self, config: ModelConfig, seed=0, temperature_stats: Optional[TemperatureStats] = None):
        self.config = config
        self.temperature_stats = temperature_stats or TemperatureStats(0.0, 1.0)
        rng = np.random.default_rng(seed)
        self.atom_encoder = AtomEncoder(rng, config)
        self.edge_encoder = EdgeEncoder(rng, config)
        self.layers = [CartLayerParams(rng, config.dim, f"layers.{i}")
                       for i in range(config.num_layers)]
        n_out = 6 if config.head == "cholesky" else 1
        self.head = Head(rng, config.dim, n_out)

    def parameters(self):
        ps = self.atom_encoder.params() + self.edge_encoder.params()
        for layer in self.layers:
            ps += layer.params()
        return ps + self.head.params()

    def batch_norms(self):
        return [bn for layer in self.layers for bn in layer.batch_norms()]

    def n_parameters(self):
        return int(sum(p.value.size for p in self.parameters()))

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    # forward -----------------------------------------------------------------

    def node_temperatures(self, batch):
        t = batch.node_temperature
        if self.config.use_temperature and np.any(np.isnan(t)):
            raise MissingTemperature("model uses temperature but a graph has none")
        return self.temperature_stats.standardize(np.nan_to_num(t))

    def encode(self, batch, training=False):
        """Final node states after all CartLayers."""
        cfg = self.config
        if batch.n_nodes == 0:
            raise NoAtoms("empty batch")
        z_index = batch.z - 1
        h = atom_encoder(z_index, self.node_temperatures(batch), self.atom_encoder,
                         cfg.use_temperature)
        e = edge_encoder(batch.d, batch.v_hat, self.edge_encoder, cfg.rbf_k, cfg.cutoff,
                         cfg.use_direction)
        env = envelope(batch.d, cfg.cutoff) if cfg.use_envelope else np.ones(len(batch.d))
        for layer in self.layers:
            h, e = cart_layer(h, e, batch.src, batch.dst, env, layer, training)
        return h

    def forward(self, batch, training=False):
        """Cholesky head: [n_target, 3, 3] for nodes with targets. Scalar head: [n_graphs]."""
        h = self.encode(batch, training)
        if self.config.head == "cholesky":
            idx = np.flatnonzero(batch.node_has_target)
            return cholesky_head(K.gather(h, idx), self.head)
        return scalar_head(h, batch.node_graph, batch.n_graphs, self.head)

    def predict_graphs(self, graphs, batch_size=16):
        """Eval-mode predictions: a list of [n_target, 3, 3] arrays or a [n_graphs] array."""
        graphs = list(graphs)
        outs = []
        for start in range(0, len(graphs), batch_size):
            chunk = graphs[start:start + batch_size]
            pred = self.forward(collate(chunk), training=False).value
            if self.config.head == "cholesky":
                counts = [int(g.node_has_target.sum()) for g in chunk]
                outs.extend(np.split(pred, np.cumsum(counts)[:-1]))
            else:
                outs.extend(pred)
        if self.config.head == "cholesky":
            return outs
        return np.asarray(outs, dtype=np.float64)

    # persistence ---------------------------------------------------------------

    def state_arrays(self):
        arrays = {p.name: p.value for p in self.parameters()}
        for bn in self.batch_norms():
            arrays.update(bn.buffers())
        return arrays

    def manifest(self):
        return {
            "kind": "cartnet",
            "config": self.config.to_dict(),
            "temperature_stats": {"mean": self.temperature_stats.mean,
                                  "std": self.temperature_stats.std},
        }

    def load_state_arrays(self, arrays):
        for p in self.parameters():
            if p.name not in arrays:
                raise ConfigMismatch(f"checkpoint lacks parameter {p.name}")
            value = arrays[p.name]
            if value.shape != p.value.shape:
                raise ConfigMismatch(
                    f"parameter {p.name}: checkpoint shape {value.shape} vs model {p.value.shape}")
            p.value = np.array(value, dtype=np.float64)
        for bn in self.batch_norms():
            for key, buf in bn.buffers().items():
                buf[:] = arrays[key]

    def save(self, path):
        K.save_arrays(path, self.state_arrays(), self.manifest())

    @classmethod
    def load(cls, path):
        arrays, manifest = K.load_arrays(path)
        if manifest.get("kind") != "cartnet":
            raise ConfigMismatch(f"{path} holds a {manifest.get('kind')!r} checkpoint")
        stats = manifest["temperature_stats"]
        model = cls(ModelConfig.from_dict(manifest["config"]),
                    temperature_stats=TemperatureStats(stats["mean"], stats["std"]))
        model.load_state_arrays(arrays)
        return model

    def copy(self):
        clone = CartNet(self.config, temperature_stats=self.temperature_stats)
        clone.load_state_arrays({k: np.copy(v) for k, v in self.state_arrays().items()})
        return clone
