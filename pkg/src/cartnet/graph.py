"""Radius graphs under periodic boundary conditions."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .errors import DegenerateCell, DuplicateAtoms, NoAtoms

DEFAULT_CUTOFF = 5.0
# inclusive cutoff, padded against round-off at exactly r_c
CUTOFF_PAD = 1e-9
MIN_DISTANCE = 1e-8
BOUNDS_SLACK = 1e-12


@dataclass(frozen=True, eq=False)
class CrystalGraph:
    """Directed edges ``src -> dst``; ``dst`` is the receiving atom.

    ``v_hat`` points from the receiver to the sender, ``(p_src - p_dst) / d``,
    and ``shift`` is the integer cell translation applied to the sender.
    """

    structure_id: str
    z: np.ndarray
    positions: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    shift: np.ndarray
    d: np.ndarray
    v_hat: np.ndarray
    node_has_target: np.ndarray
    adp: np.ndarray
    temperature: Optional[float] = None
    target: Optional[float] = None
    cutoff: float = DEFAULT_CUTOFF

    @property
    def n_nodes(self):
        return len(self.z)

    @property
    def n_edges(self):
        return len(self.src)

    def with_edges(self, **kwargs):
        return replace(self, **kwargs)

    def edge_keys(self):
        """Sorted (src, dst, shift) tuples identifying every edge."""
        return sorted(
            (int(s), int(t), *map(int, k))
            for s, t, k in zip(self.src, self.dst, self.shift)
        )


def _face_widths(matrix):
    vol = abs(np.linalg.det(matrix))
    if not vol > 0:
        raise DegenerateCell("cell has zero volume")
    a, b, c = matrix
    areas = np.array([
        np.linalg.norm(np.cross(b, c)),
        np.linalg.norm(np.cross(c, a)),
        np.linalg.norm(np.cross(a, b)),
    ])
    return vol / areas


def image_bounds(cell, r_c):
    """Replica counts (n_a, n_b, n_c) so |k_i| <= n_i covers all neighbours within r_c."""
    matrix = cell.matrix if hasattr(cell, "matrix") else np.asarray(cell, dtype=float)
    if not r_c > 0:
        raise ValueError(f"cutoff must be positive, got {r_c}")
    widths = _face_widths(matrix)
    # relative slack so exact divisors (e.g. 5 sin 30 deg = 2.4999...96) do not add a shell
    return tuple(int(np.ceil(r_c / w * (1.0 - BOUNDS_SLACK))) for w in widths)


def _wrapped_frac(structure):
    frac = structure.frac_positions
    frac = frac - np.floor(frac)
    frac[frac >= 1.0] = 0.0
    return frac


def _node_arrays(structure, include_hydrogens):
    if not structure.sites:
        raise NoAtoms(f"structure {structure.id!r} has no atoms")
    keep = [i for i, s in enumerate(structure.sites)
            if include_hydrogens or s.atomic_number != 1]
    if not keep:
        raise NoAtoms(f"structure {structure.id!r} has no non-hydrogen atoms")
    sites = [structure.sites[i] for i in keep]
    z = np.array([s.atomic_number for s in sites], dtype=np.int64)
    has_target = np.array([s.atomic_number != 1 and s.adp is not None for s in sites])
    adp = np.zeros((len(sites), 3, 3))
    for i, s in enumerate(sites):
        if has_target[i]:
            adp[i] = s.adp
    return np.asarray(keep), z, has_target, adp


def _finish(structure, keep, z, has_target, adp, cart, src, dst, shift, vec, r_c):
    d = np.linalg.norm(vec, axis=1) if len(vec) else np.zeros(0)
    v_hat = vec / d[:, None] if len(vec) else np.zeros((0, 3))
    order = np.lexsort((v_hat[:, 2], v_hat[:, 1], v_hat[:, 0], d, dst, src))
    return CrystalGraph(
        structure_id=structure.id,
        z=z,
        positions=cart,
        src=src[order].astype(np.int64),
        dst=dst[order].astype(np.int64),
        shift=shift[order].astype(np.int64).reshape(-1, 3),
        d=d[order],
        v_hat=v_hat[order].reshape(-1, 3),
        node_has_target=has_target,
        adp=adp,
        temperature=structure.temperature,
        target=structure.target,
        cutoff=float(r_c),
    )


def build_graph(structure, r_c=DEFAULT_CUTOFF, include_hydrogens=True):
    """All directed neighbour edges within ``r_c`` (inclusive), periodic images included.

    Hydrogens stay in the graph as context nodes but never carry targets;
    ``include_hydrogens=False`` drops them entirely.
    """
    keep, z, has_target, adp = _node_arrays(structure, include_hydrogens)
    matrix = structure.cell.matrix
    frac = _wrapped_frac(structure)[keep]
    cart = frac @ matrix
    bounds = image_bounds(matrix, r_c)
    cutoff2 = (r_c + CUTOFF_PAD) ** 2
    srcs, dsts, shifts, vecs = [], [], [], []
    ranges = [range(-b, b + 1) for b in bounds]
    for k in itertools.product(*ranges):
        offset = np.asarray(k, dtype=float) @ matrix
        # vec[i, j] = p_j + offset - p_i, receiver i
        vec = cart[None, :, :] + offset - cart[:, None, :]
        dist2 = np.einsum("ijk,ijk->ij", vec, vec)
        recv, send = np.nonzero(dist2 <= cutoff2)
        if not len(recv):
            continue
        close = dist2[recv, send] < MIN_DISTANCE ** 2
        if np.any(close):
            self_pair = (recv == send) & (k == (0, 0, 0))
            if np.any(close & ~self_pair):
                raise DuplicateAtoms(
                    f"structure {structure.id!r} has overlapping atoms; "
                    "check symmetry merging"
                )
            recv, send = recv[~close], send[~close]
        srcs.append(send)
        dsts.append(recv)
        shifts.append(np.tile(np.asarray(k), (len(recv), 1)))
        vecs.append(vec[recv, send])
    if srcs:
        src, dst = np.concatenate(srcs), np.concatenate(dsts)
        shift, vec = np.concatenate(shifts), np.concatenate(vecs)
    else:
        src = dst = np.zeros(0, dtype=np.int64)
        shift, vec = np.zeros((0, 3), dtype=np.int64), np.zeros((0, 3))
    return _finish(structure, keep, z, has_target, adp, cart, src, dst, shift, vec, r_c)


def brute_force_graph(structure, r_c=DEFAULT_CUTOFF, include_hydrogens=True):
    """Reference neighbour list by explicit supercell replication (test oracle)."""
    keep, z, has_target, adp = _node_arrays(structure, include_hydrogens)
    matrix = structure.cell.matrix
    frac = _wrapped_frac(structure)[keep]
    cart = frac @ matrix
    n_a, n_b, n_c = (b + 1 for b in image_bounds(matrix, r_c))
    images = np.array([
        (ka, kb, kc)
        for ka in range(-n_a, n_a + 1)
        for kb in range(-n_b, n_b + 1)
        for kc in range(-n_c, n_c + 1)
    ])
    # explicit supercell: every atom in every replicated cell
    owner = np.repeat(np.arange(len(z)), len(images))
    cell_of = np.tile(images, (len(z), 1))
    supercell = (frac[owner] + cell_of) @ matrix
    src, dst, shift, vec = [], [], [], []
    for i in range(len(z)):
        diff = supercell - cart[i]
        dist = np.sqrt(np.sum(diff * diff, axis=1))
        for m in np.flatnonzero(dist <= r_c + CUTOFF_PAD):
            j, k = int(owner[m]), tuple(int(x) for x in cell_of[m])
            if dist[m] < MIN_DISTANCE:
                if i == j and k == (0, 0, 0):
                    continue
                raise DuplicateAtoms(f"structure {structure.id!r} has overlapping atoms")
            src.append(j)
            dst.append(i)
            shift.append(k)
            vec.append(diff[m])
    src = np.array(src, dtype=np.int64)
    dst = np.array(dst, dtype=np.int64)
    shift = np.array(shift, dtype=np.int64).reshape(-1, 3)
    vec = np.array(vec, dtype=float).reshape(-1, 3)
    return _finish(structure, keep, z, has_target, adp, cart, src, dst, shift, vec, r_c)


@dataclass(frozen=True, eq=False)
class GraphBatch:
    """Several graphs merged into one disconnected graph with offset indices."""

    graphs: tuple
    z: np.ndarray
    node_graph: np.ndarray
    node_temperature: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    d: np.ndarray
    v_hat: np.ndarray
    node_has_target: np.ndarray
    adp: np.ndarray
    targets: np.ndarray

    @property
    def n_nodes(self):
        return len(self.z)

    @property
    def n_graphs(self):
        return len(self.graphs)


def collate(graphs, temperatures=None):
    """Merge graphs; ``temperatures`` overrides each graph's own (e.g. standardized)."""
    graphs = tuple(graphs)
    if not graphs:
        raise NoAtoms("cannot collate an empty list of graphs")
    offsets = np.cumsum([0] + [g.n_nodes for g in graphs])
    if temperatures is None:
        temperatures = [np.nan if g.temperature is None else g.temperature for g in graphs]
    return GraphBatch(
        graphs=graphs,
        z=np.concatenate([g.z for g in graphs]),
        node_graph=np.concatenate(
            [np.full(g.n_nodes, k, dtype=np.int64) for k, g in enumerate(graphs)]),
        node_temperature=np.concatenate(
            [np.full(g.n_nodes, float(t)) for g, t in zip(graphs, temperatures)]),
        src=np.concatenate([g.src + o for g, o in zip(graphs, offsets)]),
        dst=np.concatenate([g.dst + o for g, o in zip(graphs, offsets)]),
        d=np.concatenate([g.d for g in graphs]),
        v_hat=np.concatenate([g.v_hat for g in graphs]).reshape(-1, 3),
        node_has_target=np.concatenate([g.node_has_target for g in graphs]),
        adp=np.concatenate([g.adp for g in graphs]).reshape(-1, 3, 3),
        targets=np.array([np.nan if g.target is None else g.target for g in graphs]),
    )
