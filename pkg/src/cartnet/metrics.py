"""ADP comparison metrics (MAE, S12, voxel IoU) and evaluation reports."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .crystal import ellipsoid_volume
from .elements import symbol
from .errors import MissingAdp, NonPositiveDefinite

REPORT_SCHEMA_VERSION = 1
ADP_METRICS = ("mae", "s12", "iou")


def adp_mae(u_pred, u_true, unique=False):
    """Mean absolute difference over the 9 matrix entries (or the 6 unique ones).

    Works on single tensors or stacks [..., 3, 3]; returns one value per tensor.
    """
    diff = np.abs(np.asarray(u_pred, dtype=float) - np.asarray(u_true, dtype=float))
    if unique:
        iu = np.triu_indices(3)
        return diff[..., iu[0], iu[1]].mean(axis=-1)
    return diff.mean(axis=(-2, -1))


def _check_spd(*mats):
    for u in mats:
        w = np.linalg.eigvalsh(u)
        if np.any(w[..., 0] <= 0):
            raise NonPositiveDefinite("metric requires positive-definite tensors")


def bhattacharyya_coefficient(u1, u2):
    """Overlap integral of sqrt(p1 p2) for two zero-mean Gaussians."""
    u1 = np.asarray(u1, dtype=float)
    u2 = np.asarray(u2, dtype=float)
    _check_spd(u1, u2)
    d1, d2 = np.linalg.det(u1), np.linalg.det(u2)
    d12 = np.linalg.det(u1 + u2)
    return 2.0 ** 1.5 * (d1 * d2) ** 0.25 / np.sqrt(d12)


def s12(u1, u2):
    """Similarity index in percent: 100 * (1 - Bhattacharyya coefficient).

    Clipped to [0, 100]; round-off can push the coefficient a few ulps past 1.
    """
    return np.clip(100.0 * (1.0 - bhattacharyya_coefficient(u1, u2)), 0.0, 100.0)


@lru_cache(maxsize=4)
def voxel_centers(grid):
    """Centres of a grid^3 voxelization of [-1, 1]^3, as an [grid^3, 3] array."""
    axis = -1.0 + (np.arange(grid) + 0.5) * (2.0 / grid)
    x, y, z = np.meshgrid(axis, axis, axis, indexing="ij")
    pts = np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1)
    pts.setflags(write=False)
    return pts


def _inside(u_norm, pts):
    inv = np.linalg.inv(u_norm)
    inv = 0.5 * (inv + inv.T)
    q = np.einsum("ni,ij,nj->n", pts, inv, pts, optimize=True)
    return q <= 1.0


def adp_iou(u1, u2, grid=64):
    """Voxelized intersection-over-union (percent) of the two D_M <= 1 ellipsoids.

    Both tensors are divided by the larger spectral norm of the pair so the
    ellipsoids fit in [-1, 1]^3.
    """
    u1 = np.asarray(u1, dtype=float)
    u2 = np.asarray(u2, dtype=float)
    _check_spd(u1, u2)
    scale = max(np.linalg.eigvalsh(u1)[-1], np.linalg.eigvalsh(u2)[-1])
    pts = voxel_centers(grid)
    a = _inside(u1 / scale, pts)
    b = _inside(u2 / scale, pts)
    union = np.count_nonzero(a | b)
    if union == 0:
        # both ellipsoids thinner than a voxel
        return 100.0 if np.array_equal(u1, u2) else 0.0
    return 100.0 * np.count_nonzero(a & b) / union


def mean_std(values):
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return {"mean": float("nan"), "std": float("nan"), "count": 0}
    return {"mean": float(v.mean()), "std": float(v.std()), "count": int(v.size)}


@dataclass
class MetricsReport:
    """Per-record metrics with aggregate and sliced summaries.

    ``kind`` is ``"adp"`` (per-atom MAE/S12/IoU), ``"scalar"`` (per-structure
    absolute error) or ``"rotation"`` (ADP metrics per atom and rotation).
    """

    kind: str
    records: list
    metrics: tuple
    aggregates: dict = field(default_factory=dict)
    slices: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.aggregates:
            self.aggregates = {m: mean_std([r[m] for r in self.records]) for m in self.metrics}

    def summary(self):
        parts = []
        for m in self.metrics:
            a = self.aggregates[m]
            parts.append(f"{m} = {a['mean']:.6g} +- {a['std']:.3g}")
        return f"{self.kind}: {len(self.records)} records; " + ", ".join(parts)

    def to_dict(self):
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "kind": self.kind,
            "metrics": list(self.metrics),
            "aggregates": self.aggregates,
            "slices": self.slices,
            "meta": self.meta,
            "records": self.records,
        }

    def to_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    def to_csv(self, path):
        """Aggregates first, then one row per slice bin."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            header = ["slice", "bin", "count"]
            for m in self.metrics:
                header += [f"{m}_mean", f"{m}_std"]
            w.writerow(header)
            row = ["all", "all", len(self.records)]
            for m in self.metrics:
                row += [self.aggregates[m]["mean"], self.aggregates[m]["std"]]
            w.writerow(row)
            for name in sorted(self.slices):
                for label in self.slices[name]:
                    entry = self.slices[name][label]
                    row = [name, label, entry["count"]]
                    for m in self.metrics:
                        row += [entry[m]["mean"], entry[m]["std"]]
                    w.writerow(row)

    @classmethod
    def from_dict(cls, data):
        return cls(data["kind"], data["records"], tuple(data["metrics"]),
                   data["aggregates"], data.get("slices", {}), data.get("meta", {}))


def _slice(records, metrics, key):
    groups = {}
    for r in records:
        groups.setdefault(key(r), []).append(r)
    out = {}
    for label in sorted(groups, key=lambda x: (isinstance(x, str), x)):
        rs = groups[label]
        out[str(label)] = {"count": len(rs),
                           **{m: mean_std([r[m] for r in rs]) for m in metrics}}
    return out


def temperature_bin(t, width=50.0):
    lo = width * np.floor(t / width)
    return f"{lo:g}-{lo + width:g}K"


def volume_bin(v, per_decade=2):
    k = np.floor(np.log10(v) * per_decade)
    return f"1e{k / per_decade:+.1f}"


def adp_slices(records, metrics=ADP_METRICS):
    return {
        "temperature": _slice([r for r in records if r.get("temperature_K") is not None],
                              metrics, lambda r: temperature_bin(r["temperature_K"])),
        "volume": _slice(records, metrics, lambda r: volume_bin(r["volume_A3"])),
        "element": _slice(records, metrics, lambda r: r["element"]),
    }


def compare_adps(u_pred, u_true, grid=64):
    """MAE, S12 and IoU for one predicted/true tensor pair."""
    return {
        "mae": float(adp_mae(u_pred, u_true)),
        "s12": float(s12(u_pred, u_true)),
        "iou": float(adp_iou(u_pred, u_true, grid)),
    }


def _predict(model, graphs):
    if hasattr(model, "predict_graphs"):
        return model.predict_graphs(graphs)
    return model(graphs)


def evaluate(model, graphs, grid=64):
    """Score a predictor on graphs carrying targets.

    ``model`` is anything with ``predict_graphs(graphs)`` or a callable
    with the same contract: a list of [n_target, 3, 3] arrays (ADP head) or
    a 1-D array of scalars (scalar head).
    """
    graphs = list(graphs)
    preds = _predict(model, graphs)
    scalar = len(graphs) > 0 and np.ndim(preds[0]) == 0
    if scalar:
        records = []
        for g, p in zip(graphs, preds):
            records.append({"structure_id": g.structure_id, "target": float(g.target),
                            "prediction": float(p), "mae": abs(float(p) - float(g.target))})
        return MetricsReport("scalar", sorted(records, key=lambda r: r["structure_id"]),
                             ("mae",))
    records = []
    for g, pred in zip(graphs, preds):
        idx = np.flatnonzero(g.node_has_target)
        pred = np.asarray(pred).reshape(-1, 3, 3)
        for atom, u_pred in zip(idx, pred):
            u_true = g.adp[atom]
            rec = {
                "structure_id": g.structure_id,
                "atom_index": int(atom),
                "element": symbol(int(g.z[atom])),
                "temperature_K": g.temperature,
                "volume_A3": ellipsoid_volume(u_true),
            }
            rec.update(compare_adps(u_pred, u_true, grid))
            records.append(rec)
    records.sort(key=lambda r: (r["structure_id"], r["atom_index"]))
    return MetricsReport("adp", records, ADP_METRICS, slices=adp_slices(records))


class OraclePredictor:
    """Returns each graph's own experimental ADPs; a harness self-check."""

    def predict_graphs(self, graphs):
        out = []
        for g in graphs:
            if g.target is not None and not g.node_has_target.any():
                out.append(float(g.target))
            else:
                u = g.adp[g.node_has_target]
                # atoms without an experimental tensor carry zeros in the graph
                missing = np.flatnonzero(~np.any(u, axis=(1, 2)))
                if len(missing):
                    atom = int(np.flatnonzero(g.node_has_target)[missing[0]])
                    raise MissingAdp(f"{g.structure_id}: atom {atom} has no experimental ADP "
                                     "for the oracle to return")
                out.append(u)
        return np.array(out) if out and np.ndim(out[0]) == 0 else out
