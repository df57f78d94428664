"""JSON-lines dataset files and grouped train/val/test splits."""
from __future__ import annotations

import hashlib
import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from functools import reduce

import numpy as np

from .crystal import AtomSite, CrystalStructure, LatticeCell, cell_to_matrix
from .elements import covalent_radius, symbol
from .errors import EmptyDataset, SchemaError
from .graph import build_graph

SCHEMA_VERSION = 1
_CELL_KEYS = ("a", "b", "c", "alpha", "beta", "gamma")
BOND_TOLERANCE = 0.4


def _u_to_list(u):
    return [u[0, 0], u[1, 1], u[2, 2], u[0, 1], u[0, 2], u[1, 2]]


def _list_to_u(v):
    u11, u22, u33, u12, u13, u23 = (float(x) for x in v)
    return np.array([[u11, u12, u13], [u12, u22, u23], [u13, u23, u33]])


def structure_to_record(structure, extra=None):
    cell = structure.cell
    rec = {
        "id": structure.id,
        "cell": {k: getattr(cell, k) for k in _CELL_KEYS},
        "temperature_K": structure.temperature,
        "r_factor": structure.r_factor,
        "target": structure.target,
        "sites": [
            {
                "z": int(s.atomic_number),
                "frac": [float(x) for x in s.frac_pos],
                "occ": float(s.occupancy),
                "u_cart": None if s.adp is None else [float(x) for x in _u_to_list(s.adp)],
                **({"label": s.label} if s.label else {}),
            }
            for s in structure.sites
        ],
    }
    standard = cell_to_matrix(*(getattr(cell, k) for k in _CELL_KEYS))
    if not np.array_equal(standard, cell.matrix):
        rec["cell"]["matrix"] = cell.matrix.tolist()
    if structure.has_remarks:
        rec["has_remarks"] = True
    if extra:
        rec.update(extra)
    return rec


def record_to_structure(rec, line=None):
    try:
        cell_rec = rec["cell"]
        if "matrix" in cell_rec:
            m = np.array(cell_rec["matrix"], dtype=float)
            cell = LatticeCell(*(float(cell_rec[k]) for k in _CELL_KEYS), m)
        else:
            cell = LatticeCell.from_parameters(*(cell_rec[k] for k in _CELL_KEYS))
        sites = []
        for s in rec["sites"]:
            u = s.get("u_cart")
            if u is not None and len(u) != 6:
                raise SchemaError("u_cart must hold 6 values", line)
            frac = np.array(s["frac"], dtype=float)
            if frac.shape != (3,):
                raise SchemaError("frac must hold 3 values", line)
            sites.append(AtomSite(int(s["z"]), frac, frac @ cell.matrix,
                                  None if u is None else _list_to_u(u),
                                  float(s.get("occ", 1.0)), s.get("label", "")))
        return CrystalStructure(
            id=str(rec["id"]),
            cell=cell,
            sites=tuple(sites),
            temperature=rec.get("temperature_K"),
            r_factor=rec.get("r_factor"),
            has_remarks=bool(rec.get("has_remarks", False)),
            target=rec.get("target"),
        )
    except SchemaError:
        raise
    except KeyError as exc:
        raise SchemaError(f"missing field {exc.args[0]!r}", line) from None
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"invalid record: {exc}", line) from None


def write_dataset(structures, path, extras=None):
    """Write one JSON object per line. ``extras`` maps structure id to extra keys."""
    extras = extras or {}
    with open(path, "w", encoding="utf-8") as fh:
        for s in structures:
            fh.write(json.dumps(structure_to_record(s, extras.get(s.id))))
            fh.write("\n")


def iter_records(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"invalid JSON: {exc.msg}", lineno) from None
            if not isinstance(rec, dict):
                raise SchemaError("each line must be a JSON object", lineno)
            yield lineno, rec


def read_dataset(path):
    return [record_to_structure(rec, lineno) for lineno, rec in iter_records(path)]


# --- grouping and splits --------------------------------------------------------

def reduced_formula(structure):
    counts = Counter(int(s.atomic_number) for s in structure.sites)
    div = reduce(math.gcd, counts.values())
    carbon = 6 in counts
    order = sorted(counts, key=lambda z: (
        (0 if z == 6 else 1 if z == 1 else 2) if carbon else 2, symbol(z)))
    parts = []
    for z in order:
        n = counts[z] // div
        parts.append(symbol(z) + (str(n) if n > 1 else ""))
    return "".join(parts)


def connectivity_hash(structure, tolerance=BOND_TOLERANCE, radii=None):
    """Hash of the bonded-neighbour environments of all atoms.

    Two atoms are bonded when closer than the sum of their covalent radii
    plus ``tolerance``. Each atom is labelled by its element and the sorted
    elements of its bonded neighbours; the multiset of labels, reduced by
    the gcd of its counts, is hashed.
    """
    zs = sorted({s.atomic_number for s in structure.sites})
    r = {z: covalent_radius(z, radii) for z in zs}
    reach = 2 * max(r.values()) + tolerance
    g = build_graph(structure, r_c=reach)
    bonded = g.d <= np.array([r[g.z[a]] + r[g.z[b]] for a, b in zip(g.src, g.dst)]) + tolerance
    neighbours = defaultdict(list)
    for a, b in zip(g.src[bonded], g.dst[bonded]):
        neighbours[int(b)].append(int(g.z[a]))
    labels = Counter(
        (int(g.z[i]), tuple(sorted(neighbours[i]))) for i in range(g.n_nodes)
    )
    div = reduce(math.gcd, labels.values())
    canon = sorted((lab, n // div) for lab, n in labels.items())
    return hashlib.sha1(repr(canon).encode()).hexdigest()[:16]


def group_key(structure):
    """Same compound (at any temperature or entry) gives the same key."""
    return f"{reduced_formula(structure)}:{connectivity_hash(structure)}"


@dataclass
class DatasetSplit:
    train: list = field(default_factory=list)
    val: list = field(default_factory=list)
    test: list = field(default_factory=list)

    def to_dict(self):
        return {"train": list(self.train), "val": list(self.val), "test": list(self.test)}

    @classmethod
    def from_dict(cls, data):
        return cls(list(data["train"]), list(data["val"]), list(data["test"]))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def select(self, structures, part):
        wanted = set(getattr(self, part))
        return [s for s in structures if s.id in wanted]


def split_dataset(structures, seed, fractions=(0.78, 0.107, 0.113), key=group_key):
    """Random grouped split; every group lands wholly in one part.

    Groups are shuffled and laid end to end; a group goes to the part whose
    cumulative-fraction interval contains the midpoint of its span, so each
    part misses its target size by at most one group.
    """
    if not structures:
        raise EmptyDataset("cannot split an empty dataset")
    fr = np.asarray(fractions, dtype=float)
    if fr.shape != (3,) or np.any(fr < 0) or not fr.sum() > 0:
        raise ValueError(f"fractions must be three non-negative numbers, got {fractions}")
    fr = fr / fr.sum()
    groups = defaultdict(list)
    for s in structures:
        groups[key(s) if callable(key) else key[s.id]].append(s.id)
    names = sorted(groups)
    order = np.random.default_rng(seed).permutation(len(names))
    total = len(structures)
    bounds = np.cumsum(fr) * total
    parts = ([], [], [])
    position = 0
    for idx in order:
        members = groups[names[idx]]
        mid = position + len(members) / 2.0
        part = int(np.searchsorted(bounds[:2], mid, side="right"))
        parts[part].extend(members)
        position += len(members)
    return DatasetSplit(*parts)
