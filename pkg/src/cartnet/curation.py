"""Quality filters that decide whether a structure enters the ADP dataset."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .crystal import contour_scale
from .elements import COVALENT_RADII, covalent_radius
from .graph import build_graph


class RejectCode(str, enum.Enum):
    RFactor = "RFactor"
    Occupancy = "Occupancy"
    MissingTemperature = "MissingTemperature"
    Remarks = "Remarks"
    Polymeric = "Polymeric"
    Disorder = "Disorder"
    MissingAdp = "MissingAdp"
    NonPositiveAdp = "NonPositiveAdp"
    EigRatio = "EigRatio"
    AdpTooLarge = "AdpTooLarge"
    VolRatioHigh = "VolRatioHigh"
    VolRatioLowHighT = "VolRatioLowHighT"


@dataclass(frozen=True)
class RejectReason:
    code: RejectCode
    detail: str = ""

    def __str__(self):
        return f"{self.code.value}: {self.detail}" if self.detail else self.code.value


@dataclass(frozen=True)
class Accept:
    def __bool__(self):
        return True


@dataclass(frozen=True)
class Reject:
    reason: RejectReason

    @property
    def code(self):
        return self.reason.code

    def __bool__(self):
        return False


def _always_pass(structure):
    return None


def _bonds(structure, tolerance=0.4, radii=None):
    """Covalent bonds (src, dst, shift) from the periodic neighbour list."""
    zs = sorted({s.atomic_number for s in structure.sites})
    r = {z: covalent_radius(z, radii) for z in zs}
    g = build_graph(structure, r_c=2 * max(r.values()) + tolerance)
    limit = np.array([r[g.z[a]] + r[g.z[b]] for a, b in zip(g.src, g.dst)]) + tolerance
    keep = g.d <= limit
    return g.src[keep], g.dst[keep], g.shift[keep], g.d[keep], g.z


def infinite_network_check(structure, tolerance=0.4):
    """Polymeric when a bonded path joins an atom to one of its own periodic images."""
    src, dst, shift, _, z = _bonds(structure, tolerance)
    adjacency = [[] for _ in range(len(z))]
    for a, b, k in zip(src, dst, shift):
        adjacency[b].append((a, k))
    offset = [None] * len(z)
    for start in range(len(z)):
        if offset[start] is not None:
            continue
        offset[start] = np.zeros(3, dtype=np.int64)
        stack = [start]
        while stack:
            i = stack.pop()
            for j, k in adjacency[i]:
                o = offset[i] + k
                if offset[j] is None:
                    offset[j] = o
                    stack.append(j)
                elif not np.array_equal(offset[j], o):
                    return f"atom {j} bonds to its own image {tuple(int(x) for x in o - offset[j])}"
    return None


def overlapping_sites_check(structure, fraction=0.5):
    """Disordered when two sites sit closer than ``fraction`` of their covalent bond length."""
    zs = sorted({s.atomic_number for s in structure.sites})
    r = {z: covalent_radius(z) for z in zs}
    g = build_graph(structure, r_c=2 * fraction * max(r.values()))
    for a, b, d in zip(g.src, g.dst, g.d):
        if d < fraction * (r[g.z[a]] + r[g.z[b]]):
            return f"sites {int(b)} and {int(a)} only {d:.3f} A apart"
    return None


# predicates selectable by name from a JSON criteria file
CHECKS = {
    "none": _always_pass,
    "infinite_network": infinite_network_check,
    "overlapping_sites": overlapping_sites_check,
}


@dataclass(frozen=True)
class CurationCriteria:
    """Thresholds applied by :func:`curate`.

    ``invert_eig_ratio`` switches the eigenvalue-ratio filter to reject ratios
    *below* ``max_eig_ratio`` instead of above it. ``polymeric_check`` and
    ``disorder_check`` take a structure and return a detail string to reject,
    or None to pass.
    """

    max_r_factor: float = 0.05
    require_full_occupancy: bool = True
    require_temperature: bool = True
    reject_remarks: bool = True
    max_adp_volume_A3: float = 1.25
    max_vol_ratio: float = 0.35
    min_vol_ratio_above_150K: float = 1e-4
    high_temperature_K: float = 150.0
    max_eig_ratio: float = 8.0
    invert_eig_ratio: bool = False
    probability: float = 0.5
    covalent_radii: dict = field(default_factory=lambda: dict(COVALENT_RADII))
    polymeric_check: Callable = _always_pass
    disorder_check: Callable = _always_pass

    def __post_init__(self):
        for name in ("max_r_factor", "max_adp_volume_A3", "max_vol_ratio",
                     "min_vol_ratio_above_150K", "max_eig_ratio"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        if "covalent_radii" in data:
            radii = dict(COVALENT_RADII)
            radii.update({int(k): float(v) for k, v in data["covalent_radii"].items()})
            data["covalent_radii"] = radii
        for key in ("polymeric_check", "disorder_check"):
            if isinstance(data.get(key), str):
                if data[key] not in CHECKS:
                    raise ValueError(f"{key}: unknown check {data[key]!r}; "
                                     f"choose from {sorted(CHECKS)}")
                data[key] = CHECKS[data[key]]
        return cls(**data)


_OCC_TOL = 1e-6


def curate(structure, criteria: Optional[CurationCriteria] = None):
    """Return :class:`Accept` or :class:`Reject` carrying the first failed filter.

    Filters run in a fixed order: R-factor, occupancy, temperature, remarks,
    polymer/disorder predicates, ADP presence, positive-definiteness,
    eigenvalue ratio, absolute volume, volume relative to the covalent
    sphere, and the small-volume check above 150 K.
    """
    c = criteria or CurationCriteria()

    def reject(code, detail=""):
        return Reject(RejectReason(code, detail))

    if structure.r_factor is not None and structure.r_factor > c.max_r_factor:
        return reject(RejectCode.RFactor,
                      f"R = {structure.r_factor:.4g} > {c.max_r_factor:.4g}")
    if c.require_full_occupancy:
        for i, site in enumerate(structure.sites):
            if abs(site.occupancy - 1.0) > _OCC_TOL:
                return reject(RejectCode.Occupancy,
                              f"site {i} ({site.label or site.atomic_number}) occupancy "
                              f"{site.occupancy:.4g}")
    if c.require_temperature and structure.temperature is None:
        return reject(RejectCode.MissingTemperature, "no temperature recorded")
    if c.reject_remarks and structure.has_remarks:
        return reject(RejectCode.Remarks, "structure carries remarks")
    detail = c.polymeric_check(structure)
    if detail is not None:
        return reject(RejectCode.Polymeric, str(detail))
    detail = c.disorder_check(structure)
    if detail is not None:
        return reject(RejectCode.Disorder, str(detail))

    heavy = [(i, s) for i, s in enumerate(structure.sites) if s.atomic_number != 1]
    for i, site in heavy:
        if site.adp is None:
            return reject(RejectCode.MissingAdp,
                          f"site {i} ({site.label or site.atomic_number}) has no ADP")
    eigs = [np.linalg.eigvalsh(site.adp) for _, site in heavy]
    for (i, site), w in zip(heavy, eigs):
        if w[0] <= 0.0:
            return reject(RejectCode.NonPositiveAdp,
                          f"site {i} eigenvalue {w[0]:.3g}")
    for (i, site), w in zip(heavy, eigs):
        ratio = w[-1] / w[0]
        bad = ratio < c.max_eig_ratio if c.invert_eig_ratio else ratio > c.max_eig_ratio
        if bad:
            return reject(RejectCode.EigRatio, f"site {i} eigenvalue ratio {ratio:.3g}")

    k3 = contour_scale(c.probability) ** 3
    volumes = [4.0 * np.pi / 3.0 * k3 * np.sqrt(np.prod(w)) for w in eigs]
    for (i, site), vol in zip(heavy, volumes):
        if vol > c.max_adp_volume_A3:
            return reject(RejectCode.AdpTooLarge,
                          f"site {i} volume {vol:.4g} A^3 > {c.max_adp_volume_A3}")
    ratios = []
    for (i, site), vol in zip(heavy, volumes):
        r_cov = covalent_radius(site.atomic_number, c.covalent_radii)
        ratios.append(vol / (4.0 * np.pi / 3.0 * r_cov ** 3))
    for (i, site), ratio in zip(heavy, ratios):
        if ratio > c.max_vol_ratio:
            return reject(RejectCode.VolRatioHigh,
                          f"site {i} Vol/Vol_cov {ratio:.4g} > {c.max_vol_ratio}")
    if structure.temperature is not None and structure.temperature > c.high_temperature_K:
        for (i, site), ratio in zip(heavy, ratios):
            if ratio < c.min_vol_ratio_above_150K:
                return reject(RejectCode.VolRatioLowHighT,
                              f"site {i} Vol/Vol_cov {ratio:.3g} at "
                              f"{structure.temperature:g} K")
    return Accept()
