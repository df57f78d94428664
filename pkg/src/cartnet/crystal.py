"""Crystallographic domain types, cell geometry and ADP utilities.

Conventions: lengths in Angstrom, ADPs in Angstrom^2, angles in degrees.
Cell matrices hold the lattice vectors as rows, with ``a`` along +x and
``b`` in the xy-plane, so Cartesian positions are ``frac @ matrix``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.stats import chi2

from .elements import MAX_Z
from .errors import (
    DegenerateCell,
    MissingTemperature,
    NoAtoms,
    NonPositiveDefinite,
    UnknownElement,
)

# |cos| below this is snapped to zero so right angles give exact zeros
_COS_SNAP = 1e-14
# squared volume per unit lengths below this is treated as flat (round-off of exact zeros)
_MIN_VOL2 = 1e-12


def _cos_sin_deg(angle):
    rad = np.radians(angle)
    c, s = np.cos(rad), np.sin(rad)
    if abs(c) < _COS_SNAP:
        c = 0.0
    if abs(s) < _COS_SNAP:
        s = 0.0
    return float(c), float(s)


def cell_to_matrix(a, b, c, alpha, beta, gamma):
    """Lattice matrix (rows = cell vectors) from cell lengths and angles."""
    for name, length in (("a", a), ("b", b), ("c", c)):
        if not length > 0:
            raise DegenerateCell(f"cell length {name}={length} must be positive")
    for name, angle in (("alpha", alpha), ("beta", beta), ("gamma", gamma)):
        if not 0.0 < angle < 180.0:
            raise DegenerateCell(f"cell angle {name}={angle} outside (0, 180)")
    ca, _ = _cos_sin_deg(alpha)
    cb, _ = _cos_sin_deg(beta)
    cg, sg = _cos_sin_deg(gamma)
    vol2 = 1.0 - ca * ca - cb * cb - cg * cg + 2.0 * ca * cb * cg
    if vol2 <= _MIN_VOL2:
        raise DegenerateCell(
            f"cell angles ({alpha}, {beta}, {gamma}) give non-positive volume"
        )
    cx = c * cb
    cy = c * (ca - cb * cg) / sg
    cz = c * np.sqrt(vol2) / sg
    return np.array([
        [a, 0.0, 0.0],
        [b * cg, b * sg, 0.0],
        [cx, cy, cz],
    ])


def matrix_to_cell(matrix):
    """Lengths and angles (degrees) of the row vectors of ``matrix``."""
    m = np.asarray(matrix, dtype=float)
    lengths = np.linalg.norm(m, axis=1)

    def angle(u, v):
        cosang = np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v))
        return float(np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0))))

    return (
        float(lengths[0]), float(lengths[1]), float(lengths[2]),
        angle(m[1], m[2]), angle(m[0], m[2]), angle(m[0], m[1]),
    )


@dataclass(frozen=True)
class LatticeCell:
    a: float
    b: float
    c: float
    alpha: float
    beta: float
    gamma: float
    matrix: np.ndarray = field(repr=False, compare=False)

    @classmethod
    def from_parameters(cls, a, b, c, alpha, beta, gamma):
        return cls(float(a), float(b), float(c), float(alpha), float(beta),
                   float(gamma), cell_to_matrix(a, b, c, alpha, beta, gamma))

    @classmethod
    def from_matrix(cls, matrix):
        """Cell with an arbitrary orientation, e.g. a rigidly rotated one."""
        m = np.array(matrix, dtype=float)
        if m.shape != (3, 3):
            raise DegenerateCell(f"cell matrix must be 3x3, got {m.shape}")
        if not np.linalg.det(m) > 0:
            raise DegenerateCell("cell matrix must have positive determinant")
        return cls(*matrix_to_cell(m), m)

    @property
    def volume(self):
        return float(np.linalg.det(self.matrix))

    @property
    def reciprocal_lengths(self):
        """|a*|, |b*|, |c*| (no 2*pi factor)."""
        return np.linalg.norm(np.linalg.inv(self.matrix), axis=0)

    def __eq__(self, other):
        if not isinstance(other, LatticeCell):
            return NotImplemented
        return np.array_equal(self.matrix, other.matrix) and (
            (self.a, self.b, self.c, self.alpha, self.beta, self.gamma)
            == (other.a, other.b, other.c, other.alpha, other.beta, other.gamma)
        )

    __hash__ = None


def frac_to_cart(cell, frac_pos):
    return np.asarray(frac_pos, dtype=float) @ _matrix(cell)


def cart_to_frac(cell, cart_pos):
    return np.asarray(cart_pos, dtype=float) @ np.linalg.inv(_matrix(cell))


def _matrix(cell):
    return cell.matrix if isinstance(cell, LatticeCell) else np.asarray(cell, dtype=float)


def _cif_basis(cell):
    """A @ N: column cell vectors scaled by reciprocal lengths."""
    m = _matrix(cell)
    if not np.linalg.det(m) > 0:
        raise DegenerateCell("cell matrix must have positive determinant")
    recip = np.linalg.norm(np.linalg.inv(m), axis=0)
    return m.T * recip[None, :]


def adp_cif_to_cartesian(cell, u_cif):
    """Convert a U_aniso tensor (CIF Uij convention) to Cartesian axes."""
    an = _cif_basis(cell)
    u = an @ np.asarray(u_cif, dtype=float) @ an.T
    return symmetrize(u)


def adp_cartesian_to_cif(cell, u_cart):
    """Inverse of :func:`adp_cif_to_cartesian`."""
    an_inv = np.linalg.inv(_cif_basis(cell))
    u = an_inv @ np.asarray(u_cart, dtype=float) @ an_inv.T
    return symmetrize(u)


def symmetrize(u):
    u = np.asarray(u, dtype=float)
    return 0.5 * (u + np.swapaxes(u, -1, -2))


def adp_eigendecompose(adp):
    """Eigenvalues in descending order and matching eigenvectors (columns).

    Negative eigenvalues are returned as-is.
    """
    w, v = np.linalg.eigh(np.asarray(adp, dtype=float))
    order = np.argsort(w)[::-1]
    return w[order], v[:, order]


def contour_scale(probability=0.5):
    """Radius k of the Mahalanobis surface enclosing ``probability`` of a 3D Gaussian."""
    if not 0.0 < probability < 1.0:
        raise ValueError(f"probability must lie in (0, 1), got {probability}")
    return float(np.sqrt(chi2.ppf(probability, df=3)))


def ellipsoid_volume(adp, probability=0.5):
    """Volume (A^3) of the ellipsoid at the given probability contour."""
    w = np.linalg.eigvalsh(np.asarray(adp, dtype=float))
    if w[0] <= 0.0:
        raise NonPositiveDefinite(f"ADP has non-positive eigenvalue {w[0]:.3g}")
    k = contour_scale(probability)
    return float(4.0 * np.pi / 3.0 * k ** 3 * np.sqrt(np.prod(w)))


def is_rotation(r, atol=1e-9):
    r = np.asarray(r, dtype=float)
    return (
        r.shape == (3, 3)
        and np.allclose(r @ r.T, np.eye(3), atol=atol, rtol=0)
        and abs(np.linalg.det(r) - 1.0) <= atol
    )


@dataclass(frozen=True, eq=False)
class AtomSite:
    atomic_number: int
    frac_pos: np.ndarray
    cart_pos: np.ndarray
    adp: Optional[np.ndarray] = None
    occupancy: float = 1.0
    label: str = ""

    def __post_init__(self):
        if not 1 <= int(self.atomic_number) <= MAX_Z:
            raise UnknownElement(f"atomic number {self.atomic_number} outside 1..{MAX_Z}")

    @classmethod
    def from_fractional(cls, cell, atomic_number, frac_pos, adp=None, occupancy=1.0,
                        label=""):
        frac = np.array(frac_pos, dtype=float)
        return cls(int(atomic_number), frac, frac_to_cart(cell, frac),
                   None if adp is None else symmetrize(adp), float(occupancy), label)

    def __eq__(self, other):
        if not isinstance(other, AtomSite):
            return NotImplemented
        if (self.adp is None) != (other.adp is None):
            return False
        return (
            self.atomic_number == other.atomic_number
            and np.array_equal(self.frac_pos, other.frac_pos)
            and np.array_equal(self.cart_pos, other.cart_pos)
            and (self.adp is None or np.array_equal(self.adp, other.adp))
            and self.occupancy == other.occupancy
        )

    __hash__ = None


@dataclass(frozen=True)
class CrystalStructure:
    """One crystal: cell, full-cell atom sites and experimental metadata."""

    id: str
    cell: LatticeCell
    sites: tuple
    temperature: Optional[float] = None
    r_factor: Optional[float] = None
    has_remarks: bool = False
    target: Optional[float] = None
    symops: tuple = field(default=(), compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "sites", tuple(self.sites))

    def validate(self):
        if not self.sites:
            raise NoAtoms(f"structure {self.id!r} has no atom sites")
        if self.temperature is None and any(s.adp is not None for s in self.sites):
            raise MissingTemperature(f"structure {self.id!r} has ADPs but no temperature")
        return self

    @property
    def n_atoms(self):
        return len(self.sites)

    @property
    def atomic_numbers(self):
        return np.array([s.atomic_number for s in self.sites], dtype=int)

    @property
    def frac_positions(self):
        return np.array([s.frac_pos for s in self.sites], dtype=float).reshape(-1, 3)

    @property
    def cart_positions(self):
        return np.array([s.cart_pos for s in self.sites], dtype=float).reshape(-1, 3)

    def with_sites(self, sites):
        return replace(self, sites=tuple(sites))

    def with_temperature(self, temperature):
        return replace(self, temperature=temperature)
