"""Reader for the subset of CIF needed to build ADP datasets.

Handles data blocks, loops, quoted and semicolon-delimited values, comments,
standard uncertainties in parentheses and ``?``/``.`` placeholders. No
dictionary validation is performed; unknown tags are kept but ignored.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

from .crystal import AtomSite, CrystalStructure, LatticeCell, adp_cif_to_cartesian
from .elements import atomic_number
from .errors import MissingCell, ParseError

CELL_TAGS = (
    "_cell_length_a", "_cell_length_b", "_cell_length_c",
    "_cell_angle_alpha", "_cell_angle_beta", "_cell_angle_gamma",
)
TEMPERATURE_TAGS = ("_diffrn_ambient_temperature", "_cell_measurement_temperature")
R_FACTOR_TAGS = ("_refine_ls_r_factor_gt", "_refine_ls_r_factor_all")
SYMOP_TAGS = (
    "_space_group_symop_operation_xyz",
    "_symmetry_equiv_pos_as_xyz",
    "_space_group_symop.operation_xyz",
)
# free-text remark fields whose presence marks a structure as annotated
REMARK_TAGS = ("_ccdc_remarks", "_database_remarks")

_U_KEYS = ("11", "22", "33", "12", "13", "23")
_SU_RE = re.compile(r"^([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)(?:\(\d+\))?$")
_EIGHT_PI2 = 8.0 * np.pi ** 2


@dataclass
class Token:
    text: str
    line: int
    column: int
    quoted: bool = False


@dataclass
class Loop:
    tags: list
    rows: list
    line: int

    def column(self, tag):
        return self.tags.index(tag)

    def has(self, tag):
        return tag in self.tags


@dataclass
class DataBlock:
    name: str
    line: int
    items: dict = field(default_factory=dict)
    loops: list = field(default_factory=list)

    def find(self, tag):
        """Single value for ``tag``, whether stored as an item or a one-row loop."""
        if tag in self.items:
            return self.items[tag].text
        for loop in self.loops:
            if loop.has(tag) and len(loop.rows) == 1:
                return loop.rows[0][loop.column(tag)].text
        return None

    def loop_with(self, tag):
        for loop in self.loops:
            if loop.has(tag):
                return loop
        return None


def tokenize(text):
    tokens = []
    lines = text.splitlines()
    i = 0
    while i < len(lines):
        line = lines[i]
        lineno = i + 1
        if line.startswith(";"):
            start = lineno
            buf = [line[1:]]
            i += 1
            while i < len(lines) and not lines[i].startswith(";"):
                buf.append(lines[i])
                i += 1
            if i == len(lines):
                raise ParseError("unterminated semicolon text field", start, 1)
            tokens.append(Token("\n".join(buf).strip(), start, 1, quoted=True))
            i += 1
            continue
        pos = 0
        n = len(line)
        while pos < n:
            ch = line[pos]
            if ch.isspace():
                pos += 1
            elif ch == "#":
                break
            elif ch in "'\"":
                end = pos + 1
                while True:
                    end = line.find(ch, end)
                    if end == -1:
                        raise ParseError("unterminated quoted string", lineno, pos + 1)
                    if end + 1 == n or line[end + 1].isspace():
                        break
                    end += 1
                tokens.append(Token(line[pos + 1:end], lineno, pos + 1, quoted=True))
                pos = end + 1
            else:
                end = pos
                while end < n and not line[end].isspace():
                    end += 1
                tokens.append(Token(line[pos:end], lineno, pos + 1))
                pos = end
        i += 1
    return tokens


def _is_keyword(tok):
    if tok.quoted:
        return False
    low = tok.text.lower()
    return (
        low.startswith("_") or low == "loop_" or low.startswith("data_")
        or low.startswith("save_") or low == "global_" or low == "stop_"
    )


def parse_blocks(text):
    """Split CIF text into :class:`DataBlock` objects (tags lower-cased)."""
    tokens = tokenize(text)
    blocks = []
    block = None
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        low = tok.text.lower()
        if not tok.quoted and low.startswith("data_"):
            block = DataBlock(tok.text[5:], tok.line)
            blocks.append(block)
            i += 1
        elif block is None:
            raise ParseError(f"content before first data block: {tok.text!r}",
                             tok.line, tok.column)
        elif not tok.quoted and low == "loop_":
            loop_tok = tok
            i += 1
            tags = []
            while i < len(tokens) and not tokens[i].quoted and tokens[i].text.startswith("_"):
                tags.append(tokens[i].text.lower())
                i += 1
            if not tags:
                raise ParseError("loop_ without tags", loop_tok.line, loop_tok.column)
            values = []
            while i < len(tokens) and not _is_keyword(tokens[i]):
                values.append(tokens[i])
                i += 1
            if len(values) % len(tags) != 0:
                last = values[-1] if values else loop_tok
                raise ParseError(
                    f"loop starting with {tags[0]} has {len(values)} values, "
                    f"not a multiple of its {len(tags)} tags (truncated row)",
                    last.line, last.column,
                )
            rows = [values[k:k + len(tags)] for k in range(0, len(values), len(tags))]
            block.loops.append(Loop(tags, rows, loop_tok.line))
        elif not tok.quoted and low.startswith("_"):
            if i + 1 >= len(tokens) or _is_keyword(tokens[i + 1]):
                raise ParseError(f"tag {tok.text} has no value", tok.line, tok.column)
            block.items[low] = tokens[i + 1]
            i += 2
        elif not tok.quoted and (low.startswith("save_") or low in ("global_", "stop_")):
            i += 1
        else:
            raise ParseError(f"unexpected value {tok.text!r} outside a loop",
                             tok.line, tok.column)
    return blocks


def parse_number(text):
    """Float value of a CIF numeric field, or None for ``?``/``.``."""
    if text is None:
        return None
    s = text.strip()
    if s in ("?", "."):
        return None
    m = _SU_RE.match(s)
    if m is None:
        raise ValueError(f"not a CIF number: {text!r}")
    return float(m.group(1))


def _num(block, tag, line=None):
    text = block.find(tag)
    try:
        return parse_number(text)
    except ValueError as exc:
        tok = block.items.get(tag)
        raise ParseError(str(exc), tok.line if tok else line) from None


# --- symmetry operators -------------------------------------------------------

_SYMOP_TOKEN = re.compile(r"\s*([+-])?\s*(\d+(?:\.\d*)?(?:/\d+)?|\.\d+|[xyzXYZ])")


@dataclass(frozen=True)
class SymOp:
    """Fractional affine map p -> W @ p + t."""

    rotation: np.ndarray
    translation: tuple

    @property
    def t(self):
        return np.array([float(x) for x in self.translation])

    def apply(self, frac):
        return np.asarray(frac, dtype=float) @ self.rotation.T + self.t

    def __eq__(self, other):
        return (isinstance(other, SymOp)
                and np.array_equal(self.rotation, other.rotation)
                and self.translation == other.translation)

    __hash__ = None


def parse_symop(s):
    """Parse an operator such as ``"x, -y+1/2, z+1/2"`` into a :class:`SymOp`."""
    parts = s.strip().strip("'\"").split(",")
    if len(parts) != 3:
        raise ParseError(f"symmetry operator {s!r} needs three components")
    w = np.zeros((3, 3), dtype=int)
    t = []
    for row, part in enumerate(parts):
        pos = 0
        shift = Fraction(0)
        text = part.strip()
        if not text:
            raise ParseError(f"empty component in symmetry operator {s!r}")
        while pos < len(text):
            m = _SYMOP_TOKEN.match(text, pos)
            if m is None or m.end() == pos:
                bad = text[pos:].strip()[:1] or text[pos:pos + 1]
                raise ParseError(f"unknown token {bad!r} in symmetry operator {s!r}")
            sign = -1 if m.group(1) == "-" else 1
            term = m.group(2).lower()
            if term in "xyz":
                w[row, "xyz".index(term)] += sign
            else:
                shift += sign * Fraction(term).limit_denominator(1000)
            pos = m.end()
            if pos < len(text) and text[pos:].strip() and text[pos:].lstrip()[0] not in "+-":
                raise ParseError(
                    f"unknown token {text[pos:].lstrip()[0]!r} in symmetry operator {s!r}"
                )
        t.append(shift)
    if np.any(np.abs(w) > 1):
        raise ParseError(f"symmetry operator {s!r} has coefficients outside -1..1")
    return SymOp(w, tuple(t))


IDENTITY = parse_symop("x,y,z")


def _wrap(frac):
    out = frac - np.floor(frac)
    out[out >= 1.0] = 0.0
    return out


def expand_symmetry(structure, symops=None, tol=1e-3):
    """Generate the full unit cell from asymmetric-unit sites.

    Images are wrapped into [0, 1) and merged with an earlier site of the same
    element closer than ``tol`` in fractional coordinates (periodic metric).
    ADPs transform with the Cartesian point operation of each operator.
    """
    ops = symops if symops is not None else (structure.symops or (IDENTITY,))
    m = structure.cell.matrix
    m_inv_t = np.linalg.inv(m).T
    kept = []
    for site in structure.sites:
        for op in ops:
            frac = _wrap(op.apply(site.frac_pos))
            duplicate = False
            for other in kept:
                if other.atomic_number != site.atomic_number:
                    continue
                diff = frac - other.frac_pos
                diff -= np.round(diff)
                if np.all(np.abs(diff) < tol):
                    duplicate = True
                    break
            if duplicate:
                continue
            adp = site.adp
            if adp is not None and not np.array_equal(op.rotation, np.eye(3)):
                s = m.T @ op.rotation @ m_inv_t
                adp = s @ site.adp @ s.T
                adp = 0.5 * (adp + adp.T)
            kept.append(AtomSite.from_fractional(
                structure.cell, site.atomic_number, frac, adp, site.occupancy, site.label))
    return replace(structure, sites=tuple(kept), symops=(IDENTITY,))


# --- structure assembly -------------------------------------------------------

def _column_values(loop, tag):
    col = loop.column(tag)
    return [row[col].text for row in loop.rows]


def _block_to_structure(block, remark_tags=REMARK_TAGS):
    missing = [t for t in CELL_TAGS if _num(block, t, block.line) is None]
    if missing:
        raise MissingCell(f"data block {block.name!r} lacks {', '.join(missing)}",
                          block.line)
    cell = LatticeCell.from_parameters(*(_num(block, t) for t in CELL_TAGS))

    temperature = None
    for tag in TEMPERATURE_TAGS:
        temperature = _num(block, tag)
        if temperature is not None:
            break
    r_factor = None
    for tag in R_FACTOR_TAGS:
        r_factor = _num(block, tag)
        if r_factor is not None:
            break
    has_remarks = any(
        block.find(tag) not in (None, "?", ".") for tag in remark_tags
    )

    symops = []
    for tag in SYMOP_TAGS:
        loop = block.loop_with(tag)
        if loop is not None:
            symops = [parse_symop(v) for v in _column_values(loop, tag)]
            break
        if block.find(tag) is not None:
            symops = [parse_symop(block.find(tag))]
            break

    loop = block.loop_with("_atom_site_fract_x")
    if loop is None:
        raise ParseError(f"data block {block.name!r} has no _atom_site_fract_x loop",
                         block.line)
    adps = _aniso_table(block)
    sites = []
    for row in loop.rows:
        get = {tag: tok for tag, tok in zip(loop.tags, row)}
        label = get["_atom_site_label"].text if "_atom_site_label" in get else ""
        sym_tok = get.get("_atom_site_type_symbol")
        sym = sym_tok.text if sym_tok is not None and sym_tok.text not in "?." else label
        try:
            z = atomic_number(sym)
            frac = [parse_number(get[f"_atom_site_fract_{ax}"].text) for ax in "xyz"]
            occ_tok = get.get("_atom_site_occupancy")
            occ = parse_number(occ_tok.text) if occ_tok is not None else None
        except (ValueError, KeyError) as exc:
            raise ParseError(f"bad atom site row: {exc}", row[0].line, row[0].column) from None
        if any(v is None for v in frac):
            raise ParseError(f"atom {label!r} has undefined coordinates",
                             row[0].line, row[0].column)
        u_cif = adps.get(label)
        adp = None if u_cif is None else adp_cif_to_cartesian(cell, u_cif)
        sites.append(AtomSite.from_fractional(
            cell, z, frac, adp, 1.0 if occ is None else occ, label))

    return CrystalStructure(
        id=block.name, cell=cell, sites=tuple(sites), temperature=temperature,
        r_factor=r_factor, has_remarks=has_remarks, symops=tuple(symops) or (IDENTITY,),
    )


def _aniso_table(block):
    loop = block.loop_with("_atom_site_aniso_label")
    if loop is None:
        return {}
    scale, prefix = 1.0, "_atom_site_aniso_u_"
    if not loop.has(prefix + "11") and loop.has("_atom_site_aniso_b_11"):
        scale, prefix = 1.0 / _EIGHT_PI2, "_atom_site_aniso_b_"
    table = {}
    for row in loop.rows:
        get = {tag: tok for tag, tok in zip(loop.tags, row)}
        label = get["_atom_site_aniso_label"].text
        try:
            vals = [parse_number(get[prefix + k].text) for k in _U_KEYS]
        except (ValueError, KeyError) as exc:
            raise ParseError(f"bad anisotropic row for {label!r}: {exc}",
                             row[0].line, row[0].column) from None
        if any(v is None for v in vals):
            continue
        u11, u22, u33, u12, u13, u23 = (scale * v for v in vals)
        table[label] = np.array([[u11, u12, u13], [u12, u22, u23], [u13, u23, u33]])
    return table


def parse_cif(text, remark_tags=REMARK_TAGS):
    """One :class:`CrystalStructure` per data block, sites as written in the file.

    The returned structures carry their symmetry operators in ``symops``;
    pass them through :func:`expand_symmetry` to obtain the full cell.
    """
    return [_block_to_structure(b, remark_tags) for b in parse_blocks(text)]


def read_cif(path, expand=True):
    with open(path, encoding="utf-8") as fh:
        structures = parse_cif(fh.read())
    return [expand_symmetry(s) for s in structures] if expand else structures
