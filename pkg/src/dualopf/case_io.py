"""MATPOWER case parsing and per-unit network assembly.

Only the version-2 matrix layout is understood. The reader is line oriented:
it looks for ``<struct>.<field> = ...`` assignments, strips ``%`` comments and
never evaluates anything.
"""
from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
import scipy.sparse as sp

# minimum columns we read from each MATPOWER table
BUS_COLS = 13
GEN_COLS = 10
BRANCH_COLS = 11
GENCOST_MIN_COLS = 4

REF, PV_CODE, PQ_CODE = 3, 2, 1
SLACK, PV, PQ = "Slack", "PV", "PQ"


class CaseError(ValueError):
    """Base class for malformed or unsupported case data."""


class MissingSection(CaseError):
    pass


class MalformedRow(CaseError):
    pass


class DuplicateBusId(CaseError):
    pass


class UnknownBus(CaseError):
    pass


class NoSlackBus(CaseError):
    pass


class SingularBranch(CaseError):
    pass


class UnsupportedCostModel(CaseError):
    pass


class MultipleGenerators(CaseError):
    pass


@dataclass(frozen=True)
class RawCase:
    """Tables exactly as they appear in the case file (MW, MVAr, degrees)."""

    base_mva: float
    bus: np.ndarray
    gen: np.ndarray
    branch: np.ndarray
    gencost: np.ndarray
    checksum: str = ""


_ASSIGN = re.compile(r"^\s*\w+\.(\w+)\s*=\s*(.*)$")


def _strip_comment(line: str) -> str:
    pos = line.find("%")
    return line if pos < 0 else line[:pos]


def _parse_matrix(name: str, body: list[str]) -> np.ndarray:
    rows: list[list[float]] = []
    for chunk in " \n ".join(body).replace("\n", ";").split(";"):
        tokens = chunk.replace(",", " ").split()
        if not tokens:
            continue
        try:
            rows.append([float(t) for t in tokens])
        except ValueError as exc:
            raise MalformedRow(f"{name}: non-numeric token in row {chunk.strip()!r}") from exc
    if not rows:
        return np.zeros((0, 0))
    width = len(rows[0])
    for r in rows:
        if len(r) != width:
            raise MalformedRow(f"{name}: row width {len(r)} differs from {width}")
    return np.array(rows, dtype=float)


def parse_case(text: str) -> RawCase:
    """Parse MATPOWER version-2 case text into a :class:`RawCase`."""
    scalars: dict[str, float] = {}
    matrices: dict[str, np.ndarray] = {}
    lines = text.splitlines()
    i = 0
    while i < len(lines):
        line = _strip_comment(lines[i])
        i += 1
        m = _ASSIGN.match(line)
        if not m:
            continue
        field, rhs = m.group(1), m.group(2).strip()
        if rhs.startswith("["):
            body = [rhs[1:]]
            while "]" not in body[-1]:
                if i >= len(lines):
                    raise MalformedRow(f"{field}: unterminated matrix")
                body.append(_strip_comment(lines[i]))
                i += 1
            body[-1] = body[-1][: body[-1].index("]")]
            matrices[field] = _parse_matrix(field, body)
        else:
            value = rhs.rstrip(";").strip().strip("'\"")
            try:
                scalars[field] = float(value)
            except ValueError:
                pass

    if "baseMVA" not in scalars:
        raise MissingSection("baseMVA")
    for key in ("bus", "gen", "branch", "gencost"):
        if key not in matrices or matrices[key].size == 0:
            raise MissingSection(key)

    minimum = {"bus": BUS_COLS, "gen": GEN_COLS, "branch": BRANCH_COLS, "gencost": GENCOST_MIN_COLS}
    for key, ncol in minimum.items():
        if matrices[key].shape[1] < ncol:
            raise MalformedRow(f"{key}: expected at least {ncol} columns, got {matrices[key].shape[1]}")

    ids = matrices["bus"][:, 0]
    uniq, counts = np.unique(ids, return_counts=True)
    if np.any(counts > 1):
        raise DuplicateBusId(f"duplicate bus ids: {uniq[counts > 1].astype(int).tolist()}")

    return RawCase(
        base_mva=scalars["baseMVA"],
        bus=matrices["bus"],
        gen=matrices["gen"],
        branch=matrices["branch"],
        gencost=matrices["gencost"],
        checksum=hashlib.sha256(text.encode()).hexdigest(),
    )


def emit_case(raw: RawCase, name: str = "case") -> str:
    """Write a RawCase back out as MATPOWER text (numeric fidelity only)."""
    out = [f"function mpc = {name}", "mpc.version = '2';", f"mpc.baseMVA = {raw.base_mva!r};"]
    for key in ("bus", "gen", "branch", "gencost"):
        out.append(f"mpc.{key} = [")
        for row in getattr(raw, key):
            out.append("\t" + "\t".join(repr(float(v)) for v in row) + ";")
        out.append("];")
    return "\n".join(out) + "\n"


@dataclass(frozen=True, eq=False)
class NetworkModel:
    """Per-unit network with buses re-indexed 0..N-1.

    Generators are stored in the order ``pv`` buses ascending followed by the
    reference-bus generator, so ``gen_bus[:-1] == pv`` and ``gen_bus[-1] == slack``.
    """

    base_mva: float
    bus_ids: np.ndarray
    bus_kind: tuple
    slack: int
    pv: np.ndarray
    pq: np.ndarray
    ybus: sp.csr_matrix
    yf: sp.csr_matrix
    yt: sp.csr_matrix
    f_bus: np.ndarray
    t_bus: np.ndarray
    series_y: np.ndarray
    charging_b: np.ndarray
    tap: np.ndarray
    shift: np.ndarray
    s_max: np.ndarray  # p.u.; 0 means unconstrained
    r: np.ndarray
    x: np.ndarray
    gs: np.ndarray
    bs: np.ndarray
    gen_bus: np.ndarray
    pg_min: np.ndarray
    pg_max: np.ndarray
    qg_min: np.ndarray
    qg_max: np.ndarray
    v_min: np.ndarray
    v_max: np.ndarray
    cost_coeffs: np.ndarray  # (n_gen+1, 3): c2, c1, c0 with P in MW
    pd: np.ndarray
    qd: np.ndarray
    pg0: np.ndarray
    vg0: np.ndarray
    checksum: str = ""

    @property
    def n_bus(self) -> int:
        return len(self.bus_ids)

    @property
    def n_branch(self) -> int:
        return len(self.f_bus)

    @property
    def n_gen(self) -> int:
        """Generators excluding the reference-bus unit."""
        return len(self.pv)

    @property
    def pvpq(self) -> np.ndarray:
        return np.concatenate([self.pv, self.pq])

    @property
    def constrained(self) -> np.ndarray:
        return self.s_max > 0

    @property
    def nominal_load(self) -> np.ndarray:
        return np.concatenate([self.pd, self.qd])


def _cost_coeffs(gencost: np.ndarray) -> np.ndarray:
    out = np.zeros((len(gencost), 3))
    for k, row in enumerate(gencost):
        model, n = int(row[0]), int(row[3])
        if model != 2:
            raise UnsupportedCostModel(f"generator {k}: cost model {model} (only polynomial model 2)")
        if n > 3:
            raise UnsupportedCostModel(f"generator {k}: polynomial degree {n - 1} > 2")
        coeffs = row[4:4 + n]
        if len(coeffs) < n:
            raise MalformedRow(f"gencost row {k}: expected {n} coefficients")
        out[k, 3 - n:] = coeffs
    return out


def branch_admittances(series_y, charging_b, tap, shift):
    """Two-port admittances (Yff, Yft, Ytf, Ytt) of the standard pi branch model."""
    t = tap * np.exp(1j * shift)
    ytt = series_y + 0.5j * charging_b
    yff = ytt / (tap * tap)
    yft = -series_y / np.conj(t)
    ytf = -series_y / t
    return yff, yft, ytf, ytt


def assemble_ybus(n_bus, f_bus, t_bus, series_y, charging_b, tap, shift, ysh):
    """Nodal admittance matrix plus from/to branch admittance matrices."""
    yff, yft, ytf, ytt = branch_admittances(series_y, charging_b, tap, shift)
    m = len(f_bus)
    rows = np.arange(m)
    cf = sp.csr_matrix((np.ones(m), (rows, f_bus)), shape=(m, n_bus))
    ct = sp.csr_matrix((np.ones(m), (rows, t_bus)), shape=(m, n_bus))
    yf = sp.diags(yff) @ cf + sp.diags(yft) @ ct
    yt = sp.diags(ytf) @ cf + sp.diags(ytt) @ ct
    ybus = cf.T @ yf + ct.T @ yt + sp.diags(ysh)
    return sp.csr_matrix(ybus), sp.csr_matrix(yf), sp.csr_matrix(yt)


def build_network(raw: RawCase) -> NetworkModel:
    """Convert a RawCase to per-unit quantities and assemble Ybus."""
    base = raw.base_mva
    bus, gen, branch = raw.bus, raw.gen, raw.branch
    ids = bus[:, 0].astype(int)
    index = {b: k for k, b in enumerate(ids)}
    n = len(ids)

    def lookup(b, what):
        try:
            return index[int(b)]
        except KeyError:
            raise UnknownBus(f"{what} refers to bus {int(b)} not present in bus table") from None

    refs = np.flatnonzero(bus[:, 1] == REF)
    if len(refs) != 1:
        raise NoSlackBus(f"expected exactly one reference bus, found {len(refs)}")
    slack = int(refs[0])

    if len(raw.gencost) < len(gen):
        raise MalformedRow("gencost has fewer rows than gen")
    on_gen = np.flatnonzero(gen[:, 7] > 0)
    gbus = np.array([lookup(b, "generator") for b in gen[on_gen, 0]], dtype=int)
    uniq, counts = np.unique(gbus, return_counts=True)
    if np.any(counts > 1):
        raise MultipleGenerators(f"buses with several in-service generators: {ids[uniq[counts > 1]].tolist()}")
    if slack not in gbus:
        raise NoSlackBus("reference bus has no in-service generator")
    costs = _cost_coeffs(raw.gencost[on_gen])

    # generator order: pv buses ascending, reference unit last
    order = np.argsort(gbus, kind="stable")
    order = np.concatenate([order[gbus[order] != slack], order[gbus[order] == slack]])
    gbus = gbus[order]
    g = gen[on_gen][order]
    costs = costs[order]
    pv = gbus[:-1].copy()
    is_gen = np.zeros(n, dtype=bool)
    is_gen[gbus] = True
    pq = np.flatnonzero(~is_gen)
    kinds = [PQ] * n
    for b in pv:
        kinds[b] = PV
    kinds[slack] = SLACK

    on_br = branch[branch[:, 10] > 0]
    f_bus = np.array([lookup(b, "branch") for b in on_br[:, 0]], dtype=int)
    t_bus = np.array([lookup(b, "branch") for b in on_br[:, 1]], dtype=int)
    r, x = on_br[:, 2].copy(), on_br[:, 3].copy()
    if np.any((r == 0) & (x == 0)):
        bad = np.flatnonzero((r == 0) & (x == 0))
        raise SingularBranch(f"branches with zero impedance: {bad.tolist()}")
    series_y = 1.0 / (r + 1j * x)
    charging = on_br[:, 4].copy()
    tap = np.where(on_br[:, 8] == 0, 1.0, on_br[:, 8])
    shift = np.deg2rad(on_br[:, 9])
    s_max = on_br[:, 5] / base

    gs, bs = bus[:, 4] / base, bus[:, 5] / base
    ybus, yf, yt = assemble_ybus(n, f_bus, t_bus, series_y, charging, tap, shift, gs + 1j * bs)

    v_min, v_max = bus[:, 12].copy(), bus[:, 11].copy()
    pg_min, pg_max = g[:, 9] / base, g[:, 8] / base
    qg_min, qg_max = g[:, 4] / base, g[:, 3] / base
    for lo, hi, what in ((v_min, v_max, "V"), (pg_min, pg_max, "Pg"), (qg_min, qg_max, "Qg")):
        if np.any(lo > hi):
            raise CaseError(f"{what} limits with min > max")

    return NetworkModel(
        base_mva=base, bus_ids=ids, bus_kind=tuple(kinds), slack=slack, pv=pv, pq=pq,
        ybus=ybus, yf=yf, yt=yt, f_bus=f_bus, t_bus=t_bus, series_y=series_y,
        charging_b=charging, tap=tap, shift=shift, s_max=s_max, r=r, x=x, gs=gs, bs=bs,
        gen_bus=gbus, pg_min=pg_min, pg_max=pg_max, qg_min=qg_min, qg_max=qg_max,
        v_min=v_min, v_max=v_max, cost_coeffs=costs,
        pd=bus[:, 2] / base, qd=bus[:, 3] / base,
        pg0=g[:, 1] / base, vg0=g[:, 5].copy(), checksum=raw.checksum,
    )


BUILTIN_CASES = ("case30", "case118")


def read_case_text(source: str | Path) -> str:
    """Return case text from a file path or a bundled case name."""
    path = Path(source)
    if not path.exists():
        # "case30" and "case30.m" both resolve to the bundled copy
        stem = path.name[:-2] if path.name.endswith(".m") else path.name
        if stem in BUILTIN_CASES and path.parent == Path("."):
            return resources.files("dualopf.data").joinpath(f"{stem}.m").read_text()
    return path.read_text()


def load_case(source: str | Path) -> NetworkModel:
    return build_network(parse_case(read_case_text(source)))
