"""
Feeder data model and ingestion.

A feeder is described by a JSON document with the top-level keys ``buses``,
``branches``, ``transformers``, ``loads``, ``pv``, ``source`` and ``bases``.
Complex numbers are written as ``[re, im]`` pairs. The full schema is
documented in ``docs/feeder_schema.md``.

All quantities are stored as they appear in the file (ohms, kW, kvar, kVA);
per-unit values are derived on demand from ``bases``. ``s_base_kva`` is the
single-phase power base, ``v_base_kv`` the line-to-neutral voltage base.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

import networkx as nx
import numpy as np

log = logging.getLogger(__name__)

PHASES = ("A", "B", "C")


class FeederSchemaError(ValueError):
    """Raised when a feeder or profile file violates the schema."""


@dataclass(frozen=True)
class NodeRef:
    bus_id: str
    phase: str
    index: int

    @property
    def label(self) -> str:
        return f"{self.bus_id}.{self.phase}"


@dataclass(frozen=True)
class Branch:
    id: str
    from_bus: str
    to_bus: str
    phases: tuple[str, ...]
    series_impedance: np.ndarray  # total ohms, len(phases) square
    shunt_admittance: np.ndarray  # total siemens, split half per end
    length_km: float = 0.0


@dataclass(frozen=True)
class OltcDevice:
    id: str
    transformer_id: str
    phases: tuple[str, ...]
    primary_nodes: tuple[int, ...]
    secondary_nodes: tuple[int, ...]
    z_t: complex
    tau_min: int = -16
    tau_max: int = 16
    a_max: float = 1.1
    ganged: bool = True
    delta_to_max: int = 1
    tau_init: int = 0

    @property
    def tap_step(self) -> float:
        """Change in tap ratio per tap position."""
        return (self.a_max - 1.0) / self.tau_max

    def ratio(self, tau: float) -> float:
        return 1.0 + tau / self.tau_max * (self.a_max - 1.0)


@dataclass(frozen=True)
class Transformer:
    id: str
    primary_bus: str
    secondary_bus: str
    phases: tuple[str, ...]
    z_pu: complex
    oltc: dict[str, Any] | None = None


@dataclass(frozen=True)
class LoadSpec:
    id: str
    node: NodeRef
    base_p_kw: float
    base_q_kvar: float
    profile_id: str
    model: str = "constant_pq"


@dataclass(frozen=True)
class PvUnit:
    id: str
    node: NodeRef
    dc_kw: float
    s_kva: float
    profile_id: str
    allow_curtailment: bool = False

    def available_p_kw(self, p_kw: float) -> float:
        """Clip the PV output to the inverter rating."""
        if p_kw > self.s_kva:
            log.warning("PV %s output %.3f kW exceeds rating %.3f kVA; clipped", self.id, p_kw, self.s_kva)
            return self.s_kva
        return max(p_kw, 0.0)

    def q_max_kvar(self, p_kw: float) -> float:
        p = self.available_p_kw(p_kw)
        return math.sqrt(max(self.s_kva**2 - p**2, 0.0))


@dataclass(frozen=True)
class Source:
    bus: str
    magnitude: tuple[float, ...]
    angle_deg: tuple[float, ...]


@dataclass(frozen=True)
class FeederModel:
    name: str
    buses: tuple[tuple[str, tuple[str, ...]], ...]
    nodes: tuple[NodeRef, ...]
    branches: tuple[Branch, ...]
    transformers: tuple[Transformer, ...]
    oltcs: tuple[OltcDevice, ...]
    loads: tuple[LoadSpec, ...]
    pv_units: tuple[PvUnit, ...]
    source: Source
    s_base_kva: float
    v_base_kv: Mapping[str, float]
    _index: Mapping[tuple[str, str], int] = field(repr=False, compare=False, default_factory=dict)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    def node_index(self, bus_id: str, phase: str) -> int:
        try:
            return self._index[(bus_id, phase)]
        except KeyError:
            raise KeyError(f"no node {bus_id}.{phase}") from None

    @property
    def slack_nodes(self) -> np.ndarray:
        return np.array([self.node_index(self.source.bus, ph) for ph in self.bus_phases(self.source.bus)])

    @property
    def nonslack_nodes(self) -> np.ndarray:
        mask = np.ones(self.n_nodes, dtype=bool)
        mask[self.slack_nodes] = False
        return np.flatnonzero(mask)

    def bus_phases(self, bus_id: str) -> tuple[str, ...]:
        for b, phs in self.buses:
            if b == bus_id:
                return phs
        raise KeyError(bus_id)

    def source_voltage(self) -> np.ndarray:
        """Complex per-unit slack voltages, in slack-node order."""
        mags = np.asarray(self.source.magnitude, dtype=float)
        ang = np.deg2rad(np.asarray(self.source.angle_deg, dtype=float))
        return mags * np.exp(1j * ang)

    def z_base(self, bus_id: str) -> float:
        v = self.v_base_kv[bus_id]
        return v * v * 1000.0 / self.s_base_kva

    def kw_to_pu(self, kw: float) -> float:
        return kw / self.s_base_kva

    def pu_to_kw(self, pu: float) -> float:
        return pu * self.s_base_kva

    def oltc(self, oltc_id: str) -> OltcDevice:
        for dev in self.oltcs:
            if dev.id == oltc_id:
                return dev
        raise KeyError(oltc_id)


@dataclass(frozen=True)
class TimeSeriesProfile:
    id: str
    timestamps: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=float)
        vals = np.asarray(self.values, dtype=float)
        if ts.shape != vals.shape or ts.ndim != 1 or len(ts) == 0:
            raise FeederSchemaError(f"profile {self.id}: timestamps and values must be equal-length 1-D arrays")
        if not np.all(np.isfinite(vals)):
            raise FeederSchemaError(f"profile {self.id}: missing or non-finite values")
        if len(ts) > 1:
            d = np.diff(ts)
            if np.any(d <= 0):
                raise FeederSchemaError(f"profile {self.id}: timestamps not strictly increasing")
            if not np.allclose(d, d[0], rtol=0, atol=1e-9 * max(1.0, abs(d[0]))):
                raise FeederSchemaError(f"profile {self.id}: timestamps not uniformly spaced")
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "values", vals)

    @property
    def dt(self) -> float:
        return float(self.timestamps[1] - self.timestamps[0]) if len(self.timestamps) > 1 else 0.0

    def __len__(self) -> int:
        return len(self.values)


def _complex(x, where: str) -> complex:
    if isinstance(x, (int, float)):
        return complex(x)
    if isinstance(x, (list, tuple)) and len(x) == 2 and all(isinstance(v, (int, float)) for v in x):
        return complex(x[0], x[1])
    raise FeederSchemaError(f"{where}: expected [re, im], got {x!r}")


def _cmatrix(rows, n: int, where: str) -> np.ndarray:
    if rows is None:
        return np.zeros((n, n), dtype=complex)
    if not isinstance(rows, list) or len(rows) != n or any(not isinstance(r, list) or len(r) != n for r in rows):
        raise FeederSchemaError(f"{where}: expected {n}x{n} matrix matching the phase list")
    return np.array([[_complex(v, where) for v in r] for r in rows], dtype=complex)


def _require(d: Mapping, key: str, where: str):
    if not isinstance(d, Mapping) or key not in d:
        raise FeederSchemaError(f"{where}: missing field '{key}'")
    return d[key]


def _phases(raw, where: str) -> tuple[str, ...]:
    if not isinstance(raw, list) or not raw:
        raise FeederSchemaError(f"{where}.phases: expected a non-empty list")
    bad = [p for p in raw if p not in PHASES]
    if bad or len(set(raw)) != len(raw):
        raise FeederSchemaError(f"{where}.phases: invalid phase list {raw!r}")
    return tuple(sorted(raw, key=PHASES.index))


def node_ordering(model: FeederModel) -> list[NodeRef]:
    """Nodes in bus declaration order, phases A < B < C within a bus."""
    return list(model.nodes)


def feeder_from_dict(doc: Mapping[str, Any]) -> FeederModel:
    for key in ("buses", "branches", "transformers", "loads", "pv", "source", "bases"):
        _require(doc, key, "feeder")

    bases = doc["bases"]
    s_base = float(_require(bases, "s_base_kva", "bases"))
    if s_base <= 0:
        raise FeederSchemaError("bases.s_base_kva: must be positive")
    vb_raw = _require(bases, "v_base_kv", "bases")
    default_vb = bases.get("default_v_base_kv")

    buses = []
    seen = set()
    for k, b in enumerate(doc["buses"]):
        bid = str(_require(b, "id", f"buses[{k}]"))
        if bid in seen:
            raise FeederSchemaError(f"buses[{k}].id: duplicate node id '{bid}'")
        seen.add(bid)
        buses.append((bid, _phases(b.get("phases", list(PHASES)), f"buses[{k}]")))

    nodes, index = [], {}
    for bid, phs in buses:
        for ph in phs:
            index[(bid, ph)] = len(nodes)
            nodes.append(NodeRef(bid, ph, len(nodes)))

    v_base = {}
    for bid, _ in buses:
        v = vb_raw.get(bid, default_vb) if isinstance(vb_raw, Mapping) else None
        if v is None or float(v) <= 0:
            raise FeederSchemaError(f"bases.v_base_kv: missing or invalid base for bus '{bid}'")
        v_base[bid] = float(v)

    def check_bus(bid, phs, where):
        if bid not in seen:
            raise FeederSchemaError(f"{where}: unknown bus '{bid}'")
        missing = [p for p in phs if (bid, p) not in index]
        if missing:
            raise FeederSchemaError(f"{where}: bus '{bid}' has no phase(s) {missing}")

    branches = []
    for k, br in enumerate(doc["branches"]):
        where = f"branches[{k}]"
        phs = _phases(_require(br, "phases", where), where)
        f, t = str(_require(br, "from", where)), str(_require(br, "to", where))
        check_bus(f, phs, where + ".from")
        check_bus(t, phs, where + ".to")
        if f == t:
            raise FeederSchemaError(f"{where}: from and to are the same bus")
        z = _cmatrix(_require(br, "series_impedance", where), len(phs), where + ".series_impedance")
        if not np.allclose(z, z.T, rtol=0, atol=1e-12):
            raise FeederSchemaError(f"{where}.series_impedance: matrix is not symmetric")
        if abs(np.linalg.det(z)) == 0:
            raise FeederSchemaError(f"{where}.series_impedance: matrix is singular")
        y = _cmatrix(br.get("shunt_admittance"), len(phs), where + ".shunt_admittance")
        branches.append(Branch(str(br.get("id", f"{f}-{t}")), f, t, phs, z, y, float(br.get("length_km", 0.0))))

    transformers, oltcs = [], []
    for k, tr in enumerate(doc["transformers"]):
        where = f"transformers[{k}]"
        phs = _phases(_require(tr, "phases", where), where)
        p, s = str(_require(tr, "primary_bus", where)), str(_require(tr, "secondary_bus", where))
        check_bus(p, phs, where + ".primary_bus")
        check_bus(s, phs, where + ".secondary_bus")
        z = _complex(_require(tr, "z_pu", where), where + ".z_pu")
        if z == 0:
            raise FeederSchemaError(f"{where}.z_pu: transformer impedance must be non-zero")
        raw_oltc = tr.get("oltc")
        tid = str(tr.get("id", f"{p}-{s}"))
        transformers.append(Transformer(tid, p, s, phs, z, dict(raw_oltc) if raw_oltc else None))
        if not raw_oltc:
            continue
        o = raw_oltc
        tau_min, tau_max = o.get("tau_min", -16), o.get("tau_max", 16)
        a_max = o.get("a_max", 1.1)
        dto = o.get("delta_to_max", 1)
        tau_init = o.get("tau_init", 0)
        for name, val in (("tau_min", tau_min), ("tau_max", tau_max), ("delta_to_max", dto), ("tau_init", tau_init)):
            if not isinstance(val, int) or isinstance(val, bool):
                raise FeederSchemaError(f"{where}.oltc.{name}: expected an integer")
        if not (tau_min <= 0 < tau_max):
            raise FeederSchemaError(f"{where}.oltc.tau_max: need tau_min <= 0 < tau_max (got {tau_min}, {tau_max})")
        if not float(a_max) > 1.0:
            raise FeederSchemaError(f"{where}.oltc.a_max: must exceed 1")
        if dto < 0:
            raise FeederSchemaError(f"{where}.oltc.delta_to_max: must be non-negative")
        if not tau_min <= tau_init <= tau_max:
            raise FeederSchemaError(f"{where}.oltc.tau_init: outside [tau_min, tau_max]")
        ganged = bool(o.get("ganged", True))
        groups = [phs] if ganged else [(ph,) for ph in phs]
        for grp in groups:
            oid = tid if ganged else f"{tid}.{grp[0]}"
            oltcs.append(
                OltcDevice(
                    id=oid,
                    transformer_id=tid,
                    phases=grp,
                    primary_nodes=tuple(index[(p, ph)] for ph in grp),
                    secondary_nodes=tuple(index[(s, ph)] for ph in grp),
                    z_t=z,
                    tau_min=tau_min,
                    tau_max=tau_max,
                    a_max=float(a_max),
                    ganged=ganged,
                    delta_to_max=dto,
                    tau_init=tau_init,
                )
            )

    loads = []
    for k, ld in enumerate(doc["loads"]):
        where = f"loads[{k}]"
        bid, ph = str(_require(ld, "bus", where)), _require(ld, "phase", where)
        check_bus(bid, (ph,), where)
        model = ld.get("model", "constant_pq")
        if model != "constant_pq":
            raise FeederSchemaError(f"{where}.model: only 'constant_pq' loads are supported")
        loads.append(
            LoadSpec(
                id=str(ld.get("id", f"load{k}")),
                node=nodes[index[(bid, ph)]],
                base_p_kw=float(_require(ld, "p_kw", where)),
                base_q_kvar=float(_require(ld, "q_kvar", where)),
                profile_id=str(_require(ld, "profile", where)),
            )
        )

    pvs = []
    for k, pv in enumerate(doc["pv"]):
        where = f"pv[{k}]"
        bid, ph = str(_require(pv, "bus", where)), _require(pv, "phase", where)
        check_bus(bid, (ph,), where)
        s_kva = float(_require(pv, "s_kva", where))
        if s_kva < 0:
            raise FeederSchemaError(f"{where}.s_kva: must be non-negative")
        if pv.get("allow_curtailment", False):
            raise FeederSchemaError(f"{where}.allow_curtailment: real power curtailment is not permitted")
        pvs.append(
            PvUnit(
                id=str(_require(pv, "id", where)),
                node=nodes[index[(bid, ph)]],
                dc_kw=float(_require(pv, "dc_kw", where)),
                s_kva=s_kva,
                profile_id=str(_require(pv, "profile", where)),
            )
        )
    for kind, items in (("loads", loads), ("pv", pvs)):
        ids = [x.id for x in items]
        if len(set(ids)) != len(ids):
            raise FeederSchemaError(f"{kind}: duplicate ids")

    src = doc["source"]
    sbus = str(_require(src, "bus", "source"))
    if sbus not in seen:
        raise FeederSchemaError(f"source.bus: unknown bus '{sbus}'")
    sphs = dict(buses)[sbus]
    volts = _require(src, "voltage", "source")
    if not isinstance(volts, list) or len(volts) != len(sphs):
        raise FeederSchemaError("source.voltage: need one [magnitude_pu, angle_deg] pair per source-bus phase")
    mags = tuple(float(v[0]) for v in volts)
    angs = tuple(float(v[1]) for v in volts)
    for t in transformers:
        if t.secondary_bus == sbus:
            raise FeederSchemaError("transformers: the source bus cannot be a transformer secondary")

    for br in branches:
        if not math.isclose(v_base[br.from_bus], v_base[br.to_bus], rel_tol=1e-9):
            raise FeederSchemaError(f"branch {br.id}: voltage bases differ across a line")

    g = nx.Graph()
    g.add_nodes_from(b for b, _ in buses)
    g.add_edges_from((br.from_bus, br.to_bus) for br in branches)
    g.add_edges_from((t.primary_bus, t.secondary_bus) for t in transformers)
    if not nx.is_connected(g):
        comps = sorted(nx.connected_components(g), key=len)
        raise FeederSchemaError(f"feeder graph is disconnected; isolated bus set {sorted(comps[0])}")

    return FeederModel(
        name=str(doc.get("name", "feeder")),
        buses=tuple(buses),
        nodes=tuple(nodes),
        branches=tuple(branches),
        transformers=tuple(transformers),
        oltcs=tuple(oltcs),
        loads=tuple(loads),
        pv_units=tuple(pvs),
        source=Source(sbus, mags, angs),
        s_base_kva=s_base,
        v_base_kv=v_base,
        _index=index,
    )


def load_feeder(path: str | Path) -> FeederModel:
    """Read and validate a feeder JSON file."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FeederSchemaError(f"{path}: not valid JSON ({exc})") from exc
    return feeder_from_dict(doc)


def _cpair(z: complex) -> list[float]:
    return [float(z.real), float(z.imag)]


def feeder_to_dict(model: FeederModel) -> dict[str, Any]:
    """Serialize back to the JSON schema; ``feeder_from_dict`` inverts this."""
    def mat(m):
        return [[_cpair(v) for v in row] for row in m]

    return {
        "name": model.name,
        "bases": {"s_base_kva": model.s_base_kva, "v_base_kv": dict(model.v_base_kv)},
        "source": {
            "bus": model.source.bus,
            "voltage": [[m, a] for m, a in zip(model.source.magnitude, model.source.angle_deg)],
        },
        "buses": [{"id": b, "phases": list(phs)} for b, phs in model.buses],
        "branches": [
            {
                "id": br.id,
                "from": br.from_bus,
                "to": br.to_bus,
                "phases": list(br.phases),
                "length_km": br.length_km,
                "series_impedance": mat(br.series_impedance),
                "shunt_admittance": mat(br.shunt_admittance),
            }
            for br in model.branches
        ],
        "transformers": [
            {
                "id": t.id,
                "primary_bus": t.primary_bus,
                "secondary_bus": t.secondary_bus,
                "phases": list(t.phases),
                "z_pu": _cpair(t.z_pu),
                "oltc": dict(t.oltc) if t.oltc else None,
            }
            for t in model.transformers
        ],
        "loads": [
            {
                "id": ld.id,
                "bus": ld.node.bus_id,
                "phase": ld.node.phase,
                "p_kw": ld.base_p_kw,
                "q_kvar": ld.base_q_kvar,
                "profile": ld.profile_id,
                "model": ld.model,
            }
            for ld in model.loads
        ],
        "pv": [
            {
                "id": pv.id,
                "bus": pv.node.bus_id,
                "phase": pv.node.phase,
                "dc_kw": pv.dc_kw,
                "s_kva": pv.s_kva,
                "profile": pv.profile_id,
            }
            for pv in model.pv_units
        ],
    }


def dump_feeder(model: FeederModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(feeder_to_dict(model), indent=1), encoding="utf-8")


def load_profile(path: str | Path, profile_id: str | None = None) -> TimeSeriesProfile:
    """Read a ``timestamp,value`` CSV; timestamps are seconds."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["timestamp", "value"]:
            raise FeederSchemaError(f"{path}: header must be 'timestamp,value'")
        ts, vals = [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 2 or not row[1].strip():
                raise FeederSchemaError(f"{path}:{lineno}: malformed or missing value")
            ts.append(float(row[0]))
            vals.append(float(row[1]))
    return TimeSeriesProfile(profile_id or path.stem, np.array(ts), np.array(vals))


def write_profile(profile: TimeSeriesProfile, path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", "value"])
        for t, v in zip(profile.timestamps, profile.values):
            w.writerow([repr(float(t)) if t != int(t) else int(t), repr(float(v))])


def load_profiles(directory: str | Path, ids: Iterable[str]) -> dict[str, TimeSeriesProfile]:
    directory = Path(directory)
    out = {}
    for pid in sorted(set(ids)):
        f = directory / f"{pid}.csv"
        if not f.exists():
            raise FeederSchemaError(f"profile '{pid}' not found in {directory}")
        out[pid] = load_profile(f, pid)
    return out
