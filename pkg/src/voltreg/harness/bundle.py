"""
Generators for the bundled datasets.

``ieee37_feeder_dict`` converts the IEEE 37-node test feeder (line
configurations 721-724, 36 line segments, spot loads, XFM-1) to the project
schema. Delta-connected spot loads are split evenly over the two phases they
connect as constant-PQ wye loads. Cable charging is neglected so the feeder is
lossless at no load. One ganged OLTC models the 230/4.8 kV substation
transformer.

PV units are placed by a seeded generator; profiles (30 s resolution, one
day) are synthetic: a clear-sky envelope times a seeded cloud process, and a
smooth daily load shape with small noise.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from ..netmodel import TimeSeriesProfile, write_profile

BUNDLE_SEED = 2019
DT = 30.0
N_STEPS = 2880
MILE_KM = 1.609344
FT_KM = 0.0003048

# phase impedance matrices, ohm/mile
_CONFIGS = {
    "721": [
        [0.2926 + 0.1973j, 0.0673 - 0.0368j, 0.0337 - 0.0417j],
        [0.0673 - 0.0368j, 0.2646 + 0.1900j, 0.0673 - 0.0368j],
        [0.0337 - 0.0417j, 0.0673 - 0.0368j, 0.2926 + 0.1973j],
    ],
    "722": [
        [0.4751 + 0.2973j, 0.1629 - 0.0326j, 0.1234 - 0.0607j],
        [0.1629 - 0.0326j, 0.4488 + 0.2678j, 0.1629 - 0.0326j],
        [0.1234 - 0.0607j, 0.1629 - 0.0326j, 0.4751 + 0.2973j],
    ],
    "723": [
        [1.2936 + 0.6713j, 0.4871 + 0.2111j, 0.4585 + 0.1521j],
        [0.4871 + 0.2111j, 1.3022 + 0.6326j, 0.4871 + 0.2111j],
        [0.4585 + 0.1521j, 0.4871 + 0.2111j, 1.2936 + 0.6713j],
    ],
    "724": [
        [2.0952 + 0.7758j, 0.5204 + 0.2738j, 0.4926 + 0.2123j],
        [0.5204 + 0.2738j, 2.1068 + 0.7398j, 0.5204 + 0.2738j],
        [0.4926 + 0.2123j, 0.5204 + 0.2738j, 2.0952 + 0.7758j],
    ],
}

# (from, to, length ft, config)
IEEE37_SEGMENTS = [
    ("799", "701", 1850, "721"),
    ("701", "702", 960, "722"),
    ("702", "705", 400, "724"),
    ("702", "713", 360, "723"),
    ("702", "703", 1320, "722"),
    ("703", "727", 240, "724"),
    ("703", "730", 600, "723"),
    ("704", "714", 80, "724"),
    ("704", "720", 800, "723"),
    ("705", "742", 320, "724"),
    ("705", "712", 240, "724"),
    ("706", "725", 280, "724"),
    ("707", "724", 760, "724"),
    ("707", "722", 120, "724"),
    ("708", "733", 320, "723"),
    ("708", "732", 320, "724"),
    ("709", "731", 600, "723"),
    ("709", "708", 320, "723"),
    ("710", "735", 200, "724"),
    ("710", "736", 1280, "724"),
    ("711", "741", 400, "723"),
    ("711", "740", 200, "724"),
    ("713", "704", 520, "723"),
    ("714", "718", 520, "724"),
    ("720", "707", 920, "724"),
    ("720", "706", 600, "723"),
    ("727", "744", 280, "723"),
    ("730", "709", 200, "723"),
    ("733", "734", 560, "723"),
    ("734", "737", 640, "723"),
    ("734", "710", 520, "724"),
    ("737", "738", 400, "723"),
    ("738", "711", 400, "723"),
    ("744", "728", 200, "724"),
    ("744", "729", 280, "724"),
]

# bus -> (AB, BC, CA) kW/kvar pairs
IEEE37_SPOT_LOADS = {
    "701": ((140, 70), (140, 70), (350, 175)),
    "712": ((0, 0), (0, 0), (85, 40)),
    "713": ((0, 0), (0, 0), (85, 40)),
    "714": ((17, 8), (21, 10), (0, 0)),
    "718": ((85, 40), (0, 0), (0, 0)),
    "720": ((0, 0), (0, 0), (85, 40)),
    "722": ((0, 0), (140, 70), (21, 10)),
    "724": ((0, 0), (42, 21), (0, 0)),
    "725": ((0, 0), (42, 21), (0, 0)),
    "727": ((0, 0), (0, 0), (42, 21)),
    "728": ((42, 21), (42, 21), (42, 21)),
    "729": ((42, 21), (0, 0), (0, 0)),
    "730": ((0, 0), (0, 0), (85, 40)),
    "731": ((0, 0), (85, 40), (0, 0)),
    "732": ((0, 0), (0, 0), (42, 21)),
    "733": ((85, 40), (0, 0), (0, 0)),
    "734": ((0, 0), (0, 0), (42, 21)),
    "735": ((0, 0), (0, 0), (85, 40)),
    "736": ((0, 0), (42, 21), (0, 0)),
    "737": ((140, 70), (0, 0), (0, 0)),
    "738": ((126, 62), (0, 0), (0, 0)),
    "740": ((0, 0), (0, 0), (85, 40)),
    "741": ((0, 0), (0, 0), (42, 21)),
    "742": ((8, 4), (85, 40), (0, 0)),
    "744": ((42, 21), (0, 0), (0, 0)),
}

V_LN_MV = 4.8 / math.sqrt(3)
V_LN_LV = 0.48 / math.sqrt(3)
S_BASE_KVA = 1000.0

# substation transformer, 2500 kVA, z = 2% + j8% on own base
SUB_Z_PU = complex(0.02, 0.08) * (S_BASE_KVA / (2500.0 / 3))
# XFM-1, 500 kVA, z = 0.09% + j1.81% on own base
XFM1_Z_PU = complex(0.0009, 0.0181) * (S_BASE_KVA / (500.0 / 3))

PV_COUNT = 30
PV_DC_MIN, PV_DC_MAX, PV_DC_TOTAL = 23.0, 206.0, 4100.0
AC_OVERSIZE = 1.1
PV_PEAK_FRACTION = 0.82


def _cm(z):
    return [[[float(v.real), float(v.imag)] for v in row] for row in z]


def _bus_order():
    order = ["sourcebus", "799"]
    for f, t, _, _ in IEEE37_SEGMENTS:
        for b in (f, t):
            if b not in order:
                order.append(b)
    order.append("775")
    return order


def _pv_sizes(rng: np.random.Generator) -> np.ndarray:
    """30 DC ratings spanning [23, 206] kW that total 4.1 MW."""
    u = rng.random(PV_COUNT) ** 0.6
    sizes = PV_DC_MIN + (PV_DC_MAX - PV_DC_MIN) * u
    sizes[0], sizes[1] = PV_DC_MIN, PV_DC_MAX
    rest = sizes[2:]
    target = PV_DC_TOTAL - PV_DC_MIN - PV_DC_MAX
    # affine rescale of the interior units, kept inside the range
    for _ in range(50):
        rest = np.clip(rest * target / rest.sum(), PV_DC_MIN, PV_DC_MAX)
    sizes[2:] = rest
    sizes = np.round(sizes, 1)
    sizes[-1] += round(PV_DC_TOTAL - sizes.sum(), 1)
    return sizes


def ieee37_feeder_dict(seed: int = BUNDLE_SEED) -> dict:
    buses = _bus_order()
    branches = []
    for f, t, ft, cfg in IEEE37_SEGMENTS:
        km = ft * FT_KM
        z = np.array(_CONFIGS[cfg]) / MILE_KM * km
        branches.append(
            {
                "id": f"{f}-{t}",
                "from": f,
                "to": t,
                "phases": ["A", "B", "C"],
                "length_km": km,
                "series_impedance": _cm(z),
            }
        )
    transformers = [
        {
            "id": "subxf",
            "primary_bus": "sourcebus",
            "secondary_bus": "799",
            "phases": ["A", "B", "C"],
            "z_pu": [SUB_Z_PU.real, SUB_Z_PU.imag],
            "oltc": {"tau_min": -16, "tau_max": 16, "a_max": 1.1, "ganged": True, "delta_to_max": 1, "tau_init": 0},
        },
        {
            "id": "xfm1",
            "primary_bus": "709",
            "secondary_bus": "775",
            "phases": ["A", "B", "C"],
            "z_pu": [XFM1_Z_PU.real, XFM1_Z_PU.imag],
            "oltc": None,
        },
    ]
    loads = []
    pairs = (("A", "B"), ("B", "C"), ("C", "A"))
    for bus, legs in IEEE37_SPOT_LOADS.items():
        per_phase = {"A": [0.0, 0.0], "B": [0.0, 0.0], "C": [0.0, 0.0]}
        for (p, q), (ph1, ph2) in zip(legs, pairs):
            for ph in (ph1, ph2):
                per_phase[ph][0] += p / 2
                per_phase[ph][1] += q / 2
        for ph, (p, q) in per_phase.items():
            if p or q:
                loads.append({"id": f"ld{bus}{ph.lower()}", "bus": bus, "phase": ph, "p_kw": p, "q_kvar": q, "profile": "load"})

    rng = np.random.default_rng(seed)
    candidates = [b for b in buses if b not in ("sourcebus", "799", "775")]
    sizes = _pv_sizes(rng)
    sites = rng.choice(len(candidates), size=PV_COUNT, replace=True)
    phases = rng.permutation(np.repeat(np.arange(3), PV_COUNT // 3))
    pv = []
    for k in range(PV_COUNT):
        dc = float(sizes[k])
        pv.append(
            {
                "id": f"pv{k + 1:02d}",
                "bus": candidates[int(sites[k])],
                "phase": "ABC"[int(phases[k])],
                "dc_kw": dc,
                "s_kva": round(dc * AC_OVERSIZE, 3),
                "profile": f"pv{k + 1:02d}",
            }
        )

    v_base = {b: V_LN_MV for b in buses}
    v_base["775"] = V_LN_LV
    return {
        "name": "ieee37",
        "bases": {"s_base_kva": S_BASE_KVA, "v_base_kv": v_base},
        "source": {"bus": "sourcebus", "voltage": [[1.0, 0.0], [1.0, -120.0], [1.0, 120.0]]},
        "buses": [{"id": b, "phases": ["A", "B", "C"]} for b in buses],
        "branches": branches,
        "transformers": transformers,
        "loads": loads,
        "pv": pv,
    }


def clear_sky(hours: np.ndarray) -> np.ndarray:
    """Normalized clear-sky PV envelope, sunrise 06:00, sunset 18:00."""
    x = np.clip((hours - 6.0) / 12.0, 0.0, 1.0)
    return np.sin(np.pi * x) ** 1.3


def cloud_index(rng: np.random.Generator, hours: np.ndarray) -> np.ndarray:
    """Clear-sky index of a partly cloudy day.

    Alternating clear/cloudy spells with exponential durations. Clouds are
    sparser around solar noon; transitions are smoothed over ~1.5 min.
    """
    n = len(hours)
    k = np.ones(n)
    i = 0
    cloudy = False
    while i < n:
        h = hours[i]
        if cloudy:
            dur = max(2, int(rng.exponential(8)))
            depth = rng.uniform(0.25, 0.65)
            k[i : i + dur] = depth
        else:
            mean_clear = 40 if 10.5 <= h <= 13.5 else 14
            dur = max(2, int(rng.exponential(mean_clear)))
        i += dur
        cloudy = not cloudy
    kern = np.ones(3) / 3
    k = np.convolve(np.pad(k, 1, mode="edge"), kern, mode="valid")
    return k


def load_shape(rng: np.random.Generator, hours: np.ndarray) -> np.ndarray:
    """Daily load multiplier: 0.3 base, morning bump, evening peak of 1.0 at 19:00."""
    def circ(h, c):
        d = np.abs(h - c)
        return np.minimum(d, 24 - d)

    m = 0.30 + 0.12 * np.exp(-((circ(hours, 7.5) / 1.5) ** 2)) + 0.70 * np.exp(-((circ(hours, 19.0) / 2.8) ** 2))
    noise = np.convolve(rng.normal(0, 0.01, len(hours) + 9), np.ones(10) / 10, mode="valid")
    return np.round(m * (1 + noise), 6)


def cloudy_day_profiles(feeder: dict, seed: int = BUNDLE_SEED) -> dict[str, TimeSeriesProfile]:
    rng = np.random.default_rng(seed + 1)
    t = np.arange(N_STEPS) * DT
    hours = t / 3600.0
    env = clear_sky(hours)
    base = cloud_index(rng, hours)
    profiles = {"load": TimeSeriesProfile("load", t, load_shape(rng, hours))}
    for pv in feeder["pv"]:
        lag = int(rng.integers(0, 6))
        k = np.concatenate([np.full(lag, base[0]), base[: N_STEPS - lag]])
        local = 1 + np.convolve(rng.normal(0, 0.015, N_STEPS + 5), np.ones(6) / 6, mode="valid")
        kw = pv["dc_kw"] * PV_PEAK_FRACTION * env * np.clip(k * local, 0.0, 1.05)
        profiles[pv["profile"]] = TimeSeriesProfile(pv["profile"], t, np.round(np.maximum(kw, 0.0), 4))
    return profiles


def scenario_dict(method: str = "ovr") -> dict:
    return {
        "feeder": "ieee37.json",
        "profiles": "profiles",
        "method": method,
        "dt": DT,
        "horizon_steps": 10,
        "replan_steps": 10,
        "weights": [1.0, 0.15],
        "forecast_alpha": 0.0,
        "rng_seed": 7,
        "volt_var": [[0.92, 1.0], [0.98, 0.0], [1.02, 0.0], [1.08, -1.0]],
        "avr": {"v_ref": 1.03, "bandwidth": 0.0167, "time_delay": 0.0},
    }


def write_bundle(directory: str | Path, seed: int = BUNDLE_SEED) -> None:
    directory = Path(directory)
    (directory / "profiles").mkdir(parents=True, exist_ok=True)
    feeder = ieee37_feeder_dict(seed)
    (directory / "ieee37.json").write_text(json.dumps(feeder, indent=1) + "\n", encoding="utf-8")
    for pid, prof in cloudy_day_profiles(feeder, seed).items():
        write_profile(prof, directory / "profiles" / f"{pid}.csv")
    (directory / "scenario_ieee37.json").write_text(json.dumps(scenario_dict(), indent=1) + "\n", encoding="utf-8")


def synthetic_feeder_dict(n_buses: int = 340, seed: int = 5, pv_fraction: float = 0.2) -> dict:
    """Random radial three-phase feeder for scalability checks.

    Branch impedances are drawn from configurations 723/724, spot loads of
    10-60 kW per phase, PV on roughly ``pv_fraction`` of the buses, one
    ganged OLTC at the substation.
    """
    rng = np.random.default_rng(seed)
    buses = ["src", "b0"] + [f"b{k}" for k in range(1, n_buses)]
    branches = []
    for k in range(1, n_buses):
        parent = int(rng.integers(max(0, k - 8), k))
        cfg = "723" if rng.random() < 0.5 else "724"
        km = float(rng.uniform(0.02, 0.12))
        z = np.array(_CONFIGS[cfg]) / MILE_KM * km
        branches.append({"id": f"l{k}", "from": f"b{parent}", "to": f"b{k}", "phases": ["A", "B", "C"],
                         "length_km": km, "series_impedance": _cm(z)})
    loads, pv = [], []
    for k in range(1, n_buses):
        for ph in "ABC":
            if rng.random() < 0.6:
                p = float(rng.uniform(2, 12))
                loads.append({"id": f"ld{k}{ph}", "bus": f"b{k}", "phase": ph, "p_kw": round(p, 2),
                              "q_kvar": round(0.45 * p, 2), "profile": "load"})
        if rng.random() < pv_fraction:
            dc = float(rng.uniform(5, 25))
            pv.append({"id": f"pv{k}", "bus": f"b{k}", "phase": "ABC"[int(rng.integers(3))], "dc_kw": round(dc, 1),
                       "s_kva": round(dc * AC_OVERSIZE, 2), "profile": f"pv{k}"})
    return {
        "name": f"synthetic{n_buses}",
        "bases": {"s_base_kva": S_BASE_KVA, "v_base_kv": {b: V_LN_MV for b in buses}},
        "source": {"bus": "src", "voltage": [[1.0, 0.0], [1.0, -120.0], [1.0, 120.0]]},
        "buses": [{"id": b, "phases": ["A", "B", "C"]} for b in buses],
        "branches": branches,
        "transformers": [{
            "id": "subxf", "primary_bus": "src", "secondary_bus": "b0", "phases": ["A", "B", "C"],
            "z_pu": [SUB_Z_PU.real / 2, SUB_Z_PU.imag / 2],
            "oltc": {"tau_min": -16, "tau_max": 16, "a_max": 1.1, "ganged": True, "delta_to_max": 1, "tau_init": 2},
        }],
        "loads": loads,
        "pv": pv,
    }


def synthetic_profiles(feeder: dict, n_steps: int = 20, start_hour: float = 12.0, seed: int = 5) -> dict[str, TimeSeriesProfile]:
    """Short clear-sky profiles starting at ``start_hour`` for every profile id in ``feeder``."""
    rng = np.random.default_rng(seed)
    t = start_hour * 3600 + np.arange(n_steps) * DT
    env = clear_sky(t / 3600.0)
    out = {"load": TimeSeriesProfile("load", t, np.full(n_steps, 0.5))}
    for pv in feeder["pv"]:
        kw = pv["dc_kw"] * PV_PEAK_FRACTION * env * rng.uniform(0.9, 1.0, n_steps)
        out[pv["profile"]] = TimeSeriesProfile(pv["profile"], t, kw)
    return out
