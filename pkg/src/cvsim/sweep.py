"""Architectural parameter sweeps over compressed vs. uncompressed GEMM.

A sweep is the cross product of named axes applied to a base
:class:`MachineConfig`.  Kernel traces are produced once per
(n, vlen, mode, fill) and shared by every grid point.
"""

from __future__ import annotations

import io
import itertools
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from cvsim.kernels import KernelSpec, random_operands, run_gemm
from cvsim.timing import (
    ARITH,
    GB_S,
    KB,
    MB,
    MachineConfig,
    check_inequalities,
    improvement_pct,
    simulate,
)
from cvsim.vvm import Trace

AXES = {
    "mem_bandwidth_bytes_per_s": "mem_bandwidth",
    "l1_size_bytes": "l1_size",
    "l1_latency_ns": "l1_latency",
    "mem_latency_ns": "mem_latency",
    "compression_latency_cycles": None,
}
LATENCY_AXIS = "compression_latency_cycles"
DEFAULT_CAP = 10_000

CONFIG_COLUMNS = (list(MachineConfig._KEYS)
                  + [f"instr_latency_cycles.{m}" for m in ARITH])


class TraceStore:
    """Builds each kernel trace once and hands out the shared copy."""

    def __init__(self):
        self._traces: dict[KernelSpec, Trace] = {}
        self._lock = threading.Lock()
        self.builds = 0

    def get(self, spec: KernelSpec) -> Trace:
        with self._lock:
            if spec not in self._traces:
                a, b = random_operands(spec.n, 0, spec.mode, bf16_exact=True)
                self._traces[spec] = run_gemm(a, b, spec).trace
                self.builds += 1
            return self._traces[spec]

    def pair(self, n: int, vlen_bits: int, fill: str = "zeropad") -> tuple[Trace, Trace]:
        """(compressed, uncompressed) traces."""
        return (self.get(KernelSpec(n, "compressed", vlen_bits, fill)),
                self.get(KernelSpec(n, "uncompressed", vlen_bits, fill)))


TRACES = TraceStore()


@dataclass
class SweepSpec:
    base: MachineConfig = field(default_factory=MachineConfig)
    axes: dict[str, list] = field(default_factory=dict)
    n: int = 512
    vlen_bits: int = 16384
    fill: str = "zeropad"
    cap: int = DEFAULT_CAP

    def __post_init__(self):
        if not self.axes:
            raise ValueError("a sweep needs at least one axis")
        for name, values in self.axes.items():
            if name not in AXES:
                raise ValueError(f"unknown axis {name!r}; choose from {', '.join(AXES)}")
            if not len(values):
                raise ValueError(f"axis {name!r} is empty")
            if any(not v > 0 for v in values):
                raise ValueError(f"axis {name!r} has non-positive values")
        if self.size > self.cap:
            raise ValueError(f"grid of {self.size} points exceeds cap {self.cap}")

    @property
    def size(self) -> int:
        return int(np.prod([len(v) for v in self.axes.values()]))

    def points(self) -> list[dict]:
        names = list(self.axes)
        return [dict(zip(names, combo)) for combo in itertools.product(*self.axes.values())]

    def config_at(self, point: dict) -> MachineConfig:
        cfg = self.base
        changes = {}
        for name, value in point.items():
            attr = AXES[name]
            if attr is None:
                cfg = cfg.with_compression_latency(int(value))
            else:
                changes[attr] = int(value) if attr == "l1_size" else value
        return cfg.replace(**changes) if changes else cfg

    # ── text format ─────────────────────────────────────────────────────

    @classmethod
    def from_text(cls, text: str) -> "SweepSpec":
        """``n``, ``vlen_bits``, ``fill``, ``cap``, ``base.<config key>``, ``axis.<name>``."""
        base_lines, axes, kw = [], {}, {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            try:
                if key.startswith("base."):
                    base_lines.append(f"{key[5:]} = {val}")
                elif key.startswith("axis."):
                    axes[key[5:]] = [_num(v) for v in val.split(",") if v.strip()]
                elif key in ("n", "vlen_bits", "cap"):
                    kw[key] = int(val)
                elif key == "fill":
                    kw[key] = val
                else:
                    raise ValueError(f"unknown key {key!r}")
            except ValueError as exc:
                raise ValueError(f"line {lineno}: {exc}") from None
        base = MachineConfig.from_text("\n".join(base_lines))
        return cls(base=base, axes=axes, **kw)


def _num(text: str):
    v = float(text)
    return int(v) if v == int(v) else v


@dataclass
class SweepRow:
    point: dict
    config: MachineConfig
    cycles_c: int
    cycles_u: int
    load_side: bool
    store_side: bool

    @property
    def improvement(self) -> float:
        return improvement_pct(self.cycles_c, self.cycles_u)

    def config_values(self) -> list[str]:
        vals = dict(line.split(" = ") for line in self.config.to_text().splitlines())
        return [vals[c] for c in CONFIG_COLUMNS]


def run_sweep(spec: SweepSpec, store: TraceStore | None = None,
              workers: int | None = None) -> list[SweepRow]:
    """One row per grid point, in lexicographic axis order."""
    store = store or TRACES
    trace_c, trace_u = store.pair(spec.n, spec.vlen_bits, spec.fill)
    memo: dict[tuple[str, str], object] = {}
    lock = threading.Lock()

    def report(tag, trace, cfg):
        key = (tag, cfg.to_text())
        with lock:
            hit = memo.get(key)
        if hit is None:
            hit = simulate(trace, cfg)
            with lock:
                memo[key] = hit
        return hit

    def one(point):
        cfg = spec.config_at(point)
        rc = report("c", trace_c, cfg)
        ru = report("u", trace_u, cfg)
        ineq = check_inequalities(rc, ru)
        return SweepRow(point, cfg, rc.total_cycles, ru.total_cycles,
                        ineq.load_side, ineq.store_side)

    points = spec.points()
    workers = workers or os.cpu_count() or 1
    if workers == 1:
        return [one(p) for p in points]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, points))


def rows_to_csv(rows: Sequence[SweepRow]) -> str:
    out = io.StringIO()
    out.write(",".join(CONFIG_COLUMNS + ["cycles_c", "cycles_u", "improvement",
                                         "load_side", "store_side"]) + "\n")
    for r in rows:
        out.write(",".join(r.config_values() + [str(r.cycles_c), str(r.cycles_u),
                                                repr(r.improvement),
                                                str(int(r.load_side)), str(int(r.store_side))]))
        out.write("\n")
    return out.getvalue()


# ── analysis ────────────────────────────────────────────────────────────


def _groups(rows: Sequence[SweepRow], axis: str) -> dict[tuple, list[SweepRow]]:
    if not rows:
        return {}
    if any(axis not in r.point for r in rows):
        raise ValueError(f"rows do not vary axis {axis!r}")
    others = [a for a in rows[0].point if a != axis]
    groups: dict[tuple, list[SweepRow]] = {}
    for r in rows:
        groups.setdefault(tuple(r.point[a] for a in others), []).append(r)
    values = sorted({r.point[axis] for r in rows})
    for key, members in groups.items():
        if sorted(r.point[axis] for r in members) != values:
            raise ValueError(f"incomplete grid along {axis!r} at {dict(zip(others, key))}")
    return groups


@dataclass
class OrderingResult:
    ok: bool
    violations: list[tuple[dict, dict]]

    def __bool__(self) -> bool:
        return self.ok


def ordering_check(rows: Sequence[SweepRow], axis: str, direction: str = "decreasing",
                   strict: bool = False) -> OrderingResult:
    """Is improvement monotone along ``axis`` with every other axis fixed?

    ``decreasing``: improvement does not rise as the axis value rises
    (falls, if ``strict``).  Violations are reported as adjacent pairs.
    """
    if direction not in ("decreasing", "increasing"):
        raise ValueError(f"direction must be 'decreasing' or 'increasing', got {direction!r}")
    sign = 1 if direction == "decreasing" else -1
    bad = []
    for members in _groups(rows, axis).values():
        members = sorted(members, key=lambda r: r.point[axis])
        for lo, hi in zip(members, members[1:]):
            step = sign * (lo.improvement - hi.improvement)
            if step < 0 or (strict and step == 0):
                bad.append((lo.point, hi.point))
    return OrderingResult(not bad, bad)


@dataclass
class PositBudget:
    point: dict                 # the grid point without the latency axis
    budget: float               # largest sampled latency with positive improvement
    crossing: float | None      # interpolated zero crossing, None if never crossed
    lower_bound: bool           # improvement positive over the whole axis
    posit_cycles: int
    posit_improvement: float    # interpolated improvement at posit_cycles
    viable: bool


def posit_whatif(rows: Sequence[SweepRow], posit_conversion_cycles: int) -> list[PositBudget]:
    """Conversion-latency budget a single-instruction posit converter must meet.

    For every grid point, scans the compression-latency axis for the last
    latency that still gives a positive improvement.
    """
    out = []
    for key, members in _groups(rows, LATENCY_AXIS).items():
        members = sorted(members, key=lambda r: r.point[LATENCY_AXIS])
        lats = np.array([r.point[LATENCY_AXIS] for r in members], dtype=float)
        imps = np.array([r.improvement for r in members])
        point = {a: v for a, v in members[0].point.items() if a != LATENCY_AXIS}
        nonpos = np.flatnonzero(imps <= 0)
        if nonpos.size == 0:
            budget, crossing, lower = float(lats[-1]), None, True
        elif nonpos[0] == 0:
            budget, crossing, lower = 0.0, float(lats[0]) if imps[0] == 0 else None, False
        else:
            j = nonpos[0]
            budget, lower = float(lats[j - 1]), False
            crossing = float(lats[j - 1] + (lats[j] - lats[j - 1])
                             * imps[j - 1] / (imps[j - 1] - imps[j]))
        est = float(np.interp(posit_conversion_cycles, lats, imps))
        out.append(PositBudget(point, budget, crossing, lower, posit_conversion_cycles,
                               est, est > 0))
    return out


# ── experiment grids ────────────────────────────────────────────────────

CACHE_SIZES = [512 * KB, 1 * MB, int(2.5 * MB)]


def cache_bandwidth_spec() -> SweepSpec:
    base = MachineConfig(l1_latency=20, mem_latency=60)
    return SweepSpec(base, {"l1_size_bytes": CACHE_SIZES,
                            "mem_bandwidth_bytes_per_s": [1 * GB_S, 100 * GB_S]})


def bandwidth_ladder_spec() -> SweepSpec:
    ladder = [int(round(v)) for v in np.geomspace(1 * GB_S, 100 * GB_S, 7)]
    base = MachineConfig(l1_latency=20, mem_latency=60)
    return SweepSpec(base, {
        "l1_size_bytes": [512 * KB, 1 * MB, int(1.5 * MB), 2 * MB, int(2.5 * MB)],
        "mem_bandwidth_bytes_per_s": ladder})


def memory_latency_spec() -> SweepSpec:
    base = MachineConfig(l1_size=1 * MB)
    return SweepSpec(base, {
        "mem_bandwidth_bytes_per_s": [10 * GB_S, 50 * GB_S, 100 * GB_S],
        "l1_latency_ns": [10, 15, 20, 25, 30],
        "mem_latency_ns": [50, 70, 90, 110, 130, 150]})


def conversion_latency_spec() -> SweepSpec:
    base = MachineConfig(l1_latency=15)
    return SweepSpec(base, {
        "mem_bandwidth_bytes_per_s": [10 * GB_S, 50 * GB_S, 100 * GB_S],
        "mem_latency_ns": [50, 70, 90, 110, 130, 150],
        "l1_size_bytes": CACHE_SIZES,
        LATENCY_AXIS: [1, 10, 20, 30, 40, 50]})


PRESETS = {
    "cache-bandwidth": cache_bandwidth_spec,
    "bandwidth-ladder": bandwidth_ladder_spec,
    "memory-latency": memory_latency_spec,
    "conversion-latency": conversion_latency_spec,
}


def single_point(base: MachineConfig, **kw) -> SweepSpec:
    """Degenerate one-point grid at ``base`` (bandwidth axis of length 1)."""
    return SweepSpec(base, {"mem_bandwidth_bytes_per_s": [base.mem_bandwidth]}, **kw)


def iter_rows_by(rows: Iterable[SweepRow], **fixed) -> list[SweepRow]:
    return [r for r in rows if all(r.point.get(k) == v for k, v in fixed.items())]
