"""Trace-driven timing model.

Model, per trace record in program order:

* dispatch: in order, as soon as a ROB slot is free (the record
  ``rob_entries`` earlier has committed).  Dispatch width is unbounded.
* ready: dispatch time, or later if a source register's last writer has
  not completed (true dependences only; destinations are renamed).
* execute:
    - arithmetic / vsetvli: ``instr_latency[mnemonic]`` cycles;
    - memory op whose lines all hit L1: ``l1_latency``;
    - memory op with missed lines: ``mem_latency`` then a transfer of the
      missed bytes over a single memory channel shared by all accesses
      (``ceil(missed_bytes / bandwidth)`` cycles, FIFO in program order).
* commit: in order, at ``max(complete, previous commit)``.

L1 is fully associative LRU over ``l1_line`` blocks; loads and stores
both allocate.  Hit/miss is decided by LRU stack distance, which depends
only on the trace and the line size, so it is computed once per trace.

Nanosecond parameters become cycles by ``ceil(ns * clock)``.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping

import numba
import numpy as np

from cvsim.vvm import MNEMONIC_CODE, MNEMONICS, Trace

ARITH = ("vsetvli", "vwmulu_sc", "vnsrl_imm", "vfmacc_sc", "vfmv_splat")
COMPRESSION_OPS = ("vnsrl_imm", "vwmulu_sc")
PHASES = ("t_load", "t_cload", "t_unpack", "t_pack", "t_store", "t_cstore", "t_proc")

_PHASE_OF = {
    "vle32": "t_load",
    "vle16": "t_cload",
    "vwmulu_sc": "t_unpack",
    "vnsrl_imm": "t_pack",
    "vse32": "t_store",
    "vse16": "t_cstore",
    "vsetvli": "t_proc",
    "vfmacc_sc": "t_proc",
    "vfmv_splat": "t_proc",
}
_PHASE_CODE = np.array([PHASES.index(_PHASE_OF[m]) for m in MNEMONICS], dtype=np.int64)
_KIND = np.array([1 if m.startswith("vl") else 2 if m.startswith("vs") and m != "vsetvli"
                  else 0 for m in MNEMONICS], dtype=np.int64)

KB = 1024
MB = 1024 * KB
GB_S = 10**9


def default_latencies() -> dict[str, int]:
    return {m: 1 for m in ARITH}


@dataclass(frozen=True)
class MachineConfig:
    l1_size: int = 512 * KB          # bytes
    l1_line: int = 64                # bytes
    l1_latency: float = 20.0         # ns
    mem_latency: float = 60.0        # ns
    mem_bandwidth: float = 10 * GB_S  # bytes/s
    instr_latency: Mapping[str, int] = field(default_factory=default_latencies)  # cycles
    rob_entries: int = 128
    clock: float = 1e9               # cycles/s

    def __post_init__(self):
        object.__setattr__(self, "instr_latency", dict(self.instr_latency))
        self.validate()

    def validate(self) -> None:
        for name in ("l1_size", "l1_line", "l1_latency", "mem_latency", "mem_bandwidth",
                     "rob_entries", "clock"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.l1_size % self.l1_line:
            raise ValueError("l1_size must be a multiple of l1_line")
        if int(self.rob_entries) != self.rob_entries:
            raise ValueError("rob_entries must be an integer")
        missing = [m for m in ARITH if m not in self.instr_latency]
        if missing:
            raise ValueError(f"instr_latency missing {', '.join(missing)}")
        unknown = [m for m in self.instr_latency if m not in ARITH]
        if unknown:
            raise ValueError(f"instr_latency has unknown mnemonics {', '.join(unknown)}")
        for m, v in self.instr_latency.items():
            if int(v) != v or v < 1:
                raise ValueError(f"instr_latency[{m}] must be a positive integer")

    def replace(self, **changes) -> "MachineConfig":
        return dataclasses.replace(self, **changes)

    def with_compression_latency(self, cycles: int) -> "MachineConfig":
        lat = dict(self.instr_latency)
        for m in COMPRESSION_OPS:
            lat[m] = int(cycles)
        return self.replace(instr_latency=lat)

    def ns_to_cycles(self, ns: float) -> int:
        return math.ceil(Fraction(str(ns)) * Fraction(str(self.clock)) / 10**9)

    # ── flat key = value file ───────────────────────────────────────────

    _KEYS = {
        "l1_size_bytes": "l1_size",
        "l1_line_bytes": "l1_line",
        "l1_latency_ns": "l1_latency",
        "mem_latency_ns": "mem_latency",
        "mem_bandwidth_bytes_per_s": "mem_bandwidth",
        "rob_entries": "rob_entries",
        "clock_hz": "clock",
    }
    _INT_FIELDS = ("l1_size", "l1_line", "rob_entries")

    def to_text(self) -> str:
        lines = []
        for key, attr in self._KEYS.items():
            lines.append(f"{key} = {_fmt(getattr(self, attr))}")
        for m in ARITH:
            lines.append(f"instr_latency_cycles.{m} = {self.instr_latency[m]}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, base: "MachineConfig | None" = None) -> "MachineConfig":
        """Parse ``key = value`` lines; unset keys come from ``base``."""
        base = base or cls()
        values = {attr: getattr(base, attr) for attr in cls._KEYS.values()}
        lat = dict(base.instr_latency)
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            try:
                if key in cls._KEYS:
                    attr = cls._KEYS[key]
                    values[attr] = _int_or_float(val, attr in cls._INT_FIELDS)
                elif key.startswith("instr_latency_cycles."):
                    lat[key.split(".", 1)[1]] = _int_or_float(val, True)
                else:
                    raise ValueError(f"unknown key {key!r}")
            except ValueError as exc:
                raise ValueError(f"line {lineno}: {exc}") from None
        return cls(instr_latency=lat, **values)


def _int_or_float(text: str, want_int: bool):
    v = float(text)
    if want_int:
        if v != int(v):
            raise ValueError(f"expected an integer, got {text!r}")
        return int(v)
    return v


def _fmt(v) -> str:
    if isinstance(v, float) and v == int(v):
        return str(int(v))
    return str(v)


@dataclass
class TimingReport:
    total_cycles: int
    per_mnemonic: dict[str, int]
    l1_hits: int
    l1_misses: int
    phases: dict[str, int]
    serialized_cycles: int
    n_records: int

    def __getattr__(self, name):
        # t_load, t_cload, ... read straight from the phase table
        if name.startswith("t_") and name in PHASES:
            return self.phases[name]
        raise AttributeError(name)

    def to_csv(self) -> str:
        rows = [("total_cycles", self.total_cycles),
                ("serialized_cycles", self.serialized_cycles),
                ("records", self.n_records),
                ("l1_hits", self.l1_hits),
                ("l1_misses", self.l1_misses)]
        rows += [(p, self.phases[p]) for p in PHASES]
        rows += [(f"cycles.{m}", c) for m, c in self.per_mnemonic.items()]
        return "metric,value\n" + "".join(f"{k},{v}\n" for k, v in rows)

    def summary(self) -> str:
        lines = [f"total cycles        {self.total_cycles}",
                 f"serialized sum      {self.serialized_cycles}",
                 f"records             {self.n_records}",
                 f"L1 hits / misses    {self.l1_hits} / {self.l1_misses}"]
        lines += [f"{p:<19} {self.phases[p]}" for p in PHASES]
        return "\n".join(lines)


@dataclass(frozen=True)
class ImprovementResult:
    cycles_c: int
    cycles_u: int

    @property
    def improvement(self) -> float:
        return improvement_pct(self.cycles_c, self.cycles_u)


def improvement_pct(cycles_c: float, cycles_u: float) -> float:
    """100 * (1 - cycles_c / cycles_u)."""
    if cycles_u == 0:
        raise ZeroDivisionError("uncompressed cycle count is zero")
    return 100.0 * (1.0 - cycles_c / cycles_u)


# ── cache model ─────────────────────────────────────────────────────────


@numba.njit(cache=True, nogil=True)
def _stack_distances(lines, n_lines_total):
    """LRU stack distance of each access (-1 for a first touch)."""
    n = lines.shape[0]
    tree = np.zeros(n + 1, dtype=np.int32)       # Fenwick over access times
    last = np.full(n_lines_total, -1, dtype=np.int64)
    out = np.empty(n, dtype=np.int64)
    for t in range(n):
        ln = lines[t]
        prev = last[ln]
        if prev < 0:
            out[t] = -1
        else:
            # markers strictly after prev = distinct lines touched since
            s_t = 0
            i = t
            while i > 0:
                s_t += tree[i]
                i -= i & -i
            s_p = 0
            i = prev + 1
            while i > 0:
                s_p += tree[i]
                i -= i & -i
            out[t] = s_t - s_p
            i = prev + 1
            while i <= n:
                tree[i] -= 1
                i += i & -i
        i = t + 1
        while i <= n:
            tree[i] += 1
            i += i & -i
        last[ln] = t
    return out


@dataclass
class _LineAccesses:
    record: np.ndarray     # owning trace record of each line access
    nbytes: np.ndarray     # bytes of the record inside that line
    distance: np.ndarray   # LRU stack distance, -1 = cold


def line_accesses(trace: Trace, line: int) -> _LineAccesses:
    def build():
        code = trace.column("code")
        mem = np.flatnonzero(_KIND[code] > 0)
        base = trace.column("base")[mem]
        nbytes = trace.column("bytes")[mem]
        keep = nbytes > 0
        mem, base, nbytes = mem[keep], base[keep], nbytes[keep]
        first = base // line
        last = (base + nbytes - 1) // line
        count = last - first + 1
        rec = np.repeat(mem, count)
        offs = np.arange(count.sum()) - np.repeat(np.cumsum(count) - count, count)
        ln = np.repeat(first, count) + offs
        lo = np.maximum(ln * line, np.repeat(base, count))
        hi = np.minimum((ln + 1) * line, np.repeat(base + nbytes, count))
        uniq, dense = np.unique(ln, return_inverse=True)
        dist = _stack_distances(dense.astype(np.int64), max(len(uniq), 1))
        return _LineAccesses(rec, hi - lo, dist)
    return trace.cached(("lines", line), build)


def missed_bytes(trace: Trace, config: MachineConfig) -> np.ndarray:
    """Bytes of each record that miss in L1 under ``config``."""
    capacity = config.l1_size // config.l1_line

    def build():
        acc = line_accesses(trace, config.l1_line)
        miss = (acc.distance < 0) | (acc.distance >= capacity)
        out = np.bincount(acc.record, weights=acc.nbytes * miss,
                          minlength=len(trace)).astype(np.int64)
        out.setflags(write=False)
        return out
    return trace.cached(("missed", config.l1_line, capacity), build)


# ── pipeline ────────────────────────────────────────────────────────────


@numba.njit(cache=True, nogil=True)
def _schedule(kind, arith_lat, miss_b, xfer, dst, src1, src2, rob, l1_cyc, mem_cyc, nregs):
    n = kind.shape[0]
    reg_ready = np.zeros(nregs, dtype=np.int64)
    commit = np.zeros(n, dtype=np.int64)
    occ = np.zeros(n, dtype=np.int64)
    dispatch = 0
    prev_commit = 0
    bus_free = 0
    for i in range(n):
        if i >= rob and commit[i - rob] > dispatch:
            dispatch = commit[i - rob]
        ready = dispatch
        if src1[i] >= 0 and reg_ready[src1[i]] > ready:
            ready = reg_ready[src1[i]]
        if src2[i] >= 0 and reg_ready[src2[i]] > ready:
            ready = reg_ready[src2[i]]
        if kind[i] == 0:
            done = ready + arith_lat[i]
        elif miss_b[i] == 0:
            done = ready + l1_cyc
        else:
            start = ready + mem_cyc
            if bus_free > start:
                start = bus_free
            done = start + xfer[i]
            bus_free = done
        if dst[i] >= 0:
            reg_ready[dst[i]] = done
        occ[i] = done - ready
        if done > prev_commit:
            prev_commit = done
        commit[i] = prev_commit
    return prev_commit, occ


def _static_columns(trace: Trace):
    def build():
        code = trace.column("code").astype(np.int64)
        return (code, _KIND[code], trace.column("dst").astype(np.int64),
                trace.column("src1").astype(np.int64), trace.column("src2").astype(np.int64))
    return trace.cached("static", build)


def _record_costs(trace: Trace, config: MachineConfig):
    code, kind = _static_columns(trace)[:2]
    lat_table = np.array([config.instr_latency.get(m, 0) for m in MNEMONICS], dtype=np.int64)
    arith_lat = lat_table[code]
    miss_b = missed_bytes(trace, config)
    # exact ceil(bytes * clock / bandwidth); both factors are far below 2**53
    xfer = np.ceil(miss_b.astype(np.float64) * float(config.clock)
                   / float(config.mem_bandwidth)).astype(np.int64)
    return code, kind, arith_lat, miss_b, xfer


def simulate(trace: Trace, config: MachineConfig) -> TimingReport:
    config.validate()
    code, kind, arith_lat, miss_b, xfer = _record_costs(trace, config)
    used = set(np.unique(code[kind == 0]).tolist())
    for c in used:
        if MNEMONICS[c] not in config.instr_latency:
            raise ValueError(f"no latency configured for {MNEMONICS[c]}")
    l1_cyc = config.ns_to_cycles(config.l1_latency)
    mem_cyc = config.ns_to_cycles(config.mem_latency)
    nregs = 64
    dst, src1, src2 = _static_columns(trace)[2:]
    total, occ = _schedule(kind, arith_lat, miss_b, xfer, dst, src1, src2,
                           int(config.rob_entries), l1_cyc, mem_cyc, nregs)
    serial = np.where(kind == 0, arith_lat,
                      np.where(miss_b == 0, l1_cyc, mem_cyc + xfer))
    per_m = np.bincount(code, weights=occ, minlength=len(MNEMONICS))
    phase = np.bincount(_PHASE_CODE[code], weights=occ, minlength=len(PHASES))
    is_mem = kind > 0
    misses = int(np.count_nonzero(is_mem & (miss_b > 0)))
    return TimingReport(
        total_cycles=int(total),
        per_mnemonic={MNEMONICS[i]: int(v) for i, v in enumerate(per_m) if v},
        l1_hits=int(np.count_nonzero(is_mem)) - misses,
        l1_misses=misses,
        phases={p: int(v) for p, v in zip(PHASES, phase)},
        serialized_cycles=int(serial.sum()),
        n_records=len(trace),
    )


def improvement(trace_c: Trace, trace_u: Trace, config: MachineConfig) -> ImprovementResult:
    if trace_c.vlen_bits != trace_u.vlen_bits:
        raise ValueError("traces come from different vector lengths")
    cu = simulate(trace_u, config).total_cycles
    if cu == 0:
        raise ZeroDivisionError("uncompressed cycle count is zero")
    cc = simulate(trace_c, config).total_cycles
    return ImprovementResult(cc, cu)


@dataclass(frozen=True)
class InequalityCheck:
    load_side: bool
    store_side: bool
    components: dict[str, int]


def check_inequalities(report_c: TimingReport, report_u: TimingReport) -> InequalityCheck:
    """t_cload + t_unpack < t_load and t_pack + t_cstore < t_store."""
    comp = {
        "t_cload": report_c.phases["t_cload"],
        "t_unpack": report_c.phases["t_unpack"],
        "t_load": report_u.phases["t_load"],
        "t_pack": report_c.phases["t_pack"],
        "t_cstore": report_c.phases["t_cstore"],
        "t_store": report_u.phases["t_store"],
    }
    return InequalityCheck(
        load_side=comp["t_cload"] + comp["t_unpack"] < comp["t_load"],
        store_side=comp["t_pack"] + comp["t_cstore"] < comp["t_store"],
        components=comp,
    )
