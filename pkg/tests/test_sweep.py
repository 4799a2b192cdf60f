from __future__ import annotations

import dataclasses

import pytest

from cvsim import sweep, timing
from cvsim.sweep import LATENCY_AXIS, SweepRow, SweepSpec, TraceStore
from cvsim.timing import GB_S, KB, MachineConfig

SMALL = dict(n=32, vlen_bits=4096)


def small(spec: SweepSpec) -> SweepSpec:
    return dataclasses.replace(spec, **SMALL)


@pytest.fixture(scope="module")
def store():
    return TraceStore()


def test_cache_bandwidth_grid_has_six_rows(store):
    rows = sweep.run_sweep(small(sweep.cache_bandwidth_spec()), store)
    assert len(rows) == 6
    assert [tuple(r.point.values()) for r in rows] == [
        (s, bw) for s in sweep.CACHE_SIZES for bw in (1 * GB_S, 100 * GB_S)]


def test_conversion_latency_grid_has_324_rows(store):
    spec = small(sweep.conversion_latency_spec())
    assert spec.size == 324
    rows = sweep.run_sweep(spec, store)
    assert len(rows) == 324
    assert {r.config.l1_latency for r in rows} == {15}


def test_preset_sizes():
    assert sweep.bandwidth_ladder_spec().size == 5 * 7
    assert sweep.memory_latency_spec().size == 3 * 5 * 6
    ladder = sweep.bandwidth_ladder_spec().axes["mem_bandwidth_bytes_per_s"]
    assert ladder[0] == 1 * GB_S and ladder[-1] == 100 * GB_S


def test_single_point_equals_direct_improvement(store):
    base = MachineConfig(l1_size=64 * KB, mem_bandwidth=5 * GB_S).with_compression_latency(7)
    (row,) = sweep.run_sweep(sweep.single_point(base, **SMALL), store)
    tc, tu = store.pair(32, 4096)
    direct = timing.improvement(tc, tu, base)
    assert (row.cycles_c, row.cycles_u) == (direct.cycles_c, direct.cycles_u)
    assert row.improvement == direct.improvement
    assert row.config == base


def test_improvement_column_is_exact(store):
    rows = sweep.run_sweep(small(sweep.cache_bandwidth_spec()), store)
    for r in rows:
        assert r.improvement == 100.0 * (1.0 - r.cycles_c / r.cycles_u)


def test_traces_built_once_per_mode():
    fresh = TraceStore()
    sweep.run_sweep(small(sweep.cache_bandwidth_spec()), fresh)
    sweep.run_sweep(small(sweep.memory_latency_spec()), fresh)
    assert fresh.builds == 2


def test_csv_is_byte_identical_across_runs_and_worker_counts():
    spec = small(sweep.cache_bandwidth_spec())
    a = sweep.rows_to_csv(sweep.run_sweep(spec, TraceStore(), workers=1))
    b = sweep.rows_to_csv(sweep.run_sweep(spec, TraceStore(), workers=8))
    assert a == b
    header = a.splitlines()[0].split(",")
    assert header[:2] == ["l1_size_bytes", "l1_line_bytes"]
    assert header[-5:] == ["cycles_c", "cycles_u", "improvement", "load_side", "store_side"]
    assert len(a.splitlines()) == 7


# ── spec validation and parsing ─────────────────────────────────────────


@pytest.mark.parametrize("axes, msg", [({}, "at least one"), ({"clock": [1]}, "unknown axis"),
                                       ({"l1_size_bytes": []}, "empty"),
                                       ({"mem_latency_ns": [0, 5]}, "non-positive")])
def test_invalid_specs(axes, msg):
    with pytest.raises(ValueError, match=msg):
        SweepSpec(axes=axes)


def test_cap_is_enforced():
    with pytest.raises(ValueError, match="cap"):
        SweepSpec(axes={"mem_latency_ns": list(range(1, 11)),
                        "l1_latency_ns": list(range(1, 11))}, cap=99)


def test_spec_from_text():
    spec = SweepSpec.from_text(
        "n = 16  # tiny\nvlen_bits = 4096\nbase.l1_size_bytes = 65536\n"
        "axis.mem_bandwidth_bytes_per_s = 1e9, 1e10\naxis.compression_latency_cycles = 1,5\n")
    assert spec.n == 16 and spec.base.l1_size == 65536
    assert spec.axes == {"mem_bandwidth_bytes_per_s": [10**9, 10**10],
                         LATENCY_AXIS: [1, 5]}
    cfg = spec.config_at({"mem_bandwidth_bytes_per_s": 10**9, LATENCY_AXIS: 5})
    assert cfg.instr_latency["vwmulu_sc"] == 5 and cfg.instr_latency["vnsrl_imm"] == 5
    assert cfg.instr_latency["vfmacc_sc"] == 1


@pytest.mark.parametrize("text, line", [("n = 4\nwhat\n", 2), ("n = 4\n\nspeed = 3\n", 3),
                                        ("axis.mem_latency_ns = a, b\n", 1)])
def test_spec_parse_errors_carry_line_numbers(text, line):
    with pytest.raises(ValueError, match=f"line {line}"):
        SweepSpec.from_text(text)


# ── ordering_check ──────────────────────────────────────────────────────


def fake_rows(improvements: dict[tuple, float], axes=("a", LATENCY_AXIS)):
    """Rows whose improvement is exactly the given percentage (cycles_u = 1000)."""
    rows = []
    for key, imp in improvements.items():
        cycles_c = round(1000 * (1 - imp / 100))
        rows.append(SweepRow(dict(zip(axes, key)), MachineConfig(), cycles_c, 1000, True, True))
    return rows


def test_ordering_on_cache_bandwidth_grid(store):
    rows = sweep.run_sweep(small(sweep.cache_bandwidth_spec()), store)
    assert sweep.ordering_check(rows, "mem_bandwidth_bytes_per_s", "decreasing")


def test_constant_rows_have_no_violations():
    rows = fake_rows({(a, lat): 10.0 for a in (1, 2) for lat in (1, 10, 20)})
    assert sweep.ordering_check(rows, LATENCY_AXIS).ok
    assert sweep.ordering_check(rows, "a", "increasing").ok
    assert not sweep.ordering_check(rows, LATENCY_AXIS, strict=True).ok


def test_violations_are_reported():
    rows = fake_rows({(1, 1): 50.0, (1, 10): 60.0, (1, 20): 10.0})
    result = sweep.ordering_check(rows, LATENCY_AXIS)
    assert not result and result.violations == [({"a": 1, LATENCY_AXIS: 1},
                                                  {"a": 1, LATENCY_AXIS: 10})]


def test_incomplete_grid_is_an_error():
    rows = fake_rows({(1, 1): 5.0, (1, 10): 4.0, (2, 1): 5.0})
    with pytest.raises(ValueError, match="incomplete"):
        sweep.ordering_check(rows, LATENCY_AXIS)
    with pytest.raises(ValueError, match="direction"):
        sweep.ordering_check(rows, LATENCY_AXIS, "sideways")


# ── posit what-if ───────────────────────────────────────────────────────


LATS = (1, 10, 20, 30, 40, 50)


def test_budget_between_sampled_latencies():
    rows = fake_rows(dict(zip([(0, lat) for lat in LATS], [40.0, 20.0, 5.0, -5.0, -20.0, -40.0])))
    (b,) = sweep.posit_whatif(rows, 25)
    assert b.budget == 20 and not b.lower_bound
    assert 20 <= b.crossing < 30 and b.crossing == pytest.approx(25.0)
    assert b.point == {"a": 0}
    assert b.posit_improvement == pytest.approx(0.0) and not b.viable


def test_budget_is_axis_max_when_always_positive():
    rows = fake_rows({(0, lat): 10.0 for lat in LATS})
    (b,) = sweep.posit_whatif(rows, 50)
    assert b.budget == 50 and b.lower_bound and b.crossing is None and b.viable


def test_budget_is_zero_when_never_positive():
    rows = fake_rows({(0, lat): -1.0 for lat in LATS})
    (b,) = sweep.posit_whatif(rows, 1)
    assert b.budget == 0 and not b.lower_bound and not b.viable


def test_posit_whatif_needs_latency_axis():
    rows = fake_rows({(1, 2): 1.0}, axes=("a", "b"))
    with pytest.raises(ValueError, match="axis"):
        sweep.posit_whatif(rows, 5)


def test_posit_whatif_on_real_sweep(store):
    spec = SweepSpec(MachineConfig(mem_bandwidth=10 * GB_S),
                     {"l1_size_bytes": [1 * KB, 2 * KB, 4 * KB], LATENCY_AXIS: list(LATS)},
                     **SMALL)
    rows = sweep.run_sweep(spec, store)
    budgets = sweep.posit_whatif(rows, 20)
    assert len(budgets) == 3
    for b in budgets:
        imps = [r.improvement for r in sweep.iter_rows_by(rows, **b.point)]
        first_bad = next((i for i, v in enumerate(imps) if v <= 0), None)
        want = LATS[-1] if first_bad is None else (LATS[first_bad - 1] if first_bad else 0)
        assert b.budget == want
        assert b.lower_bound == (first_bad is None)
        assert b.posit_improvement == imps[LATS.index(20)]
