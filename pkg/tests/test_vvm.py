from __future__ import annotations

import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cvsim.vvm import (
    Instr,
    MachineShape,
    ScalarRef,
    Trace,
    TraceRecord,
    VvmFault,
    VvmState,
    execute,
)


def machine(vlen=16384, mem=4096):
    return VvmState(MachineShape(vlen), mem)


def run(program, state=None):
    return execute(program, state or machine())


# ── vsetvli ─────────────────────────────────────────────────────────────


@pytest.mark.parametrize("vlen, sew, avl, vl", [(16384, 32, 10**6, 512), (16384, 16, 10**6, 1024),
                                                (4096, 32, 100, 100), (4096, 16, 0, 0)])
def test_vsetvli_examples(vlen, sew, avl, vl):
    state, trace = run([Instr.vsetvli(avl, sew)], machine(vlen))
    assert state.vl == vl and state.sew == sew
    assert trace[0].vl == vl


@settings(max_examples=200)
@given(st.sampled_from([64, 128, 4096, 16384]), st.sampled_from([8, 16, 32, 64]),
       st.integers(0, 10**6))
def test_vl_is_min_of_avl_and_vlmax(vlen, sew, avl):
    state, _ = run([Instr.vsetvli(avl, sew)], machine(vlen))
    assert state.vl == min(avl, vlen // sew)


def test_unsupported_sew_faults():
    with pytest.raises(VvmFault) as exc:
        run([Instr.vsetvli(4, 32), Instr.vsetvli(4, 12)])
    assert exc.value.pc == 1 and "sew" in exc.value.cause


# ── loads and stores ────────────────────────────────────────────────────


def test_vle16_copies_elements():
    state = machine()
    state.write(0, np.array([1, 2, 3, 4], dtype=np.uint16))
    state, trace = run([Instr.vsetvli(4, 16), Instr.vle(16, 3, 0)], state)
    assert list(state.v16[3, :4]) == [1, 2, 3, 4]
    assert trace[1].bytes_moved == 8 and trace[1].stride == 2


def test_vle32_vse32_roundtrip():
    state = machine(mem=8192)
    src = np.random.default_rng(0).integers(0, 2**32, 512, dtype=np.uint64).astype(np.uint32)
    state.write(0, src)
    state, _ = run([Instr.vsetvli(512, 32), Instr.vle(32, 1, 0), Instr.vse(32, 1, 4096)], state)
    assert np.array_equal(state.read(4096, 512, np.uint32), src)


def test_bytes_moved_is_vl_times_width():
    state, trace = run([Instr.vsetvli(10**6, 16), Instr.vle(16, 0, 0)], machine(mem=4096))
    assert trace[1].vl == 1024 and trace[1].bytes_moved == 2048
    state, trace = run([Instr.vsetvli(512, 16), Instr.vse(16, 0, 0)])
    assert trace[1].bytes_moved == 1024


@pytest.mark.parametrize("prog, where", [
    ([Instr.vsetvli(8, 32), Instr.vle(32, 0, 4096 - 16)], "outside"),
    ([Instr.vsetvli(8, 32), Instr.vse(32, 0, -4)], "outside"),
    ([Instr.vsetvli(8, 32), Instr.vle(32, 0, 2)], "misaligned"),
    ([Instr.vsetvli(8, 32), Instr.vle(32, 32, 0)], "register"),
    ([Instr.vsetvli(8, 32), Instr.vfmacc_sc(0, ScalarRef(4094), 1)], "scalar"),
])
def test_faults_are_located(prog, where):
    with pytest.raises(VvmFault) as exc:
        run(prog)
    assert exc.value.pc == 1
    assert where in exc.value.cause


# ── compression instructions ────────────────────────────────────────────


def _widen(values, scalar):
    state = machine()
    state.v16[2, :len(values)] = values
    state, _ = run([Instr.vsetvli(len(values), 16), Instr.vwmulu_sc(4, 2, scalar)], state)
    return list(state.v32[4, :len(values)])


def test_vwmulu_examples():
    assert _widen([0x4049], 65536) == [0x40490000]
    assert _widen([0x0000], 123457) == [0]
    assert _widen([0x0001], 65537) == [0x00010001]
    assert _widen([0xFFFF], 65537) == [0xFFFFFFFF]


def _narrow(values, shamt=16):
    state = machine()
    state.v32[6, :len(values)] = values
    state, _ = run([Instr.vsetvli(len(values), 16), Instr.vnsrl_imm(1, 6, shamt)], state)
    return list(state.v16[1, :len(values)])


def test_vnsrl_examples():
    assert _narrow([0x40490FDB]) == [0x4049]
    assert _narrow([0x0000FFFF]) == [0x0000]
    assert _narrow([0x12345678], 8) == [0x3456]


@settings(max_examples=100)
@given(st.lists(st.integers(0, 0xFFFF), min_size=1, max_size=512))
def test_narrow_undoes_widen(xs):
    state = machine()
    state.v16[2, :len(xs)] = xs
    prog = [Instr.vsetvli(len(xs), 16), Instr.vwmulu_sc(4, 2, 1 << 16), Instr.vnsrl_imm(8, 4, 16)]
    state, _ = run(prog, state)
    assert list(state.v16[8, :len(xs)]) == xs


def test_widening_needs_room_for_the_wide_result():
    with pytest.raises(VvmFault, match="fit"):
        run([Instr.vsetvli(1024, 16), Instr.vwmulu_sc(4, 2, 65536)])


def test_width_sensitive_ops_check_sew():
    with pytest.raises(VvmFault, match="sew=16"):
        run([Instr.vsetvli(4, 32), Instr.vwmulu_sc(4, 2, 65536)])
    with pytest.raises(VvmFault, match="sew=32"):
        run([Instr.vsetvli(4, 16), Instr.vfmacc_sc(0, 1.0, 1)])


# ── arithmetic ──────────────────────────────────────────────────────────


def test_vfmacc_example_and_zero_scalar():
    state = machine()
    state.vf32[1, :2] = [1.5, -1.0]
    state, _ = run([Instr.vsetvli(2, 32), Instr.vfmv_splat(0, 0.0),
                    Instr.vfmacc_sc(0, 2.0, 1)], state)
    assert list(state.vf32[0, :2]) == [3.0, -2.0]
    state, _ = run([Instr.vfmacc_sc(0, 0.0, 1)], state)
    assert list(state.vf32[0, :2]) == [3.0, -2.0]


def test_vfmacc_is_unfused():
    # a*b is rounded to binary32 before the add; a fused op would keep 2^-46
    a = np.float32(1 + 2.0**-23)
    state = machine()
    state.vf32[1, 0] = a
    state.vf32[0, 0] = np.float32(-1 - 2.0**-22)
    state, _ = run([Instr.vsetvli(1, 32), Instr.vfmacc_sc(0, float(a), 1)], state)
    assert state.vf32[0, 0] == np.float32(0.0)


def test_vfmacc_reads_bf16_scalars_from_memory():
    state = machine()
    state.write(8, np.array([0x4040], dtype=np.uint16))           # 3.0
    state.vf32[1, :2] = [1.0, 2.0]
    state, _ = run([Instr.vsetvli(2, 32), Instr.vfmv_splat(0, 0.0),
                    Instr.vfmacc_sc(0, ScalarRef(8, "bf16_zeropad"), 1)], state)
    assert list(state.vf32[0, :2]) == [3.0, 6.0]


def test_splat_respects_vl():
    state, _ = run([Instr.vsetvli(16, 32), Instr.vfmv_splat(5, 1.5),
                    Instr.vsetvli(4, 32), Instr.vfmv_splat(5, 0.0)])
    assert list(state.vf32[5, :16]) == [0.0] * 4 + [1.5] * 12


# ── execute and traces ──────────────────────────────────────────────────


def test_empty_and_single_programs():
    _, trace = run([])
    assert len(trace) == 0
    _, trace = run([Instr.vsetvli(3, 32)])
    assert len(trace) == 1 and trace[0] == TraceRecord(0, "vsetvli", 32, 3, 0, 0, -1, -1, -1, 0)


def test_trace_records_register_dependences():
    prog = [Instr.vsetvli(4, 32), Instr.vle(32, 1, 0), Instr.vfmacc_sc(0, 1.0, 1),
            Instr.vse(32, 0, 64)]
    _, trace = run(prog)
    assert [r.regs for r in trace] == ["", "d1", "d0 s0 s1", "s0"]


def _sample_program():
    return [Instr.vsetvli(8, 16), Instr.vle(16, 2, 0, scalar_ops=2),
            Instr.vwmulu_sc(4, 2, 65537), Instr.vsetvli(8, 32),
            Instr.vfmacc_sc(0, ScalarRef(64, "f32"), 4, scalar_ops=1),
            Instr.vsetvli(8, 16), Instr.vnsrl_imm(6, 0, 16), Instr.vse(16, 6, 128)]


def test_trace_csv_roundtrip():
    _, trace = run(_sample_program())
    text = trace.to_csv()
    assert text.splitlines()[0] == "# vlen_bits=16384"
    assert text.splitlines()[1] == "seq,mnemonic,sew,vl,bytes,base,regs,scalar_ops"
    again = Trace.read_csv(io.StringIO(text))
    assert again == trace and again.to_csv() == text


@pytest.mark.parametrize("text, line", [
    ("", 1),
    ("vlen=5\n", 1),
    ("# vlen_bits=64\nwrong\n", 2),
    ("# vlen_bits=64\nseq,mnemonic,sew,vl,bytes,base,regs,scalar_ops\n0,vadd,32,1,0,0,,0\n", 3),
    ("# vlen_bits=64\nseq,mnemonic,sew,vl,bytes,base,regs,scalar_ops\n"
     "0,vsetvli,32,1,0,0,,0\n1,vle32,32,x,4,0,d1,0\n", 4),
])
def test_trace_parse_errors_carry_line_numbers(text, line):
    with pytest.raises(ValueError, match=f"line {line}"):
        Trace.read_csv(io.StringIO(text))


def test_execution_is_deterministic():
    def once():
        state = machine()
        state.write(0, np.arange(64, dtype=np.uint16))
        state.write(64, np.array([1.25], dtype=np.float32))
        state, trace = run(_sample_program(), state)
        return state.snapshot(), trace.to_csv()

    assert once() == once()


def test_record_false_skips_trace():
    state, trace = execute([Instr.vsetvli(4, 32)], machine(), record=False)
    assert trace is None and state.vl == 4


def test_machine_shape_validation():
    with pytest.raises(ValueError):
        MachineShape(100)
    assert MachineShape(4096).vlmax(16) == 256
