"""Virtual vector machine: functional, in-order, vector-length agnostic.

Executes the small instruction subset the GEMM kernels need and records
one :class:`TraceRecord` per committed vector instruction.  Scalar code
is not executed; each instruction carries a count of the scalar
instructions that would precede it, which lands in the trace.

Register file and memory are byte arrays with typed numpy views, so a
unit-stride load is a single slice copy.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Iterable, Iterator, NamedTuple, Sequence

import numpy as np

from cvsim.formats import bf16_to_f32

MNEMONICS = (
    "vsetvli",
    "vle16",
    "vle32",
    "vse16",
    "vse32",
    "vwmulu_sc",
    "vnsrl_imm",
    "vfmacc_sc",
    "vfmv_splat",
)
MNEMONIC_CODE = {m: i for i, m in enumerate(MNEMONICS)}
LOADS = ("vle16", "vle32")
STORES = ("vse16", "vse32")
MEMORY_OPS = LOADS + STORES
SUPPORTED_SEW = (8, 16, 32, 64)
NUM_VREGS = 32


def _F32_OF_BITS(bits: int) -> np.float32:
    return np.uint32(bits).view(np.float32)


class VvmFault(RuntimeError):
    """Execution fault, located at a program position."""

    def __init__(self, pc: int, cause: str):
        super().__init__(f"fault at instruction {pc}: {cause}")
        self.pc = pc
        self.cause = cause


@dataclass(frozen=True)
class MachineShape:
    vlen_bits: int = 16384
    num_vregs: int = NUM_VREGS

    def __post_init__(self):
        if self.vlen_bits <= 0 or self.vlen_bits % 64:
            raise ValueError(f"vlen_bits must be a positive multiple of 64, got {self.vlen_bits}")

    def vlmax(self, sew: int) -> int:
        return self.vlen_bits // sew


@dataclass(frozen=True)
class ScalarRef:
    """Scalar operand read from memory by the (unexecuted) scalar code.

    ``fmt`` is ``"f32"`` or ``"bf16_zeropad"`` / ``"bf16_replicate"``.
    """

    addr: int
    fmt: str = "f32"


@dataclass(frozen=True)
class Instr:
    op: str
    vd: int = -1
    vs: int = -1
    addr: int = 0
    imm: int = 0
    scalar: float | ScalarRef = 0.0
    scalar_ops: int = 0

    # constructors, named after the mnemonics
    @classmethod
    def vsetvli(cls, avl: int, sew: int, scalar_ops: int = 0) -> "Instr":
        return cls("vsetvli", addr=avl, imm=sew, scalar_ops=scalar_ops)

    @classmethod
    def vle(cls, width: int, vd: int, base: int, scalar_ops: int = 0) -> "Instr":
        return cls(f"vle{width}", vd=vd, addr=base, scalar_ops=scalar_ops)

    @classmethod
    def vse(cls, width: int, vs: int, base: int, scalar_ops: int = 0) -> "Instr":
        return cls(f"vse{width}", vs=vs, addr=base, scalar_ops=scalar_ops)

    @classmethod
    def vwmulu_sc(cls, vd: int, vs: int, scalar: int, scalar_ops: int = 0) -> "Instr":
        return cls("vwmulu_sc", vd=vd, vs=vs, imm=scalar, scalar_ops=scalar_ops)

    @classmethod
    def vnsrl_imm(cls, vd: int, vs: int, shamt: int, scalar_ops: int = 0) -> "Instr":
        return cls("vnsrl_imm", vd=vd, vs=vs, imm=shamt, scalar_ops=scalar_ops)

    @classmethod
    def vfmacc_sc(cls, vd: int, scalar, vs: int, scalar_ops: int = 0) -> "Instr":
        return cls("vfmacc_sc", vd=vd, vs=vs, scalar=scalar, scalar_ops=scalar_ops)

    @classmethod
    def vfmv_splat(cls, vd: int, scalar, scalar_ops: int = 0) -> "Instr":
        return cls("vfmv_splat", vd=vd, scalar=scalar, scalar_ops=scalar_ops)


class TraceRecord(NamedTuple):
    seq: int
    mnemonic: str
    sew: int
    vl: int
    bytes_moved: int
    base: int
    dst: int
    src1: int
    src2: int
    scalar_ops: int

    @property
    def stride(self) -> int:
        """Unit stride in bytes for memory ops, 0 otherwise."""
        return self.sew // 8 if self.mnemonic in MEMORY_OPS else 0

    @property
    def regs(self) -> str:
        parts = []
        if self.dst >= 0:
            parts.append(f"d{self.dst}")
        parts += [f"s{r}" for r in (self.src1, self.src2) if r >= 0]
        return " ".join(parts)


_COLUMNS = ("seq,mnemonic,sew,vl,bytes,base,regs,scalar_ops")


class Trace:
    """Immutable committed-instruction log in columnar form."""

    def __init__(self, vlen_bits: int, columns: dict[str, np.ndarray]):
        self.vlen_bits = vlen_bits
        self._cols = columns
        for arr in columns.values():
            arr.setflags(write=False)
        self._derived: dict = {}

    @classmethod
    def from_rows(cls, vlen_bits: int, rows: Sequence[tuple]) -> "Trace":
        """rows: (code, sew, vl, bytes, base, dst, src1, src2, scalar_ops)."""
        if rows:
            a = np.array(rows, dtype=np.int64).reshape(-1, 9)
        else:
            a = np.zeros((0, 9), dtype=np.int64)
        cols = {
            "code": a[:, 0].astype(np.int8),
            "sew": a[:, 1].astype(np.int16),
            "vl": a[:, 2].astype(np.int32),
            "bytes": a[:, 3].astype(np.int64),
            "base": a[:, 4].astype(np.int64),
            "dst": a[:, 5].astype(np.int8),
            "src1": a[:, 6].astype(np.int8),
            "src2": a[:, 7].astype(np.int8),
            "scalar_ops": a[:, 8].astype(np.int32),
        }
        return cls(vlen_bits, cols)

    @classmethod
    def from_records(cls, vlen_bits: int, records: Iterable[TraceRecord]) -> "Trace":
        rows = []
        for r in records:
            if r.mnemonic not in MNEMONIC_CODE:
                raise ValueError(f"unknown mnemonic {r.mnemonic!r}")
            rows.append((MNEMONIC_CODE[r.mnemonic], r.sew, r.vl, r.bytes_moved,
                         r.base, r.dst, r.src1, r.src2, r.scalar_ops))
        return cls.from_rows(vlen_bits, rows)

    def column(self, name: str) -> np.ndarray:
        return self._cols[name]

    def __len__(self) -> int:
        return len(self._cols["code"])

    def __iter__(self) -> Iterator[TraceRecord]:
        c = self._cols
        for i in range(len(self)):
            yield TraceRecord(i, MNEMONICS[c["code"][i]], int(c["sew"][i]), int(c["vl"][i]),
                              int(c["bytes"][i]), int(c["base"][i]), int(c["dst"][i]),
                              int(c["src1"][i]), int(c["src2"][i]),
                              int(c["scalar_ops"][i]))

    def __getitem__(self, i: int) -> TraceRecord:
        if i < 0:
            i += len(self)
        c = self._cols
        return TraceRecord(i, MNEMONICS[c["code"][i]], int(c["sew"][i]), int(c["vl"][i]),
                           int(c["bytes"][i]), int(c["base"][i]), int(c["dst"][i]),
                           int(c["src1"][i]), int(c["src2"][i]), int(c["scalar_ops"][i]))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Trace):
            return NotImplemented
        return (self.vlen_bits == other.vlen_bits
                and all(np.array_equal(self._cols[k], other._cols[k]) for k in self._cols))

    def mnemonics(self) -> list[str]:
        return [MNEMONICS[c] for c in self._cols["code"]]

    def cached(self, key, build):
        """Memoize a value derived from this (immutable) trace."""
        if key not in self._derived:
            self._derived[key] = build()
        return self._derived[key]

    # ── file format ─────────────────────────────────────────────────────

    def write_csv(self, f) -> None:
        f.write(f"# vlen_bits={self.vlen_bits}\n")
        f.write(_COLUMNS + "\n")
        for r in self:
            f.write(f"{r.seq},{r.mnemonic},{r.sew},{r.vl},{r.bytes_moved},"
                    f"{r.base},{r.regs},{r.scalar_ops}\n")

    def to_csv(self) -> str:
        buf = io.StringIO()
        self.write_csv(buf)
        return buf.getvalue()

    @classmethod
    def read_csv(cls, f) -> "Trace":
        lines = iter(enumerate(f, start=1))
        try:
            lineno, head = next(lines)
        except StopIteration:
            raise ValueError("line 1: empty trace file") from None
        head = head.strip()
        if not head.startswith("# vlen_bits="):
            raise ValueError(f"line {lineno}: expected '# vlen_bits=<n>' header")
        vlen = int(head.split("=", 1)[1])
        lineno, cols = next(lines, (2, ""))
        if cols.strip() != _COLUMNS:
            raise ValueError(f"line {lineno}: expected column header {_COLUMNS!r}")
        rows = []
        for lineno, line in lines:
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 8:
                raise ValueError(f"line {lineno}: expected 8 fields, got {len(parts)}")
            _, mnem, sew, vl, nbytes, base, regs, sops = parts
            if mnem not in MNEMONIC_CODE:
                raise ValueError(f"line {lineno}: unknown mnemonic {mnem!r}")
            dst, srcs = -1, []
            for tok in regs.split():
                if tok[0] == "d":
                    dst = int(tok[1:])
                elif tok[0] == "s":
                    srcs.append(int(tok[1:]))
                else:
                    raise ValueError(f"line {lineno}: bad register token {tok!r}")
            if len(srcs) > 2:
                raise ValueError(f"line {lineno}: at most two source registers")
            srcs += [-1] * (2 - len(srcs))
            try:
                rows.append((MNEMONIC_CODE[mnem], int(sew), int(vl), int(nbytes), int(base),
                             dst, srcs[0], srcs[1], int(sops)))
            except ValueError as exc:
                raise ValueError(f"line {lineno}: {exc}") from None
        return cls.from_rows(vlen, rows)


class VvmState:
    """Vector register file, vl/sew, and a flat little-endian memory."""

    def __init__(self, shape: MachineShape, mem_bytes: int):
        self.shape = shape
        vbytes = shape.vlen_bits // 8
        self.vregs = np.zeros((shape.num_vregs, vbytes), dtype=np.uint8)
        self.v16 = self.vregs.view(np.uint16)
        self.v32 = self.vregs.view(np.uint32)
        self.vf32 = self.vregs.view(np.float32)
        self.mem = np.zeros(mem_bytes, dtype=np.uint8)
        self.mem16 = self.mem[: mem_bytes // 2 * 2].view(np.uint16)
        self.mem32 = self.mem[: mem_bytes // 4 * 4].view(np.uint32)
        self.vl = 0
        self.sew = 32

    def write(self, addr: int, data: np.ndarray) -> None:
        raw = np.ascontiguousarray(data).view(np.uint8).ravel()
        self.mem[addr:addr + raw.size] = raw

    def read(self, addr: int, count: int, dtype) -> np.ndarray:
        n = np.dtype(dtype).itemsize * count
        return self.mem[addr:addr + n].view(dtype).copy()

    def snapshot(self) -> tuple[bytes, bytes, int, int]:
        return self.vregs.tobytes(), self.mem.tobytes(), self.vl, self.sew


def _read_scalar(state: VvmState, ref, pc: int) -> np.float32:
    if not isinstance(ref, ScalarRef):
        return np.float32(ref)
    addr, fmt = ref.addr, ref.fmt
    width = 4 if fmt == "f32" else 2
    if addr < 0 or addr + width > len(state.mem) or addr % width:
        raise VvmFault(pc, f"scalar access at {addr:#x} out of bounds or misaligned")
    if fmt == "f32":
        return state.mem32[addr >> 2].view(np.float32)
    h = int(state.mem16[addr >> 1])
    if fmt == "bf16_zeropad":
        bits = h << 16
    elif fmt == "bf16_replicate":
        bits = bf16_to_f32(h, "replicate")
    else:
        raise VvmFault(pc, f"unknown scalar format {fmt!r}")
    return _F32_OF_BITS(bits)


def execute(program: Sequence[Instr], state: VvmState, *, record: bool = True,
            ) -> tuple[VvmState, Trace | None]:
    """Run ``program`` on ``state`` in order; return the state and its trace.

    With ``record=False`` no trace is collected (used by oracle checks).
    """
    vlen = state.shape.vlen_bits
    rows: list[tuple] = []
    with np.errstate(all="ignore"):
        _run(program, state, record, rows)
    trace = Trace.from_rows(vlen, rows) if record else None
    return state, trace


def _run(program, state, record, rows):
    shape = state.shape
    vlen = shape.vlen_bits
    nregs = shape.num_vregs
    nmem = len(state.mem)
    mem16, mem32 = state.mem16, state.mem32
    v16, v32, vf32 = state.v16, state.v32, state.vf32
    append = rows.append
    codes = MNEMONIC_CODE

    def reg(pc, r):
        if not 0 <= r < nregs:
            raise VvmFault(pc, f"register v{r} out of range")
        return r

    def span(pc, base, width, vl):
        nbytes = vl * width // 8
        if base % (width // 8):
            raise VvmFault(pc, f"misaligned {width}-bit access at {base:#x}")
        if base < 0 or base + nbytes > nmem:
            raise VvmFault(pc, f"access [{base:#x}, {base + nbytes:#x}) outside memory of {nmem} bytes")
        return nbytes

    for pc, ins in enumerate(program):
        op = ins.op
        vl = state.vl
        if op == "vfmacc_sc":
            if state.sew != 32:
                raise VvmFault(pc, "vfmacc_sc needs sew=32")
            d, s = reg(pc, ins.vd), reg(pc, ins.vs)
            a = _read_scalar(state, ins.scalar, pc)
            acc = vf32[d, :vl]
            acc += a * vf32[s, :vl]
            if record:
                append((codes[op], 32, vl, 0, 0, d, d, s, ins.scalar_ops))
        elif op == "vle16" or op == "vle32":
            width = 16 if op == "vle16" else 32
            d = reg(pc, ins.vd)
            nbytes = span(pc, ins.addr, width, vl)
            if width == 16:
                v16[d, :vl] = mem16[ins.addr // 2: ins.addr // 2 + vl]
            else:
                v32[d, :vl] = mem32[ins.addr // 4: ins.addr // 4 + vl]
            if record:
                append((codes[op], width, vl, nbytes, ins.addr, d, -1, -1, ins.scalar_ops))
        elif op == "vse16" or op == "vse32":
            width = 16 if op == "vse16" else 32
            s = reg(pc, ins.vs)
            nbytes = span(pc, ins.addr, width, vl)
            if width == 16:
                mem16[ins.addr // 2: ins.addr // 2 + vl] = v16[s, :vl]
            else:
                mem32[ins.addr // 4: ins.addr // 4 + vl] = v32[s, :vl]
            if record:
                append((codes[op], width, vl, nbytes, ins.addr, -1, s, -1, ins.scalar_ops))
        elif op == "vsetvli":
            sew = ins.imm
            if sew not in SUPPORTED_SEW:
                raise VvmFault(pc, f"unsupported sew {sew}")
            if ins.addr < 0:
                raise VvmFault(pc, "negative avl")
            state.sew = sew
            state.vl = vl = min(ins.addr, vlen // sew)
            if record:
                append((codes[op], sew, vl, 0, 0, -1, -1, -1, ins.scalar_ops))
        elif op == "vwmulu_sc":
            if state.sew != 16:
                raise VvmFault(pc, "vwmulu_sc needs sew=16")
            if vl * 32 > vlen:
                raise VvmFault(pc, f"widened vl={vl} does not fit one register")
            d, s = reg(pc, ins.vd), reg(pc, ins.vs)
            mult = ins.imm & 0xFFFFFFFF
            # zero-extend, multiply, keep the low 32 bits
            v32[d, :vl] = (v16[s, :vl].astype(np.uint64) * np.uint64(mult)).astype(np.uint32)
            if record:
                append((codes[op], 16, vl, 0, 0, d, s, -1, ins.scalar_ops))
        elif op == "vnsrl_imm":
            if state.sew != 16:
                raise VvmFault(pc, "vnsrl_imm needs sew=16")
            if vl * 32 > vlen:
                raise VvmFault(pc, f"narrowing source vl={vl} does not fit one register")
            if not 0 <= ins.imm < 32:
                raise VvmFault(pc, f"shift amount {ins.imm} out of range")
            d, s = reg(pc, ins.vd), reg(pc, ins.vs)
            v16[d, :vl] = (v32[s, :vl] >> np.uint32(ins.imm)).astype(np.uint16)
            if record:
                append((codes[op], 16, vl, 0, 0, d, s, -1, ins.scalar_ops))
        elif op == "vfmv_splat":
            if state.sew != 32:
                raise VvmFault(pc, "vfmv_splat needs sew=32")
            d = reg(pc, ins.vd)
            vf32[d, :vl] = _read_scalar(state, ins.scalar, pc)
            if record:
                append((codes[op], 32, vl, 0, 0, d, -1, -1, ins.scalar_ops))
        else:
            raise VvmFault(pc, f"unknown instruction {op!r}")
