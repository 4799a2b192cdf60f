"""GEMM programs for the vector machine, compressed and uncompressed.

Both kernels use the row-broadcast form: an output row strip is an
accumulator register, and every k adds ``A[i, k] * B[k, strip]`` to it.

Accumulation order (what the oracle reproduces bit for bit): each
``C[i, j]`` starts at +0.0 and accumulates ``c = fl(c + fl(A[i,k] * B[k,j]))``
in binary32, with k ascending on even rows and descending on odd rows.
The alternating direction re-touches the most recently loaded rows of B
first, which keeps an LRU cache warm across consecutive output rows.

The compressed kernel keeps A, B and C as bfloat16.  B rows are loaded
with ``vle16`` and widened in-register by ``vwmulu_sc``; the finished
row is narrowed by ``vnsrl_imm`` and stored with ``vse16``.
"""

from __future__ import annotations

import functools
import io
import struct
from collections import Counter
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from cvsim.formats import Fill, bf16_to_f32, f32_to_bf16_trunc
from cvsim.vvm import (
    MNEMONICS,
    Instr,
    MachineShape,
    ScalarRef,
    Trace,
    VvmState,
    execute,
)

Mode = Literal["compressed", "uncompressed"]

# register allocation
ACC = 0
VB16 = 8
VB32 = 16
VC16 = 24

_ALIGN = 64
UNPACK_MULT = {"zeropad": 1 << 16, "replicate": (1 << 16) + 1}


@dataclass(frozen=True)
class KernelSpec:
    n: int
    mode: Mode = "uncompressed"
    vlen_bits: int = 16384
    fill: Fill = "zeropad"

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"matrix size must be >= 1, got {self.n}")
        if self.mode not in ("compressed", "uncompressed"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.fill not in UNPACK_MULT:
            raise ValueError(f"unknown fill {self.fill!r}")
        MachineShape(self.vlen_bits)

    @property
    def width(self) -> int:
        """Storage width of matrix elements in bits."""
        return 16 if self.mode == "compressed" else 32


@dataclass
class Matrix:
    """Row-major matrix of raw bit patterns (uint32 for binary32, uint16 for bfloat16)."""

    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 2:
            raise ValueError("matrix storage must be 2-D")
        if self.data.dtype not in (np.uint16, np.uint32):
            raise ValueError(f"unsupported element type {self.data.dtype}")

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.dtype.itemsize * 8

    @classmethod
    def from_f32(cls, values) -> "Matrix":
        return cls(np.ascontiguousarray(np.asarray(values, dtype=np.float32)).view(np.uint32))

    @classmethod
    def from_bf16_values(cls, values) -> "Matrix":
        """Truncate binary32 values to bfloat16 storage."""
        bits = np.ascontiguousarray(np.asarray(values, dtype=np.float32)).view(np.uint32)
        return cls(f32_to_bf16_trunc(bits))

    def to_f32(self, fill: Fill = "zeropad") -> np.ndarray:
        """Values as binary32; bfloat16 storage is widened with ``fill``."""
        if self.width == 32:
            return self.data.view(np.float32).copy()
        return bf16_to_f32(self.data, fill).view(np.float32)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Matrix):
            return NotImplemented
        return self.data.dtype == other.data.dtype and np.array_equal(self.data, other.data)

    # ── I/O ─────────────────────────────────────────────────────────────

    MAGIC = b"CVMX"

    def to_bytes(self) -> bytes:
        head = self.MAGIC + struct.pack("<III", self.rows, self.cols, self.width)
        return head + self.data.astype(self.data.dtype.newbyteorder("<")).tobytes()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Matrix":
        if len(raw) < 16 or raw[:4] != cls.MAGIC:
            raise ValueError("not a matrix file (bad magic)")
        rows, cols, width = struct.unpack("<III", raw[4:16])
        dtype = {16: "<u2", 32: "<u4"}.get(width)
        if dtype is None:
            raise ValueError(f"unsupported element width {width}")
        body = np.frombuffer(raw, dtype=dtype, offset=16)
        if body.size != rows * cols:
            raise ValueError(f"expected {rows * cols} elements, found {body.size}")
        return cls(body.astype(np.uint16 if width == 16 else np.uint32).reshape(rows, cols))

    def to_csv(self) -> str:
        vals = self.to_f32()
        out = io.StringIO()
        out.write(f"# width={self.width}\n")
        for row in vals:
            out.write(",".join(repr(float(v)) for v in row) + "\n")
        return out.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "Matrix":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        width = 32
        if lines and lines[0].startswith("#"):
            width = int(lines.pop(0).split("=", 1)[1])
        vals = np.array([[float(x) for x in ln.split(",")] for ln in lines], dtype=np.float32)
        return cls.from_bf16_values(vals) if width == 16 else cls.from_f32(vals)


def identity(n: int, mode: Mode = "uncompressed") -> Matrix:
    eye = np.eye(n, dtype=np.float32)
    return Matrix.from_bf16_values(eye) if mode == "compressed" else Matrix.from_f32(eye)


def random_operands(n: int, seed: int, mode: Mode = "uncompressed", *,
                    bf16_exact: bool | None = None) -> tuple[Matrix, Matrix]:
    """Seeded uniform [-1, 1) operands.

    With ``bf16_exact`` (default: only in compressed mode) the binary32
    values are truncated to bfloat16 first, so both modes see the same
    real numbers.
    """
    if bf16_exact is None:
        bf16_exact = mode == "compressed"
    rng = np.random.default_rng(seed)
    a = rng.uniform(-1.0, 1.0, (n, n)).astype(np.float32)
    b = rng.uniform(-1.0, 1.0, (n, n)).astype(np.float32)
    if bf16_exact or mode == "compressed":
        a = Matrix.from_bf16_values(a).to_f32()
        b = Matrix.from_bf16_values(b).to_f32()
    if mode == "compressed":
        return Matrix.from_bf16_values(a), Matrix.from_bf16_values(b)
    return Matrix.from_f32(a), Matrix.from_f32(b)


def k_order(i: int, n: int) -> range:
    """Order in which row ``i`` visits k."""
    return range(n) if i % 2 == 0 else range(n - 1, -1, -1)


# ── program builders ────────────────────────────────────────────────────


def layout(spec: KernelSpec) -> tuple[int, int, int, int]:
    """Base addresses of A, B, C and the total memory size."""
    size = spec.n * spec.n * spec.width // 8
    stride = -(-size // _ALIGN) * _ALIGN
    return 0, stride, 2 * stride, 3 * stride


def unpack_tile(dst32: int, src16: int, fill: Fill = "zeropad") -> list[Instr]:
    """bfloat16 -> binary32 inside the register file."""
    return [Instr.vwmulu_sc(dst32, src16, UNPACK_MULT[fill])]


def pack_tile(dst16: int, src32: int) -> list[Instr]:
    """binary32 -> bfloat16 by dropping the low 16 bits."""
    return [Instr.vnsrl_imm(dst16, src32, 16)]


def _strips(spec: KernelSpec):
    vlmax = spec.vlen_bits // 32
    for j0 in range(0, spec.n, vlmax):
        yield j0, min(vlmax, spec.n - j0)


@functools.lru_cache(maxsize=32)
def build_program(spec: KernelSpec) -> tuple[Instr, ...]:
    """The GEMM program for ``spec``; independent of the operand values.

    Scalar-op annotations count the scalar instructions a compiler would
    emit in front of each vector instruction (pointer bumps, loop branch,
    the A[i, k] scalar load and, for bfloat16, its widening shift).
    """
    n = spec.n
    a0, b0, c0, _ = layout(spec)
    prog: list[Instr] = []
    if spec.mode == "uncompressed":
        for i in range(n):
            for j0, vl in _strips(spec):
                prog.append(Instr.vsetvli(n - j0, 32, scalar_ops=3))
                prog.append(Instr.vfmv_splat(ACC, 0.0))
                for k in k_order(i, n):
                    prog.append(Instr.vle(32, VB32, b0 + 4 * (k * n + j0), scalar_ops=2))
                    prog.append(Instr.vfmacc_sc(ACC, ScalarRef(a0 + 4 * (i * n + k), "f32"),
                                                VB32, scalar_ops=1))
                prog.append(Instr.vse(32, ACC, c0 + 4 * (i * n + j0), scalar_ops=1))
        return tuple(prog)

    afmt = f"bf16_{spec.fill}"
    for i in range(n):
        for j0, vl in _strips(spec):
            prog.append(Instr.vsetvli(n - j0, 32, scalar_ops=3))
            prog.append(Instr.vfmv_splat(ACC, 0.0))
            for k in k_order(i, n):
                prog.append(Instr.vsetvli(vl, 16, scalar_ops=2))
                prog.append(Instr.vle(16, VB16, b0 + 2 * (k * n + j0)))
                prog += unpack_tile(VB32, VB16, spec.fill)
                prog.append(Instr.vsetvli(vl, 32))
                prog.append(Instr.vfmacc_sc(ACC, ScalarRef(a0 + 2 * (i * n + k), afmt),
                                            VB32, scalar_ops=2))
            prog.append(Instr.vsetvli(vl, 16))
            prog += pack_tile(VC16, ACC)
            prog.append(Instr.vse(16, VC16, c0 + 2 * (i * n + j0), scalar_ops=1))
    return tuple(prog)


# ── running ─────────────────────────────────────────────────────────────


@dataclass
class GemmRun:
    c: Matrix
    program: Sequence[Instr]
    trace: Trace | None


def _check_operands(a: Matrix, b: Matrix, spec: KernelSpec) -> None:
    n = spec.n
    for name, m in (("A", a), ("B", b)):
        if (m.rows, m.cols) != (n, n):
            raise ValueError(f"{name} is {m.rows}x{m.cols}, kernel expects {n}x{n}")
        if m.width != spec.width:
            raise ValueError(f"{name} has {m.width}-bit elements, {spec.mode} kernel "
                             f"expects {spec.width}-bit")


def run_gemm(a: Matrix, b: Matrix, spec: KernelSpec, *, record: bool = True) -> GemmRun:
    _check_operands(a, b, spec)
    program = build_program(spec)
    a0, b0, c0, size = layout(spec)
    state = VvmState(MachineShape(spec.vlen_bits), size)
    state.write(a0, a.data)
    state.write(b0, b.data)
    state, trace = execute(program, state, record=record)
    dtype = np.uint16 if spec.width == 16 else np.uint32
    c = Matrix(state.read(c0, spec.n * spec.n, dtype).reshape(spec.n, spec.n))
    return GemmRun(c, program, trace)


def gemm_uncompressed(a: Matrix, b: Matrix, spec: KernelSpec) -> GemmRun:
    if spec.mode != "uncompressed":
        raise ValueError("spec.mode must be 'uncompressed'")
    return run_gemm(a, b, spec)


def gemm_compressed(a: Matrix, b: Matrix, spec: KernelSpec) -> GemmRun:
    if spec.mode != "compressed":
        raise ValueError("spec.mode must be 'compressed'")
    return run_gemm(a, b, spec)


# ── oracle and census ───────────────────────────────────────────────────


def scalar_gemm_oracle(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """binary32 GEMM in the kernels' accumulation order.

    Loops i and k explicitly; the j loop is a numpy row operation, which
    is exact because the j elements never interact.
    """
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    n, m = a.shape
    if b.shape[0] != m:
        raise ValueError(f"inner dimensions differ: {a.shape} x {b.shape}")
    c = np.zeros((n, b.shape[1]), dtype=np.float32)
    with np.errstate(all="ignore"):
        for i in range(n):
            row = c[i]
            for k in k_order(i, m):
                row += a[i, k] * b[k]
    return c


def oracle(a: Matrix, b: Matrix, spec: KernelSpec) -> Matrix:
    """Expected kernel output: widen, scalar GEMM, narrow if compressed."""
    _check_operands(a, b, spec)
    c = scalar_gemm_oracle(a.to_f32(spec.fill), b.to_f32(spec.fill))
    if spec.mode == "compressed":
        return Matrix(f32_to_bf16_trunc(c.view(np.uint32)))
    return Matrix.from_f32(c)


def instruction_census(trace: Trace) -> dict[str, int]:
    """Count of committed instructions per mnemonic (absent ones omitted)."""
    counts = np.bincount(trace.column("code"), minlength=len(MNEMONICS))
    return {MNEMONICS[i]: int(c) for i, c in enumerate(counts) if c}


def census_counter(trace: Trace) -> Counter:
    return Counter(instruction_census(trace))
