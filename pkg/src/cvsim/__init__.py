"""In-register bfloat16 compression on a virtual vector machine.

Modules: :mod:`formats` (codecs), :mod:`vvm` (functional vector machine),
:mod:`kernels` (GEMM programs), :mod:`timing` (trace-driven timing model),
:mod:`sweep` (parameter sweeps), :mod:`cli`.
"""

__version__ = "0.1.0"
