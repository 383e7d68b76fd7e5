"""JIT-compiled inner loops for the packed binary kernels.

Optional: importing this module requires numba. bitpack falls back to a
pure-numpy path when the import fails, with identical results.
"""

import numpy as np
from llvmlite import ir
from numba import njit, types
from numba.extending import intrinsic


@intrinsic
def _popcnt64(typingctx, x):
    """Hardware population count of a uint64 (llvm.ctpop)."""
    sig = types.uint64(types.uint64)

    def codegen(context, builder, signature, args):
        (value,) = args
        fn = builder.module.declare_intrinsic("llvm.ctpop", [ir.IntType(64)])
        return builder.call(fn, [value])

    return sig, codegen


@njit(cache=True, nogil=True)
def xnor_gemm_words(a, b, n_bits, out):
    """out[i, j] = n_bits - 2 * popcount(a[i] ^ b[j]) over packed rows.

    a: (m, w) uint64, b: (n, w) uint64, out: (m, n) int64. Rows must share
    the row length n_bits and have zero padding bits. 4-way blocking over j
    keeps the popcount unit busy.
    """
    m, w = a.shape
    n = b.shape[0]
    for i in range(m):
        j = 0
        while j + 4 <= n:
            acc0 = np.uint64(0)
            acc1 = np.uint64(0)
            acc2 = np.uint64(0)
            acc3 = np.uint64(0)
            for k in range(w):
                av = a[i, k]
                acc0 += _popcnt64(av ^ b[j, k])
                acc1 += _popcnt64(av ^ b[j + 1, k])
                acc2 += _popcnt64(av ^ b[j + 2, k])
                acc3 += _popcnt64(av ^ b[j + 3, k])
            out[i, j] = n_bits - 2 * np.int64(acc0)
            out[i, j + 1] = n_bits - 2 * np.int64(acc1)
            out[i, j + 2] = n_bits - 2 * np.int64(acc2)
            out[i, j + 3] = n_bits - 2 * np.int64(acc3)
            j += 4
        while j < n:
            acc = np.uint64(0)
            for k in range(w):
                acc += _popcnt64(a[i, k] ^ b[j, k])
            out[i, j] = n_bits - 2 * np.int64(acc)
            j += 1
    return out
