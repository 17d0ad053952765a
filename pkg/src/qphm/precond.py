"""Near-field block-sparse ILU preconditioner.

The near field of the hierarchical matrix is the union of its dense
(inadmissible) leaves; dropping every low-rank leaf amounts to zeroing the
far field.  The preconditioner is a no-fill incomplete LU restricted to
that block sparsity pattern, built per configuration from the shared dense
content: masking and refactorization never re-evaluate kernel entries.

Masked rows and columns are replaced by identity, honoring that the
factorization of the masked matrix is not the masking of the factorization.
"""

from dataclasses import dataclass

import numpy as np

try:
    from numba import njit
except ImportError:          # pragma: no cover - numba is a hard dep, but stay runnable
    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f

from .aca import DenseBlock

TINY_PIVOT_FACTOR = 1e-12


@dataclass
class NearFieldMatrix:
    """Block-sparse view of all dense leaves, permuted index space.

    Blocks reference the shared leaf arrays; nothing is copied until a
    factorization materializes the CSR working set.
    """

    N: int
    perm: np.ndarray              # permuted slot -> global index
    blocks: list                  # (r0, r1, c0, c1, values)

    _csr: tuple = None

    def scalar_count(self):
        return sum(v.size for *_ranges, v in self.blocks)

    def csr(self):
        """CSR of the near-field pattern (built once, then cached)."""
        if self._csr is None:
            rows = np.concatenate([
                np.repeat(np.arange(r0, r1), c1 - c0)
                for r0, r1, c0, c1, _v in self.blocks])
            cols = np.concatenate([
                np.tile(np.arange(c0, c1), r1 - r0)
                for r0, r1, c0, c1, _v in self.blocks])
            data = np.concatenate([v.ravel() for *_r, v in self.blocks])
            order = np.lexsort((cols, rows))
            rows, cols, data = rows[order], cols[order], data[order]
            indptr = np.zeros(self.N + 1, dtype=np.int64)
            np.add.at(indptr, rows + 1, 1)
            indptr = np.cumsum(indptr)
            diag_pos = np.full(self.N, -1, dtype=np.int64)
            hit = cols == rows
            diag_pos[rows[hit]] = np.flatnonzero(hit)
            if np.any(diag_pos < 0):
                missing = int(np.argmin(diag_pos))
                raise ValueError(f"near field does not cover diagonal index {missing}")
            self._csr = (indptr, cols.astype(np.int64), data.astype(np.complex128),
                         diag_pos)
        return self._csr


def extract_near_field(h):
    """Collect every dense leaf of an assembled matrix (references, not copies)."""
    blocks = []
    for row_base, col_base, block in h.plan():
        if isinstance(block, DenseBlock):
            r0, r1 = block.row_range
            c0, c1 = block.col_range
            blocks.append((row_base + r0, row_base + r1,
                           col_base + c0, col_base + c1, block.values))
    return NearFieldMatrix(N=h.N, perm=h.perm, blocks=blocks)


@njit(cache=True)
def _ilu0_inplace(indptr, indices, data, diag_pos, tiny):
    """No-fill IKJ incomplete LU on the fixed CSR pattern, natural order.

    Strictly-lower entries become L factors (unit diagonal implied); the
    diagonal and upper entries become U.  Pivots smaller than `tiny` are
    replaced by it.  Returns the replacement count.
    """
    n = indptr.shape[0] - 1
    replaced = 0
    for i in range(n):
        row_start, row_end = indptr[i], indptr[i + 1]
        for idx in range(row_start, row_end):
            kcol = indices[idx]
            if kcol >= i:
                break
            piv = data[diag_pos[kcol]]
            factor = data[idx] / piv
            data[idx] = factor
            krow_end = indptr[kcol + 1]
            dpos = diag_pos[kcol] + 1
            pos = idx + 1
            for kdx in range(dpos, krow_end):
                j = indices[kdx]
                while pos < row_end and indices[pos] < j:
                    pos += 1
                if pos == row_end:
                    break
                if indices[pos] == j:
                    data[pos] -= factor * data[kdx]
        dp = diag_pos[i]
        if abs(data[dp]) < tiny:
            data[dp] = tiny
            replaced += 1
    return replaced


@njit(cache=True)
def _ilu0_solve(indptr, indices, data, diag_pos, rhs):
    n = indptr.shape[0] - 1
    y = rhs.copy()
    for i in range(n):
        acc = y[i]
        for idx in range(indptr[i], indptr[i + 1]):
            j = indices[idx]
            if j >= i:
                break
            acc -= data[idx] * y[j]
        y[i] = acc
    for i in range(n - 1, -1, -1):
        acc = y[i]
        for idx in range(diag_pos[i] + 1, indptr[i + 1]):
            acc -= data[idx] * y[indices[idx]]
        y[i] = acc / data[diag_pos[i]]
    return y


@dataclass
class NearFieldPreconditioner:
    N: int
    perm: np.ndarray
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray              # factored values
    diag_pos: np.ndarray
    pivot_replacements: int

    def apply(self, r):
        r = np.asarray(r, dtype=complex)
        if r.shape != (self.N,):
            raise ValueError(f"expected vector of length {self.N}")
        rp = r[self.perm]
        xp = _ilu0_solve(self.indptr, self.indices, self.data, self.diag_pos, rp)
        out = np.empty_like(xp)
        out[self.perm] = xp
        return out


def factorize(nf, mask):
    """Masked no-fill ILU over the near-field pattern.

    Rows and columns of masked indices are zeroed with a unit diagonal
    before factoring, so the preconditioner acts as the identity there.
    """
    indptr, indices, data, diag_pos = nf.csr()
    bits = np.asarray(mask.bits, dtype=np.float64)[nf.perm]
    row_ids = np.repeat(np.arange(nf.N), np.diff(indptr))
    work = data * bits[row_ids] * bits[indices]
    masked_diag = np.flatnonzero(bits == 0)
    work[diag_pos[masked_diag]] = 1.0
    mags = np.abs(work[diag_pos])
    tiny = TINY_PIVOT_FACTOR * float(mags.max()) if mags.size else TINY_PIVOT_FACTOR
    replaced = _ilu0_inplace(indptr, indices, work, diag_pos, tiny)
    return NearFieldPreconditioner(
        N=nf.N, perm=nf.perm, indptr=indptr, indices=indices, data=work,
        diag_pos=diag_pos, pivot_replacements=int(replaced))


class IdentityPreconditioner:
    def apply(self, r):
        return r
