"""Dense assembly and partial-pivot adaptive cross approximation.

Low-rank leaves are assembled by sampling whole rows and columns of the
entry oracle; the pivot walk and stopping rule are fully deterministic, so
bitwise-equal oracles give bitwise-equal factors.
"""

from dataclasses import dataclass

import numpy as np


@dataclass
class DenseBlock:
    row_range: tuple            # (start, stop) in the owner's index frame
    col_range: tuple
    values: np.ndarray

    @property
    def shape(self):
        return self.values.shape

    @property
    def scalar_count(self):
        return self.values.size


@dataclass
class LowRankBlock:
    row_range: tuple
    col_range: tuple
    u: np.ndarray               # (nrows, r)
    v: np.ndarray               # (r, ncols)
    rank_capped: bool = False

    @property
    def rank(self):
        return self.u.shape[1]

    @property
    def shape(self):
        return (self.u.shape[0], self.v.shape[1])

    @property
    def scalar_count(self):
        return self.rank * (self.u.shape[0] + self.v.shape[1])

    def to_dense(self):
        return self.u @ self.v


def assemble_dense(oracle, row_range=None, col_range=None):
    """Full evaluation of the oracle's block, row-major order."""
    m, n = oracle.shape
    return DenseBlock(row_range or (0, m), col_range or (0, n), oracle.block())


def aca_approximate(oracle, eps, max_rank, row_range=None, col_range=None):
    """Partial-pivot cross approximation of the oracle's block.

    Pivot walk: start at row 0; the column pivot is the largest remaining
    residual entry of the current row (ties to the lowest index), the next
    row pivot the largest entry of the fresh column outside used rows.  A
    fully zero residual row falls through to the next unused row; running
    out of rows ends the sweep at the current rank.

    The sweep stops once the candidate term u v satisfies
    ||u|| ||v|| <= eps * ||A_k||_F, with the Frobenius norm of the running
    approximation maintained incrementally; the candidate below the cut is
    not kept.  An exactly rank-1 oracle therefore comes back with rank 1.
    """
    m, n = oracle.shape
    us, vs = [], []
    used_rows, used_cols = set(), set()
    norm2 = 0.0
    capped = False
    next_row = 0

    while len(us) < min(m, n):
        if next_row is None or next_row in used_rows:
            next_row = _lowest_unused(m, used_rows)
            if next_row is None:
                break
        i = next_row
        row = oracle.row(i).astype(complex)
        for uk, vk in zip(us, vs):
            row -= uk[i] * vk
        used_rows.add(i)

        j = _abs_argmax_outside(row, used_cols)
        if j is None or row[j] == 0.0:
            next_row = _lowest_unused(m, used_rows)   # zero-pivot fallback
            if next_row is None:
                break
            continue
        pivot = row[j]
        vk = row / pivot
        used_cols.add(j)

        col = oracle.col(j).astype(complex)
        for uk, vv in zip(us, vs):
            col -= vv[j] * uk
        uk = col

        uk_norm = np.linalg.norm(uk)
        vk_norm = np.linalg.norm(vk)
        cross = 0.0
        if us:
            uc = np.array([np.vdot(u_prev, uk) for u_prev in us])
            vc = np.array([np.vdot(v_prev, vk) for v_prev in vs])
            cross = 2.0 * float(np.real(np.sum(uc * vc)))
        norm2 = max(norm2 + cross + (uk_norm * vk_norm) ** 2, 0.0)

        if uk_norm * vk_norm <= eps * np.sqrt(norm2):
            break
        us.append(uk)
        vs.append(vk)
        if len(us) >= max_rank:
            capped = len(us) < min(m, n)
            break
        next_row = _abs_argmax_outside(uk, used_rows)

    r = len(us)
    u = np.array(us).T.copy() if r else np.zeros((m, 0), dtype=complex)
    v = np.array(vs) if r else np.zeros((0, n), dtype=complex)
    return LowRankBlock(row_range or (0, m), col_range or (0, n), u, v,
                        rank_capped=capped)


def _lowest_unused(count, used):
    for i in range(count):
        if i not in used:
            return i
    return None


def _abs_argmax_outside(values, used):
    mag = np.abs(values)
    if used:
        mag = mag.copy()
        mag[list(used)] = -1.0
    j = int(np.argmax(mag))
    if mag[j] < 0:
        return None
    return j
