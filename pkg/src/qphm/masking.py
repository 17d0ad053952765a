"""Configuration masks and the masked global operator.

The global matrix Z covers every site of the fully populated periodic
array.  A configuration activates a subset of sites; its system is the
restriction of Z to active rows and columns.  Instead of slicing, the
restricted solve is expressed through a diagonal 0/1 mask D:

    y = D * Z (D * x) + (1 - D) * x

On active indices this is exactly the restricted operator; the identity
term pins inactive unknowns to their (zero) right-hand side, keeping the
operator nonsingular without reindexing anything.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np


@dataclass
class MaskVector:
    """Length-N 0/1 activity vector; 1 = site participates in the solve."""

    bits: np.ndarray
    active_count: int = field(init=False)

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=np.int8).reshape(-1)
        if np.any((self.bits != 0) & (self.bits != 1)):
            raise ValueError("mask entries must be 0 or 1")
        self.active_count = int(self.bits.sum())

    def __len__(self):
        return len(self.bits)

    @property
    def active_indices(self):
        return np.flatnonzero(self.bits)

    def to_json(self, path):
        import json
        with open(path, "w") as fh:
            json.dump(self.bits.tolist(), fh)


class MaskedOperator:
    """Masked form of a global operator (anything with a matvec).

    Callable on complex vectors of the global length; active components see
    the restricted system, masked components see the identity.
    """

    def __init__(self, op, mask):
        self.op = op
        self.mask = mask
        n = op.shape[0] if hasattr(op, "shape") else op.N
        if n != len(mask):
            raise ValueError(f"operator size {n} != mask size {len(mask)}")
        self.N = n
        self._d = mask.bits.astype(np.float64)

    def matvec(self, x):
        x = np.asarray(x)
        if x.shape != (self.N,):
            raise ValueError(f"expected vector of length {self.N}")
        d = self._d
        inner = self.op.matvec(d * x) if hasattr(self.op, "matvec") else self.op @ (d * x)
        return d * inner + (1.0 - d) * x

    def __matmul__(self, x):
        return self.matvec(x)


def masked_operator(op, mask):
    return MaskedOperator(op, mask)


def masked_rhs(u, mask):
    """Right-hand side of the masked system: inactive entries forced to 0."""
    u = np.asarray(u)
    if u.shape[0] != len(mask):
        raise ValueError("rhs length does not match mask")
    return mask.bits * u


def restrict(x, mask):
    """Gather active entries in index order (global -> compact)."""
    x = np.asarray(x)
    if x.shape[0] != len(mask):
        raise ValueError("vector length does not match mask")
    return x[mask.active_indices]


def prolong(v, mask):
    """Scatter compact entries back to global indices, zeros elsewhere."""
    v = np.asarray(v)
    if v.shape[0] != mask.active_count:
        raise ValueError("vector length does not match active count")
    out = np.zeros(len(mask), dtype=v.dtype if v.dtype.kind == "c" else complex)
    out[mask.active_indices] = v
    return out


def plane_wave_rhs(sites, direction, polar_weight, kappa):
    """Plane-wave excitation sampled at the site positions.

    `direction` is the propagation unit vector; entry i is
    polar_weight * exp(-1j * kappa * direction . r_i).
    """
    direction = np.asarray(direction, dtype=float)
    norm = np.linalg.norm(direction)
    if abs(norm - 1.0) > 1e-12:
        warnings.warn(f"direction has norm {norm:.6g}; normalizing", stacklevel=2)
        direction = direction / norm
    phase = sites.positions @ direction
    return polar_weight * np.exp(-1j * kappa * phase)
