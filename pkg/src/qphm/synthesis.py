"""Codebook synthesis from beam targets and far-field evaluation.

Directions use radar-style (azimuth, elevation) in degrees: azimuth
rotates the beam in the x-z plane, elevation tilts it toward y, broadside
is +z.  Targets name the direction a wave comes from (incidence) or goes
to (reflection).
"""

import math
from dataclasses import dataclass

import numpy as np

from .geometry import Codebook


@dataclass(frozen=True)
class BeamTarget:
    azimuth: float
    elevation: float

    def __post_init__(self):
        if not (-90.0 <= self.azimuth <= 90.0 and -90.0 <= self.elevation <= 90.0):
            raise ValueError("azimuth and elevation must lie in [-90, 90] degrees")

    def unit_vector(self):
        az = math.radians(self.azimuth)
        el = math.radians(self.elevation)
        return np.array([math.sin(az) * math.cos(el),
                         math.sin(el),
                         math.cos(az) * math.cos(el)])


def phase_gradient_codebook(layout, template_or_pitch, incident, reflect, lam, k_bits):
    """Quantized linear phase ramp steering `incident` into `reflect`.

    The required surface phase at unit center r is
    -kappa * (u_r - u_i) . r with u_i the incident propagation direction
    (the wave comes *from* `incident`, so u_i is its negated unit vector)
    and u_r the outgoing target direction.  Phases are quantized to the
    2**k_bits uniform levels starting at 0, ties to the lower level.
    """
    if lam <= 0:
        raise ValueError("wavelength must be positive")
    pitch = getattr(template_or_pitch, "pitch", template_or_pitch)
    px, py = pitch
    kappa = 2.0 * math.pi / lam
    u_i = -incident.unit_vector()
    u_r = reflect.unit_vector()
    grad = u_r - u_i
    ii, jj = np.meshgrid(np.arange(layout.m), np.arange(layout.n), indexing="ij")
    centers_x = (ii + 0.5) * px
    centers_y = (jj + 0.5) * py
    phi = -kappa * (grad[0] * centers_x + grad[1] * centers_y)
    nlev = 1 << k_bits
    width = 2.0 * math.pi / nlev
    states = np.ceil((phi % (2.0 * math.pi)) / width - 0.5).astype(np.int64) % nlev
    return Codebook(states=states)


@dataclass
class FarFieldGrid:
    azimuths: np.ndarray        # degrees
    elevations: np.ndarray
    values: np.ndarray          # complex, shape (n_az, n_el)

    DB_FLOOR = -60.0

    def magnitudes_db(self):
        mag = np.abs(self.values)
        with np.errstate(divide="ignore"):
            db = 20.0 * np.log10(mag)
        return np.maximum(db, self.DB_FLOOR)

    def to_csv(self, path):
        db = self.magnitudes_db()
        with open(path, "w") as fh:
            fh.write("az,el,re,im,dB\n")
            for a, az in enumerate(self.azimuths):
                for e, el in enumerate(self.elevations):
                    v = self.values[a, e]
                    fh.write(f"{az:.3f},{el:.3f},{v.real:.9e},{v.imag:.9e},"
                             f"{db[a, e]:.4f}\n")


def far_field(sites, weights, kappa, az_step=1.0, el_step=1.0):
    """Upper-hemisphere radiation sum of weighted point sources.

    F(u) = sum_i w_i exp(+1j kappa u . r_i); masked weights are zero, so
    inactive sites contribute nothing.
    """
    weights = np.asarray(weights)
    if weights.shape[0] != sites.N:
        raise ValueError("weights length does not match site count")
    azimuths = np.arange(-90.0, 90.0 + 0.5 * az_step, az_step)
    elevations = np.arange(-90.0, 90.0 + 0.5 * el_step, el_step)
    az = np.radians(azimuths)[:, None]
    el = np.radians(elevations)[None, :]
    dirs = np.stack([np.broadcast_to(np.sin(az) * np.cos(el), (len(azimuths), len(elevations))),
                     np.broadcast_to(np.sin(el), (len(azimuths), len(elevations))),
                     np.broadcast_to(np.cos(az) * np.cos(el), (len(azimuths), len(elevations)))],
                    axis=-1)
    phase = np.tensordot(dirs, sites.positions.T, axes=([-1], [0]))
    values = np.exp(1j * kappa * phase) @ weights
    return FarFieldGrid(azimuths=azimuths, elevations=elevations, values=values)


class NoLobeError(ValueError):
    pass


def main_lobe(grid):
    """Direction of the strongest sample; ties to the lexicographically
    smallest (azimuth, elevation)."""
    mag = np.abs(grid.values)
    if not np.any(mag > 0):
        raise NoLobeError("far field is identically zero")
    a, e = np.unravel_index(int(np.argmax(mag)), mag.shape)
    return BeamTarget(float(grid.azimuths[a]), float(grid.elevations[e]))


# Depths (in wavelengths) for the 1-bit depth-coded macro unit used in the
# oblique-incidence beam demos: each state is a short vertical stack at the
# cell center; the stacks are tuned so the two states scatter with strong
# phase contrast toward the steered quadrant while staying matched toward
# the quantization image lobe, which keeps the steered beam on top.
DEPTH_CODED_1BIT = ((0.8103, 0.3411, 0.3567), (0.0703, 0.5686, 1.0906))
