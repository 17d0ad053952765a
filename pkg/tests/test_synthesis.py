import numpy as np
import pytest

from qphm.geometry import ArrayLayout, MacroUnitTemplate
from qphm.masking import MaskVector
from qphm.synthesis import (BeamTarget, FarFieldGrid, NoLobeError, far_field,
                            main_lobe, phase_gradient_codebook)


class FakeSites:
    def __init__(self, positions):
        self.positions = np.asarray(positions, dtype=float)

    @property
    def N(self):
        return len(self.positions)


class TestBeamTarget:
    def test_unit_vectors(self):
        assert np.allclose(BeamTarget(0, 0).unit_vector(), [0, 0, 1])
        assert np.allclose(BeamTarget(90, 0).unit_vector(), [1, 0, 0])
        assert np.allclose(BeamTarget(0, 90).unit_vector(), [0, 1, 0])
        v = BeamTarget(-30, 0).unit_vector()
        assert v[0] == pytest.approx(-0.5)

    def test_range_validation(self):
        with pytest.raises(ValueError):
            BeamTarget(120.0, 0.0)
        with pytest.raises(ValueError):
            BeamTarget(0.0, -91.0)


class TestPhaseGradientCodebook:
    def test_specular_target_gives_uniform_codebook(self):
        lay = ArrayLayout(16, 1)
        cb = phase_gradient_codebook(lay, (1.0, 1.0), BeamTarget(45, 0),
                                     BeamTarget(-45, 0), lam=2.0, k_bits=1)
        assert np.all(cb.states == cb.states[0, 0])

    def test_normal_incidence_30_degree_ramp_period_four(self):
        # pitch = lam/2 and a 30 degree target give a 4-unit period
        lay = ArrayLayout(16, 1)
        cb = phase_gradient_codebook(lay, (1.0, 1.0), BeamTarget(0, 0),
                                     BeamTarget(30, 0), lam=2.0, k_bits=1)
        states = cb.states[:, 0]
        assert np.array_equal(states, np.tile(states[:4], 4))
        assert np.array_equal(np.sort(np.unique(states)), [0, 1])
        runs = np.diff(np.flatnonzero(np.diff(states) != 0))
        assert np.all(runs == 2)

    def test_one_bit_flip_boundaries(self):
        # states flip exactly where the wrapped phase crosses pi/2, 3pi/2,
        # ties going to the lower level
        lay = ArrayLayout(32, 1)
        lam = 2.0
        incident, reflect = BeamTarget(0, 0), BeamTarget(20, 0)
        cb = phase_gradient_codebook(lay, (1.0, 1.0), incident, reflect, lam, 1)
        kappa = 2 * np.pi / lam
        grad = reflect.unit_vector() + incident.unit_vector()
        phi = (-kappa * grad[0] * (np.arange(32) + 0.5)) % (2 * np.pi)
        expected = np.ceil(phi / np.pi - 0.5).astype(int) % 2
        by_rule = ((phi > np.pi / 2) & (phi <= 3 * np.pi / 2)).astype(int)
        assert np.array_equal(expected, by_rule)
        assert np.array_equal(cb.states[:, 0], expected)

    def test_two_bit_quantization(self):
        lay = ArrayLayout(8, 8)
        cb = phase_gradient_codebook(lay, (1.0, 1.0), BeamTarget(0, 0),
                                     BeamTarget(25, 10), lam=2.0, k_bits=2)
        assert np.all((cb.states >= 0) & (cb.states < 4))
        assert len(np.unique(cb.states)) > 1


class TestFarField:
    def test_single_site_isotropic(self):
        grid = far_field(FakeSites([[0.0, 0.0, 0.0]]), np.array([1.0 + 0j]),
                         kappa=np.pi, az_step=10, el_step=10)
        assert np.allclose(np.abs(grid.values), 1.0)

    def test_two_element_broadside_null_at_endfire(self):
        lam = 2.0
        kappa = 2 * np.pi / lam
        sites = FakeSites([[0.0, 0.0, 0.0], [lam / 2, 0.0, 0.0]])
        grid = far_field(sites, np.ones(2, dtype=complex), kappa)
        mag = np.abs(grid.values)
        a90 = np.flatnonzero(grid.azimuths == 90.0)[0]
        e0 = np.flatnonzero(grid.elevations == 0.0)[0]
        a0 = np.flatnonzero(grid.azimuths == 0.0)[0]
        assert mag[a90, e0] == pytest.approx(0.0, abs=1e-12)
        assert mag[a0, e0] == pytest.approx(2.0)

    def test_zero_weights(self):
        sites = FakeSites(np.random.default_rng(0).normal(size=(5, 3)))
        grid = far_field(sites, np.zeros(5, dtype=complex), kappa=1.0)
        assert np.all(grid.values == 0)
        with pytest.raises(NoLobeError):
            main_lobe(grid)

    def test_db_floor(self):
        grid = FarFieldGrid(np.array([0.0]), np.array([0.0]),
                            np.array([[1e-9 + 0j]]))
        assert grid.magnitudes_db()[0, 0] == -60.0

    def test_csv_schema(self, tmp_path):
        sites = FakeSites([[0.0, 0.0, 0.0]])
        grid = far_field(sites, np.array([1.0 + 0j]), kappa=1.0,
                         az_step=90, el_step=90)
        path = tmp_path / "ff.csv"
        grid.to_csv(path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "az,el,re,im,dB"
        assert len(lines) == 1 + 3 * 3


class TestSpecularConsistency:
    @pytest.mark.parametrize("state", [0, 1])
    def test_uniform_codebook_peaks_at_specular(self, state):
        """Any single-state configuration reflects like a flat plate."""
        from qphm.geometry import (ArrayLayout, Codebook, build_mask,
                                   build_split_grid_template, instantiate_array)
        from qphm.kernels import KernelSpec, default_self_term
        from qphm.krylov import bicgstab
        from qphm.masking import masked_operator, masked_rhs, plane_wave_rhs
        from qphm.patterns import assemble_virtual
        from qphm.precond import extract_near_field, factorize

        lam = 2.0
        kappa = 2 * np.pi / lam
        tpl = build_split_grid_template(4, (lam / 2, lam / 2))
        lay = ArrayLayout(16, 1)
        sites = instantiate_array(tpl, lay)
        spec = KernelSpec("helmholtz", kappa, default_self_term(tpl))
        h = assemble_virtual(sites, spec)
        incident = BeamTarget(45.0, 0.0)
        mask = build_mask(tpl, lay, Codebook(np.full((16, 1), state)))
        rhs = masked_rhs(plane_wave_rhs(sites, -incident.unit_vector(), 1.0,
                                        kappa), mask)
        M = factorize(extract_near_field(h), mask)
        rep = bicgstab(masked_operator(h, mask), rhs, M=M, tol=1e-6,
                       max_iter=200, active=mask.bits.astype(bool))
        assert rep.converged
        lobe = main_lobe(far_field(sites, rep.x, kappa))
        assert abs(lobe.azimuth - (-45.0)) <= 1.0
        assert abs(lobe.elevation) <= 1.0


class TestMainLobe:
    def test_uniform_sixteen_element_array_broadside(self):
        # 16 in-phase elements on a half-wave 4x4 lattice; a 1-d line array
        # would tie along the whole broadside cone, the planar one peaks only
        # at (0, 0)
        lam = 2.0
        kappa = 2 * np.pi / lam
        ii, jj = np.meshgrid(np.arange(4), np.arange(4), indexing="ij")
        pos = np.zeros((16, 3))
        pos[:, 0] = ii.ravel() * lam / 2
        pos[:, 1] = jj.ravel() * lam / 2
        grid = far_field(FakeSites(pos), np.ones(16, dtype=complex), kappa)
        lobe = main_lobe(grid)
        assert (lobe.azimuth, lobe.elevation) == (0.0, 0.0)

    def test_single_site_tie_breaks_to_first_sample(self):
        grid = far_field(FakeSites([[0.0, 0.0, 0.0]]), np.array([1.0 + 0j]),
                         kappa=np.pi, az_step=45, el_step=45)
        lobe = main_lobe(grid)
        assert (lobe.azimuth, lobe.elevation) == (-90.0, -90.0)

    def test_phase_ramp_steers_peak(self):
        lam = 2.0
        kappa = 2 * np.pi / lam
        pos = np.zeros((16, 3))
        pos[:, 0] = np.arange(16) * lam / 2
        steer = BeamTarget(30, 0).unit_vector()
        weights = np.exp(-1j * kappa * (pos @ steer))
        grid = far_field(FakeSites(pos), weights, kappa)
        lobe = main_lobe(grid)
        assert abs(lobe.azimuth - 30.0) <= 1.0
        assert lobe.elevation == 0.0
