import numpy as np
import pytest

from qphm import kernels
from qphm.clustering import HParams
from qphm.geometry import (ArrayLayout, Codebook, build_mask,
                           build_split_grid_template, instantiate_array)
from qphm.kernels import KernelSpec, eval_block
from qphm.masking import MaskVector
from qphm.patterns import assemble_virtual
from qphm.precond import (IdentityPreconditioner, NearFieldMatrix,
                          extract_near_field, factorize)

HELM = KernelSpec("helmholtz", np.pi, 1.27)


def assembled(m, n, g=4, **hkw):
    sites = instantiate_array(build_split_grid_template(g, (1.0, 1.0)),
                              ArrayLayout(m, n))
    return sites, assemble_virtual(sites, HELM, HParams(**hkw) if hkw else None)


def all_ones(n):
    return MaskVector(np.ones(n, dtype=int))


class TestExtraction:
    def test_single_unit_near_field_is_whole_matrix(self):
        sites, h = assembled(1, 1, g=2)   # 8 sites, one dense leaf
        nf = extract_near_field(h)
        assert nf.scalar_count() == sites.N ** 2
        indptr, indices, data, diag = nf.csr()
        dense = eval_block(HELM, sites, np.arange(sites.N), np.arange(sites.N))
        perm = nf.perm
        for i in range(sites.N):
            for k in range(indptr[i], indptr[i + 1]):
                assert data[k] == dense[perm[i], perm[indices[k]]]

    def test_near_field_entries_match_dense_oracle(self):
        sites, h = assembled(2, 4)
        nf = extract_near_field(h)
        dense = eval_block(HELM, sites, np.arange(sites.N), np.arange(sites.N))
        perm = nf.perm
        indptr, indices, data, _diag = nf.csr()
        rows = np.repeat(np.arange(sites.N), np.diff(indptr))
        assert np.array_equal(data, dense[perm[rows], perm[indices]])

    def test_near_field_strict_subset(self):
        sites, h = assembled(2, 4)
        nf = extract_near_field(h)
        assert 0 < nf.scalar_count() < sites.N ** 2

    def test_diagonal_fully_covered(self):
        _sites, h = assembled(1, 8)
        nf = extract_near_field(h)
        _indptr, _indices, _data, diag = nf.csr()
        assert np.all(diag >= 0)

    def test_missing_diagonal_rejected(self):
        nf = NearFieldMatrix(N=3, perm=np.arange(3),
                             blocks=[(0, 2, 0, 2, np.eye(2, dtype=complex))])
        with pytest.raises(ValueError):
            nf.csr()


class TestFactorization:
    def test_full_pattern_is_exact_lu(self):
        sites, h = assembled(1, 1, g=2)
        nf = extract_near_field(h)
        M = factorize(nf, all_ones(sites.N))
        dense = eval_block(HELM, sites, np.arange(sites.N), np.arange(sites.N))
        rng = np.random.default_rng(0)
        x = rng.standard_normal(sites.N) + 1j * rng.standard_normal(sites.N)
        assert np.linalg.norm(M.apply(dense @ x) - x) / np.linalg.norm(x) <= 1e-12
        assert M.pivot_replacements == 0

    def test_all_masked_is_identity(self):
        sites, h = assembled(1, 2, g=2)
        nf = extract_near_field(h)
        M = factorize(nf, MaskVector(np.zeros(sites.N, dtype=int)))
        r = np.arange(sites.N, dtype=complex) + 0.3j
        assert np.allclose(M.apply(r), r, rtol=0, atol=0)

    def test_diagonal_only_near_field(self):
        vals = np.array([2.0, 4.0, 8.0, 16.0], dtype=complex)
        blocks = [(i, i + 1, i, i + 1, vals[i].reshape(1, 1)) for i in range(4)]
        nf = NearFieldMatrix(N=4, perm=np.arange(4), blocks=blocks)
        mv = MaskVector([1, 0, 1, 0])
        M = factorize(nf, mv)
        r = np.ones(4, dtype=complex)
        out = M.apply(r)
        assert np.allclose(out, [0.5, 1.0, 0.125, 1.0], rtol=0, atol=0)

    def test_apply_linearity(self):
        sites, h = assembled(1, 4, g=2)
        nf = extract_near_field(h)
        M = factorize(nf, all_ones(sites.N))
        rng = np.random.default_rng(1)
        r1 = rng.standard_normal(sites.N) + 1j * rng.standard_normal(sites.N)
        r2 = rng.standard_normal(sites.N) + 1j * rng.standard_normal(sites.N)
        lhs = M.apply(r1 + r2)
        rhs = M.apply(r1) + M.apply(r2)
        assert np.linalg.norm(lhs - rhs) <= 1e-12 * np.linalg.norm(rhs)

    def test_identity_preconditioner(self):
        r = np.arange(5, dtype=complex)
        assert np.array_equal(IdentityPreconditioner().apply(r), r)

    def test_masked_rows_pass_through(self):
        sites, h = assembled(2, 2)
        tpl = sites.template
        cb = Codebook(np.array([[0, 1], [1, 0]]))
        mv = build_mask(tpl, sites.layout, cb)
        nf = extract_near_field(h)
        M = factorize(nf, mv)
        r = np.zeros(sites.N, dtype=complex)
        r[mv.bits == 0] = 1.5 + 0.5j
        out = M.apply(r)
        assert np.array_equal(out[mv.bits == 0], r[mv.bits == 0])

    def test_refactorization_evaluates_no_kernel_entries(self):
        sites, h = assembled(2, 2)
        nf = extract_near_field(h)
        nf.csr()
        tpl = sites.template
        kernels.reset_eval_count()
        for states in ([[0, 0], [0, 0]], [[1, 1], [1, 1]], [[0, 1], [1, 0]]):
            mv = build_mask(tpl, sites.layout, Codebook(np.array(states)))
            factorize(nf, mv)
        assert kernels.eval_count() == 0
