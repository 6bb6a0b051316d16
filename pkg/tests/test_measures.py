from itertools import permutations

import numpy as np
import pytest

from sgot import SeedEnsemble, quantize, validate_ensemble, w1_distance
from sgot.measures import MeasureError


class TestQuantize:
    def test_single_dirac(self):
        ens = quantize(np.array([[0.3, 0.2, 1.5]]), 1)
        assert ens.n == 1
        assert ens.m[0] == 1.0
        assert np.allclose(ens.z[0], [0.3, 0.2, 1.5])

    def test_uniform_cube_octants(self):
        lo = np.array([0.0, 0.0, 1.0])
        hi = np.array([1.0, 1.0, 2.0])
        ens = quantize(lambda p: np.ones(len(p)), 8, bounds=(lo, hi))
        assert ens.n == 8
        assert np.allclose(ens.m, 1 / 8, atol=1e-12)
        centers = np.array(
            [[x, y, z] for x in (0.25, 0.75) for y in (0.25, 0.75) for z in (1.25, 1.75)]
        )
        got = np.array(sorted(ens.z.tolist()))
        want = np.array(sorted(centers.tolist()))
        # seeds sit at octant centroids up to the vertical stagger
        assert np.abs(got[:, :2] - want[:, :2]).max() < 1e-12
        assert np.abs(got[:, 2] - want[:, 2]).max() < 1e-6

    def test_output_well_prepared(self, constants):
        rng = np.random.default_rng(0)
        pts = rng.normal(size=(4000, 3)) * 0.2 + [0, 0, 1.5]
        ens = quantize(pts, 60)
        rep = validate_ensemble(ens, constants)
        assert rep.well_prepared
        assert ens.m.sum() == pytest.approx(1.0, abs=1e-12)

    def test_w1_monotone_refinement(self):
        lo = np.array([0.0, 0.0, 1.0])
        hi = np.array([1.0, 1.0, 2.0])
        rng = np.random.default_rng(1)
        fine = SeedEnsemble(lo + rng.random((512, 3)) * (hi - lo), np.full(512, 1 / 512))
        dists = []
        for n in (16, 64, 256):
            ens = quantize(lambda p: np.ones(len(p)), n, bounds=(lo, hi))
            dists.append(w1_distance(ens, fine)[0])
        assert dists[0] > dists[1] > dists[2]

    def test_zero_mass_rejected(self):
        with pytest.raises(MeasureError):
            quantize(lambda p: np.zeros(len(p)), 8, bounds=(np.zeros(3), np.ones(3)))


class TestW1:
    def test_identical_measures(self):
        rng = np.random.default_rng(2)
        ens = SeedEnsemble(rng.normal(size=(5, 3)) + [0, 0, 5], np.full(5, 0.2))
        val, coupling = w1_distance(ens, ens)
        assert val == pytest.approx(0.0, abs=1e-12)
        assert coupling.value == val

    def test_two_diracs(self):
        a = SeedEnsemble([[0, 0, 1]], [1.0])
        b = SeedEnsemble([[3, 4, 1]], [1.0])
        val, _ = w1_distance(a, b)
        assert val == pytest.approx(5.0)

    def test_permutation_oracle_n3(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            za = rng.normal(size=(3, 3)) + [0, 0, 5]
            zb = rng.normal(size=(3, 3)) + [0, 0, 5]
            a = SeedEnsemble(za, np.full(3, 1 / 3))
            b = SeedEnsemble(zb, np.full(3, 1 / 3))
            val, _ = w1_distance(a, b)
            D = np.linalg.norm(za[:, None] - zb[None, :], axis=2)
            brute = min(sum(D[i, p[i]] for i in range(3)) / 3 for p in permutations(range(3)))
            assert val == pytest.approx(brute, abs=1e-12)

    def test_metric_properties(self):
        rng = np.random.default_rng(4)
        triples = [
            SeedEnsemble(rng.normal(size=(4, 3)) + [0, 0, 5], rng.dirichlet(np.ones(4)))
            for _ in range(3)
        ]
        a, b, c = triples
        dab = w1_distance(a, b)[0]
        dba = w1_distance(b, a)[0]
        assert dab == pytest.approx(dba, abs=1e-12)
        dac = w1_distance(a, c)[0]
        dcb = w1_distance(c, b)[0]
        assert dab <= dac + dcb + 1e-12

    def test_coupling_marginals(self):
        rng = np.random.default_rng(5)
        a = SeedEnsemble(rng.normal(size=(4, 3)) + [0, 0, 5], rng.dirichlet(np.ones(4)))
        b = SeedEnsemble(rng.normal(size=(6, 3)) + [0, 0, 5], rng.dirichlet(np.ones(6)))
        _, coupling = w1_distance(a, b)
        assert np.abs(coupling.row_sums() - a.m).max() <= 1e-9
        assert np.abs(coupling.col_sums() - b.m).max() <= 1e-9

    def test_collinear_cdf_closed_form(self):
        rng = np.random.default_rng(6)
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        base = np.array([0.0, 0.0, 5.0])
        t1 = np.sort(rng.normal(size=5))
        t2 = np.sort(rng.normal(size=7))
        m1 = rng.dirichlet(np.ones(5))
        m2 = rng.dirichlet(np.ones(7))
        a = SeedEnsemble(base + t1[:, None] * direction, m1)
        b = SeedEnsemble(base + t2[:, None] * direction, m2)
        val, _ = w1_distance(a, b)
        xs = np.sort(np.concatenate([t1, t2]))
        cdf_gap = 0.0
        for k in range(len(xs) - 1):
            mid = 0.5 * (xs[k] + xs[k + 1])
            cdf_gap += abs(m1[t1 <= mid].sum() - m2[t2 <= mid].sum()) * (xs[k + 1] - xs[k])
        assert val == pytest.approx(cdf_gap, abs=1e-12)

    def test_mass_mismatch_rejected(self):
        a = SeedEnsemble([[0, 0, 1]], [1.0])
        b = SeedEnsemble([[0, 0, 2]], [1.0])
        b_bad = SeedEnsemble(b.z, b.m)
        object.__setattr__(b_bad, "m", np.array([0.7]))
        with pytest.raises(MeasureError):
            w1_distance(a, b_bad)

    def test_size_cap(self):
        rng = np.random.default_rng(7)
        big = SeedEnsemble(rng.normal(size=(513, 3)) + [0, 0, 9], np.full(513, 1 / 513))
        small = SeedEnsemble([[0, 0, 1]], [1.0])
        with pytest.raises(MeasureError):
            w1_distance(big, small)
