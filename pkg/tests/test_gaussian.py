import numpy as np
import pytest
import scipy.linalg as la
from hypothesis import given, settings, strategies as st

from solitonq import core, fock, gaussian as G, lsm, me


def random_unitary(n, rng):
    q, r = np.linalg.qr(rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n)))
    return q * (np.diag(r) / np.abs(np.diag(r)))


def squeezed_state(r, mu=None, basis="lsm"):
    """Product of single-mode squeezed vacua, a -> a cosh r - a^+ sinh r."""
    r = np.asarray(r, dtype=float)
    N = np.diag(np.sinh(r) ** 2).astype(complex)
    M = np.diag(-np.cosh(r) * np.sinh(r)).astype(complex)
    mu = np.zeros(len(r), complex) if mu is None else np.asarray(mu, complex)
    return G.GaussianState(mu, N, M, basis)


def random_pure_state(n, rng, basis="lsm"):
    s = squeezed_state(rng.uniform(0, 0.8, n), rng.normal(size=n) + 1j * rng.normal(size=n), basis)
    return s.transform(random_unitary(n, rng))


def linear_terms(D, nbar):
    C = np.zeros((len(D),) * 4, dtype=complex)
    groups = {"H_S": lsm.full_monomials(lsm.CouplingTensors(D, C))}
    return lsm.HamiltonianTerms(len(D), nbar, groups)


class TestState:
    def test_init(self):
        s = G.init_gaussian(5.0, 4)
        assert s.photon_number() == pytest.approx(5.0, rel=1e-15)
        assert abs(s.mu[0]) ** 2 + s.N[0, 0].real == pytest.approx(5.0, rel=1e-15)
        assert G.purity_residual(s) == 0
        np.testing.assert_allclose(G.squeezing_spectrum(s).db, 0.0, atol=1e-12)

    def test_symplectic_eigenvalues_pure(self, rng):
        s = random_pure_state(4, rng)
        np.testing.assert_allclose(G.symplectic_eigenvalues(s.quadrature_covariance()), 0.5, atol=1e-10)
        assert G.purity_residual(s) < 1e-10
        assert abs(G.physicality_margin(s)) < 1e-10

    def test_thermal_margin(self):
        s = G.GaussianState(np.zeros(2, complex), np.diag([1.0, 2.0]).astype(complex), np.zeros((2, 2), complex))
        np.testing.assert_allclose(G.symplectic_eigenvalues(s.quadrature_covariance()), [1.5, 2.5])
        assert G.physicality_margin(s) == pytest.approx(1.0)

    def test_transform_preserves_number(self, rng):
        s = random_pure_state(5, rng)
        t = s.transform(random_unitary(5, rng))
        assert t.photon_number() == pytest.approx(s.photon_number(), rel=1e-12)


class TestSqueezing:
    def test_single_mode_r1(self):
        s = squeezed_state([0.0, 1.0, 0.0])
        sq = G.squeezing_spectrum(s)
        assert sq.db[0] == pytest.approx(20 * np.log10(np.e), abs=1e-10)
        np.testing.assert_allclose(sq.db[1:], 0.0, atol=1e-10)
        assert abs(abs(sq.modes[0, 1]) - 1) < 1e-10

    def test_rotation_invariance(self, rng):
        s = squeezed_state([0.3, 0.9, 0.1, 0.5])
        ref = G.squeezing_spectrum(s)
        rot = G.squeezing_spectrum(s.transform(random_unitary(4, rng)))
        np.testing.assert_allclose(rot.db, ref.db, atol=1e-8)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000))
    def test_sorted_and_orthonormal(self, seed):
        s = random_pure_state(4, np.random.default_rng(seed))
        sq = G.squeezing_spectrum(s)
        assert np.all(np.diff(sq.db) <= 1e-12)
        np.testing.assert_allclose(sq.modes @ sq.modes.conj().T, np.eye(4), atol=1e-10)


class TestLSMEvolution:
    def test_linear_oracle(self, rng):
        n, nbar = 4, 3.0
        D = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
        D = D + D.conj().T
        s0 = random_pure_state(n, rng)
        times = [0.0, 0.3, 1.0]
        traj = G.evolve_gaussian_lsm(linear_terms(D, nbar), s0, times, dt=2e-4)
        for t, s in zip(times, traj.states):
            exact = s0.transform(la.expm(-1j * D * t))
            assert np.max(np.abs(s.mu - exact.mu)) < 1e-9
            assert np.max(np.abs(s.N - exact.N)) < 1e-9
            assert np.max(np.abs(s.M - exact.M)) < 1e-9
            assert abs(s.photon_number() - s0.photon_number()) < 1e-9

    def test_fock_cross_check(self):
        nbar = 2.0
        terms = lsm.assemble_terms(lsm.coupling_tensors(lsm.soliton_supermodes(nbar, 2)), nbar)
        T0 = core.soliton_period(nbar)
        times = np.linspace(0, 0.05 * T0, 6)
        traj = G.evolve_gaussian_lsm(terms, G.init_gaussian(nbar, 2), times)
        basis = fock.FockBasis(2, 16, max_total=15)
        H = fock.build_hamiltonian(terms, basis)
        psi = fock.evolve_state(H, fock.coherent_state(nbar, basis), times)
        for s, p in zip(traj.states, psi):
            rho = fock.reduced_density(p, 0)
            a = np.sum(np.sqrt(np.arange(1, 16)) * np.diag(rho, -1))
            assert abs(s.mu[0] - a) < 1e-3

    def test_hamiltonian_run_stays_physical(self, terms5_3):
        T0 = core.soliton_period(5.0)
        traj = G.evolve_gaussian_lsm(terms5_3, G.init_gaussian(5.0, 3), np.linspace(0, 3 * T0, 7))
        assert traj.diagnostics["number_drift"] < 1e-7 * 5.0
        for s in traj.states:
            assert G.purity_residual(s) < 1e-6
            assert G.physicality_margin(s) > -1e-6

    def test_unphysical_start_rejected(self):
        s = G.init_gaussian(5.0, 2)
        s.N[1, 1] = -0.5
        with pytest.raises(G.PhysicalityError):
            G.evolve_gaussian_lsm(lsm.assemble_terms(
                lsm.coupling_tensors(lsm.soliton_supermodes(5.0, 2)), 5.0), s, [0.0])

    def test_basis_mismatch(self, terms5_3):
        with pytest.raises(ValueError):
            G.evolve_gaussian_lsm(terms5_3, G.init_gaussian(5.0, 4), [0.1])

    @pytest.mark.xfail(strict=True, reason="V2-on/V2-off loss ratio is about 4.5 here, below the expected 10")
    def test_v2_dominated_loss(self):
        nbar = 25.0
        terms = lsm.assemble_terms(lsm.coupling_tensors(lsm.soliton_supermodes(nbar, 8)), nbar)
        T0 = core.soliton_period(nbar)

        def loss(t):
            s = G.evolve_gaussian_lsm(t, G.init_gaussian(nbar, 8), [T0]).states[-1]
            return nbar - abs(s.mu[0]) ** 2 - s.N[0, 0].real

        assert loss(terms) >= 10 * loss(terms.with_toggles(V2=False))


class TestSingleMode:
    def test_newton_coefficients(self):
        nbar = 7.0
        h = G.normal_order_coefficients(me.h0_diag(nbar, 12))
        np.testing.assert_allclose(h[:3], [0.0, nbar**2 / 24, -nbar / 12], atol=1e-12)
        np.testing.assert_allclose(h[3:], 0.0, atol=1e-9)

    def test_moments_against_fock(self):
        """Normally ordered moments of a displaced squeezed state in a large Fock space."""
        d = 80
        a = fock.annihilation(d)
        ad = a.conj().T
        zeta, alpha = 0.4 * np.exp(0.7j), 1.1 - 0.6j
        S = la.expm(0.5 * (np.conj(zeta) * a @ a - zeta * ad @ ad))
        Dm = la.expm(alpha * ad - np.conj(alpha) * a)
        psi = Dm @ S[:, 0]
        r, th = abs(zeta), np.angle(zeta)
        N = np.sinh(r) ** 2
        M = -np.exp(1j * th) * np.sinh(r) * np.cosh(r)
        for i, j in [(1, 1), (2, 2), (2, 3), (3, 3), (0, 4)]:
            op = np.linalg.matrix_power(ad, i) @ np.linalg.matrix_power(a, j)
            exact = np.vdot(psi, op @ psi)
            assert abs(G.normal_moment(i, j, alpha, N, M) - exact) < 1e-9 * max(1, abs(exact))

    def test_linear_rotation(self):
        out = G.evolve_gaussian_single_mode(np.array([0.0, 2.0]), 1.0 + 0j, [0.0, 0.5, 1.0], dt=1e-3)
        np.testing.assert_allclose(out["a"], np.exp(-2j * np.array([0.0, 0.5, 1.0])), atol=1e-10)

    def test_short_time_kerr(self):
        nbar = 400.0
        cutoff = me.coherent_cutoff(nbar)
        h = me.h0_diag(nbar, cutoff)
        t = np.linspace(0, 0.05 * core.soliton_period(nbar), 5)
        g = G.evolve_gaussian_single_mode(G.normal_order_coefficients(h, 2), np.sqrt(nbar), t, dt=t[1] / 50)
        exact = me.exact_diagonal_evolution(h, np.sqrt(nbar), t)
        assert np.max(np.abs(g["a"] - exact["a"])) < 1e-3 * np.sqrt(nbar)
        np.testing.assert_allclose(g["n"], nbar, rtol=1e-10)


class TestGSSF:
    nbar = 25.0

    def grid(self, nz=128):
        return core.SpatialGrid.default(self.nbar, 80, nz)

    def test_dispersion_only(self):
        grid = self.grid()
        s0 = G.init_gaussian_grid(self.nbar, grid)
        traj = G.evolve_gssf(grid, s0, [0.01, 0.03], self.nbar, dt=0.005, nonlinear=False)
        spec0 = np.abs(np.fft.fft(s0.mu)) ** 2
        for s in traj.states:
            np.testing.assert_allclose(np.abs(np.fft.fft(s.mu)) ** 2, spec0, atol=1e-10 * spec0.max())
            assert np.max(np.abs(s.N)) == 0 and np.max(np.abs(s.M)) == 0

    def test_linear_step_matches_dense(self, rng):
        grid = core.SpatialGrid(1.0, 16)
        s0 = random_pure_state(16, rng, "grid")
        s0.dz = grid.dz
        traj = G.evolve_gssf(grid, s0, [0.02], self.nbar, alpha3=0.01, nonlinear=False)
        F = np.fft.fft(np.eye(16), axis=0)
        U = np.linalg.inv(F) @ np.diag(np.exp(-1j * G.grid_dispersion(grid, 0.01) * 0.02)) @ F
        exact = s0.transform(U)
        s = traj.states[-1]
        for x, y in ((s.mu, exact.mu), (s.N, exact.N), (s.M, exact.M)):
            assert np.max(np.abs(x - y)) < 1e-11

    def test_strang_second_order(self):
        grid = self.grid()
        T0 = core.soliton_period(self.nbar)
        u0 = core.soliton_mode(self.nbar, grid)
        a = []
        for div in (1000, 2000, 4000):
            s = G.evolve_gssf(grid, G.init_gaussian_grid(self.nbar, grid), [T0 / 2], self.nbar,
                              dt=T0 / div).states[-1]
            a.append(G.project_supermode(s, u0, grid)[0])
        d1, d2 = abs(a[0] - a[1]), abs(a[1] - a[2])
        assert 3.0 < d1 / d2 < 5.0
        assert d2 / abs(a[2]) < 1e-6

    def test_purity_and_number(self):
        grid = self.grid()
        T0 = core.soliton_period(self.nbar)
        traj = G.evolve_gssf(grid, G.init_gaussian_grid(self.nbar, grid), [T0 / 2], self.nbar,
                             purity_tol=1e-6)
        assert traj.diagnostics["number_drift"] < 1e-7 * self.nbar
        assert G.physicality_margin(traj.states[-1]) > -1e-6

    def test_rejects_lsm_state(self):
        with pytest.raises(ValueError):
            G.evolve_gssf(self.grid(), G.init_gaussian(5.0, 3), [0.1], 5.0)

    @pytest.mark.slow
    @pytest.mark.xfail(strict=True, reason="differs by about 1.0e-2 sqrt(nbar); LSM-8 is not converged in mode number at nbar = 25")
    def test_matches_lsm_at_nbar_25(self):
        nbar = self.nbar
        T0 = core.soliton_period(nbar)
        times = np.linspace(0, 3 * T0, 13)
        grid = core.SpatialGrid.default(nbar, 80, 256)
        go = G.grid_observables(G.evolve_gssf(grid, G.init_gaussian_grid(nbar, grid), times, nbar, dt=T0 / 1000))
        terms = lsm.assemble_terms(lsm.coupling_tensors(lsm.soliton_supermodes(nbar, 8)), nbar)
        lo = G.lsm_observables(G.evolve_gaussian_lsm(terms, G.init_gaussian(nbar, 8), times), False)
        assert np.max(np.abs(np.abs(go["a0"]) - np.abs(lo["a0"]))) < 1e-3 * np.sqrt(nbar)


class TestProjection:
    def test_soliton_field(self):
        nbar = 5.0
        grid = core.SpatialGrid.default(nbar, 80, 256)
        a0, n0 = G.project_supermode(G.init_gaussian_grid(nbar, grid), core.soliton_mode(nbar, grid), grid)
        assert a0 == pytest.approx(np.sqrt(nbar), rel=1e-10)
        assert n0 == pytest.approx(nbar, rel=1e-10)

    def test_orthogonal_mode(self):
        nbar = 5.0
        grid = core.SpatialGrid.default(nbar, 80, 256)
        b = lsm.soliton_supermodes(nbar, 2, grid)
        mu = np.sqrt(nbar * grid.dz) * b.modes[1]
        n = grid.num_points
        s = G.GaussianState(mu, np.zeros((n, n), complex), np.zeros((n, n), complex), "grid", grid.dz)
        a0, n0 = G.project_supermode(s, b.modes[0], grid)
        assert abs(a0) < 1e-10 and abs(n0) < 1e-10

    def test_quadrature_oracle(self, rng):
        n = 16
        grid = core.SpatialGrid(1.0, n)
        s = random_pure_state(n, rng, "grid")
        u = rng.normal(size=n) + 1j * rng.normal(size=n)
        u /= np.sqrt(np.sum(np.abs(u) ** 2) * grid.dz)
        a0, n0 = G.project_supermode(s, u, grid)
        w = u * np.sqrt(grid.dz)
        cx = np.concatenate([w.real, w.imag])
        cp = np.concatenate([-w.imag, w.real])
        V = s.quadrature_covariance()
        mean = np.sqrt(2) * np.concatenate([s.mu.real, s.mu.imag])
        x0, p0 = cx @ mean, cp @ mean
        assert abs(a0 - (x0 + 1j * p0) / np.sqrt(2)) < 1e-10
        second = cx @ V @ cx + cp @ V @ cp + x0**2 + p0**2
        assert abs(n0 - (second - 1) / 2) < 1e-10


class TestReservoir:
    def test_soliton_only_is_empty(self):
        nbar = 5.0
        grid = core.SpatialGrid.default(nbar, 80, 256)
        k, S = G.reservoir_spectrum(G.init_gaussian_grid(nbar, grid), grid, nbar=nbar)
        assert np.all(np.diff(k) > 0)
        assert np.max(np.abs(S)) < 1e-10

    def test_seed_spectrum(self):
        nbar = 5.0
        b = lsm.soliton_supermodes(nbar, 2)
        k = np.linspace(-10, 10, 41)
        exact = np.sqrt(np.pi / (2 * nbar)) / np.cosh(np.pi * k / nbar)
        np.testing.assert_allclose(np.abs(b.fourier(k)[0]), exact, atol=1e-6)

    def test_first_mode_ratio(self):
        nbar, beta3 = 5.0, 0.1
        b = lsm.soliton_supermodes(nbar, 2)
        k0 = nbar * me.tod_phase_matching(beta3) / np.pi
        u = np.abs(b.fourier([k0])[:, 0]) ** 2
        assert u[1] / u[0] == pytest.approx(12 / (np.pi**2 * beta3**2), rel=0.05)

    def test_lsm_spectrum_single_mode(self):
        nbar = 5.0
        b = lsm.soliton_supermodes(nbar, 3)
        s = G.init_gaussian(nbar, 3)
        s.mu[1] = 0.5
        k = np.linspace(-8, 8, 17)
        S = G.lsm_reservoir_spectrum(s, b, k)
        np.testing.assert_allclose(S, 0.25 * np.abs(b.fourier(k)[1]) ** 2, atol=1e-14)

    def test_grid_and_lsm_agree(self):
        """An LSM state mapped to the grid has the same reservoir spectrum."""
        nbar = 5.0
        grid = core.SpatialGrid.default(nbar, 80, 256)
        b = lsm.soliton_supermodes(nbar, 3, grid)
        s = squeezed_state([0.0, 0.4, 0.2], [np.sqrt(nbar), 0.3, 0.1j])
        W = b.modes.T * np.sqrt(grid.dz)  # a_i = sum_n W[i, n] a_n
        gs = G.GaussianState(W @ s.mu, W.conj() @ s.N @ W.T, W @ s.M @ W.T, "grid", grid.dz)
        k, S = G.reservoir_spectrum(gs, grid, b.modes[0])
        sel = np.abs(k) < 30
        np.testing.assert_allclose(S[sel], G.lsm_reservoir_spectrum(s, b, k[sel]), atol=1e-10)

    def test_dispersive_loss(self):
        k = np.linspace(-10, 10, 201)
        assert G.dispersive_loss(k, np.ones_like(k), 2.0, 1.0) == pytest.approx(2.1)
        with pytest.raises(ValueError):
            G.dispersive_loss(k, np.ones_like(k), 9.5, 1.0)

    def test_csv(self, tmp_path):
        k = np.array([-1.0, 0.0, 1.0])
        G.spectrum_to_csv(tmp_path / "s.csv", k, np.ones(3), 5.0)
        assert (tmp_path / "s.csv").read_text().splitlines()[0] == "pi_k_over_nbar,ckdag_ck"
        obs = {"t": np.array([0.0, 1.0]), "a0": np.array([1.0, 1j]), "n0": np.array([1.0, 1.0])}
        G.series_to_csv(tmp_path / "g.csv", obs, 1.0)
        lines = (tmp_path / "g.csv").read_text().splitlines()
        assert lines[0] == "t_over_T0,re_a0,im_a0,n0,sq1_db,sq2_db,dn3"
        assert len(lines) == 3
