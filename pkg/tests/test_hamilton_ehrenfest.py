import numpy as np
import pytest
from scipy.integrate import quad

from semiqp.errors import CollisionError, InterpolationOutOfRange
from semiqp.hamilton_ehrenfest import (EnsembleState, GaussianPacket,
                                       MomentSet, build_ensemble,
                                       gaussian_initial_moments, he_rhs,
                                       integrate_he, linearized_period,
                                       pack_sym2, pack_sym3, rest_width,
                                       symmetrize, unpack_sym2, unpack_sym3)
from semiqp.symbols import DipoleCosineModel

PI = np.pi


def two_packets(gamma=1.0, x0=PI):
    return [GaussianPacket(1.0, gamma, x0, 0.0),
            GaussianPacket(1.0, gamma, -x0, 0.0)]


# ---------------------------------------------------------------------------
# symmetrization and packing
# ---------------------------------------------------------------------------


def test_symmetrize_rank2():
    out = symmetrize(np.array([[0.0, 1.0], [0.0, 0.0]]))
    assert np.allclose(out, [[0.0, 0.5], [0.5, 0.0]])


def test_symmetrize_idempotent():
    rng = np.random.RandomState(0)
    t = rng.randn(2, 2, 2)
    s = symmetrize(t)
    assert np.allclose(symmetrize(s), s)


def test_symmetrize_rank3_orbit():
    # a single entry with a repeated index spreads over its 3-slot orbit;
    # each slot collects 2 of the 6 axis permutations, so the sum is kept
    t = np.zeros((2, 2, 2))
    t[0, 1, 0] = 6.0
    s = symmetrize(t)
    for idx in [(0, 1, 0), (1, 0, 0), (0, 0, 1)]:
        assert s[idx] == pytest.approx(2.0)
    assert s.sum() == pytest.approx(6.0)
    # fully distinct indices (needs 2n >= 3) give six slots of value 1
    t2 = np.zeros((3, 3, 3))
    t2[0, 1, 2] = 6.0
    s2 = symmetrize(t2)
    assert s2[2, 1, 0] == pytest.approx(1.0)
    assert np.count_nonzero(s2) == 6


def test_pack_unpack_roundtrip():
    rng = np.random.RandomState(1)
    full2 = symmetrize(rng.randn(2, 2))
    assert np.allclose(unpack_sym2(pack_sym2(full2), 2), full2)
    full3 = symmetrize(rng.randn(2, 2, 2))
    assert np.allclose(unpack_sym3(pack_sym3(full3), 2), full3)


def test_momentset_symmetrizes_on_write():
    raw = np.array([[0.0, 2.0], [0.0, 0.0]])
    ms = MomentSet.from_full(2, [1.0, 0, 0, 0], delta2_full={2: raw})
    assert np.allclose(ms.delta2_full(2), [[0.0, 1.0], [1.0, 0.0]])


# ---------------------------------------------------------------------------
# Gaussian initial moments (quadrature oracle)
# ---------------------------------------------------------------------------


def test_gaussian_moments_against_quadrature():
    N, gamma, hbar = 1.3, 0.8, 0.1
    Z, ms = gaussian_initial_moments(N, gamma, 0.4, 0.0, hbar)

    def psi(x):
        return N / hbar ** 0.25 * np.exp(-(x - 0.4) ** 2 / (2 * gamma ** 2 * hbar))

    mu_quad, _ = quad(lambda x: psi(x) ** 2, -10, 10)
    assert ms.mu[0] == pytest.approx(mu_quad, rel=1e-10)
    assert ms.mu[0] == pytest.approx(gamma * N ** 2 * np.sqrt(PI), rel=1e-12)

    xx_quad, _ = quad(lambda x: (x - 0.4) ** 2 * psi(x) ** 2, -10, 10)
    # position-position entry carries hbar^1: Delta_xx(0, hbar) = hbar * D2[x, x]
    assert hbar * ms.delta2_full(2)[1, 1] == pytest.approx(xx_quad, rel=1e-10)

    # momentum variance via |hbar psi'|^2
    def dpsi(x):
        return psi(x) * (-(x - 0.4) / (gamma ** 2 * hbar))

    pp_quad, _ = quad(lambda x: hbar ** 2 * dpsi(x) ** 2, -10, 10)
    assert hbar * ms.delta2_full(2)[0, 0] == pytest.approx(pp_quad, rel=1e-10)


def test_gaussian_moments_odd_zero_and_conventions():
    _, ms = gaussian_initial_moments(1.0, 1.0, PI, 0.0, 0.1)
    assert np.all(ms.delta1 == 0)
    assert np.all(ms.delta3 == 0)
    assert ms.mu[1] == ms.mu[2] == ms.mu[3] == 0
    _, msn = gaussian_initial_moments(1.0, 1.0, PI, 0.0, 0.1,
                                      convention="normalized")
    mu0 = ms.mu[0]
    assert np.allclose(msn.delta2_full(2), ms.delta2_full(2) / mu0)


def test_n1_gamma1_mass_value():
    _, ms = gaussian_initial_moments(1.0, 1.0, 0.0, 0.0, 0.1)
    assert ms.mu[0] == pytest.approx(np.sqrt(PI), rel=1e-12)


# ---------------------------------------------------------------------------
# right-hand side values
# ---------------------------------------------------------------------------


def test_rest_configuration_force():
    """Oracle: direct evaluation with a finite-difference kernel derivative."""
    c, kappa = 3.0, 2.0
    m = DipoleCosineModel(1.0, c)
    st = build_ensemble(two_packets(), 0.1, kappa, 0.0)
    rhs = he_rhs(st, m, order=0)

    def W(u):
        return c ** 2 / (u ** 2 + c ** 2) ** 1.5

    h = 1e-6
    Wx = (W(2 * PI + h) - W(2 * PI - h)) / (2 * h)
    mu2 = np.sqrt(PI)
    expected = np.sin(PI) - kappa * mu2 * Wx  # epsilon*sin X - kappa mu2 dW/dx
    assert rhs.Z[0, 0] == pytest.approx(expected, rel=1e-8)
    assert rhs.Z[0, 1] == 0.0  # Xdot = P = 0
    assert np.all(rhs.mu == 0.0)  # lambda = 0


def test_single_particle_lattice_force():
    m = DipoleCosineModel(1.0, 3.0)
    st = build_ensemble([GaussianPacket(1.0, 1.0, PI / 2, 0.0)], 0.1, 0.0, 0.0)
    rhs = he_rhs(st, m, order=0)
    assert rhs.Z[0, 0] == pytest.approx(1.0)
    assert rhs.mu[0, 0] == 0.0


def test_mass_decay_at_well_bottom():
    # V~(Z) = eps*cos(pi) = -1 with kappa = 0: gain of 2 sqrt(pi)
    m = DipoleCosineModel(1.0, 3.0)
    st = build_ensemble([GaussianPacket(1.0, 1.0, PI, 0.0)], 0.1, 0.0, 1.0)
    rhs = he_rhs(st, m, order=0)
    assert rhs.mu[0, 0] == pytest.approx(2 * np.sqrt(PI), rel=1e-12)


def test_even_reduction_matches_full_rhs():
    m = DipoleCosineModel(1.0, 3.0)
    st = build_ensemble(two_packets(), 0.1, 2.0, 1.0)
    full = he_rhs(st, m, order=3, even_reduction=False)
    red = he_rhs(st, m, order=3, even_reduction=True)
    assert np.allclose(full.flatten(), red.flatten(), atol=1e-15)


def test_order_consistency_nested():
    """Lower-order right-hand sides are exact restrictions of higher ones."""
    m = DipoleCosineModel(1.0, 3.0)
    st = build_ensemble(two_packets(), 0.1, 2.0, 1.0)
    # inject generic odd moments so the consistency is nontrivial
    rng = np.random.RandomState(5)
    st.d1[...] = 0.05 * rng.randn(*st.d1.shape)
    st.d3[...] = 0.02 * rng.randn(*st.d3.shape)
    st.mu[:, 1] = 0.1
    rhss = {k: he_rhs(st, m, order=k) for k in range(4)}
    for low in range(3):
        hi = rhss[low + 1]
        lo = rhss[low]
        assert np.allclose(hi.Z, lo.Z)
        assert np.allclose(hi.mu[:, : low + 1], lo.mu[:, : low + 1])
        if low >= 1:
            assert np.allclose(hi.d1[:, :low], lo.d1[:, :low])
        if low >= 2:
            assert np.allclose(hi.d2[:, : low - 1], lo.d2[:, : low - 1])


def test_collision_guard():
    m = DipoleCosineModel(1.0, 3.0)
    st = build_ensemble([GaussianPacket(1.0, 1.0, 1e-4, 0.0),
                         GaussianPacket(1.0, 1.0, -1e-4, 0.0)], 0.1, 2.0, 0.0)
    with pytest.raises(CollisionError):
        he_rhs(st, m, order=0)


# ---------------------------------------------------------------------------
# integration
# ---------------------------------------------------------------------------


def test_mass_conserved_without_damping():
    m = DipoleCosineModel(1.0, 3.0)
    st = build_ensemble(two_packets(), 0.1, 2.0, 0.0)
    traj = integrate_he(st, m, order=2, even_reduction=True, t_end=20.0, dt=5e-3)
    mu_cols = traj.ys[:, 4:8]  # particle-0 mass block
    assert np.abs(mu_cols[:, 0] - np.sqrt(PI)).max() < 1e-10
    assert np.abs(traj.ys[:, 5]).max() < 1e-10  # mu^(1) stays zero


def test_rk4_step_halving_is_fourth_order():
    m = DipoleCosineModel(1.0, 3.0)
    st = build_ensemble(two_packets(), 0.1, 2.0, 1.0)
    ref = integrate_he(st, m, order=2, even_reduction=True, t_end=1.0, dt=0.005)
    e1 = integrate_he(st, m, order=2, even_reduction=True, t_end=1.0, dt=0.04)
    e2 = integrate_he(st, m, order=2, even_reduction=True, t_end=1.0, dt=0.02)
    err1 = np.abs(e1.ys[-1] - ref.ys[-1]).max()
    err2 = np.abs(e2.ys[-1] - ref.ys[-1]).max()
    assert 12.0 < err1 / err2 < 20.0


def test_mirror_symmetry_preserved():
    m = DipoleCosineModel(1.0, 3.0)
    st = build_ensemble(two_packets(), 0.1, 2.0, 1.0)
    traj = integrate_he(st, m, order=2, even_reduction=True, t_end=20.0, dt=5e-3)
    for i in range(0, len(traj.ts), 400):
        s = traj.state_at_index(i)
        assert abs(s.Z[0, 1] + s.Z[1, 1]) < 1e-10
        assert abs(s.Z[0, 0] + s.Z[1, 0]) < 1e-10
        assert abs(s.mu[0, 0] - s.mu[1, 0]) < 1e-10


def test_even_moments_stay_even_under_full_system():
    m = DipoleCosineModel(1.0, 3.0)
    st = build_ensemble(two_packets(), 0.1, 2.0, 1.0)
    traj = integrate_he(st, m, order=3, even_reduction=False, t_end=20.0, dt=0.01)
    st_end = traj.state_at_index(len(traj.ts) - 1)
    assert np.abs(st_end.mu[:, 1::2]).max() < 1e-10
    assert np.abs(st_end.d1[:, 0]).max() < 1e-10
    assert np.abs(st_end.d1[:, 2]).max() < 1e-10
    assert np.abs(st_end.d2[:, 1]).max() < 1e-10
    assert np.abs(st_end.d3).max() < 1e-10


def test_momentum_conservation_without_lattice():
    # relative-position kernel only: the mass-weighted momentum is conserved
    m = DipoleCosineModel(epsilon=0.0, c=3.0)
    pk = [GaussianPacket(1.0, 1.0, 2.0, 0.3), GaussianPacket(1.2, 1.0, -2.0, 0.0)]
    st = build_ensemble(pk, 0.1, 2.0, 0.0)
    traj = integrate_he(st, m, order=0, t_end=5.0, dt=2e-3)
    # flat layout is field major: Z block first (P1, X1, P2, X2), then mu
    total = (traj.ys[:, 4] * traj.ys[:, 0]
             + traj.ys[:, 8] * traj.ys[:, 2])
    assert np.abs(total - total[0]).max() < 1e-9


def test_interpolation_accuracy_and_range():
    m = DipoleCosineModel(1.0, 3.0)
    st = build_ensemble(two_packets(), 0.1, 2.0, 0.0)
    traj = integrate_he(st, m, order=0, t_end=2.0, dt=0.01)
    fine = integrate_he(st, m, order=0, t_end=2.0, dt=0.001)
    t = 1.2345
    a = traj.interpolate(t)
    b = fine.interpolate(t)
    assert np.abs(a.Z - b.Z).max() < 1e-8
    with pytest.raises(InterpolationOutOfRange):
        traj.interpolate(2.5)


# ---------------------------------------------------------------------------
# closed-form helpers
# ---------------------------------------------------------------------------


def test_rest_width_values():
    assert rest_width(1.0) == pytest.approx(1.0)
    assert rest_width(16.0) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        rest_width(0.0)


def test_linearized_period_printed_formula():
    assert linearized_period(1.0, 2.0, 1.0, 1.0, 3.0) == pytest.approx(6.36, abs=5e-3)
    assert linearized_period(1.0, 0.0, 1.0, 1.0, 3.0) == pytest.approx(2 * PI)
    assert linearized_period(1.0, 2.0, 1.0, 1.0, 1e6) == pytest.approx(2 * PI, rel=1e-6)


def test_flatten_roundtrip():
    st = build_ensemble(two_packets(), 0.1, 2.0, 1.0)
    vec = st.flatten()
    st2 = st.from_flat(vec, t=0.7)
    assert st2.t == 0.7
    assert np.allclose(st2.Z, st.Z)
    assert np.allclose(st2.d2, st.d2)


def test_particles_view_and_positive_mass():
    st = build_ensemble(two_packets(), 0.1, 2.0, 1.0)
    parts = st.particles
    assert len(parts) == 2
    assert parts[0].moments.mu[0] > 0
    with pytest.raises(ValueError):
        build_ensemble([GaussianPacket(0.0, 1.0, 0.0, 0.0)], 0.1, 0.0, 0.0)
