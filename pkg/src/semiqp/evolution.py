"""Semiclassical evolution operator built on the moment hierarchy.

Around each trajectory Z_s(t) the field equation linearizes to a quadratic
Hamiltonian with coefficients

    H0 = V(Z_s) + kappa sum_r [ mu_r W + D_{r,j} W_{|j} + 1/2 D_{r,jk} W_{|jk} ]
         - i hbar Lam ( V~(Z_s) + kappa sum_r mu_r W~ )
    H1_i = V_i(Z_s) + kappa sum_r [ mu_r W_{i|} + D_{r,j} W_{i|j} ]
    H2_ij = V_ij(Z_s) + kappa sum_r mu_r W_{ij|}

where every moment is the full hbar series from the integrated hierarchy.
The linearized flow matrix M solves  dM/dt = -M H2 J,  M(0) = 1, and its
blocks M = [[M1, -M3], [-M2, M4]] build the Gaussian Green kernel

    G(x, y, t) = det(-2 pi i hbar M3)^{-1/2}
                 * exp{ (i/hbar) [ phi(t) + <P(t), dx> - <P(0), dy>
                        - 1/2 <dx, M3^{-1} M1 dx> + <dx, M3^{-1} dy>
                        - 1/2 <dy, M4 M3^{-1} dy> ] }

with dx = x - X(t), dy = y - X(0) and the complex phase
phi(t) = int_0^t ( <P, Xdot> - H0 ) dtau.  For Gaussian initial data the
kernel integral has the closed form evaluated by ``leading_term_gaussian``;
``propagate_quadrature`` performs the same integral numerically for general
data, and ``first_correction_1d`` evaluates the next-order Duhamel integral
for the one-dimensional model family (momentum-independent kernels,
V = p^2/2 + U(x)).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (CausticSingular, GridMismatch, InterpolationOutOfRange,
                     NonFinite, QuadratureNotConverged, TruncationWarning,
                     UnsupportedOrder)
from .hamilton_ehrenfest import (GaussianPacket, HeTrajectory, J_matrix,
                                 _hermite_eval)
from .symbols import ANTIHERMITIAN, HERMITIAN

import warnings

# ---------------------------------------------------------------------------
# ALSE coefficients
# ---------------------------------------------------------------------------


@dataclass
class AlseCoefficients:
    """Quadratic expansion coefficients of the associated linear equation."""

    H0: complex
    H1: np.ndarray  # (2n,), complex
    H2: np.ndarray  # (2n, 2n), real symmetric


def alse_coefficients(traj: HeTrajectory, model, s, t) -> AlseCoefficients:
    """Expansion coefficients for particle s at time t.

    Needs the hierarchy integrated at least to order 2 (full-series masses
    and second moments enter the scalar term).
    """
    if traj.order < 2:
        raise UnsupportedOrder("alse coefficients need a hierarchy of order >= 2")
    state = traj.interpolate(t)
    return _alse_from_state(state, model, s)


def _alse_from_state(state, model, s):
    d = state.d
    kappa = state.kappa
    lam = state.lam
    hbar = state.hbar
    t = state.t
    Z = state.Z
    zs = Z[s]

    V0 = model.potential_tensor(HERMITIAN, zs[None, :], t, 0)[0]
    V1 = model.potential_tensor(HERMITIAN, zs[None, :], t, 1)[0]
    V2 = model.potential_tensor(HERMITIAN, zs[None, :], t, 2)[0]
    Vb0 = model.potential_tensor(ANTIHERMITIAN, zs[None, :], t, 0)[0]

    H0 = complex(V0)
    H1 = V1.astype(complex)
    H2 = V2.copy()
    damp = float(Vb0)

    if kappa != 0.0:
        W00 = model.kernel_tensor(HERMITIAN, Z, t, 0, 0)[s]
        W01 = model.kernel_tensor(HERMITIAN, Z, t, 0, 1)[s]
        W02 = model.kernel_tensor(HERMITIAN, Z, t, 0, 2)[s]
        W10 = model.kernel_tensor(HERMITIAN, Z, t, 1, 0)[s]
        W11 = model.kernel_tensor(HERMITIAN, Z, t, 1, 1)[s]
        W20 = model.kernel_tensor(HERMITIAN, Z, t, 2, 0)[s]
        Wb00 = model.kernel_tensor(ANTIHERMITIAN, Z, t, 0, 0)[s]
        for r in range(state.K):
            mu_r, D1_r, D2_r, _ = state.full_moments(r)
            H0 += kappa * (mu_r * W00[r] + W01[r] @ D1_r
                           + 0.5 * np.tensordot(W02[r], D2_r, 2))
            H1 += kappa * (mu_r * W10[r] + W11[r] @ D1_r)
            H2 += kappa * mu_r * W20[r]
            # damping scalar takes the order-0 masses: the higher orders
            # shift it only at O(hbar^2) in the operator, and this choice
            # keeps the leading-term norm on the order-0 mass law exactly
            damp += kappa * state.mu[r, 0] * Wb00[r]
    H0 += -1j * hbar * lam * damp
    H2 = 0.5 * (H2 + H2.T)
    return AlseCoefficients(H0=H0, H1=H1, H2=H2)


# ---------------------------------------------------------------------------
# linearized flow matrix
# ---------------------------------------------------------------------------


@dataclass
class MMatrix:
    """2n x 2n linearized flow matrix with block accessors."""

    M: np.ndarray

    @property
    def n(self):
        return self.M.shape[0] // 2

    @property
    def M1(self):
        return self.M[: self.n, : self.n]

    @property
    def M2(self):
        return -self.M[self.n:, : self.n]

    @property
    def M3(self):
        return -self.M[: self.n, self.n:]

    @property
    def M4(self):
        return self.M[self.n:, self.n:]

    def symplectic_defect(self):
        J = J_matrix(self.n)
        return float(np.abs(self.M @ J @ self.M.T - J).max())


@dataclass
class MMatrixSeries:
    """RK4 solution of dM/dt = -M H2 J on a fixed grid, with dense output."""

    ts: np.ndarray
    Ms: np.ndarray      # (N+1, 2n, 2n)
    Mdots: np.ndarray
    defects: np.ndarray

    @property
    def n(self):
        return self.Ms.shape[1] // 2

    def _locate(self, t):
        ts = self.ts
        if t < ts[0] - 1e-12 or t > ts[-1] + 1e-12:
            raise InterpolationOutOfRange(
                f"t={t} outside M-matrix span [{ts[0]}, {ts[-1]}]")
        return int(np.clip(np.searchsorted(ts, t) - 1, 0, len(ts) - 2))

    def interpolate(self, t):
        i = self._locate(t)
        if abs(t - self.ts[i]) < 1e-14:
            return MMatrix(self.Ms[i].copy())
        if abs(t - self.ts[i + 1]) < 1e-14:
            return MMatrix(self.Ms[i + 1].copy())
        M = _hermite_eval(t, self.ts[i], self.ts[i + 1], self.Ms[i],
                          self.Ms[i + 1], self.Mdots[i], self.Mdots[i + 1])
        return MMatrix(M)

    def max_defect(self):
        return float(self.defects.max())


def _h2_from_state(state, model, s):
    """Hessian block alone (hot path of the M integration)."""
    V2 = model.potential_tensor(HERMITIAN, state.Z[s][None, :], state.t, 2)[0]
    H2 = V2
    if state.kappa != 0.0:
        W20 = model.kernel_tensor(HERMITIAN, state.Z, state.t, 2, 0)[s]
        mu_full = state.mu @ np.array([1.0, state.hbar ** 0.5, state.hbar,
                                       state.hbar ** 1.5])
        H2 = H2 + state.kappa * np.einsum("r,rab->ab", mu_full, W20)
    return 0.5 * (H2 + H2.T)


def integrate_m_matrix(traj: HeTrajectory, model, s, t_end, dt) -> MMatrixSeries:
    """Integrate the in-variations system along the particle-s trajectory."""
    n = traj.template.n
    J = J_matrix(n)

    def h2(t):
        return _h2_from_state(traj.interpolate(t), model, s)

    def f(M, t):
        return -M @ h2(t) @ J

    nsteps = int(round(t_end / dt))
    ts = np.empty(nsteps + 1)
    Ms = np.empty((nsteps + 1, 2 * n, 2 * n))
    Mdots = np.empty_like(Ms)
    defects = np.empty(nsteps + 1)
    M = np.eye(2 * n)
    t = 0.0
    k1 = f(M, t)
    for i in range(nsteps + 1):
        ts[i] = t
        Ms[i] = M
        Mdots[i] = k1
        defects[i] = MMatrix(M).symplectic_defect()
        if i == nsteps:
            break
        k2 = f(M + 0.5 * dt * k1, t + 0.5 * dt)
        k3 = f(M + 0.5 * dt * k2, t + 0.5 * dt)
        k4 = f(M + dt * k3, t + dt)
        M = M + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        t += dt
        if not np.all(np.isfinite(M)):
            raise NonFinite(f"non-finite M matrix at t={t:.6f}")
        k1 = f(M, t)
    return MMatrixSeries(ts=ts, Ms=Ms, Mdots=Mdots, defects=defects)


# ---------------------------------------------------------------------------
# action phases
# ---------------------------------------------------------------------------


@dataclass
class ActionPhase:
    """Real action S and complex kernel phase at one time."""

    S: float
    phi_complex: complex


@dataclass
class ActionPhaseSeries:
    ts: np.ndarray
    S: np.ndarray            # real
    phi: np.ndarray          # complex
    Sdot: np.ndarray
    phidot: np.ndarray

    def _locate(self, t):
        ts = self.ts
        if t < ts[0] - 1e-12 or t > ts[-1] + 1e-12:
            raise InterpolationOutOfRange(
                f"t={t} outside action span [{ts[0]}, {ts[-1]}]")
        return int(np.clip(np.searchsorted(ts, t) - 1, 0, len(ts) - 2))

    def at(self, t) -> ActionPhase:
        i = self._locate(t)
        if abs(t - self.ts[i]) < 1e-14:
            return ActionPhase(float(self.S[i]), complex(self.phi[i]))
        S = _hermite_eval(t, self.ts[i], self.ts[i + 1], self.S[i],
                          self.S[i + 1], self.Sdot[i], self.Sdot[i + 1])
        phi = _hermite_eval(t, self.ts[i], self.ts[i + 1], self.phi[i],
                            self.phi[i + 1], self.phidot[i], self.phidot[i + 1])
        return ActionPhase(float(S), complex(phi))


def integrate_action(traj: HeTrajectory, model, s, t_end, dt) -> ActionPhaseSeries:
    """Accumulate the real action and the complex kernel phase.

        dS/dt   = <P, Xdot> - ( V + kappa sum_r [ mu_r W + D_{r,j} W_{|j} ] )
        dphi/dt = <P, Xdot> - H0
    """
    if traj.order < 2:
        raise UnsupportedOrder("action integration needs hierarchy order >= 2")
    n = traj.template.n
    kappa = traj.template.kappa

    def integrands(t):
        state = traj.interpolate(t)
        coeffs = _alse_from_state(state, model, s)
        zs = state.Z[s]
        P = zs[:n]
        # order-0 trajectory velocity: Xdot block of J H1^(0)
        xdot = _trajectory_xdot(state, model, s)
        pdx = float(np.dot(P, xdot))
        V0 = model.potential_tensor(HERMITIAN, zs[None, :], state.t, 0)[0]
        sdot = pdx - float(V0)
        if kappa != 0.0:
            W00 = model.kernel_tensor(HERMITIAN, state.Z, state.t, 0, 0)[s]
            W01 = model.kernel_tensor(HERMITIAN, state.Z, state.t, 0, 1)[s]
            for r in range(state.K):
                mu_r, D1_r, _, _ = state.full_moments(r)
                sdot -= kappa * (mu_r * W00[r] + W01[r] @ D1_r)
        phidot = pdx - coeffs.H0
        return sdot, phidot

    nsteps = int(round(t_end / dt))
    ts = np.empty(nsteps + 1)
    S = np.zeros(nsteps + 1)
    phi = np.zeros(nsteps + 1, dtype=complex)
    Sdot = np.empty(nsteps + 1)
    phidot = np.empty(nsteps + 1, dtype=complex)
    s_acc = 0.0
    p_acc = 0.0 + 0.0j
    t = 0.0
    d1, dp1 = integrands(t)
    for i in range(nsteps + 1):
        ts[i] = t
        S[i] = s_acc
        phi[i] = p_acc
        Sdot[i] = d1
        phidot[i] = dp1
        if i == nsteps:
            break
        d2, dp2 = integrands(t + 0.5 * dt)
        d4, dp4 = integrands(t + dt)
        s_acc += (dt / 6.0) * (d1 + 4.0 * d2 + d4)
        p_acc += (dt / 6.0) * (dp1 + 4.0 * dp2 + dp4)
        t += dt
        d1, dp1 = d4, dp4
    return ActionPhaseSeries(ts=ts, S=S, phi=phi, Sdot=Sdot, phidot=phidot)


def _trajectory_xdot(state, model, s):
    """Position part of the zeroth-order flow J H_z^(0) at particle s."""
    n = state.n
    V1 = model.potential_tensor(HERMITIAN, state.Z, state.t, 1)
    H1 = V1[s].copy()
    if state.kappa != 0.0:
        W10 = model.kernel_tensor(HERMITIAN, state.Z, state.t, 1, 0)[s]
        H1 += state.kappa * (state.mu[:, 0] @ W10)
    return H1[:n]  # Xdot = dH/dp


# ---------------------------------------------------------------------------
# Green kernel and propagation
# ---------------------------------------------------------------------------


def _kernel_pieces(t, s, phase, mseries, traj, caustic_tol=1e-10):
    """Common factors of the Green kernel at time t."""
    n = traj.template.n
    M = mseries.interpolate(t)
    M1, M3, M4 = M.M1, M.M3, M.M4
    detM3 = float(np.linalg.det(M3))
    if abs(detM3) < caustic_tol:
        raise CausticSingular(f"det M3 = {detM3:.3e} at t={t}: focal point")
    M3inv = np.linalg.inv(M3)
    st_t = traj.interpolate(t)
    st_0 = traj.interpolate(traj.ts[0])
    P_t = st_t.Z[s, :n]
    X_t = st_t.Z[s, n:]
    P_0 = st_0.Z[s, :n]
    X_0 = st_0.Z[s, n:]
    ph = phase.at(t)
    return M1, M3, M4, M3inv, detM3, P_t, X_t, P_0, X_0, ph


def green_kernel(x, y, t, s, phase, mseries, traj, hbar=None, caustic_tol=1e-10):
    """Gaussian Green kernel value G(x, y, t) for particle s.

    Valid between focal points; raises CausticSingular when |det M3| falls
    below ``caustic_tol``.  The square-root branch is the principal one,
    correct on the first caustic-free interval starting at t = 0+.
    """
    hbar = traj.hbar if hbar is None else hbar
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    M1, M3, M4, M3inv, detM3, P_t, X_t, P_0, X_0, ph = _kernel_pieces(
        t, s, phase, mseries, traj, caustic_tol)
    dx = x - X_t
    dy = y - X_0
    A = M3inv @ M1
    B = M4 @ M3inv
    quad = (-0.5 * dx @ A @ dx + dx @ M3inv @ dy - 0.5 * dy @ B @ dy)
    expo = (1j / hbar) * (ph.phi_complex + P_t @ dx - P_0 @ dy + quad)
    pref = 1.0 / np.sqrt(np.complex128((-2j * math.pi * hbar) ** mseries.n * detM3))
    return complex(pref * np.exp(expo))


def propagate_quadrature(psi0_grid, y_grid, x_grid, t, s, phase, mseries, traj,
                         hbar=None, caustic_tol=1e-10, tail_tol=1e-12):
    """Trapezoid quadrature of the kernel integral (1d grids).

    Warns with TruncationWarning when the relative tail mass of psi0 at the
    edges of ``y_grid`` exceeds ``tail_tol``.
    """
    hbar = traj.hbar if hbar is None else hbar
    psi0_grid = np.asarray(psi0_grid, dtype=complex)
    y = np.asarray(y_grid, dtype=float)
    x = np.asarray(x_grid, dtype=float)
    if psi0_grid.shape != y.shape:
        raise GridMismatch("psi0 and y_grid must share a shape")
    if np.all(psi0_grid == 0):
        return np.zeros(x.shape, dtype=complex)
    dens = np.abs(psi0_grid) ** 2
    total = float(np.trapezoid(dens, y))
    edge = float(max(dens[0], dens[-1]) * (y[1] - y[0]))
    if total > 0 and edge / total > tail_tol:
        warnings.warn("psi0 tail mass outside y_grid exceeds tolerance",
                      TruncationWarning, stacklevel=2)
    M1, M3, M4, M3inv, detM3, P_t, X_t, P_0, X_0, ph = _kernel_pieces(
        t, s, phase, mseries, traj, caustic_tol)
    a11 = float((M3inv @ M1)[0, 0])
    a12 = float(M3inv[0, 0])
    a22 = float((M4 @ M3inv)[0, 0])
    dx = x - float(X_t[0])
    dy = y - float(X_0[0])
    pref = 1.0 / np.sqrt(np.complex128(-2j * math.pi * hbar * detM3))
    phase_x = (1j / hbar) * (ph.phi_complex + float(P_t[0]) * dx - 0.5 * a11 * dx ** 2)
    phase_y = (1j / hbar) * (-float(P_0[0]) * dy - 0.5 * a22 * dy ** 2)
    cross = (1j / hbar) * a12 * np.outer(dx, dy)
    integrand = np.exp(cross + phase_y[None, :]) * psi0_grid[None, :]
    w = np.full(y.size, y[1] - y[0])
    w[0] *= 0.5
    w[-1] *= 0.5
    return pref * np.exp(phase_x) * (integrand @ w)


# ---------------------------------------------------------------------------
# closed-form Gaussian leading term
# ---------------------------------------------------------------------------


def _unwrapped_sqrt_at(mseries, t, gamma2):
    """Continuous branch of sqrt(gamma^2 M4 - i M3) along the series (n=1)."""
    idx = mseries._locate(t)
    M3s = -mseries.Ms[: idx + 2, 0, 1]
    M4s = mseries.Ms[: idx + 2, 1, 1]
    w = gamma2 * M4s - 1j * M3s
    ang = np.unwrap(np.angle(w))
    Mt = mseries.interpolate(t)
    wt = gamma2 * float(Mt.M4[0, 0]) - 1j * float(Mt.M3[0, 0])
    # continue the unwrapped angle from the last full sample to t
    base = ang[idx]
    dang = np.angle(wt / w[idx])
    theta = base + dang
    return np.sqrt(abs(wt)) * np.exp(0.5j * theta)


def winding_number_1d(gamma, mseries, t):
    """Accumulated angle of gamma^2 M4 - i M3 over [0, t] (diagnostic)."""
    idx = mseries._locate(t)
    M3s = -mseries.Ms[: idx + 2, 0, 1]
    M4s = mseries.Ms[: idx + 2, 1, 1]
    ang = np.unwrap(np.angle(gamma ** 2 * M4s - 1j * M3s))
    return float(ang[idx] - ang[0])


def varpi_width(gamma, M: MMatrix):
    """Complex width parameter of the evolved Gaussian (n = 1).

    varpi = (i M1 - gamma^2 M2) / (M3 + i gamma^2 M4); by det M = 1 this is
    the regular form of (gamma^2 + i M1 (M3 + i gamma^2 M4)) /
    (M3 (M3 + i gamma^2 M4)) and satisfies varpi(0) = 1/gamma^2 without a
    removable singularity.  Re varpi = gamma^2 det M / |M3 + i gamma^2 M4|^2
    stays positive for all t.
    """
    g2 = gamma ** 2
    m1 = float(M.M1[0, 0])
    m2 = float(M.M2[0, 0])
    m3 = float(M.M3[0, 0])
    m4 = float(M.M4[0, 0])
    return (1j * m1 - g2 * m2) / (m3 + 1j * g2 * m4)


def leading_term_gaussian(packet: GaussianPacket, s, traj, phase, mseries,
                          x_grid, t, hbar=None):
    """Closed-form evolved Gaussian of particle s on ``x_grid`` at time t.

    psi(x, t) = N gamma / (hbar^{1/4} sqrt(gamma^2 M4 - i M3))
                * exp{ -varpi dx^2 / (2 hbar)
                       + (i/hbar) (phi(t) + P(t) dx) }

    The prefactor branch is tracked continuously along the M series, so the
    expression stays valid across focal points of the bare kernel.
    Restricted to n = 1 and packets with P0 = 0 (the model family's data).
    """
    if traj.template.n != 1:
        raise UnsupportedOrder("closed-form leading term is 1d only")
    hbar = traj.hbar if hbar is None else hbar
    x = np.asarray(x_grid, dtype=float)
    g2 = packet.gamma ** 2
    M = mseries.interpolate(t)
    st = traj.interpolate(t)
    P_t = float(st.Z[s, 0])
    X_t = float(st.Z[s, 1])
    ph = phase.at(t)
    root = _unwrapped_sqrt_at(mseries, t, g2)
    varpi = varpi_width(packet.gamma, M)
    dx = x - X_t
    amp = packet.N * packet.gamma / (hbar ** 0.25 * root)
    return amp * np.exp(-varpi * dx ** 2 / (2.0 * hbar)
                        + (1j / hbar) * (ph.phi_complex + P_t * dx))


# ---------------------------------------------------------------------------
# first correction (1d Duhamel integral)
# ---------------------------------------------------------------------------


def _two_time_blocks(mseries, t, tau):
    """Blocks of Phi(t, tau) = M(tau)^{-1} M(t) for n = 1."""
    Mt = mseries.interpolate(t).M
    Mtau = mseries.interpolate(tau).M
    Phi = np.linalg.solve(Mtau, Mt)
    return Phi[0, 0], -Phi[1, 0], -Phi[0, 1], Phi[1, 1]  # F1, F2, F3, F4


def _correction_coefficients(state, model, s, varpi_tau):
    """Polynomial coefficients (c0..c3) of the cubic-order generator acting
    on the Gaussian, for 1d models with momentum-independent kernels and
    V = p^2/2 + U(x).  Momentum-derivative action contributes through
    Dp psi = i varpi dx psi."""
    kappa = state.kappa
    lam = state.lam
    hbar = state.hbar
    t = state.t
    Z = state.Z
    zs = Z[s]
    V3 = model.potential_tensor(HERMITIAN, zs[None, :], t, 3)[0]
    Vb1 = model.potential_tensor(ANTIHERMITIAN, zs[None, :], t, 1)[0]
    c3 = V3[1, 1, 1] / 6.0
    c2 = 0.0 + 0.0j
    c1 = complex(-1j * hbar * lam * Vb1[1] + hbar * lam * Vb1[0] * varpi_tau)
    c0 = 0.0 + 0.0j
    if kappa != 0.0:
        W30 = model.kernel_tensor(HERMITIAN, Z, t, 3, 0)[s]
        W21 = model.kernel_tensor(HERMITIAN, Z, t, 2, 1)[s]
        W12 = model.kernel_tensor(HERMITIAN, Z, t, 1, 2)[s]
        W03 = model.kernel_tensor(HERMITIAN, Z, t, 0, 3)[s]
        Wb10 = model.kernel_tensor(ANTIHERMITIAN, Z, t, 1, 0)[s]
        Wb01 = model.kernel_tensor(ANTIHERMITIAN, Z, t, 0, 1)[s]
        for r in range(state.K):
            mu_r, D1_r, D2_r, D3_r = state.full_moments(r)
            c3 += (kappa / 6.0) * mu_r * W30[r][1, 1, 1]
            c2 += 0.5 * kappa * (W21[r][1, 1, :] @ D1_r)
            c1 += 0.5 * kappa * np.tensordot(W12[r][1], D2_r, 2)
            c1 += -1j * hbar * lam * kappa * mu_r * Wb10[r][1]
            c1 += hbar * lam * kappa * mu_r * Wb10[r][0] * varpi_tau
            c0 += (kappa / 6.0) * np.tensordot(W03[r], D3_r, 3)
            c0 += -1j * hbar * lam * kappa * (Wb01[r] @ D1_r)
    return complex(c0), complex(c1), complex(c2), complex(c3)


def first_correction_1d(packet: GaussianPacket, s, traj, model, phase, mseries,
                        x_grid, t, quad_steps=64, tol=1e-4, caustic_tol=1e-10):
    """Next-order correction field at time t via the Duhamel integral.

    The cubic remainder of the generator acts on the closed-form Gaussian
    and is propagated to time t with the two-time kernel built from
    Phi(t, tau) = M(tau)^{-1} M(t).  The y-integral is closed-form Gaussian
    moments; the tau-integral uses composite midpoint panels and is accepted
    only when doubling the panel count moves the result by less than ``tol``
    in relative L2 (the returned field is the doubled-panel one).

    Needs the hierarchy at order >= 3 and a model with momentum-independent
    kernels; raises CausticSingular when a tau node lands on a focal point
    of the two-time flow.
    """
    if traj.template.n != 1:
        raise UnsupportedOrder("first correction implemented for n = 1")
    if traj.order < 3:
        raise UnsupportedOrder("first correction needs hierarchy order >= 3")
    if t <= 0.0:
        return np.zeros(np.asarray(x_grid).shape, dtype=complex)
    coarse = _duhamel_integral(packet, s, traj, model, phase, mseries,
                               x_grid, t, quad_steps, caustic_tol)
    fine = _duhamel_integral(packet, s, traj, model, phase, mseries,
                             x_grid, t, 2 * quad_steps, caustic_tol)
    ref = np.linalg.norm(fine)
    if ref > 0 and np.linalg.norm(fine - coarse) / ref > tol:
        raise QuadratureNotConverged(
            "Duhamel tau-integral not converged: doubling quad_steps moved "
            f"the field by {np.linalg.norm(fine - coarse) / ref:.2e} (> {tol})")
    return fine


def _duhamel_integral(packet, s, traj, model, phase, mseries, x_grid, t,
                      quad_steps, caustic_tol):
    hbar = traj.hbar
    g = packet.gamma
    g2 = g * g
    x = np.asarray(x_grid, dtype=float)
    st_t = traj.interpolate(t)
    P_t = float(st_t.Z[s, 0])
    X_t = float(st_t.Z[s, 1])
    dx = x - X_t
    ph_t = phase.at(t)

    taus = (np.arange(quad_steps) + 0.5) * (t / quad_steps)
    dtau = t / quad_steps

    # per-node kernel/packet factors, with branch bookkeeping:
    #   q(tau) = varpi(tau) Phi3 + i Phi4 stays off zero; its argument is
    #   unwrapped along tau and pinned to arg(i) at tau -> t where Phi = 1
    F1s = np.empty(quad_steps)
    F3s = np.empty(quad_steps)
    qs = np.empty(quad_steps, dtype=complex)
    cs = np.empty((quad_steps, 4), dtype=complex)
    for i, tau in enumerate(taus):
        F1, F2, F3, F4 = _two_time_blocks(mseries, t, tau)
        if abs(F3) < caustic_tol:
            raise CausticSingular(
                f"two-time flow focal at tau={tau:.6f} (Phi3={F3:.2e})")
        M_tau = mseries.interpolate(tau)
        varpi = varpi_width(g, M_tau)
        qs[i] = varpi * F3 + 1j * F4
        F1s[i] = F1
        F3s[i] = F3
        state = traj.interpolate(tau)
        cs[i] = _correction_coefficients(state, model, s, varpi)

    # continuous branches along the node sequence
    ang_q = np.unwrap(np.angle(np.append(qs, 1j)))  # Phi(t,t) = 1 -> q = i
    ang_q += (math.pi / 2.0 - ang_q[-1])
    logq = np.log(np.abs(qs)) + 1j * ang_q[:-1]
    roots0 = np.array([_unwrapped_sqrt_at(mseries, tau, g2) for tau in taus])

    # the tau- and (t - tau)-phase integrals concatenate to phi(t), pulled
    # out below; only x-dependent and flow-dependent factors vary per node
    out = np.zeros(x.size, dtype=complex)
    for i in range(quad_steps):
        F1, F3 = F1s[i], F3s[i]
        a = qs[i] / (hbar * F3)
        b = 1j * dx / (hbar * F3)
        c0, c1, c2, c3 = cs[i]
        poly = (a ** 3 * c0 + a ** 2 * (b * c1 + c2)
                + a * b * (b * c2 + 3.0 * c3) + b ** 3 * c3)
        # (-i Phi3)^{-1/2} a^{-7/2} = e^{i pi/4} hbar^{7/2} Phi3^3 q^{-7/2}
        pref = (np.exp(1j * math.pi / 4.0) * hbar ** 3.5 * F3 ** 3
                * np.exp(-3.5 * logq[i]))
        gauss = np.exp(b * b / (2.0 * a) - 0.5j * F1 / (hbar * F3) * dx ** 2)
        out += pref / roots0[i] * poly * gauss
    out *= dtau
    # Duhamel 1/(i hbar^{3/2}), packet amplitude N g / hbar^{1/4}, and the
    # hbar^{-1/2} left from the kernel prefactor after the moment integral
    out *= packet.N * g / (1j * hbar ** 2.25)
    out *= np.exp((1j / hbar) * (ph_t.phi_complex + P_t * dx))
    return out


# ---------------------------------------------------------------------------
# assembly and observables
# ---------------------------------------------------------------------------


@dataclass
class AsymptoticSolution:
    """Assembled multi-particle field on a shared grid.

    psi0 is the sum of the leading terms; psi1 (optional) the sum of the
    first corrections, entering the total field as psi0 + sqrt(hbar) psi1.
    """

    grid: np.ndarray
    psi0: np.ndarray
    hbar: float
    psi1: np.ndarray | None = None

    @property
    def psi(self):
        if self.psi1 is None:
            return self.psi0
        return self.psi0 + math.sqrt(self.hbar) * self.psi1

    @property
    def density(self):
        return np.abs(self.psi) ** 2

    def norm2(self):
        """Quadrature of |psi|^2 over the grid."""
        return float(np.trapezoid(self.density, self.grid))

    def norm2_leading(self):
        return float(np.trapezoid(np.abs(self.psi0) ** 2, self.grid))


def assemble_solution(psi0_list, grid, hbar, psi1_list=None) -> AsymptoticSolution:
    """Pointwise sum of per-particle fields sampled on one shared grid."""
    grid = np.asarray(grid, dtype=float)
    psi0 = np.zeros(grid.shape, dtype=complex)
    for f in psi0_list:
        f = np.asarray(f)
        if f.shape != grid.shape:
            raise GridMismatch("per-particle field does not match the grid")
        psi0 = psi0 + f
    psi1 = None
    if psi1_list is not None:
        psi1 = np.zeros(grid.shape, dtype=complex)
        for f in psi1_list:
            f = np.asarray(f)
            if f.shape != grid.shape:
                raise GridMismatch("per-particle correction does not match the grid")
            psi1 = psi1 + f
    return AsymptoticSolution(grid=grid, psi0=psi0, psi1=psi1, hbar=hbar)


def dispersion(traj: HeTrajectory, s, t):
    """Position dispersion hbar D_xx^(2) / (mu^(0) + hbar mu^(2)) (n = 1)."""
    if traj.template.n != 1:
        raise UnsupportedOrder("dispersion ratio implemented for n = 1")
    if traj.order < 2:
        raise UnsupportedOrder("dispersion needs hierarchy order >= 2")
    st = traj.interpolate(t)
    h = traj.hbar
    from .hamilton_ehrenfest import unpack_sym2
    D2 = unpack_sym2(st.d2[s, 0], st.d)
    return float(h * D2[1, 1] / (st.mu[s, 0] + h * st.mu[s, 2]))
