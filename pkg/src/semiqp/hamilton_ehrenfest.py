"""K-particle moment hierarchy for semiclassical quasiparticles.

Each quasiparticle s carries a trajectory Z_s = (P_s, X_s), mass
coefficients mu_s^(k) and central moments Delta^(k) ordered by
half-integer powers of hbar (order k contributes hbar^{k/2}).  The
hierarchy is closed at k <= 3.

The right-hand side is assembled from effective symbol derivatives

    H_m^(k)[s] = delta_{k0} V_m(Z_s)
               + kappa * sum_r [ W_{m|}(Z_s,Z_r) mu_r^(k)
                               + W_{m|b} Delta_b^{r(k)}
                               + 1/2 W_{m|bc} Delta_bc^{r(k)}
                               + 1/6 W_{m|bcd} Delta_bcd^{r(k)} ]

(with breve analogues in the damping terms), then collecting equal powers
of sqrt(hbar) in the master moment equations

    dmu_s/dt      = -Lam (2 Hb mu_s + 2 Hb_a D_a + Hb_ab D_ab + 1/3 Hb_abc D_abc)
    dD_{s,i}/dt   =  J_ia (H_a mu_s + H_ab D_b + 1/2 H_abc D_bc + 1/6 H_abcd D_bcd)
                    - Lam (2 Hb D_i + 2 Hb_a D_ai + Hb_ab D_abi) - Zdot_i mu_s
    dD_{s,ij}/dt  =  2 J_ia H_a D_j + 2 J_ia H_ab D_bj + J_ia H_abc D_bcj
                    - Lam (2 Hb D_ij + 2 Hb_a D_aij) - 2 D_i Zdot_j
    dD_{s,ijk}/dt =  3 J_ia H_a D_jk + 3 J_ia H_ab D_jkb
                    - 2 Lam Hb D_ijk - 3 D_ij Zdot_k

with symmetrization over the free indices of every rank-2/3 term.  The
trajectory itself obeys the zeroth-order flow Zdot = J H_z^(0).

Symmetric tensors are stored packed (upper triangle for rank 2, sorted
triples for rank 3); ``symmetrize`` is applied on every write.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import permutations

import numpy as np

from .errors import (CollisionError, InterpolationOutOfRange, NonFinite,
                     UnsupportedOrder)
from .symbols import ANTIHERMITIAN, HERMITIAN

# ---------------------------------------------------------------------------
# symmetric tensor packing
# ---------------------------------------------------------------------------


def sym_pairs(d):
    return [(i, j) for i in range(d) for j in range(i, d)]


def sym_triples(d):
    return [(i, j, k) for i in range(d) for j in range(i, d) for k in range(j, d)]


def symmetrize(tensor):
    """Average a rank-1..3 array over all permutations of its index axes."""
    t = np.asarray(tensor, dtype=float)
    m = t.ndim
    if m not in (1, 2, 3):
        raise UnsupportedOrder("symmetrize supports ranks 1..3")
    if m == 1:
        return t.copy()
    acc = np.zeros_like(t)
    for perm in permutations(range(m)):
        acc += np.transpose(t, perm)
    return acc / math.factorial(m)


def pack_sym2(full):
    d = full.shape[-1]
    return np.stack([full[..., i, j] for (i, j) in sym_pairs(d)], axis=-1)


def unpack_sym2(packed, d):
    out = np.zeros(packed.shape[:-1] + (d, d))
    for slot, (i, j) in enumerate(sym_pairs(d)):
        out[..., i, j] = packed[..., slot]
        out[..., j, i] = packed[..., slot]
    return out


def pack_sym3(full):
    d = full.shape[-1]
    return np.stack([full[..., i, j, k] for (i, j, k) in sym_triples(d)], axis=-1)


def unpack_sym3(packed, d):
    out = np.zeros(packed.shape[:-1] + (d, d, d))
    for slot, (i, j, k) in enumerate(sym_triples(d)):
        for perm in set(permutations((i, j, k))):
            out[(...,) + perm] = packed[..., slot]
    return out


# ---------------------------------------------------------------------------
# state containers
# ---------------------------------------------------------------------------


@dataclass
class MomentSet:
    """Moments of a single quasiparticle, packed, by hbar order.

    mu[k]        : zeroth moments, k = 0..3
    delta1[k-1]  : first moments, k = 1..3, each of shape (2n,)
    delta2[k-2]  : packed second moments, k = 2..3
    delta3       : packed third moments, k = 3
    """

    d: int
    mu: np.ndarray
    delta1: np.ndarray
    delta2: np.ndarray
    delta3: np.ndarray

    @classmethod
    def zero(cls, d):
        return cls(d, np.zeros(4), np.zeros((3, d)),
                   np.zeros((2, len(sym_pairs(d)))), np.zeros(len(sym_triples(d))))

    @classmethod
    def from_full(cls, d, mu, delta1=None, delta2_full=None, delta3_full=None):
        """Build from full tensors; rank-2/3 inputs are symmetrized on write."""
        ms = cls.zero(d)
        ms.mu[:] = np.asarray(mu, dtype=float)
        if delta1 is not None:
            ms.delta1[:] = np.asarray(delta1, dtype=float)
        if delta2_full is not None:
            for k, tens in delta2_full.items():
                ms.delta2[k - 2] = pack_sym2(symmetrize(tens))
        if delta3_full is not None:
            ms.delta3[:] = pack_sym3(symmetrize(delta3_full))
        return ms

    def delta2_full(self, k):
        return unpack_sym2(self.delta2[k - 2], self.d)

    def delta3_full(self):
        return unpack_sym3(self.delta3, self.d)


@dataclass
class QuasiparticleState:
    """Trajectory point plus the moment set of one quasiparticle."""

    Z: np.ndarray  # (2n,), momenta first
    moments: MomentSet

    def __post_init__(self):
        if self.moments.mu[0] <= 0:
            raise ValueError("quasiparticle mass mu^(0) must be positive")


@dataclass
class GaussianPacket:
    """Parameters of one Gaussian quasiparticle: amplitude N, width gamma,
    initial position X0 and momentum P0 (scalars for n = 1, vectors else)."""

    N: float
    gamma: float
    X0: float
    P0: float = 0.0


@dataclass
class EnsembleState:
    """Batched state of K quasiparticles at one time.

    Z  : (K, 2n)    trajectories, momenta in the first n columns
    mu : (K, 4)     mass coefficients by hbar order
    d1 : (K, 3, 2n) first moments, orders 1..3
    d2 : (K, 2, T2) packed second moments, orders 2..3
    d3 : (K, T3)    packed third moments, order 3
    """

    Z: np.ndarray
    mu: np.ndarray
    d1: np.ndarray
    d2: np.ndarray
    d3: np.ndarray
    t: float
    hbar: float
    kappa: float
    lam: float

    @property
    def K(self):
        return self.Z.shape[0]

    @property
    def d(self):
        return self.Z.shape[1]

    @property
    def n(self):
        return self.d // 2

    @property
    def particles(self):
        out = []
        for s in range(self.K):
            ms = MomentSet(self.d, self.mu[s].copy(), self.d1[s].copy(),
                           self.d2[s].copy(), self.d3[s].copy())
            out.append(QuasiparticleState(self.Z[s].copy(), ms))
        return out

    def copy(self):
        return EnsembleState(self.Z.copy(), self.mu.copy(), self.d1.copy(),
                             self.d2.copy(), self.d3.copy(),
                             self.t, self.hbar, self.kappa, self.lam)

    def flatten(self):
        return np.concatenate([self.Z.ravel(), self.mu.ravel(),
                               self.d1.ravel(), self.d2.ravel(), self.d3.ravel()])

    def from_flat(self, vec, t=None):
        """Rebuild a state from a flattened vector (array views, no copy)."""
        sizes = [self.Z.size, self.mu.size, self.d1.size, self.d2.size, self.d3.size]
        shapes = [self.Z.shape, self.mu.shape, self.d1.shape, self.d2.shape, self.d3.shape]
        parts = []
        k = 0
        for size, shape in zip(sizes, shapes):
            parts.append(vec[k:k + size].reshape(shape))
            k += size
        return EnsembleState(*parts, t=self.t if t is None else t,
                             hbar=self.hbar, kappa=self.kappa, lam=self.lam)

    def min_separation(self):
        if self.K < 2:
            return np.inf
        diff = self.Z[:, None, :] - self.Z[None, :, :]
        dist = np.linalg.norm(diff, axis=-1)
        dist[np.arange(self.K), np.arange(self.K)] = np.inf
        return float(dist.min())

    def full_moments(self, s):
        """hbar-summed moments (mu, D1, D2, D3) of particle s."""
        h = self.hbar
        w = np.array([1.0, h ** 0.5, h, h ** 1.5])
        mu = float(np.dot(w, self.mu[s]))
        D1 = w[1] * self.d1[s, 0] + w[2] * self.d1[s, 1] + w[3] * self.d1[s, 2]
        D2 = (w[2] * unpack_sym2(self.d2[s, 0], self.d)
              + w[3] * unpack_sym2(self.d2[s, 1], self.d))
        D3 = w[3] * unpack_sym3(self.d3[s], self.d)
        return mu, D1, D2, D3


_J_CACHE = {}


def J_matrix(n):
    """Standard symplectic block form for z = (p, x)."""
    if n not in _J_CACHE:
        J = np.zeros((2 * n, 2 * n))
        J[:n, n:] = -np.eye(n)
        J[n:, :n] = np.eye(n)
        _J_CACHE[n] = J
    return _J_CACHE[n]


# ---------------------------------------------------------------------------
# right-hand side
# ---------------------------------------------------------------------------

# contraction of a kernel tensor W_{m|j} (axes: s, r, m z-axes, j w-axes)
# with a rank-j moment of particle r
_KERNEL_CONTRACT = {
    0: "sr...,r->s...",
    1: "sr...a,ra->s...",
    2: "sr...ab,rab->s...",
    3: "sr...abc,rabc->s...",
}


def _moment_arrays(state, order):
    """Full-tensor moment views indexed [rank][order], ranks <= order only."""
    d = state.d
    mom = {0: {}, 1: {}, 2: {}, 3: {}}
    for k in range(order + 1):
        mom[0][k] = state.mu[:, k]
    for k in (1, 2, 3):
        if k <= order:
            mom[1][k] = state.d1[:, k - 1]
    for k in (2, 3):
        if k <= order:
            mom[2][k] = unpack_sym2(state.d2[:, k - 2], d)
    if order >= 3:
        mom[3][3] = unpack_sym3(state.d3, d)
    return mom


def _effective_tensors(state, model, kind, orders, min_m, max_m, mom, kernel_cache):
    """H_m^(k) arrays (shape (K,) + (2n,)*m) for k in orders, min_m <= m <= max_m."""
    kappa = state.kappa
    t = state.t
    Z = state.Z
    max_total = 4 if kind == HERMITIAN else 3
    # models with identical breve symbols share one table across kinds
    ckind = HERMITIAN if getattr(model, "breve_equals_hermitian", False) else kind
    H = {k: {} for k in orders}
    for m in range(min_m, max_m + 1):
        pkey = ("pot", ckind, m)
        if pkey not in kernel_cache:
            kernel_cache[pkey] = model.potential_tensor(kind, Z, t, m)
        Vm = kernel_cache[pkey]
        for k in orders:
            acc = Vm.copy() if k == 0 else np.zeros_like(Vm)
            if kappa != 0.0:
                for j in range(0, min(k, 3, max_total - m) + 1):
                    momjk = mom[j].get(k)
                    if momjk is None:
                        continue
                    key = (ckind, m, j)
                    if key not in kernel_cache:
                        kernel_cache[key] = model.kernel_tensor(kind, Z, t, m, j)
                    acc = acc + (kappa / math.factorial(j)) * np.einsum(
                        _KERNEL_CONTRACT[j], kernel_cache[key], momjk)
            H[k][m] = acc
    return H


def _sym_batch(T):
    """Symmetrize the trailing 2 or 3 axes of a batched tensor."""
    if T.ndim == 3:
        return 0.5 * (T + np.swapaxes(T, 1, 2))
    acc = np.zeros_like(T)
    for perm in permutations((1, 2, 3)):
        acc += np.transpose(T, (0,) + perm)
    return acc / 6.0


def he_rhs(state, model, order=0, even_reduction=False, collision_threshold=None):
    """Time derivative of an ensemble state, truncated at the given order.

    Moments above `order` are ignored.  With ``even_reduction`` the
    odd-order blocks are skipped entirely, which is exact when all odd
    moments vanish (checked on entry).

    Raises CollisionError when two trajectories come closer than the
    threshold (default 1e-3 times the model's characteristic length).
    """
    if order not in (0, 1, 2, 3):
        raise UnsupportedOrder("hierarchy order must be 0..3")
    if collision_threshold is None:
        collision_threshold = 1e-3 * getattr(model, "collision_scale", 1.0)
    sep = state.min_separation()
    if sep < collision_threshold:
        raise CollisionError(
            f"trajectory separation {sep:.3e} below threshold "
            f"{collision_threshold:.3e} at t={state.t:.6f}")

    if even_reduction:
        odd = max(np.abs(state.mu[:, 1::2]).max(),
                  np.abs(state.d1[:, 0]).max(), np.abs(state.d1[:, 2]).max(),
                  np.abs(state.d2[:, 1]).max(), np.abs(state.d3).max())
        if odd > 1e-9:
            raise ValueError("even_reduction requires vanishing odd moments")
        orders = [k for k in range(order + 1) if k % 2 == 0]
    else:
        orders = list(range(order + 1))

    d = state.d
    lam = state.lam
    J = J_matrix(state.n)
    mom = _moment_arrays(state, order)
    cache = {}
    # scalar Hermitian tensors never enter any retained equation; breve
    # tensors only enter damping terms
    H = _effective_tensors(state, model, HERMITIAN, orders,
                           1, min(order + 1, 4), mom, cache)
    if lam != 0.0:
        Hb = _effective_tensors(state, model, ANTIHERMITIAN, orders,
                                0, min(order, 3), mom, cache)

    out = EnsembleState(np.zeros_like(state.Z), np.zeros_like(state.mu),
                        np.zeros_like(state.d1), np.zeros_like(state.d2),
                        np.zeros_like(state.d3), state.t, state.hbar,
                        state.kappa, state.lam)

    Zdot = H[0][1] @ J.T
    out.Z[...] = Zdot

    for k in orders:
        acc_mu = np.zeros(state.K)
        acc_d1 = np.zeros((state.K, d)) if k >= 1 else None
        acc_d2 = np.zeros((state.K, d, d)) if k >= 2 else None
        acc_d3 = np.zeros((state.K, d, d, d)) if k >= 3 else None
        for k1 in orders:
            k2 = k - k1
            if k2 < 0:
                continue
            mu2 = mom[0].get(k2)
            D1 = mom[1].get(k2)
            D2 = mom[2].get(k2)
            D3 = mom[3].get(k2)
            if lam != 0.0:
                if mu2 is not None:
                    acc_mu -= lam * 2.0 * Hb[k1][0] * mu2
                if D1 is not None:
                    acc_mu -= lam * 2.0 * np.einsum("sa,sa->s", Hb[k1][1], D1)
                if D2 is not None:
                    acc_mu -= lam * np.einsum("sab,sab->s", Hb[k1][2], D2)
                if D3 is not None:
                    acc_mu -= (lam / 3.0) * np.einsum("sabc,sabc->s", Hb[k1][3], D3)
            if acc_d1 is not None:
                if mu2 is not None:
                    acc_d1 += np.einsum("ia,sa,s->si", J, H[k1][1], mu2)
                if D1 is not None:
                    acc_d1 += np.einsum("ia,sab,sb->si", J, H[k1][2], D1)
                if D2 is not None:
                    acc_d1 += 0.5 * np.einsum("ia,sabc,sbc->si", J, H[k1][3], D2)
                if D3 is not None:
                    acc_d1 += (1.0 / 6.0) * np.einsum("ia,sabcd,sbcd->si",
                                                      J, H[k1][4], D3)
                if lam != 0.0:
                    if D1 is not None:
                        acc_d1 -= lam * 2.0 * Hb[k1][0][:, None] * D1
                    if D2 is not None:
                        acc_d1 -= lam * 2.0 * np.einsum("sa,sai->si", Hb[k1][1], D2)
                    if D3 is not None:
                        acc_d1 -= lam * np.einsum("sab,sabi->si", Hb[k1][2], D3)
            if acc_d2 is not None:
                if D1 is not None:
                    acc_d2 += 2.0 * np.einsum("ia,sa,sj->sij", J, H[k1][1], D1)
                if D2 is not None:
                    acc_d2 += 2.0 * np.einsum("ia,sab,sbj->sij", J, H[k1][2], D2)
                if D3 is not None:
                    acc_d2 += np.einsum("ia,sabc,sbcj->sij", J, H[k1][3], D3)
                if lam != 0.0:
                    if D2 is not None:
                        acc_d2 -= lam * 2.0 * Hb[k1][0][:, None, None] * D2
                    if D3 is not None:
                        acc_d2 -= lam * 2.0 * np.einsum("sa,saij->sij", Hb[k1][1], D3)
            if acc_d3 is not None:
                if D2 is not None:
                    acc_d3 += 3.0 * np.einsum("ia,sa,sjk->sijk", J, H[k1][1], D2)
                if D3 is not None:
                    acc_d3 += 3.0 * np.einsum("ia,sab,sjkb->sijk", J, H[k1][2], D3)
                    if lam != 0.0:
                        acc_d3 -= lam * 2.0 * Hb[k1][0][:, None, None, None] * D3
        out.mu[:, k] = acc_mu
        if acc_d1 is not None:
            acc_d1 -= Zdot * state.mu[:, k][:, None]
            out.d1[:, k - 1] = acc_d1
        if acc_d2 is not None:
            D1k = mom[1].get(k)
            if D1k is not None:
                acc_d2 -= 2.0 * np.einsum("si,sj->sij", D1k, Zdot)
            out.d2[:, k - 2] = pack_sym2(_sym_batch(acc_d2))
        if acc_d3 is not None:
            D2k = mom[2].get(k)
            if D2k is not None:
                acc_d3 -= 3.0 * np.einsum("sij,sk->sijk", D2k, Zdot)
            out.d3[:] = pack_sym3(_sym_batch(acc_d3))
    return out


# ---------------------------------------------------------------------------
# time integration
# ---------------------------------------------------------------------------


def _hermite_eval(t, t0, t1, y0, y1, f0, f1):
    """Cubic Hermite interpolant with endpoint values and derivatives."""
    h = t1 - t0
    s = (t - t0) / h
    h00 = (1 + 2 * s) * (1 - s) ** 2
    h10 = s * (1 - s) ** 2
    h01 = s * s * (3 - 2 * s)
    h11 = s * s * (s - 1)
    return h00 * y0 + h10 * h * f0 + h01 * y1 + h11 * h * f1


@dataclass
class HeTrajectory:
    """Dense output of ``integrate_he``.

    ts      : (N+1,) sample times (every step)
    ys      : (N+1, dim) flattened states
    fs      : (N+1, dim) flattened state derivatives
    margins : (N+1,) minimal pairwise trajectory separation
    """

    template: EnsembleState
    ts: np.ndarray
    ys: np.ndarray
    fs: np.ndarray
    margins: np.ndarray
    order: int
    even_reduction: bool

    @property
    def hbar(self):
        return self.template.hbar

    def state_at_index(self, i):
        return self.template.from_flat(self.ys[i], t=float(self.ts[i]))

    def _locate(self, t):
        ts = self.ts
        if t < ts[0] - 1e-12 or t > ts[-1] + 1e-12:
            raise InterpolationOutOfRange(
                f"t={t} outside integrated span [{ts[0]}, {ts[-1]}]")
        i = int(np.clip(np.searchsorted(ts, t) - 1, 0, len(ts) - 2))
        return i

    def interpolate(self, t):
        """Cubic-Hermite interpolated ensemble state at time t."""
        i = self._locate(t)
        if abs(t - self.ts[i]) < 1e-14:
            return self.state_at_index(i)
        if abs(t - self.ts[i + 1]) < 1e-14:
            return self.state_at_index(i + 1)
        y = _hermite_eval(t, self.ts[i], self.ts[i + 1],
                          self.ys[i], self.ys[i + 1], self.fs[i], self.fs[i + 1])
        return self.template.from_flat(y, t=float(t))

    @property
    def t_end(self):
        return float(self.ts[-1])


def integrate_he(state0, model, order=0, even_reduction=False,
                 t_end=1.0, dt=1e-3, collision_threshold=None):
    """Fixed-step classical RK4 integration of the moment hierarchy.

    Emits a sample at every step and records the pairwise non-collision
    margin.  Raises NonFinite if any field leaves the finite range and
    propagates CollisionError from the right-hand side.
    """
    if dt <= 0 or t_end <= 0:
        raise ValueError("dt and t_end must be positive")
    nsteps = int(round(t_end / dt))
    template = state0.copy()

    def f(y, t):
        st = template.from_flat(y, t=t)
        return he_rhs(st, model, order=order, even_reduction=even_reduction,
                      collision_threshold=collision_threshold).flatten()

    dim = state0.flatten().size
    ts = np.empty(nsteps + 1)
    ys = np.empty((nsteps + 1, dim))
    fs = np.empty((nsteps + 1, dim))
    margins = np.empty(nsteps + 1)

    K, dph = state0.K, state0.d
    nz = K * dph

    def margin_of(y):
        if K < 2:
            return np.inf
        Z = y[:nz].reshape(K, dph)
        diff = Z[:, None, :] - Z[None, :, :]
        dist = np.sqrt((diff ** 2).sum(-1))
        dist[np.arange(K), np.arange(K)] = np.inf
        return float(dist.min())

    y = state0.flatten()
    t = float(state0.t)
    k1 = f(y, t)
    for i in range(nsteps + 1):
        ts[i] = t
        ys[i] = y
        fs[i] = k1
        margins[i] = margin_of(y)
        if i == nsteps:
            break
        k2 = f(y + 0.5 * dt * k1, t + 0.5 * dt)
        k3 = f(y + 0.5 * dt * k2, t + 0.5 * dt)
        k4 = f(y + dt * k3, t + dt)
        y = y + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        t += dt
        if not np.all(np.isfinite(y)):
            raise NonFinite(f"non-finite state at t={t:.6f}")
        k1 = f(y, t)
    return HeTrajectory(template=template, ts=ts, ys=ys, fs=fs, margins=margins,
                        order=order, even_reduction=even_reduction)


# ---------------------------------------------------------------------------
# initial data and closed-form helpers
# ---------------------------------------------------------------------------


def gaussian_initial_moments(N, gamma, X0, P0, hbar, convention="unnormalized"):
    """Initial trajectory point and moments of a Gaussian packet.

    The packet psi(x) = N / hbar^{n/4} * exp(-|x - X0|^2 / (2 gamma^2 hbar)
    + i <P0, x - X0> / hbar) has zeroth moment mu = N^2 (gamma sqrt(pi))^n,
    vanishing odd moments, and second moments

        <Dp_i Dp_j> = mu * hbar / (2 gamma^2) * delta_ij
        <Dx_i Dx_j> = mu * hbar * gamma^2 / 2 * delta_ij

    split as hbar * Delta^(2).  With convention="normalized" the second
    moments are divided by mu (both conventions appear in the literature;
    unnormalized matches the moment definition used by the hierarchy).
    """
    if gamma <= 0 or hbar <= 0:
        raise ValueError("gamma and hbar must be positive")
    if convention not in ("unnormalized", "normalized"):
        raise ValueError("convention must be 'unnormalized' or 'normalized'")
    X0 = np.atleast_1d(np.asarray(X0, dtype=float))
    P0 = np.atleast_1d(np.asarray(P0, dtype=float))
    n = X0.size
    d = 2 * n
    mu0 = float(N) ** 2 * (float(gamma) * math.sqrt(math.pi)) ** n
    scale = 1.0 if convention == "normalized" else mu0
    D2 = np.zeros((d, d))
    D2[:n, :n] = scale / (2.0 * gamma ** 2) * np.eye(n)
    D2[n:, n:] = scale * gamma ** 2 / 2.0 * np.eye(n)
    ms = MomentSet.from_full(d, [mu0, 0.0, 0.0, 0.0], delta2_full={2: D2})
    Z = np.concatenate([P0, X0])
    return Z, ms


def build_ensemble(packets, hbar, kappa, lam, convention="unnormalized"):
    """Assemble an EnsembleState from Gaussian packet parameters."""
    K = len(packets)
    if K < 1:
        raise ValueError("at least one quasiparticle required")
    Zs, mss = [], []
    for p in packets:
        Z, ms = gaussian_initial_moments(p.N, p.gamma, p.X0, p.P0, hbar,
                                         convention=convention)
        Zs.append(Z)
        mss.append(ms)
    d = Zs[0].size
    st = EnsembleState(
        Z=np.stack(Zs),
        mu=np.stack([ms.mu for ms in mss]),
        d1=np.stack([ms.delta1 for ms in mss]),
        d2=np.stack([ms.delta2 for ms in mss]),
        d3=np.stack([ms.delta3 for ms in mss]),
        t=0.0, hbar=float(hbar), kappa=float(kappa), lam=float(lam))
    if np.any(st.mu[:, 0] <= 0):
        raise ValueError("every quasiparticle needs positive mass")
    return st


def rest_width(epsilon):
    """Width gamma = epsilon^{-1/4} for which the second moments are
    stationary in the linear lattice well."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    return float(epsilon) ** -0.25


def linearized_period(epsilon, kappa, gamma, N, c):
    """Small-oscillation period estimate of the symmetric two-particle
    rest configuration, as printed in the source analysis (verbatim;
    the simulation-measured period is the authoritative value)."""
    corr = (kappa * gamma * N ** 2 * math.sqrt(math.pi) * c ** 2
            * (32.0 * math.pi ** 2 - 2.0 * c ** 2)
            / (c ** 2 + 4.0 * math.pi ** 2) ** 3.5)
    return 2.0 * math.pi * (epsilon + corr)
