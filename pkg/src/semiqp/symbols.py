"""Phase-space symbol tables for the nonlocal NLSE models.

A model supplies the one-body symbol V(z, t), its anti-Hermitian partner
V~(z, t), the two-body kernel W(z, w, t), its partner W~(z, w, t), and all
partial derivatives up to total order 4 (Hermitian) / 3 (anti-Hermitian).
Points z = (p, x) live in 2n-dimensional phase space; the first n slots are
momenta, the last n are positions.  Derivatives are hand-coded closed forms;
``check_partials_fd`` cross-checks them against nested central differences.

The coupling constant kappa is *not* baked into any kernel value returned
here; it is applied exactly once by the consumers (moment hierarchy and
evolution-operator assembly).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, UnsupportedOrder

HERMITIAN = "hermitian"
ANTIHERMITIAN = "antihermitian"

#: highest total derivative order carried by the tables
MAX_ORDER = {HERMITIAN: 4, ANTIHERMITIAN: 3}


@dataclass(frozen=True)
class PhasePoint:
    """A point z = (p, x) in 2n-dimensional phase space."""

    p: np.ndarray
    x: np.ndarray

    def __post_init__(self):
        p = np.atleast_1d(np.asarray(self.p, dtype=float))
        x = np.atleast_1d(np.asarray(self.x, dtype=float))
        if p.shape != x.shape or p.ndim != 1:
            raise DimensionMismatch(f"p and x must be 1d of equal length, got {p.shape} / {x.shape}")
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(x))):
            raise ValueError("phase-point components must be finite")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "x", x)

    @property
    def n(self) -> int:
        return self.p.size

    @property
    def z(self) -> np.ndarray:
        """Concatenated coordinates (p_1..p_n, x_1..x_n)."""
        return np.concatenate([self.p, self.x])

    @classmethod
    def from_z(cls, z) -> "PhasePoint":
        z = np.asarray(z, dtype=float)
        n = z.size // 2
        return cls(z[:n], z[n:])


@dataclass(frozen=True)
class MultiIndex:
    """Derivative order per phase coordinate, alpha in Z_+^{2n}."""

    entries: tuple

    def __post_init__(self):
        ent = tuple(int(e) for e in self.entries)
        if any(e < 0 for e in ent):
            raise ValueError("multi-index entries must be nonnegative")
        object.__setattr__(self, "entries", ent)

    @property
    def order(self) -> int:
        return sum(self.entries)

    @property
    def dim(self) -> int:
        return len(self.entries)

    @classmethod
    def zero(cls, dim: int) -> "MultiIndex":
        return cls((0,) * dim)

    @classmethod
    def unit(cls, dim: int, axis: int, count: int = 1) -> "MultiIndex":
        ent = [0] * dim
        ent[axis] = count
        return cls(tuple(ent))


class ModelSymbols:
    """Base class for symbol tables.

    Subclasses implement ``_v_partial`` and ``_w_partial`` returning scalar
    partial derivatives for per-coordinate derivative counts.  Evaluations
    must be pure; all built-in models are time-independent.
    """

    n = 1
    #: characteristic length used to scale the trajectory collision threshold
    collision_scale = 1.0
    #: per-symbol flag: True if the symbol does not depend on t
    time_independent = {"V": True, "V_breve": True, "W": True, "W_breve": True}
    #: True when V~ == V and W~ == W, allowing consumers to share tables
    breve_equals_hermitian = False

    # -- scalar interface -------------------------------------------------

    def _v_partial(self, kind, z, t, counts):
        raise NotImplementedError

    def _w_partial(self, kind, z, w, t, counts_z, counts_w):
        raise NotImplementedError

    # -- bulk tensor interface (generic fallback) -------------------------

    def potential_tensor(self, kind, Z, t, m):
        """All order-m partials of V (or V~) at rows of Z, shape (K, (2n,)*m)."""
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        K, d = Z.shape
        out = np.zeros((K,) + (d,) * m)
        for idx in np.ndindex(*(d,) * m):
            counts = [0] * d
            for i in idx:
                counts[i] += 1
            for s in range(K):
                out[(s,) + idx] = self._v_partial(kind, Z[s], t, tuple(counts))
        return out

    def kernel_tensor(self, kind, Z, t, q, r):
        """Order-(q, r) kernel partials for all ordered pairs of rows of Z.

        Returns shape (K, K, (2n,)*q, (2n,)*r): z-derivative axes first,
        then w-derivative axes.
        """
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        K, d = Z.shape
        out = np.zeros((K, K) + (d,) * (q + r))
        for iz in np.ndindex(*(d,) * q):
            cz = [0] * d
            for i in iz:
                cz[i] += 1
            for iw in np.ndindex(*(d,) * r):
                cw = [0] * d
                for i in iw:
                    cw[i] += 1
                for s in range(K):
                    for rr in range(K):
                        out[(s, rr) + iz + iw] = self._w_partial(
                            kind, Z[s], Z[rr], t, tuple(cz), tuple(cw))
        return out


class DipoleCosineModel(ModelSymbols):
    """1d lattice potential with a regularized dipole-dipole kernel.

    V(z) = p^2/2 + epsilon*cos(x),  W(z, w) = c^2 / ((x-y)^2 + c^2)^{3/2},
    and the anti-Hermitian symbols coincide with the Hermitian ones.
    All momentum derivatives of W vanish identically.
    """

    n = 1
    breve_equals_hermitian = True

    def __init__(self, epsilon=1.0, c=3.0):
        if epsilon < 0 or c <= 0:
            raise ValueError("epsilon must be nonnegative, c positive")
        self.epsilon = float(epsilon)
        self.c = float(c)
        self.collision_scale = self.c

    def _v_partial(self, kind, z, t, counts):
        mp, mx = counts
        if mp == 0:
            # d^m/dx^m [eps*cos x] = eps*cos(x + m*pi/2); order 0 adds p^2/2
            val = self.epsilon * np.cos(z[1] + mx * np.pi / 2.0)
            if mx == 0:
                val += 0.5 * z[0] ** 2
            return val
        if mx != 0:
            return 0.0
        if mp == 1:
            return z[0]
        if mp == 2:
            return 1.0
        return 0.0

    def _w_u_derivative(self, m, u):
        """m-th derivative of c^2 (u^2 + c^2)^{-3/2} with respect to u."""
        c2 = self.c ** 2
        s = np.asarray(u) ** 2 + c2
        if m == 0:
            return c2 * s ** -1.5
        if m == 1:
            return -3.0 * c2 * u * s ** -2.5
        if m == 2:
            return 3.0 * c2 * (4.0 * u ** 2 - c2) * s ** -3.5
        if m == 3:
            return 15.0 * c2 * u * (3.0 * c2 - 4.0 * u ** 2) * s ** -4.5
        if m == 4:
            return 45.0 * c2 * (c2 ** 2 - 12.0 * c2 * u ** 2 + 8.0 * u ** 4) * s ** -5.5
        raise UnsupportedOrder(f"kernel derivative order {m} not tabulated")

    def _w_partial(self, kind, z, w, t, counts_z, counts_w):
        if counts_z[0] != 0 or counts_w[0] != 0:
            return 0.0
        q, r = counts_z[1], counts_w[1]
        # d/dy = -d/du with u = x - y
        return (-1.0) ** r * self._w_u_derivative(q + r, z[1] - w[1])

    # fast path used by the moment hierarchy: every pair derivative reduces
    # to a scalar function of the separation placed at all-x index slots
    def kernel_tensor(self, kind, Z, t, q, r):
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        K, d = Z.shape
        u = Z[:, None, 1] - Z[None, :, 1]
        vals = (-1.0) ** r * self._w_u_derivative(q + r, u)
        out = np.zeros((K, K) + (d,) * (q + r))
        out[(slice(None), slice(None)) + (1,) * (q + r)] = vals
        return out

    def potential_tensor(self, kind, Z, t, m):
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        K, d = Z.shape
        out = np.zeros((K,) + (d,) * m)
        cosd = self.epsilon * np.cos(Z[:, 1] + m * np.pi / 2.0)
        out[(slice(None),) + (1,) * m] = cosd
        if m == 0:
            out += 0.5 * Z[:, 0] ** 2
        elif m == 1:
            out[:, 0] = Z[:, 0]
        elif m == 2:
            out[:, 0, 0] = 1.0
        return out


class DipoleCosineFarField(DipoleCosineModel):
    """Far-field variant: cross-kernel replaced by its small-c approximation.

    Valid for |x - y| >> c only; the coincidence values (u = 0) keep the
    exact regularized forms so that self-interaction terms stay finite.
    Shipped for comparison runs, not for production use.
    """

    def _w_u_derivative(self, m, u):
        u = np.asarray(u, dtype=float)
        exact = super()._w_u_derivative(m, u)
        au = np.abs(u)
        c2 = self.c ** 2
        with np.errstate(divide="ignore", invalid="ignore"):
            far = {
                0: c2 * au ** -3.0,
                1: -3.0 * c2 * u * au ** -5.0,
                2: 12.0 * c2 * au ** -5.0,
                3: -60.0 * c2 * u * au ** -7.0,
                4: 360.0 * c2 * au ** -7.0,
            }[m]
        return np.where(au > 0, far, exact)


class HarmonicModel(ModelSymbols):
    """Isotropic oscillator V = (|p|^2 + |x|^2)/2 with no kernel and V~ = 0."""

    def __init__(self, n=1):
        self.n = int(n)

    def _v_partial(self, kind, z, t, counts):
        if kind == ANTIHERMITIAN:
            return 0.0
        total = sum(counts)
        if total == 0:
            return 0.5 * float(np.dot(z, z))
        if total == 1:
            return float(z[counts.index(1)])
        if total == 2:
            if 2 in counts:
                return 1.0
            return 0.0
        return 0.0

    def _w_partial(self, kind, z, w, t, counts_z, counts_w):
        return 0.0


class FreeParticleModel(ModelSymbols):
    """V = |p|^2/2, no potential, no kernel, no damping symbol."""

    def __init__(self, n=1):
        self.n = int(n)

    def _v_partial(self, kind, z, t, counts):
        if kind == ANTIHERMITIAN:
            return 0.0
        cp = counts[: self.n]
        cx = counts[self.n:]
        if any(cx):
            return 0.0
        total = sum(cp)
        if total == 0:
            return 0.5 * float(np.dot(z[: self.n], z[: self.n]))
        if total == 1:
            return float(z[cp.index(1)])
        if total == 2 and 2 in cp:
            return 1.0
        return 0.0

    def _w_partial(self, kind, z, w, t, counts_z, counts_w):
        return 0.0


MODEL_REGISTRY = {
    "dipole_cosine": DipoleCosineModel,
    "dipole_cosine_farfield": DipoleCosineFarField,
    "harmonic": HarmonicModel,
    "free": FreeParticleModel,
}


def _check_kind(kind):
    if kind not in MAX_ORDER:
        raise ValueError(f"kind must be one of {sorted(MAX_ORDER)}, got {kind!r}")


def _check_point(model, pt):
    if pt.n != model.n:
        raise DimensionMismatch(f"model dimension n={model.n}, point has n={pt.n}")


def potential_partial(model, kind, z: PhasePoint, t, alpha: MultiIndex) -> float:
    """Evaluate a partial derivative of V (kind='hermitian') or V~."""
    _check_kind(kind)
    _check_point(model, z)
    if alpha.dim != 2 * model.n:
        raise DimensionMismatch("multi-index length must be 2n")
    if alpha.order > MAX_ORDER[kind]:
        raise UnsupportedOrder(
            f"order {alpha.order} exceeds maximum {MAX_ORDER[kind]} for {kind}")
    return float(model._v_partial(kind, z.z, t, alpha.entries))


def kernel_partial(model, kind, z: PhasePoint, w: PhasePoint, t,
                   alpha: MultiIndex, beta: MultiIndex) -> float:
    """Evaluate a bare kernel partial d^alpha_z d^beta_w W (no kappa factor)."""
    _check_kind(kind)
    _check_point(model, z)
    _check_point(model, w)
    if alpha.dim != 2 * model.n or beta.dim != 2 * model.n:
        raise DimensionMismatch("multi-index length must be 2n")
    if alpha.order + beta.order > MAX_ORDER[kind]:
        raise UnsupportedOrder(
            f"total order {alpha.order + beta.order} exceeds maximum "
            f"{MAX_ORDER[kind]} for {kind}")
    return float(model._w_partial(kind, z.z, w.z, t, alpha.entries, beta.entries))


# ---------------------------------------------------------------------------
# finite-difference consistency oracle
# ---------------------------------------------------------------------------

_STENCIL = ((-2, 1.0), (-1, -8.0), (1, 8.0), (2, -1.0))  # 4th-order first derivative


def _fd_partial(f, point, counts, h):
    """Nested 5-point central differences of a scalar function of a vector."""
    counts = list(counts)
    for axis, c in enumerate(counts):
        if c > 0:
            counts[axis] -= 1

            def reduced(pt, axis=axis, counts=tuple(counts)):
                return _fd_partial(f, pt, counts, h)

            acc = 0.0
            for off, wgt in _STENCIL:
                shifted = np.array(point, dtype=float)
                shifted[axis] += off * h
                acc += wgt * reduced(shifted)
            return acc / (12.0 * h)
    return f(np.asarray(point, dtype=float))


@dataclass
class PartialsReport:
    """Worst relative FD deviation per (symbol, total order)."""

    max_rel_error: dict
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(v <= self.tolerance for v in self.max_rel_error.values())

    def worst(self) -> float:
        return max(self.max_rel_error.values())


def _iter_counts(dim, total):
    """All derivative-count vectors over `dim` axes with the given total order."""
    if dim == 1:
        yield (total,)
        return
    for head in range(total + 1):
        for tail in _iter_counts(dim - 1, total - head):
            yield (head,) + tail


def check_partials_fd(model, sample_points, tolerance=1e-5, h=0.02) -> PartialsReport:
    """Compare analytic partials with nested central differences.

    ``sample_points`` is a list of (z, w, t) triples (PhasePoint pairs).
    For each symbol and each total order 1..max the report records the worst
    relative deviation; relative means |analytic - fd| / max(1, |analytic|).
    """
    d = 2 * model.n
    errs = {}
    for kind in (HERMITIAN, ANTIHERMITIAN):
        tag = "" if kind == HERMITIAN else "_breve"
        for order in range(1, MAX_ORDER[kind] + 1):
            key_v = (f"V{tag}", order)
            key_w = (f"W{tag}", order)
            worst_v = 0.0
            worst_w = 0.0
            for (z, w, t) in sample_points:
                fv = lambda zz: model._v_partial(kind, zz, t, (0,) * d)
                for counts in _iter_counts(d, order):
                    ana = model._v_partial(kind, z.z, t, counts)
                    fd = _fd_partial(fv, z.z, counts, h)
                    worst_v = max(worst_v, abs(ana - fd) / max(1.0, abs(ana)))
                # kernel: differentiate the (z, w) pair jointly
                zw0 = np.concatenate([z.z, w.z])

                def fw(zw):
                    return model._w_partial(kind, zw[:d], zw[d:], t,
                                            (0,) * d, (0,) * d)

                for counts in _iter_counts(2 * d, order):
                    cz, cw = counts[:d], counts[d:]
                    ana = model._w_partial(kind, z.z, w.z, t, cz, cw)
                    fd = _fd_partial(fw, zw0, counts, h)
                    worst_w = max(worst_w, abs(ana - fd) / max(1.0, abs(ana)))
            errs[key_v] = worst_v
            errs[key_w] = worst_w
    return PartialsReport(max_rel_error=errs, tolerance=tolerance)
