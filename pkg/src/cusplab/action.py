"""Generating function of a fiber-preserving section map.

For a section map mu that preserves H and lambda, the flow time u(y, lambda)
from (0, y, lambda) to mu(0, y, lambda) along X_H is evaluated three ways:

* ``u_desing``: the substitution t = y + z^2 nu (nu = mu^y - y) leaves a
  smooth integrand on [0, 1] multiplied by the Hadamard quotient
  q2 = eta sqrt(nu D) / D, D = 3y^2 - lambda;
* ``u_singular``: the raw inverse-square-root integral with the same
  endpoint substitution but without factoring D out;
* ``u_oracle_ode``: event-located time of flight.

With i_X omega = dH the flow time is minus the textbook integral
eta * int_y^{mu^y} g / (2 sqrt(p)) dt, hence the leading minus signs below.
"""

from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericalError, ValidationError
from .exprlang import DomainError, EvalEnv, ScalarExpr, as_expr, eval_dual
from .flow import flow_displacement, half_periods, time_of_flight_batch
from .model import (
    BOUNDARY_TOL,
    ParabolicModel,
    branch_h,
    discriminant,
    hamiltonian,
    roots_array,
    stratum_codes,
    _boundary_scale,
)
from .quadrature import integrate01

PARABOLA_BAND = 1e-6
EXTRAP_STEP = 1e-3
SINGULAR_REFUSE = 1e-6
NEG_SLACK = 1e-12
FD_STEP = 1e-3
FD2_STEP = 1e-2
BOUNDARY_OFFSET = 1e-4
SECOND_DIFF_FLOOR = 1e-3
CONVENTION = "i_X omega = dH; X_H = (H_y/g, -H_x/g); X_G = -d/dphi; suspension runs phi from 2pi down to 0"

DEFAULT_TOLERANCES = {
    "h_preservation": 1e-8,
    "area": 1e-6,
    "parabola_fixed": 1e-8,
    "desing_vs_singular": 1e-8,
    "quadrature_vs_ode": 1e-6,
    "oval_consistency": 1e-6,
    "roundtrip": 1e-6,
    "branch_mismatch": 1e-4,
    "parabola_residual": 1e-6,
    "hadamard_agreement": 1e-5,
    "second_diff_low": 0.5,
    "second_diff_high": 2.0,
    "suspension": 1e-6,
}


def _arr(*a):
    return np.broadcast_arrays(*(np.asarray(v, float) for v in a))


def _scalar_out(val, like):
    if np.ndim(like) == 0:
        return float(np.asarray(val).reshape(()))
    return val


# ----------------------------------------------------------- section maps


class MapKind(str, enum.Enum):
    IDENTITY = "identity"
    ORACLE = "oracle"
    EXPLICIT = "explicit"


@dataclass(frozen=True)
class SectionMap:
    """An F-preserving map of the cross-section D^3."""

    kind: MapKind
    model: ParabolicModel
    v: ScalarExpr | None = None
    mu_x: ScalarExpr | None = None
    mu_y: ScalarExpr | None = None
    validation: dict = field(default_factory=dict, compare=False)

    @classmethod
    def identity(cls, model):
        return cls(MapKind.IDENTITY, model)

    @classmethod
    def oracle(cls, model, v):
        v = as_expr(v)
        extra = v.freevars - {"h", "lambda"}
        if extra:
            raise ConfigError(f"oracle v may only use h and lambda, got {sorted(extra)}")
        return cls(MapKind.ORACLE, model, v=v)

    @classmethod
    def explicit(cls, model, mu_x, mu_y):
        mu_x, mu_y = as_expr(mu_x), as_expr(mu_y)
        for e in (mu_x, mu_y):
            extra = e.freevars - {"x", "y", "lambda"}
            if extra:
                raise ConfigError(f"explicit map may only use x, y, lambda, got {sorted(extra)}")
        return cls(MapKind.EXPLICIT, model, mu_x=mu_x, mu_y=mu_y)

    def flow_times(self, x, y, lam):
        x, y, lam = _arr(x, y, lam)
        return np.broadcast_to(self.v(h=hamiltonian(x, y, lam), **{"lambda": lam}), x.shape)

    def displacement(self, x, y, lam):
        """mu(p) - p as (dx, dy); lambda is preserved exactly."""
        x, y, lam = _arr(x, y, lam)
        if self.kind == MapKind.IDENTITY:
            return np.zeros(x.shape), np.zeros(x.shape)
        if self.kind == MapKind.EXPLICIT:
            env = {"x": x, "y": y, "lambda": lam}
            mx = np.broadcast_to(self.mu_x(**env), x.shape)
            my = np.broadcast_to(self.mu_y(**env), x.shape)
            return mx - x, my - y
        shape = x.shape
        pts = np.stack([x.ravel(), y.ravel(), lam.ravel()], axis=1)
        t = self.flow_times(x, y, lam).ravel()
        d = flow_displacement(self.model, pts, t)
        return d[:, 0].reshape(shape), d[:, 1].reshape(shape)

    def __call__(self, x, y, lam):
        dx, dy = self.displacement(x, y, lam)
        x, y, lam = _arr(x, y, lam)
        return x + dx, y + dy, lam

    def inverse(self) -> "SectionMap":
        if self.kind == MapKind.IDENTITY:
            return self
        if self.kind == MapKind.ORACLE:
            from .exprlang import Neg

            return SectionMap(MapKind.ORACLE, self.model, v=ScalarExpr(Neg(self.v.root), f"-({self.v.source})"))
        return _ExplicitInverse(self)

    def jacobian_det(self, x, y, lam, step=1e-5):
        """det D(mu restricted to fixed lambda): exact duals for explicit
        maps, central differences of the displacement otherwise."""
        x, y, lam = _arr(x, y, lam)
        if self.kind == MapKind.IDENTITY:
            return np.ones(x.shape)
        if self.kind == MapKind.EXPLICIT:
            env = {"x": x, "y": y, "lambda": lam}
            a = eval_dual(self.mu_x, EvalEnv(env, {"x": 1.0}))[1]
            b = eval_dual(self.mu_x, EvalEnv(env, {"y": 1.0}))[1]
            c = eval_dual(self.mu_y, EvalEnv(env, {"x": 1.0}))[1]
            d = eval_dual(self.mu_y, EvalEnv(env, {"y": 1.0}))[1]
            return np.broadcast_to(a * d - b * c, x.shape)
        xs = np.concatenate([x + step, x - step, x, x])
        ys = np.concatenate([y, y, y + step, y - step])
        ls = np.concatenate([lam] * 4)
        dx, dy = self.displacement(xs, ys, ls)
        n = x.size
        dx = dx.reshape(4, -1)
        dy = dy.reshape(4, -1)
        j11 = 1 + (dx[0] - dx[1]) / (2 * step)
        j21 = (dy[0] - dy[1]) / (2 * step)
        j12 = (dx[2] - dx[3]) / (2 * step)
        j22 = 1 + (dy[2] - dy[3]) / (2 * step)
        return (j11 * j22 - j12 * j21).reshape(x.shape) if n else np.ones(x.shape)


class _ExplicitInverse(SectionMap):
    """Newton inversion of an explicit map at fixed lambda."""

    def __init__(self, forward: SectionMap):
        object.__setattr__(self, "kind", MapKind.EXPLICIT)
        object.__setattr__(self, "model", forward.model)
        object.__setattr__(self, "v", None)
        object.__setattr__(self, "mu_x", None)
        object.__setattr__(self, "mu_y", None)
        object.__setattr__(self, "validation", {})
        object.__setattr__(self, "forward", forward)

    def displacement(self, x, y, lam):
        x, y, lam = _arr(x, y, lam)
        f = self.forward
        px, py = x.copy(), y.copy()
        for _ in range(50):
            env = {"x": px, "y": py, "lambda": lam}
            fx, a = eval_dual(f.mu_x, EvalEnv(env, {"x": 1.0}))
            b = eval_dual(f.mu_x, EvalEnv(env, {"y": 1.0}))[1]
            fy, c = eval_dual(f.mu_y, EvalEnv(env, {"x": 1.0}))
            d = eval_dual(f.mu_y, EvalEnv(env, {"y": 1.0}))[1]
            rx, ry = fx - x, fy - y
            det = a * d - b * c
            px = px - (d * rx - b * ry) / det
            py = py - (a * ry - c * rx) / det
            if np.all(np.hypot(rx, ry) < 1e-15):
                break
        return px - x, py - y

    def inverse(self):
        return self.forward


def validation_grid(model: ParabolicModel, n=7):
    s = np.linspace(-model.radius / 3, model.radius / 3, n)
    X, Y, L = np.meshgrid(s, s, s, indexing="ij")
    return X.ravel(), Y.ravel(), L.ravel()


def parabola_points(model: ParabolicModel, n=9):
    ymax = math.sqrt(model.radius / 9.0)
    y = np.linspace(-ymax, ymax, n)
    return np.zeros(n), y, 3 * y * y


def _defect(values, points):
    values = np.asarray(values, float)
    if values.size == 0:
        return {"max": 0.0, "at": None}
    i = int(np.argmax(values))
    return {"max": float(values[i]), "at": [float(p[i]) for p in points]}


def validate_map(mu: SectionMap, tolerances=None, n=7, raise_on_fail=True) -> dict:
    """H-, lambda-, area- and parabola-defects on the validation grid."""
    tol = dict(DEFAULT_TOLERANCES)
    tol.update(tolerances or {})
    model = mu.model
    X, Y, L = validation_grid(model, n)
    defects = {}
    if mu.kind == MapKind.ORACLE:
        code, h, _ = stratum_codes(X, Y, L)
        oval = code == 1
        if np.any(oval):
            tp, tm = half_periods(model, h[oval], L[oval])
            window = np.minimum(tp, tm)
            v = np.abs(mu.flow_times(X[oval], Y[oval], L[oval]))
            viol = v >= window
            if np.any(viol):
                i = np.nonzero(viol)[0][0]
                raise ValidationError(
                    f"|v| = {v[i]:.6g} exceeds the half-arc time {window[i]:.6g} on an oval fiber",
                    {"window": {"max": float(v[i] / window[i]), "at": [float(X[oval][i]), float(Y[oval][i]), float(L[oval][i])]}},
                )
    MX, MY, ML = mu(X, Y, L)
    pts = (X, Y, L)
    defects["h_preservation"] = _defect(np.abs(hamiltonian(MX, MY, ML) - hamiltonian(X, Y, L)), pts)
    defects["lambda_preservation"] = _defect(np.abs(ML - L), pts)
    det = mu.jacobian_det(X, Y, L)
    g0 = model.g_at(X, Y, L)
    g1 = model.g_at(MX, MY, ML)
    defects["area"] = _defect(np.abs(g1 * det - g0), pts)
    PX, PY, PL = parabola_points(model)
    QX, QY, QL = mu(PX, PY, PL)
    defects["parabola_fixed"] = _defect(np.hypot(QX - PX, QY - PY), (PX, PY, PL))
    failed = [
        k
        for k, lim in (("h_preservation", tol["h_preservation"]), ("area", tol["area"]), ("parabola_fixed", tol["parabola_fixed"]))
        if not defects[k]["max"] <= lim
    ]
    if defects["lambda_preservation"]["max"] != 0.0:
        failed.append("lambda_preservation")
    if failed and raise_on_fail:
        raise ValidationError(f"section map is not F-preserving/symplectic: {', '.join(failed)}", defects)
    return defects


def validated(mu: SectionMap, tolerances=None) -> SectionMap:
    defects = validate_map(mu, tolerances)
    return SectionMap(mu.kind, mu.model, mu.v, mu.mu_x, mu.mu_y, defects)


# -------------------------------------------------------- section quantities


def _eta(mu, y, lam, mux, nu):
    """sign(mu^x); where mu^x = 0 but nu != 0 the direction comes from the
    ODE time of flight (forward flow leaves x = 0 with sign(lambda - 3y^2))."""
    eta = np.sign(mux)
    amb = (mux == 0) & (nu != 0)
    if np.any(amb):
        ya, la = y[amb], lam[amb]
        starts = np.stack([np.zeros_like(ya), ya, la], axis=1)
        disp = np.stack([np.zeros_like(ya), nu[amb], np.zeros_like(ya)], axis=1)
        t = time_of_flight_batch(mu.model, starts, None, displacement=disp)
        eta[amb] = np.sign(t) * np.sign(la - 3 * ya * ya)
    return eta, amb


def _direct_quotients(nu, eta, D):
    prod = nu * D
    if np.any(prod < -NEG_SLACK):
        raise DomainError("nu (3y^2 - lambda) < 0: the map does not follow the fibers from the section")
    prod = np.maximum(prod, 0.0)
    return nu / D, eta * np.sqrt(prod) / D


def _lagrange_weights(nodes, target):
    w = np.ones(len(nodes))
    for i, xi in enumerate(nodes):
        for j, xj in enumerate(nodes):
            if i != j:
                w[i] *= (target - xj) / (xi - xj)
    return w


def hadamard_quotient(model, mu: SectionMap, y, lam, side=None):
    """q1 = nu / D and q2 = eta sqrt(nu D) / D with D = 3y^2 - lambda.

    Inside the band |D| <= 1e-6 both are extrapolated (cubic, four approach
    points along lambda) from the side ``side`` (+1: D > 0, -1: D < 0;
    default: the side of D, or +1 on the parabola).
    """
    y0, l0 = y, lam
    y, lam = _arr(y, lam)
    y, lam = y.ravel(), lam.ravel()
    D = 3 * y * y - lam
    band = np.abs(D) <= PARABOLA_BAND
    if side is not None:
        band = np.ones_like(band)
    q1 = np.zeros_like(y)
    q2 = np.zeros_like(y)
    eta_all = np.zeros_like(y)
    nu_all = np.zeros_like(y)

    k = np.arange(1, 5)
    off = ~band
    yb, lb = y[band], lam[band]
    if side is None:
        sb = np.where(D[band] < 0, -1.0, 1.0)
    else:
        sb = np.full(yb.shape, float(side))
    # approach points: D_k = s * k * step, i.e. lambda_k = 3y^2 - D_k
    Dk = sb[:, None] * k[None, :] * EXTRAP_STEP
    ya = np.concatenate([y[off], np.repeat(yb, 4)])
    la = np.concatenate([lam[off], (3 * yb[:, None] ** 2 - Dk).ravel()])
    mux, nu = mu.displacement(np.zeros_like(ya), ya, la)
    eta, _ = _eta(mu, ya, la, mux, nu)
    Da = 3 * ya * ya - la
    qa1, qa2 = _direct_quotients(nu, eta, Da)
    m = int(np.count_nonzero(off))
    q1[off], q2[off] = qa1[:m], qa2[:m]
    eta_all[off], nu_all[off] = eta[:m], nu[:m]
    if np.any(band):
        b1 = qa1[m:].reshape(-1, 4)
        b2 = qa2[m:].reshape(-1, 4)
        tgt = D[band]
        e1 = np.empty(len(tgt))
        e2 = np.empty(len(tgt))
        for i in range(len(tgt)):
            w4 = _lagrange_weights(Dk[i], tgt[i])
            w3 = _lagrange_weights(Dk[i][:3], tgt[i])
            e1[i] = w4 @ b1[i]
            e2[i] = w4 @ b2[i]
            gap = max(abs(e1[i] - w3 @ b1[i][:3]), abs(e2[i] - w3 @ b2[i][:3]))
            if not gap <= 1e-3 * max(1.0, abs(e1[i]), abs(e2[i])):
                raise NumericalError(
                    f"Hadamard extrapolation diverges at y={yb[i]}, lambda={lb[i]}: map not fiber-preserving?"
                )
        q1[band], q2[band] = e1, e2
        nu_all[band] = e1 * tgt
        eta_all[band] = np.sign(e2 * tgt)
    shape = np.broadcast(np.asarray(y0), np.asarray(l0)).shape
    return _scalar_out(q1.reshape(shape), y0), _scalar_out(q2.reshape(shape), y0)


def _section_quotients(mu, y, lam):
    """(q1, q2, nu, eta*sqrt(nu D)) on flat arrays, band-aware."""
    q1, q2 = hadamard_quotient(mu.model, mu, y, lam)
    q1 = np.atleast_1d(q1)
    q2 = np.atleast_1d(q2)
    D = 3 * y * y - lam
    return q1, q2, q1 * D, q2 * D


def u_desing(model, mu: SectionMap, y, lam):
    """Flow time u(y, lambda) by the desingularized quadrature."""
    y0 = y
    y, lam = _arr(y, lam)
    shape = y.shape
    y, lam = y.ravel(), lam.ravel()
    if mu.kind == MapKind.IDENTITY:
        return _scalar_out(np.zeros(shape), y0)
    q1, q2, nu, es = _section_quotients(mu, y, lam)

    yy, ll = y[:, None], lam[:, None]
    a1, a2, nn, ee = q1[:, None], q2[:, None], nu[:, None], es[:, None]

    def integrand(z):
        z2 = z * z
        inner = 1.0 + a1 * (z2 * z2 * nn + 3.0 * z2 * yy)
        if np.any(inner < -NEG_SLACK):
            raise DomainError("desingularized radicand negative: the map leaves the admissible arc")
        root = np.sqrt(np.maximum(inner, 0.0))
        xz = z * ee * root
        t = yy + z2 * nn
        g = model.g_at(xz, t, np.broadcast_to(ll, t.shape))
        return g / root

    integral, _ = integrate01(integrand)
    u = -q2 * integral
    return _scalar_out(u.reshape(shape), y0)


def u_singular(model, mu: SectionMap, y, lam):
    """Flow time from the raw inverse-square-root integral (cross-check)."""
    y0 = y
    y, lam = _arr(y, lam)
    shape = y.shape
    y, lam = y.ravel(), lam.ravel()
    D = 3 * y * y - lam
    if np.any(np.abs(D) < SINGULAR_REFUSE):
        raise NumericalError("u_singular refuses points within 1e-6 of the critical parabola")
    if mu.kind == MapKind.IDENTITY:
        return _scalar_out(np.zeros(shape), y0)
    mux, nu = mu.displacement(np.zeros_like(y), y, lam)
    eta, _ = _eta(mu, y, lam, mux, nu)
    yy, ll, nn, ee = y[:, None], lam[:, None], nu[:, None], eta[:, None]

    def integrand(s):
        dt = nn * s * s
        t = yy + dt
        quad = t * t + t * yy + yy * yy - ll
        p = dt * quad
        if np.any(p < -NEG_SLACK * np.maximum(1.0, np.abs(t) ** 3)):
            raise DomainError("t^3 - lambda t + lambda y - y^3 < 0 inside the arc: map overshoots the fiber")
        nq = np.maximum(nn * quad, 0.0)
        sq = np.sqrt(nq)
        x = ee * s * sq
        g = model.g_at(x, t, np.broadcast_to(ll, t.shape))
        # g / (2 sqrt(p)) * dt/ds with dt/ds = 2 nu s and sqrt(p) = s sqrt(nu quad)
        with np.errstate(divide="ignore", invalid="ignore"):
            val = np.where(nq > 0, g * nn / np.where(nq > 0, sq, 1.0), 0.0)
        return val

    integral, _ = integrate01(integrand)
    u = -eta * integral
    u = np.where(nu == 0, 0.0, u)
    return _scalar_out(u.reshape(shape), y0)


def u_oracle_ode(model, mu: SectionMap, y, lam, tol=1e-8):
    """Flow time by event-located ODE integration from (0, y, lambda) to its image."""
    y0 = y
    y, lam = _arr(y, lam)
    shape = y.shape
    y, lam = y.ravel(), lam.ravel()
    if np.any((3 * y * y - lam) == 0):
        raise NumericalError("u_oracle_ode requires points off the critical parabola")
    if mu.kind == MapKind.IDENTITY:
        return _scalar_out(np.zeros(shape), y0)
    dx, dy = mu.displacement(np.zeros_like(y), y, lam)
    starts = np.stack([np.zeros_like(y), y, lam], axis=1)
    disp = np.stack([dx, dy, np.zeros_like(y)], axis=1)
    t = time_of_flight_batch(model, starts, None, tol=tol, displacement=disp)
    return _scalar_out(t.reshape(shape), y0)


def hadamard_two_sided(model, mu, y):
    """Extrapolations of (q1, q2) to points of the parabola from D > 0 and D < 0."""
    y = np.atleast_1d(np.asarray(y, float))
    lam = 3 * y * y
    p1, p2 = hadamard_quotient(model, mu, y, lam, side=+1)
    m1, m2 = hadamard_quotient(model, mu, y, lam, side=-1)
    return (np.atleast_1d(p1), np.atleast_1d(p2)), (np.atleast_1d(m1), np.atleast_1d(m2))


# ------------------------------------------------------------ branch tables


class Sheet(str, enum.Enum):
    OUTER = "outer"
    SWALLOWTAIL = "swallowtail"


def sheet_roots(sheet: Sheet, h, lam):
    """Section root carrying the branch function; NaN where inadmissible."""
    h, lam = _arr(h, lam)
    r1, r2, r3, three = roots_array(lam, h)
    bnd = np.abs(discriminant(lam, h)) <= BOUNDARY_TOL * _boundary_scale(lam, h)
    if sheet == Sheet.SWALLOWTAIL:
        return np.where(three & ~bnd, r1, np.nan)
    return np.where(bnd & three & (h > 0), r1, r3)


def branch_value(model, mu, sheet: Sheet, h, lam):
    h0 = h
    h, lam = _arr(h, lam)
    shape = h.shape
    root = sheet_roots(sheet, h, lam).ravel()
    out = np.full(root.shape, np.nan)
    ok = np.isfinite(root)
    if np.any(ok):
        out[ok] = np.atleast_1d(u_desing(model, mu, root[ok], lam.ravel()[ok]))
    return _scalar_out(out.reshape(shape), h0)


@dataclass
class BranchTable:
    sheet: Sheet
    h: np.ndarray
    lam: np.ndarray
    values: np.ndarray
    fd: dict

    def rows(self):
        names = ("d_h", "d_lambda", "d_hh", "d_hlambda", "d_lambdalambda")
        for i, hv in enumerate(self.h):
            for j, lv in enumerate(self.lam):
                if np.isfinite(self.values[i, j]):
                    yield [float(hv), float(lv), float(self.values[i, j])] + [float(self.fd[k][i, j]) for k in names]


@dataclass(frozen=True)
class BranchGrid:
    h_bounds: tuple = (-0.3, 0.3)
    lam_bounds: tuple = (-0.4, 0.5)
    nh: int = 13
    nlam: int = 11

    def axes(self):
        if self.nh < 2 or self.nlam < 2:
            raise ConfigError("branch grid counts must be >= 2")
        return np.linspace(*self.h_bounds, self.nh), np.linspace(*self.lam_bounds, self.nlam)


def _region(sheet, h, lam):
    """Region label used to keep FD stencils inside one smooth piece."""
    hp, hm = branch_h(lam)
    inside = (lam > 0) & (h < hp) & (h > hm)
    if sheet == Sheet.SWALLOWTAIL:
        return np.where(inside, 1, -1)
    return np.where(inside, 1, 0)


def _stencil_fd(model, mu, sheet, H, L):
    """FD partials of a branch function at points (H, L) (flat arrays)."""
    s1, s2 = FD_STEP, FD2_STEP
    offs = []
    for s in (s1, s1 / 2):
        offs += [(s, 0), (-s, 0), (0, s), (0, -s)]
    offs += [(s2, 0), (-s2, 0), (0, s2), (0, -s2), (s2, s2), (s2, -s2), (-s2, s2), (-s2, -s2)]
    n = len(H)
    hs = np.concatenate([H] + [H + a for a, _ in offs])
    ls = np.concatenate([L] + [L + b for _, b in offs])
    reg = _region(sheet, hs, ls).reshape(-1, n)
    vals = np.atleast_1d(branch_value(model, mu, sheet, hs, ls)).reshape(-1, n)
    ok = np.all(reg == reg[0], axis=0) & (reg[0] >= 0) & np.all(np.isfinite(vals), axis=0)
    f0 = vals[0]
    v = vals[1:]

    def rich(a, b, c, d):
        coarse = (v[a] - v[b]) / (2 * s1)
        fine = (v[c] - v[d]) / s1
        return (4 * fine - coarse) / 3

    d_h = rich(0, 1, 4, 5)
    d_l = rich(2, 3, 6, 7)
    d_hh = (v[8] - 2 * f0 + v[9]) / s2**2
    d_ll = (v[10] - 2 * f0 + v[11]) / s2**2
    d_hl = (v[12] - v[13] - v[14] + v[15]) / (4 * s2 * s2)
    fd = {"d_h": d_h, "d_lambda": d_l, "d_hh": d_hh, "d_hlambda": d_hl, "d_lambdalambda": d_ll}
    for k in fd:
        fd[k] = np.where(ok, fd[k], np.nan)
    return fd


def branch_tables(model, mu: SectionMap, grid: BranchGrid = BranchGrid(), with_fd=True):
    """Tables of the outer-sheet and swallowtail-sheet branch functions.

    Also returns the oval-consistency defect |u(r1) - u(r2)| over oval fibers.
    """
    hs, ls = grid.axes()
    Hg, Lg = np.meshgrid(hs, ls, indexing="ij")
    tables = []
    for sheet in (Sheet.OUTER, Sheet.SWALLOWTAIL):
        root = sheet_roots(sheet, Hg, Lg)
        fin = np.isfinite(root)
        if np.any(np.abs(root[fin]) > model.radius):
            raise ConfigError("branch grid reaches fibers whose section root lies outside the model box")
        vals = np.atleast_1d(branch_value(model, mu, sheet, Hg, Lg)).reshape(Hg.shape)
        fd = {k: np.full(Hg.shape, np.nan) for k in ("d_h", "d_lambda", "d_hh", "d_hlambda", "d_lambdalambda")}
        if with_fd:
            adm = np.isfinite(vals)
            if np.any(adm):
                part = _stencil_fd(model, mu, sheet, Hg[adm], Lg[adm])
                for k in fd:
                    fd[k][adm] = part[k]
        tables.append(BranchTable(sheet, hs, ls, vals, fd))
    r1, r2, r3, three = roots_array(Lg, Hg)
    bnd = np.abs(discriminant(Lg, Hg)) <= BOUNDARY_TOL * _boundary_scale(Lg, Hg)
    oval = three & ~bnd
    if np.any(oval):
        u2 = np.atleast_1d(u_desing(model, mu, r2[oval], Lg[oval]))
        u1 = tables[1].values[oval]
        consist = _defect(np.abs(u1 - u2), (Hg[oval], Lg[oval]))
    else:
        consist = {"max": 0.0, "at": None}
    return tables[0], tables[1], consist


def write_table_csv(path, table: BranchTable):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["h", "lambda", "value", "d_h", "d_lambda", "d_hh", "d_hlambda", "d_lambdalambda"])
        for row in table.rows():
            w.writerow([_fmt(v) for v in row])


def _fmt(v):
    v = float(v)
    return repr(v) if math.isfinite(v) else ""


# -------------------------------------------------------------------- u_hat


def u_hat(model, mu: SectionMap, x, y, lam):
    """Fiberwise extension: the branch function of the point's component."""
    x0 = x
    x, y, lam = _arr(x, y, lam)
    shape = x.shape
    code, h, root = stratum_codes(x.ravel(), y.ravel(), lam.ravel())
    val = np.atleast_1d(u_desing(model, mu, root, lam.ravel()))
    return _scalar_out(val.reshape(shape), x0)


# ---------------------------------------------------------- smoothness scan


@dataclass(frozen=True)
class ScanRegion:
    branch_lams: tuple = tuple(np.linspace(0.05, 0.4, 8))
    cusp_lam0: float = 0.2
    cusp_levels: int = 7
    cusp_fractions: tuple = (0.0, 0.5, -0.5)
    parabola_ys: tuple = tuple(np.linspace(-0.4, 0.4, 9))
    second_diff_points: tuple = ((0.0, 0.0), (0.05, 0.01), (-0.05, 0.01), (0.0, 0.05), (0.1, -0.05), (-0.15, 0.1), (0.2, 0.2))


def _one_sided(vals, s):
    """Five-point one-sided first derivative at node 0."""
    return (-25 * vals[0] + 48 * vals[1] - 36 * vals[2] + 16 * vals[3] - 3 * vals[4]) / (12 * s)


def _section_dy(model, mu, y, lam, s=FD_STEP):
    """Central difference of u in y with one Richardson step."""
    y, lam = _arr(y, lam)
    y, lam = y.ravel(), lam.ravel()
    ys = np.concatenate([y + s, y - s, y + s / 2, y - s / 2])
    ls = np.concatenate([lam] * 4)
    u = np.atleast_1d(u_desing(model, mu, ys, ls)).reshape(4, -1)
    coarse = (u[0] - u[1]) / (2 * s)
    fine = (u[2] - u[3]) / s
    return (4 * fine - coarse) / 3


def branch_gradients(model, mu, lams):
    """One-sided gradients (d_h, d_lambda) at the hyperbolic branch.

    Returns dict with keys 'swallowtail_in', 'outer_in', 'outer_out', each an
    array of shape (n, 2).
    """
    lams = np.asarray(lams, float)
    hp = branch_h(lams)[0]
    # inward normal of {h = 2 (lambda/3)^{3/2}} points to h < h_plus
    nvec = np.stack([-np.ones_like(lams), np.sqrt(lams / 3.0)], axis=1)
    nvec /= np.linalg.norm(nvec, axis=1)[:, None]
    tvec = np.stack([-nvec[:, 1], nvec[:, 0]], axis=1)
    s = FD_STEP
    out = {}
    for name, sheet, sgn in (("swallowtail_in", Sheet.SWALLOWTAIL, 1.0), ("outer_in", Sheet.OUTER, 1.0), ("outer_out", Sheet.OUTER, -1.0)):
        nn = sgn * nvec
        base_h = hp + BOUNDARY_OFFSET * nn[:, 0]
        base_l = lams + BOUNDARY_OFFSET * nn[:, 1]
        hs, ls = [], []
        for k in range(5):
            hs.append(base_h + k * s * nn[:, 0])
            ls.append(base_l + k * s * nn[:, 1])
        for k in (1, -1, 0.5, -0.5):
            hs.append(base_h + k * s * tvec[:, 0])
            ls.append(base_l + k * s * tvec[:, 1])
        vals = np.atleast_1d(branch_value(model, mu, sheet, np.concatenate(hs), np.concatenate(ls))).reshape(9, -1)
        dn = _one_sided(vals[:5], s)
        dt = (4 * (vals[7] - vals[8]) / s - (vals[5] - vals[6]) / (2 * s)) / 3
        # gradient = dn * n + dt * t  (n, t orthonormal)
        grad = dn[:, None] * nn + dt[:, None] * tvec
        out[name] = grad
    return out


def _second_differences(f, pts, s):
    """Max |second difference| over points for d_yy, d_ll, d_yl of f(y, l)."""
    P = np.asarray(pts, float)
    a, b = P[:, 0], P[:, 1]
    stencil = [(0, 0), (s, 0), (-s, 0), (0, s), (0, -s), (s, s), (s, -s), (-s, s), (-s, -s)]
    A = np.concatenate([a + da for da, _ in stencil])
    B = np.concatenate([b + db for _, db in stencil])
    v = np.atleast_1d(f(A, B)).reshape(len(stencil), -1)
    dyy = (v[1] - 2 * v[0] + v[2]) / s**2
    dll = (v[3] - 2 * v[0] + v[4]) / s**2
    dyl = (v[5] - v[6] - v[7] + v[8]) / (4 * s * s)
    return np.max(np.abs(np.stack([dyy, dll, dyl])))


def directional_ratio(S, r):
    """Parallelogram-law ratio of directional second differences at 0.

    For a C^2 function, Q(e1) + Q(e2) = Q(d+) + Q(d-) with d+- the unit
    diagonals, so the ratio (axes / diagonals) tends to 1; for
    sqrt(x^4 + y^4) it is sqrt(2).
    """
    c = 1 / math.sqrt(2)
    dirs = np.array([(1, 0), (0, 1), (c, c), (c, -c)], float)
    pts = np.concatenate([r * dirs, -r * dirs])
    vals = np.asarray(S(pts[:, 0], pts[:, 1]), float)
    s0 = float(np.asarray(S(np.zeros(1), np.zeros(1)), float).reshape(-1)[0])
    q = (vals[:4] + vals[4:] - 2 * s0) / r**2
    return float((q[0] + q[1]) / (q[2] + q[3]))


def first_difference_ratio(S, r):
    """Linear vanishing of one-sided first differences at 0 along the axis
    and the diagonal: ratio (D1(r) / r) / (D1(r/2) / (r/2)), max over both
    directions; tends to 1 when S is C^1 with zero gradient and a second
    order expansion along each ray."""
    c = 1 / math.sqrt(2)
    out = []
    s0 = float(np.asarray(S(np.zeros(1), np.zeros(1)), float).reshape(-1)[0])
    for e in ((1.0, 0.0), (c, c)):
        pts = np.array([[r * e[0], r * e[1]], [0.5 * r * e[0], 0.5 * r * e[1]]])
        v = np.asarray(S(pts[:, 0], pts[:, 1]), float) - s0
        out.append((v[0] / r**2) / (v[1] / (0.5 * r) ** 2))
    return out


def parabolic_generating_function(model, mu, lam0=0.0):
    """S(x, y) = int_0^{H(x, y, lam0)} u~(s, lam0) ds on the outer sheet."""

    def S(x, y):
        x, y = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
        H = hamiltonian(x, y, lam0).ravel()

        def f(z):
            hs = H[:, None] * z[None, :]
            vals = np.atleast_1d(branch_value(model, mu, Sheet.OUTER, hs.ravel(), np.full(hs.size, lam0)))
            return vals.reshape(hs.shape) * H[:, None]

        from .quadrature import gauss_legendre01

        z, w = gauss_legendre01(32)
        return (f(z) @ w).reshape(x.shape)

    return S


def smoothness_scan(model, mu: SectionMap, tables=None, region: ScanRegion = ScanRegion(), tolerances=None):
    """Numerical smoothness indicators of the reconstruction.

    (a) one-sided derivative mismatch across the hyperbolic branch,
    (b) continuity of d_h u~o toward (h, lambda) = (0, 0),
    (c) d_y u on lambda = 3 y^2,
    (d) second differences under step halving.
    """
    tol = dict(DEFAULT_TOLERANCES)
    tol.update(tolerances or {})
    report = {"convention": CONVENTION}
    if not any(l > 0 for l in region.branch_lams):
        raise ConfigError("scan region has no lambda > 0 samples: swallowtail sheet empty")

    lams = np.array([l for l in region.branch_lams if l > 0])
    grads = branch_gradients(model, mu, lams)
    mis_in = np.max(np.abs(grads["outer_in"] - grads["swallowtail_in"]), axis=1)
    mis_out = np.max(np.abs(grads["outer_out"] - grads["swallowtail_in"]), axis=1)
    mis = np.maximum(mis_in, mis_out)
    i = int(np.argmax(mis))
    report["branch_mismatch"] = {"max": float(mis[i]), "at": [float(branch_h(lams[i])[0]), float(lams[i])]}

    # (b) d_h u~o = d_y u / (lambda - 3 y^2) at y = r1, along paths to the cusp
    levels = region.cusp_lam0 * 0.5 ** np.arange(region.cusp_levels)
    paths = {}
    for frac in region.cusp_fractions:
        hh = frac * branch_h(levels)[0]
        r1 = sheet_roots(Sheet.SWALLOWTAIL, hh, levels)
        du = np.atleast_1d(_section_dy(model, mu, r1, levels))
        paths[repr(float(frac))] = (du / (levels - 3 * r1 * r1)).tolist()
    tails = [abs(p[-1] - p[-2]) for p in paths.values()]
    ends = [p[-1] for p in paths.values()]
    s = FD_STEP
    outer = np.atleast_1d(branch_value(model, mu, Sheet.OUTER, np.array([s, -s, s / 2, -s / 2]), np.zeros(4)))
    d_outer = float((4 * (outer[2] - outer[3]) / s - (outer[0] - outer[1]) / (2 * s)) / 3)
    report["cusp_continuity"] = {
        "lambdas": levels.tolist(),
        "paths": paths,
        "modulus": float(max(tails)),
        "path_spread": float(max(ends) - min(ends)),
        "outer_d_h_at_origin": d_outer,
        "gap_to_outer": float(max(abs(e - d_outer) for e in ends)),
    }

    ys = np.asarray(region.parabola_ys, float)
    res = np.abs(np.atleast_1d(_section_dy(model, mu, ys, 3 * ys * ys)))
    i = int(np.argmax(res))
    report["parabola_residual"] = {"max": float(res[i]), "at": [float(ys[i]), float(3 * ys[i] ** 2)]}

    (p1, p2), (m1, m2) = hadamard_two_sided(model, mu, ys)
    agree = np.maximum(np.abs(p1 - m1), np.abs(p2 - m2))
    i = int(np.argmax(agree))
    finite = bool(np.all(np.isfinite(np.concatenate([p1, p2, m1, m2]))))
    report["hadamard_agreement"] = {"max": float(agree[i]), "at": [float(ys[i]), float(3 * ys[i] ** 2)], "finite": finite}

    f = lambda a, b: u_desing(model, mu, a, b)
    m_coarse = _second_differences(f, region.second_diff_points, FD2_STEP)
    m_fine = _second_differences(f, region.second_diff_points, FD2_STEP / 2)
    ratio = (m_fine + SECOND_DIFF_FLOOR) / (m_coarse + SECOND_DIFF_FLOOR)
    report["second_difference"] = {"coarse": float(m_coarse), "fine": float(m_fine), "ratio": float(ratio), "floor": SECOND_DIFF_FLOOR}

    report["pass"] = bool(
        report["branch_mismatch"]["max"] <= tol["branch_mismatch"]
        and report["parabola_residual"]["max"] <= tol["parabola_residual"]
        and finite
        and report["hadamard_agreement"]["max"] <= tol["hadamard_agreement"]
        and tol["second_diff_low"] <= ratio <= tol["second_diff_high"]
    )
    return report


@dataclass
class ReconstructionReport:
    section: dict
    outer: BranchTable
    swallowtail: BranchTable
    u_hat_samples: dict
    defects: dict
    eta: dict
    scan: dict | None = None
    convention: str = CONVENTION


def write_json(path, obj):
    with open(path, "w") as fh:
        fh.write(dumps(obj))
        fh.write("\n")


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, enum.Enum):
        return obj.value
    return obj


def dumps(obj) -> str:
    """Deterministic JSON; floats use the shortest round-trip repr."""
    return json.dumps(_clean(obj), indent=2, sort_keys=False, allow_nan=False)
