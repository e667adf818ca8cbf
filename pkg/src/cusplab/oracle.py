"""End-to-end experiments: oracle maps, round trips, suspension, negative control."""

from __future__ import annotations

import functools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import quad

from .action import (
    DEFAULT_TOLERANCES,
    BranchGrid,
    MapKind,
    ReconstructionReport,
    SectionMap,
    _defect,
    branch_tables,
    directional_ratio,
    first_difference_ratio,
    parabolic_generating_function,
    smoothness_scan,
    u_desing,
    u_hat,
    u_oracle_ode,
    u_singular,
    validate_map,
)
from .errors import ConfigError, NumericalError
from .exprlang import BinOp, Num, ScalarExpr, as_expr
from .flow import (
    BOX_EXIT,
    EVENT,
    OK,
    BoxExitError,
    _pt,
    HyperplaneEvent,
    flow_displacement,
    integrate_batch,
    xh_reduced,
)
from .model import ParabolicModel, hamiltonian
from .quadrature import gauss_legendre01

CHUNK = 400


# ------------------------------------------------------------------ grids


@dataclass(frozen=True)
class SectionGrid:
    ny: int = 40
    nlam: int = 40
    y_bounds: tuple = (-0.4, 0.4)
    lam_bounds: tuple = (-0.4, 0.4)

    def points(self):
        if self.ny < 2 or self.nlam < 2:
            raise ConfigError("section grid counts must be >= 2")
        Y, L = np.meshgrid(np.linspace(*self.y_bounds, self.ny), np.linspace(*self.lam_bounds, self.nlam), indexing="ij")
        return Y.ravel(), L.ravel()


@dataclass(frozen=True)
class FiberGrid:
    nx: int = 20
    ny: int = 20
    nlam: int = 20
    bounds: tuple = (-0.4, 0.4)

    def points(self):
        if min(self.nx, self.ny, self.nlam) < 2:
            raise ConfigError("fiber grid counts must be >= 2")
        lo, hi = self.bounds
        X, Y, L = np.meshgrid(
            np.linspace(lo, hi, self.nx), np.linspace(lo, hi, self.ny), np.linspace(lo, hi, self.nlam), indexing="ij"
        )
        return X.ravel(), Y.ravel(), L.ravel()


# ------------------------------------------------------------------- bump


@dataclass(frozen=True)
class Bump:
    """alpha(phi) = c exp(-1 / (1 - ((phi - center) / width)^2)), unit integral."""

    center: float = math.pi
    width: float = 2.0

    def __post_init__(self):
        if not (self.width > 0 and self.center - self.width >= 0 and self.center + self.width <= 2 * math.pi):
            raise ConfigError("bump support must lie inside [0, 2pi]")

    def _raw(self, phi):
        z = (np.asarray(phi, float) - self.center) / self.width
        inside = np.abs(z) < 1
        out = np.zeros(z.shape)
        out[inside] = np.exp(-1.0 / (1.0 - z[inside] ** 2))
        return out

    @functools.cached_property
    def norm(self):
        val, _ = quad(lambda p: float(self._raw(p)), self.center - self.width, self.center + self.width, epsabs=1e-14, epsrel=1e-13, limit=200)
        return val

    def __call__(self, phi):
        return self._raw(phi) / self.norm


@dataclass
class ExperimentSpec:
    model: ParabolicModel
    map: SectionMap
    section: SectionGrid = SectionGrid()
    branch: BranchGrid = BranchGrid()
    fiber: FiberGrid = FiberGrid()
    tolerances: dict = field(default_factory=dict)
    bump: Bump = Bump()
    seed: int = 0
    jobs: int = 1

    def tol(self, name):
        return self.tolerances.get(name, DEFAULT_TOLERANCES.get(name))


def _chunked(fn, args, arrays, jobs):
    """Apply fn(*args, *chunk) over fixed-size chunks; order and chunking
    do not depend on ``jobs`` so results are reproducible."""
    n = len(arrays[0])
    if n == 0:
        return np.zeros(0)
    pieces = [tuple(a[i : i + CHUNK] for a in arrays) for i in range(0, n, CHUNK)]
    if jobs > 1 and len(pieces) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            outs = list(ex.map(_call, [(fn, args, p) for p in pieces]))
    else:
        outs = [_call((fn, args, p)) for p in pieces]
    return np.concatenate([np.atleast_1d(o) for o in outs])


def _call(job):
    fn, args, piece = job
    return fn(*args, *piece)


# ---------------------------------------------------------------- mu maps


def generate_mu(model: ParabolicModel, v, tolerances=None) -> SectionMap:
    """Time-v(H, lambda) map of X_H, validated (window, H, area, parabola)."""
    v = as_expr(v)
    if not v.freevars and float(v()) == 0.0:
        mu = SectionMap.identity(model)
    else:
        mu = SectionMap.oracle(model, v)
    defects = validate_map(mu, tolerances)
    return SectionMap(mu.kind, mu.model, mu.v, mu.mu_x, mu.mu_y, defects)


def map_from_config(model, kind, v=None, mu_x=None, mu_y=None, tolerances=None):
    if kind == "identity":
        mu = SectionMap.identity(model)
        return SectionMap(mu.kind, model, validation=validate_map(mu, tolerances))
    if kind == "oracle":
        if v is None:
            raise ConfigError("oracle map needs 'v'")
        return generate_mu(model, v, tolerances)
    if kind == "explicit":
        if mu_x is None or mu_y is None:
            raise ConfigError("explicit map needs 'mu_x' and 'mu_y'")
        mu = SectionMap.explicit(model, mu_x, mu_y)
        return SectionMap(mu.kind, model, None, mu.mu_x, mu.mu_y, validate_map(mu, tolerances))
    raise ConfigError(f"unknown map type {kind!r}")


def truth(mu: SectionMap, x, y, lam):
    """v(H, lambda) for oracle maps, 0 for the identity, None otherwise."""
    if mu.kind == MapKind.ORACLE:
        return mu.flow_times(x, y, lam)
    if mu.kind == MapKind.IDENTITY:
        return np.zeros(np.broadcast(x, y, lam).shape)
    return None


def _uhat_chunk(model, mu, x, y, lam):
    return u_hat(model, mu, x, y, lam)


def _time1_defect(model, mu, x, y, lam, uh):
    """|flow of X_H for time u_hat(p) - mu(p)|: the time-1 map statement."""
    pts = np.stack([x, y, lam], axis=1)
    d_flow = flow_displacement(model, pts, uh)
    dx, dy = mu.displacement(x, y, lam)
    return np.hypot(d_flow[:, 0] - dx, d_flow[:, 1] - dy)


# --------------------------------------------------------------- roundtrip


def roundtrip(spec: ExperimentSpec) -> ReconstructionReport:
    """Reconstruct u, the branch functions and u_hat, and compare with v."""
    model, mu = spec.model, spec.map
    defects = {}

    ys, ls = spec.section.points()
    ud = np.atleast_1d(u_desing(model, mu, ys, ls))
    D = 3 * ys * ys - ls
    off = np.abs(D) > 1e-3
    us = np.atleast_1d(u_singular(model, mu, ys[off], ls[off]))
    defects["desing_vs_singular"] = _defect(np.abs(us - ud[off]), (ys[off], ls[off]))
    nonpar = D != 0
    uo = np.atleast_1d(u_oracle_ode(model, mu, ys[nonpar], ls[nonpar]))
    defects["quadrature_vs_ode"] = _defect(np.abs(uo - ud[nonpar]), (ys[nonpar], ls[nonpar]))
    sec_truth = truth(mu, np.zeros_like(ys), ys, ls)
    if sec_truth is not None:
        defects["section_error"] = _defect(np.abs(ud - sec_truth), (ys, ls))
    nu_d = mu.displacement(np.zeros_like(ys), ys, ls)[1] * D
    defects["sign_check"] = _defect(np.maximum(-nu_d, 0.0), (ys, ls))

    outer, swallow, consist = branch_tables(model, mu, spec.branch)
    defects["oval_consistency"] = consist
    Hg, Lg = np.meshgrid(outer.h, outer.lam, indexing="ij")
    if mu.kind == MapKind.ORACLE:
        tv = mu.v(h=Hg, **{"lambda": Lg})
        tv = np.broadcast_to(tv, Hg.shape)
        for name, tab in (("outer_table_error", outer), ("swallowtail_table_error", swallow)):
            fin = np.isfinite(tab.values)
            defects[name] = _defect(np.abs(tab.values[fin] - tv[fin]), (Hg[fin], Lg[fin]))
    elif mu.kind == MapKind.IDENTITY:
        for name, tab in (("outer_table_error", outer), ("swallowtail_table_error", swallow)):
            fin = np.isfinite(tab.values)
            defects[name] = _defect(np.abs(tab.values[fin]), (Hg[fin], Lg[fin]))

    X, Y, L = spec.fiber.points()
    uh = _chunked(_uhat_chunk, (model, mu), (X, Y, L), spec.jobs)
    tr = truth(mu, X, Y, L)
    if tr is not None:
        defects["roundtrip"] = _defect(np.abs(uh - tr), (X, Y, L))
    rng = np.random.default_rng(spec.seed)
    pick = np.sort(rng.choice(len(X), size=min(200, len(X)), replace=False))
    t1 = _time1_defect(model, mu, X[pick], Y[pick], L[pick], uh[pick])
    defects["time1_map"] = _defect(t1, (X[pick], Y[pick], L[pick]))

    scan = smoothness_scan(model, mu, tolerances=spec.tolerances)
    defects["boundary_derivative_mismatch"] = scan["branch_mismatch"]
    defects["parabola_residual"] = scan["parabola_residual"]
    defects["hadamard_agreement"] = {k: scan["hadamard_agreement"][k] for k in ("max", "at")}

    eta = {
        "ambiguous_points": int(np.count_nonzero((mu.displacement(np.zeros_like(ys), ys, ls)[0] == 0) & (nu_d != 0))),
        "rule": "eta = sign(mu^x); where mu^x = 0 and nu != 0, sign(t_ode) * sign(lambda - 3y^2)",
    }
    section = {"y": ys, "lambda": ls, "u": ud}
    samples = {"x": X, "y": Y, "lambda": L, "u_hat": uh}
    return ReconstructionReport(section, outer, swallow, samples, defects, eta, scan)


def roundtrip_pass(report: ReconstructionReport, spec: ExperimentSpec):
    d = report.defects
    checks = {
        "desing_vs_singular": "desing_vs_singular",
        "quadrature_vs_ode": "quadrature_vs_ode",
        "oval_consistency": "oval_consistency",
        "roundtrip": "roundtrip",
        "outer_table_error": "roundtrip",
        "swallowtail_table_error": "roundtrip",
        "section_error": "roundtrip",
        "time1_map": "roundtrip",
        "boundary_derivative_mismatch": "branch_mismatch",
        "parabola_residual": "parabola_residual",
        "hadamard_agreement": "hadamard_agreement",
    }
    ok = all(d[k]["max"] <= spec.tol(t) for k, t in checks.items() if k in d)
    return bool(ok and d["sign_check"]["max"] <= 1e-12 and report.scan["pass"])


def parabolic_ratio(model, mu, r=1e-3):
    """Directional second-difference ratio of the lambda = 0 generating function."""
    return directional_ratio(parabolic_generating_function(model, mu), r)


# ----------------------------------------------------- perturbation check


def perturbation_continuity(spec: ExperimentSpec, delta: float, w="1", n=6) -> float:
    """max |u_hat[v + delta w] - u_hat[v]| / delta over a coarse fiber grid."""
    if spec.map.kind != MapKind.ORACLE:
        raise ConfigError("perturbation_continuity needs an oracle map")
    if delta == 0:
        return 0.0
    w = as_expr(w)
    v = spec.map.v
    vp = ScalarExpr(BinOp("+", v.root, BinOp("*", Num(float(delta)), w.root)), f"({v.source})+{delta!r}*({w.source})")
    mu2 = generate_mu(spec.model, vp, spec.tolerances)
    lo, hi = spec.fiber.bounds
    s = np.linspace(lo, hi, n)
    X, Y, L = (a.ravel() for a in np.meshgrid(s, s, s, indexing="ij"))
    a = np.atleast_1d(u_hat(spec.model, spec.map, X, Y, L))
    b = np.atleast_1d(u_hat(spec.model, mu2, X, Y, L))
    return float(np.max(np.abs(b - a)) / abs(delta))


# -------------------------------------------------------------- suspension


@dataclass
class SuspensionReport:
    starts: np.ndarray
    defects: np.ndarray
    h_drift: np.ndarray
    lam_drift: np.ndarray
    freeness: np.ndarray
    worst: int

    @property
    def max_defect(self):
        return float(self.defects[self.worst])

    def summary(self):
        w = self.worst
        fi = int(np.argmin(self.freeness))
        return {
            "period_defect": {"max": float(self.defects[w]), "at": [float(c) for c in self.starts[w]]},
            "h_drift": _defect(self.h_drift, self.starts.T),
            "lambda_drift": _defect(self.lam_drift, self.starts.T),
            "freeness": {"min": float(self.freeness[fi]), "at": [float(c) for c in self.starts[fi]]},
        }


def suspension_starts(n=50, near=10, seed=0, spread=0.3, near_radius=1e-3):
    rng = np.random.default_rng(seed)
    dirs = rng.normal(size=(near, 3))
    dirs /= np.linalg.norm(dirs, axis=1)[:, None]
    far = rng.uniform(-spread, spread, size=(n - near, 3))
    return np.vstack([near_radius * dirs, far])


def suspend(spec: ExperimentSpec, starts=None, segments=64, rtol=1e-11) -> SuspensionReport:
    """Integrate (alpha(phi) u_hat X_H, phi' = -1) over one turn and compare
    the time-2pi map with mu."""
    model, mu = spec.model, spec.map
    if starts is None:
        starts = suspension_starts(seed=spec.seed)
    starts = np.atleast_2d(np.asarray(starts, float))
    bad = ~model.in_box(starts[:, 0], starts[:, 1], starts[:, 2])
    if np.any(bad):
        i = int(np.nonzero(bad)[0][0])
        raise BoxExitError(f"suspension start {_pt(starts[i])} outside the model box", point=_pt(starts[i]))
    try:
        u_hat(model, mu, starts[:, 0], starts[:, 1], starts[:, 2])
    except BoxExitError:
        for p in starts:
            try:
                u_hat(model, mu, p[:1], p[1:2], p[2:3])
            except BoxExitError:
                raise BoxExitError(f"the fiber of suspension start {_pt(p)} leaves the model box", point=_pt(p)) from None
        raise
    alpha = spec.bump
    c = 1.0 / alpha.norm

    def rhs(s, idx):
        a = c * alpha._raw(s[:, 3])
        out = np.zeros_like(s)
        out[:, 3] = -1.0
        act = a > 0
        if np.any(act):
            p = s[act]
            uh = np.atleast_1d(u_hat(model, mu, p[:, 0], p[:, 1], p[:, 2]))
            fx, fy = xh_reduced(model, (p[:, 0], p[:, 1], p[:, 2]))
            out[act, 0] = a[act] * uh * fx
            out[act, 1] = a[act] * uh * fy
        return out

    n = len(starts)
    # X_G = -d/dphi: the return runs phi from 2pi down to 0
    state = np.hstack([starts, np.full((n, 1), 2 * math.pi)])
    origin = state.copy()
    phis = np.linspace(2 * math.pi, 0, segments + 1)
    free = np.full(n, np.inf)
    for k in range(segments):
        dt = phis[k] - phis[k + 1]
        res = integrate_batch(rhs, state, np.full(n, dt), rtol=rtol, atol=1e-15, origin=origin, radius=model.radius)
        if np.any(res.status == BOX_EXIT):
            i = int(np.nonzero(res.status == BOX_EXIT)[0][0])
            raise BoxExitError(f"suspended trajectory from {_pt(starts[i])} left the box", point=_pt(starts[i]))
        if np.any(res.status != OK):
            raise NumericalError("suspension integration failed")
        state = res.y.copy()
        state[:, 3] = phis[k + 1]
        phi = phis[k + 1]
        if 0.1 < phi < 2 * math.pi - 0.1:
            disp = res.y[:, :3] - starts
            chord = 2 * abs(math.sin(phi / 2))
            dist = np.sqrt(np.sum(disp**2, axis=1) + chord**2)
            free = np.minimum(free, dist / chord)
    end = state[:, :3]
    inv = mu.inverse()
    dx, dy = inv.displacement(end[:, 0], end[:, 1], end[:, 2])
    back = end + np.stack([dx, dy, np.zeros(n)], axis=1)
    defects = np.linalg.norm(back - starts, axis=1)
    h0 = hamiltonian(starts[:, 0], starts[:, 1], starts[:, 2])
    h1 = hamiltonian(end[:, 0], end[:, 1], end[:, 2])
    return SuspensionReport(
        starts, defects, np.abs(h1 - h0), np.abs(end[:, 2] - starts[:, 2]), free, int(np.argmax(defects))
    )


# --------------------------------------------------------- negative control


def _quartic_rhs(s, idx):
    x, y = s[:, 0], s[:, 1]
    return np.stack([4 * y**3, -4 * x**3], axis=1)


def quartic_quarter_time(h):
    """T4(h) / 4 for H4 = x^4 + y^4 by ODE: time from (a, 0) to the x = 0
    crossing at (0, -a), a = h^(1/4)."""
    h = np.atleast_1d(np.asarray(h, float))
    a = h**0.25
    n = len(a)
    start = np.stack([a, np.zeros(n)], axis=1)
    target_disp = np.stack([-a, -a], axis=1)
    normal = np.tile([-1.0, 0.0], (n, 1))
    ev = HyperplaneEvent(target_disp, normal, 0.5 * a)
    horizon = 10.0 / a**2
    res = integrate_batch(_quartic_rhs, start, horizon, rtol=1e-13, atol=1e-300, origin=start, event=ev)
    if np.any(res.status != EVENT):
        raise NumericalError("quartic quarter turn not located")
    return res.t


def quartic_period(h):
    return 4 * quartic_quarter_time(h)


def quartic_generating_function(n=64):
    """S(x, y) = int_0^{x^4 + y^4} w(s) ds with w = T4 / 4; s = h sigma^2."""
    z, wts = gauss_legendre01(n)

    def S(x, y):
        x, y = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
        h = (x**4 + y**4).ravel()
        out = np.zeros(h.shape)
        pos = h > 0
        if np.any(pos):
            hs = (h[pos][:, None] * z[None, :] ** 2).ravel()
            w = quartic_quarter_time(hs).reshape(-1, len(z))
            out[pos] = (w * 2 * h[pos][:, None] * z[None, :]) @ wts
        return out.reshape(x.shape)

    return S


def negative_control(radii=(1e-1, 1e-2, 1e-3)):
    S = quartic_generating_function()
    ratios = [directional_ratio(S, r) for r in radii]
    grad = first_difference_ratio(S, radii[-1])
    t1 = float(quartic_period(1.0)[0])
    scaling = float(quartic_period(16.0)[0] / t1)
    return {
        "radii": list(radii),
        "ratios": ratios,
        "ratio_at_smallest": ratios[-1],
        "gradient_ratio": grad,
        "period_scaling": scaling,
        "period_at_1": t1,
    }
