"""Hamiltonian vector fields of the model and their numerical flows.

Sign convention, fixed project-wide: i_X omega = dH.  For the reduced form
g dx^dy this gives X_H = (H_y / g, -H_x / g), and on the full 4D model the
flow of G = lambda is X_G = -d/dphi.

The integrator is a Dormand-Prince 5(4) pair run on a batch of independent
trajectories at once; every trajectory keeps its own step size, so results do
not depend on how points are grouped into batches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError
from .exprlang import ScalarExpr, as_expr, eval_dual, EvalEnv
from .model import (
    ParabolicModel,
    BOUNDARY_TOL,
    Detail,
    Stratum,
    classify,
    cubic_roots,
    discriminant,
    hamiltonian,
    is_critical,
    roots_array,
    _boundary_scale,
)
from .quadrature import integrate01

DEFAULT_TOL = 1e-10
TIGHT_RTOL = 1e-12
TIGHT_ATOL = 1e-16
BISECT_DT = 1e-12
TRIVIAL_SPEED = 1e-14


def _pt(p):
    return tuple(float(c) for c in p)


class BoxExitError(NumericalError):
    def __init__(self, message, trajectory=None, point=None):
        super().__init__(message)
        self.trajectory = trajectory
        self.point = point


class PeriodDivergence(NumericalError):
    pass


class FiberMismatch(NumericalError):
    pass


# ------------------------------------------------------------ Dormand-Prince

_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4


def _dp_step(f, y, k1, h):
    """One Dormand-Prince step. y, k1: (m, d); h: (m,)."""
    hc = h[:, None]
    ks = [k1]
    for s in range(1, 6):
        acc = sum(a * k for a, k in zip(_A[s], ks) if a != 0.0)
        ks.append(f(y + hc * acc))
    ynew = y + hc * sum(b * k for b, k in zip(_B5, ks) if b != 0.0)
    k7 = f(ynew)
    ks.append(k7)
    err = hc * sum(e * k for e, k in zip(_E, ks) if e != 0.0)
    return ynew, k7, err


def hermite(y0, f0, y1, f1, h, theta):
    """Cubic Hermite interpolant on a step, theta in [0, 1]."""
    th = theta[:, None]
    hc = h[:, None]
    h00 = 2 * th**3 - 3 * th**2 + 1
    h10 = th**3 - 2 * th**2 + th
    h01 = -2 * th**3 + 3 * th**2
    h11 = th**3 - th**2
    return h00 * y0 + h10 * hc * f0 + h01 * y1 + h11 * hc * f1


@dataclass
class HyperplaneEvent:
    """Crossing of {(s - point) . normal = 0} in the increasing direction,
    in the integrator's internal coordinates.  A crossing only stops the
    trajectory when it lies within ``radius`` of ``point``."""

    point: np.ndarray
    normal: np.ndarray
    radius: np.ndarray

    def value(self, s, idx):
        return np.einsum("ij,ij->i", s - self.point[idx], self.normal[idx])

    def rate(self, fs, idx):
        return np.einsum("ij,ij->i", fs, self.normal[idx])

    def accept(self, s, idx):
        return np.linalg.norm(s - self.point[idx], axis=1) <= self.radius[idx]


OK, EVENT, BOX_EXIT, FAILED = 0, 1, 2, 3


@dataclass
class BatchResult:
    t: np.ndarray
    y: np.ndarray
    state: np.ndarray
    steps: np.ndarray
    status: np.ndarray
    trajectory: list | None = None


def integrate_batch(
    rhs,
    y0,
    t_end,
    *,
    rtol=DEFAULT_TOL,
    atol=DEFAULT_TOL,
    origin=None,
    radius=None,
    event=None,
    max_steps=200000,
    record=False,
):
    """Integrate dy/dt = rhs(y, idx) for a batch of starts.

    ``rhs`` receives absolute states of shape (m, d) and the indices of the
    trajectories they belong to.  With ``origin`` given, the integrator works
    on the displacement s = y - origin so error control is relative to the
    displacement itself (used where tiny displacements matter).  ``radius``
    enables the box check |y_i| <= radius on the first three components.
    Negative entries of ``t_end`` integrate backward.
    """
    y0 = np.atleast_2d(np.asarray(y0, float))
    n, d = y0.shape
    t_end = np.broadcast_to(np.asarray(t_end, float), (n,)).copy()
    sgn = np.where(t_end < 0, -1.0, 1.0)
    T = np.abs(t_end)
    if origin is None:
        base = np.zeros_like(y0)
        s = y0.copy()
    else:
        base = np.atleast_2d(np.asarray(origin, float)).copy()
        s = y0 - base

    def f(sv, idx):
        return sgn[idx, None] * rhs(base[idx] + sv, idx)

    tau = np.zeros(n)
    steps = np.zeros(n, dtype=int)
    status = np.full(n, OK)
    done = T == 0
    h = np.minimum(T, 1e-2)
    k1 = np.zeros_like(s)
    idx0 = np.nonzero(~done)[0]
    if idx0.size:
        k1[idx0] = f(s[idx0], idx0)
    ev_old = None
    if event is not None:
        ev_old = np.zeros(n)
        if idx0.size:
            ev_old[idx0] = event.value(s[idx0], idx0)
    traj = [(0.0, (base[0] + s[0]).copy())] if record else None

    it = 0
    while not np.all(done):
        it += 1
        ia = np.nonzero(~done)[0]
        if it > max_steps:
            status[ia] = FAILED
            break
        hh = np.minimum(h[ia], T[ia] - tau[ia])
        sa = s[ia]
        fa = lambda v, _ia=ia: f(v, _ia)
        snew, k7, err = _dp_step(fa, sa, k1[ia], hh)
        scale = atol + rtol * np.maximum(np.abs(sa), np.abs(snew))
        errn = np.max(np.abs(err) / scale, axis=1)
        bad = ~np.all(np.isfinite(snew), axis=1)
        errn[bad] = np.inf
        acc = errn <= 1.0
        with np.errstate(divide="ignore"):
            fac = np.where(errn == 0, 5.0, 0.9 * errn ** -0.2)
        fac = np.clip(fac, 0.2, 5.0)
        fac[~acc] = np.minimum(fac[~acc], 0.9)
        h[ia] = hh * fac

        underflow = (~acc) & (hh <= 1e-14 * np.maximum(1.0, tau[ia]))
        if np.any(underflow):
            status[ia[underflow]] = FAILED
            done[ia[underflow]] = True

        if not np.any(acc):
            continue
        ja = ia[acc]
        s_prev = sa[acc]
        f_prev = k1[ja]
        s_new = snew[acc]
        f_new = k7[acc]
        h_acc = hh[acc]
        tau_prev = tau[ja]
        s[ja] = s_new
        k1[ja] = f_new
        tau[ja] = tau_prev + h_acc
        steps[ja] += 1
        reached = tau[ja] >= T[ja] * (1 - 1e-15)
        tau[ja[reached]] = T[ja[reached]]
        if record and ja.size and ja[0] == 0:
            traj.append((float(sgn[0] * tau[0]), (base[0] + s[0]).copy()))

        if event is not None:
            ev_new = event.value(s_new, ja)
            cross = (ev_old[ja] < 0) & (ev_new >= 0)
            ev_old[ja] = ev_new
            if np.any(cross):
                jc = ja[cross]
                th, sc = _locate(f, event, s_prev[cross], f_prev[cross], s_new[cross], f_new[cross], h_acc[cross], jc)
                ok = event.accept(sc, jc)
                jo = jc[ok]
                s[jo] = sc[ok]
                tau[jo] = tau_prev[cross][ok] + th[ok] * h_acc[cross][ok]
                status[jo] = EVENT
                done[jo] = True

        if radius is not None:
            live = ja[~done[ja]]
            yabs = base[live] + s[live]
            out = np.any(np.abs(yabs[:, :3]) > radius, axis=1)
            if np.any(out):
                status[live[out]] = BOX_EXIT
                done[live[out]] = True

        done[ja[reached]] = True

    return BatchResult(sgn * tau, base + s, s, steps, status, traj)


def _locate(f, event, s0, f0, s1, f1, h, idx):
    """Event time inside a step: bracket on the Hermite interpolant, then
    polish with exact Dormand-Prince re-steps (Newton on the event value)."""
    lo = np.zeros(len(idx))
    hi = np.ones(len(idx))
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        v = event.value(hermite(s0, f0, s1, f1, h, mid), idx)
        neg = v < 0
        lo = np.where(neg, mid, lo)
        hi = np.where(neg, hi, mid)
        if np.all((hi - lo) * h <= BISECT_DT):
            break
    th = 0.5 * (lo + hi)
    fa = lambda v: f(v, idx)
    for _ in range(4):
        sc, fc, _ = _dp_step(fa, s0, f0, th * h)
        val = event.value(sc, idx)
        rate = event.rate(fc, idx)
        with np.errstate(divide="ignore", invalid="ignore"):
            dth = np.where(rate != 0, -val / (rate * h), 0.0)
        dth = np.where(np.isfinite(dth), dth, 0.0)
        th = np.clip(th + dth, 0.0, 1.0)
        if np.all(np.abs(dth * h) <= BISECT_DT):
            break
    sc, _, _ = _dp_step(fa, s0, f0, th * h)
    return th, sc


# ------------------------------------------------------------ vector fields


def xh_reduced(model: ParabolicModel, p):
    """X_H on the cross-section, as (dx, dy)."""
    x, y, lam = p[0], p[1], p[2]
    g = model.g_at(x, y, lam)
    if np.any(np.asarray(g) <= 0):
        raise NumericalError("g <= 0: model nondegeneracy violated")
    return (lam - 3 * y * y) / g, -2 * x / g


def reduced_rhs(model: ParabolicModel, scale=None):
    """Batch right-hand side of the reduced flow on (x, y, lambda).

    ``scale`` (per trajectory) multiplies the field: the flow of c * X_H.
    """

    def rhs(Y, idx):
        x, y, lam = Y[:, 0], Y[:, 1], Y[:, 2]
        g = model.g_at(x, y, lam)
        c = 1.0 if scale is None else scale[idx]
        out = np.empty_like(Y)
        out[:, 0] = c * (lam - 3 * y * y) / g
        out[:, 1] = c * (-2 * x) / g
        out[:, 2] = 0.0
        return out

    return rhs


def x_full(model: ParabolicModel, f, p):
    """Hamiltonian field of f(x, y, lambda) for the full 4D symplectic form,
    as (dx, dy, dlambda, dphi)."""
    f = as_expr(f)
    if "phi" in f.freevars:
        raise NumericalError("f must not depend on phi")
    x, y, lam = float(p[0]), float(p[1]), float(p[2])
    env = {"x": x, "y": y, "lambda": lam}
    unknown = f.freevars - set(env)
    if unknown:
        raise NumericalError(f"f uses unknown variables {sorted(unknown)}")
    fx = eval_dual(f, EvalEnv(env, {"x": 1.0}))[1]
    fy = eval_dual(f, EvalEnv(env, {"y": 1.0}))[1]
    fl = eval_dual(f, EvalEnv(env, {"lambda": 1.0}))[1]
    g = float(model.g_at(x, y, lam))
    if g <= 0:
        raise NumericalError("g <= 0: model nondegeneracy violated")
    A = float(model.A_at(x, y, lam))
    B = float(model.B_at(x, y, lam))
    a = fy / g
    b = -fx / g
    return np.array([a, b, 0.0, -fl - A * a - B * b])


def full_rhs(model: ParabolicModel):
    """Batch field X_H on (x, y, lambda, phi) for the full form."""

    def rhs(Y, idx):
        x, y, lam = Y[:, 0], Y[:, 1], Y[:, 2]
        g = model.g_at(x, y, lam)
        A = model.A_at(x, y, lam)
        B = model.B_at(x, y, lam)
        out = np.empty_like(Y)
        a = (lam - 3 * y * y) / g
        b = -2 * x / g
        out[:, 0] = a
        out[:, 1] = b
        out[:, 2] = 0.0
        out[:, 3] = -y - A * a - B * b
        return out

    return rhs


# ------------------------------------------------------------------- flows


@dataclass(frozen=True)
class FlowResult:
    endpoint: tuple
    elapsed: float
    steps: int
    max_h_drift: float
    times: np.ndarray = field(repr=False, default=None)
    states: np.ndarray = field(repr=False, default=None)

    def at(self, t: float) -> np.ndarray:
        """State at time t by interpolation of the recorded steps."""
        if self.times is None or len(self.times) < 2:
            return np.asarray(self.endpoint)
        ts = self.times
        lo, hi = (ts[0], ts[-1]) if ts[-1] >= ts[0] else (ts[-1], ts[0])
        if not lo - 1e-14 <= t <= hi + 1e-14:
            raise ValueError("time outside the integrated interval")
        order = np.argsort(ts)
        return np.array([np.interp(t, ts[order], self.states[order, k]) for k in range(self.states.shape[1])])


def _check_box(model, p):
    if not model.in_box(p[0], p[1], p[2]):
        raise BoxExitError(f"start point {_pt(p)} outside the model box", point=_pt(p))


def flow(model: ParabolicModel, fieldname: str, start, t: float, tol: float = DEFAULT_TOL) -> FlowResult:
    """Time-t map of X_H ('reduced' on (x, y, lambda) or 'full' on 4D)."""
    start = np.asarray(start, float)
    if fieldname == "reduced":
        if start.shape != (3,):
            raise ValueError("reduced flow needs (x, y, lambda)")
        rhs = reduced_rhs(model)
    elif fieldname == "full":
        if start.shape != (4,):
            raise ValueError("full flow needs (x, y, lambda, phi)")
        rhs = full_rhs(model)
    else:
        raise ValueError(f"unknown field {fieldname!r}")
    _check_box(model, start)
    x, y, lam = start[:3]
    h0 = hamiltonian(x, y, lam)

    def wrap(p):
        if fieldname == "full":
            p = p.copy()
            p[3] = p[3] % (2 * math.pi)
        return tuple(float(v) for v in p)

    speed = float(np.hypot(*xh_reduced(model, start)))
    if t == 0 or (speed == 0 and is_critical(x, y, lam, 1e-12)):
        if fieldname == "full" and t != 0:
            end = start.copy()
            end[3] -= y * t
            return FlowResult(wrap(end), float(t), 0, 0.0, np.array([0.0, t]), np.vstack([start, end]))
        return FlowResult(wrap(start), float(t), 0, 0.0, np.array([0.0]), start[None, :])
    if speed < TRIVIAL_SPEED and not is_critical(x, y, lam, 1e-7):
        raise NumericalError(f"|X_H| < {TRIVIAL_SPEED} away from the critical parabola at {_pt(start)}")

    res = integrate_batch(rhs, start[None, :], [t], rtol=tol, atol=tol, radius=model.radius, record=True)
    times = np.array([p[0] for p in res.trajectory])
    states = np.array([p[1] for p in res.trajectory])
    drift = float(np.max(np.abs(hamiltonian(states[:, 0], states[:, 1], states[:, 2]) - h0)))
    if res.status[0] == BOX_EXIT:
        raise BoxExitError(
            f"trajectory from {_pt(start)} left the box |.| <= {model.radius} at t={res.t[0]:.6g}",
            trajectory=states,
            point=_pt(start),
        )
    if res.status[0] != OK:
        raise NumericalError("step size underflow")
    return FlowResult(wrap(res.y[0]), float(res.t[0]), int(res.steps[0]), drift, times, states)


def flow_displacement(model: ParabolicModel, starts, times, rtol=TIGHT_RTOL, atol=TIGHT_ATOL):
    """Batch reduced flow; returns the displacement (n, 3) of each start.

    Works in displacement coordinates so the error is controlled relative
    to the displacement itself, which keeps small displacements near the
    critical parabola accurate.
    """
    starts = np.atleast_2d(np.asarray(starts, float))
    times = np.broadcast_to(np.asarray(times, float), (len(starts),))
    out = np.zeros_like(starts)
    if len(starts) == 0:
        return out
    bad = ~model.in_box(starts[:, 0], starts[:, 1], starts[:, 2])
    if np.any(bad):
        i = int(np.nonzero(bad)[0][0])
        raise BoxExitError(f"start point {_pt(starts[i])} outside the model box", point=_pt(starts[i]))
    res = integrate_batch(
        reduced_rhs(model), starts, times, rtol=rtol, atol=atol, origin=starts, radius=model.radius
    )
    if np.any(res.status == BOX_EXIT):
        i = int(np.nonzero(res.status == BOX_EXIT)[0][0])
        raise BoxExitError(
            f"trajectory from {_pt(starts[i])} left the box |.| <= {model.radius}", point=_pt(starts[i])
        )
    if np.any(res.status != OK):
        raise NumericalError("integration failed (step underflow)")
    return res.state


def _unit_field(model, pts, sign):
    dx, dy = xh_reduced(model, (pts[:, 0], pts[:, 1], pts[:, 2]))
    v = np.stack([dx, dy, np.zeros_like(dx)], axis=1) * sign[:, None]
    nrm = np.linalg.norm(v, axis=1)
    return v / np.where(nrm > 0, nrm, 1.0)[:, None], nrm


def time_of_flight_batch(model, starts, targets, tol=1e-8, horizon=None, displacement=None):
    """Signed X_H flow time from each start to its target (smallest |t|).

    ``displacement`` may carry target - start computed more accurately than
    the subtraction.  Raises FiberMismatch / NumericalError on failure.
    """
    starts = np.atleast_2d(np.asarray(starts, float))
    n = len(starts)
    if displacement is None:
        disp = np.atleast_2d(np.asarray(targets, float)) - starts
    else:
        disp = np.atleast_2d(np.asarray(displacement, float))
    targets = starts + disp
    out = np.full(n, np.nan)
    same = np.all(disp == 0, axis=1)
    out[same] = 0.0
    h_s = hamiltonian(starts[:, 0], starts[:, 1], starts[:, 2])
    h_t = hamiltonian(targets[:, 0], targets[:, 1], targets[:, 2])
    mism = (np.abs(h_s - h_t) > tol * np.maximum(1.0, np.abs(h_s))) | (disp[:, 2] != 0)
    if np.any(mism & ~same):
        i = int(np.nonzero(mism & ~same)[0][0])
        raise FiberMismatch(f"start {_pt(starts[i])} and target {_pt(targets[i])} lie on different fibers")
    todo = np.nonzero(~same)[0]
    if todo.size == 0:
        return out
    st = starts[todo]
    for i, k in enumerate(todo):
        cs = classify(*starts[k])
        ct = classify(*targets[k])
        if Stratum.BOUNDARY not in (cs.stratum, ct.stratum) and cs.detail != ct.detail:
            raise FiberMismatch(f"start {_pt(starts[k])} and target {_pt(targets[k])} are on different components")
    if horizon is None:
        horizon = np.full(len(todo), 50.0)
        lam = st[:, 2]
        r1, r2, r3, three = roots_array(lam, h_s[todo])
        oval = three & (st[:, 1] < 0.5 * (r2 + r3))
        if np.any(oval):
            T = period_quadrature(model, h_s[todo][oval], lam[oval])
            horizon[oval] = np.where(np.isfinite(T), 1.05 * T, 50.0)
    else:
        horizon = np.broadcast_to(np.asarray(horizon, float), (len(todo),))

    m = len(todo)
    sign = np.concatenate([np.ones(m), -np.ones(m)])
    y0 = np.vstack([st, st])
    nrm_dir, speed = _unit_field(model, np.vstack([targets[todo], targets[todo]]), sign)
    if np.any(speed == 0):
        raise NumericalError("target is an equilibrium distinct from the start")
    radius_acc = np.full(2 * m, max(tol, 1e-12))
    ev = HyperplaneEvent(np.vstack([disp[todo], disp[todo]]), nrm_dir, radius_acc)
    res = integrate_batch(
        reduced_rhs(model),
        y0,
        np.concatenate([horizon, -horizon]),
        rtol=TIGHT_RTOL,
        atol=TIGHT_ATOL,
        origin=y0,
        radius=model.radius,
        event=ev,
    )
    tf = np.where(res.status[:m] == EVENT, res.t[:m], np.nan)
    tb = np.where(res.status[m:] == EVENT, res.t[m:], np.nan)
    best = np.where(np.isnan(tb) | (np.abs(tf) <= np.abs(tb)), tf, tb)
    best = np.where(np.isnan(tf), tb, best)
    if np.any(np.isnan(best)):
        i = todo[int(np.nonzero(np.isnan(best))[0][0])]
        raise NumericalError(f"target {_pt(targets[i])} not reached from {_pt(starts[i])}")
    out[todo] = best
    return out


def time_of_flight(model, start, target, tol=1e-8) -> float:
    """Signed flow time along X_H from start to target (smallest |t|)."""
    start = np.asarray(start, float)
    target = np.asarray(target, float)
    _check_box(model, start)
    return float(time_of_flight_batch(model, start[None], target[None], tol=tol)[0])


# ----------------------------------------------------------------- periods


def half_periods(model: ParabolicModel, h, lam):
    """Times of the x > 0 and x < 0 arcs of the oval {H = h} (quadrature).

    With t = r1 + (r2 - r1)(1 - cos th)/2 the inverse square-root endpoint
    singularities cancel: dt / (2 sqrt(p)) = dth / (2 sqrt(r3 - t)).
    A sinh stretch at th = pi keeps the rule accurate near the saddle level.
    NaN where (h, lam) has no oval.
    """
    h, lam = np.broadcast_arrays(np.asarray(h, float), np.asarray(lam, float))
    r1, r2, r3, three = roots_array(lam, h)
    tp = np.full(h.shape, np.nan)
    tm = np.full(h.shape, np.nan)
    ok = three & (np.abs(discriminant(lam, h)) > BOUNDARY_TOL * _boundary_scale(lam, h))
    if not np.any(ok):
        return tp, tm
    a, b, c, L = r1[ok][:, None], r2[ok][:, None], r3[ok][:, None], lam[ok][:, None]
    # near the hyperbolic level r3 - r2 -> 0 and the integrand peaks at th = pi;
    # pi - th = k sinh(S z) with k = sqrt((r3 - r2) / ((r2 - r1) / 4)) flattens it
    k = np.sqrt((c - b) / (0.25 * (b - a)))
    S = np.arcsinh(math.pi / k)

    def integrand(sign):
        def fz(z):
            psi = k * np.sinh(S * z)
            th = math.pi - psi
            t = a + (b - a) * (1 - np.cos(th)) / 2
            gap = np.maximum(c - t, 0.0)
            xs = sign * 0.5 * (b - a) * np.sin(th) * np.sqrt(gap)
            g = model.g_at(xs, t, np.broadcast_to(L, t.shape))
            return g / (2 * np.sqrt(gap)) * k * S * np.cosh(S * z)

        return fz

    tp[ok] = integrate01(integrand(1.0), tol=1e-13, n_max=4096)[0]
    tm[ok] = integrate01(integrand(-1.0), tol=1e-13, n_max=4096)[0]
    return tp, tm


def period_quadrature(model, h, lam):
    tp, tm = half_periods(model, h, lam)
    return tp + tm


def period(model: ParabolicModel, h: float, lam: float, tol: float = 1e-8) -> float:
    """Period of the compact oval of the level (h, lam): ODE return time
    from (0, r1, lam), cross-checked by quadrature."""
    delta = discriminant(lam, h)
    if abs(delta) <= BOUNDARY_TOL * float(_boundary_scale(lam, h)):
        if lam > 0 and h > 0:
            raise PeriodDivergence(f"hyperbolic level h={h}, lambda={lam}: period diverges")
        raise NumericalError(f"(h={h}, lambda={lam}) lies on the bifurcation diagram; no regular oval")
    if delta < 0 or lam <= 0:
        raise NumericalError(f"(h={h}, lambda={lam}) has no compact oval")
    r1 = cubic_roots(lam, h).roots[0]
    start = np.array([[0.0, r1, lam]])
    _check_box(model, start[0])
    t_quad = float(period_quadrature(model, h, lam))
    nrm, _ = _unit_field(model, start, np.ones(1))
    ev = HyperplaneEvent(np.zeros((1, 3)), nrm, np.array([1e-6]))
    res = integrate_batch(
        reduced_rhs(model),
        start,
        [2.0 * t_quad + 1.0],
        rtol=TIGHT_RTOL,
        atol=TIGHT_ATOL,
        origin=start,
        radius=model.radius,
        event=ev,
    )
    if res.status[0] == BOX_EXIT:
        raise BoxExitError(f"oval of (h={h}, lambda={lam}) leaves the model box", point=tuple(start[0]))
    if res.status[0] != EVENT:
        raise NumericalError("trajectory did not return to the section")
    t_ode = float(res.t[0])
    if abs(t_ode - t_quad) > tol * max(1.0, t_ode):
        raise NumericalError(f"period mismatch: ODE {t_ode!r} vs quadrature {t_quad!r}")
    return t_ode


# --------------------------------------------------------------- time maps


def time1_map(model: ParabolicModel, v, p, tol: float = DEFAULT_TOL):
    """Time-1 map of v(H, lambda) X_H, i.e. the X_H flow for time v(H(p), lambda)."""
    v = as_expr(v)
    x, y, lam = (float(c) for c in p)
    t = float(v(h=hamiltonian(x, y, lam), **{"lambda": lam}))
    return flow(model, "reduced", (x, y, lam), t, tol).endpoint


def oracle_times(v: ScalarExpr, x, y, lam):
    h = hamiltonian(x, y, lam)
    vals = v(h=h, **{"lambda": lam})
    return np.broadcast_to(vals, np.broadcast(x, y, lam).shape)
