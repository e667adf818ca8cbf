"""Normal-form parabolic model H = x^2 - y^3 + lambda*y, G = lambda.

Fiber geometry: on a level {H = h, G = lambda} we have x^2 = p(y) with
p(y) = y^3 - lambda*y + h, so the fiber meets the section {x = 0} at the
real roots of p.  With three distinct roots r1 < r2 < r3 the level has a
compact oval over [r1, r2] and an unbounded branch over [r3, inf).
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ValidationError
from .exprlang import ScalarExpr, as_expr

MODEL_VARS = frozenset({"x", "y", "lambda"})
BOUNDARY_TOL = 1e-10


class Stratum(str, enum.Enum):
    OUTER = "OuterSheet"
    SWALLOWTAIL = "SwallowtailSheet"
    BOUNDARY = "Boundary"


class Detail(str, enum.Enum):
    COMPACT_OVAL = "CompactOval"
    UNBOUNDED_BRANCH = "UnboundedBranch"
    ELLIPTIC_POINT = "EllipticPoint"
    HYPERBOLIC_LEVEL = "HyperbolicLevel"
    CUSP_POINT = "CuspPoint"


@dataclass(frozen=True)
class FiberClass:
    stratum: Stratum
    detail: Detail
    flag: str | None = None


OVAL = FiberClass(Stratum.SWALLOWTAIL, Detail.COMPACT_OVAL)
UNBOUNDED = FiberClass(Stratum.OUTER, Detail.UNBOUNDED_BRANCH)


@dataclass(frozen=True)
class CubicRoots:
    discriminant: float
    roots: tuple
    multiplicities: tuple

    @property
    def n_real(self) -> int:
        return sum(self.multiplicities)


def _field(expr: ScalarExpr, x, y, lam):
    val = expr(x=x, y=y, **{"lambda": lam})
    return np.broadcast_to(val, np.broadcast(x, y, lam).shape) if np.ndim(val) == 0 and np.ndim(x) else val


@dataclass(frozen=True)
class ParabolicModel:
    """Normal-form data: omega = g dx^dy + dlambda^(dphi + A dx + B dy)."""

    g: ScalarExpr
    A: ScalarExpr
    B: ScalarExpr
    radius: float = 1.2

    def __post_init__(self):
        if not self.radius > 0:
            raise ConfigError(f"radius must be positive, got {self.radius}")
        for name in ("g", "A", "B"):
            expr = getattr(self, name)
            extra = expr.freevars - MODEL_VARS
            if extra:
                raise ConfigError(f"{name} uses unknown variables {sorted(extra)}")
        s = np.linspace(-self.radius, self.radius, 9)
        X, Y, L = np.meshgrid(s, s, s, indexing="ij")
        gv = np.asarray(self.g(x=X, y=Y, **{"lambda": L}))
        if not np.all(gv > 0):
            raise ValidationError("g must be positive on the model box", {"g_min": float(np.min(gv))})

    @classmethod
    def create(cls, g="1", A="0", B="0", radius=1.2):
        return cls(as_expr(g), as_expr(A), as_expr(B), float(radius))

    def g_at(self, x, y, lam):
        return _field(self.g, x, y, lam)

    def A_at(self, x, y, lam):
        return _field(self.A, x, y, lam)

    def B_at(self, x, y, lam):
        return _field(self.B, x, y, lam)

    def in_box(self, x, y, lam):
        r = self.radius
        return (np.abs(x) <= r) & (np.abs(y) <= r) & (np.abs(lam) <= r)


def default_model() -> ParabolicModel:
    return ParabolicModel.create()


def hamiltonian(x, y, lam):
    return x * x - y * y * y + lam * y


def is_critical(x, y, lam, tol=1e-9) -> bool:
    return abs(x) <= tol and abs(3 * y * y - lam) <= tol


def discriminant(lam, h):
    return 4 * lam**3 - 27 * h * h


def _boundary_scale(lam, h):
    return np.maximum(1.0, np.maximum(np.abs(lam) ** 3, h * h))


def _polish(r, lam, h, steps=3):
    for _ in range(steps):
        p = r**3 - lam * r + h
        dp = 3 * r * r - lam
        with np.errstate(divide="ignore", invalid="ignore"):
            cand = np.where(dp != 0, r - p / np.where(dp != 0, dp, 1.0), r)
        better = np.abs(cand**3 - lam * cand + h) < np.abs(p)
        r = np.where(better, cand, r)
    return r


def _trig_roots(lam, h):
    """Three distinct roots (requires 4 lam^3 > 27 h^2), ascending."""
    m = 2.0 * np.sqrt(lam / 3.0)
    c = np.clip(-4.0 * h / m**3, -1.0, 1.0)
    th = np.arccos(c) / 3.0
    r = np.stack([m * np.cos(th - 2.0 * np.pi * k / 3.0) for k in range(3)])
    r = np.sort(r, axis=0)
    return _polish(r, lam, h)


def _cardano_root(lam, h):
    """The real root when 4 lam^3 <= 27 h^2."""
    d = np.maximum(h * h / 4.0 - lam**3 / 27.0, 0.0)
    w = -h / 2.0 - np.copysign(np.sqrt(d), h)
    a = np.cbrt(w)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(a != 0, a + lam / (3.0 * np.where(a != 0, a, 1.0)), 0.0)
    return _polish(r, lam, h)


def cubic_roots(lam: float, h: float, tol: float = BOUNDARY_TOL) -> CubicRoots:
    """Real roots of y^3 - lam*y + h with multiplicities, ascending."""
    lam = float(lam)
    h = float(h)
    delta = discriminant(lam, h)
    if delta < 0:
        return CubicRoots(delta, (float(_cardano_root(lam, h)),), (1,))
    if delta <= tol * _boundary_scale(lam, h):
        if abs(lam) <= tol and abs(h) <= tol:
            return CubicRoots(delta, (float(np.cbrt(-h)) + 0.0,), (3,))
        simple = float(_polish(np.float64(-3.0 * h / lam), lam, h))
        double = -simple / 2.0
        if double < simple:
            return CubicRoots(delta, (double, simple), (2, 1))
        return CubicRoots(delta, (simple, double), (1, 2))
    r = _trig_roots(lam, h)
    return CubicRoots(delta, tuple(float(v) for v in r), (1, 1, 1))


def roots_array(lam, h):
    """Vectorized roots: returns (r1, r2, r3, three) where ``three`` marks
    Delta > 0.  Where only one real root exists it is returned in r1 and r3,
    and r2 is NaN."""
    lam, h = np.broadcast_arrays(np.asarray(lam, float), np.asarray(h, float))
    delta = discriminant(lam, h)
    three = (delta > 0) & (lam > 0)
    r1 = np.full(lam.shape, np.nan)
    r2 = np.full(lam.shape, np.nan)
    r3 = np.full(lam.shape, np.nan)
    if np.any(three):
        t = _trig_roots(lam[three], h[three])
        r1[three], r2[three], r3[three] = t
    one = ~three
    if np.any(one):
        s = _cardano_root(lam[one], h[one])
        r1[one] = s
        r3[one] = s
    return r1, r2, r3, three


def classify(x, y, lam, tol: float = BOUNDARY_TOL) -> FiberClass:
    """Stratum and component of the fiber through (x, y, lam).

    Only (h, lam, y) matter; x enters through h.
    """
    h = hamiltonian(x, y, lam)
    delta = discriminant(lam, h)
    if abs(delta) <= tol * _boundary_scale(lam, h):
        if abs(lam) <= tol:
            return FiberClass(Stratum.BOUNDARY, Detail.CUSP_POINT)
        detail = Detail.ELLIPTIC_POINT if h < 0 else Detail.HYPERBOLIC_LEVEL
        return FiberClass(Stratum.BOUNDARY, detail)
    if delta < 0:
        return UNBOUNDED
    r1, r2, r3 = cubic_roots(lam, h, tol).roots
    if y <= r2:
        if y < r1 - 1e-9 * (1 + abs(r1)):
            return FiberClass(Stratum.SWALLOWTAIL, Detail.COMPACT_OVAL, "below-oval")
        return OVAL
    if y >= r3:
        return UNBOUNDED
    # forbidden gap (r2, r3); rounding puts on-fiber points only within ulps of a root
    p = y**3 - lam * y + h
    slack = 1e-12 * max(1.0, abs(y) ** 3, abs(h))
    if p >= -slack:
        return OVAL if (y - r2) < (r3 - y) else UNBOUNDED
    return FiberClass(Stratum.OUTER, Detail.UNBOUNDED_BRANCH, "forbidden-gap")


def stratum_codes(x, y, lam, tol: float = BOUNDARY_TOL):
    """Vectorized classification.

    Returns (code, h, root): code 0 outer, 1 swallowtail, 2 boundary; root is
    the section root used to evaluate the branch function for that point
    (r1 on ovals, the outer-branch root otherwise).
    """
    x, y, lam = np.broadcast_arrays(*(np.asarray(a, float) for a in (x, y, lam)))
    h = hamiltonian(x, y, lam)
    delta = discriminant(lam, h)
    r1, r2, r3, three = roots_array(lam, h)
    boundary = np.abs(delta) <= tol * _boundary_scale(lam, h)
    code = np.zeros(x.shape, dtype=int)
    mid = np.where(three, 0.5 * (r2 + r3), np.inf)
    oval = three & ~boundary & (y < mid)
    code[oval] = 1
    code[boundary] = 2
    root = np.where(oval, r1, r3)
    if np.any(boundary):
        idx = np.nonzero(boundary)
        for i in zip(*idx):
            root[i] = outer_root(float(h[i]), float(lam[i]), tol)
    return code, h, root


def outer_root(h: float, lam: float, tol: float = BOUNDARY_TOL) -> float:
    """Section root on the unbounded-branch component (boundary convention
    included: on the hyperbolic level the simple root)."""
    for r, cls in section_roots(h, lam, tol):
        if cls.detail == Detail.UNBOUNDED_BRANCH:
            return r
    return section_roots(h, lam, tol)[-1][0]


def section_roots(h: float, lam: float, tol: float = BOUNDARY_TOL):
    """Intersections of the fiber {H = h, lambda} with {x = 0}, tagged."""
    cr = cubic_roots(lam, h, tol)
    delta = discriminant(lam, h)
    boundary = abs(delta) <= tol * _boundary_scale(lam, h)
    if boundary and cr.multiplicities != (1,):
        if cr.multiplicities == (3,):
            return [(cr.roots[0], FiberClass(Stratum.BOUNDARY, Detail.CUSP_POINT))]
        out = []
        for r, m in zip(cr.roots, cr.multiplicities):
            if m == 2:
                detail = Detail.ELLIPTIC_POINT if h < 0 else Detail.HYPERBOLIC_LEVEL
                out.append((r, FiberClass(Stratum.BOUNDARY, detail)))
            else:
                out.append((r, UNBOUNDED))
        return out
    if len(cr.roots) == 1:
        return [(cr.roots[0], UNBOUNDED)]
    r1, r2, r3 = cr.roots
    return [(r1, OVAL), (r2, OVAL), (r3, UNBOUNDED)]


def branch_h(lam):
    """h on the hyperbolic (+) and elliptic (-) branches for lam >= 0."""
    lam = np.asarray(lam, float)
    hp = 2.0 * np.power(np.maximum(lam, 0.0) / 3.0, 1.5)
    return hp, -hp


def bifurcation_diagram(lam_max: float, n: int):
    """Samples (lambda, h_plus, h_minus) of the critical-value curves."""
    if not lam_max > 0:
        raise ConfigError("lambda_max must be positive")
    if int(n) < 2:
        raise ConfigError("need at least 2 samples")
    lams = np.linspace(0.0, lam_max, int(n))
    lams[-1] = lam_max
    rows = []
    for lam in lams:
        hp = 2.0 * (float(lam) / 3.0) ** 1.5
        rows.append((float(lam), hp, -hp if hp else 0.0))
    return rows


def write_bifurcation_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lambda", "h_plus", "h_minus"])
        for lam, hp, hm in rows:
            w.writerow([repr(lam), repr(hp), repr(hm)])


def critical_y(lam: float) -> float:
    """Positive y of the critical parabola lambda = 3 y^2 (hyperbolic point)."""
    return math.sqrt(lam / 3.0)
