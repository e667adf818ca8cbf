import numpy as np
import pytest

from conftest import model_for, oracle_map
from cusplab.action import (
    BranchGrid,
    ScanRegion,
    SectionMap,
    _eta,
    branch_tables,
    hadamard_quotient,
    hadamard_two_sided,
    smoothness_scan,
    u_desing,
    u_hat,
    u_oracle_ode,
    u_singular,
    validate_map,
    write_table_csv,
)
from cusplab.errors import ConfigError, NumericalError, ValidationError
from cusplab.exprlang import DomainError
from cusplab.flow import flow_displacement
from cusplab.model import hamiltonian, stratum_codes


def grid(n=40, lo=-0.4, hi=0.4):
    Y, L = np.meshgrid(np.linspace(lo, hi, n), np.linspace(lo, hi, n), indexing="ij")
    return Y.ravel(), L.ravel()


def test_identity_gives_zero(model):
    mu = SectionMap.identity(model)
    y, lam = grid(7)
    assert np.all(u_desing(model, mu, y, lam) == 0)
    off = np.abs(3 * y * y - lam) > 1e-3
    assert np.all(u_singular(model, mu, y[off], lam[off]) == 0)
    assert np.all(u_oracle_ode(model, mu, y[off], lam[off]) == 0)
    q1, q2 = hadamard_quotient(model, mu, y, lam)
    assert np.all(q1 == 0) and np.all(q2 == 0)
    assert u_hat(model, mu, 0.0, 0.5, 0.75) == 0.0
    outer, swallow, consist = branch_tables(model, mu, BranchGrid(nh=5, nlam=5))
    assert np.nanmax(np.abs(outer.values)) == 0 and np.nanmax(np.abs(swallow.values)) == 0
    assert consist["max"] == 0


def test_constant_oracle_recovered(model, mu01):
    y, lam = grid(15)
    np.testing.assert_allclose(u_desing(model, mu01, y, lam), 0.1, atol=1e-7)


def test_affine_oracle_at_oval_root(model):
    mu = oracle_map("0.05*(1+h)")
    assert u_desing(model, mu, -1.0, 1.0) == pytest.approx(0.05, abs=1e-7)


def test_on_parabola_gives_smooth_extension(model, mu01):
    ys = np.linspace(-0.35, 0.35, 8)
    np.testing.assert_allclose(u_desing(model, mu01, ys, 3 * ys * ys), 0.1, atol=1e-7)
    assert np.all(np.isfinite(u_desing(model, mu01, ys, 3 * ys * ys + 5e-7)))


def test_negative_time_oracle(model):
    mu = oracle_map("-0.1")
    assert u_oracle_ode(model, mu, -0.2, 0.3) == pytest.approx(-0.1, abs=1e-9)
    assert u_desing(model, mu, -0.2, 0.3) == pytest.approx(-0.1, abs=1e-9)


@pytest.mark.parametrize("v", ["0.1", "0.05*(1+h+lambda^2)"])
def test_singular_matches_desing(model, v):
    mu = oracle_map(v)
    y, lam = grid(40)
    off = np.abs(3 * y * y - lam) > 1e-3
    a = u_desing(model, mu, y[off], lam[off])
    b = u_singular(model, mu, y[off], lam[off])
    assert np.max(np.abs(a - b)) <= 1e-8


def test_singular_refuses_near_parabola(model, mu01):
    with pytest.raises(NumericalError):
        u_singular(model, mu01, 0.5, 0.75 + 1e-7)


def test_overshoot_is_domain_error(model):
    mu = SectionMap.explicit(model, "x + 1e-3", "y + 0.5")
    with pytest.raises(DomainError):
        u_singular(model, mu, -0.2, 1.0)


def test_wrong_direction_is_domain_error(model):
    mu = SectionMap.explicit(model, "x + 1e-3", "y - 0.1")
    with pytest.raises(DomainError):
        u_desing(model, mu, 0.0, -0.5)


def test_ode_matches_desing_grid(model):
    mu = oracle_map("0.05*(1+h)")
    y, lam = grid(12)
    assert np.max(np.abs(u_oracle_ode(model, mu, y, lam) - u_desing(model, mu, y, lam))) <= 1e-6


def test_hadamard_two_sided_agreement(model, mu01):
    ys = np.linspace(-0.4, 0.4, 9)
    (p1, p2), (m1, m2) = hadamard_two_sided(model, mu01, ys)
    assert np.all(np.isfinite([p1, p2, m1, m2]))
    assert np.max(np.abs(p1 - m1)) <= 1e-5 and np.max(np.abs(p2 - m2)) <= 1e-5


def test_sign_inequality_on_grid(model):
    for v in ("0.1", "-0.1", "0.05*(1+h)"):
        mu = oracle_map(v)
        y, lam = grid(30)
        nu = mu.displacement(np.zeros_like(y), y, lam)[1]
        assert np.min(nu * (3 * y * y - lam)) >= -1e-12


def test_eta_from_ode_when_map_lands_on_section(model):
    # half an oval period maps (0, -1, 1) to (0, 0, 1); mu^x = 0 there
    mu = SectionMap.oracle(model, "1.3110287771458808")
    eta, amb = _eta(mu, np.array([-1.0]), np.array([1.0]), np.array([0.0]), np.array([1.0]))
    assert amb[0] and eta[0] == -1.0


@pytest.mark.parametrize("v", ["0.1", "0.05*(1+h+lambda^2)"])
def test_branch_tables_reproduce_v(model, v):
    mu = oracle_map(v)
    outer, swallow, consist = branch_tables(model, mu)
    H, L = np.meshgrid(outer.h, outer.lam, indexing="ij")
    truth = np.broadcast_to(mu.v(h=H, **{"lambda": L}), H.shape)
    for tab in (outer, swallow):
        fin = np.isfinite(tab.values)
        assert np.max(np.abs(tab.values[fin] - truth[fin])) <= 1e-6
    assert consist["max"] <= 1e-6
    # swallowtail samples only where Delta > 0 and lambda > 0
    fin = np.isfinite(swallow.values)
    assert np.all(L[fin] > 0) and np.all(4 * L[fin] ** 3 > 27 * H[fin] ** 2)


def test_branch_grid_outside_box(model, mu01):
    with pytest.raises(ConfigError):
        branch_tables(model, mu01, BranchGrid(h_bounds=(-3.0, 3.0), nh=5, nlam=5))


def test_table_csv(tmp_path, model, mu01):
    outer, _, _ = branch_tables(model, mu01, BranchGrid(nh=4, nlam=4))
    path = tmp_path / "t.csv"
    write_table_csv(path, outer)
    lines = path.read_text().splitlines()
    assert lines[0] == "h,lambda,value,d_h,d_lambda,d_hh,d_hlambda,d_lambdalambda"
    assert len(lines) == 1 + np.isfinite(outer.values).sum()


def test_u_hat_constant_on_fibers(model):
    mu = oracle_map("0.05*(1+h+lambda^2)")
    rng = np.random.default_rng(0)
    seeds = rng.uniform(-0.35, 0.35, size=(6, 3))
    for p in seeds:
        times = np.linspace(-0.3, 0.3, 20)
        pts = np.repeat(p[None], 20, axis=0)
        d = flow_displacement(model, pts, times)
        q = pts + d
        code, _, _ = stratum_codes(q[:, 0], q[:, 1], q[:, 2])
        vals = u_hat(model, mu, q[:, 0], q[:, 1], q[:, 2])
        assert np.all(code == code[0])
        assert np.max(np.abs(vals - vals.mean())) <= 1e-6
        assert np.var(vals) <= 1e-12


def test_u_hat_round_trip_small_grid(model, mu01):
    s = np.linspace(-0.4, 0.4, 7)
    X, Y, L = (a.ravel() for a in np.meshgrid(s, s, s, indexing="ij"))
    assert np.max(np.abs(u_hat(model, mu01, X, Y, L) - 0.1)) <= 1e-6


def test_smoothness_scan_smooth_oracle(model):
    mu = oracle_map("0.05*(1+h+lambda^2)")
    rep = smoothness_scan(model, mu)
    assert rep["branch_mismatch"]["max"] <= 1e-4
    assert rep["parabola_residual"]["max"] <= 1e-6
    assert 0.5 <= rep["second_difference"]["ratio"] <= 2
    assert rep["hadamard_agreement"]["finite"]
    assert rep["cusp_continuity"]["modulus"] <= 1e-6
    assert rep["pass"]


def test_scan_refuses_empty_swallowtail(model, mu01):
    with pytest.raises(ConfigError):
        smoothness_scan(model, mu01, region=ScanRegion(branch_lams=(-0.1, -0.2)))


def test_validation_of_maps(model):
    d = validate_map(SectionMap.identity(model))
    assert all(v["max"] == 0 for v in d.values())
    with pytest.raises(ValidationError) as exc:
        validate_map(SectionMap.explicit(model, "x+0.1", "y"))
    assert exc.value.defects["h_preservation"]["max"] > 1e-3
    d = validate_map(SectionMap.explicit(model, "x", "y"))
    assert d["area"]["max"] == 0
    with pytest.raises(ValidationError):
        validate_map(SectionMap.explicit(model, "-x", "y"))
    with pytest.raises(ValidationError):
        validate_map(SectionMap.oracle(model, "3"))


def test_oracle_map_inverse(model, mu01):
    inv = mu01.inverse()
    P = np.random.default_rng(1).uniform(-0.3, 0.3, size=(20, 3))
    Q = np.stack(mu01(P[:, 0], P[:, 1], P[:, 2]), axis=1)
    R = np.stack(inv(Q[:, 0], Q[:, 1], Q[:, 2]), axis=1)
    assert np.max(np.abs(R - P)) <= 1e-12


def test_explicit_inverse_newton(model):
    mu = SectionMap.explicit(model, "x + 0.1*y^2", "y")
    inv = mu.inverse()
    x, y, lam = np.array([0.2, -0.1]), np.array([0.3, 0.2]), np.array([0.0, 0.1])
    X, Y, _ = mu(*inv(x, y, lam))
    np.testing.assert_allclose(X, x, atol=1e-14)
    np.testing.assert_allclose(Y, y, atol=1e-14)


def test_g_model_round_trip():
    m = model_for("1+0.3*tanh(x+y)")
    mu = oracle_map("0.1", "1+0.3*tanh(x+y)")
    y, lam = grid(10)
    np.testing.assert_allclose(u_desing(m, mu, y, lam), 0.1, atol=1e-7)
