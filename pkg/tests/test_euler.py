"""WENO5 Euler right-hand side: pointwise oracles, decomposition
independence, accuracy on a smooth advected wave."""

import numpy as np
import pytest

from mrflow.euler import (EosDomainError, EulerPipeline, GasConstants,
                          WENO_EPS, cfl_time_step, flux, interior_face_range,
                          max_wave_speed, pressure, sound_speed,
                          state_fields, weno5_face_flux, _weno5_left)
from mrflow.mesh import PERIODIC, Decomposition, UniformGrid
from mrflow.transport import run_spmd
from mrflow.vectors import ManyVector

GAS = GasConstants.from_gamma(1.4)


def test_gas_constants():
    assert GAS.gamma == pytest.approx(1.4, rel=1e-15)
    assert GasConstants.from_gamma(5.0 / 3.0).gamma == pytest.approx(5.0 / 3.0)


def test_pressure_hand_value():
    # rho=2, m=(2,0,0), et=3: kinetic 1, internal 2, p = 0.4*2
    p = pressure(GAS, np.array(2.0), np.array(2.0), np.array(0.0),
                 np.array(0.0), np.array(3.0))
    assert p == pytest.approx(0.8, rel=1e-15)
    assert sound_speed(GAS, 2.0, 0.8) == pytest.approx(np.sqrt(0.56), rel=1e-15)


def test_pressure_domain_error():
    with pytest.raises(EosDomainError):
        pressure(GAS, np.array(1.0), np.array(2.0), np.array(0.0),
                 np.array(0.0), np.array(1.0))


def test_flux_matches_direct_formulas():
    rng = np.random.default_rng(11)
    w = np.empty((4, 7))
    w[:, 0] = rng.uniform(0.5, 2.0, 4)
    w[:, 1:4] = rng.standard_normal((4, 3))
    w[:, 4] = 10.0 + rng.uniform(0, 1, 4)
    w[:, 5:] = rng.uniform(0, 1, (4, 2))
    for axis in range(3):
        out = flux(GAS, w, axis)
        rho, m, et = w[:, 0], w[:, 1:4], w[:, 4]
        v = m[:, axis] / rho
        p = 0.4 * (et - (m * m).sum(axis=1) / (2 * rho))
        np.testing.assert_allclose(out[:, 0], m[:, axis], rtol=1e-15)
        expect_m = m * v[:, None]
        expect_m[:, axis] += p
        np.testing.assert_allclose(out[:, 1:4], expect_m, rtol=1e-14)
        np.testing.assert_allclose(out[:, 4], v * (et + p), rtol=1e-14)
        np.testing.assert_allclose(out[:, 5:], w[:, 5:] * v[:, None], rtol=1e-15)


def test_max_wave_speed():
    w = np.zeros((1, 6, 5))
    w[..., 0] = 1.0
    w[..., 4] = 2.5  # p = 1, c = sqrt(1.4)
    w[0, 3, 1] = 2.0  # one cell with v_x = 2
    lam = max_wave_speed(GAS, w, 0)
    c = np.sqrt(1.4 * 1.0)
    # fastest cell: |v|+c with its own (larger) sound speed
    p3 = 0.4 * (2.5 - 2.0)
    assert lam[0] == pytest.approx(max(c, 2.0 + np.sqrt(1.4 * p3)), rel=1e-14)


def _weno_left_oracle(f, eps):
    """Textbook WENO-JS, written against the implementation: explicit
    coefficient tables and normalized weights per candidate."""
    f = np.asarray(f, dtype=float)
    interp = np.array([[2.0, -7.0, 11.0, 0.0, 0.0],
                       [0.0, -1.0, 5.0, 2.0, 0.0],
                       [0.0, 0.0, 2.0, 5.0, -1.0]]) / 6.0
    q = interp @ f
    d1 = np.array([f[0] - 2 * f[1] + f[2],
                   f[1] - 2 * f[2] + f[3],
                   f[2] - 2 * f[3] + f[4]])
    d2 = np.array([f[0] - 4 * f[1] + 3 * f[2],
                   f[1] - f[3],
                   3 * f[2] - 4 * f[3] + f[4]])
    beta = 13.0 / 12.0 * d1 ** 2 + 0.25 * d2 ** 2
    gamma = np.array([0.1, 0.6, 0.3])
    w = gamma / (eps + beta) ** 2
    w /= w.sum()
    return float(w @ q)


def test_weno5_left_against_oracle():
    rng = np.random.default_rng(5)
    for _ in range(50):
        f = rng.standard_normal(5) * rng.choice([1e-3, 1.0, 1e3])
        got = _weno5_left(*f, WENO_EPS)
        assert got == pytest.approx(_weno_left_oracle(f, WENO_EPS), rel=1e-13)


def test_weno5_reproduces_constants_exactly():
    assert _weno5_left(4.0, 4.0, 4.0, 4.0, 4.0, WENO_EPS) == 4.0


def test_face_flux_consistency_on_uniform_state():
    w = np.zeros((3, 6, 5))
    w[..., 0] = 1.2
    w[..., 1] = 0.6
    w[..., 4] = 3.0
    lam = max_wave_speed(GAS, w, 0)
    face = weno5_face_flux(GAS, w, lam, 0)
    np.testing.assert_allclose(face, flux(GAS, w[:, 0], 0), rtol=1e-14)


def test_interior_face_range():
    assert interior_face_range(8) == (3, 6)
    assert interior_face_range(6) == (3, 4)
    assert interior_face_range(4) == (3, 3)


def _state(shape, n_chem, fill):
    rho = np.full(shape, fill["rho"])
    mx = np.full(shape, fill.get("mx", 0.0))
    my = np.full(shape, fill.get("my", 0.0))
    mz = np.full(shape, fill.get("mz", 0.0))
    et = np.full(shape, fill["et"])
    chem = np.zeros(shape + (n_chem,))
    return ManyVector([rho, mx, my, mz, et, chem])


def _rhs_worker(comm, shape, n_tasks, n_chem):
    grid = UniformGrid(shape, ((0.0, 1.0),) * 3)
    d = Decomposition(grid, n_tasks, comm.rank, (PERIODIC,) * 6)
    (x0, x1), (y0, y1), (z0, z1) = d.extents
    x = grid.centers(0)[x0:x1, None, None]
    y = grid.centers(1)[None, y0:y1, None]
    z = grid.centers(2)[None, None, z0:z1]
    rho = 2.0 + 0.3 * np.sin(2 * np.pi * x) * np.cos(2 * np.pi * y) + 0.0 * z
    mx = 0.4 * rho
    my = 0.1 * np.cos(2 * np.pi * z) * np.ones_like(rho)
    mz = np.zeros_like(rho)
    et = 10.0 + 0.5 * rho
    chem = np.stack([0.5 * rho] * n_chem, axis=-1) if n_chem else \
        np.zeros(rho.shape + (0,))
    state = ManyVector([rho, mx, my, mz, et, chem])
    pipe = EulerPipeline(comm, d, GAS, n_chem, debug=True)
    out = pipe(0.0, state)
    return d.extents, [a.copy() for a in out.arrays]


def _assemble(results, shape, n_chem):
    fields = [np.zeros(shape) for _ in range(5)]
    chem = np.zeros(shape + (n_chem,))
    for extents, arrays in results:
        sl = tuple(slice(lo, hi) for lo, hi in extents)
        for f, a in zip(fields, arrays[:5]):
            f[sl] = a
        chem[sl] = arrays[5]
    return fields + [chem]


@pytest.mark.parametrize("n_tasks", [2, 4])
def test_rhs_bitwise_decomposition_independent(n_tasks):
    shape, n_chem = (8, 6, 6), 2
    serial = _assemble(run_spmd(1, _rhs_worker, shape, 1, n_chem), shape, n_chem)
    multi = _assemble(run_spmd(n_tasks, _rhs_worker, shape, n_tasks, n_chem),
                      shape, n_chem)
    for a, b in zip(serial, multi):
        np.testing.assert_array_equal(a, b)


def test_uniform_state_has_zero_rhs():
    def fn(comm):
        grid = UniformGrid((6, 6, 6), ((0.0, 1.0),) * 3)
        d = Decomposition(grid, 1, 0, (PERIODIC,) * 6)
        state = _state((6, 6, 6), 1, {"rho": 1.3, "mx": 0.7, "et": 9.0})
        state.arrays[5][..., 0] = 0.25
        pipe = EulerPipeline(comm, d, GAS, 1, debug=True)
        out = pipe(0.0, state)
        return [np.abs(a).max() for a in out.arrays]
    maxima = run_spmd(1, fn)[0]
    assert max(maxima) == 0.0


def _advection_rhs_error(comm, n):
    """L1 error of the density RHS against the analytic derivative for
    rho = 2 + sin(2 pi x) advected at unit velocity, uniform pressure."""
    shape = (n, 4, 4)
    grid = UniformGrid(shape, ((0.0, 1.0),) * 3)
    d = Decomposition(grid, 1, comm.rank, (PERIODIC,) * 6)
    x = grid.centers(0)[:, None, None]
    rho = 2.0 + np.sin(2 * np.pi * x) * np.ones(shape)
    mx = rho.copy()          # v = 1
    et = 2.5 + 0.5 * rho     # p = 1 everywhere
    state = ManyVector([rho, mx, np.zeros(shape), np.zeros(shape), et,
                        np.zeros(shape + (0,))])
    pipe = EulerPipeline(comm, d, GAS, 0)
    out = pipe(0.0, state)
    exact = -2 * np.pi * np.cos(2 * np.pi * x) * np.ones(shape)
    return float(np.mean(np.abs(out.arrays[0] - exact)))


def test_rhs_fifth_order_on_smooth_wave():
    e32 = run_spmd(1, _advection_rhs_error, 32)[0]
    e64 = run_spmd(1, _advection_rhs_error, 64)[0]
    order = np.log2(e32 / e64)
    assert order > 4.5, f"observed spatial order {order:.2f}"


def test_state_fields_are_views():
    state = _state((4, 4, 4), 2, {"rho": 1.0, "et": 1.0})
    fields = state_fields(state)
    assert len(fields) == 7
    fields[0][0, 0, 0] = 42.0
    assert state.arrays[0][0, 0, 0] == 42.0
    fields[6][1, 1, 1] = 7.0
    assert state.arrays[5][1, 1, 1, 1] == 7.0


def test_cfl_time_step_hand_value():
    state = _state((4, 4, 4), 0, {"rho": 1.0, "mx": 1.0, "et": 3.0})
    h = cfl_time_step(GAS, state, (0.1, 0.1, 0.1), cfl=0.4)
    assert h == pytest.approx(0.4 * 0.1 / (1.0 + np.sqrt(1.4)), rel=1e-14)
