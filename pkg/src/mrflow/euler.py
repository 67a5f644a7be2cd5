"""Compressible Euler fluxes and fifth-order WENO finite differencing.

State fields, in canonical order: rho, mx, my, mz, et, then n_c advected
chemical fields. Face fluxes are built from point values with local
Lax-Friedrichs splitting, component-wise WENO5 reconstruction, and a
conservative difference. Each right-hand-side evaluation runs in two
passes so halo traffic overlaps with interior work:

  begin exchange -> interior-face fluxes -> finish exchange ->
  boundary-face fluxes -> divergence

Interior stencils are packed straight from owned cells and never touch
ghost storage, which is what makes the overlap legal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .mesh import HALO_DEPTH, HaloExchanger
from .profiling import Region, null_profile
from .vectors import ManyVector

IRHO, IMX, IMY, IMZ, IET, ICHEM = 0, 1, 2, 3, 4, 5

WENO_EPS = 1e-6
# optimal linear weights for the left-biased face reconstruction
_W_IDEAL = (0.1, 0.6, 0.3)


class EosDomainError(RuntimeError):
    """Nonpositive internal energy handed to the equation of state."""


@dataclass(frozen=True)
class GasConstants:
    """Ideal-gas parameters; gamma = 1 + R/c_v always holds."""
    R: float
    c_v: float

    @property
    def gamma(self) -> float:
        return 1.0 + self.R / self.c_v

    @classmethod
    def from_gamma(cls, gamma: float, c_v: float = 1.5) -> "GasConstants":
        return cls(R=(gamma - 1.0) * c_v, c_v=c_v)


def kinetic_energy(rho, mx, my, mz):
    return (mx * mx + my * my + mz * mz) / (2.0 * rho)


def pressure(gas: GasConstants, rho, mx, my, mz, et, check: bool = True):
    """p = (gamma - 1) * (et - |m|^2 / (2 rho))."""
    internal = et - kinetic_energy(rho, mx, my, mz)
    if check and np.any(internal <= 0.0):
        raise EosDomainError("nonpositive internal energy")
    return (gas.gamma - 1.0) * internal


def sound_speed(gas: GasConstants, rho, p):
    return np.sqrt(gas.gamma * p / rho)


def flux(gas: GasConstants, w, axis: int):
    """Analytic flux along `axis` for states stacked on the last axis."""
    w = np.asarray(w)
    rho = w[..., IRHO]
    m = (w[..., IMX], w[..., IMY], w[..., IMZ])
    et = w[..., IET]
    p = pressure(gas, rho, *m, et)
    v = m[axis] / rho
    out = np.empty_like(w)
    out[..., IRHO] = m[axis]
    for j in range(3):
        out[..., IMX + j] = m[j] * v
    out[..., IMX + axis] += p
    out[..., IET] = v * (et + p)
    out[..., ICHEM:] = w[..., ICHEM:] * v[..., None]
    return out


def max_wave_speed(gas: GasConstants, stencil, axis: int):
    """max(|v_axis| + c) over each 6-cell stencil; stencil is (N, 6, nf)."""
    rho = stencil[..., IRHO]
    m = (stencil[..., IMX], stencil[..., IMY], stencil[..., IMZ])
    p = pressure(gas, rho, *m, stencil[..., IET])
    lam = np.abs(m[axis] / rho) + np.sqrt(gas.gamma * p / rho)
    return lam.max(axis=-1)


# ---------------------------------------------------------------------------
# WENO5 reconstruction

def _weno5_left(f0, f1, f2, f3, f4, eps):
    """Left-biased WENO5 value at the face just right of cell f2."""
    p0 = (2.0 * f0 - 7.0 * f1 + 11.0 * f2) / 6.0
    p1 = (-f1 + 5.0 * f2 + 2.0 * f3) / 6.0
    p2 = (2.0 * f2 + 5.0 * f3 - f4) / 6.0
    b0 = (13.0 / 12.0) * (f0 - 2.0 * f1 + f2) ** 2 + 0.25 * (f0 - 4.0 * f1 + 3.0 * f2) ** 2
    b1 = (13.0 / 12.0) * (f1 - 2.0 * f2 + f3) ** 2 + 0.25 * (f1 - f3) ** 2
    b2 = (13.0 / 12.0) * (f2 - 2.0 * f3 + f4) ** 2 + 0.25 * (3.0 * f2 - 4.0 * f3 + f4) ** 2
    a0 = _W_IDEAL[0] / (eps + b0) ** 2
    a1 = _W_IDEAL[1] / (eps + b1) ** 2
    a2 = _W_IDEAL[2] / (eps + b2) ** 2
    asum = a0 + a1 + a2
    return (a0 * p0 + a1 * p1 + a2 * p2) / asum


def weno5_face_flux(gas: GasConstants, stencil, lam, axis: int,
                    eps: float = WENO_EPS):
    """Split-flux WENO5 value at each face.

    stencil: (N, 6, nf) cell states, positions i-3..i+2 around face
    i-1/2 (stencil-position major, field minor). lam: (N,) local
    Lax-Friedrichs speeds, each >= max(|v_axis| + c) over its stencil.
    """
    F = flux(gas, stencil, axis)
    lam3 = lam[:, None, None]
    fplus = 0.5 * (F + lam3 * stencil)
    fminus = 0.5 * (F - lam3 * stencil)
    # upwind-from-left uses cells i-3..i+1; upwind-from-right mirrors
    left = _weno5_left(fplus[:, 0], fplus[:, 1], fplus[:, 2],
                       fplus[:, 3], fplus[:, 4], eps)
    right = _weno5_left(fminus[:, 5], fminus[:, 4], fminus[:, 3],
                        fminus[:, 2], fminus[:, 1], eps)
    return left + right


# ---------------------------------------------------------------------------
# stencil packing

def interior_face_range(n: int):
    """Faces whose 6-cell stencil stays inside owned cells: i in [3, n-3]."""
    return (3, n - 2) if n >= 6 else (3, 3)


def pack_interior_stencils(fields, axis: int):
    """StencilBuffer for every interior face along `axis`.

    Returns (buffer, (lo, hi)) where buffer is (N, 6, nf) in C order
    over (face position, transverse coordinates) and faces lo..hi-1 are
    covered. Reads owned cells only.
    """
    n = fields[0].shape[axis]
    lo, hi = interior_face_range(n)
    if hi <= lo:
        return np.empty((0, 6, len(fields))), (lo, hi)
    # sliding_window_view appends the 6-wide window axis last; stacking the
    # fields after it gives (spatial', 6, nf) with faces counted on `axis`
    wins = [sliding_window_view(f, 6, axis=axis) for f in fields]
    buf = np.stack(wins, axis=-1)
    order = _face_major_order(axis, buf.shape[:3])
    buf = np.transpose(buf, order + (3, 4))
    return np.ascontiguousarray(buf.reshape(-1, 6, len(fields))), (lo, hi)


def _face_major_order(axis, spatial_shape):
    """Axis order putting the face axis first, remaining axes in x,y,z order."""
    rest = [a for a in range(3) if a != axis]
    return (axis, rest[0], rest[1])


def pack_boundary_stencils(fields, halo, axis: int):
    """StencilBuffer for the faces the interior pass skipped.

    Composes owned cells with received ghost slabs, so it must run after
    the exchange finishes. Returns (buffer, list of face blocks
    [(face_lo, face_hi), ...]) in ascending face order.
    """
    n = fields[0].shape[axis]
    lo_int, hi_int = interior_face_range(n)
    slab_lo = halo.slabs[2 * axis]
    slab_hi = halo.slabs[2 * axis + 1]
    nf = len(fields)
    ext = np.concatenate(
        [slab_lo, np.stack(fields), slab_hi], axis=1 + axis)
    wins = sliding_window_view(ext, 6, axis=1 + axis)
    # wins: (nf, spatial..., 6) with the axis dim now counting faces 0..n
    blocks = []
    if hi_int <= lo_int:
        blocks.append((0, n + 1))
    else:
        blocks.append((0, lo_int))
        blocks.append((hi_int, n + 1))
    parts = []
    for blo, bhi in blocks:
        sl = [slice(None)] * 4
        sl[1 + axis] = slice(blo, bhi)
        part = wins[tuple(sl)]  # (nf, spatial', 6)
        part = np.moveaxis(part, 0, -1)  # (spatial', 6, nf)
        order = _face_major_order(axis, part.shape[:3])
        part = np.transpose(part, order + (3, 4))
        parts.append(np.ascontiguousarray(part.reshape(-1, 6, nf)))
    return parts, blocks


# ---------------------------------------------------------------------------
# right-hand side pipeline

def state_fields(state: ManyVector):
    """Views of the 5 + n_c scalar fields in canonical order."""
    rho, mx, my, mz, et, chem = state.arrays
    fields = [rho, mx, my, mz, et]
    fields.extend(chem[..., j] for j in range(chem.shape[-1]))
    return fields


class EulerPipeline:
    """Slow right-hand side: f(t, w) = -div F(w) + G(t).

    Owns the halo exchanger and scratch flux storage for one task.
    Timing lands in regions: MPI for transport waits, Packing for
    stencil copies, FDWENO for reconstruction, Euler for the whole
    divergence build, SlowRhs for the full call including forcing.
    """

    def __init__(self, comm, decomp, gas: GasConstants, n_chem: int,
                 profile=None, forcing=None, debug: bool = False,
                 eps: float = WENO_EPS):
        self.comm = comm
        self.decomp = decomp
        self.gas = gas
        self.n_chem = n_chem
        self.n_fields = 5 + n_chem
        self.profile = profile if profile is not None else null_profile()
        self.forcing = forcing
        self.debug = debug
        self.eps = eps
        self.exchanger = HaloExchanger(comm, decomp, self.n_fields)
        shape = decomp.local_shape
        self._flux = [np.empty(_face_array_shape(shape, ax) + (self.n_fields,))
                      for ax in range(3)]
        self.n_calls = 0

    # one conservative-difference evaluation
    def __call__(self, t: float, state: ManyVector, out=None) -> ManyVector:
        prof = self.profile
        with prof.region(Region.SLOW_RHS):
            with prof.region(Region.EULER):
                div = self._divergence(state)
            if out is None:
                out = state.clone_empty()
            for o, d in zip(out.arrays[:5], div[:5]):
                np.multiply(d, -1.0, out=o)
            chem_rhs = out.arrays[5]
            for j in range(self.n_chem):
                np.multiply(div[5 + j], -1.0, out=chem_rhs[..., j])
            if self.forcing is not None:
                g = self.forcing(t)
                for o, ga in zip(out.arrays, g.arrays):
                    o += ga
        self.n_calls += 1
        return out

    def _divergence(self, state: ManyVector):
        prof = self.profile
        fields = state_fields(state)
        gas = self.gas
        if self.debug:
            for f in self._flux:
                f.fill(np.nan)
        with prof.region(Region.MPI):
            handle = self.exchanger.begin(fields, poison=self.debug)
        for axis in range(3):
            with prof.region(Region.PACKING):
                buf, (lo, hi) = pack_interior_stencils(fields, axis)
            if hi > lo:
                if self.debug and np.any(np.isnan(buf)):
                    raise RuntimeError("interior stencils read ghost data")
                with prof.region(Region.FDWENO):
                    lam = max_wave_speed(gas, buf, axis)
                    face = weno5_face_flux(gas, buf, lam, axis, self.eps)
                self._scatter(axis, lo, hi, face)
        with prof.region(Region.MPI):
            halo = handle.finish()
        for axis in range(3):
            with prof.region(Region.PACKING):
                parts, blocks = pack_boundary_stencils(fields, halo, axis)
            for part, (blo, bhi) in zip(parts, blocks):
                if bhi <= blo:
                    continue
                with prof.region(Region.FDWENO):
                    lam = max_wave_speed(gas, part, axis)
                    face = weno5_face_flux(gas, part, lam, axis, self.eps)
                self._scatter(axis, blo, bhi, face)
        if self.debug and any(np.any(np.isnan(f)) for f in self._flux):
            raise RuntimeError("face flux left unset before divergence")
        # conservative difference, axis terms accumulated in x, y, z order
        dx, dy, dz = self.decomp.grid.spacing
        fx, fy, fz = self._flux
        div = (fx[1:, :, :] - fx[:-1, :, :]) / dx
        div += (fy[:, 1:, :] - fy[:, :-1, :]) / dy
        div += (fz[:, :, 1:] - fz[:, :, :-1]) / dz
        return np.moveaxis(div, -1, 0)

    def _scatter(self, axis, lo, hi, face_values):
        dest = self._flux[axis]
        shape = list(dest.shape[:3])
        shape[axis] = hi - lo
        rest = [a for a in range(3) if a != axis]
        vals = face_values.reshape(tuple(shape[a] for a in (axis, *rest)) + (self.n_fields,))
        vals = np.moveaxis(vals, (0, 1, 2), (axis, *rest))
        sl = [slice(None)] * 3
        sl[axis] = slice(lo, hi)
        dest[tuple(sl)] = vals


def _face_array_shape(local_shape, axis):
    s = list(local_shape)
    s[axis] += 1
    return tuple(s)


def cfl_time_step(gas: GasConstants, state: ManyVector, spacing,
                  cfl: float = 0.4) -> float:
    """Largest advective step for this task's cells (reduce across tasks
    before use)."""
    rho, mx, my, mz, et, _ = state.arrays
    p = pressure(gas, rho, mx, my, mz, et)
    c = sound_speed(gas, rho, p)
    limit = np.inf
    for axis, (m, h) in enumerate(zip((mx, my, mz), spacing)):
        lam = np.abs(m / rho) + c
        limit = min(limit, h / float(lam.max()))
    return cfl * limit
