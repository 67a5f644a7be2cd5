"""Modified Newton iteration for the implicit fast stages.

The reaction network couples unknowns only within a cell, so the
Jacobian is block diagonal: one (5 + n_c) square block per cell, every
block sharing the same sparsity pattern. Blocks are assembled in a
compressed-row layout batched over cells, expanded to dense blocks, and
factored with partially pivoted LU, all vectorized over the cell axis.

Per Newton iteration there is exactly one global reduction (the WRMS
norm of the update). Linear solves touch no communicator at all; the
iteration matrix and its factorization are reused across stages and
steps until a convergence failure or a change in the step-times-gamma
coefficient forces a rebuild.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .profiling import Region, null_profile
from .vectors import subarrays

DEFAULT_MAX_ITERS = 10
DEFAULT_CONV_COEF = 0.01


class LinearSolveError(RuntimeError):
    pass


class ConvergenceFailure(Exception):
    """Newton did not converge; jac_was_fresh tells the caller whether a
    Jacobian refresh is worth trying before cutting the step."""

    def __init__(self, message: str, jac_was_fresh: bool):
        super().__init__(message)
        self.jac_was_fresh = jac_was_fresh


class BlockCSR:
    """Block-diagonal matrix, one nb x nb block per cell, shared pattern.

    values has shape (n_cells, nnz) in row-major entry order. The
    diagonal is always present so I - hg*J can be formed in place.
    """

    def __init__(self, nb: int, pattern, n_cells: int):
        entries = sorted(set(pattern) | {(i, i) for i in range(nb)})
        for r, c in entries:
            if not (0 <= r < nb and 0 <= c < nb):
                raise ValueError(f"pattern entry ({r}, {c}) outside block")
        self.nb = nb
        self.n_cells = n_cells
        self.indptr = np.zeros(nb + 1, dtype=np.int64)
        self.indices = np.array([c for _, c in entries], dtype=np.int64)
        for r, _ in entries:
            self.indptr[r + 1] += 1
        np.cumsum(self.indptr, out=self.indptr)
        slot = {rc: k for k, rc in enumerate(entries)}
        self._pattern_slots = np.array([slot[rc] for rc in pattern], dtype=np.int64)
        self._diag_slots = np.array([slot[(i, i)] for i in range(nb)], dtype=np.int64)
        self._rows = np.repeat(np.arange(nb), np.diff(self.indptr))
        self.values = np.zeros((n_cells, len(entries)))

    def set_shifted(self, pattern_values: np.ndarray, scale: float):
        """values <- I + scale * J, with J given on the construction pattern."""
        self.values[:] = 0.0
        np.add.at(self.values, (slice(None), self._pattern_slots),
                  scale * pattern_values)
        self.values[:, self._diag_slots] += 1.0

    def matvec(self, x: np.ndarray) -> np.ndarray:
        out = np.zeros((self.n_cells, self.nb))
        for r in range(self.nb):
            seg = slice(self.indptr[r], self.indptr[r + 1])
            out[:, r] = (self.values[:, seg] * x[:, self.indices[seg]]).sum(axis=1)
        return out

    def to_dense(self) -> np.ndarray:
        blocks = np.zeros((self.n_cells, self.nb, self.nb))
        blocks[:, self._rows, self.indices] = self.values
        return blocks


def block_lu_factor(blocks: np.ndarray) -> np.ndarray:
    """In-place LU with partial pivoting, batched over the leading axis.

    Returns the pivot rows (n_cells, nb). Raises LinearSolveError naming
    the first offending cell if any block is singular.
    """
    n_cells, nb, _ = blocks.shape
    piv = np.empty((n_cells, nb), dtype=np.int64)
    cells = np.arange(n_cells)
    for k in range(nb):
        p = k + np.abs(blocks[:, k:, k]).argmax(axis=1)
        piv[:, k] = p
        pivots = blocks[cells, p, k]
        if np.any(pivots == 0.0):
            bad = int(np.flatnonzero(pivots == 0.0)[0])
            raise LinearSolveError(
                f"singular {nb}x{nb} block in cell {bad} (pivot column {k})")
        tmp = blocks[cells, k, :].copy()
        blocks[cells, k, :] = blocks[cells, p, :]
        blocks[cells, p, :] = tmp
        blocks[:, k + 1:, k] /= blocks[:, k:k + 1, k]
        blocks[:, k + 1:, k + 1:] -= (blocks[:, k + 1:, k:k + 1]
                                      * blocks[:, k:k + 1, k + 1:])
    return piv


def block_lu_solve(blocks: np.ndarray, piv: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve factored blocks against rhs (n_cells, nb). Purely local."""
    n_cells, nb, _ = blocks.shape
    cells = np.arange(n_cells)
    x = rhs.copy()
    for k in range(nb):
        p = piv[:, k]
        xk = x[cells, k].copy()
        x[cells, k] = x[cells, p]
        x[cells, p] = xk
    for i in range(1, nb):
        x[:, i] -= (blocks[:, i, :i] * x[:, :i]).sum(axis=1)
    for i in range(nb - 1, -1, -1):
        x[:, i] -= (blocks[:, i, i + 1:] * x[:, i + 1:]).sum(axis=1)
        x[:, i] /= blocks[:, i, i]
    return x


def vector_to_blocks(v) -> np.ndarray:
    """Cell-major (n_cells, nb) copy of a fluid+chemistry vector."""
    parts = [a.reshape(-1, 1) for a in v.arrays[:5]]
    chem = v.arrays[5]
    parts.append(chem.reshape(-1, chem.shape[-1]))
    return np.concatenate(parts, axis=1)


def blocks_to_vector(blocks: np.ndarray, v):
    for i, a in enumerate(v.arrays[:5]):
        a.reshape(-1)[:] = blocks[:, i]
    chem = v.arrays[5]
    chem.reshape(-1, chem.shape[-1])[:] = blocks[:, 5:]


@dataclass
class NewtonStats:
    iterations: int = 0
    jac_evals: int = 0
    factorizations: int = 0
    solves: int = 0
    failures: int = 0


class NewtonEngine:
    """Solves the stage equation z - hg*f(t, z) - a = 0.

    jacobian(t, state) must return entries for `pattern` stacked on the
    last axis over the local cells. The iteration matrix I - hg*J is
    kept (with its factorization) between calls and rebuilt only when hg
    changes or reset()/a convergence failure invalidates it.
    """

    def __init__(self, jacobian, pattern, nb: int, n_cells: int, comm=None,
                 profile=None, max_iters: int = DEFAULT_MAX_ITERS,
                 conv_coef: float = DEFAULT_CONV_COEF):
        self.jacobian = jacobian
        self.pattern = tuple(pattern)
        self.comm = comm
        self.profile = profile if profile is not None else null_profile()
        self.max_iters = max_iters
        self.conv_coef = conv_coef
        self.stats = NewtonStats()
        self._matrix = BlockCSR(nb, self.pattern, n_cells)
        self._jac_values = None
        self._lu = None
        self._piv = None
        self._hg_cached = None

    def reset(self):
        """Drop the cached Jacobian and factorization."""
        self._jac_values = None
        self._lu = None
        self._piv = None
        self._hg_cached = None

    def _wrms(self, dv, weights) -> float:
        # one partial per task, one reduction round; summation order over
        # subvectors is pinned so reruns are bitwise stable
        s = 0.0
        for x, w in zip(subarrays(dv), subarrays(weights)):
            p = x * w
            s += float(np.dot(p.reshape(-1), p.reshape(-1)))
        if self.comm is not None:
            s = self.comm.allreduce([s], "sum")[0]
        return math.sqrt(s / dv.global_length)

    def solve(self, f, t: float, z, a, hg: float, weights):
        """Newton-iterate z in place; returns the iteration count.

        f(t, z) evaluates the stiff right-hand side. a is the constant
        stage data, hg the step-times-diagonal coefficient, weights the
        error weights for the convergence norm.
        """
        fresh = False
        if self._jac_values is None:
            with self.profile.region(Region.FAST_JAC):
                self._jac_values = self._eval_jacobian(t, z)
            self.stats.jac_evals += 1
            fresh = True
        if fresh or self._lu is None or hg != self._hg_cached:
            self._factor(hg)

        norm_prev = None
        rate = 1.0
        for k in range(1, self.max_iters + 1):
            self.stats.iterations += 1
            resid = f(t, z)
            for g, zz, aa in zip(subarrays(resid), subarrays(z), subarrays(a)):
                g *= -hg
                g += zz
                g -= aa
            with self.profile.region(Region.LIN_SOLVE):
                delta = block_lu_solve(self._lu, self._piv,
                                       -vector_to_blocks(resid))
            self.stats.solves += 1
            blocks_to_vector(delta, resid)
            for zz, dd in zip(subarrays(z), subarrays(resid)):
                zz += dd
            norm = self._wrms(resid, weights)
            if norm_prev is not None:
                if norm > 2.0 * norm_prev:
                    break
                rate = max(0.3 * rate, norm / norm_prev)
            if rate * norm <= self.conv_coef:
                return k
            norm_prev = norm
        self.stats.failures += 1
        was_fresh = fresh
        self.reset()
        raise ConvergenceFailure(
            f"no convergence in {self.max_iters} iterations", was_fresh)

    def _eval_jacobian(self, t, z):
        vals = self.jacobian(t, z)
        return vals.reshape(-1, len(self.pattern))

    def _factor(self, hg: float):
        with self.profile.region(Region.LIN_SETUP):
            self._matrix.set_shifted(self._jac_values, -hg)
            self._lu = self._matrix.to_dense()
            self._piv = block_lu_factor(self._lu)
        self._hg_cached = hg
        self.stats.factorizations += 1
