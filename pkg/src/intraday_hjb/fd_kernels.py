"""Monotone finite-difference building blocks shared by all solver stages.

Kernels act on interior nodes only; boundary nodes are filled by the callers
with the zero-order closure (copy of the nearest interior value).  Inside the
implicit systems the same closure is realised by folding any neighbour that
falls outside the unknown lattice back onto the nearest unknown, which keeps
every row sum equal to one.
"""
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import SingularSystemError

__all__ = [
    "upwind_advection", "centered_second", "mixed_seven_point", "apply_closure",
    "TridiagonalSystem", "thomas_solve", "StencilSystem", "SparsePentaSystem",
    "penta_factorize_solve", "assemble_xy_system",
]


def upwind_advection(b, V, d_xi, axis=-1, time_direction="backward"):
    """One-sided transport term ``b * dV/dxi`` selected by the sign of ``b``.

    Parameters
    ----------
    b : array_like
        Speeds, broadcastable to the interior of ``V`` along ``axis``.
    V : ndarray
        Values with at least 3 nodes along ``axis``.
    d_xi : float
        Grid step.
    time_direction : {"backward", "forward"}
        ``"backward"`` (used by every solver here, which march from terminal
        data) returns ``b+ D+ V + b- D- V``: information is taken from the
        side the characteristic comes from when time runs backwards, so that
        ``V + dtau * upwind`` is monotone under ``dtau * max|b| <= d_xi``.
        ``"forward"`` returns the mirrored ``b+ D- V + b- D+ V``.

    Returns
    -------
    ndarray
        Same shape as ``V``; boundary nodes along ``axis`` are zero.
    """
    V = np.moveaxis(np.asarray(V, dtype=float), axis, -1)
    if V.shape[-1] < 3:
        raise ValueError("upwind_advection needs at least 3 nodes")
    fwd = (V[..., 2:] - V[..., 1:-1]) / d_xi
    bwd = (V[..., 1:-1] - V[..., :-2]) / d_xi
    b = np.asarray(b, dtype=float)
    if b.ndim == V.ndim:
        b = np.moveaxis(b, axis, -1)
        if b.shape[-1] == V.shape[-1]:
            b = b[..., 1:-1]
    bp, bm = np.maximum(b, 0.0), np.minimum(b, 0.0)
    if time_direction == "backward":
        inner = bp * fwd + bm * bwd
    elif time_direction == "forward":
        inner = bp * bwd + bm * fwd
    else:
        raise ValueError(f"unknown time_direction {time_direction!r}")
    out = np.zeros_like(V)
    out[..., 1:-1] = inner
    return np.moveaxis(out, -1, axis)


def centered_second(V, d_xi, axis=-1):
    """``(V[l+1] - 2 V[l] + V[l-1]) / d_xi**2`` at interior nodes, zero on the boundary."""
    V = np.moveaxis(np.asarray(V, dtype=float), axis, -1)
    if V.shape[-1] < 3:
        raise ValueError("centered_second needs at least 3 nodes")
    out = np.zeros_like(V)
    out[..., 1:-1] = (V[..., 2:] - 2.0 * V[..., 1:-1] + V[..., :-2]) / d_xi**2
    return np.moveaxis(out, -1, axis)


def mixed_seven_point(V, dx, dy, rho_sign):
    """Seven-point cross-derivative ``d2V/dxdy`` on the first two axes.

    For ``rho_sign < 0`` the stencil uses the south-east/north-west diagonal,
    for ``rho_sign > 0`` the north-east/south-west one; in both cases the
    four axis neighbours carry weight -1 and the centre +2, so that together
    with a coefficient of sign ``rho_sign`` all neighbour weights of the
    discrete operator share one sign.  Exact for bilinear data.
    ``rho_sign == 0`` returns zeros.  Boundary nodes are zero.
    """
    V = np.asarray(V, dtype=float)
    out = np.zeros_like(V)
    if rho_sign == 0:
        return out
    c = V[1:-1, 1:-1]
    axis_sum = V[2:, 1:-1] + V[:-2, 1:-1] + V[1:-1, 2:] + V[1:-1, :-2]
    if rho_sign < 0:
        diag = V[2:, :-2] + V[:-2, 2:]
        out[1:-1, 1:-1] = (axis_sum - 2.0 * c - diag) / (2.0 * dx * dy)
    else:
        diag = V[2:, 2:] + V[:-2, :-2]
        out[1:-1, 1:-1] = (2.0 * c - axis_sum + diag) / (2.0 * dx * dy)
    return out


def apply_closure(V, axes=None):
    """Zero-order extrapolation: copy the nearest interior layer onto each edge, in place."""
    axes = range(V.ndim) if axes is None else axes
    for ax in axes:
        W = np.moveaxis(V, ax, 0)
        W[0] = W[1]
        W[-1] = W[-2]
    return V


@dataclass
class TridiagonalSystem:
    """Batched tridiagonal systems along the last axis.

    ``lower[..., 0]`` and ``upper[..., -1]`` are ignored.
    """

    lower: np.ndarray
    diag: np.ndarray
    upper: np.ndarray
    rhs: np.ndarray

    def matvec(self, x):
        y = self.diag * x
        y[..., 1:] += self.lower[..., 1:] * x[..., :-1]
        y[..., :-1] += self.upper[..., :-1] * x[..., 1:]
        return y

    def residual(self, x):
        return self.matvec(x) - self.rhs

    def is_m_matrix(self):
        return bool(np.all(self.diag > 0) and np.all(self.lower[..., 1:] <= 0)
                    and np.all(self.upper[..., :-1] <= 0))

    def solve(self):
        return thomas_solve(self)


def thomas_solve(sys_or_lower, diag=None, upper=None, rhs=None):
    """Solve batched tridiagonal systems by the Thomas algorithm.

    Accepts a :class:`TridiagonalSystem` or the four arrays.  Systems lie
    along the last axis; leading axes are independent batches.

    Raises
    ------
    SingularSystemError
        If a pivot vanishes; the context names the batch and row index.
    """
    if isinstance(sys_or_lower, TridiagonalSystem):
        s = sys_or_lower
        lower, diag, upper, rhs = s.lower, s.diag, s.upper, s.rhs
    else:
        lower = sys_or_lower
    shape = np.broadcast_shapes(np.shape(lower), np.shape(diag), np.shape(upper), np.shape(rhs))
    n = shape[-1]
    # Work on (n, batch) so each row update is a contiguous vector operation.
    a = np.ascontiguousarray(np.broadcast_to(lower, shape).reshape(-1, n).T)
    b = np.ascontiguousarray(np.broadcast_to(diag, shape).reshape(-1, n).T)
    c = np.ascontiguousarray(np.broadcast_to(upper, shape).reshape(-1, n).T)
    d = np.array(np.broadcast_to(rhs, shape).reshape(-1, n).T, dtype=float, order="C")
    cp = np.empty_like(c)
    piv = b[0].copy()
    for k in range(n):
        if k:
            piv = b[k] - a[k] * cp[k - 1]
            d[k] -= a[k] * d[k - 1]
        bad = ~(np.abs(piv) > 0.0)
        if bad.any():
            raise SingularSystemError("zero pivot in tridiagonal solve",
                                      batch=int(np.flatnonzero(bad)[0]), row=k)
        cp[k] = c[k] / piv
        d[k] /= piv
    for k in range(n - 2, -1, -1):
        d[k] -= cp[k] * d[k + 1]
    return d.T.reshape(shape)


@dataclass
class StencilSystem:
    """Sparse implicit system on a 2-D unknown lattice given by stencil offsets.

    Row ``(i, j)`` reads ``centre[i, j] * U[i, j] + sum_o coef[o][i, j] *
    U[(i, j) + o] = rhs[i, j]``.  Neighbours outside the lattice are folded
    onto the nearest lattice node (zero-order closure).
    """

    centre: np.ndarray
    neighbours: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.centre.shape

    def matrix(self):
        n1, n2 = self.shape
        idx = np.arange(n1 * n2).reshape(n1, n2)
        ii, jj = np.meshgrid(np.arange(n1), np.arange(n2), indexing="ij")
        rows = [idx.ravel()]
        cols = [idx.ravel()]
        vals = [np.broadcast_to(self.centre, self.shape).ravel()]
        for (di, dj), coef in self.neighbours.items():
            ti = np.clip(ii + di, 0, n1 - 1)
            tj = np.clip(jj + dj, 0, n2 - 1)
            rows.append(idx.ravel())
            cols.append(idx[ti, tj].ravel())
            vals.append(np.broadcast_to(coef, self.shape).ravel())
        A = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(n1 * n2, n1 * n2))
        return A.tocsc()

    def row_sums(self):
        total = np.broadcast_to(self.centre, self.shape).copy()
        for coef in self.neighbours.values():
            total = total + coef
        return total

    def sign_violations(self):
        """Number of rows with a positive off-diagonal coefficient."""
        bad = np.zeros(self.shape, dtype=bool)
        for coef in self.neighbours.values():
            bad |= np.broadcast_to(coef, self.shape) > 0
        return int(bad.sum())

    def factorize(self):
        return _Factorization(self)


# The (x, y) stage uses the seven-point layout; the name documents that use.
SparsePentaSystem = StencilSystem


class _Factorization:
    """Sparse LU computed once and reused for any number of right-hand sides."""

    def __init__(self, system):
        self.shape = system.shape
        A = system.matrix()
        self.matrix = A
        try:
            self._lu = spla.splu(A, permc_spec="COLAMD")
        except RuntimeError as exc:
            diag = A.diagonal()
            worst = int(np.argmin(np.abs(diag)))
            raise SingularSystemError(f"sparse factorization failed: {exc}",
                                      pivot=np.unravel_index(worst, self.shape)) from exc
        udiag = self._lu.U.diagonal()
        if not np.all(np.isfinite(udiag)) or np.any(udiag == 0):
            worst = int(np.argmin(np.abs(udiag)))
            raise SingularSystemError("singular sparse factorization",
                                      pivot=np.unravel_index(int(self._lu.perm_c[worst]), self.shape))

    def solve(self, rhs):
        """Solve for ``rhs`` of shape ``lattice`` or ``lattice + (batch,)``."""
        rhs = np.asarray(rhs, dtype=float)
        n = self.shape[0] * self.shape[1]
        flat = rhs.reshape(n, -1)
        sol = self._lu.solve(np.asfortranarray(flat))
        return sol.reshape(rhs.shape)


def penta_factorize_solve(system, rhs_batch):
    """Factorize ``system`` once and solve every right-hand side in ``rhs_batch``."""
    return system.factorize().solve(rhs_batch)


def assemble_xy_system(mu_x, sig_x, mu_y, sig_y, rho, dx, dy, dtau):
    """Implicit operator ``I - dtau * L_xy`` on the interior (x, y) lattice.

    ``L_xy`` combines upwind drifts, centred diffusions and the seven-point
    cross term with weight ``rho * sig_x * sig_y``.  All coefficient arrays
    are broadcast to the interior lattice shape ``(N_x - 1, N_y - 1)``.

    Returns
    -------
    StencilSystem
        Row sums equal one; off-diagonals are nonpositive whenever the
        cross-term dominance condition holds.
    """
    mu_x, sig_x, mu_y, sig_y = np.broadcast_arrays(*(np.asarray(a, dtype=float)
                                                    for a in (mu_x, sig_x, mu_y, sig_y)))
    dxx = sig_x**2 / (2.0 * dx**2)
    dyy = sig_y**2 / (2.0 * dy**2)
    cross = abs(rho) * sig_x * sig_y / (2.0 * dx * dy)
    west = -dtau * (np.maximum(-mu_x, 0.0) / dx + dxx - cross)
    east = -dtau * (np.maximum(mu_x, 0.0) / dx + dxx - cross)
    south = -dtau * (np.maximum(-mu_y, 0.0) / dy + dyy - cross)
    north = -dtau * (np.maximum(mu_y, 0.0) / dy + dyy - cross)
    centre = 1.0 + dtau * (np.abs(mu_x) / dx + np.abs(mu_y) / dy
                           + 2.0 * dxx + 2.0 * dyy - 2.0 * cross)
    neighbours = {(-1, 0): west, (1, 0): east, (0, -1): south, (0, 1): north}
    if rho < 0:
        neighbours[(1, -1)] = -dtau * cross
        neighbours[(-1, 1)] = -dtau * cross
    elif rho > 0:
        neighbours[(1, 1)] = -dtau * cross
        neighbours[(-1, -1)] = -dtau * cross
    return StencilSystem(centre, neighbours)
