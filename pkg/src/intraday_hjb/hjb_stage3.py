"""Trading-window HJB solver with Lie splitting of three substeps per time step.

1. inventory transport with the Hamiltonian, linearised around a frozen
   trading speed and refined by damped Picard iterations (tridiagonal solves);
2. implicit drift/diffusion in (production, price) with one sparse LU per
   time step reused for every inventory node;
3. explicit jump integral in price, evaluated with exponential recurrences
   on the truncated price window.

Time runs backwards: level ``n`` of the stack holds ``t = T_gc - n * dt``.
"""
from dataclasses import dataclass, field, replace
import math

import numba
import numpy as np

from .errors import CFLError, DivergenceError, IntradayError, ParameterError, SingularSystemError
from .fd_kernels import TridiagonalSystem, apply_closure, assemble_xy_system, thomas_solve
from .market_model import JumpLaw, price_drift, wind_diffusion, wind_drift

__all__ = ["hamiltonian", "PicardOptions", "SolverOptions", "QSubstepResult", "ValueStack",
           "rosenbrock_picard", "q_substep", "xy_substep", "jump_recurrences", "jump_substep",
           "solve_stage3", "regularization_sweep"]


def hamiltonian(y, p, gamma, psi_min, psi_max):
    """Minimised running cost ``min_psi (-psi y + gamma psi^2 / 2 + psi p)`` over the rate window.

    Returns
    -------
    (H, psi_star)
        ``psi_star = clip((y - p) / gamma)``; when the unconstrained
        minimiser lies on or beyond a bound the bound branch is used.
    """
    y = np.asarray(y, dtype=float)
    p = np.asarray(p, dtype=float)
    gap = y - p
    free = gap / gamma
    psi = np.clip(free, psi_min, psi_max)
    inside = (free > psi_min) & (free < psi_max)
    H = np.where(inside, -gap * gap / (2.0 * gamma), 0.5 * gamma * psi * psi - psi * gap)
    if H.ndim == 0:
        return float(H), float(psi)
    return H, psi


@dataclass(frozen=True)
class PicardOptions:
    """Picard controls for the inventory substep.

    ``upwind="monotone"`` evaluates the Hamiltonian and the speed update with
    the two-sided upwind form ``min(H over psi >= 0 with the forward slope,
    H over psi <= 0 with the backward slope)``; ``"one-sided"`` uses only the
    slope on the side of the current speed.  The two agree wherever both
    slopes call for motion in the same direction; at a convex kink in q (e.g.
    the absolute imbalance penalty) the one-sided form has no fixed point and
    its iterates cycle.
    """

    R_max: int = 15
    tol: float = 1e-6
    omega: float = 0.5
    upwind: str = "monotone"

    def __post_init__(self):
        if self.R_max < 1 or not self.tol > 0 or not 0 < self.omega <= 1:
            raise ParameterError("invalid Picard options", R_max=self.R_max, tol=self.tol,
                                 omega=self.omega)
        if self.upwind not in ("monotone", "one-sided"):
            raise ParameterError(f"unknown upwind rule {self.upwind!r}")


@dataclass(frozen=True)
class SolverOptions:
    """Switches for the Stage III march.

    ``jumps=False`` removes both the jump substep and the drift compensator;
    the other flags drop a substep entirely (test builds).
    """

    picard: PicardOptions = field(default_factory=PicardOptions)
    jumps: bool = True
    q_step: bool = True
    xy_step: bool = True
    check_every: int = 1


@dataclass
class QSubstepResult:
    """Output of the inventory substep with the data of its final linear solve."""

    U: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray
    speed_used: np.ndarray
    speed_next: np.ndarray
    rhs: np.ndarray


def _upwind_slope(U, a, dq):
    """Slope of ``U`` at interior q-nodes, one-sided toward the side chosen by ``a``."""
    fwd = (U[..., 2:] - U[..., 1:-1]) / dq
    bwd = (U[..., 1:-1] - U[..., :-2]) / dq
    return np.where(a >= 0.0, fwd, bwd)


def _two_sided(y, fwd, bwd, gamma, psi_min, psi_max):
    """Monotone upwind Hamiltonian and its minimising speed from both one-sided slopes."""
    sp = np.clip((y - fwd) / gamma, max(psi_min, 0.0), psi_max)
    sm = np.clip((y - bwd) / gamma, psi_min, min(psi_max, 0.0))
    Hp = 0.5 * gamma * sp * sp + sp * (fwd - y) if psi_max >= 0.0 else np.full_like(sp, np.inf)
    Hm = 0.5 * gamma * sm * sm + sm * (bwd - y) if psi_min <= 0.0 else np.full_like(sm, np.inf)
    take_fwd = Hp <= Hm
    return np.where(take_fwd, Hp, Hm), np.where(take_fwd, sp, sm)


def _frozen_system(a, dq, dtau, rhs):
    """Tridiagonal system ``U - dtau * a * D_up U = rhs`` with closure folded in."""
    c = dtau * np.abs(a) / dq
    pos = a >= 0.0
    diag = 1.0 + c
    upper = np.where(pos, -c, 0.0)
    lower = np.where(pos, 0.0, -c)
    diag[..., 0] += lower[..., 0]
    diag[..., -1] += upper[..., -1]
    lower[..., 0] = 0.0
    upper[..., -1] = 0.0
    return TridiagonalSystem(lower, diag, upper, rhs)


@numba.njit(cache=True, inline="always", error_model="numpy")
def _two_sided_free(zf, zb, y, fwd, bwd, gamma, psi_min, psi_max):
    """Scalar :func:`_two_sided`; ``zf``, ``zb`` are the unclipped rates of each slope."""
    Hp = np.inf
    Hm = np.inf
    sp = 0.0
    sm = 0.0
    if psi_max >= 0.0:
        sp = min(max(zf, max(psi_min, 0.0)), psi_max)
        Hp = 0.5 * gamma * sp * sp + sp * (fwd - y)
    if psi_min <= 0.0:
        sm = min(max(zb, psi_min), min(psi_max, 0.0))
        Hm = 0.5 * gamma * sm * sm + sm * (bwd - y)
    if Hp <= Hm:
        return Hp, sp
    return Hm, sm


_BLOCK = 32


@numba.njit(cache=True, error_model="numpy")
def _picard_block(V, y, dq, dtau, gamma, psi_min, psi_max, R_max, tol, omega, monotone,
                  U, iterations, converged, speed_used, speed_next, rhs_out):
    """Per-line Rosenbrock-Picard loop, sweeping blocks of lines together.

    Lines sit on the inner axis so the Thomas recurrences of neighbouring
    lines overlap; a finished line is frozen while the rest of its block
    iterates.  Returns ``(line, row)`` of a zero pivot or ``(-1, -1)``.
    """
    B, n1 = V.shape
    K = n1 - 2
    L = _BLOCK
    v = np.empty((n1, L))
    u = np.empty((n1, L))
    un = np.empty((n1, L))
    s = np.empty((n1 - 1, L))
    z = np.empty((n1 - 1, L))
    a = np.empty((K, L))
    a_new = np.empty((K, L))
    rhs = np.empty((K, L))
    lo = np.empty((K, L))
    di = np.empty((K, L))
    up = np.empty((K, L))
    cp = np.empty((K, L))
    worst = np.empty(L)
    active = np.empty(L, dtype=np.bool_)
    yb = np.empty(L)
    for b0 in range(0, B, L):
        nl = min(L, B - b0)
        for l in range(L):
            src = b0 + min(l, nl - 1)
            yb[l] = y[src]
            active[l] = l < nl
            for k in range(n1):
                v[k, l] = V[src, k]
                u[k, l] = v[k, l]
        for k in range(K):
            for l in range(L):
                free = (yb[l] - (v[k + 2, l] - v[k, l]) / (2.0 * dq)) / gamma
                a[k, l] = min(max(free, psi_min), psi_max)
        for r in range(R_max):
            for k in range(n1 - 1):
                for l in range(L):
                    s[k, l] = (u[k + 1, l] - u[k, l]) / dq
                    z[k, l] = (yb[l] - s[k, l]) / gamma
            for k in range(K):
                for l in range(L):
                    fwd = s[k + 1, l]
                    bwd = s[k, l]
                    ak = a[k, l]
                    pk = fwd if ak >= 0.0 else bwd
                    if monotone:
                        H, _unused = _two_sided_free(z[k + 1, l], z[k, l], yb[l], fwd, bwd,
                                                     gamma, psi_min, psi_max)
                    else:
                        gap = yb[l] - pk
                        free = gap / gamma
                        if free > psi_min and free < psi_max:
                            H = -gap * gap / (2.0 * gamma)
                        else:
                            ps = min(max(free, psi_min), psi_max)
                            H = 0.5 * gamma * ps * ps - ps * gap
                    rhs[k, l] = v[k + 1, l] + dtau * (H - ak * pk)
                    c = dtau * abs(ak) / dq
                    di[k, l] = 1.0 + c
                    up[k, l] = -c if ak >= 0.0 else 0.0
                    lo[k, l] = 0.0 if ak >= 0.0 else -c
            for l in range(L):
                di[0, l] += lo[0, l]
                lo[0, l] = 0.0
                di[K - 1, l] += up[K - 1, l]
                up[K - 1, l] = 0.0
            for l in range(L):
                piv = di[0, l]
                if not abs(piv) > 0.0:
                    return b0 + l, 0
                cp[0, l] = up[0, l] / piv
                un[1, l] = rhs[0, l] / piv
            for k in range(1, K):
                for l in range(L):
                    piv = di[k, l] - lo[k, l] * cp[k - 1, l]
                    cp[k, l] = up[k, l] / piv
                    un[k + 1, l] = (rhs[k, l] - lo[k, l] * un[k, l]) / piv
            for k in range(K - 2, -1, -1):
                for l in range(L):
                    un[k + 1, l] -= cp[k, l] * un[k + 2, l]
            for l in range(L):
                un[0, l] = un[1, l]
                un[n1 - 1, l] = un[n1 - 2, l]
            for k in range(n1 - 1):
                for l in range(L):
                    s[k, l] = (un[k + 1, l] - un[k, l]) / dq
                    z[k, l] = (yb[l] - s[k, l]) / gamma
            for l in range(L):
                worst[l] = 0.0
            for k in range(K):
                for l in range(L):
                    ak = a[k, l]
                    if monotone:
                        _unused, a_hat = _two_sided_free(z[k + 1, l], z[k, l], yb[l],
                                                         s[k + 1, l], s[k, l], gamma, psi_min,
                                                         psi_max)
                    else:
                        pk = s[k + 1, l] if ak >= 0.0 else s[k, l]
                        a_hat = min(max((yb[l] - pk) / gamma, psi_min), psi_max)
                    an = (1.0 - omega) * ak + omega * a_hat
                    a_new[k, l] = an
                    worst[l] = max(worst[l], abs(an - ak))
            remaining = 0
            for l in range(nl):
                if not active[l]:
                    continue
                for k in range(n1):
                    u[k, l] = un[k, l]
                done = worst[l] <= tol
                if done or r == R_max - 1:
                    b = b0 + l
                    for k in range(K):
                        if not abs(di[k, l] - lo[k, l] * (cp[k - 1, l] if k > 0 else 0.0)) > 0.0:
                            return b, k
                        speed_used[b, k] = a[k, l]
                        speed_next[b, k] = a_new[k, l]
                        rhs_out[b, k] = rhs[k, l]
                    iterations[b] = r + 1
                    converged[b] = done
                    for k in range(n1):
                        U[b, k] = u[k, l]
                    active[l] = False
                else:
                    remaining += 1
                    for k in range(K):
                        a[k, l] = a_new[k, l]
            if remaining == 0:
                break
    return -1, -1


def rosenbrock_picard(V, y, dq, dtau, gamma, psi_min, psi_max, picard=PicardOptions(),
                      backend="numba"):
    """Inventory substep for a batch of independent q-lines.

    Parameters
    ----------
    V : ndarray, shape (B, N_q + 1)
        Input values, q along the last axis (edges hold the closure values).
    y : array_like, shape (B,) or broadcastable
        Price attached to each line.
    backend : {"numba", "numpy"}
        Compiled per-line loop, or the vectorised reference implementation.

    Returns
    -------
    QSubstepResult
        ``U`` has the same shape as ``V`` with the q-closure applied.
    """
    V = np.asarray(V, dtype=float)
    B, nq1 = V.shape
    y = np.broadcast_to(np.asarray(y, dtype=float).reshape(-1, 1) if np.ndim(y) else y,
                        (B, 1)).astype(float)
    if backend == "numba":
        K = nq1 - 2
        U = np.empty_like(V)
        iterations = np.zeros(B, dtype=np.int32)
        converged = np.zeros(B, dtype=np.bool_)
        speed_used = np.empty((B, K))
        speed_next = np.empty((B, K))
        rhs_out = np.empty((B, K))
        bad_line, bad_row = _picard_block(np.ascontiguousarray(V), np.ascontiguousarray(y[:, 0]),
                                          float(dq), float(dtau), float(gamma), float(psi_min),
                                          float(psi_max), int(picard.R_max), float(picard.tol),
                                          float(picard.omega), picard.upwind == "monotone", U,
                                          iterations, converged,
                                          speed_used, speed_next, rhs_out)
        if bad_line >= 0:
            raise SingularSystemError("zero pivot in inventory substep", line=int(bad_line),
                                      row=int(bad_row))
        return QSubstepResult(U, iterations, converged, speed_used, speed_next, rhs_out)
    if backend != "numpy":
        raise ParameterError(f"unknown backend {backend!r}")
    monotone = picard.upwind == "monotone"
    a = np.clip((y - (V[:, 2:] - V[:, :-2]) / (2.0 * dq)) / gamma, psi_min, psi_max)
    U = V.copy()
    V_int = V[:, 1:-1]
    iterations = np.zeros(B, dtype=np.int32)
    converged = np.zeros(B, dtype=bool)
    speed_used = np.empty_like(a)
    speed_next = np.empty_like(a)
    rhs_out = np.empty_like(a)
    active = np.arange(B)
    a_act, U_act, y_act = a, U, y
    for r in range(picard.R_max):
        p = _upwind_slope(U_act, a_act, dq)
        if monotone:
            H, _ = _two_sided(y_act, (U_act[:, 2:] - U_act[:, 1:-1]) / dq,
                              (U_act[:, 1:-1] - U_act[:, :-2]) / dq, gamma, psi_min, psi_max)
        else:
            H, _ = hamiltonian(y_act, p, gamma, psi_min, psi_max)
        rhs = V_int[active] + dtau * (H - a_act * p)
        try:
            sol = thomas_solve(_frozen_system(a_act, dq, dtau, rhs))
        except SingularSystemError as exc:
            raise SingularSystemError(str(exc), line=int(active[exc.context.get("batch", 0)]),
                                      picard_iteration=r) from exc
        U_new = np.empty_like(U_act)
        U_new[:, 1:-1] = sol
        U_new[:, 0] = sol[:, 0]
        U_new[:, -1] = sol[:, -1]
        if monotone:
            _, a_hat = _two_sided(y_act, (U_new[:, 2:] - U_new[:, 1:-1]) / dq,
                                  (U_new[:, 1:-1] - U_new[:, :-2]) / dq, gamma, psi_min, psi_max)
        else:
            a_hat = np.clip((y_act - _upwind_slope(U_new, a_act, dq)) / gamma, psi_min, psi_max)
        a_new = (1.0 - picard.omega) * a_act + picard.omega * a_hat
        done = np.max(np.abs(a_new - a_act), axis=1) <= picard.tol
        last = done | (r == picard.R_max - 1)
        U[active] = U_new
        iterations[active] = r + 1
        if last.any():
            idx = active[last]
            speed_used[idx] = a_act[last]
            speed_next[idx] = a_new[last]
            rhs_out[idx] = rhs[last]
            converged[idx] = done[last]
        keep = ~last
        if not keep.any():
            break
        active = active[keep]
        a_act = a_new[keep]
        U_act = U_new[keep]
        y_act = y_act[keep]
    return QSubstepResult(U, iterations, converged, speed_used, speed_next, rhs_out)


@dataclass
class ValueStack:
    """Stage III values on every trading-window time node.

    ``values[n]`` holds ``t = T_gc - n * dt`` on the ``(x, y, q)`` grid;
    ``values`` may be an in-memory array or a memory map of a snapshot file.
    """

    values: np.ndarray
    grid: object
    params: object = None
    diagnostics: list = field(default_factory=list)

    @property
    def n_levels(self):
        return self.values.shape[0]

    def time(self, n):
        return self.grid.idx_Tgc * self.grid.dt - n * self.grid.dt

    def level_at_time(self, t):
        return int(round((self.grid.idx_Tgc * self.grid.dt - t) / self.grid.dt))

    def at_time(self, t):
        return self.values[self.level_at_time(t)]


def q_substep(V, grid, params, picard=PicardOptions(), return_details=False, backend="numba"):
    """Inventory substep on a full ``(x, y, q)`` field; interior (x, y) lines only."""
    b = grid.bounds
    nx, ny, nq = V.shape
    lines = V[1:-1, 1:-1, :].reshape(-1, nq)
    y_lines = np.broadcast_to(grid.y[None, 1:-1], (nx - 2, ny - 2)).reshape(-1)
    res = rosenbrock_picard(lines, y_lines, grid.dq, grid.dt, params.gamma,
                            b.psi_min, b.psi_max, picard, backend)
    U = V.copy()
    U[1:-1, 1:-1, :] = res.U.reshape(nx - 2, ny - 2, nq)
    apply_closure(U, axes=(0, 1))
    return (U, res) if return_details else U


def xy_substep(U, grid, params, curves, time_index, compensate=True, return_system=False):
    """Implicit (x, y) step at the new time level ``t = T_gc - time_index * dt``."""
    t = grid.idx_Tgc * grid.dt - time_index * grid.dt
    x = grid.x[1:-1, None]
    y = grid.y[None, 1:-1]
    system = assemble_xy_system(wind_drift(t, x, params, curves), wind_diffusion(x, params),
                                price_drift(t, y, params, curves, compensate), params.sigma,
                                params.rho, grid.dx, grid.dy, grid.dt)
    try:
        lu = system.factorize()
    except SingularSystemError as exc:
        raise SingularSystemError(str(exc), time_index=time_index, **exc.context) from exc
    W = U.copy()
    W[1:-1, 1:-1, 1:-1] = lu.solve(U[1:-1, 1:-1, 1:-1])
    apply_closure(W)
    return (W, system) if return_system else W


def jump_recurrences(V, r_plus, r_minus, axis=0):
    """Localised jump integrals by exponential recurrences along ``axis``.

    Returns ``(J_plus, J_minus)`` with ``J_plus`` zero on the last node and
    ``J_minus`` zero on the first.
    """
    Vj = np.moveaxis(np.asarray(V, dtype=float), axis, 0)
    n = Vj.shape[0]
    if n < 3:
        raise ParameterError("jump recurrences need at least 3 price nodes")
    Jp = np.zeros_like(Vj)
    Jm = np.zeros_like(Vj)
    for j in range(n - 2, -1, -1):
        Jp[j] = r_plus * Jp[j + 1] + (1.0 - r_plus) * Vj[j]
    for j in range(1, n):
        Jm[j] = r_minus * Jm[j - 1] + (1.0 - r_minus) * Vj[j]
    return np.moveaxis(Jp, 0, axis), np.moveaxis(Jm, 0, axis)


def jump_substep(W, V_n, grid, params):
    """Explicit jump update ``W + dtau * lam * (p+ J+ + p- J- - V_n)`` on interior nodes."""
    lam = params.lam
    if lam == 0:
        return W.copy()
    if grid.dt * lam > 1.0 + 1e-12:
        raise CFLError("jump step requires dt <= 1/lam", dt=grid.dt, lam=lam)
    r_plus = math.exp(-params.eta_plus * grid.dy)
    r_minus = math.exp(-params.eta_minus * grid.dy)
    Jp, Jm = jump_recurrences(V_n, r_plus, r_minus, axis=1)
    out = W.copy()
    inner = (slice(1, -1), slice(1, -1), slice(1, -1))
    out[inner] = W[inner] + grid.dt * lam * (params.p_plus * Jp[inner]
                                             + params.p_minus * Jm[inner] - V_n[inner])
    apply_closure(out)
    return out


def _allocate(grid, n_levels, storage):
    shape = (n_levels,) + grid.shape
    if storage is None:
        return np.empty(shape)
    if callable(storage):
        return storage(shape)
    raise ParameterError("storage must be None or a factory returning an array")


def solve_stage3(params, curves, grid, terminal, options=SolverOptions(), storage=None,
                 progress=None):
    """March the trading-window HJB from ``T_gc`` back to ``0``.

    Parameters
    ----------
    terminal : ndarray, shape (N_x + 1, N_q + 1) or (N_x + 1, N_y + 1, N_q + 1)
        Stage II output on ``(x, q)`` (broadcast along price) or a full field.
    storage : callable, optional
        ``storage(shape) -> array`` used to allocate the stack (e.g. a memory
        map); defaults to an in-memory array.
    progress : callable, optional
        Receives one dict of scalar diagnostics per time step.

    Returns
    -------
    ValueStack
    """
    if options.jumps and params.lam > 0 and grid.dt * params.lam > 1.0 + 1e-12:
        raise CFLError("jump step requires dt <= 1/lam", dt=grid.dt, lam=params.lam)
    run_params = params if options.jumps else replace(params, lam=0.0)
    term = np.asarray(terminal, dtype=float)
    if term.ndim == 2 and term.shape == (grid.shape[0], grid.shape[2]):
        term = np.broadcast_to(term[:, None, :], grid.shape)
    if term.shape != grid.shape:
        raise ParameterError("terminal field does not match the grid", shape=str(term.shape))
    n_steps = grid.idx_Tgc
    stack = _allocate(grid, n_steps + 1, storage)
    V = np.array(term, dtype=float)
    stack[0] = V
    diagnostics = []
    for n in range(n_steps):
        stage = "q"
        try:
            U, qres = (q_substep(V, grid, run_params, options.picard, return_details=True)
                       if options.q_step else (V, None))
            stage = "xy"
            if options.xy_step:
                W, system = xy_substep(U, grid, run_params, curves, n + 1, options.jumps,
                                       return_system=True)
            else:
                W, system = U, None
            stage = "jump"
            V = jump_substep(W, V, grid, run_params) if options.jumps else W
        except IntradayError as exc:
            exc.context.setdefault("time_index", n)
            exc.context.setdefault("substep", stage)
            raise
        if options.check_every and (n + 1) % options.check_every == 0 and not np.all(np.isfinite(V)):
            raise DivergenceError("non-finite values in Stage III", time_index=n + 1)
        stack[n + 1] = V
        diag = {"step": n + 1, "t": grid.idx_Tgc * grid.dt - (n + 1) * grid.dt,
                "max_abs_V": float(np.max(np.abs(V)))}
        if qres is not None:
            diag.update(picard_max=int(qres.iterations.max()),
                        picard_mean=float(qres.iterations.mean()),
                        picard_unconverged=int((~qres.converged).sum()))
        if system is not None:
            diag["xy_sign_violations"] = system.sign_violations()
        diagnostics.append(diag)
        if progress is not None:
            progress(diag)
    return ValueStack(stack, grid, params, diagnostics)


def regularization_sweep(params, curves, grid, terminal_fn, eps_list, options=SolverOptions()):
    """Sup-norm distance at ``t = 0`` between the plain and regularized solves.

    ``terminal_fn(params)`` must return the Stage III terminal for the given
    parameters (so the regularization reaches the earlier stages too).
    """
    eps_list = [float(e) for e in eps_list]
    if any(not 0.0 < e < 0.5 for e in eps_list):
        raise ParameterError("regularization widths must lie in (0, 1/2)", eps=str(eps_list))
    base_params = replace(params, eps_reg=None)
    base = solve_stage3(base_params, curves, grid, terminal_fn(base_params), options).values[-1]
    out = []
    for e in eps_list:
        p = replace(params, eps_reg=e)
        Ve = solve_stage3(p, curves, grid, terminal_fn(p), options).values[-1]
        out.append(float(np.max(np.abs(base - Ve))))
    return out
