"""Dynamics models whose every step respects a learned Lyapunov decrease.

Three ways to turn a free network prediction y = fhat(x) into a certified
next state:

* "convex"     closed-form scaling. Valid when V is convex (icnn or
               convex_lnn): gamma = (bVx - relu(bVx - Vy)) / Vy with
               b = beta, applied only when V(y) > beta*V(x).
* "implicit"   solve V(gamma*y) = beta*V(x) for gamma in (0, 1) with a
               safeguarded Newton iteration, any V variant. Gradients flow
               through the solution by implicit differentiation, either via
               one fixed-point sweep (default) or closed-form Jacobians.
* "projection" remove the ascending component of the step increment along
               grad V(x). Keeps grad V(x)^T (x' - x) <= 0 but does not by
               itself certify a decrease of V.
* "none"       the free prediction untouched; the unconstrained baseline.

Steps are batched over rows; the scalar case is a batch of one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .lyapunov import LyapunovNet, make_lyapunov
from .nets import Mlp

MODES = ("convex", "implicit", "projection", "none")
BACKWARD_ROUTES = ("fixed_point", "direct")

# below this value of V the prediction is already at the quadratic floor;
# scaling or root-finding there would divide by ~0 for no gain
ORIGIN_GUARD = 1e-12


class RootFindError(RuntimeError):
    """Raised when the gamma solve exhausts its budgets.

    Carries the tightest bracket found so callers can report or retry.
    """

    def __init__(self, msg, row=None, lo=None, hi=None, residual=None):
        super().__init__(msg)
        self.row = row
        self.lo = lo
        self.hi = hi
        self.residual = residual


@dataclass
class StepInfo:
    """Diagnostics for one batched step."""

    intervened: np.ndarray        # bool (B,)
    gamma: np.ndarray | None = None       # (B,), scaling modes only
    newton_iters: np.ndarray | None = None
    bisect_iters: np.ndarray | None = None
    residual: np.ndarray | None = None    # |V(gamma*y) - beta*V(x)| where solved


@dataclass
class StableModel:
    """A free predictor plus the Lyapunov machinery that constrains it."""

    mode: str
    fhat: Mlp
    lyap: LyapunovNet
    beta: float = 0.99
    rootfind_tol: float = 1e-3
    max_newton: int = 50
    max_bisect: int = 60
    integrating: bool = False
    backward_route: str = "fixed_point"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not 0.0 < self.beta < 1.0:
            raise ValueError("beta must lie in (0, 1)")
        if self.rootfind_tol <= 0:
            raise ValueError("rootfind_tol must be positive")
        if self.backward_route not in BACKWARD_ROUTES:
            raise ValueError(f"backward_route must be one of {BACKWARD_ROUTES}")
        if self.integrating and self.mode not in ("projection", "none"):
            # scaling the whole next state toward the origin has no sensible
            # increment form; only the increment-based models compose with x + delta
            raise ValueError("integrating form needs projection or none mode")
        if self.mode == "convex" and self.lyap.variant == "lnn":
            raise ValueError("convex mode needs a convex V (icnn or convex_lnn)")

    @property
    def dim(self) -> int:
        return self.lyap.dim

    def init_params(self, store: ad.ParamStore, rng: np.random.Generator) -> None:
        self.fhat.init_params(store, rng)
        self.lyap.init_params(store, rng)


def make_model(mode: str, dim: int, variant: str, hidden_f=(25, 25), hidden_v=(25, 25),
               activation: str = "tanh", beta: float = 0.99, rootfind_tol: float = 1e-3,
               integrating: bool = False, epsilon: float = 0.001, d: float = 0.1,
               backward_route: str = "fixed_point") -> StableModel:
    fhat = Mlp(layer_dims=[dim, *tuple(hidden_f), dim], activation=activation,
               prefix="f", d=d)
    lyap = make_lyapunov(variant, dim, hidden=hidden_v, epsilon=epsilon, d=d)
    return StableModel(mode=mode, fhat=fhat, lyap=lyap, beta=beta,
                       rootfind_tol=rootfind_tol, integrating=integrating,
                       backward_route=backward_route)


# ---------------------------------------------------------------------------
# gamma by closed form (convex V)

def convex_gamma(v_x, v_y, beta: float):
    """Scaling factor for rows already known to violate V(y) <= beta*V(x)."""
    bvx = ad.mul(v_x, beta)
    return ad.div(ad.sub(bvx, ad.relu(ad.sub(bvx, v_y))), v_y)


# ---------------------------------------------------------------------------
# gamma by root finding

def solve_gamma_batch(lyap: LyapunovNet, store: ad.ParamStore, Y: np.ndarray,
                      target: np.ndarray, rootfind_tol: float = 1e-3,
                      max_newton: int = 50, max_bisect: int = 60):
    """Solve V(gamma_b * Y_b) = target_b rowwise on the bracket [0, 1].

    Assumes V(Y_b) > target_b > 0 for every row, which gives
    g(0) = -target < 0 < g(1). Newton starts at gamma = 1; a proposal outside
    the open bracket becomes a bisection step, and every accepted point
    tightens the bracket using the sign of g. After max_newton Newton steps
    the iteration continues with bisection alone.

    Returns (gamma, residual, newton_iters, bisect_iters).
    """
    B = Y.shape[0]
    lo = np.zeros(B)
    hi = np.ones(B)
    gamma = np.ones(B)

    v, gv = lyap.value_and_grad(Y, store)
    g = v - target
    gp = (gv * Y).sum(axis=-1)
    n_newton = np.zeros(B, dtype=int)
    n_bisect = np.zeros(B, dtype=int)
    active = np.abs(g) > rootfind_tol

    while np.any(active):
        idx = np.flatnonzero(active)
        with np.errstate(divide="ignore", invalid="ignore"):
            newton = gamma[idx] - g[idx] / np.where(gp[idx] == 0.0, np.nan, gp[idx])
        ok = ((n_newton[idx] < max_newton) & np.isfinite(newton)
              & (lo[idx] < newton) & (newton < hi[idx]))
        stalled = ~ok & (n_bisect[idx] >= max_bisect)
        if np.any(stalled):
            b = int(idx[stalled][0])
            raise RootFindError(
                f"gamma solve stalled in row {b}: bracket [{lo[b]:.6g}, {hi[b]:.6g}], "
                f"|g| = {abs(g[b]):.3g} > {rootfind_tol:.3g}",
                row=b, lo=float(lo[b]), hi=float(hi[b]), residual=float(abs(g[b])))
        cand = np.where(ok, newton, 0.5 * (lo[idx] + hi[idx]))
        n_newton[idx[ok]] += 1
        n_bisect[idx[~ok]] += 1

        P = cand[:, None] * Y[idx]
        v_c, gv_c = lyap.value_and_grad(P, store)
        g_c = v_c - target[idx]
        gp_c = (gv_c * Y[idx]).sum(axis=-1)

        gamma[idx] = cand
        g[idx] = g_c
        gp[idx] = gp_c
        above = g_c > 0.0
        hi[idx[above]] = cand[above]
        lo[idx[~above]] = cand[~above]
        active[idx] = np.abs(g_c) > rootfind_tol

    return gamma, np.abs(g), n_newton, n_bisect


def solve_gamma(lyap: LyapunovNet, store: ad.ParamStore, y: np.ndarray, target: float,
                rootfind_tol: float = 1e-3, max_newton: int = 50, max_bisect: int = 60):
    """Scalar form of solve_gamma_batch: one state, one target."""
    y = np.asarray(y, dtype=np.float64)
    gamma, res, nn, nb = solve_gamma_batch(
        lyap, store, y[None, :], np.array([float(target)]),
        rootfind_tol=rootfind_tol, max_newton=max_newton, max_bisect=max_bisect)
    return float(gamma[0]), {"residual": float(res[0]),
                             "newton_iters": int(nn[0]), "bisect_iters": int(nb[0])}


# ---------------------------------------------------------------------------
# raw (inference) steps, batched over rows

def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None, :], True
    return x, False


def certified_gamma_raw(lyap: LyapunovNet, store: ad.ParamStore, y, v_x, v_y,
                        beta: float, mode: str, rootfind_tol: float = 1e-3,
                        max_newton: int = 50, max_bisect: int = 60):
    """Row-wise scaling factors, 1.0 where V(y) <= beta*V(x) already holds.

    Rows whose prediction sits below the origin guard are left alone even if
    they fail the decrease test; they are within rounding of the fixed point.
    """
    B = y.shape[0]
    target = beta * v_x
    mask = (v_y > target) & (v_y >= ORIGIN_GUARD)
    gamma = np.ones(B)
    residual = np.zeros(B)
    n_newton = np.zeros(B, dtype=int)
    n_bisect = np.zeros(B, dtype=int)
    idx = np.flatnonzero(mask)
    if idx.size:
        solvable = target[idx] > 0.0
        # V(x) = 0 only at x = 0; the certified next state is the origin
        gamma[idx[~solvable]] = 0.0
        rows = idx[solvable]
        if rows.size:
            if mode == "convex":
                gamma[rows] = convex_gamma(v_x[rows], v_y[rows], beta)
            else:
                g, res, nn, nb = solve_gamma_batch(
                    lyap, store, y[rows], target[rows], rootfind_tol=rootfind_tol,
                    max_newton=max_newton, max_bisect=max_bisect)
                gamma[rows] = g
                residual[rows] = res
                n_newton[rows] = nn
                n_bisect[rows] = nb
    return gamma, mask, residual, n_newton, n_bisect


def model_step(model: StableModel, store: ad.ParamStore, x, want_info: bool = False):
    """One certified step for a batch of states (or a single state)."""
    X, single = _as_batch(x)
    y = model.fhat.forward(X, store)

    if model.mode == "none":
        out = X + y if model.integrating else y
        info = StepInfo(intervened=np.zeros(X.shape[0], dtype=bool))
    elif model.mode == "projection":
        out, intervened = _projection_raw(model, store, X, y)
        info = StepInfo(intervened=intervened)
    else:
        v_x = model.lyap.value(X, store)
        v_y = model.lyap.value(y, store)
        gamma, mask, residual, n_newton, n_bisect = certified_gamma_raw(
            model.lyap, store, y, v_x, v_y, model.beta, model.mode,
            model.rootfind_tol, model.max_newton, model.max_bisect)
        idx = np.flatnonzero(mask)
        if idx.size:
            out = y.copy()
            out[idx] = gamma[idx, None] * y[idx]
        else:
            out = y
        info = StepInfo(intervened=mask, gamma=gamma, residual=residual,
                        newton_iters=n_newton, bisect_iters=n_bisect)

    if single:
        out = out[0]
    return (out, info) if want_info else out


def _projection_raw(model, store, X, y):
    delta = y if model.integrating else y - X
    gv = model.lyap.grad(X, store)
    dot = (gv * delta).sum(axis=-1)
    mask = dot > 0.0
    delta_p = delta.copy()
    if np.any(mask):
        denom = (gv[mask] * gv[mask]).sum(axis=-1)
        delta_p[mask] = delta[mask] - (dot[mask] / denom)[:, None] * gv[mask]
    return X + delta_p, mask


def rollout(model: StableModel, store: ad.ParamStore, x0, steps: int,
            record_v: bool = False):
    """Iterate model_step. x0 may be (n,) or (B, n).

    Returns trajectory of shape (steps+1, n) or (B, steps+1, n); with
    record_v also the V values along it, shape (steps+1,) or (B, steps+1).
    """
    X, single = _as_batch(x0)
    B, n = X.shape
    traj = np.empty((B, steps + 1, n))
    traj[:, 0] = X
    vs = np.empty((B, steps + 1)) if record_v else None
    if record_v:
        vs[:, 0] = model.lyap.value(X, store)
    cur = X
    for t in range(steps):
        cur = model_step(model, store, cur)
        traj[:, t + 1] = cur
        if record_v:
            vs[:, t + 1] = model.lyap.value(cur, store)
    if single:
        traj = traj[0]
        if record_v:
            vs = vs[0]
    return (traj, vs) if record_v else traj


# ---------------------------------------------------------------------------
# recorded (training) steps

def step_expr(model: StableModel, store: ad.ParamStore, tape: ad.Tape, X):
    """Build the certified step as a tape expression for a raw input batch.

    The intervention pattern is decided on raw values and then frozen into
    the expression; gradients are exact on each side of the switching
    surface. Rows left alone pass fhat through bit-exactly.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("step_expr expects a (batch, dim) input")
    y = model.fhat.forward(X, store, tape)

    if model.mode == "none":
        return ad.add(X, y) if model.integrating else y
    if model.mode == "projection":
        return _projection_expr(model, store, tape, X, y)

    v_x = model.lyap.value(X, store, tape)
    gamma = certified_gamma_expr(
        model.lyap, store, tape, y, v_x, model.beta, model.mode,
        model.rootfind_tol, model.max_newton, model.max_bisect,
        model.backward_route)
    if gamma is None:
        return y
    return ad.scale_rows(y, gamma)


def certified_gamma_expr(lyap: LyapunovNet, store: ad.ParamStore, tape: ad.Tape,
                         y, v_x, beta: float, mode: str, rootfind_tol: float = 1e-3,
                         max_newton: int = 50, max_bisect: int = 60,
                         backward_route: str = "fixed_point"):
    """Recorded (B,) scaling factors, or None when no row intervenes.

    Which rows intervene is decided on raw values; non-intervening rows carry
    an exact 1.0.
    """
    v_y = lyap.value(y, store, tape)
    B = ad.value_of(y).shape[0]
    vy_raw = ad.value_of(v_y)
    mask = (vy_raw > beta * ad.value_of(v_x)) & (vy_raw >= ORIGIN_GUARD)
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        return None
    if mode != "convex" and np.any(beta * ad.value_of(v_x)[idx] <= 0.0):
        # the root sits at gamma = 0 where grad V vanishes, so the implicit
        # derivative divides by zero; the closed form has no such problem
        raise ValueError("intervention at the origin; gamma gradient undefined there")

    y_i = ad.gather_rows(y, idx)
    vx_i = ad.gather_rows(v_x, idx)
    if mode == "convex":
        gam_i = convex_gamma(vx_i, ad.gather_rows(v_y, idx), beta)
    else:
        gam_i = _implicit_gamma_rows(lyap, store, tape, y_i, vx_i, beta,
                                     rootfind_tol, max_newton, max_bisect,
                                     backward_route)
    return ad.scatter_rows(gam_i, idx, B, fill=1.0)


def _projection_expr(model, store, tape, X, y):
    B = X.shape[0]
    delta = y if model.integrating else ad.sub(y, X)
    gv = model.lyap.grad(X, store, tape)
    dot = ad.rowdot(gv, delta)
    idx = np.flatnonzero(ad.value_of(dot) > 0.0)
    if idx.size == 0:
        return ad.add(X, delta)
    gv_i = ad.gather_rows(gv, idx)
    coef_i = ad.div(ad.gather_rows(dot, idx), ad.rowdot(gv_i, gv_i))
    coef = ad.scatter_rows(coef_i, idx, B, fill=0.0)
    return ad.add(X, ad.sub(delta, ad.scale_rows(gv, coef)))


def _implicit_gamma_rows(lyap, store, tape, y_i, vx_i, beta, rootfind_tol,
                         max_newton, max_bisect, backward_route):
    """gamma as a differentiable quantity for rows that need the solve."""
    Y = ad.value_of(y_i)
    target = beta * ad.value_of(vx_i)
    gamma, _, _, _ = solve_gamma_batch(
        lyap, store, Y, target, rootfind_tol=rootfind_tol,
        max_newton=max_newton, max_bisect=max_bisect)

    if backward_route == "fixed_point":
        # one more Newton map F(g) = g - (V(g y) - beta Vx)/(grad V(g y)^T y),
        # with the incoming gamma held constant; at the root dF/dgamma = 0, so
        # differentiating this single sweep gives the implicit derivative
        p = ad.scale_rows(y_i, gamma)
        v_p, gv_p = lyap.value_and_grad(p, store, tape)
        g = ad.sub(v_p, ad.mul(vx_i, beta))
        gp = ad.rowdot(gv_p, y_i)
        gamma_expr = ad.sub(gamma, ad.div(g, gp))
        return ad.override_value(gamma_expr, gamma)

    return _direct_gamma_node(lyap, store, tape, y_i, vx_i, beta, gamma)


def _direct_gamma_node(lyap, store, tape, y_i, vx_i, beta, gamma):
    """Custom node applying the closed-form implicit derivative.

    With p = gamma*y and the root equation V(p) - beta*V(x) = 0:
      dgamma/dy      = -gamma * grad V(p) / (grad V(p)^T y)
      dgamma/dV(x)   =  beta / (grad V(p)^T y)
      dgamma/dtheta_V = -(dV(p)/dtheta - beta dV(x)/dtheta) / (grad V(p)^T y),
    where the V(x) part arrives through the recorded vx_i expression and the
    explicit dV(p)/dtheta term is replayed on a side tape inside backward.
    """
    Y = ad.value_of(y_i)
    P = gamma[:, None] * Y
    gv_p = lyap.grad(P, store)
    denom = (gv_p * Y).sum(axis=-1)

    out = ad.Var(gamma, tape)

    def backward(gbar):
        w = gbar / denom            # (rows,)
        ad._accum(y_i, (-gamma * w)[:, None] * gv_p)
        ad._accum(vx_i, beta * w)
        side = ad.Tape()
        v_p = lyap.value(P, store, side)
        root = ad.vsum(ad.mul(v_p, -w))
        side.backward(root)

    out._backward = backward
    return tape._register(out)
