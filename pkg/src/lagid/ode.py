"""Numerical integration with exact gradients through the solver steps.

The adaptive solver is Tsitouras' 5(4) embedded Runge-Kutta pair with a
proportional-integral step-size controller. Integration happens in two
passes:

1. ``adaptive_grid`` runs the step-size controller and returns the accepted
   step grid (start times and step sizes) plus a status code. This pass is
   not differentiated.
2. ``replay`` re-integrates over that frozen grid and evaluates the method's
   quartic dense-output interpolant at the requested times. Differentiating
   the replay gives discretize-then-optimize gradients: the exact derivative
   of the computed trajectory with step sizes frozen from the forward pass.

Both passes are jittable; pass the right-hand side as a
``jax.tree_util.Partial`` over a module-level function to get stable
compilation caching across calls.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import partial
from typing import Callable, NamedTuple

import jax
import jax.numpy as jnp
import numpy as np

from .errors import ConfigError, ContractError, IntegrationError

# Tsitouras (2011) 5(4) coefficients. The 5th-order weights are the last
# A-row (FSAL); ERR holds b - b_hat for the embedded 4th-order estimate.
_C = np.array([0.0, 0.161, 0.327, 0.9, 0.9800255409045097, 1.0, 1.0])
_A = np.zeros((7, 7))
_A[1, 0] = 0.161
_A[2, :2] = [-0.008480655492356989, 0.335480655492357]
_A[3, :3] = [2.8971530571054935, -6.359448489975075, 4.3622954328695815]
_A[4, :4] = [5.325864828439257, -11.748883564062828, 7.4955393428898365,
             -0.09249506636175525]
_A[5, :5] = [5.86145544294642, -12.92096931784711, 8.159367898576159,
             -0.071584973281401, -0.028269050394068383]
_A[6, :6] = [0.09646076681806523, 0.01, 0.4798896504144996, 1.379008574103742,
             -3.290069515436081, 2.324710524099774]
_B = _A[6].copy()
_ERR = np.array([-1.780011052225771e-3, -8.164344596567469e-4,
                 7.880878010261995e-3, -1.447110071732629e-1,
                 5.823571654525552e-1, -4.580821059291869e-1,
                 1.5151515151515152e-2])

STATUS_OK = 0
STATUS_MIN_STEP = 1
STATUS_NON_FINITE = 2
STATUS_CAPACITY = 3
STATUS_MAX_STEPS = 4

_STATUS_MESSAGES = {
    STATUS_MIN_STEP: "step size underflow",
    STATUS_NON_FINITE: "non-finite right-hand side",
    STATUS_CAPACITY: "accepted-step buffer exhausted",
    STATUS_MAX_STEPS: "maximum step count exceeded",
}


@dataclass(frozen=True)
class SolverConfig:
    """Adaptive solver tolerances and step-control constants.

    The error estimate of an accepted step satisfies the mixed tolerance
    ``atol + rtol * |y|`` in the RMS sense. ``pi_alpha``/``pi_beta`` are the
    proportional and integral exponents of the step-size controller.
    """

    rtol: float = 1e-3
    atol: float = 1e-6
    initial_step: float | None = None
    max_steps: int = 100_000
    min_step: float = 1e-12
    safety: float = 0.9
    pi_alpha: float = 0.17
    pi_beta: float = 0.04
    factor_min: float = 0.2
    factor_max: float = 10.0

    def __post_init__(self):
        if self.rtol <= 0 or self.atol <= 0:
            raise ConfigError("rtol and atol must be positive")
        if self.max_steps <= 0:
            raise ConfigError("max_steps must be positive")

    def numbers(self) -> jnp.ndarray:
        h0 = -1.0 if self.initial_step is None else float(self.initial_step)
        return jnp.array([self.rtol, self.atol, h0, self.min_step, self.safety,
                          self.pi_alpha, self.pi_beta, self.factor_min,
                          self.factor_max])


class StepGrid(NamedTuple):
    """Accepted steps of one adaptive solve (padded to fixed capacity)."""

    ts: jnp.ndarray       # (capacity,) start time of each accepted step
    hs: jnp.ndarray       # (capacity,) step sizes, 0 past `count`
    count: jnp.ndarray    # scalar int, number of accepted steps
    status: jnp.ndarray   # scalar int, STATUS_* code
    t_reached: jnp.ndarray


def _stages(f, t, y, h, k1):
    """One Tsit5 step from (t, y) with cached first stage k1 (FSAL)."""
    ks = [k1]
    for i in range(1, 7):
        yi = y + h * sum(_A[i, j] * ks[j] for j in range(i))
        ks.append(f(t + _C[i] * h, yi))
    y_new = y + h * sum(_B[j] * ks[j] for j in range(7))
    err = h * sum(_ERR[j] * ks[j] for j in range(7))
    return y_new, err, jnp.stack(ks)


def _error_norm(err, y0, y1, atol, rtol):
    scale = atol + rtol * jnp.maximum(jnp.abs(y0), jnp.abs(y1))
    return jnp.sqrt(jnp.mean((err / scale) ** 2))


def _initial_step(f, t0, y0, f0, t1, atol, rtol):
    """Hairer's starting-step heuristic (one extra rhs evaluation)."""
    scale = atol + rtol * jnp.abs(y0)
    d0 = jnp.sqrt(jnp.mean((y0 / scale) ** 2))
    d1 = jnp.sqrt(jnp.mean((f0 / scale) ** 2))
    h0 = jnp.where((d0 < 1e-5) | (d1 < 1e-5), 1e-6, 0.01 * d0 / d1)
    h0 = jnp.minimum(h0, jnp.abs(t1 - t0))
    f1 = f(t0 + h0, y0 + h0 * f0)
    d2 = jnp.sqrt(jnp.mean(((f1 - f0) / scale) ** 2)) / h0
    dm = jnp.maximum(d1, d2)
    h1 = jnp.where(dm <= 1e-15, jnp.maximum(1e-6, h0 * 1e-3),
                   (0.01 / dm) ** 0.2)
    return jnp.minimum(jnp.minimum(100.0 * h0, h1), jnp.abs(t1 - t0))


def grid_core(f, y0, t0, t1, nums, capacity, max_steps):
    """Unjitted adaptive-stepping core (compose under jit/vmap as needed)."""
    rtol, atol, h_init, min_step, safety = nums[0], nums[1], nums[2], nums[3], nums[4]
    alpha, beta, fac_min, fac_max = nums[5], nums[6], nums[7], nums[8]

    f0 = f(t0, y0)
    h_auto = _initial_step(f, t0, y0, f0, t1, atol, rtol)
    h0 = jnp.where(h_init > 0, h_init, h_auto)
    h0 = jnp.minimum(h0, t1 - t0)

    ts = jnp.full((capacity,), jnp.inf)
    hs = jnp.zeros((capacity,))

    # carry: t, y, h, k1, err_prev, n_acc, n_steps, status, running, ts, hs
    def cond(c):
        return c[8]

    def body(c):
        t, y, h, k1, err_prev, n_acc, n_steps, status, _, ts, hs = c
        h_eff = jnp.minimum(h, t1 - t)
        y_new, err, ks = _stages(f, t, y, h_eff, k1)
        enorm = _error_norm(err, y, y_new, atol, rtol)
        finite = jnp.isfinite(enorm) & jnp.all(jnp.isfinite(y_new))
        accept = finite & (enorm <= 1.0)

        ts = jnp.where(accept, ts.at[n_acc].set(t), ts)
        hs = jnp.where(accept, hs.at[n_acc].set(h_eff), hs)
        t_next = jnp.where(accept, t + h_eff, t)
        y_next = jnp.where(accept, y_new, y)
        k1_next = jnp.where(accept, ks[6], k1)
        n_acc_next = n_acc + jnp.where(accept, 1, 0)

        e = jnp.maximum(jnp.where(finite, enorm, 10.0), 1e-10)
        fac = safety * e ** (-alpha) * err_prev ** beta
        fac = jnp.clip(fac, fac_min, jnp.where(accept, fac_max, 1.0))
        h_next = h_eff * fac
        err_prev_next = jnp.where(accept, jnp.maximum(e, 1e-4), err_prev)

        done = t_next >= t1 - 1e-14 * (t1 - t0)
        underflow_status = jnp.where(finite, STATUS_MIN_STEP, STATUS_NON_FINITE)
        status_next = jnp.where(
            done, STATUS_OK,
            jnp.where(h_next < min_step, underflow_status,
                      jnp.where(n_acc_next >= capacity, STATUS_CAPACITY,
                                jnp.where(n_steps + 1 >= max_steps,
                                          STATUS_MAX_STEPS, status))))
        running = ~done & (status_next == STATUS_OK)
        return (t_next, y_next, h_next, k1_next, err_prev_next, n_acc_next,
                n_steps + 1, status_next, running, ts, hs)

    init = (t0, y0, h0, f0, jnp.array(1e-4), jnp.array(0), jnp.array(0),
            jnp.array(STATUS_OK), jnp.array(True), ts, hs)
    t, y, _, _, _, n_acc, _, status, _, ts, hs = jax.lax.while_loop(cond, body, init)
    return StepGrid(ts=ts, hs=hs, count=n_acc, status=status, t_reached=t), y


_grid_impl = partial(jax.jit, static_argnames=("capacity", "max_steps"))(grid_core)


def _interp_weights(theta):
    """Dense-output weights b_i(theta) of the Tsit5 interpolant."""
    t = theta
    b1 = (-1.0530884977290216 * t * (t - 1.3299890189751412)
          * (t * t - 1.4364028541716351 * t + 0.7139816917074209))
    b2 = 0.1017 * t * t * (t * t - 2.1966568338249754 * t + 1.2949852507374631)
    b3 = (2.490627285651252793 * t * t
          * (t * t - 2.38535645472061657 * t + 1.57803468208092486))
    b4 = (-16.54810288924490272 * (t - 1.21712927295533244)
          * (t - 0.61620406037800089) * t * t)
    b5 = (47.37952196281928122 * (t - 1.203071208372362603)
          * (t - 0.658047292653547382) * t * t)
    b6 = (-34.87065786149660974 * (t - 1.2) * (t - 2.0 / 3.0) * t * t)
    b7 = 2.5 * (t - 1.0) * (t - 0.6) * t * t
    return jnp.stack([b1, b2, b3, b4, b5, b6, b7])


def replay_core(f, y0, ts, hs, t0, save_ts):
    """Re-integrate over a frozen grid; interpolate at save_ts.

    Zero-length (padding) steps are identity maps, so gradients flow
    correctly through the padded scan. The step body is rematerialized in
    the backward pass, so memory stays linear in the step count instead of
    scaling with the right-hand side's internal graph.
    """

    @jax.checkpoint
    def step(carry, th):
        t, h = th
        y, k1 = carry
        y_new, _, ks = _stages(f, t, y, h, k1)
        return (y_new, ks[6]), (y, ks)

    k1 = f(t0, y0)
    ts_safe = jnp.where(jnp.isinf(ts), 0.0, ts)
    _, (y_starts, ks_all) = jax.lax.scan(step, (y0, k1), (ts_safe, hs))

    idx = jnp.clip(jnp.searchsorted(ts, save_ts, side="right") - 1, 0, ts.shape[0] - 1)
    h_sel = hs[idx]
    theta = jnp.where(h_sel > 0, (save_ts - ts_safe[idx]) / jnp.where(h_sel > 0, h_sel, 1.0), 0.0)
    w = _interp_weights(theta)                        # (7, m)
    # (m, n): y_start + h * sum_i w_i(theta) k_i
    ys = y_starts[idx] + h_sel[:, None] * jnp.einsum("im,min->mn", w, ks_all[idx])
    return ys


_replay_impl = jax.jit(replay_core)


def _as_partial(f) -> jax.tree_util.Partial:
    if isinstance(f, jax.tree_util.Partial):
        return f
    return jax.tree_util.Partial(f)


def adaptive_grid(rhs: Callable, y0, t_span, config: SolverConfig,
                  capacity: int = 4096) -> tuple[StepGrid, jnp.ndarray]:
    """Run the adaptive controller; return the accepted step grid and y(t1)."""
    t0, t1 = float(t_span[0]), float(t_span[1])
    if not t1 > t0:
        raise ContractError("t_span must satisfy t1 > t0")
    y0 = jnp.asarray(y0, dtype=jnp.float64)
    return _grid_impl(_as_partial(rhs), y0, jnp.float64(t0), jnp.float64(t1),
                      config.numbers(), capacity, config.max_steps)


def replay(rhs: Callable, y0, grid: StepGrid, save_ts) -> jnp.ndarray:
    """Differentiable re-integration over a frozen grid with dense output."""
    t0 = jnp.where(grid.count > 0, grid.ts[0], grid.t_reached)
    return _replay_impl(_as_partial(rhs), jnp.asarray(y0, dtype=jnp.float64),
                        grid.ts, grid.hs, t0, jnp.asarray(save_ts, dtype=jnp.float64))


def solve(rhs: Callable, y0, t_span, config: SolverConfig = SolverConfig(),
          save_at=None, capacity: int = 4096) -> np.ndarray:
    """Integrate ``dy/dt = rhs(t, y)`` and return values at `save_at`.

    Deterministic for identical inputs. Raises IntegrationError (carrying the
    failure time) on step underflow, non-finite right-hand sides, or step
    budget exhaustion.
    """
    t0, t1 = float(t_span[0]), float(t_span[1])
    if save_at is None:
        save_at = np.array([t1])
    save_at = np.asarray(save_at, dtype=np.float64)
    if save_at.ndim != 1 or save_at.size == 0:
        raise ContractError("save_at must be a non-empty 1-d time grid")
    if save_at.min() < t0 - 1e-12 or save_at.max() > t1 + 1e-12:
        raise ContractError("save_at must lie within t_span")
    grid, _ = adaptive_grid(rhs, y0, (t0, t1), config, capacity)
    status = int(grid.status)
    if status != STATUS_OK:
        raise IntegrationError(
            f"integration failed at t={float(grid.t_reached):.6g}: "
            f"{_STATUS_MESSAGES.get(status, 'unknown failure')}",
            t_failed=float(grid.t_reached))
    return np.asarray(replay(rhs, y0, grid, save_at))


def solve_with_gradients(rhs: Callable, theta, y0, t_span,
                         config: SolverConfig = SolverConfig(), save_at=None,
                         capacity: int = 4096):
    """Solve ``dy/dt = rhs(theta, t, y)`` and return (values, pullback).

    The pullback maps a cotangent on the saved values to gradients with
    respect to (theta, y0). Step sizes are frozen from the forward pass, so
    the gradient is the exact derivative of the replayed trajectory.
    """
    t0, t1 = float(t_span[0]), float(t_span[1])
    if save_at is None:
        save_at = np.array([t1])
    save_ts = jnp.asarray(save_at, dtype=jnp.float64)
    y0 = jnp.asarray(y0, dtype=jnp.float64)
    grid, _ = adaptive_grid(jax.tree_util.Partial(rhs, theta), y0, (t0, t1),
                            config, capacity)
    status = int(grid.status)
    if status != STATUS_OK:
        raise IntegrationError(
            f"integration failed at t={float(grid.t_reached):.6g}: "
            f"{_STATUS_MESSAGES.get(status, 'unknown failure')}",
            t_failed=float(grid.t_reached))

    def run(th, y):
        return replay(jax.tree_util.Partial(rhs, th), y, grid, save_ts)

    values, vjp = jax.vjp(run, theta, y0)
    return np.asarray(values), vjp


@partial(jax.jit, static_argnames=("n_steps",))
def _rk4_impl(f, y0, t0, dt, n_steps):
    def step(y, j):
        t = t0 + j * dt
        k1 = f(t, y)
        k2 = f(t + 0.5 * dt, y + 0.5 * dt * k1)
        k3 = f(t + 0.5 * dt, y + 0.5 * dt * k2)
        k4 = f(t + dt, y + dt * k3)
        y_new = y + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        return y_new, y_new

    _, ys = jax.lax.scan(step, y0, jnp.arange(n_steps))
    return ys


def rk4_fixed(rhs: Callable, y0, t0: float, dt: float, n_steps: int) -> np.ndarray:
    """Classical fixed-step RK4; returns states y_0..y_n (n_steps+1 rows)."""
    if dt <= 0:
        raise ContractError("dt must be positive")
    y0 = jnp.asarray(y0, dtype=jnp.float64)
    ys = _rk4_impl(_as_partial(rhs), y0, jnp.float64(t0), jnp.float64(dt), int(n_steps))
    out = np.concatenate([np.asarray(y0)[None], np.asarray(ys)], axis=0)
    if not np.all(np.isfinite(out)):
        bad = int(np.argmax(~np.all(np.isfinite(out), axis=tuple(range(1, out.ndim)))))
        raise IntegrationError(f"non-finite state at step {bad}", t_failed=t0 + bad * dt)
    return out


def cumtrapz_core(values, dt):
    """Unchecked cumulative trapezoid (jit-friendly); node 0 holds 0."""
    inc = 0.5 * dt * (values[1:] + values[:-1])
    zero = jnp.zeros_like(values[:1])
    return jnp.concatenate([zero, jnp.cumsum(inc, axis=0)], axis=0)


def trapezoid(values, dt: float):
    """Cumulative trapezoid integral on a uniform grid; node 0 holds 0."""
    values = jnp.asarray(values, dtype=jnp.float64)
    if values.shape[0] < 2:
        raise ContractError("trapezoid needs at least 2 samples")
    if dt <= 0:
        raise ContractError("dt must be positive")
    return cumtrapz_core(values, dt)


@dataclass(frozen=True)
class InterpolatedSignal:
    """Piecewise-linear signal on a uniform time grid.

    Evaluation reproduces the samples exactly at the grid points and
    extrapolates with the boundary values outside the grid.
    """

    t0: float
    dt: float
    values: np.ndarray  # (m,) or (m, p)

    def __post_init__(self):
        if self.dt <= 0:
            raise ConfigError("dt must be positive")
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape[0] < 1:
            raise ConfigError("signal needs at least one sample")
        object.__setattr__(self, "values", v)

    def __call__(self, t):
        return np.asarray(interp_signal(jnp.asarray(self.values), self.t0,
                                        self.dt, jnp.asarray(t)))


def interp_signal(values, t0, dt, t):
    """Jit-friendly linear interpolation with constant extrapolation."""
    m = values.shape[0]
    if m == 1:
        return values[0]
    s = (t - t0) / dt
    idx = jnp.clip(jnp.floor(s).astype(jnp.int32), 0, m - 2)
    frac = jnp.clip(s - idx, 0.0, 1.0)
    return (1.0 - frac) * values[idx] + frac * values[idx + 1]


def measured_order(rhs, y_exact: Callable, y0, t0: float, h: float) -> float:
    """Observed one-step convergence order of the Tsit5 step (test utility)."""
    f = _as_partial(rhs)
    errs = []
    for hh in (h, h / 2):
        k1 = f(jnp.float64(t0), jnp.asarray(y0, dtype=jnp.float64))
        y1, _, _ = _stages(f, jnp.float64(t0), jnp.asarray(y0, dtype=jnp.float64),
                           jnp.float64(hh), k1)
        errs.append(float(jnp.max(jnp.abs(y1 - y_exact(t0 + hh)))))
    return math.log2(errs[0] / errs[1])
