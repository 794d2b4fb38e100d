"""Loss functions and the two-stage training loop.

Four loss kinds are available:

* ``traj``   -- mean squared error between measured and rolled-out states;
  rollouts run through the adaptive solver and are differentiated with step
  sizes frozen from the forward pass.
* ``torque`` -- mean squared inverse-dynamics residual; needs ground-truth
  accelerations and is a simulation-only diagnostic.
* ``prop``   -- the integrated momentum-balance loss plus lambda_k times the
  trajectory loss, one fused gradient. The balance residuals are computed
  from measured states only (no rollout, no accelerations).
* ``aph``    -- RMS penalty on the learned force correction plus lambda_k
  times the trajectory loss.

Reported losses are means over (segments x steps x dims) so that lambda and
learning rates are horizon-independent; minimizers match the plain sums.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from functools import partial
from typing import Callable

import jax
import jax.numpy as jnp
import numpy as np

from . import dynamics, ode
from .benchmarks import Dataset, Trajectory
from .dynamics import Mechanics
from .errors import (CapabilityError, ConfigError, ContractError,
                     NumericError, TrainingError)
from .models import Dynamics, ParameterVector

# ---------------------------------------------------------------------------
# segment batches


@dataclass(frozen=True)
class SegmentBatch:
    """Fixed-horizon training windows cut from a dataset."""

    xs: np.ndarray            # (S, H+1, 2 n_d)
    us: np.ndarray            # (S, H+1, p)
    dt: float
    qdds: np.ndarray | None = None   # (S, H+1, n_d) ground-truth accelerations
    taus: np.ndarray | None = None   # (S, H+1, n_d) applied generalized force

    @property
    def n_segments(self) -> int:
        return self.xs.shape[0]

    @property
    def horizon(self) -> int:
        return self.xs.shape[1] - 1

    @property
    def n_d(self) -> int:
        return self.xs.shape[2] // 2


def build_segments(dataset: Dataset, horizon_steps: int) -> SegmentBatch:
    """Cut every trajectory into non-overlapping windows of the horizon."""
    if horizon_steps < 1:
        raise ContractError("horizon must be at least one step")
    xs, us = [], []
    for tr in dataset.trajectories:
        n_win = (tr.n_samples - 1) // horizon_steps
        for w in range(n_win):
            lo = w * horizon_steps
            xs.append(tr.xs[lo:lo + horizon_steps + 1])
            us.append(tr.us[lo:lo + horizon_steps + 1])
    if not xs:
        raise ContractError("dataset trajectories are shorter than the horizon")
    return SegmentBatch(np.stack(xs), np.stack(us), dataset.dt)


def attach_ground_truth(batch: SegmentBatch, mech: Mechanics) -> SegmentBatch:
    """Add exact accelerations and applied forces from a reference model."""
    n = batch.n_d
    flat_x = batch.xs.reshape(-1, 2 * n)
    flat_u = batch.us.reshape(-1, batch.us.shape[-1])

    def one(x, u):
        q, qd = x[:n], x[n:]
        qdd = dynamics.accel(mech, jnp.zeros(0), q, qd, u)
        tau = mech.tau_u(jnp.zeros(0), q, qd, u)
        return qdd, tau

    qdds, taus = jax.vmap(one)(jnp.asarray(flat_x), jnp.asarray(flat_u))
    shape = batch.xs.shape[:2] + (n,)
    return replace(batch, qdds=np.asarray(qdds).reshape(shape),
                   taus=np.asarray(taus).reshape(shape))


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class LossConfig:
    kind: str = "prop"
    lambda0: float = 1.0
    lambda_lr: float = 1.0
    lambda_min: float = 0.0
    lambda_max: float = 1e6
    balance_window: int = 1   # samples per momentum-balance window

    def __post_init__(self):
        if self.kind not in ("traj", "aph", "torque", "prop"):
            raise ConfigError(f"unknown loss kind '{self.kind}'")
        if self.lambda0 < 0:
            raise ConfigError("lambda0 must be non-negative")


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    batch_size: int | None = None   # None = full batch

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ConfigError("Adam betas must lie in (0, 1)")


@dataclass(frozen=True)
class Stage:
    epochs: int
    horizon_steps: int | None = None
    horizon_seconds: float | None = None

    def __post_init__(self):
        if self.epochs <= 0:
            raise ConfigError("stage epochs must be positive")
        if (self.horizon_steps is None) == (self.horizon_seconds is None):
            raise ConfigError("give exactly one of horizon_steps / horizon_seconds")

    def steps(self, dt: float) -> int:
        if self.horizon_steps is not None:
            return int(self.horizon_steps)
        return max(1, int(round(self.horizon_seconds / dt)))


@dataclass(frozen=True)
class Curriculum:
    stage1: Stage
    stage2: Stage


def default_curriculum(system: str, profile: str = "smoke") -> Curriculum:
    """Short-horizon warm-up followed by long-horizon refinement."""
    long_h = 2.0 if system == "nmsd" else 1.0
    if profile == "smoke":
        epochs = (400, 150) if system == "nmsd" else (600, 250)
    elif profile == "paper-scale":
        epochs = (5000, 1000) if system == "nmsd" else (50000, 10000)
    else:
        raise ConfigError(f"unknown profile '{profile}'")
    return Curriculum(Stage(epochs[0], horizon_steps=2),
                      Stage(epochs[1], horizon_seconds=long_h))


# ---------------------------------------------------------------------------
# jitted loss cores


def _segment_rhs(model_rhs, dt, theta, u_samples, t, y):
    u = ode.interp_signal(u_samples, 0.0, dt, t)
    return model_rhs(theta, t, y, u)


@partial(jax.jit, static_argnames=("capacity",))
def _batch_grids(model_rhs, theta, y0s, us, dt, t1, nums, capacity):
    def one(y0, u_samples):
        f = jax.tree_util.Partial(_segment_rhs, model_rhs, dt, theta, u_samples)
        grid, _ = ode.grid_core(f, y0, jnp.float64(0.0), t1, nums, capacity, 100_000)
        return grid
    return jax.vmap(one)(y0s, us)


def _traj_sse(model_rhs, theta, xs, us, dt, grids, save_ts):
    """Masked sum of squared rollout errors and the sample count."""

    def one(x_seg, u_seg, grid):
        f = jax.tree_util.Partial(_segment_rhs, model_rhs, dt, theta, u_seg)
        ys = ode.replay_core(f, x_seg[0], grid.ts, grid.hs, jnp.float64(0.0), save_ts)
        valid = save_ts <= grid.t_reached + 1e-12
        err = (ys - x_seg[1:]) * valid[:, None]
        return jnp.sum(err ** 2), jnp.sum(valid) * ys.shape[1]

    sses, counts = jax.vmap(one)(xs, us, grids)
    total = jnp.sum(counts)
    return jnp.sum(sses) / jnp.maximum(total, 1.0), total


def _balance_residuals(mech, theta, xs, us, dt, window):
    """Momentum-balance residuals Zbar - Abar for one segment (T samples)."""
    n = mech.n_d

    def per_sample(x, u):
        q, qd = x[:n], x[n:]
        p = dynamics.momentum(mech, theta, q, qd)
        g = dynamics.lagrangian_q_gradient(mech, theta, q, qd) \
            + mech.tau_nc(theta, q, qd)
        tau = mech.tau_u(theta, q, qd, u)
        return p, g, tau

    p, g, tau = jax.vmap(per_sample)(xs, us)
    cg = ode.cumtrapz_core(g, dt)
    ct = ode.cumtrapz_core(tau, dt)
    n_win = (xs.shape[0] - 1) // window
    idx = window * jnp.arange(n_win + 1)
    a_bar = p[idx[1:]] - p[idx[:-1]] - (cg[idx[1:]] - cg[idx[:-1]])
    z_bar = ct[idx[1:]] - ct[idx[:-1]]
    return z_bar - a_bar


def _itau_mean(mech, theta, xs, us, dt, window):
    res = jax.vmap(lambda x, u: _balance_residuals(mech, theta, x, u, dt, window))(xs, us)
    return jnp.mean(res ** 2)


def _torque_mean(mech, theta, xs, us, qdds, taus):
    n = mech.n_d

    def one(x, qdd):
        return dynamics.applied_force(mech, theta, x[:n], x[n:], qdd)

    flat_x = xs.reshape(-1, xs.shape[-1])
    flat_qdd = qdds.reshape(-1, n)
    tau_hat = jax.vmap(one)(flat_x, flat_qdd)
    return jnp.mean((taus.reshape(-1, n) - tau_hat) ** 2)


def _penalty_rms(aug_fn, theta, xs):
    flat = xs.reshape(-1, xs.shape[-1])
    fa = jax.vmap(lambda x: aug_fn(theta, x))(flat)
    return jnp.sqrt(jnp.mean(jnp.sum(fa ** 2, axis=1)))


@jax.jit
def _traj_value_grad(model_rhs, theta, xs, us, dt, grids, save_ts):
    def f(th):
        mean, count = _traj_sse(model_rhs, th, xs, us, dt, grids, save_ts)
        return mean, count
    (val, count), grad = jax.value_and_grad(f, has_aux=True)(theta)
    return val, grad, count


@partial(jax.jit, static_argnames=("window",))
def _prop_value_grad(mech, model_rhs, theta, xs, us, dt, grids, save_ts, lam, window):
    def f(th):
        itau = _itau_mean(mech, th, xs, us, dt, window)
        traj, count = _traj_sse(model_rhs, th, xs, us, dt, grids, save_ts)
        return itau + lam * traj, (itau, traj, count)
    (val, aux), grad = jax.value_and_grad(f, has_aux=True)(theta)
    return val, grad, aux


@jax.jit
def _aph_value_grad(aug_fn, model_rhs, theta, xs, us, dt, grids, save_ts, lam):
    def f(th):
        pen = _penalty_rms(aug_fn, th, xs)
        traj, count = _traj_sse(model_rhs, th, xs, us, dt, grids, save_ts)
        return pen + lam * traj, (pen, traj, count)
    (val, aux), grad = jax.value_and_grad(f, has_aux=True)(theta)
    return val, grad, aux


@partial(jax.jit, static_argnames=("window",))
def _itau_value_grad(mech, theta, xs, us, dt, window):
    return jax.value_and_grad(lambda th: _itau_mean(mech, th, xs, us, dt, window))(theta)


@jax.jit
def _torque_value_grad(mech, theta, xs, us, qdds, taus):
    return jax.value_and_grad(
        lambda th: _torque_mean(mech, th, xs, us, qdds, taus))(theta)


# ---------------------------------------------------------------------------
# public loss API


def _balance_mech(dyn: Dynamics) -> Mechanics:
    if dyn.balance_mechanics is None:
        raise CapabilityError(
            f"the '{dyn.spec.kind}' family exposes no momentum balance")
    return dyn.balance_mechanics


def _default_capacity(horizon_steps: int) -> int:
    return 4 * horizon_steps + 64


def _grids_for(dyn, theta, batch, solver, capacity):
    t1 = jnp.float64(batch.horizon * batch.dt)
    return _batch_grids(jax.tree_util.Partial(dyn.rhs), jnp.asarray(theta),
                        jnp.asarray(batch.xs[:, 0]), jnp.asarray(batch.us),
                        jnp.float64(batch.dt), t1, solver.numbers(), capacity)


def _save_ts(batch) -> jnp.ndarray:
    return jnp.float64(batch.dt) * jnp.arange(1, batch.horizon + 1)


@dataclass(frozen=True)
class LossValue:
    total: float
    grad: np.ndarray
    traj: float = float("nan")
    itau: float = float("nan")
    penalty: float = float("nan")
    failed_segments: int = 0
    n_segments: int = 0


def _failed_count(grids) -> int:
    return int(np.sum(np.asarray(grids.status) != ode.STATUS_OK))


def traj_loss(dyn: Dynamics, theta, batch: SegmentBatch,
              solver: ode.SolverConfig = ode.SolverConfig(),
              capacity: int | None = None) -> LossValue:
    """Mean squared rollout error with gradients through the solver."""
    capacity = capacity or _default_capacity(batch.horizon)
    grids = _grids_for(dyn, theta, batch, solver, capacity)
    val, grad, _ = _traj_value_grad(jax.tree_util.Partial(dyn.rhs),
                                    jnp.asarray(theta), jnp.asarray(batch.xs),
                                    jnp.asarray(batch.us), jnp.float64(batch.dt),
                                    grids, _save_ts(batch))
    return LossValue(float(val), np.asarray(grad), traj=float(val),
                     failed_segments=_failed_count(grids),
                     n_segments=batch.n_segments)


def prop_loss(dyn: Dynamics, theta, batch: SegmentBatch, lam: float,
              solver: ode.SolverConfig = ode.SolverConfig(),
              capacity: int | None = None, window: int = 1) -> LossValue:
    """Momentum-balance loss plus lam times the trajectory loss (fused grad)."""
    capacity = capacity or _default_capacity(batch.horizon)
    grids = _grids_for(dyn, theta, batch, solver, capacity)
    val, grad, (itau, traj, _) = _prop_value_grad(
        _balance_mech(dyn), jax.tree_util.Partial(dyn.rhs), jnp.asarray(theta),
        jnp.asarray(batch.xs), jnp.asarray(batch.us), jnp.float64(batch.dt),
        grids, _save_ts(batch), jnp.float64(lam), window)
    return LossValue(float(val), np.asarray(grad), traj=float(traj),
                     itau=float(itau), failed_segments=_failed_count(grids),
                     n_segments=batch.n_segments)


def aph_loss(dyn: Dynamics, theta, batch: SegmentBatch, lam: float,
             solver: ode.SolverConfig = ode.SolverConfig(),
             capacity: int | None = None) -> LossValue:
    """Force-correction RMS penalty plus lam times the trajectory loss."""
    if dyn.augmentation is None:
        raise CapabilityError(
            f"the '{dyn.spec.kind}' family has no learned force correction")
    capacity = capacity or _default_capacity(batch.horizon)
    grids = _grids_for(dyn, theta, batch, solver, capacity)
    val, grad, (pen, traj, _) = _aph_value_grad(
        jax.tree_util.Partial(dyn.augmentation), jax.tree_util.Partial(dyn.rhs),
        jnp.asarray(theta), jnp.asarray(batch.xs), jnp.asarray(batch.us),
        jnp.float64(batch.dt), grids, _save_ts(batch), jnp.float64(lam))
    return LossValue(float(val), np.asarray(grad), traj=float(traj),
                     penalty=float(pen), failed_segments=_failed_count(grids),
                     n_segments=batch.n_segments)


def torque_loss(dyn: Dynamics, theta, batch: SegmentBatch) -> LossValue:
    """Mean squared inverse-dynamics residual (needs accelerations)."""
    if batch.qdds is None or batch.taus is None:
        raise CapabilityError("torque loss needs ground-truth accelerations "
                              "and applied forces (attach_ground_truth)")
    val, grad = _torque_value_grad(_balance_mech(dyn), jnp.asarray(theta),
                                   jnp.asarray(batch.xs), jnp.asarray(batch.us),
                                   jnp.asarray(batch.qdds), jnp.asarray(batch.taus))
    return LossValue(float(val), np.asarray(grad), n_segments=batch.n_segments)


def integral_loss(dyn: Dynamics, theta, batch: SegmentBatch,
                  window: int = 1) -> LossValue:
    """Mean squared momentum-balance residual alone."""
    val, grad = _itau_value_grad(_balance_mech(dyn), jnp.asarray(theta),
                                 jnp.asarray(batch.xs), jnp.asarray(batch.us),
                                 jnp.float64(batch.dt), window)
    return LossValue(float(val), np.asarray(grad), itau=float(val),
                     n_segments=batch.n_segments)


def aph_penalty(dyn: Dynamics, theta, batch: SegmentBatch) -> float:
    """RMS of the learned force correction over the batch states."""
    if dyn.augmentation is None:
        raise CapabilityError(
            f"the '{dyn.spec.kind}' family has no learned force correction")
    return float(_penalty_rms(jax.tree_util.Partial(dyn.augmentation),
                              jnp.asarray(theta), jnp.asarray(batch.xs)))


def integral_residuals(dyn: Dynamics, theta, trajectory: Trajectory,
                       window: int = 1) -> np.ndarray:
    """Per-window balance residuals Zbar - Abar from measured states only."""
    if trajectory.n_samples < 2:
        raise ContractError("need at least two samples")
    if window < 1 or window >= trajectory.n_samples:
        raise ContractError("window must satisfy 1 <= window < n_samples")
    res = _balance_residuals(_balance_mech(dyn), jnp.asarray(theta),
                             jnp.asarray(trajectory.xs), jnp.asarray(trajectory.us),
                             jnp.float64(trajectory.dt), window)
    return np.asarray(res)


def update_lambda(lam: float, traj_loss_value: float, cfg: LossConfig) -> float:
    """Additive ascent on the trajectory constraint, clamped to the box."""
    if lam < 0:
        raise ContractError("lambda must be non-negative")
    return float(np.clip(lam + cfg.lambda_lr * traj_loss_value,
                         cfg.lambda_min, cfg.lambda_max))


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @staticmethod
    def zeros(n: int) -> "AdamState":
        return AdamState(np.zeros(n), np.zeros(n), 0)


def adam_step(values: np.ndarray, grad: np.ndarray, state: AdamState,
              cfg: OptimizerConfig, decay_mask: np.ndarray | None = None):
    """Bias-corrected Adam update with decoupled weight decay."""
    if values.shape != grad.shape:
        raise ContractError("parameter and gradient shapes differ")
    if not np.all(np.isfinite(grad)):
        raise NumericError(f"{int(np.sum(~np.isfinite(grad)))} non-finite "
                           "gradient entries; step rejected")
    t = state.step + 1
    m = cfg.beta1 * state.m + (1 - cfg.beta1) * grad
    v = cfg.beta2 * state.v + (1 - cfg.beta2) * grad ** 2
    m_hat = m / (1 - cfg.beta1 ** t)
    v_hat = v / (1 - cfg.beta2 ** t)
    update = cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps)
    decay = cfg.learning_rate * cfg.weight_decay * values
    if decay_mask is not None:
        decay = decay * decay_mask
    return values - update - decay, AdamState(m, v, t)


# ---------------------------------------------------------------------------
# training loop


@dataclass(frozen=True)
class HistoryRow:
    epoch: int
    stage: int
    loss_total: float
    loss_traj: float
    loss_itau: float
    lam: float


@dataclass(frozen=True)
class TrainResult:
    params: ParameterVector
    history: tuple[HistoryRow, ...]
    wall_seconds: float


def write_loss_history(path, history) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,stage,loss_total,loss_traj,loss_itau,lambda\n")
        for row in history:
            fh.write(f"{row.epoch},{row.stage},{row.loss_total!r},"
                     f"{row.loss_traj!r},{row.loss_itau!r},{row.lam!r}\n")


def _decay_mask(params: ParameterVector) -> np.ndarray:
    """Weight decay applies to network parameters, not physical coefficients."""
    mask = np.ones(params.size)
    if "physical" in params.layout:
        lo, hi = params.layout["physical"]
        mask[lo:hi] = 0.0
    return mask


def train(dyn: Dynamics, params: ParameterVector, dataset: Dataset,
          loss_cfg: LossConfig = LossConfig(),
          opt_cfg: OptimizerConfig = OptimizerConfig(),
          curriculum: Curriculum | None = None,
          solver: ode.SolverConfig = ode.SolverConfig(),
          seed: int = 0, abort_failed_fraction: float = 0.5) -> TrainResult:
    """Two-stage curriculum training; deterministic given (inputs, seed)."""
    if curriculum is None:
        curriculum = default_curriculum(dyn.spec.system)
    if loss_cfg.kind == "torque":
        raise ConfigError("the torque loss is a diagnostic; train on "
                          "traj/aph/prop")
    theta = params.values.copy()
    opt_state = AdamState.zeros(theta.size)
    mask = _decay_mask(params)
    lam = loss_cfg.lambda0
    history: list[HistoryRow] = []
    rng = np.random.default_rng((int(seed), 0xC0FFEE))
    t_start = time.perf_counter()
    epoch = 0
    bad_grads = 0

    for stage_idx, stage in ((1, curriculum.stage1), (2, curriculum.stage2)):
        full = build_segments(dataset, stage.steps(dataset.dt))
        capacity = _default_capacity(full.horizon)
        for _ in range(stage.epochs):
            batch = _select_batch(full, opt_cfg.batch_size, rng)
            if loss_cfg.kind == "traj":
                lv = traj_loss(dyn, theta, batch, solver, capacity)
            elif loss_cfg.kind == "prop":
                lv = prop_loss(dyn, theta, batch, lam, solver, capacity,
                               loss_cfg.balance_window)
            else:
                lv = aph_loss(dyn, theta, batch, lam, solver, capacity)

            if lv.failed_segments > abort_failed_fraction * lv.n_segments:
                raise TrainingError(
                    f"epoch {epoch}: {lv.failed_segments}/{lv.n_segments} "
                    "segment rollouts failed", segment_ids=tuple(range(lv.n_segments)))
            try:
                theta, opt_state = adam_step(theta, lv.grad, opt_state,
                                             opt_cfg, mask)
                bad_grads = 0
            except NumericError:
                bad_grads += 1
                if bad_grads > 3:
                    raise TrainingError(
                        f"epoch {epoch}: persistent non-finite gradients")
            if loss_cfg.kind in ("prop", "aph") and np.isfinite(lv.traj):
                lam = update_lambda(lam, lv.traj, loss_cfg)
            history.append(HistoryRow(epoch, stage_idx, lv.total, lv.traj,
                                      lv.itau, lam))
            epoch += 1

    return TrainResult(params.with_values(theta), tuple(history),
                       time.perf_counter() - t_start)


def _select_batch(full: SegmentBatch, batch_size, rng) -> SegmentBatch:
    if batch_size is None or batch_size >= full.n_segments:
        return full
    idx = rng.permutation(full.n_segments)[:batch_size]
    idx = np.sort(idx)
    return SegmentBatch(full.xs[idx], full.us[idx], full.dt,
                        None if full.qdds is None else full.qdds[idx],
                        None if full.taus is None else full.taus[idx])
