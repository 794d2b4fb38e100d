"""Benchmark systems, dataset generation, and the velocity-estimation filter.

Two simulated plants are shipped:

* a nonlinear mass-spring-damper (1 DOF): quartic spring potential, cubic
  velocity damping, direct force input;
* a rotary inverted pendulum (2 DOF, arm angle alpha, pendulum angle beta):
  trigonometric mass matrix, gravity potential in beta, linear viscous
  friction on both joints, DC-motor voltage input on the arm only.

The structure functions below take their coefficients as arguments so the
same formulas serve the fixed ground truth and learnable-parameter priors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Callable

import jax
import jax.numpy as jnp
import numpy as np

from . import dynamics, ode
from .dynamics import Mechanics, State
from .errors import ConfigError, ContractError, IntegrationError

# ---------------------------------------------------------------------------
# parameters


@dataclass(frozen=True)
class NmsdParams:
    """Nonlinear mass-spring-damper coefficients (SI units)."""

    m: float = 1.0
    k1: float = 1.0
    k2: float = 0.5
    b1: float = 0.2
    b2: float = 0.1

    def __post_init__(self):
        if min(self.m, self.k1, self.k2, self.b1, self.b2) <= 0:
            raise ConfigError("all N-MSD parameters must be positive")


@dataclass(frozen=True)
class FurutaParams:
    """Rotary pendulum coefficients.

    Defaults are QUBE-Servo 2 vendor nominals with lumped inertias
    (J1 includes the motor rotor and the pendulum mass on the arm radius;
    J2 is the pendulum rod inertia about its pivot). They are external
    provenance, configurable, and not treated as ground truth of any
    physical device.
    """

    J1: float = 4.062e-4
    J2: float = 1.3313e-4
    m_p: float = 0.024
    L_p: float = 0.129
    L_r: float = 0.085
    c_r: float = 0.0015
    c_p: float = 0.0005
    k_t: float = 0.042
    R_m: float = 8.4
    k_m: float = 0.042
    g: float = 9.81

    def __post_init__(self):
        if min(self.J1, self.J2, self.m_p, self.L_p, self.L_r, self.k_t,
               self.R_m, self.k_m, self.g) <= 0:
            raise ConfigError("inertias, masses, lengths and motor constants must be positive")
        if self.c_r < 0 or self.c_p < 0:
            raise ConfigError("friction coefficients must be non-negative")


# ---------------------------------------------------------------------------
# structure functions (coefficients passed in, usable with traced values)


def nmsd_mass(m, q):
    return jnp.array([[m]]) + 0.0 * q[0]


def nmsd_potential(k1, k2, q):
    p = q[0]
    return 0.5 * k1 * p ** 2 + 0.25 * k2 * p ** 4


def nmsd_tau_nc(b1, b2, qd):
    pd = qd[0]
    return jnp.array([-b1 * pd - b2 * pd ** 3])


def furuta_mass(j1, j2, m_p, l_p, l_r, q):
    beta = q[1]
    m11 = j1 + 0.25 * m_p * l_p ** 2 * jnp.sin(beta) ** 2
    m12 = 0.5 * m_p * l_r * l_p * jnp.cos(beta)
    return jnp.array([[m11, m12], [m12, j2]])


def furuta_potential(m_p, l_p, g, q):
    return 0.5 * m_p * g * l_p * (1.0 - jnp.cos(q[1]))


def furuta_tau_u(k_t, r_m, k_m, qd, u):
    return jnp.array([k_t / r_m * (-u[0] - k_m * qd[0]), 0.0])


def furuta_tau_nc(c_r, c_p, qd):
    return jnp.array([-c_r * qd[0], -c_p * qd[1]])


def nmsd_mechanics(p: NmsdParams) -> Mechanics:
    """Fixed-coefficient mechanics (the params array argument is ignored)."""
    return Mechanics(
        n_d=1, input_dim=1,
        mass=lambda th, q: nmsd_mass(p.m, q),
        potential=lambda th, q: nmsd_potential(p.k1, p.k2, q),
        tau_u=lambda th, q, qd, u: jnp.asarray(u),
        tau_nc=lambda th, q, qd: nmsd_tau_nc(p.b1, p.b2, qd),
    )


def furuta_mechanics(p: FurutaParams, frictionless: bool = False) -> Mechanics:
    c_r, c_p = (0.0, 0.0) if frictionless else (p.c_r, p.c_p)
    return Mechanics(
        n_d=2, input_dim=1,
        mass=lambda th, q: furuta_mass(p.J1, p.J2, p.m_p, p.L_p, p.L_r, q),
        potential=lambda th, q: furuta_potential(p.m_p, p.L_p, p.g, q),
        tau_u=lambda th, q, qd, u: furuta_tau_u(p.k_t, p.R_m, p.k_m, qd, u),
        tau_nc=lambda th, q, qd: furuta_tau_nc(c_r, c_p, qd),
    )


def nmsd_rhs(p: NmsdParams, s: State, u) -> np.ndarray:
    """Hand-expanded state derivative, kept independent of the generic
    Euler-Lagrange path so the two can cross-check each other."""
    u = np.atleast_1d(np.asarray(u, dtype=np.float64))
    pos, vel = s.q[0], s.qdot[0]
    acc = (u[0] - p.k1 * pos - p.k2 * pos ** 3 - p.b1 * vel - p.b2 * vel ** 3) / p.m
    return np.array([vel, acc])


def furuta_rhs(p: FurutaParams, s: State, u) -> np.ndarray:
    """State derivative via the generic Euler-Lagrange machinery."""
    mech = furuta_mechanics(p)
    qdd = dynamics.forward_dynamics(mech, jnp.zeros(0), s, u)
    return np.concatenate([s.qdot, qdd])


# ---------------------------------------------------------------------------
# input signals


def chirp(amplitude: float, f0: float, f1: float, duration: float, t):
    """Linear chirp A sin(2 pi (f0 t + (f1 - f0) t^2 / (2 T)))."""
    if duration <= 0:
        raise ConfigError("chirp duration must be positive")
    phase = f0 * t + (f1 - f0) * t * t / (2.0 * duration)
    return amplitude * jnp.sin(2.0 * jnp.pi * phase)


def square_impulse(amplitude: float, start: float, width: float, t):
    """Single rectangular impulse: A on [start, start + width), else 0."""
    if width <= 0:
        raise ConfigError("impulse width must be positive")
    t = jnp.asarray(t)
    return jnp.where((t >= start) & (t < start + width), amplitude, 0.0)


# ---------------------------------------------------------------------------
# trajectories and datasets


@dataclass(frozen=True)
class Trajectory:
    """Uniformly sampled states and inputs of one rollout."""

    t0: float
    dt: float
    xs: np.ndarray  # (T, 2 n_d)
    us: np.ndarray  # (T, p)
    labels: dict = field(default_factory=dict)

    def __post_init__(self):
        xs = np.asarray(self.xs, dtype=np.float64)
        us = np.asarray(self.us, dtype=np.float64)
        if us.ndim == 1:
            us = us[:, None]
        if xs.ndim != 2 or xs.shape[1] % 2 != 0:
            raise ContractError("xs must be (T, 2 n_d)")
        if us.shape[0] != xs.shape[0]:
            raise ContractError("states and inputs must have equal length")
        if self.dt <= 0:
            raise ContractError("dt must be positive")
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "us", us)

    @property
    def n_d(self) -> int:
        return self.xs.shape[1] // 2

    @property
    def n_samples(self) -> int:
        return self.xs.shape[0]

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_samples)

    def state(self, j: int) -> State:
        n = self.n_d
        return State(self.xs[j, :n], self.xs[j, n:])


@dataclass(frozen=True)
class Dataset:
    """A homogeneous collection of trajectories from one system."""

    system: str
    split: str
    dt: float
    seed: int
    params: dict
    trajectories: tuple[Trajectory, ...]

    def __post_init__(self):
        for tr in self.trajectories:
            if abs(tr.dt - self.dt) > 1e-12:
                raise ContractError("all trajectories in a dataset share one dt")
        object.__setattr__(self, "trajectories", tuple(self.trajectories))

    @property
    def n_d(self) -> int:
        return self.trajectories[0].n_d


_GEN_SOLVER = ode.SolverConfig(rtol=1e-9, atol=1e-11)


def _make_rhs(mech: Mechanics, u_fn: Callable):
    """Build a reusable rhs closure (one jit cache entry per closure)."""

    def rhs(t, y):
        return dynamics.state_derivative(mech, jnp.zeros(0), t, y,
                                         lambda tt: jnp.atleast_1d(u_fn(tt)))

    return jax.tree_util.Partial(rhs)


def _rollout(rhs, u_fn: Callable, x0: np.ndarray, duration: float,
             dt: float, solver: ode.SolverConfig = _GEN_SOLVER) -> tuple[np.ndarray, np.ndarray]:
    """Integrate the plant and sample states/inputs on the uniform grid."""
    n_steps = int(round(duration / dt))
    ts = dt * np.arange(n_steps + 1)
    capacity = 4096
    while True:
        try:
            xs = ode.solve(rhs, x0, (0.0, duration), solver, save_at=ts,
                           capacity=capacity)
            break
        except IntegrationError as err:
            if "buffer" in str(err) and capacity < solver.max_steps:
                capacity *= 4
                continue
            raise
    us = np.asarray(jax.vmap(lambda t: jnp.atleast_1d(u_fn(t)))(jnp.asarray(ts)))
    return xs, us


@dataclass(frozen=True)
class NmsdGenerationConfig:
    dt: float = 0.01
    train_duration: float = 60.0
    segment_duration: float = 2.0
    chirp_amplitude: float = 1.0
    chirp_f0: float = 0.1
    chirp_f1: float = 1.1
    test_chirp_duration: float = 25.0
    square_amplitude: float = 1.0
    square_start: float = 1.0
    square_width: float = 3.0
    square_duration: float = 15.0


def generate_nmsd_dataset(params: NmsdParams, seed: int,
                          cfg: NmsdGenerationConfig = NmsdGenerationConfig(),
                          velocities: str = "exact"):
    """Training chirp split into segments, plus chirp and square test sets."""
    mech = nmsd_mechanics(params)
    rng = np.random.default_rng(np.uint64(seed))
    pblock = asdict(params)

    def draw_x0():
        return np.array([rng.uniform(-1.0, 1.0), rng.uniform(-5.0, 5.0)])

    train_chirp = lambda t: chirp(cfg.chirp_amplitude, cfg.chirp_f0,
                                  cfg.chirp_f1, cfg.train_duration, t)
    chirp_rhs = _make_rhs(mech, train_chirp)
    xs, us = _rollout(chirp_rhs, train_chirp, draw_x0(), cfg.train_duration, cfg.dt)
    xs, us = _maybe_filter(xs, us, cfg.dt, velocities)
    seg_len = int(round(cfg.segment_duration / cfg.dt))
    n_seg = int(round(cfg.train_duration / cfg.segment_duration))
    segs = []
    for i in range(n_seg):
        lo = i * seg_len
        segs.append(Trajectory(t0=0.0, dt=cfg.dt, xs=xs[lo:lo + seg_len + 1],
                               us=us[lo:lo + seg_len + 1],
                               labels={"system": "nmsd", "segment": i, "input": "chirp"}))
    train = Dataset("nmsd", "train", cfg.dt, seed, pblock, tuple(segs))

    xs_c, us_c = _rollout(chirp_rhs, train_chirp, draw_x0(),
                          cfg.test_chirp_duration, cfg.dt)
    xs_c, us_c = _maybe_filter(xs_c, us_c, cfg.dt, velocities)
    test_chirp = Dataset("nmsd", "test_chirp", cfg.dt, seed, pblock, (
        Trajectory(0.0, cfg.dt, xs_c, us_c, {"system": "nmsd", "input": "chirp"}),))

    square = lambda t: square_impulse(cfg.square_amplitude, cfg.square_start,
                                      cfg.square_width, t)
    xs_s, us_s = _rollout(_make_rhs(mech, square), square, draw_x0(),
                          cfg.square_duration, cfg.dt)
    xs_s, us_s = _maybe_filter(xs_s, us_s, cfg.dt, velocities)
    test_square = Dataset("nmsd", "test_square", cfg.dt, seed, pblock, (
        Trajectory(0.0, cfg.dt, xs_s, us_s, {"system": "nmsd", "input": "square"}),))
    return train, test_chirp, test_square


@dataclass(frozen=True)
class FurutaGenerationConfig:
    dt: float = 0.01
    train_count: int = 64
    train_duration: float = 1.0
    train_speed_range: float = 5.0
    test_free_count: int = 6
    test_free_duration: float = 6.0
    test_speed_range: float = 20.0
    test_forced_count: int = 3
    test_forced_duration: float = 20.0
    chirp_amplitude: float = 2.0
    chirp_f0: float = 0.5
    chirp_f1: float = 6.0


FURUTA_MODES = ("train_free", "test_free", "test_forced")


def generate_furuta_dataset(params: FurutaParams, seed: int, mode: str,
                            cfg: FurutaGenerationConfig = FurutaGenerationConfig(),
                            velocities: str = "exact") -> Dataset:
    """Free-decay training rollouts, long free tests, or chirp-forced tests."""
    if mode not in FURUTA_MODES:
        raise ConfigError(f"mode must be one of {FURUTA_MODES}")
    mech = furuta_mechanics(params)
    rng = np.random.default_rng((int(seed), FURUTA_MODES.index(mode)))
    pblock = asdict(params)

    if mode == "train_free":
        count, duration, vrange = cfg.train_count, cfg.train_duration, cfg.train_speed_range
    elif mode == "test_free":
        count, duration, vrange = cfg.test_free_count, cfg.test_free_duration, cfg.test_speed_range
    else:
        count, duration, vrange = cfg.test_forced_count, cfg.test_forced_duration, cfg.test_speed_range

    if mode == "test_forced":
        u_fn = lambda t: chirp(cfg.chirp_amplitude, cfg.chirp_f0, cfg.chirp_f1,
                               cfg.test_forced_duration, t)
        input_kind = "chirp"
    else:
        u_fn = lambda t: jnp.array(0.0)
        input_kind = "free"

    rhs = _make_rhs(mech, u_fn)
    trajectories = []
    for i in range(count):
        x0 = np.array([rng.uniform(-np.pi, np.pi), rng.uniform(-np.pi, np.pi),
                       rng.uniform(-vrange, vrange), rng.uniform(-vrange, vrange)])
        xs, us = _rollout(rhs, u_fn, x0, duration, cfg.dt)
        xs, us = _maybe_filter(xs, us, cfg.dt, velocities)
        trajectories.append(Trajectory(0.0, cfg.dt, xs, us,
                                       {"system": "furuta", "index": i,
                                        "input": input_kind}))
    return Dataset("furuta", mode, cfg.dt, seed, pblock, tuple(trajectories))


def _maybe_filter(xs, us, dt, velocities: str):
    if velocities == "exact":
        return xs, us
    if velocities != "filtered":
        raise ConfigError("velocities must be 'exact' or 'filtered'")
    n = xs.shape[1] // 2
    qd_est = filter_velocity(DerivativeFilter(), xs[:, :n], dt)
    return np.concatenate([xs[:, :n], qd_est], axis=1), us


# ---------------------------------------------------------------------------
# velocity-estimation filter


@dataclass(frozen=True)
class DerivativeFilter:
    """Second-order causal derivative filter w0^2 s / (s^2 + 2 xi w0 s + w0^2)."""

    omega0: float = 100.0
    xi: float = 0.8

    def discretize(self, dt: float) -> "DiscreteFilter":
        """Bilinear-transform realization at sampling interval dt."""
        if dt <= 0:
            raise ConfigError("dt must be positive")
        w, x = self.omega0, self.xi
        k = 2.0 / dt
        a0 = k * k + 2.0 * x * w * k + w * w
        b = (w * w * k / a0, 0.0, -w * w * k / a0)
        a = (1.0, (-2.0 * k * k + 2.0 * w * w) / a0,
             (k * k - 2.0 * x * w * k + w * w) / a0)
        return DiscreteFilter(b=b, a=a, dt=dt)


@dataclass(frozen=True)
class DiscreteFilter:
    b: tuple[float, float, float]
    a: tuple[float, float, float]
    dt: float

    def poles(self) -> np.ndarray:
        return np.roots(self.a)


def filter_velocity(filt, positions, dt: float) -> np.ndarray:
    """Causal filtered derivative of sampled positions (zero initial state)."""
    if isinstance(filt, DerivativeFilter):
        filt = filt.discretize(dt)
    elif abs(filt.dt - dt) > 1e-12:
        raise ConfigError(f"filter was discretized at dt={filt.dt}, data has dt={dt}")
    x = np.atleast_2d(np.asarray(positions, dtype=np.float64).T).T
    b, a = filt.b, filt.a
    y = np.zeros_like(x)
    z1 = np.zeros(x.shape[1])
    z2 = np.zeros(x.shape[1])
    for nidx in range(x.shape[0]):
        y[nidx] = b[0] * x[nidx] + z1
        z1 = b[1] * x[nidx] - a[1] * y[nidx] + z2
        z2 = b[2] * x[nidx] - a[2] * y[nidx]
    return y if np.asarray(positions).ndim > 1 else y[:, 0]
