"""Exact Lagrangian mechanics for mass-matrix/potential models.

The Lagrangian is L(q, qd) = 0.5 qd' M(q) qd - V(q). Generalized forces
split into an input map tau_u(q, qd, u) and a non-conservative part
tau_nc(q, qd). All partial derivatives are obtained by machine
differentiation of the model callables, never by finite differences;
finite differences appear only as oracles in the test suite.

Model callables take a flat parameter array as first argument so that the
same code path serves fixed ground-truth models (which ignore it) and
learned models (which slice it).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import jax
import jax.numpy as jnp
import numpy as np

from .errors import ContractError, NumericError, SingularMassError

MASS_CONDITION_LIMIT = 1e12


@dataclass(frozen=True)
class State:
    """Generalized coordinates and velocities of an n_d-DOF system."""

    q: np.ndarray
    qdot: np.ndarray

    def __post_init__(self):
        q = np.atleast_1d(np.asarray(self.q, dtype=np.float64))
        qd = np.atleast_1d(np.asarray(self.qdot, dtype=np.float64))
        if q.ndim != 1 or qd.ndim != 1 or q.shape != qd.shape or q.size < 1:
            raise ContractError("q and qdot must be 1-d vectors of equal length >= 1")
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(qd))):
            raise ContractError("state entries must be finite")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "qdot", qd)

    @property
    def n_d(self) -> int:
        return self.q.size

    def vector(self) -> np.ndarray:
        """Full state x = (q, qdot)."""
        return np.concatenate([self.q, self.qdot])

    @staticmethod
    def from_vector(x) -> "State":
        x = np.asarray(x, dtype=np.float64)
        n = x.size // 2
        return State(x[:n], x[n:])


@dataclass(frozen=True)
class Mechanics:
    """A Lagrangian model plus force model with a uniform call convention.

    mass:      (params, q)        -> symmetric (n_d, n_d) matrix
    potential: (params, q)        -> scalar
    tau_u:     (params, q, qd, u) -> (n_d,) generalized input force
    tau_nc:    (params, q, qd)    -> (n_d,) non-conservative force

    Registered as a leafless pytree so instances pass through jit as static
    data keyed on object identity.
    """

    n_d: int
    input_dim: int
    mass: Callable
    potential: Callable
    tau_u: Callable
    tau_nc: Callable


jax.tree_util.register_pytree_node(
    Mechanics, lambda m: ((), m), lambda aux, _: aux)


def _check_state(mech: Mechanics, s: State):
    if s.n_d != mech.n_d:
        raise ContractError(f"state has {s.n_d} DOF, model expects {mech.n_d}")


def lagrangian(mech: Mechanics, params, q, qd):
    """L = 0.5 qd' M(q) qd - V(q) on raw arrays (jit-friendly)."""
    return 0.5 * qd @ mech.mass(params, q) @ qd - mech.potential(params, q)


def lagrangian_value(mech: Mechanics, params, s: State) -> float:
    """Kinetic minus potential energy at a state."""
    _check_state(mech, s)
    val = float(lagrangian(mech, jnp.asarray(params), jnp.asarray(s.q),
                           jnp.asarray(s.qdot)))
    if not np.isfinite(val):
        raise NumericError("non-finite Lagrangian value")
    return val


def total_energy(mech: Mechanics, params, s: State) -> float:
    """E = 0.5 qd' M(q) qd + V(q)."""
    _check_state(mech, s)
    return float(energy(mech, jnp.asarray(params), jnp.asarray(s.q),
                        jnp.asarray(s.qdot)))


def energy(mech: Mechanics, params, q, qd):
    return 0.5 * qd @ mech.mass(params, q) @ qd + mech.potential(params, q)


def momentum(mech: Mechanics, params, q, qd):
    """dL/dqd = M(q) qd."""
    return mech.mass(params, q) @ qd


def generalized_momentum(mech: Mechanics, params, s: State) -> np.ndarray:
    _check_state(mech, s)
    return np.asarray(momentum(mech, jnp.asarray(params), jnp.asarray(s.q),
                               jnp.asarray(s.qdot)))


def coriolis_vector(mech: Mechanics, params, q, qd):
    """(d^2 L / dq dqd) qd, computed as the q-Jacobian of M(q) qd applied to qd."""
    jac = jax.jacfwd(lambda qq: momentum(mech, params, qq, qd))(q)
    return jac @ qd


def lagrangian_q_gradient(mech: Mechanics, params, q, qd):
    """dL/dq = 0.5 qd' dM/dq qd - dV/dq."""
    return jax.grad(lambda qq: lagrangian(mech, params, qq, qd))(q)


def el_terms(mech: Mechanics, params, q, qd, qdd):
    """Euler-Lagrange force components (inertial, coriolis, potential-derived)."""
    inertial = mech.mass(params, q) @ qdd
    cor = coriolis_vector(mech, params, q, qd)
    dldq = lagrangian_q_gradient(mech, params, q, qd)
    return inertial, cor, dldq


def euler_lagrange_terms(mech: Mechanics, params, s: State, qddot):
    """The three force components; they satisfy
    inertial + coriolis - potential_derived = tau_u + tau_nc on solutions."""
    _check_state(mech, s)
    qdd = np.atleast_1d(np.asarray(qddot, dtype=np.float64))
    if qdd.shape != s.q.shape:
        raise ContractError("qddot must match the state dimension")
    parts = el_terms(mech, jnp.asarray(params), jnp.asarray(s.q),
                     jnp.asarray(s.qdot), jnp.asarray(qdd))
    out = tuple(np.asarray(p) for p in parts)
    if not all(np.all(np.isfinite(p)) for p in out):
        raise NumericError("non-finite Euler-Lagrange partials")
    return out


def _spd_solve(m, b):
    c, lower = jax.scipy.linalg.cho_factor(m, lower=True)
    return jax.scipy.linalg.cho_solve((c, lower), b)


def accel(mech: Mechanics, params, q, qd, u):
    """Solve M(q) qdd = tau_u + tau_nc - coriolis + dL/dq for qdd."""
    tau = mech.tau_u(params, q, qd, u) + mech.tau_nc(params, q, qd)
    rhs_vec = tau - coriolis_vector(mech, params, q, qd) \
        + lagrangian_q_gradient(mech, params, q, qd)
    return _spd_solve(mech.mass(params, q), rhs_vec)


def forward_dynamics(mech: Mechanics, params, s: State, u) -> np.ndarray:
    """Accelerations of the forced system; raises on singular M(q)."""
    _check_state(mech, s)
    u = np.atleast_1d(np.asarray(u, dtype=np.float64))
    m = np.asarray(mech.mass(jnp.asarray(params), jnp.asarray(s.q)))
    eigs = np.linalg.eigvalsh(0.5 * (m + m.T))
    if eigs[0] <= 0 or eigs[-1] / eigs[0] > MASS_CONDITION_LIMIT:
        raise SingularMassError(
            f"mass matrix condition estimate {eigs[-1] / max(eigs[0], 1e-300):.3g} "
            f"exceeds {MASS_CONDITION_LIMIT:.0e}")
    qdd = np.asarray(accel(mech, jnp.asarray(params), jnp.asarray(s.q),
                           jnp.asarray(s.qdot), jnp.asarray(u)))
    if not np.all(np.isfinite(qdd)):
        raise NumericError("non-finite acceleration")
    return qdd


def applied_force(mech: Mechanics, params, q, qd, qdd):
    """Inverse dynamics residual: the input force explaining qdd."""
    inertial, cor, dldq = el_terms(mech, params, q, qd, qdd)
    return inertial + cor - dldq - mech.tau_nc(params, q, qd)


def inverse_dynamics(mech: Mechanics, params, s: State, qddot) -> np.ndarray:
    """Generalized input force tau_u reproducing the given acceleration."""
    _check_state(mech, s)
    qdd = np.atleast_1d(np.asarray(qddot, dtype=np.float64))
    if qdd.shape != s.q.shape:
        raise ContractError("qddot must match the state dimension")
    tau = np.asarray(applied_force(mech, jnp.asarray(params), jnp.asarray(s.q),
                                   jnp.asarray(s.qdot), jnp.asarray(qdd)))
    if not np.all(np.isfinite(tau)):
        raise NumericError("non-finite inverse-dynamics force")
    return tau


def state_derivative(mech: Mechanics, params, t, y, u_of_t):
    """First-order rhs on the stacked state y = (q, qd); u_of_t maps t -> input."""
    n = mech.n_d
    q, qd = y[:n], y[n:]
    qdd = accel(mech, params, q, qd, u_of_t(t))
    return jnp.concatenate([qd, qdd])
