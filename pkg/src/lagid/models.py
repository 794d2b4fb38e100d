"""Parameterized model families behind a flat parameter vector.

Three learnable families share one wrap:

* ``dln``  -- mass matrix and potential are MLPs, the mass matrix built as
  L L' from a learned lower-triangular factor with a softplus-plus-floor
  diagonal (SPD by construction); input and non-conservative forces known.
* ``aph``  -- a physics prior (the frictionless benchmark model with
  learnable positive physical coefficients) plus an additive MLP correction
  on the acceleration block.
* ``adln`` -- the ``dln`` Lagrangian with the non-conservative force
  replaced by an MLP of (q, qd); input force known.

``ground_truth`` wraps the benchmark mechanics with an empty parameter
vector so the same training and evaluation code paths accept it.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import jax
import jax.numpy as jnp
import numpy as np

from . import benchmarks as bm
from .dynamics import Mechanics, state_derivative
from .errors import CapabilityError, ConfigError, ContractError

_TRIAG = {}  # cache of tril index pairs per n_d


# ---------------------------------------------------------------------------
# parameter vector


@dataclass(frozen=True)
class ParameterVector:
    """Flat trainable parameters with named index sub-ranges."""

    values: np.ndarray
    layout: dict[str, tuple[int, int]]

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", v)
        spans = sorted(self.layout.values())
        cursor = 0
        for lo, hi in spans:
            if lo != cursor or hi < lo:
                raise ContractError("layout ranges must partition [0, len)")
            cursor = hi
        if cursor != v.size:
            raise ContractError("layout does not cover the parameter vector")

    def slice(self, name: str) -> np.ndarray:
        lo, hi = self.layout[name]
        return self.values[lo:hi]

    def with_values(self, values) -> "ParameterVector":
        return ParameterVector(np.asarray(values, dtype=np.float64), dict(self.layout))

    @property
    def size(self) -> int:
        return self.values.size


# ---------------------------------------------------------------------------
# multilayer perceptron on a flat slice


@dataclass(frozen=True)
class MlpSpec:
    in_dim: int
    widths: tuple[int, ...]
    out_dim: int
    activation: str = "softplus"

    def __post_init__(self):
        if self.in_dim <= 0 or self.out_dim <= 0 or any(w <= 0 for w in self.widths):
            raise ConfigError("layer widths must be positive")
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))

    @property
    def shapes(self) -> list[tuple[int, int]]:
        dims = (self.in_dim, *self.widths, self.out_dim)
        return [(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]

    @property
    def n_params(self) -> int:
        return sum(o * i + o for o, i in self.shapes)


def _activation(name: str):
    if name == "softplus":
        return lambda x: jnp.logaddexp(x, 0.0)
    if name == "tanh":
        return jnp.tanh
    raise ConfigError(f"unknown activation '{name}'")


def mlp_init(spec: MlpSpec, rng: np.random.Generator, zero_last: bool = False) -> np.ndarray:
    """Scaled-uniform fan-in initialization, deterministic given the rng state."""
    chunks = []
    for idx, (out, inp) in enumerate(spec.shapes):
        bound = 1.0 / math.sqrt(inp)
        w = rng.uniform(-bound, bound, size=(out, inp))
        b = rng.uniform(-bound, bound, size=out)
        if zero_last and idx == len(spec.shapes) - 1:
            w[:] = 0.0
            b[:] = 0.0
        chunks.extend([w.ravel(), b])
    return np.concatenate(chunks)


def mlp_apply(spec: MlpSpec, flat, x):
    act = _activation(spec.activation)
    h = x
    off = 0
    last = len(spec.shapes) - 1
    for idx, (out, inp) in enumerate(spec.shapes):
        w = flat[off:off + out * inp].reshape(out, inp)
        off += out * inp
        b = flat[off:off + out]
        off += out
        h = w @ h + b
        if idx != last:
            h = act(h)
    return h


# ---------------------------------------------------------------------------
# model specification


_DEFAULT_WIDTHS = {"nmsd": (64, 64), "furuta": (16, 16)}


@dataclass(frozen=True)
class ModelSpec:
    """Serializable description of a model instance."""

    kind: str                 # ground_truth | dln | aph | adln
    system: str               # nmsd | furuta
    system_params: dict
    widths: tuple[int, ...] = ()
    nc_widths: tuple[int, ...] = ()
    eps: float = 1e-4
    angle_embed: bool = False

    def __post_init__(self):
        if self.kind not in ("ground_truth", "dln", "aph", "adln"):
            raise ConfigError(f"unknown model kind '{self.kind}'")
        if self.system not in ("nmsd", "furuta"):
            raise ConfigError(f"unknown system '{self.system}'")
        object.__setattr__(self, "widths", tuple(self.widths))
        object.__setattr__(self, "nc_widths", tuple(self.nc_widths))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "system": self.system,
                "system_params": dict(self.system_params),
                "widths": list(self.widths), "nc_widths": list(self.nc_widths),
                "eps": self.eps, "angle_embed": self.angle_embed}

    @staticmethod
    def from_dict(d: dict) -> "ModelSpec":
        return ModelSpec(kind=d["kind"], system=d["system"],
                         system_params=dict(d["system_params"]),
                         widths=tuple(d.get("widths", ())),
                         nc_widths=tuple(d.get("nc_widths", ())),
                         eps=float(d.get("eps", 1e-4)),
                         angle_embed=bool(d.get("angle_embed", False)))


def default_model_spec(kind: str, system: str, system_params=None) -> ModelSpec:
    """Benchmark-sized architecture for a model family."""
    if system_params is None:
        system_params = bm.NmsdParams() if system == "nmsd" else bm.FurutaParams()
    if not isinstance(system_params, dict):
        from dataclasses import asdict
        system_params = asdict(system_params)
    w = _DEFAULT_WIDTHS[system]
    return ModelSpec(kind=kind, system=system, system_params=system_params,
                     widths=w if kind != "ground_truth" else (),
                     nc_widths=w if kind in ("aph", "adln") else ())


def _system_params(spec: ModelSpec):
    cls = bm.NmsdParams if spec.system == "nmsd" else bm.FurutaParams
    return cls(**spec.system_params)


def _n_d(spec: ModelSpec) -> int:
    return 1 if spec.system == "nmsd" else 2


def _feature_dim(spec: ModelSpec) -> int:
    n = _n_d(spec)
    return 2 * n if spec.angle_embed else n


def _features(spec: ModelSpec, q):
    if spec.angle_embed:
        return jnp.concatenate([jnp.sin(q), jnp.cos(q)])
    return q


# ---------------------------------------------------------------------------
# non-conservative force forms


@dataclass(frozen=True)
class ParametricNcForce:
    """Fixed-form dissipative force, odd in the velocities.

    ``nmsd_cubic``: -c0 qd - c1 qd^3 (1 DOF).
    ``linear_friction``: (-c0 qd0, -c1 qd1) (2 DOF).
    """

    form: str
    coefficients: tuple[float, ...]

    def __post_init__(self):
        if self.form not in ("nmsd_cubic", "linear_friction"):
            raise ConfigError(f"unknown force form '{self.form}'")
        if len(self.coefficients) != 2:
            raise ConfigError("both shipped forms take two coefficients")
        object.__setattr__(self, "coefficients", tuple(float(c) for c in self.coefficients))

    def __call__(self, qd):
        c0, c1 = self.coefficients
        if self.form == "nmsd_cubic":
            return bm.nmsd_tau_nc(c0, c1, qd)
        return bm.furuta_tau_nc(c0, c1, qd)


def known_nc_force(spec: ModelSpec) -> ParametricNcForce:
    p = _system_params(spec)
    if spec.system == "nmsd":
        return ParametricNcForce("nmsd_cubic", (p.b1, p.b2))
    return ParametricNcForce("linear_friction", (p.c_r, p.c_p))


# ---------------------------------------------------------------------------
# model functions (flat-parameter callables)


def _mass_spec(spec: ModelSpec) -> MlpSpec:
    n = _n_d(spec)
    return MlpSpec(_feature_dim(spec), spec.widths, n * (n + 1) // 2)


def _potential_spec(spec: ModelSpec) -> MlpSpec:
    return MlpSpec(_feature_dim(spec), spec.widths, 1)


def _nc_spec(spec: ModelSpec) -> MlpSpec:
    n = _n_d(spec)
    return MlpSpec(2 * n, spec.nc_widths, n)


def _aug_spec(spec: ModelSpec) -> MlpSpec:
    n = _n_d(spec)
    return MlpSpec(2 * n, spec.nc_widths, n)


_PHYSICAL_NAMES = {"nmsd": ("m", "k1", "k2"), "furuta": ("J1", "J2", "m_p", "L_p", "L_r")}


def _tril_mass(spec: ModelSpec, raw, n: int):
    """Assemble the SPD mass matrix from raw lower-triangular entries."""
    if n not in _TRIAG:
        _TRIAG[n] = np.tril_indices(n)
    rows, cols = _TRIAG[n]
    lmat = jnp.zeros((n, n)).at[rows, cols].set(raw)
    diag = jnp.diag(lmat)
    pos = jnp.logaddexp(diag, 0.0) + spec.eps
    lmat = lmat - jnp.diag(diag) + jnp.diag(pos)
    return lmat @ lmat.T


def delan_mass(spec: ModelSpec, theta, layout, q):
    lo, hi = layout["mass_net"]
    raw = mlp_apply(_mass_spec(spec), theta[lo:hi], _features(spec, q))
    return _tril_mass(spec, raw, _n_d(spec))


def delan_potential(spec: ModelSpec, theta, layout, q):
    lo, hi = layout["potential_net"]
    return mlp_apply(_potential_spec(spec), theta[lo:hi], _features(spec, q))[0]


def evaluate_delan(spec: ModelSpec, theta, layout, q):
    """Learned mass matrix and potential at a configuration."""
    q = jnp.asarray(q, dtype=jnp.float64)
    m = delan_mass(spec, jnp.asarray(theta), layout, q)
    v = delan_potential(spec, jnp.asarray(theta), layout, q)
    return np.asarray(m), float(v)


# ---------------------------------------------------------------------------
# the uniform dynamics wrap


@dataclass(frozen=True)
class Dynamics:
    """Uniform interface consumed by training, evaluation, and control.

    ``mechanics`` is the Lagrangian view (None when the family does not
    identify one); ``balance_mechanics`` is the view used by the integrated
    momentum balance and is present for every shipped family.
    ``augmentation`` maps (theta, x) to the learned force correction when
    the family has one (the additive acceleration net, or the learned
    non-conservative force net).
    """

    spec: ModelSpec
    n_d: int
    input_dim: int
    layout: dict[str, tuple[int, int]]
    rhs: Callable                      # (theta, t, y, u_value) -> ydot
    mechanics: Mechanics | None
    balance_mechanics: Mechanics
    augmentation: Callable | None = None

    @property
    def has_lagrangian(self) -> bool:
        return self.mechanics is not None

    def require_mechanics(self, what: str) -> Mechanics:
        if self.mechanics is None:
            raise CapabilityError(
                f"{what} is not identified by the '{self.spec.kind}' family")
        return self.mechanics


def _mech_rhs(mech: Mechanics):
    def rhs(theta, t, y, u):
        return state_derivative(mech, theta, t, y, lambda tt: jnp.atleast_1d(u))
    return rhs


def build_model(spec: ModelSpec) -> Dynamics:
    """Construct the dynamics wrap and parameter layout for a model spec."""
    n = _n_d(spec)
    p = _system_params(spec)
    if spec.kind == "ground_truth":
        mech = bm.nmsd_mechanics(p) if spec.system == "nmsd" else bm.furuta_mechanics(p)
        return Dynamics(spec, n, 1, {}, _mech_rhs(mech), mech, mech)

    if spec.kind in ("dln", "adln"):
        sizes = {"mass_net": _mass_spec(spec).n_params,
                 "potential_net": _potential_spec(spec).n_params}
        if spec.kind == "adln":
            sizes["nc_net"] = _nc_spec(spec).n_params
        layout = _layout_from_sizes(sizes)
        known_nc = known_nc_force(spec)

        def mass(theta, q):
            return delan_mass(spec, theta, layout, q)

        def potential(theta, q):
            return delan_potential(spec, theta, layout, q)

        if spec.system == "nmsd":
            tau_u = lambda th, q, qd, u: jnp.atleast_1d(u)
        else:
            tau_u = lambda th, q, qd, u: bm.furuta_tau_u(p.k_t, p.R_m, p.k_m, qd, u)

        aug = None
        if spec.kind == "dln":
            tau_nc = lambda th, q, qd: known_nc(qd)
        else:
            lo, hi = layout["nc_net"]
            nc_spec = _nc_spec(spec)
            tau_nc = lambda th, q, qd: mlp_apply(nc_spec, th[lo:hi],
                                                 jnp.concatenate([q, qd]))
            aug = lambda th, x: mlp_apply(nc_spec, th[lo:hi], x)
        mech = Mechanics(n_d=n, input_dim=1, mass=mass, potential=potential,
                         tau_u=tau_u, tau_nc=tau_nc)
        return Dynamics(spec, n, 1, layout, _mech_rhs(mech), mech, mech, aug)

    # aph: frictionless physics prior with learnable positive coefficients
    # plus an additive acceleration correction.
    sizes = {"physical": len(_PHYSICAL_NAMES[spec.system]),
             "nc_net": _aug_spec(spec).n_params}
    layout = _layout_from_sizes(sizes)
    plo, phi = layout["physical"]
    alo, ahi = layout["nc_net"]
    aug = _aug_spec(spec)

    if spec.system == "nmsd":
        def mass(theta, q):
            return bm.nmsd_mass(jnp.exp(theta[plo]), q)

        def potential(theta, q):
            return bm.nmsd_potential(jnp.exp(theta[plo + 1]), jnp.exp(theta[plo + 2]), q)

        tau_u = lambda th, q, qd, u: jnp.atleast_1d(u)
    else:
        def mass(theta, q):
            j1, j2, m_p, l_p, l_r = jnp.exp(theta[plo:phi])
            return bm.furuta_mass(j1, j2, m_p, l_p, l_r, q)

        def potential(theta, q):
            m_p, l_p = jnp.exp(theta[plo + 2]), jnp.exp(theta[plo + 3])
            return bm.furuta_potential(m_p, l_p, p.g, q)

        tau_u = lambda th, q, qd, u: bm.furuta_tau_u(p.k_t, p.R_m, p.k_m, qd, u)

    prior = Mechanics(n_d=n, input_dim=1, mass=mass, potential=potential,
                      tau_u=tau_u, tau_nc=lambda th, q, qd: jnp.zeros(n))
    prior_rhs = _mech_rhs(prior)

    def augmentation(theta, y):
        return mlp_apply(aug, theta[alo:ahi], y)

    def rhs(theta, t, y, u):
        base = prior_rhs(theta, t, y, u)
        fa = augmentation(theta, y)
        return base + jnp.concatenate([jnp.zeros(n), fa])

    balance = Mechanics(
        n_d=n, input_dim=1, mass=mass, potential=potential, tau_u=tau_u,
        tau_nc=lambda th, q, qd: mass(th, q) @ augmentation(th, jnp.concatenate([q, qd])))
    return Dynamics(spec, n, 1, layout, rhs, None, balance, augmentation)


def _layout_from_sizes(sizes: dict[str, int]) -> dict[str, tuple[int, int]]:
    layout = {}
    off = 0
    for name, size in sizes.items():
        layout[name] = (off, off + size)
        off += size
    return layout


def init_model(spec: ModelSpec, seed: int) -> ParameterVector:
    """Deterministic parameter initialization for (spec, seed).

    The final layers of force-correction networks (``aph`` augmentation and
    ``adln`` nc net) start at zero so training starts from the physics
    prior / pure-Lagrangian behavior.
    """
    dyn = build_model(spec)
    chunks = {}
    for idx, name in enumerate(dyn.layout):
        rng = np.random.default_rng((int(seed), idx))
        if name == "mass_net":
            chunks[name] = mlp_init(_mass_spec(spec), rng)
        elif name == "potential_net":
            chunks[name] = mlp_init(_potential_spec(spec), rng)
        elif name == "nc_net" and spec.kind == "adln":
            chunks[name] = mlp_init(_nc_spec(spec), rng, zero_last=True)
        elif name == "nc_net":
            chunks[name] = mlp_init(_aug_spec(spec), rng, zero_last=True)
        elif name == "physical":
            p = _system_params(spec)
            vals = [getattr(p, f) for f in _PHYSICAL_NAMES[spec.system]]
            chunks[name] = np.log(np.asarray(vals, dtype=np.float64))
    values = np.concatenate([chunks[n] for n in dyn.layout]) if chunks else np.zeros(0)
    return ParameterVector(values, dyn.layout)


# ---------------------------------------------------------------------------
# checkpoint file: one JSON header line, then raw little-endian f64 values


CHECKPOINT_FORMAT = "lagid-checkpoint-v1"


def save_checkpoint(path, spec: ModelSpec, params: ParameterVector,
                    seed: int | None = None, metadata: dict | None = None) -> None:
    """Write a checkpoint that round-trips bit-exactly.

    Byte layout: a single UTF-8 JSON line (format tag, model spec, layout,
    seed, parameter count, metadata), one newline, then ``param_count``
    float64 values in little-endian order.
    """
    header = {"format": CHECKPOINT_FORMAT, "model": spec.to_dict(),
              "layout": {k: list(v) for k, v in params.layout.items()},
              "seed": seed, "param_count": int(params.size),
              "metadata": metadata or {}}
    blob = json.dumps(header, sort_keys=True).encode() + b"\n" \
        + params.values.astype("<f8").tobytes()
    Path(path).write_bytes(blob)


def load_checkpoint(path) -> tuple[ModelSpec, ParameterVector, dict]:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    header = json.loads(raw[:nl].decode())
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"not a {CHECKPOINT_FORMAT} file: {path}")
    values = np.frombuffer(raw[nl + 1:], dtype="<f8").astype(np.float64)
    if values.size != header["param_count"]:
        raise ConfigError("checkpoint parameter block is truncated")
    layout = {k: tuple(v) for k, v in header["layout"].items()}
    spec = ModelSpec.from_dict(header["model"])
    return spec, ParameterVector(values, layout), header
