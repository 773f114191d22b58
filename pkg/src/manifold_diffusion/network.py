"""MLP for the variational field a(x, s) over ambient coordinates and time."""

from dataclasses import asdict, dataclass

import jax
import jax.numpy as jnp
import numpy as np

from .errors import ConfigError

ACTIVATIONS = ("sine", "swish")


@dataclass(frozen=True)
class NetworkConfig:
    ambient_dim: int
    activation: str = "sine"
    hidden_layers: int = 3
    hidden_width: int = 64
    actnorm_first: bool = False
    time_features: int = 1
    horizon: float = 1.0

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}")
        if self.hidden_layers < 1 or self.hidden_width < 1:
            raise ConfigError("need at least one hidden layer of width >= 1")
        if self.time_features < 1:
            raise ConfigError("time_features must be >= 1")
        if not self.horizon > 0:
            raise ConfigError("horizon must be positive")

    @property
    def input_dim(self):
        return self.ambient_dim + self.time_features

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _act(name, h):
    if name == "sine":
        return jnp.sin(h)
    return h * jax.nn.sigmoid(h)


def time_features(config, s):
    tau = jnp.asarray(s) / config.horizon
    feats = [tau]
    for j in range(1, config.time_features):
        feats.append(jnp.cos(j * jnp.pi * tau))
    return jnp.stack(feats, axis=-1)


def _first_preactivation(config, params, x, s):
    s = jnp.broadcast_to(jnp.asarray(s, dtype=x.dtype), jnp.shape(x)[:-1])
    h = jnp.concatenate([x, time_features(config, s)], axis=-1)
    layer = params["layers"][0]
    return h @ layer["w"] + layer["b"]


def apply(config, params, x, s):
    """a(x, s) for x of shape (..., m) and s broadcastable to x's batch shape."""
    if jnp.shape(x)[-1] != config.ambient_dim:
        raise ValueError(f"network expects {config.ambient_dim} coordinates, got {jnp.shape(x)[-1]}")
    h = _first_preactivation(config, params, x, s)
    if "actnorm" in params:
        h = (h + params["actnorm"]["shift"]) * params["actnorm"]["scale"]
    h = _act(config.activation, h)
    for layer in params["layers"][1:-1]:
        h = _act(config.activation, h @ layer["w"] + layer["b"])
    last = params["layers"][-1]
    return h @ last["w"] + last["b"]


def init(config, key, calibration=None, zero_last=True):
    """Fan-in Gaussian weights, zero biases, zero output layer.

    ``calibration`` is an (x, s) batch used to set the ActNorm statistics
    when ``config.actnorm_first``.
    """
    sizes = [config.input_dim] + [config.hidden_width] * config.hidden_layers + [config.ambient_dim]
    keys = jax.random.split(key, len(sizes) - 1)
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        w = jax.random.normal(keys[i], (fan_in, fan_out)) / jnp.sqrt(fan_in)
        if zero_last and i == len(sizes) - 2:
            w = jnp.zeros_like(w)
        layers.append({"w": w, "b": jnp.zeros(fan_out)})
    params = {"layers": layers}
    if config.actnorm_first:
        if calibration is None or len(calibration[0]) == 0:
            raise ConfigError("actnorm_first needs a nonempty calibration batch")
        x, s = (jnp.asarray(c, dtype=jnp.float64) for c in calibration)
        pre = _first_preactivation(config, params, x, s)
        mean = jnp.mean(pre, axis=0)
        std = jnp.std(pre, axis=0)
        params["actnorm"] = {"shift": -mean, "scale": 1.0 / jnp.maximum(std, 1e-12)}
    return params


def param_names(params):
    names = []
    for i, _ in enumerate(params["layers"]):
        names += [f"layers.{i}.w", f"layers.{i}.b"]
    if "actnorm" in params:
        names += ["actnorm.shift", "actnorm.scale"]
    return names


def flatten_params(params):
    """(name, array) pairs in declaration order."""
    out = []
    for name in param_names(params):
        node = params
        for part in name.split("."):
            node = node[int(part)] if part.isdigit() else node[part]
        out.append((name, np.asarray(node)))
    return out


def unflatten_params(named):
    named = dict(named)
    n_layers = sum(1 for k in named if k.startswith("layers.") and k.endswith(".w"))
    params = {"layers": [{"w": jnp.asarray(named[f"layers.{i}.w"]), "b": jnp.asarray(named[f"layers.{i}.b"])} for i in range(n_layers)]}
    if "actnorm.shift" in named:
        params["actnorm"] = {"shift": jnp.asarray(named["actnorm.shift"]), "scale": jnp.asarray(named["actnorm.scale"])}
    return params


def lipschitz_bound_in_time(config, params):
    """Crude bound on |d a / d s| from the product of layer spectral norms."""
    bound = 1.0 / config.horizon * max(1.0, np.pi * (config.time_features - 1))
    if "actnorm" in params:
        bound *= float(jnp.max(jnp.abs(params["actnorm"]["scale"])))
    # sine is 1-Lipschitz; swish is below 1.1
    act_lip = 1.0 if config.activation == "sine" else 1.1
    for layer in params["layers"]:
        bound *= float(np.linalg.norm(np.asarray(layer["w"]), 2))
    return bound * act_lip ** config.hidden_layers
