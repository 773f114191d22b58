"""Adam training loop with interleaved time-proposal updates."""

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, replace

import jax
import jax.numpy as jnp
import numpy as np

from . import network, proposal
from .errors import ConfigError, NumericFailureError
from .objective import Model, loss_and_grad, proposal_loss_and_grad

log = logging.getLogger(__name__)

SCHEDULERS = ("none", "cosine")
METRIC_COLUMNS = ("step", "loss", "loss_std", "lr", "proposal_variance")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-4
    b1: float = 0.9
    b2: float = 0.999
    eps: float = 1e-8
    steps: int = 5000
    batch_size: int = 256
    scheduler: str = "cosine"
    proposal_period: int = 500
    proposal_steps: int = 50
    proposal_lr: float = 0.01
    proposal_layers: int = 2
    proposal_units: int = 8
    n_steps: int = 100
    grid: str = "uniform"
    seed: int = 0
    div_method: str = "qr"
    n_probes: int = 1
    direct_torus: bool = False
    clip_norm: float = 100.0
    n_train: int = 20000

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("learning rate must be positive")
        if not (0 <= self.b1 < 1 and 0 <= self.b2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.batch_size < 1 or self.n_steps < 1:
            raise ConfigError("batch_size and n_steps must be >= 1")
        if self.scheduler not in SCHEDULERS:
            raise ConfigError(f"scheduler must be one of {SCHEDULERS}")
        if self.proposal_period < 1:
            raise ConfigError("proposal_period must be >= 1")

    def to_dict(self):
        return asdict(self)


@dataclass
class AdamState:
    m: object
    v: object
    count: int = 0
    skipped: int = 0


def adam_init(params):
    zeros = jax.tree_util.tree_map(jnp.zeros_like, params)
    return AdamState(zeros, jax.tree_util.tree_map(jnp.zeros_like, params))


@jax.jit
def _adam_update(params, grads, m, v, t, lr, b1, b2, eps):
    m = jax.tree_util.tree_map(lambda m_, g: b1 * m_ + (1 - b1) * g, m, grads)
    v = jax.tree_util.tree_map(lambda v_, g: b2 * v_ + (1 - b2) * g * g, v, grads)
    c1 = 1 - b1**t
    c2 = 1 - b2**t
    new = jax.tree_util.tree_map(lambda p, m_, v_: p - lr * (m_ / c1) / (jnp.sqrt(v_ / c2) + eps), params, m, v)
    return new, m, v


def _all_finite(tree):
    return all(bool(jnp.all(jnp.isfinite(leaf))) for leaf in jax.tree_util.tree_leaves(tree))


def adam_step(params, grads, state, lr_t, b1=0.9, b2=0.999, eps=1e-8):
    """Bias-corrected Adam; non-finite gradients skip the step with a warning."""
    if jax.tree_util.tree_structure(params) != jax.tree_util.tree_structure(grads):
        raise ValueError("gradient structure does not match parameters")
    for p, g in zip(jax.tree_util.tree_leaves(params), jax.tree_util.tree_leaves(grads)):
        if jnp.shape(p) != jnp.shape(g):
            raise ValueError(f"gradient shape {jnp.shape(g)} does not match parameter {jnp.shape(p)}")
    if not _all_finite(grads):
        warnings.warn("non-finite gradient; skipping update", RuntimeWarning, stacklevel=2)
        return params, replace(state, skipped=state.skipped + 1)
    t = state.count + 1
    new, m, v = _adam_update(params, grads, state.m, state.v, float(t), float(lr_t), b1, b2, eps)
    return new, AdamState(m, v, t, state.skipped)


def learning_rate(cfg, step):
    if cfg.scheduler == "cosine":
        return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * step / max(cfg.steps, 1)))
    return cfg.lr


def global_norm(tree):
    return math.sqrt(sum(float(jnp.sum(leaf * leaf)) for leaf in jax.tree_util.tree_leaves(tree)))


@dataclass
class TrainState:
    model: Model
    train_cfg: TrainConfig
    params: dict
    prop_layers: list
    opt: AdamState
    prop_opt: proposal.ProposalAdam
    step: int = 0
    metrics: list = field(default_factory=list)
    clipped: int = 0

    @property
    def proposal_cfg(self):
        return proposal.ProposalConfig(self.model.horizon, self.train_cfg.proposal_layers, self.train_cfg.proposal_units)


def build_model(manifold, net_cfg, cfg):
    return Model(manifold, net_cfg, n_steps=cfg.n_steps, div_method=cfg.div_method, n_probes=cfg.n_probes, direct_torus=cfg.direct_torus, grid=cfg.grid)


def init_state(manifold, net_cfg, cfg, data):
    key = jax.random.PRNGKey(cfg.seed)
    model = build_model(manifold, net_cfg, cfg)
    calib = None
    if net_cfg.actnorm_first:
        kc = jax.random.fold_in(key, 11)
        idx = jax.random.choice(kc, data.shape[0], (min(1024, data.shape[0]),))
        s = jax.random.uniform(jax.random.fold_in(kc, 1), idx.shape) * net_cfg.horizon
        calib = (data[idx], s)
    params = network.init(net_cfg, jax.random.fold_in(key, 1), calibration=calib)
    pcfg = proposal.ProposalConfig(net_cfg.horizon, cfg.proposal_layers, cfg.proposal_units)
    return TrainState(model, cfg, params, proposal.init_proposal(pcfg), adam_init(params), proposal.ProposalAdam(lr=cfg.proposal_lr))


def _batch(data, key, size):
    idx = jax.random.randint(key, (size,), 0, data.shape[0])
    return data[idx]


def _dump_and_abort(state, step, loss, dump_path):
    info = {"step": step, "loss": repr(loss), "opt_count": state.opt.count, "skipped": state.opt.skipped, "recent_metrics": state.metrics[-5:]}
    if dump_path is not None:
        from .checkpoint import save_checkpoint

        save_checkpoint(state, dump_path)
        info["state_dump"] = str(dump_path)
    raise NumericFailureError(f"non-finite loss at step {step}: {json.dumps(info)}")


def run_proposal_phase(state, data, key):
    cfg = state.train_cfg
    pcfg = state.proposal_cfg

    def sq_grad(layers, x, k):
        return proposal_loss_and_grad(layers, state.model, state.params, x, k)

    loss = float("nan")
    for j in range(cfg.proposal_steps):
        kj = jax.random.fold_in(key, j)
        x = _batch(data, jax.random.fold_in(kj, 0), cfg.batch_size)
        state.prop_layers, state.prop_opt, loss = proposal.proposal_variance_step(state.prop_layers, state.prop_opt, sq_grad, pcfg, x, jax.random.fold_in(kj, 1))
    return loss


def train_steps(state, data, n, metrics_fh=None, dump_path=None):
    """Advance ``state`` by n optimizer steps (in place) and return it."""
    cfg = state.train_cfg
    data = jnp.asarray(data)
    base = jax.random.PRNGKey(cfg.seed)
    for _ in range(n):
        t = state.step
        if t > 0 and t % cfg.proposal_period == 0 and cfg.proposal_steps > 0:
            run_proposal_phase(state, data, jax.random.fold_in(jax.random.fold_in(base, 2), t))
        kt = jax.random.fold_in(jax.random.fold_in(base, 3), t)
        x = _batch(data, jax.random.fold_in(kt, 0), cfg.batch_size)
        loss, ivals, grads = loss_and_grad(state.params, state.model, state.prop_layers, x, jax.random.fold_in(kt, 1))
        loss = float(loss)
        if not math.isfinite(loss):
            _dump_and_abort(state, t, loss, dump_path)
        if _all_finite(grads):
            gn = global_norm(grads)
            if gn > cfg.clip_norm:
                state.clipped += 1
                log.warning("step %d: gradient norm %.3g clipped to %.3g", t, gn, cfg.clip_norm)
                grads = jax.tree_util.tree_map(lambda g: g * (cfg.clip_norm / gn), grads)
        lr_t = learning_rate(cfg, t)
        state.params, state.opt = adam_step(state.params, grads, state.opt, lr_t, cfg.b1, cfg.b2, cfg.eps)
        ivals = np.asarray(ivals)
        var = float(np.var(ivals, ddof=1)) if ivals.size > 1 else 0.0
        row = (t, loss, math.sqrt(var / ivals.size), lr_t, var)
        state.metrics.append(row)
        if metrics_fh is not None:
            metrics_fh.write(format_metrics_row(row))
        state.step += 1
    return state


def format_metrics_row(row):
    t, loss, std, lr, var = row
    return f"{t}\t{loss!r}\t{std!r}\t{lr!r}\t{var!r}\n"


def train(manifold, data, net_cfg, cfg, metrics_path=None, dump_path=None, header=None):
    """Train from scratch on an (n, m) array of points; returns the final state."""
    data = manifold.check(np.asarray(data))
    if data.shape[0] == 0:
        raise ConfigError("training data is empty")
    state = init_state(manifold, net_cfg, cfg, jnp.asarray(data))
    fh = open(metrics_path, "w", encoding="utf-8") if metrics_path is not None else None
    try:
        if fh is not None:
            if header:
                fh.write(header)
            fh.write("\t".join(METRIC_COLUMNS) + "\n")
        train_steps(state, data, cfg.steps, fh, dump_path)
    finally:
        if fh is not None:
            fh.close()
    return state
