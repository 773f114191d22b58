"""JSON checkpoints with bit-exact floats.

Every float is stored with ``float.hex`` so a save/load round trip
reproduces parameters exactly. Arrays are listed in declaration order as
{"name", "shape", "data"} records.
"""

import json
from pathlib import Path

import jax.numpy as jnp
import numpy as np

from . import network, proposal
from .errors import ConfigError
from .manifolds import manifold_from_dict
from .trainer import AdamState, TrainConfig, TrainState, build_model

FORMAT = "manifold-diffusion-checkpoint/1"


def _enc(a):
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "data": [float(v).hex() for v in a.reshape(-1)]}


def _dec(rec):
    return np.asarray([float.fromhex(v) for v in rec["data"]], dtype=np.float64).reshape(rec["shape"])


def _named(pairs):
    return [dict(name=n, **_enc(a)) for n, a in pairs]


def _unnamed(recs):
    return [(r["name"], _dec(r)) for r in recs]


def _prop_pairs(layers):
    return [(f"{i}.{k}", layer[k]) for i, layer in enumerate(layers) for k in ("a", "b", "w")]


def _prop_from_pairs(pairs):
    layers = {}
    for name, arr in pairs:
        i, k = name.split(".")
        layers.setdefault(int(i), {})[k] = jnp.asarray(arr)
    return [layers[i] for i in sorted(layers)]


def state_to_dict(state):
    opt = state.opt
    popt = state.prop_opt
    d = {
        "format": FORMAT,
        "manifold": state.model.manifold.to_dict(),
        "network": state.model.net.to_dict(),
        "train": state.train_cfg.to_dict(),
        "seed": state.train_cfg.seed,
        "step": state.step,
        "horizon": float(state.model.horizon).hex(),
        "params": _named(network.flatten_params(state.params)),
        "proposal": _named(_prop_pairs(state.prop_layers)),
        "optimizer": {
            "count": opt.count,
            "skipped": opt.skipped,
            "m": _named(network.flatten_params(opt.m)),
            "v": _named(network.flatten_params(opt.v)),
        },
        "proposal_optimizer": {
            "count": popt.step,
            "lr": float(popt.lr).hex(),
            "m": _named(_prop_pairs(popt.m)) if popt.m is not None else None,
            "v": _named(_prop_pairs(popt.v)) if popt.v is not None else None,
        },
    }
    return d


def state_from_dict(d):
    if d.get("format") != FORMAT:
        raise ConfigError(f"unrecognised checkpoint format {d.get('format')!r}")
    manifold = manifold_from_dict(d["manifold"])
    net_cfg = network.NetworkConfig.from_dict(d["network"])
    if float.fromhex(d["horizon"]) != net_cfg.horizon:
        raise ConfigError("checkpoint horizon disagrees with its network config")
    cfg = TrainConfig(**d["train"])
    params = network.unflatten_params(_unnamed(d["params"]))
    o = d["optimizer"]
    opt = AdamState(network.unflatten_params(_unnamed(o["m"])), network.unflatten_params(_unnamed(o["v"])), o["count"], o["skipped"])
    po = d["proposal_optimizer"]
    popt = proposal.ProposalAdam(lr=float.fromhex(po["lr"]), step=po["count"])
    if po["m"] is not None:
        popt.m = _prop_from_pairs(_unnamed(po["m"]))
        popt.v = _prop_from_pairs(_unnamed(po["v"]))
    return TrainState(
        build_model(manifold, net_cfg, cfg),
        cfg,
        params,
        _prop_from_pairs(_unnamed(d["proposal"])),
        opt,
        popt,
        step=d["step"],
    )


def save_checkpoint(state, path, header=None):
    d = state_to_dict(state)
    if header:
        d["header"] = header
    Path(path).write_text(json.dumps(d), encoding="utf-8")


def load_checkpoint(path):
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not a valid checkpoint ({exc})") from exc
    return state_from_dict(d)
