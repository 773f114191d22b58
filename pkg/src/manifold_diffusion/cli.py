"""Command-line entry point: train, eval, sample, density, ablate.

Exit codes: 0 success, 2 configuration or input error, 3 numeric failure,
4 I/O error. Every output file starts with a ``#`` comment line carrying
the SHA-256 of the canonical run configuration and the seed.
"""

import argparse
import hashlib
import json
import logging
import math
import os
import sys
from pathlib import Path

import jsonschema
import numpy as np

from .errors import ConfigError, ConstraintError, DomainError, NumericFailureError, UnsupportedDensityError

THREADS_ENV = "MANIFOLD_DIFFUSION_THREADS"

_NUM = {"type": "number"}
_INT = {"type": "integer"}
_BOOL = {"type": "boolean"}
_STR = {"type": "string"}


def _obj(props, required=()):
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


RUN_SCHEMA = _obj(
    {
        "manifold": _obj({"kind": {"enum": ["sphere", "torus", "hyperboloid", "special_orthogonal"]}, "dim": _INT, "n": _INT, "curvature": _NUM}, ["kind"]),
        "network": _obj(
            {
                "activation": {"enum": ["sine", "swish"]},
                "hidden_layers": _INT,
                "hidden_width": _INT,
                "actnorm_first": _BOOL,
                "time_features": _INT,
                "horizon": _NUM,
            }
        ),
        "train": _obj(
            {
                "lr": _NUM,
                "b1": _NUM,
                "b2": _NUM,
                "eps": _NUM,
                "steps": _INT,
                "batch_size": _INT,
                "scheduler": {"enum": ["none", "cosine"]},
                "proposal_period": _INT,
                "proposal_steps": _INT,
                "proposal_lr": _NUM,
                "proposal_layers": _INT,
                "proposal_units": _INT,
                "n_steps": _INT,
                "grid": {"enum": ["uniform", "quadratic"]},
                "div_method": {"enum": ["qr", "hutchinson"]},
                "n_probes": _INT,
                "direct_torus": _BOOL,
                "clip_norm": _NUM,
                "n_train": _INT,
            }
        ),
        "paths": _obj({"out_dir": _STR, "checkpoint": _STR, "metrics": _STR}),
        "target": _obj(
            {
                "kind": {"enum": ["vmf-mixture", "wrapped-gaussian-mixture", "hyperbolic-checkerboard", "so3-multimodal"]},
                "means": {"type": "array"},
                "scales": {"type": ["array", "number"]},
                "weights": {"type": "array"},
                "concentration": _NUM,
            },
            ["kind"],
        ),
        "dataset": _obj({"path": _STR, "mapping": {"enum": ["latlon-to-sphere", "angles-to-torus", "ambient-raw"]}, "degrees": _BOOL}, ["path", "mapping"]),
        "eval": _obj({"kelbo_k": _INT, "n_points": _INT, "ode": _BOOL}),
    },
    ["manifold"],
)
RUN_SCHEMA["oneOf"] = [{"required": ["target"], "not": {"required": ["dataset"]}}, {"required": ["dataset"], "not": {"required": ["target"]}}]


class CliIOError(Exception):
    pass


def load_run_config(path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CliIOError(f"cannot read config {path}: {exc}") from exc
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    validate_run_config(cfg)
    return cfg


def validate_run_config(cfg):
    try:
        jsonschema.validate(cfg, RUN_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {exc.message}") from None


def config_hash(cfg):
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def header_line(cfg, seed, command):
    return f"# config_sha256={config_hash(cfg)} seed={seed} command={command}\n"


def _open_out(path):
    try:
        p = Path(path)
        if p.parent and not p.parent.exists():
            p.parent.mkdir(parents=True, exist_ok=True)
        return open(p, "w", encoding="utf-8", newline="")
    except OSError as exc:
        raise CliIOError(f"cannot write {path}: {exc}") from exc


def _fmt(v):
    return repr(float(v))


# building blocks shared by commands


def _manifold(cfg):
    from .manifolds import manifold_from_dict

    return manifold_from_dict(cfg["manifold"])


def _net_cfg(cfg, manifold):
    from .network import NetworkConfig

    net = dict(cfg.get("network", {}))
    net.setdefault("horizon", manifold.default_horizon)
    return NetworkConfig(ambient_dim=manifold.ambient_dim, **net)


# Adam learning rates per manifold kind when a config leaves lr unset
DEFAULT_LR = {"sphere": 2e-4, "torus": 3e-4, "hyperboloid": 5e-4, "special_orthogonal": 1e-3}


def _train_cfg(cfg, manifold, seed):
    from .manifolds import SpecialOrthogonal, Torus
    from .trainer import TrainConfig

    tr = dict(cfg.get("train", {}))
    tr.setdefault("lr", DEFAULT_LR[manifold.kind])
    tr.setdefault("n_steps", manifold.default_train_steps)
    if isinstance(manifold, Torus):
        tr.setdefault("direct_torus", True)
    if isinstance(manifold, SpecialOrthogonal):
        tr.setdefault("div_method", "hutchinson")
    return TrainConfig(seed=seed, **tr)


def _dataset(cfg, manifold, rng, n):
    from . import targets

    if "target" in cfg:
        spec = targets.target_from_dict(manifold, cfg["target"])
        return targets.sample(spec, rng, n)
    ds = cfg["dataset"]
    try:
        x = targets.ingest_csv(ds["path"], ds["mapping"], manifold=manifold, degrees=ds.get("degrees", False))
    except OSError as exc:
        raise CliIOError(f"cannot read dataset {ds['path']}: {exc}") from exc
    if x.shape[1] != manifold.ambient_dim:
        raise ConfigError(f"dataset has {x.shape[1]} coordinates but the manifold needs {manifold.ambient_dim}")
    return x


def _load(path):
    from .checkpoint import load_checkpoint

    try:
        return load_checkpoint(path)
    except OSError as exc:
        raise CliIOError(f"cannot read checkpoint {path}: {exc}") from exc


def _ckpt_config(state):
    from .checkpoint import state_to_dict

    d = state_to_dict(state)
    return {k: d[k] for k in ("manifold", "network", "train")}


# commands


def cmd_train(args):
    from .checkpoint import save_checkpoint
    from .numeric import RngStream
    from .trainer import train

    cfg = load_run_config(args.config)
    manifold = _manifold(cfg)
    net = _net_cfg(cfg, manifold)
    tcfg = _train_cfg(cfg, manifold, args.seed)
    paths = cfg.get("paths", {})
    out_dir = Path(args.out_dir or paths.get("out_dir", "."))
    ckpt = out_dir / paths.get("checkpoint", "checkpoint.json")
    metrics = out_dir / paths.get("metrics", "metrics.tsv")
    data = _dataset(cfg, manifold, RngStream(args.seed, 1), tcfg.n_train)
    header = header_line(cfg, args.seed, "train")
    _open_out(metrics).close()
    state = train(manifold, data, net, tcfg, metrics_path=metrics, dump_path=out_dir / "failure_state.json", header=header)
    try:
        save_checkpoint(state, ckpt, header=header.strip())
    except OSError as exc:
        raise CliIOError(f"cannot write checkpoint {ckpt}: {exc}") from exc
    print(f"wrote {ckpt} and {metrics}")
    return 0


def _eval_points(args, state):
    from . import targets
    from .numeric import RngStream

    m = state.model.manifold
    if args.data:
        try:
            return targets.ingest_csv(args.data, args.mapping, manifold=m, degrees=args.degrees)
        except OSError as exc:
            raise CliIOError(f"cannot read {args.data}: {exc}") from exc
    if args.config:
        cfg = load_run_config(args.config)
        n = args.n_points or cfg.get("eval", {}).get("n_points", 500)
        # stream 2 keeps evaluation draws disjoint from the training set
        return _dataset(cfg, m, RngStream(args.seed, 2), n)
    raise ConfigError("eval needs --data or --config")


def cmd_eval(args):
    import jax

    from .objective import kelbo, ode_log_likelihood

    state = _load(args.checkpoint)
    x = _eval_points(args, state)
    if args.n_points:
        x = x[: args.n_points]
    if len(x) == 0:
        raise ConfigError("no evaluation points")
    rows = []
    if args.kelbo_k > 0:
        nll = -kelbo(state.model, state.params, x, args.kelbo_k, jax.random.PRNGKey(args.seed), n_steps=args.kelbo_steps, grid=args.kelbo_grid)
        rows.append((f"kelbo_k{args.kelbo_k}", nll))
    if args.ode:
        rows.append(("ode", -ode_log_likelihood(state.model, state.params, x)))
    out = _open_out(args.out) if args.out else sys.stdout
    try:
        out.write(header_line(_ckpt_config(state), args.seed, "eval"))
        out.write("method\tnll_mean\tnll_std\tnll_se\tn_points\n")
        for name, v in rows:
            if not np.all(np.isfinite(v)):
                raise NumericFailureError(f"non-finite {name} values")
            sd = float(np.std(v, ddof=1)) if v.size > 1 else 0.0
            out.write(f"{name}\t{_fmt(v.mean())}\t{_fmt(sd)}\t{_fmt(sd / math.sqrt(v.size))}\t{v.size}\n")
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


def cmd_sample(args):
    import jax

    from .objective import generative_sample
    from .sde import _check_on_manifold

    state = _load(args.checkpoint)
    if args.n < 0:
        raise ConfigError("--n must be >= 0")
    m = state.model.manifold
    cols = [f"x{i}" for i in range(m.ambient_dim)]
    if args.n > 0:
        x = np.asarray(generative_sample(state.model, state.params, jax.random.PRNGKey(args.seed), args.n, lam=args.lam, n_steps=args.steps))
        _check_on_manifold(m, x)
    else:
        x = np.zeros((0, m.ambient_dim))
    with _open_out(args.out) as fh:
        fh.write(header_line(_ckpt_config(state), args.seed, "sample"))
        fh.write(",".join(cols) + "\n")
        for row in x:
            fh.write(",".join(_fmt(v) for v in row) + "\n")
    return 0


def density_grid(manifold, grid, extent=3.0):
    """(chart coords, ambient points, cell areas, chart column names)."""
    from .manifolds import Hyperboloid, Sphere, Torus

    try:
        dims = [int(g) for g in grid.lower().split("x")]
    except ValueError:
        raise ConfigError(f"bad grid spec {grid!r}") from None
    if any(n < 1 for n in dims):
        raise ConfigError("grid sizes must be positive")
    if isinstance(manifold, Sphere) and manifold.d == 2:
        nt, npf = (dims + dims)[:2]
        th = (np.arange(nt) + 0.5) * math.pi / nt
        ph = (np.arange(npf) + 0.5) * 2 * math.pi / npf - math.pi
        T, P = np.meshgrid(th, ph, indexing="ij")
        x = np.stack([np.sin(T) * np.cos(P), np.sin(T) * np.sin(P), np.cos(T)], -1).reshape(-1, 3)
        area = (np.sin(T) * (math.pi / nt) * (2 * math.pi / npf)).reshape(-1)
        return np.stack([T.reshape(-1), P.reshape(-1)], -1), x, area, ["theta", "phi"]
    if isinstance(manifold, (Sphere, Torus)):
        d = manifold.d if isinstance(manifold, Torus) else 1
        if isinstance(manifold, Sphere) and manifold.d != 1:
            raise ConfigError("density grids exist for S^1 and S^2 only")
        dims = (dims * d)[:d]
        axes = [(np.arange(n) + 0.5) * 2 * math.pi / n for n in dims]
        mesh = np.stack([a.reshape(-1) for a in np.meshgrid(*axes, indexing="ij")], -1)
        x = np.stack([np.cos(mesh), np.sin(mesh)], -1).reshape(len(mesh), -1)
        area = np.full(len(mesh), float(np.prod([2 * math.pi / n for n in dims])))
        return mesh, x, area, [f"angle{i}" for i in range(d)]
    if isinstance(manifold, Hyperboloid) and manifold.d == 2:
        n1, n2 = (dims + dims)[:2]
        a = -extent + (np.arange(n1) + 0.5) * 2 * extent / n1
        b = -extent + (np.arange(n2) + 0.5) * 2 * extent / n2
        A, B = np.meshgrid(a, b, indexing="ij")
        v = np.stack([A.reshape(-1), B.reshape(-1)], -1)
        x = np.asarray(manifold.lift(v))
        area = np.exp(0.5 * np.asarray(manifold.log_det_euclidean_metric(x))) * (2 * extent / n1) * (2 * extent / n2)
        return v, x, area, ["u1", "u2"]
    raise ConfigError(f"no density grid for {manifold.kind} of dimension {manifold.dim}")


def cmd_density(args):
    from .objective import ode_log_likelihood

    state = _load(args.checkpoint)
    chart, x, area, names = density_grid(state.model.manifold, args.grid, args.extent)
    ll = ode_log_likelihood(state.model, state.params, x)
    if not np.all(np.isfinite(ll)):
        raise NumericFailureError("non-finite log-density on the grid")
    m = state.model.manifold
    with _open_out(args.out) as fh:
        fh.write(header_line(_ckpt_config(state), 0, "density"))
        fh.write(",".join(names + [f"x{i}" for i in range(m.ambient_dim)] + ["log_density", "cell_area"]) + "\n")
        for c, p, l, a in zip(chart, x, ll, area):
            fh.write(",".join(_fmt(v) for v in list(c) + list(p) + [l, a]) + "\n")
    mass = float(np.sum(np.exp(ll) * area))
    print(f"grid mass {mass:.6f}")
    return 0


def cmd_ablate(args):
    import jax

    from . import ablation
    from .numeric import RngStream
    from .trainer import train

    if args.checkpoint:
        state = _load(args.checkpoint)
        cfg = load_run_config(args.config) if args.config else None
        if cfg is None:
            raise ConfigError("ablate needs --config to draw data points")
        hdr_cfg = _ckpt_config(state)
    else:
        if not args.config:
            raise ConfigError("ablate needs --checkpoint or --config")
        cfg = load_run_config(args.config)
        m = _manifold(cfg)
        tcfg = _train_cfg(cfg, m, args.seed)
        data = _dataset(cfg, m, RngStream(args.seed, 1), tcfg.n_train)
        state = train(m, data, _net_cfg(cfg, m), tcfg)
        hdr_cfg = cfg
    m = state.model.manifold
    data = _dataset(cfg, m, RngStream(args.seed, 2), max(args.n_draws, 1))
    key = jax.random.PRNGKey(args.seed)
    if args.mode == "int-steps":
        from .manifolds import Torus

        if not isinstance(m, Torus):
            raise ConfigError("the integration-steps ablation compares against direct sampling on tori")
        rows = ablation.integration_steps(state.model, state.params, state.prop_layers, data, args.n_draws, key)
        direct = next(r for r in rows if r[0] == "direct")[1]
        rows = [r + (abs(r[1] - direct),) for r in rows]
        cols = ["setting", "loss", "se", "variance", "gap_to_direct"]
    elif args.mode == "importance":
        rows = ablation.importance(state.model, state.params, state.prop_layers, data, args.n_draws, key)
        cols = ["proposal", "loss", "se", "variance"]
    else:
        rows = ablation.divergence_methods(state.model, state.params, state.prop_layers, data, args.n_draws, key)
        cols = ["divergence", "loss", "se", "variance"]
    out = _open_out(args.out) if args.out else sys.stdout
    try:
        out.write(header_line(hdr_cfg, args.seed, f"ablate-{args.mode}"))
        out.write("\t".join(cols) + "\n")
        for r in rows:
            out.write("\t".join([r[0]] + [_fmt(v) for v in r[1:]]) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="manifold-diffusion", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None, help=f"cap on worker threads (default from ${THREADS_ENV})")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a run config")
    t.add_argument("config")
    t.add_argument("--seed", type=int, required=True)
    t.add_argument("--out-dir", default=None)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="negative log-likelihood report")
    e.add_argument("checkpoint")
    e.add_argument("--data", help="CSV of evaluation points")
    e.add_argument("--mapping", default="ambient-raw", choices=["latlon-to-sphere", "angles-to-torus", "ambient-raw"])
    e.add_argument("--degrees", action="store_true")
    e.add_argument("--config", help="run config whose target supplies held-out points")
    e.add_argument("--n-points", type=int, default=None)
    e.add_argument("--kelbo-k", type=int, default=100)
    e.add_argument("--kelbo-steps", type=int, default=1000, help="time steps per KELBO path")
    e.add_argument("--kelbo-grid", default="quadratic", choices=["uniform", "quadratic"], help="quadratic is dense near the data end")
    e.add_argument("--ode", action="store_true")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", default=None)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sample", help="draw generative samples")
    s.add_argument("checkpoint")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--lambda", dest="lam", type=float, default=0.0)
    s.add_argument("--steps", type=int, default=None, help="integration steps (default: checkpoint's)")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    d = sub.add_parser("density", help="log-density on a chart grid via the ODE")
    d.add_argument("checkpoint")
    d.add_argument("--grid", default="64x128")
    d.add_argument("--extent", type=float, default=3.0, help="half-width of the hyperboloid chart window")
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_density)

    a = sub.add_parser("ablate", help="estimator comparison tables")
    a.add_argument("--checkpoint", default=None)
    a.add_argument("--config", default=None)
    a.add_argument("--mode", required=True, choices=["int-steps", "importance", "hutchinson-vs-qr"])
    a.add_argument("--n-draws", type=int, default=10_000)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", default=None)
    a.set_defaults(func=cmd_ablate)
    return p


def _limit_threads(n):
    if n is None:
        env = os.environ.get(THREADS_ENV)
        n = int(env) if env else None
    if n is None:
        return
    if n < 1:
        raise ConfigError("--threads must be >= 1")
    flags = os.environ.get("XLA_FLAGS", "")
    os.environ["XLA_FLAGS"] = f"{flags} --xla_cpu_multi_thread_eigen=false intra_op_parallelism_threads={n}".strip()
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        _limit_threads(args.threads)
        return args.func(args)
    except (ConfigError, ConstraintError, DomainError, UnsupportedDensityError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NumericFailureError, ArithmeticError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (CliIOError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
