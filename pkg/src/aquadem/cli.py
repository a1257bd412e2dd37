"""Experiment driver.

    aquadem <command> --config <path|preset> [--seed N] [--out DIR] [--force]

A config file is JSON holding ``{"format": "aquadem-config", "version": 1}``,
an optional ``"preset"`` to start from (default ``desk``) and any sections to
override. Every run writes the fully resolved config as ``config.json`` next to
its artifacts; pointing ``--config`` at that file reproduces them byte for byte.

Exit codes: 0 success, 2 validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import itertools
import json
import subprocess
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from aquadem.envs import (
    DIAGONAL,
    RIGHT,
    UP,
    DemoDataset,
    DiscretizedEnv,
    GridDemonstrator,
    GridWorld,
    PlayGridWorld,
    bang_bang_candidates,
    generate_demos,
    generate_play_demos,
)
from aquadem.errors import AquademError, InputError, NumericalError, StructuralError
from aquadem.imitation import (
    GAIL_TRACE_COLUMNS,
    BcConfig,
    BcPolicy,
    GailConfig,
    MdnPolicy,
    PlayConfig,
    train_aquagail,
    train_aquaplay,
    train_bc,
    train_mdn,
)
from aquadem.metrics import (
    action_field_export,
    candidate_spread,
    evaluate,
    field_csv,
    field_svg,
    mode_coverage,
    probe_grid,
    sinkhorn_distance,
    subsample,
    support_probes,
)
from aquadem.nn import dumps_document, load_document
from aquadem.quantizer import (
    TrainConfig,
    generator_from_dict,
    kmeans_candidates,
    random_candidates,
    train_quantizer,
)
from aquadem.rl import TRACE_COLUMNS, GreedyPolicy, MdqnConfig, QNetwork, TraceRow, trace_csv, train_aquadqn

CONFIG_FORMAT = "aquadem-config"
CONFIG_VERSION = 1
POLICY_FORMAT = "aquadem-policy"
ALGOS = ("aquadqn", "aquagail", "aquaplay", "bc", "mdn", "bangbang_dqn")
CANDIDATES = ("aquadem", "kmeans", "random")
EXIT_VALIDATION, EXIT_NUMERICAL = 2, 3


class ConfigError(InputError):
    pass


def _fields(cls, drop=()):
    return {f.name: _plain(getattr(cls(), f.name)) for f in fields(cls) if f.name not in drop}


def _plain(v):
    if isinstance(v, tuple):
        return list(v)
    if hasattr(v, "__dataclass_fields__"):
        return {k: _plain(x) for k, x in asdict(v).items()}
    return v


def _base():
    gail = _fields(GailConfig, drop=("learner",))
    gail["learner"] = _plain(GailConfig().learner)
    play = PlayConfig()
    return {
        "format": CONFIG_FORMAT,
        "version": CONFIG_VERSION,
        "preset": "desk",
        "seed": 0,
        "env": {"name": "gridworld"},
        "demos": {"n_episodes": 25, "path": None},
        "quantizer": {**_fields(TrainConfig, drop=("seed",)), "candidates": "aquadem", "path": None},
        "rl": _fields(MdqnConfig),
        "gail": gail,
        "bc": _fields(BcConfig, drop=("seed",)),
        "mdn": _fields(TrainConfig, drop=("seed",)),
        "bangbang": {"bins": 3},
        "play": {
            "tasks": [0, 1, 2, 3],
            "n_episodes": 50,
            "quantizer": {k: v for k, v in _plain(play.quantizer).items() if k != "seed"},
            "learner": _plain(play.learner),
        },
        "metrics": {"eval_episodes": 30, "sinkhorn_epsilon": 1e-2, "sinkhorn_cap": 2000},
        "train": {"algo": "aquadqn"},
        "visualize": {
            "series": [[1, 0.01], [2, 0.01], [3, 0.01], [3, 0.001], [3, 10.0]],
            "probe_n": 20,
            "support_radius": 0.05,
            "quantizer": None,
        },
        "eval": {"policy": None, "quantizer": None},
        "sweep": {"command": "train-quantizer", "grid": {}, "metric": "final_loss",
                  "descending": False, "cap": 64, "parallel": 1},
    }


def _merge(base, override, path=""):
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in out:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(out[key], dict) and key not in ("grid",):
            if not isinstance(value, dict):
                raise ConfigError(f"{where!r} must be an object")
            out[key] = _merge(out[key], value, where + ".")
        else:
            out[key] = value
    return out


# desk: gridworld-sized networks and budgets; the paper presets carry the
# published best values and full-scale budgets
_DESK = {
    "quantizer": {"K": 3, "temperature": 0.01, "batch_size": 64, "gradient_steps": 5_000},
    "rl": {"learning_rate": 3e-5, "batch_size": 64},
    "mdn": {"K": 3, "temperature": 0.01, "batch_size": 64, "gradient_steps": 5_000,
            "input_dropout": 0.0, "hidden_dropout": 0.0},
    "bc": {"hidden": [64], "gradient_steps": 5_000},
    "gail": {"learner": {"learning_rate": 3e-5}},
}
_PAPER_NETS = {"hidden": [512, 512, 256], "hidden_activations": ["layer_norm_tanh", "elu", "elu"],
               "total_steps": 1_000_000, "eval_every": 50_000, "eval_episodes": 30,
               "batch_size": 256}
PRESETS = {
    "desk": _DESK,
    "paper-lfd": {
        "quantizer": {"learning_rate": 3e-4, "input_dropout": 0.1, "hidden_dropout": 0.1,
                      "temperature": 1e-3, "K": 10, "gradient_steps": 50_000, "batch_size": 256},
        "rl": {**_PAPER_NETS, "learning_rate": 1e-4, "n_step": 3, "epsilon": 0.1,
               "demo_ratio": 0.25, "demo_min_reward": 0.01},
        "mdn": {"learning_rate": 3e-4, "input_dropout": 0.0, "hidden_dropout": 0.0,
                "temperature": 1e-3, "K": 10, "gradient_steps": 50_000, "batch_size": 256},
        "bangbang": {"bins": 5},
    },
    "paper-il": {
        "quantizer": {"learning_rate": 3e-4, "input_dropout": 0.0, "hidden_dropout": 0.0,
                      "temperature": 1e-3, "K": 10, "gradient_steps": 50_000, "batch_size": 256},
        "gail": {"disc_learning_rate": 1e-6, "disc_hidden": [64], "disc_regularization": "dropout",
                 "disc_input_dropout": 0.5, "disc_hidden_dropout": 0.5, "disc_obs_normalization": True,
                 "reward_balance": 0.5,
                 "learner": {**_PAPER_NETS, "learning_rate": 3e-5, "n_step": 1, "epsilon": 0.01}},
        "bc": {"learning_rate": 3e-4, "hidden": [256], "activation": "tanh", "obs_normalization": True,
               "weight_decay": 0.0, "dropout": 0.0},
        "train": {"algo": "aquagail"},
    },
    "paper-play": {
        "play": {"quantizer": {"learning_rate": 1e-3, "input_dropout": 0.1, "hidden_dropout": 0.1,
                               "temperature": 1e-4, "K": 30, "gradient_steps": 50_000, "batch_size": 256},
                 "learner": {**_PAPER_NETS, "learning_rate": 1e-4, "n_step": 3, "epsilon": 0.1}},
        "bangbang": {"bins": 5},
        "env": {"name": "play"},
        "train": {"algo": "aquaplay"},
    },
}


def resolve_config(source, seed=None):
    """Preset name, path, or dict -> fully populated config dict."""
    if isinstance(source, dict):
        doc = source
    elif str(source) in PRESETS:
        doc = {"format": CONFIG_FORMAT, "version": CONFIG_VERSION, "preset": str(source)}
    else:
        path = Path(source)
        if not path.is_file():
            raise ConfigError(f"config {source!r} is neither a file nor a preset ({', '.join(PRESETS)})")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    if doc.get("format") != CONFIG_FORMAT or doc.get("version") != CONFIG_VERSION:
        raise ConfigError(f"expected format {CONFIG_FORMAT!r} version {CONFIG_VERSION}")
    preset = doc.get("preset", "desk")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    cfg = _merge(_merge(_base(), PRESETS[preset]), {k: v for k, v in doc.items()})
    if seed is not None:
        cfg["seed"] = seed
    _validate(cfg)
    return cfg


def _validate(cfg):
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("seed must be a nonnegative integer")
    if cfg["env"]["name"] not in ("gridworld", "play"):
        raise ConfigError("env.name must be 'gridworld' or 'play'")
    if cfg["quantizer"]["candidates"] not in CANDIDATES:
        raise ConfigError(f"quantizer.candidates must be one of {CANDIDATES}")
    if cfg["train"]["algo"] not in ALGOS:
        raise ConfigError(f"train.algo must be one of {ALGOS}")
    # building every typed config surfaces bad values before any work starts
    _train_config(cfg["quantizer"], 0)
    _train_config(cfg["mdn"], 0)
    MdqnConfig(**cfg["rl"])
    _gail_config(cfg)
    BcConfig(**cfg["bc"])
    _play_config(cfg, 0)


def _strip(section, *keys):
    return {k: v for k, v in section.items() if k not in keys}


def _train_config(section, seed):
    try:
        return TrainConfig(**_strip(section, "candidates", "path"), seed=seed)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _gail_config(cfg):
    return GailConfig(**cfg["gail"])


def _play_config(cfg, seed):
    play = cfg["play"]
    return PlayConfig(quantizer=_train_config(play["quantizer"], seed), learner=MdqnConfig(**play["learner"]))


# -- artifacts ------------------------------------------------------------------


class Run:
    """An output directory; refuses to reuse a populated one unless forced."""

    def __init__(self, out, cfg, force):
        self.dir = Path(out)
        if (self.dir / "config.json").exists() and not force:
            raise ConfigError(f"{self.dir} already holds a run; pass --force to overwrite")
        self.dir.mkdir(parents=True, exist_ok=True)
        self.write("config.json", dumps_document(cfg))

    def write(self, name, text):
        (self.dir / name).write_text(text)

    def document(self, name, doc):
        self.write(name, dumps_document(doc))


def _env(cfg):
    return PlayGridWorld() if cfg["env"]["name"] == "play" else GridWorld()


def _demos(cfg, seed):
    if cfg["demos"]["path"]:
        return DemoDataset.load(cfg["demos"]["path"])
    if cfg["env"]["name"] == "play":
        return generate_play_demos(PlayGridWorld(), cfg["play"]["n_episodes"], seed)
    return generate_demos(GridWorld(), GridDemonstrator(), cfg["demos"]["n_episodes"], seed)


def _bounds(env):
    return (env.action_low.copy(), env.action_high.copy())


def _loss_csv(trace):
    return "step,loss\n" + "".join(f"{i + 1},{v!r}\n" for i, v in enumerate(trace))


def _generator(cfg, demos, seed, env):
    """Candidate generator per ``quantizer.candidates``; returns (generator, loss trace)."""
    q = cfg["quantizer"]
    if q["path"]:
        return generator_from_dict(load_document(q["path"])), []
    if q["candidates"] == "kmeans":
        return kmeans_candidates(demos, q["K"], seed=seed), []
    if q["candidates"] == "random":
        return random_candidates(env.state_dim, env.action_dim, q["K"], _bounds(env), seed,
                                 q["trunk_hidden"], q["head_hidden"]), []
    result = train_quantizer(demos, _train_config(q, seed), action_bounds=_bounds(env))
    return result.model, result.loss_trace


def _final_eval(cfg, policy, env, demos, seed):
    m = cfg["metrics"]
    eval_seed = seed + 10_000
    res = evaluate(policy, env, m["eval_episodes"], eval_seed)
    rng = np.random.default_rng([eval_seed, 1])
    dist = sinkhorn_distance(subsample(res.states, m["sinkhorn_cap"], rng),
                             subsample(demos.all_states(), m["sinkhorn_cap"], rng),
                             m["sinkhorn_epsilon"])
    return {"success_rate": res.success_rate, "mean_return": res.mean_return,
            "sinkhorn_distance": dist.value, "sinkhorn_converged": dist.converged,
            "n_episodes": m["eval_episodes"]}


def _greedy_doc(algo, env_name, generator, qnet, task=None):
    return {"format": POLICY_FORMAT, "version": 1, "algo": algo, "kind": "greedy", "env": env_name,
            "task": task, "generator": generator.to_dict(), "qnet": qnet.to_dict()}


# -- commands ---------------------------------------------------------------------


def cmd_gen_demos(cfg, run):
    demos = _demos(dict(cfg, demos=dict(cfg["demos"], path=None)), cfg["seed"])
    demos.save(run.dir / "demos.jsonl")
    return {"episodes": len(demos.episodes), "transitions": int(demos.all_states().shape[0])}


_MODES = np.array([RIGHT, UP, DIAGONAL])


def _quantizer_summary(generator, demos, cfg, loss_trace):
    summary = {"K": generator.K}
    if loss_trace:
        tail = loss_trace[-100:]
        summary["final_loss"] = float(np.mean(tail))
    if cfg["env"]["name"] == "gridworld" and generator.K >= 3:
        v = cfg["visualize"]
        probes = support_probes(probe_grid(v["probe_n"]), demos.all_states(), v["support_radius"])
        summary["mode_coverage"] = mode_coverage(generator, probes, _MODES)
        summary["candidate_spread"] = candidate_spread(generator, probes)
    return summary


def cmd_train_quantizer(cfg, run):
    seed = cfg["seed"]
    demos = _demos(cfg, seed)
    generator, loss = _generator(cfg, demos, seed, _env(cfg))
    if loss and not np.all(np.isfinite(loss)):
        raise NumericalError("non-finite quantizer loss")
    run.document("quantizer.json", generator.to_dict())
    if loss:
        run.write("loss.csv", _loss_csv(loss))
    return _quantizer_summary(generator, demos, cfg, loss)


def _tag(x):
    return repr(float(x)).replace("-", "m")


def cmd_visualize(cfg, run):
    seed, v = cfg["seed"], cfg["visualize"]
    demos = _demos(cfg, seed)
    env = _env(cfg)
    probes = probe_grid(v["probe_n"])
    if v["quantizer"]:
        gen = generator_from_dict(load_document(v["quantizer"]))
        records = action_field_export(gen, probes)
        run.write("field.csv", field_csv(records))
        run.write("field.svg", field_svg(records, title=f"K={gen.K}"))
        return {"fields": 1}
    rows = ["K,temperature,final_loss,mode_coverage,candidate_spread"]
    support = support_probes(probes, demos.all_states(), v["support_radius"])
    for K, T in v["series"]:
        qcfg = _train_config(dict(cfg["quantizer"], K=int(K), temperature=float(T)), seed)
        result = train_quantizer(demos, qcfg, action_bounds=_bounds(env))
        gen = result.model
        name = f"field_K{int(K)}_T{_tag(T)}"
        records = action_field_export(gen, probes)
        run.write(name + ".csv", field_csv(records))
        run.write(name + ".svg", field_svg(records, title=f"K={int(K)} T={float(T)!r}"))
        final = float(np.mean(result.loss_trace[-100:])) if result.loss_trace else float("nan")
        # coverage of three modes is only meaningful with at least three heads
        cover = repr(mode_coverage(gen, support, _MODES)) if K >= 3 else ""
        rows.append(f"{int(K)},{float(T)!r},{final!r},{cover},{candidate_spread(gen, support)!r}")
    run.write("summary.csv", "\n".join(rows) + "\n")
    return {"fields": len(v["series"])}


def _train_dqn_like(cfg, run, algo, demos, seed):
    env = _env(cfg)
    if algo == "bangbang_dqn":
        generator, loss = bang_bang_candidates(cfg["bangbang"]["bins"], env.action_dim), []
    else:
        generator, loss = _generator(cfg, demos, seed, env)
    run.document("quantizer.json", generator.to_dict())
    if loss:
        run.write("quantizer_loss.csv", _loss_csv(loss))
    denv = DiscretizedEnv(env, generator)
    if algo == "aquagail":
        policy, trace = train_aquagail(denv, demos, _gail_config(cfg), seed)
        run.write("trace.csv", trace_csv(trace, GAIL_TRACE_COLUMNS))
    else:
        policy, trace = train_aquadqn(denv, demos, MdqnConfig(**cfg["rl"]), seed)
        run.write("trace.csv", trace_csv(trace, TRACE_COLUMNS))
    run.document("policy.json", _greedy_doc(algo, cfg["env"]["name"], generator, policy.qnet))
    return _final_eval(cfg, policy, env, demos, seed)


def _train_play(cfg, run, seed):
    env = PlayGridWorld()
    demos = _demos(dict(cfg, env={"name": "play"}), seed)
    pcfg = _play_config(cfg, seed)
    q = cfg["quantizer"]
    if q["path"]:
        generator, loss = generator_from_dict(load_document(q["path"])), []
    else:
        result = train_quantizer(demos, pcfg.quantizer, action_bounds=_bounds(env))
        generator, loss = result.model, result.loss_trace
    run.document("quantizer.json", generator.to_dict())
    if loss:
        run.write("quantizer_loss.csv", _loss_csv(loss))
    summary = {}
    for task in cfg["play"]["tasks"]:
        policy, trace = train_aquaplay(env, demos, task, pcfg, seed, generator=generator)
        run.write(f"trace_task{task}.csv", trace_csv(trace))
        run.document(f"policy_task{task}.json", _greedy_doc("aquaplay", "play", generator, policy.qnet, task))
        res = evaluate(policy, env.with_task(task), cfg["metrics"]["eval_episodes"], seed + 10_000)
        summary[f"task{task}_success_rate"] = res.success_rate
    summary["success_rate"] = float(np.mean(list(summary.values())))
    return summary


BC_TRACE_COLUMNS = ("step", "success_rate", "mean_return", "sinkhorn_distance")


def cmd_train(cfg, run):
    seed, algo = cfg["seed"], cfg["train"]["algo"]
    if algo == "aquaplay":
        return _train_play(cfg, run, seed)
    if cfg["env"]["name"] != "gridworld":
        raise ConfigError(f"{algo} runs on env 'gridworld'")
    demos = _demos(cfg, seed)
    if algo in ("aquadqn", "aquagail", "bangbang_dqn"):
        return _train_dqn_like(cfg, run, algo, demos, seed)
    env = GridWorld()
    if algo == "bc":
        policy, loss = train_bc(demos, BcConfig(**cfg["bc"], seed=seed), _bounds(env))
        doc = {"format": POLICY_FORMAT, "version": 1, "algo": "bc", "kind": "bc", "env": "gridworld",
               "task": None, "bc": policy.to_dict()}
        act = policy
    else:
        result = train_mdn(demos, _train_config(cfg["mdn"], seed), _bounds(env))
        loss = result.loss_trace
        policy = MdnPolicy(result.model, seed)
        doc = {"format": POLICY_FORMAT, "version": 1, "algo": "mdn", "kind": "mdn", "env": "gridworld",
               "task": None, "generator": result.model.to_dict()}
        act = policy
    if not np.all(np.isfinite(loss)):
        raise NumericalError("non-finite training loss")
    run.write("loss.csv", _loss_csv(loss))
    run.document("policy.json", doc)
    summary = _final_eval(cfg, act, env, demos, seed)
    row = TraceRow(len(loss), summary["success_rate"], summary["mean_return"], None,
                   summary["sinkhorn_distance"])
    run.write("trace.csv", trace_csv([row], BC_TRACE_COLUMNS))
    return summary


def load_policy(doc, generator_doc=None, seed=0):
    """Rebuild ``(policy, env)`` from a policy checkpoint, optionally pairing it
    with a different discretiser (which must serve the same K)."""
    if doc.get("format") != POLICY_FORMAT:
        raise StructuralError(f"not a policy checkpoint: {doc.get('format')!r}")
    env = PlayGridWorld(task=doc["task"]) if doc["env"] == "play" else GridWorld()
    if doc["kind"] == "bc":
        return BcPolicy.from_dict(doc["bc"]), env
    generator = generator_from_dict(generator_doc or doc["generator"])
    if doc["kind"] == "mdn":
        return MdnPolicy(generator, seed), env
    return GreedyPolicy(QNetwork.from_dict(doc["qnet"]), generator), env


def cmd_eval(cfg, run):
    e, seed = cfg["eval"], cfg["seed"]
    if not e["policy"]:
        raise ConfigError("eval.policy must name a policy checkpoint")
    gdoc = load_document(e["quantizer"]) if e["quantizer"] else None
    policy, env = load_policy(load_document(e["policy"]), gdoc, seed)
    demos = _demos(dict(cfg, env={"name": "play" if isinstance(env, PlayGridWorld) else "gridworld"}), seed)
    report = _final_eval(cfg, policy, env, demos, seed)
    run.document("report.json", report)
    return report


def expand_grid(grid, cap=64):
    """Deterministic cartesian product of ``{"section.key": [values]}``, keys sorted."""
    keys = sorted(grid)
    for k in keys:
        if not isinstance(grid[k], list) or not grid[k]:
            raise ConfigError(f"sweep grid entry {k!r} must be a nonempty list")
    total = int(np.prod([len(grid[k]) for k in keys])) if keys else 0
    if total == 0:
        raise ConfigError("sweep grid is empty")
    if total > cap:
        raise ConfigError(f"sweep has {total} configurations, above the cap of {cap}")
    return keys, [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def _set_dotted(cfg, dotted, value):
    node = cfg
    parts = dotted.split(".")
    for p in parts[:-1]:
        if p not in node or not isinstance(node[p], dict):
            raise ConfigError(f"unknown config key {dotted!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {dotted!r}")
    node[parts[-1]] = value


def cmd_sweep(cfg, run):
    s = cfg["sweep"]
    if s["command"] not in ("train-quantizer", "train"):
        raise ConfigError("sweep.command must be 'train-quantizer' or 'train'")
    keys, points = expand_grid(s["grid"], s["cap"])
    jobs = []
    for i, point in enumerate(points):
        sub = copy.deepcopy(cfg)
        for k, v in point.items():
            _set_dotted(sub, k, v)
        sub["sweep"] = _base()["sweep"]
        resolve_config(sub)  # validate before launching anything
        sub_dir = run.dir / f"run_{i:03d}"
        sub_dir.mkdir(exist_ok=True)
        (sub_dir / "input.json").write_text(dumps_document(sub))
        jobs.append([sys.executable, "-m", "aquadem.cli", s["command"], "--config",
                     str(sub_dir / "input.json"), "--out", str(sub_dir), "--force"])
    width = max(1, int(s["parallel"]))
    for start in range(0, len(jobs), width):
        procs = [subprocess.Popen(j) for j in jobs[start:start + width]]
        for p, j in zip(procs, jobs[start:start + width]):
            if p.wait() != 0:
                code = EXIT_NUMERICAL if p.returncode == EXIT_NUMERICAL else EXIT_VALIDATION
                raise _SubrunFailed(f"sweep run {j[5]} failed", code)
    rows = []
    for i, point in enumerate(points):
        summary = load_document(run.dir / f"run_{i:03d}" / "summary.json")
        if s["metric"] not in summary:
            raise ConfigError(f"metric {s['metric']!r} not in run summaries")
        rows.append((summary[s["metric"]], i, point))
    rows.sort(key=lambda r: ((-r[0] if s["descending"] else r[0]), r[1]))
    lines = [",".join(["run", *keys, s["metric"]])]
    for value, i, point in rows:
        lines.append(",".join([f"run_{i:03d}", *(json.dumps(point[k]) for k in keys), repr(value)]))
    run.write("summary.csv", "\n".join(lines) + "\n")
    return {"runs": len(points), "best": f"run_{rows[0][1]:03d}"}


class _SubrunFailed(AquademError):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


COMMANDS = {
    "gen-demos": cmd_gen_demos,
    "train-quantizer": cmd_train_quantizer,
    "visualize": cmd_visualize,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
}


def run_command(command, config, seed=None, out=None, force=False, algo=None, candidates=None):
    """Programmatic entry point behind :func:`main`; returns the run summary."""
    cfg = resolve_config(config, seed)
    if algo is not None:
        cfg["train"]["algo"] = algo
    if candidates is not None:
        cfg["quantizer"]["candidates"] = candidates
    _validate(cfg)
    out = out or f"runs/{command}-seed{cfg['seed']}"
    run = Run(out, cfg, force)
    summary = COMMANDS[command](cfg, run)
    run.document("summary.json", summary)
    return summary


COMMAND_HELP = {
    "gen-demos": "write demonstration episodes",
    "train-quantizer": "fit the candidate network on demonstrations",
    "visualize": "export candidate action fields for a (K, T) series",
    "train": "train an agent (see --algo)",
    "eval": "evaluate a saved policy",
    "sweep": "run a config grid and rank the runs",
}


def build_parser():
    parser = argparse.ArgumentParser(prog="aquadem", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=COMMAND_HELP[name])
        p.add_argument("--config", required=True, help="JSON config file or preset name")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", help="run directory (default runs/<command>-seed<seed>)")
        p.add_argument("--force", action="store_true", help="overwrite an existing run directory")
        if name == "train":
            p.add_argument("--algo", choices=ALGOS)
            p.add_argument("--candidates", choices=CANDIDATES)
    show = sub.add_parser("show-config", help="print a resolved config")
    show.add_argument("--config", required=True)
    show.add_argument("--seed", type=int)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "show-config":
            sys.stdout.write(dumps_document(resolve_config(args.config, args.seed)))
            return 0
        summary = run_command(args.command, args.config, args.seed, args.out, args.force,
                              getattr(args, "algo", None), getattr(args, "candidates", None))
    except _SubrunFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (AquademError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    print(json.dumps(summary, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
