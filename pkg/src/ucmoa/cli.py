"""The ``ucmoa`` command.

Every subcommand reads one JSON config (``--config``), applies flag overrides
and works inside one output directory::

    ucmoa train-utilities  -> ensemble.json, train_log.csv
    ucmoa label            -> labeled.jsonl, percentiles.json
    ucmoa train-policy     -> policy.json, stats.csv, offline_labeled.jsonl
    ucmoa infer            -> JSON on stdout
    ucmoa eval --metric M  -> M.json, M.csv, M.svg

Exit codes: 0 success, 1 usage/config, 2 data, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from .ensemble import EnsembleConfig, UtilityEnsemble, linear_ensemble, load_ensemble, save_ensemble, train_ensemble
from .errors import ConfigError, DataError, StateError, UCMOAError
from .inference import RewardBounds, preference_to_reward, select_inference_index
from .labeler import index_to_letter, augment_prompt, label_dataset, label_histogram, read_jsonl, write_jsonl
from .metrics import (
    PolicySampleSet,
    constraint_satisfaction,
    constraint_utility,
    gen_constraints,
    gen_variance_weights,
    variance_objective,
    variance_utility,
)
from .plotting import line_svg
from .policy_sim import (
    BUILTIN_ENVS,
    ConditionedPolicy,
    SimConfig,
    SynthEnv,
    arm_hypervolumes,
    builtin_env,
    consistency_table,
    preference_grid,
    run_pipeline,
    sample_responses,
    top_tokens,
)
from .reward_stats import NormalizationParams, RunningBounds

log = logging.getLogger("ucmoa")

METRICS = ("pareto", "constraints", "variance", "consistency")
SEED_ENV = "UCMOA_SEED"
DEFAULT_OUT = "ucmoa-out"

# keys that live at the top level of the config but configure the ensemble
_TOP_ENSEMBLE_KEYS = ("k", "m_utilities", "mu", "epsilon")


@dataclass
class MetricsConfig:
    m: int = 100  # random preferences per distributional metric
    n_rows: int = 2
    sign: float = 1.0
    n_samples: int = 1000  # responses per policy and token
    n_preferences: int = 10
    normalization: str = "percentile"
    tokens: Optional[List[int]] = None  # consistency tokens; default top 5 offline labels
    n_top_tokens: int = 5

    def validate(self) -> "MetricsConfig":
        if self.m < 1 or self.n_samples < 2 or self.n_preferences < 1:
            raise ConfigError("metrics: m, n_preferences must be >= 1 and n_samples >= 2")
        if self.n_rows < 0:
            raise ConfigError("metrics: n_rows must be >= 0")
        if self.sign not in (1.0, -1.0):
            raise ConfigError("metrics: sign must be +1 or -1")
        if self.normalization not in ("percentile", "minmax"):
            raise ConfigError("metrics: normalization must be 'percentile' or 'minmax'")
        return self


@dataclass
class RunConfig:
    seed: int = 0
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    utility_kind: str = "trained"  # or "linear"
    env: str = "tradeoff"  # builtin name or path to an environment file
    sim: SimConfig = field(default_factory=SimConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    input: Optional[Path] = None
    out: Path = Path(DEFAULT_OUT)
    prompt: str = ""

    def load_env(self) -> SynthEnv:
        if self.env in BUILTIN_ENVS:
            return builtin_env(self.env)
        return SynthEnv.load(self.env)


def _take(doc: dict, cls, where: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**doc)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _seed_from_env() -> Optional[int]:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def load_config(path: Optional[str], args: Optional[argparse.Namespace] = None) -> RunConfig:
    """Build a RunConfig from a JSON file plus flag overrides.

    Seed precedence: ``--seed``, then ``UCMOA_SEED``, then the file, then 0.
    Relative paths inside the file resolve against the file's directory.
    """
    doc: dict = {}
    base = Path.cwd()
    if path is not None:
        cfg_path = Path(path)
        try:
            text = cfg_path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: invalid JSON ({exc.msg})") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        base = cfg_path.resolve().parent
    doc = dict(doc)
    allowed = {"seed", "ensemble", "utility_kind", "simulator", "metrics", "paths", "prompt", *_TOP_ENSEMBLE_KEYS}
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ConfigError(f"config: unknown keys {unknown}")

    ens_doc = dict(doc.get("ensemble", {}))
    clash = sorted(set(ens_doc) & {"seed", *_TOP_ENSEMBLE_KEYS})
    if clash:
        raise ConfigError(f"ensemble: {clash} belong at the top level of the config")
    for key in _TOP_ENSEMBLE_KEYS:
        if key in doc:
            ens_doc[key] = doc[key]

    sim_doc = dict(doc.get("simulator", {}))
    env = str(sim_doc.pop("env", "tradeoff"))
    paths = dict(doc.get("paths", {}))
    unknown = sorted(set(paths) - {"input", "out"})
    if unknown:
        raise ConfigError(f"paths: unknown keys {unknown}")

    def resolve(p):
        return None if p is None else (base / p if not Path(p).is_absolute() else Path(p))

    seed = doc.get("seed", 0)
    env_seed = _seed_from_env()
    if env_seed is not None:
        seed = env_seed
    if args is not None and getattr(args, "seed", None) is not None:
        seed = args.seed
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")

    cfg = RunConfig(
        seed=seed,
        ensemble=_take(ens_doc, EnsembleConfig, "ensemble"),
        utility_kind=doc.get("utility_kind", "trained"),
        env=env if env in BUILTIN_ENVS else str(resolve(env)),
        sim=_take(sim_doc, SimConfig, "simulator"),
        metrics=_take(dict(doc.get("metrics", {})), MetricsConfig, "metrics"),
        input=resolve(paths.get("input")),
        out=resolve(paths.get("out", DEFAULT_OUT)),
        prompt=str(doc.get("prompt", "")),
    )
    if args is not None:
        if getattr(args, "out", None) is not None:
            cfg.out = Path(args.out)
        if getattr(args, "online_iters", None) is not None:
            cfg.sim.online_iters = args.online_iters
        if getattr(args, "input", None) is not None:
            cfg.input = Path(args.input)
    cfg.ensemble.seed = cfg.seed
    cfg.ensemble.validate()
    cfg.sim.validate()
    cfg.metrics.validate()
    if cfg.utility_kind not in ("trained", "linear"):
        raise ConfigError("utility_kind must be 'trained' or 'linear'")
    if cfg.env not in BUILTIN_ENVS and not Path(cfg.env).is_file():
        raise ConfigError(f"environment file {cfg.env} does not exist")
    if cfg.input is not None and not cfg.input.is_file():
        raise ConfigError(f"input file {cfg.input} does not exist")
    return cfg


# ---------------------------------------------------------------- artifacts


def _num(x) -> str:
    return repr(float(x))


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _read_json(path: Path, what: str, hint: str) -> dict:
    if not path.is_file():
        raise StateError(f"{what} not found at {path}; run `ucmoa {hint}` first")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}:{exc.lineno}:{exc.colno}: invalid JSON ({exc.msg})") from exc


def _load_ensemble(cfg: RunConfig) -> UtilityEnsemble:
    path = cfg.out / "ensemble.json"
    if not path.is_file():
        raise StateError(f"ensemble not found at {path}; run `ucmoa train-utilities` first")
    return load_ensemble(path, expected_k=cfg.ensemble.k)


def _load_policy_doc(cfg: RunConfig) -> dict:
    doc = _read_json(cfg.out / "policy.json", "policy file", "train-policy")
    try:
        doc["env"] = SynthEnv.from_dict(doc["env"])
        for arm in doc["arms"]:
            arm["policy"] = ConditionedPolicy.from_dict(arm["policy"])
            arm["bounds"] = RunningBounds.from_dict(arm["bounds"])
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, UCMOAError):
            raise
        raise DataError(f"{cfg.out / 'policy.json'}: malformed policy file ({exc})") from exc
    return doc


# ----------------------------------------------------------------- commands


def cmd_train_utilities(cfg: RunConfig) -> int:
    cfg.out.mkdir(parents=True, exist_ok=True)
    log_path = cfg.out / "train_log.csv"
    with open(log_path, "w", newline="") as fh:
        if cfg.utility_kind == "linear":
            ens = linear_ensemble(cfg.ensemble.m_utilities, cfg.ensemble.k, np.random.default_rng([cfg.seed, 7]), cfg.ensemble.epsilon)
            fh.write("step,member,l_val,l_grad,objective\n")
        else:
            ens = train_ensemble(cfg.ensemble, log_sink=fh)
    save_ensemble(ens, cfg.out / "ensemble.json")
    print(f"wrote {cfg.out / 'ensemble.json'} ({cfg.utility_kind}, M={len(ens)}, K={ens.k}) and {log_path}")
    return 0


def cmd_label(cfg: RunConfig) -> int:
    if cfg.input is None:
        raise ConfigError("label needs an input JSONL (paths.input in the config or --input)")
    ens = _load_ensemble(cfg)
    with open(cfg.input) as fh:
        samples = read_jsonl(fh, k=ens.k)
    labeled, table = label_dataset(samples, ens, token=cfg.sim.token)
    bounds = RunningBounds.from_samples(np.stack([s.rewards for s in samples]))
    cfg.out.mkdir(parents=True, exist_ok=True)
    with open(cfg.out / "labeled.jsonl", "w") as fh:
        write_jsonl(labeled, fh)
    _write_json(cfg.out / "percentiles.json", {"bounds": bounds.to_dict(), "table": table.to_dict()})
    hist = label_histogram(labeled, len(ens))
    print(f"labeled {len(labeled)} records; histogram {json.dumps(hist)}")
    return 0


def cmd_train_policy(cfg: RunConfig) -> int:
    ens = _load_ensemble(cfg)
    env = cfg.load_env()
    if env.k != ens.k:
        raise ConfigError(f"environment has K={env.k} but the ensemble expects K={ens.k}")
    offline = None
    if cfg.input is not None:
        with open(cfg.input) as fh:
            offline = read_jsonl(fh, k=ens.k)
    res = run_pipeline(env, ens, cfg.sim, cfg.seed, offline=offline)
    hist = label_histogram(res.offline_labeled, len(ens))
    arms = [
        {"name": "offline" if i == 0 else f"iter{i}", "policy": p.to_dict(), "bounds": b.to_dict()}
        for i, (p, b) in enumerate(zip(res.policies, res.bounds))
    ]
    cfg.out.mkdir(parents=True, exist_ok=True)
    _write_json(
        cfg.out / "policy.json",
        {"format_version": 1, "seed": cfg.seed, "m": len(ens), "k": ens.k, "env": env.to_dict(), "arms": arms, "offline_histogram": hist},
    )
    m = len(ens)
    with open(cfg.out / "stats.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iter", "accept_rate"] + [f"mean_utility_token_{t}" for t in range(m)])
        for st in res.stats:
            w.writerow([st["iter"], _num(st["accept_rate"])] + [_num(v) for v in st["mean_utility_token"]])
    with open(cfg.out / "offline_labeled.jsonl", "w") as fh:
        write_jsonl(res.offline_labeled, fh)
    rates = ", ".join(f"{st['accept_rate']:.3f}" for st in res.stats[1:]) or "none"
    print(f"trained {len(arms)} arm(s) on {len(res.offline_labeled)} offline samples; online accept rates: {rates}")
    return 0


def _parse_preference(text: Optional[str]) -> np.ndarray:
    if text is None:
        raise ConfigError("infer needs --preference, e.g. --preference 0.7,0.3")
    try:
        return np.array([float(v) for v in text.split(",")])
    except ValueError:
        raise ConfigError(f"--preference must be comma-separated numbers, got {text!r}") from None


def _inference_bounds(cfg: RunConfig) -> RunningBounds:
    if (cfg.out / "policy.json").is_file():
        return _load_policy_doc(cfg)["arms"][-1]["bounds"]
    if (cfg.out / "percentiles.json").is_file():
        return RunningBounds.from_dict(_read_json(cfg.out / "percentiles.json", "percentile snapshot", "label")["bounds"])
    raise StateError(f"no reward bounds in {cfg.out}; run `ucmoa label` or `ucmoa train-policy` first")


def cmd_infer(cfg: RunConfig, preference: Optional[str]) -> int:
    w = _parse_preference(preference)
    ens = _load_ensemble(cfg)
    bounds = _inference_bounds(cfg)
    target = preference_to_reward(w, RewardBounds.from_running(bounds))
    idx = select_inference_index(target, ens, NormalizationParams.from_bounds(bounds))
    doc = {
        "preference": w.tolist(),
        "target_reward": target.tolist(),
        "index": idx,
        "letter": index_to_letter(idx),
        "prompt": augment_prompt(cfg.prompt, idx, cfg.sim.token),
    }
    print(json.dumps(doc, sort_keys=True))
    return 0


def _eval_pareto(cfg, ens, doc):
    env, arms = doc["env"], doc["arms"]
    if env.k != 2:
        raise ConfigError("the pareto sweep and hypervolume are defined for K = 2")
    prefs = preference_grid(cfg.metrics.n_preferences)
    hvs, sweeps, ref = arm_hypervolumes(
        [a["policy"] for a in arms], [a["bounds"] for a in arms], env, ens, prefs, cfg.metrics.n_samples, cfg.seed
    )
    report = {"metric": "pareto", "seed": cfg.seed, "n_preferences": len(prefs), "reference": ref.tolist(), "arms": {}}
    rows, series = [], {}
    for arm, hv, (pts, chosen) in zip(arms, hvs, sweeps):
        name = arm["name"]
        report["arms"][name] = {"hypervolume": hv, "tokens": chosen.tolist(), "n_distinct_tokens": len(set(chosen.tolist()))}
        for w, t, z in zip(prefs, chosen, pts):
            rows.append([name, _num(w[0]), _num(w[1]), int(t), _num(z[0]), _num(z[1])])
        series[name] = (pts[:, 0], pts[:, 1])
    header = ["arm", "w_0", "w_1", "token", "z_0", "z_1"]
    return report, header, rows, (series, "mean reward 0", "mean reward 1", "Pareto sweep per training arm")


def _token_sample_sets(cfg, doc, arm) -> List[PolicySampleSet]:
    rng = np.random.default_rng([cfg.seed, 4])
    policy, env = arm["policy"], doc["env"]
    sets = []
    for t in range(policy.m):
        styles = policy.sample_styles(np.full(cfg.metrics.n_samples, t), rng)
        sets.append(PolicySampleSet(f"{arm['name']}/token-{t}", sample_responses(env, styles, rng)))
    return sets


def _eval_distributional(cfg, ens, doc, which):
    by_arm = {arm["name"]: _token_sample_sets(cfg, doc, arm) for arm in doc["arms"]}
    pool = np.concatenate([s.samples for sets in by_arm.values() for s in sets])
    rng = np.random.default_rng([cfg.seed, 5])
    constraints = gen_constraints(cfg.metrics.m, cfg.metrics.n_rows, pool, rng)
    draws = gen_variance_weights(cfg.metrics.m, doc["env"].k, rng, cfg.metrics.sign)
    final = list(by_arm)[-1]
    report = {
        "metric": which,
        "constraint_satisfaction": constraint_satisfaction(by_arm[final], constraints),
        "variance_objective": variance_objective(by_arm[final], draws),
        "m": cfg.metrics.m,
        "seed": cfg.seed,
        "arm": final,
    }
    rows, series = [], {}
    for name, sets in by_arm.items():
        rows.append([name, _num(constraint_satisfaction(sets, constraints)), _num(variance_objective(sets, draws))])
        if which == "constraints":
            best = [max(constraint_utility(c, s.samples) for s in sets) for c in constraints]
        else:
            best = [max(variance_utility(w, s.samples) for s in sets) for w in draws]
        series[name] = (np.arange(len(best)) / len(best), np.sort(best))
    header = ["arm", "constraint_satisfaction", "variance_objective"]
    ylabel = "best constraint satisfaction" if which == "constraints" else "best variance objective"
    return report, header, rows, (series, "fraction of preferences", ylabel, f"Sorted per-preference scores ({which})")


def _eval_consistency(cfg, ens, doc):
    arm = doc["arms"][-1]
    m = len(ens)
    if cfg.metrics.tokens is not None:
        tokens = [int(t) for t in cfg.metrics.tokens]
        bad = [t for t in tokens if not 0 <= t < m]
        if bad:
            raise ConfigError(f"metrics.tokens {bad} outside 0..{m - 1}")
    else:
        tokens = top_tokens(doc["offline_histogram"], cfg.metrics.n_top_tokens)
    table = consistency_table(
        arm["policy"], doc["env"], ens, arm["bounds"], tokens, cfg.metrics.n_samples, cfg.seed, cfg.metrics.normalization
    )
    entries, rows, series = [], [], {}
    for t, means in zip(tokens, table):
        best = int(np.argmax(means))
        entries.append({"token": t, "means": means.tolist(), "argmax": best, "consistent": best == t})
        rows.append([t] + [_num(v) for v in means])
        series[f"token-{t}"] = (np.arange(m), means)
    report = {
        "metric": "consistency",
        "seed": cfg.seed,
        "arm": arm["name"],
        "normalization": cfg.metrics.normalization,
        "n": cfg.metrics.n_samples,
        "tokens": entries,
        "n_consistent": sum(e["consistent"] for e in entries),
    }
    header = ["token"] + [f"mean_utility_{i}" for i in range(m)]
    return report, header, rows, (series, "utility index", "mean normalized utility", "Mean normalized utility per token")


def cmd_eval(cfg: RunConfig, metric: str) -> int:
    if metric not in METRICS:
        raise ConfigError(f"unknown metric {metric!r} (choose from {', '.join(METRICS)})")
    ens = _load_ensemble(cfg)
    doc = _load_policy_doc(cfg)
    if doc["m"] != len(ens):
        raise DataError(f"policy file was trained with M={doc['m']} utilities, ensemble has {len(ens)}")
    if metric == "pareto":
        report, header, rows, plot = _eval_pareto(cfg, ens, doc)
    elif metric == "consistency":
        report, header, rows, plot = _eval_consistency(cfg, ens, doc)
    else:
        report, header, rows, plot = _eval_distributional(cfg, ens, doc, metric)
    _write_json(cfg.out / f"{metric}.json", report)
    with open(cfg.out / f"{metric}.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    series, xlabel, ylabel, title = plot
    line_svg(cfg.out / f"{metric}.svg", series, xlabel, ylabel, title)
    print(json.dumps(report, sort_keys=True))
    return 0


# ---------------------------------------------------------------- argparse


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON run config")
    common.add_argument("--seed", type=int, help=f"overrides the config and ${SEED_ENV}")
    common.add_argument("--out", metavar="DIR", help=f"artifact directory (default {DEFAULT_OUT})")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = _Parser(prog="ucmoa", description="Utility-conditioned multi-objective alignment (desk-scale).")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("train-utilities", parents=[common], help="train the utility ensemble")
    p = sub.add_parser("label", parents=[common], help="label a JSONL dataset with utility tokens")
    p.add_argument("--input", metavar="JSONL", help="records to label (overrides paths.input)")
    p = sub.add_parser("train-policy", parents=[common], help="offline + online conditioned training")
    p.add_argument("--online-iters", type=int, help="number of online iterations (0 = offline only)")
    p.add_argument("--input", metavar="JSONL", help="offline records with a 'style' field")
    p = sub.add_parser("infer", parents=[common], help="map a preference vector to a conditioned prompt")
    p.add_argument("--preference", metavar="W1,W2,...", help="per-objective weights in [0, 1]")
    p.add_argument("--prompt", help="prompt text to augment")
    p = sub.add_parser("eval", parents=[common], help="Pareto sweep and distributional metrics")
    p.add_argument("--metric", default="pareto", help=f"one of {', '.join(METRICS)}")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args)
        if args.command == "train-utilities":
            return cmd_train_utilities(cfg)
        if args.command == "label":
            return cmd_label(cfg)
        if args.command == "train-policy":
            return cmd_train_policy(cfg)
        if args.command == "infer":
            if args.prompt is not None:
                cfg.prompt = args.prompt
            return cmd_infer(cfg, args.preference)
        return cmd_eval(cfg, args.metric)
    except UCMOAError as exc:
        print(f"ucmoa: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"ucmoa: error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
