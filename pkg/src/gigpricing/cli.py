"""Experiment pipeline: generate, collect, fit-mnl, train, tune, evaluate, report.

Every stage reads its inputs from and writes its artifacts to one output
directory and records digests in ``manifest.json``. A stage whose config
and input digests match the manifest, and whose outputs are intact, is
skipped unless ``--force`` is given.
"""
from __future__ import annotations

import argparse
import copy
import dataclasses
import hashlib
import itertools
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Callable, Mapping, Optional

import numpy as np
import yaml

from .choice import FitConfig, MnlParams, fit_mnl, pool_groups, read_observations, write_observations
from .evaluation import (
    EvalReport,
    OracleCache,
    evaluate,
    tune_grid,
    write_instance_table,
    write_long_table,
    write_summary,
)
from .oracle import MODES
from .policies import PolicySpec, build_policy, collect_observations, sample_perturbation
from .simgen import SCENARIOS, ScenarioConfig, digest_of, generate_scenario_set, load_scenario_set, save_scenario_set
from .vfa.network import load_checkpoint, save_checkpoint
from .vfa.training import TrainConfig, train

log = logging.getLogger("gigpricing")

EXIT_CONFIG, EXIT_MISSING, EXIT_DIVERGED = 2, 3, 4
STAGES = ("generate", "collect", "fit-mnl", "train", "tune", "evaluate", "report")

DEFAULTS: dict[str, Any] = {
    "seed": None,
    "output": "runs/default",
    "scenario": {"name": "I.1"},
    "collect": {"episodes": 300, "low": 0.40, "high": 0.85},
    "estimator": {"mode": "mnl", "learning_rate": 1e-2, "epochs": 200, "batch_size": 256, "l2": 1e-3},
    "training": {"preset": "full", "seeds": 5, "perturbed_seeds": 1},
    "policies": [{"kind": "PP"}, {"kind": "FP"}, {"kind": "VFA"}, {"kind": "PERTURBED", "epsilon": 0.0}],
    "oracle": {"mode": "clamped"},
}


class ConfigError(Exception):
    pass


class MissingInput(Exception):
    pass


# --- configuration -------------------------------------------------------------

def _merge(base: dict, override: Mapping, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key '{where}'")
        if isinstance(base[key], dict) and key not in ("scenario", "training"):
            if not isinstance(value, Mapping):
                raise ConfigError(f"config key '{where}' must be a mapping")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


@dataclasses.dataclass
class Experiment:
    raw: dict
    seed: int
    out: Path
    scenario: ScenarioConfig
    fit: FitConfig
    collect: dict
    training: TrainConfig
    training_seeds: int
    perturbed_seeds: int
    policies: list[tuple[PolicySpec, bool]]  # (spec, needs tuning)
    oracle_mode: str

    def block_digest(self, *keys: str) -> str:
        return digest_of({"seed": self.seed, **{k: self.raw.get(k) for k in keys}})


def _scenario(block: Mapping, seed: int) -> ScenarioConfig:
    block = dict(block)
    name = block.pop("name", "I.1")
    if name not in SCENARIOS:
        raise ConfigError(f"scenario.name: unknown scenario {name!r}; expected one of {sorted(SCENARIOS)}")
    fields = {f.name for f in dataclasses.fields(ScenarioConfig)}
    for key in block:
        if key not in fields:
            raise ConfigError(f"unknown config key 'scenario.{key}'")
    base = SCENARIOS[name].to_dict()
    if "ranges" in block:
        unknown = set(block["ranges"]) - set(base["ranges"])
        if unknown:
            raise ConfigError(f"unknown config key 'scenario.ranges.{sorted(unknown)[0]}'")
        base["ranges"].update(block.pop("ranges"))
    base.update(block)
    if "seed" not in block:
        base["seed"] = seed
    try:
        return ScenarioConfig.from_dict(base)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"scenario: {exc}") from None


def _training(block: Mapping, seed: int) -> tuple[TrainConfig, int, int]:
    block = dict(block)
    preset = block.pop("preset", "full")
    n_seeds = int(block.pop("seeds", 5))
    n_pert = int(block.pop("perturbed_seeds", 1))
    fields = {f.name for f in dataclasses.fields(TrainConfig)}
    for key in block:
        if key not in fields:
            raise ConfigError(f"unknown config key 'training.{key}'")
    if preset not in ("full", "desk"):
        raise ConfigError(f"training.preset: expected 'full' or 'desk', got {preset!r}")
    if n_seeds < 1 or n_pert < 1:
        raise ConfigError("training.seeds and training.perturbed_seeds must be >= 1")
    block.setdefault("seed", seed)
    try:
        cfg = TrainConfig.desk(**block) if preset == "desk" else TrainConfig(**block)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"training: {exc}") from None
    return cfg, n_seeds, n_pert


def _policies(entries) -> list[tuple[PolicySpec, bool]]:
    if not isinstance(entries, list) or not entries:
        raise ConfigError("policies must be a nonempty list")
    fields = {f.name for f in dataclasses.fields(PolicySpec)}
    out = []
    for k, entry in enumerate(entries):
        entry = dict(entry)
        tune = bool(entry.pop("tune", entry.get("kind") in ("PP", "FP")))
        for key in entry:
            if key not in fields:
                raise ConfigError(f"unknown config key 'policies[{k}].{key}'")
        # list-valued epsilon/seed expand into one policy per combination
        eps = entry.pop("epsilon", 0.0)
        seeds = entry.pop("seed", 0)
        for e, s in itertools.product(eps if isinstance(eps, list) else [eps], seeds if isinstance(seeds, list) else [seeds]):
            try:
                out.append((PolicySpec.from_dict({**entry, "epsilon": float(e), "seed": int(s)}), tune))
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"policies[{k}]: {exc}") from None
    labels = [spec.label for spec, _ in out]
    dupes = sorted({x for x in labels if labels.count(x) > 1})
    if dupes:
        raise ConfigError(f"policies: duplicate labels {dupes}; set 'name' to disambiguate")
    return out


def load_config(path: Optional[str], seed: Optional[int] = None, out: Optional[str] = None) -> Experiment:
    raw: dict = {}
    if path is not None:
        try:
            with open(path) as fh:
                raw = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from None
        if not isinstance(raw, Mapping):
            raise ConfigError("config file must hold a mapping at the top level")
    cfg = _merge(DEFAULTS, raw)
    if seed is not None:
        cfg["seed"] = seed
    if out is not None:
        cfg["output"] = out
    if cfg["seed"] is None:
        raise ConfigError("config key 'seed' is mandatory (or pass --seed)")
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("config key 'seed' must be a nonnegative integer")
    s = cfg["seed"]
    est = dict(cfg["estimator"])
    try:
        fit = FitConfig(learning_rate=float(est["learning_rate"]), epochs=int(est["epochs"]),
                        batch_size=int(est["batch_size"]), l2=float(est["l2"]), mode=est["mode"], seed=s)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"estimator: {exc}") from None
    if fit.mode not in ("mnl", "binary"):
        raise ConfigError(f"estimator.mode: expected 'mnl' or 'binary', got {fit.mode!r}")
    col = cfg["collect"]
    if not (0 <= col["low"] <= col["high"] <= 1) or int(col["episodes"]) < 1:
        raise ConfigError("collect: need 0 <= low <= high <= 1 and episodes >= 1")
    if cfg["oracle"]["mode"] not in MODES:
        raise ConfigError(f"oracle.mode: expected one of {MODES}, got {cfg['oracle']['mode']!r}")
    tcfg, n_seeds, n_pert = _training(cfg["training"], s)
    return Experiment(
        raw=cfg, seed=s, out=Path(cfg["output"]), scenario=_scenario(cfg["scenario"], s), fit=fit,
        collect=col, training=tcfg, training_seeds=n_seeds, perturbed_seeds=n_pert,
        policies=_policies(cfg["policies"]), oracle_mode=cfg["oracle"]["mode"],
    )


# --- manifest ------------------------------------------------------------------

def file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


def _dump_json(obj, path: Path) -> None:
    text = json.dumps(obj, sort_keys=True, indent=1, allow_nan=True)
    path.write_text(text + "\n")


class Manifest:
    def __init__(self, out: Path):
        self.path = out / "manifest.json"
        self.data = json.loads(self.path.read_text()) if self.path.exists() else {"stages": {}}

    def up_to_date(self, stage: str, config_digest: str, inputs: dict[str, str], out: Path) -> bool:
        entry = self.data["stages"].get(stage)
        if not entry or entry["config_digest"] != config_digest or entry["inputs"] != inputs:
            return False
        for name, digest in entry["outputs"].items():
            p = out / name
            if not p.exists() or file_digest(p) != digest:
                return False
        return True

    def record(self, stage: str, config_digest: str, seed: int, inputs: dict, outputs: dict, config: dict) -> None:
        self.data["config"] = config
        self.data["stages"][stage] = {"config_digest": config_digest, "seed": seed, "inputs": inputs,
                                      "outputs": outputs}
        _dump_json(self.data, self.path)


def _require(out: Path, names, producer: dict[str, str]) -> dict[str, str]:
    digests = {}
    for name in names:
        p = out / name
        if not p.exists():
            raise MissingInput(f"missing input {p}; run the '{producer.get(name, '?')}' stage first")
        digests[name] = file_digest(p)
    return digests


PRODUCER = {
    "scenario.json": "generate",
    "observations.jsonl": "collect",
    "mnl.json": "fit-mnl",
    "training.json": "train",
    "tuned.json": "tune",
    "evaluation.json": "evaluate",
}


# --- stages ------------------------------------------------------------------

def _stage_generate(exp: Experiment) -> list[str]:
    save_scenario_set(generate_scenario_set(exp.scenario), exp.out / "scenario.json")
    return ["scenario.json"]


def _stage_collect(exp: Experiment) -> list[str]:
    sset = load_scenario_set(exp.out / "scenario.json")
    rng = np.random.default_rng([exp.seed, 1])
    obs = collect_observations(sset.train, int(exp.collect["episodes"]), rng, exp.collect["low"], exp.collect["high"])
    write_observations(exp.out / "observations.jsonl", obs)
    return ["observations.jsonl"]


def _estimate_record(est) -> dict:
    return {str(g): {"params": e.params.to_dict(), "train_loss": e.train_loss, "n_obs": e.n_obs}
            for g, e in sorted(est.items())}


def _stage_fit(exp: Experiment) -> list[str]:
    sset = load_scenario_set(exp.out / "scenario.json")
    obs = read_observations(exp.out / "observations.jsonl")
    groups = range(sset.config.n_groups)
    u0 = sset.config.u0
    multi = fit_mnl(obs, exp.fit, u0, groups)
    single = fit_mnl(pool_groups(obs), exp.fit, u0, [0])
    _dump_json({"multi": _estimate_record(multi), "single": _estimate_record(single)}, exp.out / "mnl.json")
    return ["mnl.json"]


def load_estimates(path: Path, variant: str, n_groups: int) -> dict[int, MnlParams]:
    doc = json.loads(Path(path).read_text())[variant]
    if variant == "single":
        p = MnlParams.from_dict(doc["0"]["params"])
        return {g: dataclasses.replace(p, group=g) for g in range(n_groups)}
    return {int(g): MnlParams.from_dict(rec["params"]) for g, rec in doc.items()}


def _model_params(spec: PolicySpec, exp: Experiment, sset) -> dict[int, MnlParams]:
    """MNL parameters a learned policy prices with."""
    if spec.kind == "PERTURBED":
        return sample_perturbation(sset.truth.mnl_params(), spec.epsilon, np.random.default_rng(spec.seed))
    return load_estimates(exp.out / "mnl.json", spec.estimator, sset.config.n_groups)


def _train_task(args):
    label, seed, cfg, scenario_path, params = args
    sset = load_scenario_set(scenario_path)
    net, tlog = train(sset.train, sset.validation, params, dataclasses.replace(cfg, seed=seed))
    return label, seed, net, tlog


def _stage_train(exp: Experiment, jobs: int = 1) -> list[str]:
    sset = load_scenario_set(exp.out / "scenario.json")
    learned = [spec for spec, _ in exp.policies if spec.kind in ("VFA", "PERTURBED")]
    ckdir = exp.out / "checkpoints"
    ckdir.mkdir(exist_ok=True)
    tasks = []
    for spec in learned:
        params = _model_params(spec, exp, sset)
        # exact-parameter runs are reference methods and get the full seed budget
        n = exp.perturbed_seeds if spec.kind == "PERTURBED" and spec.epsilon > 0 else exp.training_seeds
        for k in range(n):
            tasks.append((spec.label, exp.training.seed + k, exp.training, str(exp.out / "scenario.json"), params))
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_train_task, tasks))
    else:
        results = [_train_task(t) for t in tasks]

    summary: dict[str, dict] = {}
    outputs = []
    cfg_digest = digest_of(exp.training.to_dict())
    for label in dict.fromkeys(t[0] for t in tasks):
        runs = [(seed, net, tlog) for lab, seed, net, tlog in results if lab == label]
        # best validation reward; ties go to the lowest seed
        seed, net, tlog = max(runs, key=lambda r: (r[2].best_val, -r[0]))
        name = f"checkpoints/{label}.ckpt"
        save_checkpoint(net, exp.out / name, seed=seed, epoch=tlog.best_epoch, config_digest=cfg_digest)
        outputs.append(name)
        summary[label] = {
            "selected_seed": seed,
            "runs": {str(s): {"best_epoch": lg.best_epoch, "best_val": lg.best_val, "initial_val": lg.initial_val,
                              "epochs": lg.epochs} for s, _, lg in runs},
        }
    _dump_json(summary, exp.out / "training.json")
    return ["training.json", *outputs]


def _stage_tune(exp: Experiment) -> list[str]:
    sset = load_scenario_set(exp.out / "scenario.json")
    tuned = {}
    for spec, needs in exp.policies:
        if not needs or spec.kind not in ("PP", "FP"):
            continue
        best, scored = tune_grid(spec.kind, sset.train)
        best = dataclasses.replace(best, name=spec.name)
        tuned[spec.label] = {"spec": best.to_dict(), "train_reward": max(s for _, s in scored),
                             "grid_size": len(scored)}
    _dump_json(tuned, exp.out / "tuned.json")
    return ["tuned.json"]


def _stage_evaluate(exp: Experiment) -> list[str]:
    sset = load_scenario_set(exp.out / "scenario.json")
    tuned = json.loads((exp.out / "tuned.json").read_text()) if (exp.out / "tuned.json").exists() else {}
    cache = OracleCache(str(exp.out / "oracle_cache.json"))
    reports = []
    truth = sset.truth.mnl_params()
    for spec, needs in exp.policies:
        label = spec.label
        estimates = None
        if spec.kind in ("PP", "FP") and needs:
            if label not in tuned:
                raise MissingInput(f"no tuned parameters for policy {label}; run the 'tune' stage first")
            policy = build_policy(PolicySpec.from_dict(tuned[label]["spec"]))
        elif spec.kind in ("VFA", "PERTURBED"):
            ck = exp.out / "checkpoints" / f"{label}.ckpt"
            if not ck.exists():
                raise MissingInput(f"missing input {ck}; run the 'train' stage first")
            net, _ = load_checkpoint(ck)
            estimates = _model_params(spec, exp, sset)
            policy = build_policy(spec, estimates=estimates, net=net, truth=truth, gamma=exp.training.gamma)
        else:
            policy = build_policy(spec)
        rep = evaluate(policy, sset.test, exp.oracle_mode, label, estimates, cache)
        reports.append(rep.to_dict())
        log.info("%s: mean ratio %.2f", label, rep.mean_ratio)
    cache.save()
    _dump_json({"reports": reports}, exp.out / "evaluation.json")
    return ["evaluation.json", "oracle_cache.json"]


def _stage_report(exp: Experiment) -> list[str]:
    doc = json.loads((exp.out / "evaluation.json").read_text())
    reports = [EvalReport.from_dict(r) for r in doc["reports"]]
    write_instance_table(reports, exp.out / "report_instances.csv")
    write_summary(reports, exp.out / "report_summary.csv")
    write_long_table(reports, exp.out / "report_long.csv")
    return ["report_instances.csv", "report_summary.csv", "report_long.csv"]


def _stage_inputs(stage: str, exp: Experiment) -> list[str]:
    needs_mnl = any(spec.kind == "VFA" for spec, _ in exp.policies)
    return {
        "generate": [],
        "collect": ["scenario.json"],
        "fit-mnl": ["scenario.json", "observations.jsonl"],
        "train": ["scenario.json"] + (["mnl.json"] if needs_mnl else []),
        "tune": ["scenario.json"],
        "evaluate": ["scenario.json", "training.json", "tuned.json"] + (["mnl.json"] if needs_mnl else []),
        "report": ["evaluation.json"],
    }[stage]


STAGE_BLOCKS = {
    "generate": ("scenario",),
    "collect": ("scenario", "collect"),
    "fit-mnl": ("estimator",),
    "train": ("training", "policies"),
    "tune": ("policies",),
    "evaluate": ("policies", "oracle", "training"),
    "report": (),
}


def run_stage(stage: str, exp: Experiment, force: bool = False, jobs: int = 1) -> bool:
    """Run one stage unless it is up to date; returns True if it ran."""
    exp.out.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(exp.out)
    inputs = _require(exp.out, _stage_inputs(stage, exp), PRODUCER)
    cdigest = exp.block_digest(*STAGE_BLOCKS[stage])
    if not force and manifest.up_to_date(stage, cdigest, inputs, exp.out):
        log.info("%s: up to date", stage)
        return False
    fn: Callable = {
        "generate": _stage_generate,
        "collect": _stage_collect,
        "fit-mnl": _stage_fit,
        "train": lambda e: _stage_train(e, jobs),
        "tune": _stage_tune,
        "evaluate": _stage_evaluate,
        "report": _stage_report,
    }[stage]
    log.info("%s: running", stage)
    outputs = fn(exp)
    manifest.record(stage, cdigest, exp.seed, inputs, {name: file_digest(exp.out / name) for name in outputs},
                    {k: v for k, v in exp.raw.items() if k != "output"})
    return True


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gigpricing", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    for name in (*STAGES, "all"):
        p = sub.add_parser(name, help=f"run the {name} stage" if name != "all" else "run every stage in order")
        p.add_argument("--config", metavar="PATH", help="YAML experiment configuration")
        p.add_argument("--seed", type=int, metavar="N", help="override the global seed")
        p.add_argument("--out", metavar="DIR", help="override the output directory")
        p.add_argument("--force", action="store_true", help="re-run even if up to date")
        p.add_argument("--jobs", type=int, default=1, metavar="N", help="parallel training runs")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        exp = load_config(args.config, args.seed, args.out)
        stages = STAGES if args.command == "all" else (args.command,)
        for stage in stages:
            ran = run_stage(stage, exp, args.force, max(1, args.jobs))
            print(f"{stage}: {'done' if ran else 'up to date'}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingInput as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except FloatingPointError as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    return 0


if __name__ == "__main__":
    sys.exit(main())
