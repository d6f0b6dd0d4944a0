"""Experiment runner: ``train``, ``eval``, ``baseline`` and ``validate`` subcommands.

An experiment config is a JSON file::

    {
      "scenarios": [{"name": "grid", "network": "grid.net.json", "flows": "grid.flows.json"}],
      "sim": {"preset": "resco", "horizon_s": 3600},
      "train": {"iterations": 300},
      "eval_episodes": 10,
      "seed": 0,
      "out": "runs/grid",
      "catalog_size": 4
    }

``scenarios`` may instead be the path of a registry file holding the same list
under a ``scenarios`` key. Relative paths resolve against the config's folder.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .baselines import CONTROLLERS, ControllerState, run_controller_episode
from .learn import (EpisodeResult, Scenario, TrainConfig, TrainingError, evaluate_policy,
                    scenario_caps, train)
from .netmodel import NetworkError, load_network, network_to_dict
from .scenarios import DEFAULT_CATALOG_SIZE, scenario_summary
from .simcore import (METRIC_COLUMNS, PRESETS, SimConfig, SimError, format_value,
                      metrics_finalize, parse_flows)
from .unicornnet import ModelError, UnicornNet
from .autodiff import CheckpointError

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2

_TOP_KEYS = {"scenarios", "sim", "train", "eval_episodes", "seed", "out", "catalog_size",
             "pressure_reduce"}
_SCENARIO_KEYS = {"name", "network", "flows", "tag"}


class ConfigError(ValueError):
    pass


@dataclass
class ScenarioRef:
    name: str
    network: Path
    flows: Path
    tag: str = ""


@dataclass
class ExperimentConfig:
    scenarios: List[ScenarioRef]
    sim: SimConfig = field(default_factory=SimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval_episodes: int = 10
    seed: int = 0
    out: Path = Path("runs")
    catalog_size: int = DEFAULT_CATALOG_SIZE
    pressure_reduce: str = "mean"
    source: str = "<config>"

    @property
    def regime(self) -> str:
        return "multiple" if len(self.scenarios) > 1 else "single"

    def validate(self) -> None:
        if not self.scenarios:
            raise ConfigError(f"{self.source}: scenarios: at least one scenario is required")
        names = [s.name for s in self.scenarios]
        if len(set(names)) != len(names):
            raise ConfigError(f"{self.source}: scenarios: duplicate scenario names {names}")
        try:
            self.sim.validate()
        except SimError as e:
            raise ConfigError(f"{self.source}: sim: {e}") from None
        ratio = self.sim.horizon_s / self.sim.decision_interval_s
        if abs(ratio - round(ratio)) > 1e-9:
            raise ConfigError(f"{self.source}: sim: horizon_s ({self.sim.horizon_s}) must be a "
                              f"multiple of decision_interval_s ({self.sim.decision_interval_s})")
        if self.eval_episodes < 1:
            raise ConfigError(f"{self.source}: eval_episodes must be >= 1")
        if self.catalog_size < 1:
            raise ConfigError(f"{self.source}: catalog_size must be >= 1")


def _sim_from(raw, where) -> SimConfig:
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object")
    raw = dict(raw)
    preset = raw.pop("preset", "resco")
    if preset not in PRESETS:
        raise ConfigError(f"{where}.preset: unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    known = set(SimConfig.__dataclass_fields__)
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return replace(PRESETS[preset], **{k: float(v) for k, v in raw.items()})
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from None


def _scenarios_from(raw, base: Path, where) -> List[ScenarioRef]:
    if isinstance(raw, str):
        reg_path = (base / raw).resolve()
        try:
            reg = json.loads(reg_path.read_text())
        except OSError as e:
            raise ConfigError(f"{where}: cannot read registry {reg_path}: {e.strerror}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"{reg_path}: line {e.lineno} column {e.colno}: {e.msg}") from None
        if not isinstance(reg, dict) or "scenarios" not in reg:
            raise ConfigError(f"{reg_path}: registry must be an object with a 'scenarios' list")
        return _scenarios_from(reg["scenarios"], reg_path.parent, f"{reg_path}: scenarios")
    if not isinstance(raw, list):
        raise ConfigError(f"{where}: expected a list of scenarios or a registry path")
    refs = []
    for k, s in enumerate(raw):
        w = f"{where}[{k}]"
        if not isinstance(s, dict):
            raise ConfigError(f"{w}: expected an object")
        unknown = set(s) - _SCENARIO_KEYS
        if unknown:
            raise ConfigError(f"{w}: unknown keys {sorted(unknown)}")
        for key in ("network", "flows"):
            if key not in s:
                raise ConfigError(f"{w}: missing '{key}'")
        net = (base / s["network"]).resolve()
        flows = (base / s["flows"]).resolve()
        refs.append(ScenarioRef(str(s.get("name", net.stem)), net, flows, str(s.get("tag", ""))))
    return refs


def config_from_dict(raw: dict, base: Path = Path("."), source: str = "<config>") -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: top level must be an object")
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"{source}: unknown keys {sorted(unknown)}")
    if "scenarios" not in raw:
        raise ConfigError(f"{source}: missing 'scenarios'")
    try:
        train_cfg = TrainConfig.from_dict(raw.get("train", {}))
    except (TrainingError, TypeError) as e:
        raise ConfigError(f"{source}: train: {e}") from None
    out = Path(raw.get("out", "runs"))
    cfg = ExperimentConfig(
        scenarios=_scenarios_from(raw["scenarios"], base, f"{source}: scenarios"),
        sim=_sim_from(raw.get("sim", {}), f"{source}: sim"),
        train=train_cfg,
        eval_episodes=int(raw.get("eval_episodes", 10)),
        seed=int(raw.get("seed", 0)),
        out=out if out.is_absolute() else (base / out),
        catalog_size=int(raw.get("catalog_size", DEFAULT_CATALOG_SIZE)),
        pressure_reduce=str(raw.get("pressure_reduce", "mean")),
        source=source,
    )
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"{path}: cannot read config: {e.strerror}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: line {e.lineno} column {e.colno}: {e.msg}") from None
    return config_from_dict(raw, path.resolve().parent, str(path))


def load_scenarios(cfg: ExperimentConfig) -> List[Scenario]:
    out = []
    for ref in cfg.scenarios:
        try:
            net = load_network(ref.network)
        except OSError as e:
            raise ConfigError(f"{ref.network}: cannot read network: {e.strerror}") from None
        except NetworkError as e:
            raise ConfigError(f"{ref.network}: {e}") from None
        try:
            flows = parse_flows(ref.flows.read_text())
        except OSError as e:
            raise ConfigError(f"{ref.flows}: cannot read flows: {e.strerror}") from None
        except (SimError, ValueError) as e:
            raise ConfigError(f"{ref.flows}: {e}") from None
        for r in list(flows.rates) + list(flows.departures):
            for lane in (r.origin, r.destination):
                if lane not in net.lanes:
                    raise ConfigError(f"{ref.flows}: unknown lane {lane!r} in scenario {ref.name!r}")
        tag = ref.tag or scenario_summary(net, flows, cfg.sim.horizon_s)["difficulty"]
        out.append(Scenario(ref.name, net, flows, tag))
    return out


# -- episode fan-out ----------------------------------------------------------

def worker_count() -> int:
    raw = os.environ.get("UNICORN_THREADS", "")
    try:
        n = int(raw) if raw else 1
    except ValueError:
        raise ConfigError(f"UNICORN_THREADS must be an integer, got {raw!r}") from None
    return max(1, min(n, os.cpu_count() or 1))


def _episode_job(job):
    kind, payload, scenario, sim_cfg, seed, reduce = job
    if kind == "unicorn":
        net = payload if isinstance(payload, UnicornNet) else UnicornNet.load(payload)
        return evaluate_policy(net, scenario, sim_cfg, seed)
    st, total = run_controller_episode(ControllerState(kind, reduce), scenario.net,
                                       scenario.flows, sim_cfg, seed)
    return EpisodeResult(scenario.name, seed, metrics_finalize(st), total)


def run_episodes(jobs: Sequence[tuple], workers: int) -> List[EpisodeResult]:
    if workers <= 1 or len(jobs) <= 1:
        return [_episode_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_episode_job, jobs))  # map keeps submission order


def summary_rows(results: Sequence[EpisodeResult]) -> List[list]:
    rows = []
    by_scenario = {}
    for r in results:
        by_scenario.setdefault(r.scenario, []).append(r)
    for name, rs in by_scenario.items():
        per_ep = [r.metrics.row(name, r.seed) for r in rs]
        rows.extend(per_ep)
        vals = np.array([row[2:] for row in per_ep], dtype=np.float64)
        rows.append([name, "mean"] + [float(x) for x in vals.mean(axis=0)])
        rows.append([name, "std"] + [float(x) for x in vals.std(axis=0)])
    return rows


def write_metrics(path: Path, results: Sequence[EpisodeResult]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for row in summary_rows(results):
            w.writerow([format_value(x) for x in row])
    with open(path.with_name(path.stem + "_returns.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("scenario", "seed", "episode_return"))
        for r in results:
            w.writerow((r.scenario, r.seed, format_value(float(r.episode_return))))


def eval_seeds(cfg: ExperimentConfig, seed: int) -> List[int]:
    return [seed + k for k in range(cfg.eval_episodes)]


# -- subcommands --------------------------------------------------------------

def cmd_validate(cfg: ExperimentConfig, args) -> int:
    scenarios = load_scenarios(cfg)
    M_max, P_max = scenario_caps(scenarios)
    print(f"config ok: {len(scenarios)} scenario(s), regime={cfg.regime}, "
          f"M_max={M_max}, P_max={P_max}")
    for s in scenarios:
        summ = scenario_summary(s.net, s.flows, cfg.sim.horizon_s)
        print(f"  {s.name}: tag={s.tag} total_int={summ['total_int']} "
              f"arms(2/3/4)={summ['arm2']}/{summ['arm3']}/{summ['arm4']} "
              f"volume={summ['volume']:.1f} rate mean/std/max/min="
              f"{summ['rate_mean']:.2f}/{summ['rate_std']:.2f}/"
              f"{summ['rate_max']:.2f}/{summ['rate_min']:.2f}")
    return EXIT_OK


def cmd_train(cfg: ExperimentConfig, args) -> int:
    scenarios = load_scenarios(cfg)
    tcfg = cfg.train if args.seed is None else replace(cfg.train, seed=args.seed)
    out = Path(args.out) if args.out else cfg.out
    out.mkdir(parents=True, exist_ok=True)

    def progress(it, rows):
        for r in rows:
            print(f"iter {it} {r['scenario']}: return={r['mean_return']:.1f} "
                  f"L_p={r['L_p']:.4f} L_v={r['L_v']:.4f}", file=sys.stderr)

    net, _ = train(tcfg, scenarios, cfg.sim, cfg.catalog_size, log_path=out / "train_log.csv",
                   checkpoint_dir=out, progress=progress if args.verbose else None)
    net.save(out / "model.bin")
    run = {"regime": cfg.regime, "scenarios": [s.name for s in scenarios],
           "tags": [s.tag for s in scenarios], "train": asdict(tcfg),
           "sim": asdict(cfg.sim)}
    (out / "run.json").write_text(json.dumps(run, indent=2, sort_keys=True) + "\n")
    print(f"trained ({cfg.regime}) -> {out / 'model.bin'}")
    return EXIT_OK


def _load_checked(path, scenarios, cfg) -> UnicornNet:
    try:
        net = UnicornNet.load(path)
    except (OSError, CheckpointError) as e:
        raise ConfigError(f"{path}: cannot load checkpoint: {e}") from None
    M_max, P_max = scenario_caps(scenarios)
    try:
        net.require_compatible(M_max, P_max, cfg.catalog_size)
    except ModelError as e:
        raise ConfigError(f"{path}: {e}") from None
    return net


def cmd_eval(cfg: ExperimentConfig, args, controller: str = "unicorn") -> int:
    scenarios = load_scenarios(cfg)
    seed = cfg.seed if args.seed is None else args.seed
    out = Path(args.out) if args.out else cfg.out
    workers = worker_count()
    if controller == "unicorn":
        if not args.checkpoint:
            raise ConfigError("--checkpoint is required for the unicorn controller")
        net = _load_checked(args.checkpoint, scenarios, cfg)
        payload = str(args.checkpoint) if workers > 1 else net
    elif controller in CONTROLLERS:
        payload = None
    else:
        raise ConfigError(f"unknown controller {controller!r}")
    jobs = [(controller, payload, s, cfg.sim, sd, cfg.pressure_reduce)
            for s in scenarios for sd in eval_seeds(cfg, seed)]
    results = run_episodes(jobs, workers)
    path = out / f"metrics_{controller}.csv"
    write_metrics(path, results)
    print(f"{len(results)} episode(s) -> {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="unicorn-tsc", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("train", "eval", "baseline", "validate"):
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="experiment config JSON")
        s.add_argument("--seed", type=int, default=None)
        s.add_argument("--out", default=None, help="output directory")
        s.add_argument("--controller", default=None,
                       choices=list(CONTROLLERS) + ["unicorn"])
        s.add_argument("--checkpoint", default=None)
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.command == "validate":
            return cmd_validate(cfg, args)
        if args.command == "train":
            return cmd_train(cfg, args)
        if args.command == "eval":
            return cmd_eval(cfg, args, "unicorn")
        controller = args.controller or "fixed"
        return cmd_eval(cfg, args, controller)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (SimError, ModelError, TrainingError, NetworkError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
