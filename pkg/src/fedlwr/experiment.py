"""Experiment harness: config parsing, multi-seed runs, CSV artifacts.

``run_experiment`` executes every (strategy, seed) pair on the configured
benchmark, writing per-round convergence curves and weight logs into a
subdirectory per run, plus one summary table of median-over-seeds final
results. Runs are independent and may execute in parallel threads
(``FEDLWR_THREADS``); outputs are identical regardless.
"""

from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .datasets import (
    BENCHMARKS,
    DatasetBundle,
    benchmark_domains,
    generate_client_dataset,
    load_dataset,
)
from .errors import ConfigError
from .federation import (
    ClientState,
    FederationConfig,
    StrategyKind,
    derive_seed,
    make_client,
    parse_strategy,
    run_round,
)
from .metrics import FAIRNESS_TIE_TOLERANCE, RoundReport
from .network import TOPOLOGIES, build_model

THREADS_ENV = "FEDLWR_THREADS"
SUMMARY_FILENAME = "summary.csv"

# Tags separating the seed streams of dataset generation and client RNGs.
_DATA_TAG = 101
_CLIENT_TAG = 202


@dataclass
class ExperimentConfig:
    strategies: list[StrategyKind] = field(default_factory=lambda: [StrategyKind.FEDAVG, StrategyKind.FED_LWR])
    rounds: int = 50
    seeds: list[int] = field(default_factory=lambda: [1, 2, 3, 4, 5])
    output_dir: str = "results"
    clients: int | None = None
    local_epochs: int = 1
    batch_size: int = 8
    cka_sample_size: int = 64
    v2_layer: int | None = None
    cka_split: str = "train"
    reset_optimizer_each_round: bool = False
    lr: float = 1e-3
    weight_decay: float = 1e-4
    topology_id: str = "tinyseg4"
    benchmark: str | None = "shift4"
    dataset_paths: list[str] = field(default_factory=list)
    samples_per_client: int = 60
    image_size: int = 16

    def to_dict(self) -> dict:
        return {
            "experiment": {
                "strategies": [s.value for s in self.strategies],
                "rounds": self.rounds,
                "seeds": list(self.seeds),
                "output_dir": self.output_dir,
            },
            "federation": {
                "clients": self.clients,
                "local_epochs": self.local_epochs,
                "batch_size": self.batch_size,
                "cka_sample_size": self.cka_sample_size,
                "v2_layer": self.v2_layer,
                "cka_split": self.cka_split,
                "reset_optimizer_each_round": self.reset_optimizer_each_round,
            },
            "optimizer": {"lr": self.lr, "weight_decay": self.weight_decay},
            "model": {"topology": self.topology_id},
            "data": {
                "benchmark": self.benchmark,
                "dataset_paths": list(self.dataset_paths),
                "samples_per_client": self.samples_per_client,
                "image_size": self.image_size,
            },
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a mapping of sections")
        known_sections = {"experiment", "federation", "optimizer", "model", "data"}
        unknown = set(raw) - known_sections
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")

        def section(name: str, keys: set[str]) -> dict:
            sec = raw.get(name) or {}
            if not isinstance(sec, dict):
                raise ConfigError(f"{name}: must be a mapping")
            bad = set(sec) - keys
            if bad:
                raise ConfigError(f"{name}: unknown keys {sorted(bad)}")
            return sec

        exp = section("experiment", {"strategies", "rounds", "seeds", "output_dir"})
        fed = section(
            "federation",
            {
                "clients",
                "local_epochs",
                "batch_size",
                "cka_sample_size",
                "v2_layer",
                "cka_split",
                "reset_optimizer_each_round",
            },
        )
        opt = section("optimizer", {"lr", "weight_decay"})
        mdl = section("model", {"topology"})
        dat = section("data", {"benchmark", "dataset_paths", "samples_per_client", "image_size"})

        defaults = cls()
        try:
            strategies = [parse_strategy(s) for s in exp.get("strategies", [s.value for s in defaults.strategies])]
        except ValueError as exc:
            raise ConfigError(f"experiment.strategies: {exc}") from exc
        if "benchmark" in dat:
            benchmark = dat["benchmark"]
        elif dat.get("dataset_paths"):
            benchmark = None
        else:
            benchmark = defaults.benchmark
        return cls(
            strategies=strategies,
            rounds=exp.get("rounds", defaults.rounds),
            seeds=list(exp.get("seeds", defaults.seeds)),
            output_dir=exp.get("output_dir", defaults.output_dir),
            clients=fed.get("clients", defaults.clients),
            local_epochs=fed.get("local_epochs", defaults.local_epochs),
            batch_size=fed.get("batch_size", defaults.batch_size),
            cka_sample_size=fed.get("cka_sample_size", defaults.cka_sample_size),
            v2_layer=fed.get("v2_layer", defaults.v2_layer),
            cka_split=fed.get("cka_split", defaults.cka_split),
            reset_optimizer_each_round=fed.get(
                "reset_optimizer_each_round", defaults.reset_optimizer_each_round
            ),
            lr=opt.get("lr", defaults.lr),
            weight_decay=opt.get("weight_decay", defaults.weight_decay),
            topology_id=mdl.get("topology", defaults.topology_id),
            benchmark=benchmark,
            dataset_paths=list(dat.get("dataset_paths", defaults.dataset_paths)),
            samples_per_client=dat.get("samples_per_client", defaults.samples_per_client),
            image_size=dat.get("image_size", defaults.image_size),
        )

    def validate(self) -> None:
        if not self.strategies:
            raise ConfigError("experiment.strategies: must not be empty")
        if self.rounds < 1:
            raise ConfigError("experiment.rounds: must be >= 1")
        if not self.seeds:
            raise ConfigError("experiment.seeds: must not be empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("experiment.seeds: must be distinct")
        if not self.output_dir:
            raise ConfigError("experiment.output_dir: must not be empty")
        if self.local_epochs < 1:
            raise ConfigError("federation.local_epochs: must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("federation.batch_size: must be >= 1")
        if self.cka_sample_size < 2:
            raise ConfigError("federation.cka_sample_size: must be >= 2")
        if self.cka_split not in ("train", "val", "test"):
            raise ConfigError("federation.cka_split: must be train, val, or test")
        if self.v2_layer is not None and self.v2_layer < 1:
            raise ConfigError("federation.v2_layer: must be >= 1")
        if self.lr <= 0:
            raise ConfigError("optimizer.lr: must be > 0")
        if self.weight_decay < 0:
            raise ConfigError("optimizer.weight_decay: must be >= 0")
        if self.topology_id not in TOPOLOGIES:
            raise ConfigError(f"model.topology: unknown topology {self.topology_id!r}")
        has_benchmark = self.benchmark is not None
        has_paths = bool(self.dataset_paths)
        if has_benchmark == has_paths:
            raise ConfigError("data.benchmark: set exactly one of benchmark or dataset_paths")
        if has_benchmark and self.benchmark not in BENCHMARKS:
            raise ConfigError(f"data.benchmark: unknown benchmark {self.benchmark!r}")
        if has_benchmark:
            if self.samples_per_client < 10:
                raise ConfigError("data.samples_per_client: must be >= 10")
            if self.image_size < 8:
                raise ConfigError("data.image_size: must be >= 8")
        expected_k = len(benchmark_domains(self.benchmark)) if has_benchmark else len(self.dataset_paths)
        if self.clients is not None and self.clients != expected_k:
            raise ConfigError(
                f"federation.clients: {self.clients} does not match the {expected_k} configured datasets"
            )


def render_config(config: ExperimentConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=False)


def parse_config(text: str) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from exc
    return ExperimentConfig.from_dict(raw)


def load_config(path: str) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def save_config(config: ExperimentConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(render_config(config))


def _build_bundles(config: ExperimentConfig, seed: int) -> list[DatasetBundle]:
    if config.benchmark is not None:
        domains = benchmark_domains(config.benchmark)
        return [
            generate_client_dataset(
                spec,
                config.samples_per_client,
                config.image_size,
                config.image_size,
                seed=derive_seed(seed, cid, _DATA_TAG),
            )
            for cid, spec in enumerate(domains, start=1)
        ]
    return [load_dataset(path) for path in config.dataset_paths]


def _fmt(x: float) -> str:
    return repr(float(x))


def _write_curve(path: Path, reports: list[RoundReport]) -> None:
    k = len(reports[0].per_client_dice)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["round", *[f"client_{i}" for i in range(1, k + 1)], "avg", "std"])
        for report in reports:
            writer.writerow(
                [report.round_index, *[_fmt(d) for d in report.per_client_dice], _fmt(report.avg), _fmt(report.std)]
            )


def _write_weights(path: Path, reports: list[RoundReport]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["round", "client", "layer", "similarity", "weight"])
        for report in reports:
            k, m = report.weights_used.values.shape
            for ki in range(k):
                for mi in range(m):
                    writer.writerow(
                        [
                            report.round_index,
                            ki + 1,
                            mi + 1,
                            _fmt(report.similarity_log[ki, mi]),
                            _fmt(report.weights_used.values[ki, mi]),
                        ]
                    )


@dataclass
class RunResult:
    strategy: StrategyKind
    seed: int
    reports: list[RoundReport]
    paths: list[Path]

    @property
    def final(self) -> RoundReport:
        return self.reports[-1]


def _run_single(config: ExperimentConfig, strategy: StrategyKind, seed: int, out_dir: Path) -> RunResult:
    bundles = _build_bundles(config, seed)
    initial = build_model(config.topology_id, seed)
    clients = [
        make_client(
            cid,
            bundle,
            initial,
            rng_seed=derive_seed(seed, cid, _CLIENT_TAG),
            lr=config.lr,
            weight_decay=config.weight_decay,
        )
        for cid, bundle in enumerate(bundles, start=1)
    ]
    fed_config = FederationConfig(
        local_epochs=config.local_epochs,
        batch_size=config.batch_size,
        cka_sample_size=config.cka_sample_size,
        v2_layer=config.v2_layer,
        cka_split=config.cka_split,
        reset_optimizer_each_round=config.reset_optimizer_each_round,
    )
    global_model = initial
    reports: list[RoundReport] = []
    for round_index in range(1, config.rounds + 1):
        global_model, report = run_round(clients, global_model, strategy, fed_config, round_index)
        reports.append(report)

    run_dir = out_dir / f"{strategy.value}_s{seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    curve_path = run_dir / f"curve_{strategy.value}_{seed}.csv"
    weights_path = run_dir / f"weights_{strategy.value}_{seed}.csv"
    _write_curve(curve_path, reports)
    _write_weights(weights_path, reports)
    return RunResult(strategy, seed, reports, [curve_path, weights_path])


def _thread_count() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"{THREADS_ENV}: not an integer: {raw!r}") from None


def _write_summary(path: Path, config: ExperimentConfig, results: list[RunResult]) -> None:
    by_strategy: dict[StrategyKind, list[RunResult]] = {s: [] for s in config.strategies}
    for result in results:
        by_strategy[result.strategy].append(result)
    k = len(results[0].final.per_client_dice)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["strategy", *[f"client_{i}" for i in range(1, k + 1)], "avg", "std"])
        for strategy in config.strategies:
            finals = [r.final for r in sorted(by_strategy[strategy], key=lambda r: r.seed)]
            per_client = [
                float(np.median([f.per_client_dice[i] for f in finals])) for i in range(k)
            ]
            avg = float(np.median([f.avg for f in finals]))
            std = float(np.median([f.std for f in finals]))
            writer.writerow([strategy.value, *[_fmt(d) for d in per_client], _fmt(avg), _fmt(std)])


def run_experiment(config: ExperimentConfig) -> list[Path]:
    """Run every configured (strategy, seed) pair and write all artifacts.

    Returns the sorted list of files written: one curve CSV and one weight
    log per run, plus the cross-seed summary table.
    """
    config.validate()
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    jobs = [(strategy, seed) for strategy in config.strategies for seed in config.seeds]
    threads = _thread_count()
    if threads == 1:
        results = [_run_single(config, strategy, seed, out_dir) for strategy, seed in jobs]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [pool.submit(_run_single, config, strategy, seed, out_dir) for strategy, seed in jobs]
            results = [f.result() for f in futures]

    summary_path = out_dir / SUMMARY_FILENAME
    _write_summary(summary_path, config, results)
    paths = sorted(p for result in results for p in result.paths)
    return [*paths, summary_path]


@dataclass
class CompareResult:
    strategy_a: str
    avg_a: float
    std_a: float
    strategy_b: str
    avg_b: float
    std_b: float
    fairer: str  # "a", "b", or "tie"
    better_avg: str  # "a", "b", or "tie"


def compare(summary_path: str, strategy_a: str, strategy_b: str) -> CompareResult:
    """Read a summary table and compare two strategies on fairness (std)
    and average Dice."""
    name_a = parse_strategy(strategy_a).value
    name_b = parse_strategy(strategy_b).value
    rows: dict[str, dict[str, str]] = {}
    with open(summary_path, "r", newline="") as fh:
        for row in csv.DictReader(fh):
            rows[row["strategy"]] = row
    for name in (name_a, name_b):
        if name not in rows:
            raise ValueError(f"strategy {name!r} not present in {summary_path}")
    avg_a, std_a = float(rows[name_a]["avg"]), float(rows[name_a]["std"])
    avg_b, std_b = float(rows[name_b]["avg"]), float(rows[name_b]["std"])

    if abs(std_a - std_b) < FAIRNESS_TIE_TOLERANCE:
        fairer = "tie"
    else:
        fairer = "a" if std_a < std_b else "b"
    if abs(avg_a - avg_b) < FAIRNESS_TIE_TOLERANCE:
        better_avg = "tie"
    else:
        better_avg = "a" if avg_a > avg_b else "b"
    return CompareResult(name_a, avg_a, std_a, name_b, avg_b, std_b, fairer, better_avg)


def format_compare(result: CompareResult) -> str:
    def pick(which: str) -> str:
        if which == "tie":
            return "tie"
        return result.strategy_a if which == "a" else result.strategy_b

    lines = [
        f"{result.strategy_a}: avg {result.avg_a:.4f}, std {result.std_a:.4f}",
        f"{result.strategy_b}: avg {result.avg_b:.4f}, std {result.std_b:.4f}",
        f"fairer (lower std): {pick(result.fairer)}",
        f"better average: {pick(result.better_avg)}",
    ]
    return "\n".join(lines)
