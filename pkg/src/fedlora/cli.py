"""Experiment configuration, orchestration and the ``fedlora`` command line.

    fedlora run --config exp.json --rounds 5 --out-dir runs/a
    fedlora compare --configs a.json b.json --out runs/ab.csv
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

from fedlora.errors import ContractError, NumericalError, TrainingError
from fedlora.federation import ClientState, ServerState, init_clients, run_round
from fedlora.metrics import CSV_HEADER, RoundReport, emit_reports
from fedlora.strategy import AggregationStrategy, Assignment, Kind
from fedlora.task import TrainConfig, build_model, compose, layer_dims, make_task, pretrained_weights

log = logging.getLogger("fedlora")

SEED_ENV = "FEDLORA_SEED"
# fields that may differ between runs of one comparison
COMPARABLE = {"strategy", "assignment", "local_epochs", "truncation_rank", "out_dir"}


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class ExperimentConfig:
    strategy: str = "fedex-lora"
    clients: int = 3
    rank: int = 4
    alpha: float | None = None  # None -> 2 * rank
    rounds: int = 15
    local_epochs: int = 3
    m: int = 32
    n: int = 32
    depth: int = 2
    samples_per_client: int = 256
    heterogeneity: float = 0.0
    learning_rate: float = 0.2
    batch_size: int = 32
    seed: int = 0
    truncation_rank: int | None = None
    assignment: str = "average"
    out_dir: str = "runs/default"

    def validate(self) -> ExperimentConfig:
        valid_strategies = [k.value for k in Kind]
        if self.strategy not in valid_strategies:
            raise ConfigError("strategy", f"{self.strategy!r} is not one of {valid_strategies}")
        valid_assign = [a.value for a in Assignment]
        if self.assignment not in valid_assign:
            raise ConfigError("assignment", f"{self.assignment!r} is not one of {valid_assign}")
        for key in ("clients", "rank", "rounds", "local_epochs", "m", "n", "depth", "samples_per_client", "batch_size"):
            value = getattr(self, key)
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise ConfigError(key, f"must be a positive integer, got {value!r}")
        if isinstance(self.seed, bool) or not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed", f"must be a non-negative integer, got {self.seed!r}")
        if self.rank > min(self.m, self.n):
            raise ConfigError("rank", f"{self.rank} exceeds min(m, n) = {min(self.m, self.n)}")
        if self.alpha is None:
            self.alpha = 2.0 * self.rank
        if not isinstance(self.alpha, (int, float)) or self.alpha <= 0:
            raise ConfigError("alpha", f"must be positive, got {self.alpha!r}")
        self.alpha = float(self.alpha)
        if not isinstance(self.learning_rate, (int, float)) or self.learning_rate <= 0:
            raise ConfigError("learning_rate", f"must be positive, got {self.learning_rate!r}")
        if not isinstance(self.heterogeneity, (int, float)) or not 0.0 <= self.heterogeneity <= 1.0:
            raise ConfigError("heterogeneity", f"must lie in [0, 1], got {self.heterogeneity!r}")
        if self.batch_size > self.samples_per_client:
            raise ConfigError("batch_size", f"{self.batch_size} exceeds samples_per_client {self.samples_per_client}")
        if self.strategy == Kind.FEDEX_TRUNCATED.value:
            if self.truncation_rank is None:
                raise ConfigError("truncation_rank", "required when strategy is fedex-trunc")
            if not isinstance(self.truncation_rank, int) or self.truncation_rank < 1:
                raise ConfigError("truncation_rank", f"must be a positive integer, got {self.truncation_rank!r}")
            if self.truncation_rank > self.clients * self.rank:
                raise ConfigError("truncation_rank", f"{self.truncation_rank} exceeds k*r = {self.clients * self.rank}")
        elif self.truncation_rank is not None:
            raise ConfigError("truncation_rank", "only valid with strategy fedex-trunc")
        if self.assignment != Assignment.AVERAGE.value and self.strategy != Kind.FEDEX_LORA.value:
            raise ConfigError("assignment", "only valid with strategy fedex-lora")
        return self

    def aggregation_strategy(self) -> AggregationStrategy:
        return AggregationStrategy(Kind(self.strategy), self.truncation_rank, Assignment(self.assignment))

    def echo(self) -> dict:
        return dataclasses.asdict(self)


_FIELDS = {f.name for f in dataclasses.fields(ExperimentConfig)}


def load_config_file(path) -> dict:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError("config", f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"{path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config", f"{path} must hold a JSON object")
    return raw


def parse_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Merge defaults, ``$FEDLORA_SEED``, the JSON file and flag overrides.

    Later sources win.  Unknown keys are rejected by name.
    """
    values: dict = {}
    env_seed = os.environ.get(SEED_ENV)
    if env_seed is not None:
        try:
            values["seed"] = int(env_seed)
        except ValueError:
            raise ConfigError("seed", f"{SEED_ENV}={env_seed!r} is not an integer") from None
    if path is not None:
        values.update(load_config_file(path))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    for key in values:
        if key not in _FIELDS:
            raise ConfigError(key, "unknown configuration key")
    return ExperimentConfig(**values).validate()


def build(cfg: ExperimentConfig) -> tuple[ServerState, list[ClientState]]:
    dims = layer_dims(cfg.m, cfg.n, cfg.depth)
    w0s = pretrained_weights(dims, [cfg.seed, 1])
    datasets = make_task(
        cfg.m, cfg.n, cfg.clients, cfg.samples_per_client, cfg.heterogeneity, [cfg.seed, 2], base_map=compose(w0s)
    )
    model = build_model(w0s, cfg.rank, cfg.alpha, [cfg.seed, 3])
    train = TrainConfig(cfg.learning_rate, cfg.local_epochs, cfg.batch_size, cfg.seed)
    clients = init_clients(model, datasets, train)
    return ServerState(cfg.aggregation_strategy(), seed=cfg.seed), clients


def simulate(cfg: ExperimentConfig, reports: list[RoundReport] | None = None) -> list[RoundReport]:
    """Run all rounds in memory.  Completed reports are appended to ``reports``."""
    reports = [] if reports is None else reports
    server, clients = build(cfg)
    for _ in range(cfg.rounds):
        reports.append(run_round(server, clients))
    return reports


def _dump_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2) + "\n")


def run_experiment(cfg: ExperimentConfig) -> int:
    """Run one experiment and write ``rounds.csv``, ``summary.json`` and ``config_echo.json``."""
    out = Path(cfg.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        _dump_json(out / "config_echo.json", cfg.echo())
    except OSError as exc:
        log.error("cannot write to %s: %s", out, exc)
        return 1
    reports: list[RoundReport] = []
    try:
        simulate(cfg, reports)
    except (TrainingError, NumericalError) as exc:
        failed = len(reports) + 1
        log.error("round %d failed: %s", failed, exc)
        extra = {"failed_at_round": failed, "error": str(exc), "config": cfg.echo()}
        try:
            if reports:
                emit_reports(reports, out, extra=extra)
            else:
                _dump_json(out / "summary.json", {"strategy": cfg.aggregation_strategy().tag, "rounds": 0, **extra})
        except OSError as io_exc:
            log.error("%s", io_exc)
        return 1
    try:
        emit_reports(reports, out, extra={"config": cfg.echo()})
    except OSError as exc:
        log.error("%s", exc)
        return 1
    log.info("%s: %d rounds, final loss %.6g", cfg.aggregation_strategy().tag, len(reports), reports[-1].mean_client_loss)
    return 0


def check_comparable(configs: list[ExperimentConfig]):
    base = configs[0].echo()
    for i, cfg in enumerate(configs[1:], 1):
        for key, value in cfg.echo().items():
            if key not in COMPARABLE and value != base[key]:
                raise ConfigError(key, f"run {i} has {value!r} but run 0 has {base[key]!r} (use --allow-mixed)")


def compare(configs, out, *, allow_mixed: bool = False) -> int:
    """Run several configurations and merge their CSVs with a ``run_id`` column.

    ``configs`` may hold paths or :class:`ExperimentConfig` objects.  Each run
    writes its own artifacts under ``<out stem>_runs/run<i>``.
    """
    cfgs = [c if isinstance(c, ExperimentConfig) else parse_config(c) for c in configs]
    if not cfgs:
        raise ConfigError("configs", "need at least one configuration")
    if not allow_mixed:
        check_comparable(cfgs)
    out = Path(out)
    run_root = out.parent / f"{out.stem}_runs"
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["run_id", *CSV_HEADER])
    status = 0
    for i, cfg in enumerate(cfgs):
        cfg = dataclasses.replace(cfg, out_dir=str(run_root / f"run{i}"))
        code = run_experiment(cfg)
        status = status or code
        csv_path = Path(cfg.out_dir) / "rounds.csv"
        if not csv_path.exists():
            continue
        rows = list(csv.reader(csv_path.read_text().splitlines()))
        for row in rows[1:]:
            writer.writerow([f"run{i}", *row])
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(buf.getvalue())
    except OSError as exc:
        log.error("could not write %s: %s", out, exc)
        return 1
    return status


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedlora", description="Federated LoRA aggregation simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment", argument_default=argparse.SUPPRESS)
    run.add_argument("--config", help="JSON config file")
    run.add_argument("--strategy", choices=[k.value for k in Kind])
    run.add_argument("--clients", type=int)
    run.add_argument("--rank", type=int)
    run.add_argument("--alpha", type=float)
    run.add_argument("--rounds", type=int)
    run.add_argument("--local-epochs", dest="local_epochs", type=int)
    run.add_argument("--m", type=int)
    run.add_argument("--n", type=int)
    run.add_argument("--depth", type=int)
    run.add_argument("--samples-per-client", dest="samples_per_client", type=int)
    run.add_argument("--heterogeneity", type=float)
    run.add_argument("--learning-rate", dest="learning_rate", type=float)
    run.add_argument("--batch-size", dest="batch_size", type=int)
    run.add_argument("--seed", type=int)
    run.add_argument("--truncation-rank", dest="truncation_rank", type=int)
    run.add_argument("--assignment", choices=[a.value for a in Assignment])
    run.add_argument("--out-dir", dest="out_dir")

    cmp_ = sub.add_parser("compare", help="run several configs and merge their CSVs")
    cmp_.add_argument("--configs", nargs="+", required=True)
    cmp_.add_argument("--out", required=True)
    cmp_.add_argument("--allow-mixed", action="store_true")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = vars(_parser().parse_args(argv))
    command = args.pop("command")
    try:
        if command == "run":
            cfg = parse_config(args.pop("config", None), args)
            return run_experiment(cfg)
        return compare(args["configs"], args["out"], allow_mixed=args["allow_mixed"])
    except (ConfigError, ContractError) as exc:
        print(f"fedlora: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
