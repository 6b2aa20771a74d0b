"""Experiment orchestration: pre-train centrally, federate, evaluate, persist."""

from __future__ import annotations

import csv
import dataclasses
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from .aggregation import (ServerOptimizerConfig, ServerState, aggregate_heterogeneous,
                          compute_effective_weights, fedavg, server_step)
from .checkpoint import load_checkpoint, save_checkpoint
from .client import LocalTrainConfig, evaluate, run_client, sgd_epochs
from .data import Corpus, generate_synthetic_corpus
from .exceptions import ClientDivergenceError, ConfigurationError, DivergenceError, ReportParseError
from .heterogeneity import (STREAM_PRETRAIN, ClientPopulation, HeterogeneityProfile, make_rng,
                            resolve_profile, sample_round)
from .model import ModelConfig, ParamSet, SubNetSpec, init_model

logger = logging.getLogger(__name__)

CSV_COLUMNS = ("round", "exit", "loss", "token_err", "clients_total", "clients_exit_m", "wallclock_ms")
SCENARIOS = ("efl", "ofl")
AGGREGATIONS = ("heterogeneous", "fedavg")


@dataclass(frozen=True)
class DataConfig:
    task: str = "classification"
    samples_per_client: int = 40
    skew: float = 0.0
    eval_samples: int = 400
    num_classes: int | None = None  # defaults to the model's output_dim
    clusters_per_class: int = 2
    cluster_spread: float = 1.5
    noise: float = 0.5
    domain_shift: bool = True
    shift_strength: float = 0.6
    num_frames: int = 12
    max_tokens: int = 4
    source_samples_per_client: int | None = None  # pre-training corpus size; defaults to samples_per_client


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 0
    lr: float = 0.05
    batch_size: int = 16
    checkpoint: str | None = None
    exit_mask: tuple | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    num_clients: int = 60
    fraction: float = 0.1
    fixed_assignment: bool = False
    profile: object = "uniform"
    scenario: str = "efl"
    aggregation: str = "heterogeneous"
    server: ServerOptimizerConfig = field(default_factory=ServerOptimizerConfig)
    local: LocalTrainConfig = field(default_factory=LocalTrainConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    rounds: int = 300
    eval_every: int = 5
    seed: int = 0
    record_wallclock: bool = True

    def __post_init__(self):
        if self.rounds < 1:
            raise ConfigurationError("rounds must be >= 1")
        if self.eval_every < 1:
            raise ConfigurationError("eval_every must be >= 1")
        if self.scenario not in SCENARIOS:
            raise ConfigurationError(f"scenario must be one of {SCENARIOS}")
        if self.aggregation not in AGGREGATIONS:
            raise ConfigurationError(f"aggregation must be one of {AGGREGATIONS}")
        if self.local.task != self.data.task:
            raise ConfigurationError("local.task and data.task disagree")
        if self.pretrain.checkpoint is not None and not os.path.exists(self.pretrain.checkpoint):
            raise ConfigurationError(f"pretrain checkpoint {self.pretrain.checkpoint} does not exist")
        for mask in (self.local.exit_mask, self.pretrain.exit_mask):
            if mask is not None and (not mask or max(mask) > self.model.num_exits or min(mask) < 1):
                raise ConfigurationError(f"exit mask {mask} invalid for {self.model.num_exits} exits")
        self.resolved_profile()
        ClientPopulation(self.num_clients, self.fraction, self.seed, self.fixed_assignment)

    def resolved_profile(self) -> HeterogeneityProfile:
        name = "full" if self.scenario == "ofl" else self.profile
        return resolve_profile(name, self.model.num_exits)

    def population(self) -> ClientPopulation:
        return ClientPopulation(self.num_clients, self.fraction, self.seed, self.fixed_assignment)

    def model_config(self) -> ModelConfig:
        return dataclasses.replace(self.model, seed=self.seed)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        for key in ("local", "pretrain"):
            if out[key]["exit_mask"] is not None:
                out[key]["exit_mask"] = list(out[key]["exit_mask"])
        if not isinstance(out["profile"], str):
            out["profile"] = list(out["profile"])
        return out


_SECTIONS = {"model": ModelConfig, "data": DataConfig, "server": ServerOptimizerConfig,
             "local": LocalTrainConfig, "pretrain": PretrainConfig}


def config_from_dict(raw: dict, base_dir: str | os.PathLike | None = None) -> ExperimentConfig:
    raw = dict(raw or {})
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {}
    for key, value in raw.items():
        cls = _SECTIONS.get(key)
        if cls is None:
            kwargs[key] = value
            continue
        section = dict(value or {})
        bad = set(section) - {f.name for f in dataclasses.fields(cls)}
        if bad:
            raise ConfigurationError(f"unknown keys in [{key}]: {sorted(bad)}")
        if key == "pretrain" and section.get("checkpoint") and base_dir is not None:
            section["checkpoint"] = str(Path(base_dir) / section["checkpoint"])
        if section.get("exit_mask") is not None:
            section["exit_mask"] = tuple(section["exit_mask"])
        kwargs[key] = cls(**section)
    data = kwargs.get("data", DataConfig())
    local = kwargs.get("local", LocalTrainConfig())
    if "local" not in raw or "task" not in (raw.get("local") or {}):
        kwargs["local"] = dataclasses.replace(local, task=data.task)
    return ExperimentConfig(**kwargs)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file {path} does not exist")
    with open(path) as fh:
        try:
            raw = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"cannot parse {path}: {exc}") from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigurationError(f"{path} must hold a mapping at the top level")
    return config_from_dict(raw, base_dir=path.parent)


def dump_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)


# -- data ---------------------------------------------------------------------

def build_corpus(cfg: ExperimentConfig, domain_shift: bool | None = None) -> Corpus:
    d = cfg.data
    shift = d.domain_shift if domain_shift is None else domain_shift
    per_client = d.samples_per_client
    if not shift and d.source_samples_per_client is not None:
        per_client = d.source_samples_per_client
    return generate_synthetic_corpus(
        seed=cfg.seed, task=d.task, num_clients=cfg.num_clients, samples_per_client=per_client,
        skew=d.skew, input_dim=cfg.model.input_dim,
        num_classes=d.num_classes or cfg.model.output_dim, eval_samples=d.eval_samples,
        clusters_per_class=d.clusters_per_class, cluster_spread=d.cluster_spread, noise=d.noise,
        domain_shift=shift,
        shift_strength=d.shift_strength, num_frames=d.num_frames, max_tokens=d.max_tokens,
    )


# -- central training ---------------------------------------------------------

def pretrain_central(config: ModelConfig, corpus: Corpus, epochs: int, lr: float = 0.05,
                     batch_size: int = 16, exit_mask: Sequence[int] | None = None,
                     seed: int = 0, params: ParamSet | None = None,
                     out: str | os.PathLike | None = None) -> ParamSet:
    """Centralized SGD on the pooled corpus over all exits (optionally masked).

    Starts from ``params`` when given, otherwise from a fresh initialization.
    Writes an EEFL1 checkpoint to ``out`` when given.
    """
    params = init_model(config) if params is None else params.copy()
    if epochs > 0:
        train_cfg = LocalTrainConfig(epochs=epochs, lr=lr, batch_size=batch_size, task=corpus.task,
                                     exit_mask=tuple(exit_mask) if exit_mask else None)
        rng = make_rng(seed, STREAM_PRETRAIN)
        try:
            params, history = sgd_epochs(params, config, corpus.pooled(), SubNetSpec(config.num_exits),
                                         train_cfg, rng)
        except ClientDivergenceError as exc:
            raise DivergenceError(f"central training diverged: {exc}") from exc
        metrics = evaluate(params, config, corpus.eval_set)
        logger.info("central training: %d epochs, final train loss %.4f, eval per-exit loss %s",
                    epochs, history[-1], [round(m.loss, 4) for m in metrics])
    if out is not None:
        save_checkpoint(out, params)
    return params


def initial_params(cfg: ExperimentConfig) -> ParamSet:
    """Starting point of federation: a checkpoint, a fresh pre-training run, or an initialization."""
    config = cfg.model_config()
    p = cfg.pretrain
    if p.checkpoint is not None:
        params = load_checkpoint(p.checkpoint)
        if params.config.fingerprint() != config.fingerprint():
            raise ConfigurationError("pretrain checkpoint layout does not match the model config")
        return ParamSet(config, params.arrays, params.round_tag)
    if p.epochs > 0:
        source = build_corpus(cfg, domain_shift=False)
        return pretrain_central(config, source, p.epochs, p.lr, p.batch_size, p.exit_mask, cfg.seed)
    return init_model(config)


# -- federated loop -----------------------------------------------------------

@dataclass
class RoundMetrics:
    round: int
    exit_loss: list[float]
    exit_error: list[float]
    clients_total: int
    clients_per_exit: list[int]
    wallclock_ms: int = 0

    def rows(self):
        for m, (loss, err) in enumerate(zip(self.exit_loss, self.exit_error), 1):
            yield (self.round, m, loss, err, self.clients_total, self.clients_per_exit[m - 1], self.wallclock_ms)


@dataclass
class ExperimentResult:
    metrics: list[RoundMetrics]
    final_params: ParamSet
    state: ServerState
    effective_weights: list = field(default_factory=list)
    skipped_updates: int = 0
    aborted: bool = False

    def loss_at(self, round_index: int, exit: int) -> float:
        for rm in self.metrics:
            if rm.round == round_index:
                return rm.exit_loss[exit - 1]
        raise KeyError(f"round {round_index} was not evaluated")

    def final(self) -> RoundMetrics:
        return self.metrics[-1]


def _format_row(row) -> list[str]:
    r, m, loss, err, total, cm, ms = row
    return [str(r), str(m), repr(float(loss)), repr(float(err)), str(total), str(cm), str(ms)]


def write_metrics_csv(metrics: Sequence[RoundMetrics], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for rm in metrics:
            for row in rm.rows():
                writer.writerow(_format_row(row))


def run_experiment(cfg: ExperimentConfig, out_dir: str | os.PathLike | None = None, parallel: int = 1,
                   start_params: ParamSet | None = None, corpus: Corpus | None = None) -> ExperimentResult:
    """Run ``cfg.rounds`` federated rounds and evaluate every ``cfg.eval_every`` rounds.

    Round 0 in the metrics is the starting model. ``start_params`` and
    ``corpus`` skip pre-training and data generation when supplied.
    """
    config = cfg.model_config()
    M = config.num_exits
    corpus = build_corpus(cfg) if corpus is None else corpus
    params = initial_params(cfg) if start_params is None else start_params.copy()
    state = ServerState.initial(params, cfg.server)
    population, profile = cfg.population(), cfg.resolved_profile()
    clock = time.perf_counter()

    def elapsed_ms():
        return int((time.perf_counter() - clock) * 1000) if cfg.record_wallclock else 0

    def snapshot(round_index, selection):
        per_exit = evaluate(state.global_params, config, corpus.eval_set)
        counts = [0] * M
        for _, subnet in selection:
            counts[subnet.exits - 1] += 1
        return RoundMetrics(round_index, [m.loss for m in per_exit], [m.error for m in per_exit],
                            len(selection), counts, elapsed_ms())

    result = ExperimentResult([snapshot(0, [])], state.global_params, state)
    executor = ThreadPoolExecutor(max_workers=parallel) if parallel > 1 else None

    def train(item):
        client_id, subnet = item
        try:
            return run_client(state.global_params, config, corpus.shards[client_id], subnet, cfg.local,
                              client_id=client_id, round_index=tau, seed=cfg.seed)
        except ClientDivergenceError as exc:
            logger.warning("round %d: client %d diverged, update discarded (%s)", tau, client_id, exc)
            return None

    try:
        for tau in range(cfg.rounds):
            selection = sample_round(population, profile, tau)
            outcomes = list(executor.map(train, selection)) if executor else [train(s) for s in selection]
            updates = sorted((u for u in outcomes if u is not None), key=lambda u: u.client_id)
            result.skipped_updates += len(outcomes) - len(updates)
            result.effective_weights.append(compute_effective_weights(updates, M, cfg.local.lr))
            if updates:
                if cfg.aggregation == "heterogeneous":
                    grad = aggregate_heterogeneous(updates)
                else:
                    grad = fedavg(updates, "uniform")
                try:
                    state = server_step(state, grad)
                except DivergenceError as exc:
                    logger.error("server diverged at round %d: %s", tau, exc)
                    result.aborted = True
                    break
            else:
                state = dataclasses.replace(state, round=state.round + 1)
            done = tau + 1
            if done % cfg.eval_every == 0 or done == cfg.rounds:
                result.metrics.append(snapshot(done, selection))
    finally:
        if executor is not None:
            executor.shutdown()

    result.state, result.final_params = state, state.global_params
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(result.metrics, out / "metrics.csv")
        save_checkpoint(out / "final.eefl", state.global_params)
    return result


# -- reporting ----------------------------------------------------------------

def read_metrics_csv(path) -> list[RoundMetrics]:
    """Parse a metrics CSV back into RoundMetrics, one per evaluated round."""
    by_round: dict[int, dict] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return []
        if tuple(header) != CSV_COLUMNS:
            raise ReportParseError(f"unexpected header {header}", line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(CSV_COLUMNS):
                raise ReportParseError(f"expected {len(CSV_COLUMNS)} fields, got {len(row)}", line=lineno)
            try:
                r, m = int(row[0]), int(row[1])
                loss, err = float(row[2]), float(row[3])
                total, cm, ms = int(row[4]), int(row[5]), int(row[6])
            except ValueError as exc:
                raise ReportParseError(str(exc), line=lineno) from exc
            if m < 1:
                raise ReportParseError(f"exit index {m} < 1", line=lineno)
            entry = by_round.setdefault(r, {"exits": {}, "total": total, "ms": ms})
            entry["exits"][m] = (loss, err, cm)
    metrics = []
    for r in sorted(by_round):
        entry = by_round[r]
        exits = entry["exits"]
        if sorted(exits) != list(range(1, len(exits) + 1)):
            raise ReportParseError(f"round {r} has exits {sorted(exits)}")
        ordered = [exits[m] for m in range(1, len(exits) + 1)]
        metrics.append(RoundMetrics(r, [e[0] for e in ordered], [e[1] for e in ordered], entry["total"],
                                    [e[2] for e in ordered], entry["ms"]))
    return metrics


def rounds_to_threshold(metrics: Sequence[RoundMetrics], exit: int, threshold: float) -> int | None:
    """First evaluated round whose loss at ``exit`` is at or below ``threshold``."""
    for rm in metrics:
        if rm.exit_loss[exit - 1] <= threshold:
            return rm.round
    return None


def _summary_lines(metrics: Sequence[RoundMetrics], thresholds: Sequence[float] | None) -> list[str]:
    M = len(metrics[0].exit_loss)
    lines = [f"rounds evaluated: {len(metrics)} (last round {metrics[-1].round})",
             f"{'exit':>4} {'final_loss':>11} {'final_err':>9} {'best_loss':>10} {'best_err':>9} {'to_thresh':>9}"]
    for m in range(1, M + 1):
        losses = [rm.exit_loss[m - 1] for rm in metrics]
        errs = [rm.exit_error[m - 1] for rm in metrics]
        reach = "-"
        if thresholds is not None:
            hit = rounds_to_threshold(metrics, m, thresholds[m - 1])
            reach = "never" if hit is None else str(hit)
        lines.append(f"{m:>4} {losses[-1]:>11.4f} {errs[-1]:>9.4f} {min(losses):>10.4f} {min(errs):>9.4f} {reach:>9}")
    return lines


def write_plot_data(metrics: Sequence[RoundMetrics], plots_dir, svg: bool = True) -> list[Path]:
    """Write gnuplot-ready per-exit curves (and SVGs when matplotlib is importable)."""
    out = Path(plots_dir)
    out.mkdir(parents=True, exist_ok=True)
    M = len(metrics[0].exit_loss)
    written = []
    for key, attr in (("loss", "exit_loss"), ("token_err", "exit_error")):
        path = out / f"{key}.dat"
        with open(path, "w") as fh:
            fh.write("# round " + " ".join(f"exit{m}" for m in range(1, M + 1)) + "\n")
            for rm in metrics:
                fh.write(f"{rm.round} " + " ".join(repr(v) for v in getattr(rm, attr)) + "\n")
        written.append(path)
    if svg:
        try:
            import matplotlib
            matplotlib.use("Agg")
            import matplotlib.pyplot as plt
        except ImportError:
            return written
        rounds = [rm.round for rm in metrics]
        for key, attr in (("loss", "exit_loss"), ("token_err", "exit_error")):
            fig, ax = plt.subplots(figsize=(6, 4))
            for m in range(M):
                ax.plot(rounds, [getattr(rm, attr)[m] for rm in metrics], label=f"exit {m + 1}")
            ax.set_xlabel("round")
            ax.set_ylabel(key)
            ax.legend()
            path = out / f"{key}.svg"
            fig.savefig(path)
            plt.close(fig)
            written.append(path)
    return written


def report(metrics_csv, compare: str | os.PathLike | None = None, plots_dir=None,
           thresholds: Sequence[float] | None = None) -> str:
    metrics = read_metrics_csv(metrics_csv)
    if not metrics:
        return "no rounds"
    lines = _summary_lines(metrics, thresholds)
    if compare is not None:
        other = read_metrics_csv(compare)
        if not other:
            lines.append("comparison run: no rounds")
        else:
            if len(other[-1].exit_loss) != len(metrics[-1].exit_loss):
                raise ReportParseError("compared runs have different exit counts")
            lines.append("per-exit delta (this - compare) at final round:")
            lines.append(f"{'exit':>4} {'d_loss':>10} {'d_err':>10}")
            for m, (a, b, ea, eb) in enumerate(zip(metrics[-1].exit_loss, other[-1].exit_loss,
                                                   metrics[-1].exit_error, other[-1].exit_error), 1):
                lines.append(f"{m:>4} {a - b:>+10.4f} {ea - eb:>+10.4f}")
    if plots_dir is not None:
        write_plot_data(metrics, plots_dir)
    return "\n".join(lines)


# -- reference thresholds -----------------------------------------------------

def central_oracle(cfg: ExperimentConfig, start: ParamSet, corpus: Corpus, epochs: int = 50) -> list[float]:
    """Per-exit eval loss after central training on the pooled federated shards.

    Uses the clients' local optimizer settings (lr, batch size, frozen
    front-end) so it bounds what federation can reach on the same data.
    """
    config = cfg.model_config()
    train_cfg = dataclasses.replace(cfg.local, epochs=epochs, exit_mask=None)
    params, _ = sgd_epochs(start, config, corpus.pooled(), SubNetSpec(config.num_exits), train_cfg,
                           make_rng(cfg.seed, STREAM_PRETRAIN, 1))
    return [m.loss for m in evaluate(params, config, corpus.eval_set)]


def derive_thresholds(cfg: ExperimentConfig, start: ParamSet | None = None, corpus: Corpus | None = None,
                      gap_fraction: float = 0.2, epochs: int = 50) -> dict:
    """Loss thresholds that close ``1 - gap_fraction`` of the gap from the start model to the central oracle."""
    corpus = build_corpus(cfg) if corpus is None else corpus
    start = initial_params(cfg) if start is None else start
    initial = [m.loss for m in evaluate(start, cfg.model_config(), corpus.eval_set)]
    oracle = central_oracle(cfg, start, corpus, epochs)
    thresholds = [o + gap_fraction * (i - o) for i, o in zip(initial, oracle)]
    return {"initial_loss": initial, "oracle_loss": oracle, "gap_fraction": gap_fraction,
            "oracle_epochs": epochs, "thresholds": thresholds}
