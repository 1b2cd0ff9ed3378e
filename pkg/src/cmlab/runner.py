"""Config-driven experiments: inception, continuation arms, trajectories, artifacts.

The config file is flat JSON; every key of :class:`ExperimentConfig` may
appear at top level and unknown keys are rejected.  Seeds vary the model
initialization, batch order and the stage partition; the benchmark itself
(languages, dev and test sets) is fixed by ``data_seed``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .artifacts import atomic_write_text, dumps_report, ensure_writable_dir, format_heatmap_csv, render_heatmap_svg
from .data import SKEWED_RATIOS, TOKEN_TAG, Benchmark, BenchmarkSpec, Corpus, build_benchmark
from .errors import ConfigError
from .metrics import (ChangeMatrix, MetricsReport, aggregate_reports, avg_percent_loss, build_change_matrix,
                      closest_language_check, mean_matrix, percent_change, worst_case_stage)
from .model import ModelConfig, build_model
from .strategies import (FFT, LAFT, LAFT_URIEL, SFT, STRATEGIES, ContinuationPlan, DeployedModel, FixedFactor,
                         LaftConfig, SftConfig, TrainHyper, UrielFactor, pretrain_language_matrices,
                         run_continuation, run_inception)
from .uriel import DivisionFactorFn

log = logging.getLogger(__name__)

H2L = "H2L"
L2H = "L2H"
THREADS_ENV = "CML_THREADS"


@dataclass
class ExperimentConfig:
    # benchmark
    n_families: int = 2
    langs_per_family: int = 3
    p_in: float = 0.05
    p_out: float = 0.35
    n_features: int = 16
    n_concepts: int = 24
    n_classes: int = 4
    shared_fraction: float = 0.2
    task: str = TOKEN_TAG
    base_resource: int = 600
    resource_ratios: list = field(default_factory=lambda: list(SKEWED_RATIOS))
    dev_size: int = 100
    test_size: int = 200
    seq_len_min: int = 8
    seq_len_max: int = 12
    p_same_class: float = 0.4
    n_stages: int = 2
    data_seed: int = 0
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    # model
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ffn: int = 128
    max_seq_len: int = 32
    b_dim: int = 16
    # training
    strategies: list = field(default_factory=lambda: [FFT, LAFT_URIEL])
    optimizer: str = "adamw"
    weight_decay: float = 1e-5
    batch_size: int = 32
    inception_lr: float = 2e-3
    inception_epochs: int = 10
    laft_inception_lr: float = 2e-3
    laft_shared_epochs: int = 5
    laft_language_epochs: int = 5
    continuation_lr: float = 1e-3
    continuation_epochs: int = 5
    adapter_lr: float = 1e-3
    laft_division_factor: float = 10.0
    uriel_factor: str = "calibrated"
    uriel_factor_min: float = 35.0
    uriel_factor_max: float = 100.0
    sft_ft_epochs: int = 3
    sft_st_epochs: int = 10
    sft_density: float = 0.05
    sft_inception_density: float = 0.10
    sft_mlm_lr: float = 2e-3
    sft_strict: bool = False
    # stage plan
    single_stage: bool = True
    trajectories: list = field(default_factory=list)
    eval_split: str = "test"
    out_dir: str = "runs/reference"

    def validate(self) -> "ExperimentConfig":
        problems = []
        if not self.seeds:
            problems.append("seeds must be non-empty")
        bad = [s for s in self.strategies if s not in STRATEGIES]
        if bad or not self.strategies:
            problems.append(f"unknown or missing strategies {bad}")
        if self.n_stages < 2:
            problems.append("need an inception shard and at least one continuation shard (n_stages >= 2)")
        if self.uriel_factor not in ("calibrated", "published"):
            problems.append("uriel_factor must be 'calibrated' or 'published'")
        if self.eval_split not in ("dev", "test"):
            problems.append("eval_split must be 'dev' or 'test'")
        if self.continuation_epochs < 0 or self.inception_epochs < 0:
            problems.append("epochs must be non-negative")
        for order in self.trajectories:
            if isinstance(order, str) and order not in (H2L, L2H):
                problems.append(f"unknown trajectory order {order!r}")
            elif isinstance(order, list) and len(set(order)) != len(order):
                problems.append(f"trajectory {order} repeats a language")
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    # --- conversions -------------------------------------------------------

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys {unknown}")
        return cls(**dict(d)).validate()

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def config_hash(self) -> str:
        """Hash of everything that influences results (the output directory does not)."""
        d = self.to_dict()
        d.pop("out_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes).validate()

    # --- derived objects ---------------------------------------------------

    def benchmark_spec(self) -> BenchmarkSpec:
        return BenchmarkSpec(self.n_families, self.langs_per_family, self.p_in, self.p_out, self.n_features,
                             self.n_concepts, self.n_classes, self.shared_fraction, self.task,
                             self.base_resource, tuple(self.resource_ratios), self.dev_size, self.test_size,
                             (self.seq_len_min, self.seq_len_max), self.p_same_class, self.n_stages,
                             self.data_seed)

    def model_config(self, bench: Benchmark) -> ModelConfig:
        return ModelConfig(vocab_size=bench.vocab_size, n_tags=bench.n_tags, n_classes=self.n_classes,
                           n_layers=self.n_layers, d_model=self.d_model, n_heads=self.n_heads, d_ffn=self.d_ffn,
                           max_seq_len=self.max_seq_len, b_dim=self.b_dim).validate()

    def inception_hyper(self) -> TrainHyper:
        return TrainHyper(self.inception_lr, self.inception_epochs, self.batch_size, self.optimizer,
                          self.weight_decay)

    def continuation_hyper(self) -> TrainHyper:
        return TrainHyper(self.continuation_lr, self.continuation_epochs, self.batch_size, self.optimizer,
                          self.weight_decay)

    def laft_config(self) -> LaftConfig:
        return LaftConfig(self.laft_shared_epochs, self.laft_language_epochs, self.laft_inception_lr)

    def sft_config(self) -> SftConfig:
        return SftConfig(self.sft_ft_epochs, self.sft_st_epochs, self.sft_density, self.sft_inception_density,
                         True, self.sft_mlm_lr, strict_base=self.sft_strict).validate()

    def factor_source(self, strategy: str, bench: Benchmark):
        if strategy == LAFT:
            return FixedFactor(self.laft_division_factor)
        if strategy == LAFT_URIEL:
            if self.uriel_factor == "published":
                fn = DivisionFactorFn()
            else:
                fn = DivisionFactorFn.for_matrix(bench.distances, self.uriel_factor_min, self.uriel_factor_max)
            return UrielFactor(bench.distances, fn)
        return None


def reference_config(**changes) -> ExperimentConfig:
    """The reference experiment: defaults plus both resource-ordered trajectories."""
    return ExperimentConfig(trajectories=[H2L, L2H]).replace(**changes)


def resolve_order(order, resource_counts: Mapping[str, int]) -> list[str]:
    """H2L sorts by resource count (descending, ties by id); L2H is its reverse."""
    languages = sorted(resource_counts)
    h2l = sorted(languages, key=lambda lang: (-resource_counts[lang], lang))
    if order == H2L:
        return h2l
    if order == L2H:
        return h2l[::-1]
    order = list(order)
    if len(set(order)) != len(order):
        raise ConfigError(f"trajectory {order} repeats a language")
    if sorted(order) != languages:
        raise ConfigError(f"trajectory {order} must cover each of {languages} exactly once")
    return order


def order_name(order) -> str:
    return order if isinstance(order, str) else "-".join(order)


def thread_count() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None


# ---------------------------------------------------------------------------
# results
# ---------------------------------------------------------------------------

@dataclass
class ArmRecord:
    strategy: str
    seed: int
    language: str
    status: str
    seconds: float
    scores: dict | None = None
    error: str | None = None


@dataclass
class RunManifest:
    config_hash: str
    arms: list[ArmRecord] = field(default_factory=list)
    artifacts: list[str] = field(default_factory=list)
    timings: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(a.status == "ok" for a in self.arms)

    @property
    def status(self) -> str:
        return "complete" if self.ok else "partial"

    def to_dict(self) -> dict:
        return {"config_hash": self.config_hash, "status": self.status, "timings": self.timings,
                "artifacts": self.artifacts,
                "arms": [{k: v for k, v in dataclasses.asdict(a).items() if k != "scores"} for a in self.arms]}


@dataclass
class StrategyResult:
    strategy: str
    baseline: dict = field(default_factory=dict)
    dev_baseline: dict = field(default_factory=dict)
    matrices: dict = field(default_factory=dict)
    reports: dict = field(default_factory=dict)
    closest: dict = field(default_factory=dict)

    @property
    def report(self) -> MetricsReport:
        return aggregate_reports([self.reports[s] for s in sorted(self.reports)])

    @property
    def mean_matrix(self) -> ChangeMatrix:
        return mean_matrix([self.matrices[s] for s in sorted(self.matrices)])

    @property
    def mean_closest(self) -> float:
        return float(np.mean([self.closest[s] for s in sorted(self.closest)]))

    def mean_baseline(self, split: str = "eval") -> float:
        scores = self.dev_baseline if split == "dev" else self.baseline
        return float(np.mean([np.mean(list(b.values())) for b in scores.values()]))


@dataclass
class TrajectoryResult:
    strategy: str
    order: list
    matrices: dict = field(default_factory=dict)
    stage_losses: dict = field(default_factory=dict)

    def worst_stage(self, seed: int) -> int:
        return worst_case_stage(self.stage_losses[seed])

    def worst_loss(self, seed: int) -> float:
        return self.stage_losses[seed][self.worst_stage(seed) - 1]

    @property
    def mean_worst_loss(self) -> float:
        return float(np.mean([self.worst_loss(s) for s in sorted(self.stage_losses)]))

    @property
    def mean_stage_losses(self) -> list[float]:
        per_seed = [self.stage_losses[s] for s in sorted(self.stage_losses)]
        return [float(x) for x in np.mean(per_seed, axis=0)]

    @property
    def mean_matrix(self) -> ChangeMatrix:
        return mean_matrix([self.matrices[s] for s in sorted(self.matrices)])


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    manifest: RunManifest
    strategies: dict = field(default_factory=dict)
    trajectories: dict = field(default_factory=dict)

    def report_dict(self) -> dict:
        """Everything that is a pure function of (config, seeds); no timings."""
        out = {"config_hash": self.config.config_hash(), "seeds": list(self.config.seeds),
               "strategies": {}, "trajectories": {}}
        for name, r in sorted(self.strategies.items()):
            out["strategies"][name] = {
                "summary": r.report.to_dict(),
                "per_seed": {str(s): r.reports[s].to_dict() for s in sorted(r.reports)},
                "baseline": {str(s): r.baseline[s] for s in sorted(r.baseline)},
                "dev_baseline": {str(s): r.dev_baseline[s] for s in sorted(r.dev_baseline)},
                "closest_language": {str(s): r.closest[s] for s in sorted(r.closest)},
                "closest_language_mean": r.mean_closest,
            }
        for key, t in sorted(self.trajectories.items()):
            out["trajectories"][key] = {
                "strategy": t.strategy, "order": t.order,
                "stage_losses": {str(s): t.stage_losses[s] for s in sorted(t.stage_losses)},
                "worst_case_stage": {str(s): t.worst_stage(s) for s in sorted(t.stage_losses)},
                "mean_stage_losses": t.mean_stage_losses,
                "mean_worst_case_loss": t.mean_worst_loss,
                "worst_case_stage_of_mean": worst_case_stage(t.mean_stage_losses),
            }
        return out


# ---------------------------------------------------------------------------
# per-seed context
# ---------------------------------------------------------------------------

class SeedContext:
    """Benchmark split and lazily trained deployed models for one seed."""

    def __init__(self, cfg: ExperimentConfig, bench: Benchmark, seed: int):
        self.cfg = cfg
        self.bench = bench
        self.seed = seed
        part = bench.partition(seed)
        self.inception = {lang: part.shard(lang, 0) for lang in bench.languages}
        self.continuation = {lang: part.shard(lang, 1) for lang in bench.languages}
        self.eval = bench.test if cfg.eval_split == "test" else bench.dev
        self.model_cfg = cfg.model_config(bench)
        self._cache: dict[str, DeployedModel] = {}

    def deployed(self, strategy: str) -> DeployedModel:
        key = LAFT if strategy in (LAFT, LAFT_URIEL) else strategy
        if key not in self._cache:
            self._cache[key] = self._train(key)
        out = self._cache[key].copy()
        out.kind = strategy
        return out

    def _train(self, key: str) -> DeployedModel:
        cfg = self.cfg
        hyper = cfg.inception_hyper()
        if key == FFT:
            return run_inception(FFT, self.model_cfg, self.inception, hyper, self.seed)
        if key == LAFT:
            return run_inception(LAFT, self.model_cfg, self.inception, hyper, self.seed,
                                 fft=self.deployed(FFT), laft=cfg.laft_config())
        sft = cfg.sft_config()
        base = build_model(self.model_cfg, self.seed)
        matrices = pretrain_language_matrices(base, self.inception, sft, self.seed,
                                              TrainHyper(sft.mlm_lr, batch_size=cfg.batch_size,
                                                         mode=cfg.optimizer, weight_decay=cfg.weight_decay))
        return run_inception(SFT, base, self.inception, hyper, self.seed, sft=sft, language_matrices=matrices)

    def plan(self, language: str) -> ContinuationPlan:
        return ContinuationPlan(language, self.continuation[language], self.cfg.continuation_hyper(), self.seed)

    def continue_on(self, deployed: DeployedModel, language: str) -> DeployedModel:
        cfg = self.cfg
        return run_continuation(deployed, self.plan(language), sft=cfg.sft_config(), adapter_lr=cfg.adapter_lr,
                                factor_source=cfg.factor_source(deployed.kind, self.bench))

    def evaluate(self, deployed: DeployedModel) -> dict[str, float]:
        return deployed.evaluate(self.eval)


def _run_arm(ctx: SeedContext, deployed: DeployedModel, language: str) -> ArmRecord:
    t0 = time.perf_counter()
    try:
        scores = ctx.evaluate(ctx.continue_on(deployed, language))
    except Exception as exc:  # an arm failure must not stop the other arms
        log.exception("arm %s/%d/%s failed", deployed.kind, ctx.seed, language)
        return ArmRecord(deployed.kind, ctx.seed, language, "failed", time.perf_counter() - t0,
                         error=f"{type(exc).__name__}: {exc}")
    return ArmRecord(deployed.kind, ctx.seed, language, "ok", time.perf_counter() - t0, scores)


def _single_stage(ctx: SeedContext, strategy: str, result: StrategyResult, manifest: RunManifest) -> None:
    deployed = ctx.deployed(strategy)
    before = ctx.evaluate(deployed)
    langs = ctx.bench.languages
    with ThreadPoolExecutor(max_workers=thread_count()) as pool:
        records = list(pool.map(lambda lang: _run_arm(ctx, deployed, lang), langs))
    manifest.arms.extend(records)
    after = {r.language: r.scores for r in records if r.status == "ok"}
    result.baseline[ctx.seed] = before
    result.dev_baseline[ctx.seed] = deployed.evaluate(ctx.bench.dev)
    if after:
        matrix = build_change_matrix(before, after)
        result.matrices[ctx.seed] = matrix
        result.reports[ctx.seed] = MetricsReport.from_matrix(matrix)
        if len(after) == len(langs):
            result.closest[ctx.seed] = closest_language_check(ctx.bench.distances, matrix)


def _trajectory(ctx: SeedContext, strategy: str, order: list[str], result: TrajectoryResult) -> None:
    model = ctx.deployed(strategy)
    prev = ctx.evaluate(model)
    langs = sorted(prev)
    rows, losses = [], []
    for lang in order:
        model = ctx.continue_on(model, lang)
        scores = ctx.evaluate(model)
        row = [percent_change(prev[j], scores[j]) for j in langs]
        rows.append(row)
        losses.append(avg_percent_loss(row))
        prev = scores
    result.matrices[ctx.seed] = ChangeMatrix(tuple(langs), np.array(rows), tuple(order))
    result.stage_losses[ctx.seed] = losses


def run_experiment(cfg: ExperimentConfig, strategies: Sequence[str] | None = None,
                   seeds: Sequence[int] | None = None) -> ExperimentResult:
    """Single-stage fan-out (every language as the continuation language) plus configured trajectories."""
    cfg = cfg.validate()
    strategies = list(strategies or cfg.strategies)
    seeds = list(cfg.seeds if seeds is None else seeds)
    if seeds != list(cfg.seeds) or strategies != list(cfg.strategies):
        cfg = cfg.replace(seeds=seeds, strategies=strategies)
    manifest = RunManifest(cfg.config_hash())
    result = ExperimentResult(cfg, manifest)
    t_start = time.perf_counter()
    bench = build_benchmark(cfg.benchmark_spec())
    orders = [(order_name(o), resolve_order(o, bench.resource_counts())) for o in cfg.trajectories]
    for seed in seeds:
        t_seed = time.perf_counter()
        ctx = SeedContext(cfg, bench, seed)
        for strategy in strategies:
            if cfg.single_stage:
                res = result.strategies.setdefault(strategy, StrategyResult(strategy))
                _single_stage(ctx, strategy, res, manifest)
            for name, order in orders:
                key = f"{strategy}:{name}"
                traj = result.trajectories.setdefault(key, TrajectoryResult(strategy, order))
                _trajectory(ctx, strategy, order, traj)
        manifest.timings[f"seed{seed}"] = round(time.perf_counter() - t_seed, 3)
        log.info("seed %d done in %.1fs", seed, manifest.timings[f"seed{seed}"])
    manifest.timings["total"] = round(time.perf_counter() - t_start, 3)
    return result


def run_trajectory(cfg: ExperimentConfig, orders: Sequence = (H2L, L2H),
                   strategies: Sequence[str] | None = None) -> ExperimentResult:
    """Sequential continuation through every language, once per order in ``orders``.

    Each order is ``"H2L"``, ``"L2H"`` or an explicit list of language ids.
    """
    return run_experiment(cfg.replace(single_stage=False, trajectories=[o if isinstance(o, str) else list(o)
                                                                        for o in orders]), strategies)


def run_arm(cfg: ExperimentConfig, strategy: str, seed: int, language: str) -> ArmRecord:
    """Re-run a single continuation arm in isolation."""
    bench = build_benchmark(cfg.benchmark_spec())
    ctx = SeedContext(cfg, bench, seed)
    return _run_arm(ctx, ctx.deployed(strategy), language)


def bottleneck_ablation(cfg: ExperimentConfig, dims: Sequence[int] = (16, 8, 4),
                        strategy: str = LAFT_URIEL) -> dict[int, StrategyResult]:
    """The same single-stage experiment for several adapter bottleneck widths."""
    out = {}
    for b in dims:
        res = run_experiment(cfg.replace(b_dim=int(b), strategies=[strategy], trajectories=[], single_stage=True))
        out[int(b)] = res.strategies[strategy]
    return out


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------

def arm_relpath(record: ArmRecord) -> str:
    return f"arms/{record.strategy}/seed{record.seed}/{record.language}.json"


def emit_artifacts(result: ExperimentResult, out_dir, formats: Sequence[str] = ("csv", "svg")) -> list[Path]:
    """Write heatmaps, arm records, the report and the manifest; every write is atomic."""
    out = ensure_writable_dir(Path(out_dir))
    written: list[Path] = []

    def put(rel: str, text: str) -> None:
        path = out / rel
        atomic_write_text(path, text)
        written.append(path)

    def heatmap(stem: str, matrix: ChangeMatrix, title: str) -> None:
        if "csv" in formats:
            put(stem + ".csv", format_heatmap_csv(matrix.languages, matrix.values, matrix.rows))
        if "svg" in formats:
            put(stem + ".svg", render_heatmap_svg(matrix.languages, matrix.values, title, matrix.rows))

    for name, r in sorted(result.strategies.items()):
        for seed in sorted(r.matrices):
            heatmap(f"heatmaps/{name}_seed{seed}", r.matrices[seed], f"{name} seed {seed}")
        if r.matrices:
            heatmap(f"heatmaps/{name}_mean", r.mean_matrix, f"{name} mean over {len(r.matrices)} seeds")
    for key, t in sorted(result.trajectories.items()):
        stem = key.replace(":", "_")
        for seed in sorted(t.matrices):
            heatmap(f"trajectories/{stem}_seed{seed}", t.matrices[seed], f"{key} seed {seed}")
        if t.matrices:
            heatmap(f"trajectories/{stem}_mean", t.mean_matrix, f"{key} mean")
    for rec in result.manifest.arms:
        record = {k: v for k, v in dataclasses.asdict(rec).items() if k != "seconds"}
        put(arm_relpath(rec), dumps_report(record))
    put("config.json", result.config.dumps())
    put("report.json", dumps_report(result.report_dict()))
    manifest = result.manifest
    manifest.artifacts = [str(p.relative_to(out)) for p in written] + ["manifest.json"]
    atomic_write_text(out / "manifest.json", json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")
    written.append(out / "manifest.json")
    return written


def format_summary(result: ExperimentResult) -> str:
    lines = []
    for name, r in sorted(result.strategies.items()):
        s = r.report
        lines.append(f"{name:11s} AvgPercentLoss={s.avg_percent_loss:.4f} NumImprovedLangs={s.num_improved_langs:.3f} "
                     f"SumRatio={s.sum_ratio:.3f} MaxRatio={s.max_ratio:.3f} closest={r.mean_closest:.3f}")
    for key, t in sorted(result.trajectories.items()):
        lines.append(f"{key:15s} order={'>'.join(t.order)} worst-case loss={t.mean_worst_loss:.4f} "
                     f"stage losses={[round(x, 4) for x in t.mean_stage_losses]}")
    return "\n".join(lines)
