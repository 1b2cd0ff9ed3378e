"""Inception and continuation procedures for FFT, SFT, LAFT and LAFT-URIEL."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from .data import Batch, Corpus, iterate_batches, mixed_epoch, multisource_epoch
from .errors import ConfigError, ContractViolation, CoverageError, DependencyError, InputError, StaleBaseError
from .model import Model, ModelConfig, build_model, clone_adapters, insert_adapters
from .optim import ADAMW, Optimizer, OptimConfig, apply_trainability_mask, configure_groups
from .params import ADAPTER, BASE, HEAD, LAYERNORM, ParamGroup, snapshot_params, restore_params
from .sparse import ENCODER, FULL, SparseUpdate, apply_sparse_update, diff_to_update, revert_sparse_update
from .training import mlm_loss, run_epochs, score_corpus
from .uriel import DistanceMatrix, DivisionFactorFn, avg_distance_to_rest, division_factor

log = logging.getLogger(__name__)

FFT = "fft"
SFT = "sft"
LAFT = "laft"
LAFT_URIEL = "laft-uriel"
STRATEGIES = (FFT, SFT, LAFT, LAFT_URIEL)
SHARED_ADAPTER = "__shared__"
ENCODER_GROUPS = (BASE, LAYERNORM)


@dataclass
class TrainHyper:
    lr: float = 2e-3
    epochs: int = 10
    batch_size: int = 32
    mode: str = ADAMW
    weight_decay: float = 1e-5

    def optim(self, **lrs) -> OptimConfig:
        base = {BASE: self.lr, LAYERNORM: self.lr, HEAD: self.lr, ADAPTER: self.lr}
        base.update(lrs)
        return OptimConfig(mode=self.mode, lrs=base, weight_decay=self.weight_decay)


@dataclass
class SftConfig:
    ft_epochs: int = 3
    st_epochs: int = 10
    density: float = 0.05
    inception_density: float = 0.10
    freeze_layernorm: bool = True
    mlm_lr: float = 2e-3
    mask_rate: float = 0.15
    strict_base: bool = False

    def validate(self) -> "SftConfig":
        problems = []
        if not 0 < self.density <= 1 or not 0 < self.inception_density <= 1:
            problems.append("densities must lie in (0, 1]")
        if self.ft_epochs < 1 or self.st_epochs < 0:
            problems.append("ft_epochs must be >= 1 and st_epochs >= 0")
        if problems:
            raise ConfigError("; ".join(problems))
        return self


@dataclass
class LaftConfig:
    shared_epochs: int = 10
    language_epochs: int = 10
    adapter_lr: float = 2e-3
    language_lr: float | None = None


@dataclass
class DeployedModel:
    model: Model
    kind: str
    stage: int = 0
    language_matrices: dict[str, SparseUpdate] | None = None
    task_updates: list[SparseUpdate] = field(default_factory=list)
    sft: SftConfig | None = None

    @property
    def fingerprint(self) -> str:
        return self.model.store.fingerprint()

    def copy(self) -> "DeployedModel":
        return replace(self, model=self.model.copy(), task_updates=list(self.task_updates))

    def check_artifacts(self) -> None:
        if self.kind in (LAFT, LAFT_URIEL) and not self.model.adapter_languages:
            raise DependencyError("adapter strategy without adapters")
        if self.kind == SFT and not self.language_matrices:
            raise DependencyError("SFT model without language matrices")

    def score(self, corpus: Corpus) -> float:
        lang = corpus.language
        if self.kind in (LAFT, LAFT_URIEL):
            return score_corpus(self.model, corpus, adapter=lang)
        if self.kind == SFT:
            with language_matrix(self, lang):
                return score_corpus(self.model, corpus)
        return score_corpus(self.model, corpus)

    def evaluate(self, corpora: Mapping[str, Corpus]) -> dict[str, float]:
        return {lang: self.score(corpora[lang]) for lang in corpora}


@dataclass
class FixedFactor:
    value: float


@dataclass
class UrielFactor:
    distances: DistanceMatrix
    fn: DivisionFactorFn = field(default_factory=DivisionFactorFn)


def resolve_factor(source: FixedFactor | UrielFactor | float, language: str) -> float:
    if isinstance(source, (int, float)):
        factor = float(source)
    elif isinstance(source, FixedFactor):
        factor = float(source.value)
    else:
        if language not in source.distances.languages:
            raise CoverageError(f"distance matrix does not cover {language!r}")
        factor = division_factor(avg_distance_to_rest(language, source.distances), source.fn)
    if not factor >= 1:
        raise ConfigError(f"division factor must be >= 1, got {factor}")
    return factor


@dataclass
class ContinuationPlan:
    language: str
    data: Corpus | Mapping[str, Corpus]
    hyper: TrainHyper = field(default_factory=TrainHyper)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.data, Mapping):
            # a stage carries exactly one language; anything else is not a continuation stage
            if len(self.data) != 1:
                raise ContractViolation(f"stage data covers {len(self.data)} languages, expected exactly 1")
            (self.data,) = self.data.values()
        if self.data.language != self.language:
            raise ContractViolation(
                f"stage data is in {self.data.language!r}, plan says {self.language!r}")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

class language_matrix:
    """Context manager applying a language's update matrix, reverting exactly on exit."""

    def __init__(self, deployed: DeployedModel, language: str):
        if not deployed.language_matrices or language not in deployed.language_matrices:
            raise DependencyError(f"no language matrix for {language!r}")
        self.deployed = deployed
        self.language = language

    def __enter__(self):
        d = self.deployed
        if d.stage >= 1 and d.sft is not None and d.sft.strict_base:
            raise StaleBaseError("language matrices predate the continuation stages (strict mode)")
        self.handle = apply_sparse_update(d.model.store, d.language_matrices[self.language], force=True)
        return self.handle

    def __exit__(self, *exc):
        revert_sparse_update(self.deployed.model.store, self.handle)
        return False


def _rng(seed: int, *keys) -> np.random.Generator:
    from .data import _rng as data_rng

    return data_rng(seed, "train", *keys)


def _check_coverage(corpora: Mapping[str, Corpus], languages) -> None:
    missing = [lang for lang in languages if lang not in corpora or len(corpora[lang]) == 0]
    if missing:
        raise CoverageError(f"inception data missing for {missing}")


def top_k_coordinates(deltas: Mapping[str, np.ndarray], k: int) -> dict[str, np.ndarray]:
    """The ``k`` largest |delta| coordinates; ties go to the smaller (name, index)."""
    names = sorted(deltas)
    flat = [np.abs(np.asarray(deltas[n], dtype=np.float64).ravel()) for n in names]
    values = np.concatenate(flat) if flat else np.zeros(0)
    if k >= values.size:
        chosen = np.arange(values.size)
    else:
        # stable sort on -|delta| keeps lexicographic (name, index) order among ties
        chosen = np.argsort(-values, kind="stable")[:k]
    offsets = np.cumsum([0] + [f.size for f in flat])
    out = {}
    for i, n in enumerate(names):
        sel = chosen[(chosen >= offsets[i]) & (chosen < offsets[i + 1])] - offsets[i]
        out[n] = np.sort(sel)
    return out


def _lottery_ticket(model: Model, trainable: list[str], k: int, pilot, sparse) -> dict:
    """Pilot-train, keep the top-k changed coordinates of ``trainable``, rewind, retrain sparsely.

    ``pilot()`` and ``sparse(masks)`` run the two training phases.  Only
    ``trainable`` receives masks, so anything else stays dense.
    """
    snap = snapshot_params(model.store)
    pilot()
    deltas = {n: model.store[n] - snap.arrays[n] for n in trainable}
    keep = top_k_coordinates(deltas, k)
    restore_params(model.store, snap)
    masks = apply_trainability_mask(model.store, keep, names=trainable)
    sparse(masks)
    return keep


# ---------------------------------------------------------------------------
# language update matrices
# ---------------------------------------------------------------------------

def pretrain_language_matrices(base: Model, corpora: Mapping[str, Corpus], cfg: SftConfig, seed: int,
                               hyper: TrainHyper | None = None,
                               heads_out: dict | None = None) -> dict[str, SparseUpdate]:
    """Masked-token lottery-ticket sparse finetuning per language, encoder-only.

    If ``heads_out`` is given it receives each language's trained
    masked-token head (name -> array) for diagnostics.
    """
    cfg.validate()
    hyper = hyper or TrainHyper(lr=cfg.mlm_lr)
    fp = base.store.fingerprint()
    encoder = base.store.names(ENCODER_GROUPS)
    n_encoder = base.store.size(ENCODER_GROUPS)
    k = math.floor(cfg.density * n_encoder)
    if k < 1:
        raise ConfigError(f"density {cfg.density} keeps no encoder coordinate")
    mlm_head = [n for n in base.store.names(HEAD) if n.startswith("head.mlm.")]
    out = {}
    for lang in sorted(corpora):
        corpus = corpora[lang]
        if len(corpus) == 0:
            raise InputError(f"empty corpus for {lang!r}")
        model = base.copy()
        rng = _rng(seed, "mlm", lang)
        cfg_opt = hyper.optim()

        def batches(epoch, corpus=corpus, rng=rng):
            return iterate_batches(corpus, hyper.batch_size, rng)

        def loss(m, batch, rng=rng):
            return mlm_loss(m, batch, rng, cfg.mask_rate)

        def pilot(model=model, batches=batches, loss=loss):
            opt = Optimizer(cfg_opt)
            run_epochs(model, opt, cfg.ft_epochs, batches, loss_fn=loss)

        def sparse(masks, model=model, batches=batches, loss=loss):
            opt = Optimizer(cfg_opt, masks=masks)
            run_epochs(model, opt, cfg.st_epochs, batches, loss_fn=loss)

        _lottery_ticket(model, encoder, k, pilot, sparse)
        snap = {n: base.store[n] for n in encoder}
        deltas = {n: model.store[n] - snap[n] for n in encoder}
        out[lang] = SparseUpdate.from_dense(fp, deltas, scope=ENCODER, budget=k)
        if heads_out is not None:
            heads_out[lang] = {n: model.store[n] for n in mlm_head}
    return out


# ---------------------------------------------------------------------------
# inception
# ---------------------------------------------------------------------------

def run_inception(strategy: str, model_cfg: ModelConfig | Model, data: Mapping[str, Corpus],
                  hyper: TrainHyper, seed: int, *, languages=None, fft: DeployedModel | None = None,
                  laft: LaftConfig | None = None, sft: SftConfig | None = None,
                  language_matrices: Mapping[str, SparseUpdate] | None = None) -> DeployedModel:
    """Train the first deployed model, model(t=0), on data from every language."""
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}")
    languages = sorted(data) if languages is None else list(languages)
    _check_coverage(data, languages)
    corpora = {lang: data[lang] for lang in languages}

    if strategy == FFT:
        model = model_cfg.copy() if isinstance(model_cfg, Model) else build_model(model_cfg, seed)
        rng = _rng(seed, "fft-inception")
        opt = Optimizer(hyper.optim())
        run_epochs(model, opt, hyper.epochs, lambda e: mixed_epoch(corpora, hyper.batch_size, rng))
        return DeployedModel(model, FFT)

    if strategy == SFT:
        if not language_matrices:
            raise DependencyError("SFT inception needs pretrained language matrices")
        missing = [lang for lang in languages if lang not in language_matrices]
        if missing:
            raise DependencyError(f"no language matrix for {missing}")
        return _sft_inception(model_cfg, corpora, hyper, seed, sft or SftConfig(), dict(language_matrices))

    # LAFT and LAFT-URIEL share the same inception
    laft = laft or LaftConfig()
    if fft is None:
        fft = run_inception(FFT, model_cfg, data, hyper, seed, languages=languages)
    model = fft.model.copy()
    insert_adapters(model, [SHARED_ADAPTER])
    rng = _rng(seed, "laft-shared")
    opt = Optimizer(hyper.optim(**{ADAPTER: laft.adapter_lr, HEAD: laft.adapter_lr}), frozen=(BASE, LAYERNORM))
    run_epochs(model, opt, laft.shared_epochs, lambda e: mixed_epoch(corpora, hyper.batch_size, rng),
               adapter=SHARED_ADAPTER)
    clone_adapters(model, SHARED_ADAPTER, languages, drop_source=True)
    lang_lr = laft.language_lr if laft.language_lr is not None else laft.adapter_lr
    for lang in languages:
        rng = _rng(seed, "laft-language", lang)
        others = [ParamGroup.adapter(o) for o in languages if o != lang]
        opt = Optimizer(hyper.optim(**{ADAPTER: lang_lr}), frozen=[BASE, LAYERNORM, HEAD, *others])
        run_epochs(model, opt, laft.language_epochs,
                   lambda e, c=corpora[lang], r=rng: iterate_batches(c, hyper.batch_size, r), adapter=lang)
    return DeployedModel(model, strategy)


def _sft_inception(model_cfg, corpora, hyper, seed, cfg: SftConfig, matrices) -> DeployedModel:
    cfg.validate()
    model = model_cfg.copy() if isinstance(model_cfg, Model) else build_model(model_cfg, seed)
    deployed = DeployedModel(model, SFT, language_matrices=matrices, sft=cfg)
    pre = snapshot_params(model.store)
    base_names = model.store.names(ENCODER_GROUPS)
    head_names = model.store.names(HEAD)
    k = math.floor(cfg.inception_density * model.store.size(ENCODER_GROUPS))
    if k < 1:
        raise ConfigError("inception density keeps no base coordinate")
    rng = _rng(seed, "sft-inception")
    opt_cfg = hyper.optim()

    def batches(epoch):
        return multisource_epoch(corpora, hyper.batch_size, rng)

    hooks = _matrix_hooks(deployed)

    def pilot():
        run_epochs(model, Optimizer(opt_cfg), cfg.ft_epochs, batches, **hooks)

    def sparse(masks):
        run_epochs(model, Optimizer(opt_cfg, masks=masks), cfg.st_epochs, batches, **hooks)

    _lottery_ticket(model, base_names, k, pilot, sparse)
    deployed.task_updates.append(diff_to_update(model.store, pre, base_names + head_names, scope=FULL))
    return deployed


def _matrix_hooks(deployed: DeployedModel) -> dict:
    def before(batch: Batch):
        ctx = language_matrix(deployed, batch.language)
        ctx.__enter__()
        return ctx

    def after(batch: Batch, ctx):
        ctx.__exit__(None, None, None)

    return {"before": before, "after": after}


# ---------------------------------------------------------------------------
# continuation
# ---------------------------------------------------------------------------

def _stage_batches(plan: ContinuationPlan, tag: str):
    rng = _rng(plan.seed, tag, plan.language)
    return lambda epoch: iterate_batches(plan.data, plan.hyper.batch_size, rng)


def continuation_fft(deployed: DeployedModel, plan: ContinuationPlan) -> DeployedModel:
    """Finetune every parameter on single-language stage data."""
    out = deployed.copy()
    opt = Optimizer(plan.hyper.optim())
    run_epochs(out.model, opt, plan.hyper.epochs, _stage_batches(plan, "fft"))
    out.stage += 1
    return out


def continuation_sft(deployed: DeployedModel, plan: ContinuationPlan, cfg: SftConfig | None = None) -> DeployedModel:
    """Sparse update of base and head with the stage language's matrix applied."""
    cfg = (cfg or deployed.sft or SftConfig()).validate()
    if not deployed.language_matrices or plan.language not in deployed.language_matrices:
        raise DependencyError(f"no language matrix for {plan.language!r}")
    out = deployed.copy()
    if out.stage >= 1:
        if cfg.strict_base:
            raise StaleBaseError("language matrices predate the continuation stages (strict mode)")
        log.warning("applying inception-time language matrices at stage %d", out.stage + 1)
    model = out.model
    pre = snapshot_params(model.store)
    groups = (BASE, HEAD) if cfg.freeze_layernorm else (BASE, LAYERNORM, HEAD)
    names = model.store.names(groups)
    k = math.floor(cfg.density * model.store.size(groups))
    if k < 1:
        raise ConfigError("continuation density keeps no coordinate")
    frozen = (LAYERNORM,) if cfg.freeze_layernorm else ()
    opt_cfg = plan.hyper.optim()
    batches = _stage_batches(plan, "sft")
    lang = plan.language

    def pilot():
        with language_matrix(out, lang):
            run_epochs(model, Optimizer(opt_cfg, frozen=frozen), cfg.ft_epochs, batches)

    def sparse(masks):
        with language_matrix(out, lang):
            run_epochs(model, Optimizer(opt_cfg, masks=masks, frozen=frozen), cfg.st_epochs, batches)

    _lottery_ticket(model, names, k, pilot, sparse)
    out.task_updates.append(diff_to_update(model.store, pre, names, scope=FULL, budget=k))
    out.stage += 1
    return out


def continuation_laft(deployed: DeployedModel, plan: ContinuationPlan, adapter_lr: float | None = None,
                      factor_source: FixedFactor | UrielFactor | float = FixedFactor(10.0)) -> DeployedModel:
    """Train adapter(l) and the head at ``adapter_lr``, the base at ``adapter_lr / factor``."""
    lang = plan.language
    if lang not in deployed.model.adapter_languages:
        raise DependencyError(f"no adapter stack for {lang!r}")
    factor = resolve_factor(factor_source, lang)
    adapter_lr = plan.hyper.lr if adapter_lr is None else adapter_lr
    out = deployed.copy()
    cfg = configure_groups(plan.hyper.optim(), adapter_lr, factor, head_lr=adapter_lr)
    others = [ParamGroup.adapter(o) for o in out.model.adapter_languages if o != lang]
    opt = Optimizer(cfg, frozen=others)
    run_epochs(out.model, opt, plan.hyper.epochs, _stage_batches(plan, "laft"), adapter=lang)
    out.stage += 1
    return out


def run_continuation(deployed: DeployedModel, plan: ContinuationPlan, *, sft: SftConfig | None = None,
                     adapter_lr: float | None = None, factor_source=None) -> DeployedModel:
    """Dispatch one continuation stage on the deployed model's strategy."""
    if deployed.kind == FFT:
        return continuation_fft(deployed, plan)
    if deployed.kind == SFT:
        return continuation_sft(deployed, plan, sft)
    if factor_source is None:
        raise ConfigError("LAFT continuation needs a division-factor source")
    return continuation_laft(deployed, plan, adapter_lr, factor_source)
