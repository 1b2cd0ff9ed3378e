"""Training loop, prediction and scoring shared by every strategy."""

from __future__ import annotations

from typing import Callable, Iterable, Iterator, Mapping

import numpy as np

from . import tensor as T
from .data import MASK_ID, PAD_ID, SENTENCE_CLASS, TOKEN_TAG, Batch, Corpus, iterate_batches
from .model import Model, TaskHead
from .optim import Optimizer

HEAD_FOR_TASK = {TOKEN_TAG: TaskHead.TOKEN_TAG, SENTENCE_CLASS: TaskHead.SENTENCE_CLASS}

BatchHook = Callable[[Batch], object]


def batch_loss(model: Model, batch: Batch, adapter: str | None = None) -> T.Tensor:
    if batch.labels.ndim == 2:
        logits = model.forward(TaskHead.TOKEN_TAG, batch.tokens, adapter)
        return T.cross_entropy(logits, batch.labels, batch.weights)
    logits = model.forward(TaskHead.SENTENCE_CLASS, batch.tokens, adapter)
    return T.cross_entropy(logits, batch.labels)


def mask_tokens(batch: Batch, rng: np.random.Generator, rate: float = 0.15) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Masked-token inputs, targets and weights; at least one position per batch is masked."""
    real = batch.tokens != PAD_ID
    chosen = (rng.random(batch.tokens.shape) < rate) & real
    if not chosen.any():
        rows, cols = np.nonzero(real)
        k = int(rng.integers(len(rows)))
        chosen[rows[k], cols[k]] = True
    inputs = np.where(chosen, MASK_ID, batch.tokens)
    return inputs, batch.tokens.copy(), chosen.astype(np.float64)


def mlm_loss(model: Model, batch: Batch, rng: np.random.Generator, rate: float = 0.15) -> T.Tensor:
    inputs, targets, weights = mask_tokens(batch, rng, rate)
    logits = model.forward(TaskHead.MASKED_TOKEN, inputs)
    return T.cross_entropy(logits, targets, weights)


def run_epochs(model: Model, optimizer: Optimizer, epochs: int,
               batches: Callable[[int], Iterable[Batch]],
               loss_fn: Callable[[Model, Batch], T.Tensor] | None = None,
               adapter: Callable[[Batch], str | None] | str | None = None,
               before: BatchHook | None = None, after: Callable[[Batch, object], None] | None = None) -> list[float]:
    """Plain gradient-descent loop; returns the mean loss of every epoch.

    ``before`` runs ahead of each forward pass and its return value is
    handed to ``after`` once the optimizer step is done (used to apply and
    revert language update matrices around a step).
    """
    history = []
    for epoch in range(epochs):
        losses = []
        for batch in batches(epoch):
            token = before(batch) if before is not None else None
            lang = adapter(batch) if callable(adapter) else adapter
            loss = loss_fn(model, batch) if loss_fn is not None else batch_loss(model, batch, lang)
            grads = T.backward_pass(loss)
            optimizer.step(model.store, grads)
            if after is not None:
                after(batch, token)
            losses.append(float(loss.data))
        history.append(float(np.mean(losses)) if losses else 0.0)
    return history


def predict(model: Model, corpus: Corpus, adapter: str | None = None, batch_size: int = 64) -> list:
    out = []
    for batch in iterate_batches(corpus, batch_size):
        if batch.labels.ndim == 2:
            logits = model.forward(TaskHead.TOKEN_TAG, batch.tokens, adapter).data
            pred = logits.argmax(axis=-1)
            for row, w in zip(pred, batch.weights):
                out.append(row[: int(w.sum())])
        else:
            logits = model.forward(TaskHead.SENTENCE_CLASS, batch.tokens, adapter).data
            out.extend(int(p) for p in logits.argmax(axis=-1))
    return out


def macro_f1(gold: np.ndarray, pred: np.ndarray) -> float:
    """Macro-averaged F1 in percent over labels occurring in gold or prediction."""
    gold = np.asarray(gold).ravel()
    pred = np.asarray(pred).ravel()
    scores = []
    for label in np.union1d(gold, pred):
        tp = np.sum((pred == label) & (gold == label))
        fp = np.sum((pred == label) & (gold != label))
        fn = np.sum((pred != label) & (gold == label))
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    return 100.0 * float(np.mean(scores))


def score_corpus(model: Model, corpus: Corpus, adapter: str | None = None) -> float:
    pred = predict(model, corpus, adapter)
    if corpus.task == TOKEN_TAG:
        return macro_f1(np.concatenate(corpus.labels), np.concatenate(pred))
    return macro_f1(np.asarray(corpus.labels), np.asarray(pred))


def epoch_batches(corpus: Corpus, batch_size: int, seed_rng: np.random.Generator) -> Callable[[int], Iterator[Batch]]:
    """Per-epoch reshuffled batches drawn from one generator."""
    return lambda epoch: iterate_batches(corpus, batch_size, seed_rng)

