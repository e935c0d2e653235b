"""Rolling-window training with weight carry-over and head fine-tuning.

One pretrained model is initialized randomly once. For every
observation/prediction window pair, in grid order: the cohort is
re-windowed, the current pretrained weights are loaded, pretraining
continues on the pair's data, the updated weights become the next
pretrained state, and a frozen-encoder copy is fine-tuned on the same data
and appended to the output list. Both binary cross-entropy task losses are
combined with configurable weights; samples with undefined outcome labels
contribute to the attrition term only.

Ablation switches: ``no_multitask`` trains one single-task chain per head
(the other task's loss weight is zero), ``no_transfer`` re-initializes the
model for every window pair instead of carrying weights over.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, OptimizerState, Tensor, adam_step
from .layers import (ModelConfig, MultiTaskModel, build_multitask_model,
                     component_checksum, freeze_shared)
from .pipeline import (DEFAULT_WINDOW_GRID, SplitArrays, WindowConfig, WindowedDataset,
                       build_windowed_dataset, filter_rare_codes, split_patients,
                       static_width, DX_START_COL)

TASKS = ("attrition", "outcome")


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    windows: tuple[WindowConfig, ...] = DEFAULT_WINDOW_GRID
    pretrain_epochs: int = 30
    finetune_epochs: int = 20
    batch_size: int = 64
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    task_weights: tuple[float, float] = (1.0, 1.0)
    patience: int = 5
    seed: int = 0
    no_multitask: bool = False
    no_transfer: bool = False
    static_hidden: tuple[int, int] = (32, 16)
    lstm_hidden: tuple[int, int] = (32, 32)
    head_hidden: tuple[int, int] = (64, 32)
    dropout_rate: float = 0.2

    def __post_init__(self):
        if not self.windows:
            raise ValueError("window list must be non-empty")
        if min(self.task_weights) < 0 or max(self.task_weights) <= 0:
            raise ValueError("task weights must be >= 0 and not both zero")

    def model_config(self, temporal_width: int) -> ModelConfig:
        return ModelConfig(
            static_width=static_width(),
            temporal_width=temporal_width,
            static_hidden=self.static_hidden,
            lstm_hidden=self.lstm_hidden,
            head_hidden=self.head_hidden,
            dropout_rate=self.dropout_rate,
        )

    def optimizer(self) -> OptimizerState:
        return OptimizerState(self.learning_rate, self.beta1, self.beta2, self.adam_eps)


def multitask_loss(p_att, y_att, p_out, y_out, mask_out, weights=(1.0, 1.0)):
    """weights[0]*BCE(attrition) + weights[1]*BCE(outcome over the mask).

    The outcome term vanishes when the mask is empty. Zero-weight terms are
    not built at all, so a zero weight and an empty mask produce the same
    graph (and therefore identical training trajectories).
    """
    y_att = np.asarray(y_att, dtype=float)
    y_out = np.asarray(y_out, dtype=float)
    mask_out = np.asarray(mask_out, dtype=bool)
    if not (p_att.shape[0] == y_att.shape[0] == p_out.shape[0] == y_out.shape[0] == mask_out.shape[0]):
        raise ad.ShapeMismatchError("multitask_loss", p_att.shape, y_att.shape)
    terms = []
    if weights[0] > 0:
        t = ad.bce_loss(p_att, y_att)
        terms.append(t if weights[0] == 1.0 else ad.scale(t, weights[0]))
    if weights[1] > 0 and mask_out.any():
        idx = np.nonzero(mask_out)[0]
        t = ad.bce_loss(ad.gather_rows(p_out, idx), y_out[idx])
        terms.append(t if weights[1] == 1.0 else ad.scale(t, weights[1]))
    if not terms:
        return Tensor(np.zeros(()))
    loss = terms[0]
    for t in terms[1:]:
        loss = ad.add(loss, t)
    return loss


def _bce_np(p: np.ndarray, y: np.ndarray) -> float:
    pc = np.clip(p, ad.BCE_EPS, 1.0 - ad.BCE_EPS)
    return float(-(y * np.log(pc) + (1.0 - y) * np.log1p(-pc)).mean())


def evaluation_loss(model: MultiTaskModel, split: SplitArrays, weights) -> tuple[float, float, float]:
    """(combined, attrition, outcome) inference-mode losses on a split."""
    p_att, p_out = model.predict(split.static, split.temporal)
    att = _bce_np(p_att, split.y_attrition) if len(split) else float("nan")
    mask = split.outcome_mask
    out = _bce_np(p_out[mask], split.y_outcome[mask]) if mask.any() else 0.0
    combined = weights[0] * att + weights[1] * out
    return combined, att, out


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    val_attrition_loss: float
    val_outcome_loss: float

    def to_dict(self):
        return asdict(self)


def _snapshot(model: MultiTaskModel):
    params = [p.data.copy() for p in model.parameters()]
    buffers = [arr.copy() for _, arr in model.buffers()]
    return params, buffers


def _restore(model: MultiTaskModel, state) -> None:
    params, buffers = state
    for p, saved in zip(model.parameters(), params):
        p.data = saved.copy()
    for (_, arr), saved in zip(model.buffers(), buffers):
        arr[:] = saved


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    bounds = list(range(0, n, batch_size))
    # avoid a trailing singleton batch: its batch-norm variance is zero
    if len(bounds) > 1 and n - bounds[-1] == 1:
        bounds.pop()
    for k, start in enumerate(bounds):
        stop = n if k == len(bounds) - 1 else start + batch_size
        yield perm[start:stop]


def train_phase(model: MultiTaskModel, dataset: WindowedDataset, config: TrainConfig,
                epochs: int, phase: str, window_index: int,
                weights=None) -> list[EpochStats]:
    """Run one training phase with early stopping on validation loss and
    restore the best-validation checkpoint before returning."""
    weights = weights if weights is not None else config.task_weights
    train = dataset.splits["train"]
    val = dataset.splits["val"]
    if len(train) == 0:
        raise ValueError("train_phase: empty training split")
    params = model.parameters()
    opt = config.optimizer()
    phase_key = 0 if phase == "pretrain" else 1
    history: list[EpochStats] = []
    best = _snapshot(model)
    best_loss = float("inf")
    stale = 0
    for epoch in range(epochs):
        rng = np.random.default_rng((config.seed, 555, phase_key, window_index, epoch))
        losses = []
        for idx in _batches(len(train), config.batch_size, rng):
            with Graph() as g:
                p_att, p_out = model.forward(train.static[idx], train.temporal[idx], "train")
                loss = multitask_loss(p_att, train.y_attrition[idx], p_out,
                                      train.y_outcome[idx], train.outcome_mask[idx], weights)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDivergedError(
                    f"non-finite loss in {phase} at window {window_index}, epoch {epoch}")
            g.backward(loss)
            adam_step(params, opt)
            losses.append(value)
        if len(val):
            val_loss, val_att, val_out = evaluation_loss(model, val, weights)
        else:
            val_loss, val_att, val_out = float(np.mean(losses)), float("nan"), float("nan")
        history.append(EpochStats(epoch, float(np.mean(losses)), val_loss, val_att, val_out))
        if val_loss < best_loss:
            best_loss = val_loss
            best = _snapshot(model)
            stale = 0
        else:
            stale += 1
            if stale > config.patience:
                break
    _restore(model, best)
    return history


def fine_tune(model: MultiTaskModel, dataset: WindowedDataset, config: TrainConfig,
              window_index: int = 0, weights=None) -> list[EpochStats]:
    """Freeze the shared encoders and train the heads; returns the epoch
    history, leaving the model at its best-validation state."""
    if len(dataset.splits["train"]) == 0:
        raise ValueError("fine_tune: empty dataset")
    freeze_shared(model)
    if config.finetune_epochs == 0:
        return []
    return train_phase(model, dataset, config, config.finetune_epochs,
                       "finetune", window_index, weights)


@dataclass
class WindowResult:
    window: WindowConfig
    models: dict
    history: dict
    checksums: dict
    prevalence: dict
    skipped: bool = False


@dataclass
class TrainedModelSet:
    results: list
    config: TrainConfig
    vocab: tuple
    membership: dict

    def windows(self):
        return [r.window for r in self.results]


def _train_chain(cohort, config: TrainConfig, membership, vocab,
                 weights, chain_seed: int) -> list[dict]:
    """One pretrain/fine-tune chain over the window grid; returns one entry
    per window with the fine-tuned model and checksum trail."""
    temporal_width = DX_START_COL + len(vocab)
    model_cfg = config.model_config(temporal_width)
    pretrained = build_multitask_model(model_cfg, chain_seed)
    entries = []
    for j, wc in enumerate(config.windows):
        dataset = build_windowed_dataset(cohort, wc, membership, vocab)
        if len(dataset.splits["train"]) == 0:
            entries.append({"window": wc, "skipped": True})
            continue
        chk_loaded = component_checksum(pretrained)
        if config.no_transfer:
            model = build_multitask_model(model_cfg, chain_seed + 7919 * (j + 1))
            chk_loaded = component_checksum(model)
        else:
            model = copy.deepcopy(pretrained)
        pre_hist = train_phase(model, dataset, config, config.pretrain_epochs,
                               "pretrain", j, weights)
        if not config.no_transfer:
            pretrained = model
        chk_pretrained = component_checksum(model)
        tuned = copy.deepcopy(model)
        ft_hist = fine_tune(tuned, dataset, config, j, weights)
        entries.append({
            "window": wc,
            "skipped": False,
            "model": tuned,
            "dataset": dataset,
            "history": {"pretrain": pre_hist, "finetune": ft_hist},
            "checksums": {
                "loaded_shared": chk_loaded,
                "pretrained_shared": chk_pretrained,
                "finetuned_shared": component_checksum(tuned),
            },
        })
    return entries


def train_window_sequence(cohort, config: TrainConfig) -> TrainedModelSet:
    """Train the full window grid per the rolling pretrain/fine-tune
    schedule. With ``no_multitask`` two single-task chains run instead of
    one shared chain; window pairs with no training samples are skipped
    and reported on the result entry."""
    cohort = list(cohort)
    vocab = filter_rare_codes(cohort)
    membership = split_patients([r.patient_id for r in cohort], config.seed)
    if config.no_multitask:
        chains = {
            "attrition": _train_chain(cohort, config, membership, vocab,
                                      (config.task_weights[0], 0.0), config.seed),
            "outcome": _train_chain(cohort, config, membership, vocab,
                                    (0.0, config.task_weights[1]), config.seed + 1),
        }
    else:
        shared = _train_chain(cohort, config, membership, vocab,
                              config.task_weights, config.seed)
        chains = {"attrition": shared, "outcome": shared}

    results = []
    for j, wc in enumerate(config.windows):
        att, out = chains["attrition"][j], chains["outcome"][j]
        if att.get("skipped"):
            results.append(WindowResult(wc, {}, {}, {}, {}, skipped=True))
            continue
        results.append(WindowResult(
            window=wc,
            models={"attrition": att["model"], "outcome": out["model"]},
            history={"attrition": att["history"], "outcome": out["history"]},
            checksums={"attrition": att["checksums"], "outcome": out["checksums"]},
            prevalence=att["dataset"].prevalence(),
        ))
    return TrainedModelSet(results, config, vocab, membership)


def score_split(model: MultiTaskModel, split: SplitArrays, task: str):
    """Inference-mode scores plus the labels defined for ``task``."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    p_att, p_out = model.predict(split.static, split.temporal)
    if task == "attrition":
        return p_att, split.y_attrition
    mask = split.outcome_mask
    return p_out[mask], split.y_outcome[mask]
