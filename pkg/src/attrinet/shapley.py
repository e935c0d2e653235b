"""Shapley feature attribution with an exact enumerator and a kernel-
weighted least-squares approximation.

Features are attributed in named groups (one-hot blocks, scalar numerics,
and whole temporal trajectories); a group counted out of a coalition is
replaced by the corresponding values of each background instance, and the
coalition value is the mean model output over those completions. The base
value is therefore the average model output over the background set, and
both estimators satisfy local accuracy: attributions sum to f(x) minus the
base value.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .pipeline import (BMI_COL, BMI_OBS_COL, DX_START_COL, VISIT_TYPES,
                       static_feature_blocks, static_width)

EXACT_MAX_GROUPS = 15


class AttributionError(ValueError):
    pass


@dataclass
class FeatureGroup:
    name: str
    indices: np.ndarray


@dataclass
class AttributionQuery:
    """A model head, one instance, a background set and the feature
    grouping that partitions the flat input vector."""

    f: object  # callable: (n, n_features) -> (n,)
    instance: np.ndarray
    background: np.ndarray
    groups: list
    budget: int | None = None
    seed: int = 0

    def __post_init__(self):
        self.instance = np.asarray(self.instance, dtype=float)
        self.background = np.atleast_2d(np.asarray(self.background, dtype=float))
        if self.background.shape[0] < 1:
            raise AttributionError("background set must be non-empty")
        if self.background.shape[1] != self.instance.size:
            raise AttributionError("background width does not match instance")
        all_idx = np.concatenate([np.asarray(g.indices) for g in self.groups])
        if sorted(all_idx.tolist()) != list(range(self.instance.size)):
            raise AttributionError("feature groups must partition the input vector")


def _coalition_values(query: AttributionQuery, masks: np.ndarray) -> np.ndarray:
    """Mean model output per coalition mask ((n_masks, d) boolean): group in
    the coalition takes the instance's values, the rest each background
    row's values."""
    n_masks = masks.shape[0]
    nb = query.background.shape[0]
    rows = np.tile(query.background, (n_masks, 1))
    for m in range(n_masks):
        for g, keep in enumerate(masks[m]):
            if keep:
                idx = query.groups[g].indices
                rows[m * nb : (m + 1) * nb, idx] = query.instance[idx]
    out = np.asarray(query.f(rows), dtype=float)
    return out.reshape(n_masks, nb).mean(axis=1)


def base_value(query: AttributionQuery) -> float:
    """Average model output over the background set."""
    return float(np.asarray(query.f(query.background), dtype=float).mean())


def exact_shap(query: AttributionQuery) -> np.ndarray:
    """Exact Shapley values by enumerating all 2^d coalitions (d <= 15)."""
    d = len(query.groups)
    if d > EXACT_MAX_GROUPS:
        raise AttributionError(
            f"exact_shap: {d} groups exceeds the enumeration limit of {EXACT_MAX_GROUPS}")
    n_masks = 1 << d
    masks = (np.arange(n_masks)[:, None] >> np.arange(d)) & 1
    values = _coalition_values(query, masks.astype(bool))
    size = masks.sum(axis=1)
    fact = [math.factorial(k) for k in range(d + 1)]
    weight_by_size = np.array(
        [fact[s] * fact[d - 1 - s] / fact[d] for s in range(d)])
    phi = np.zeros(d)
    for i in range(d):
        has_i = (masks[:, i] == 1)
        without = np.nonzero(~has_i)[0]
        with_i = without | (1 << i)
        phi[i] = np.sum(weight_by_size[size[without]] * (values[with_i] - values[without]))
    return phi


def _kernel_weight(d: int, s: int) -> float:
    return (d - 1) / (math.comb(d, s) * s * (d - s))


def kernel_shap(query: AttributionQuery) -> np.ndarray:
    """Shapley values by weighted least squares over coalitions.

    With a budget of at least 2^d - 2 every proper coalition is enumerated
    with its exact kernel weight and the result equals ``exact_shap``;
    smaller budgets sample coalition/complement pairs from the kernel
    distribution. The sum constraint (local accuracy) is enforced by
    eliminating the final coefficient.
    """
    d = len(query.groups)
    budget = query.budget if query.budget is not None else 2 * d + 2
    if budget < 2 * d + 2:
        raise AttributionError(f"kernel_shap: budget {budget} below minimum {2 * d + 2}")
    total = (1 << d) - 2
    if budget >= total:
        masks = np.array([[(m >> i) & 1 for i in range(d)]
                          for m in range(1, (1 << d) - 1)], dtype=bool)
        weights = np.array([_kernel_weight(d, int(row.sum())) for row in masks])
    else:
        rng = np.random.default_rng(query.seed)
        sizes = np.arange(1, d)
        size_mass = np.array([math.comb(d, s) * _kernel_weight(d, s) for s in sizes])
        size_probs = size_mass / size_mass.sum()
        masks_list = []
        while len(masks_list) < budget:
            s = rng.choice(sizes, p=size_probs)
            members = rng.choice(d, size=s, replace=False)
            row = np.zeros(d, dtype=bool)
            row[members] = True
            masks_list.append(row)
            if len(masks_list) < budget:
                masks_list.append(~row)
        masks = np.array(masks_list)
        weights = np.ones(len(masks))

    for attempt in range(2):
        values = _coalition_values(query, masks)
        v0 = base_value(query)
        fx = float(np.asarray(query.f(query.instance[None, :]), dtype=float)[0])
        excess = fx - v0
        z = masks.astype(float)
        y = values - v0 - z[:, -1] * excess
        design = z[:, :-1] - z[:, -1:]
        sw = np.sqrt(weights)
        sol, _, rank, _ = np.linalg.lstsq(design * sw[:, None], y * sw, rcond=None)
        if rank == d - 1 or d == 1:
            phi = np.append(sol, excess - sol.sum()) if d > 1 else np.array([excess])
            return phi
        if attempt == 0:  # degenerate design: re-sample once
            rng = np.random.default_rng(query.seed + 1)
            resampled = []
            while len(resampled) < len(masks):
                s = rng.choice(np.arange(1, d), p=size_probs)
                members = rng.choice(d, size=s, replace=False)
                row = np.zeros(d, dtype=bool)
                row[members] = True
                resampled.append(row)
                if len(resampled) < len(masks):
                    resampled.append(~row)
            masks = np.array(resampled)
            weights = np.ones(len(masks))
    raise AttributionError("kernel_shap: degenerate coalition design after re-sampling")


# ---------------------------------------------------------------------------
# model-level grouping and reports

GROUP_DISPLAY = {
    "sex": "Sex",
    "race": "Race",
    "ethnicity": "Ethnicity",
    "insurance": "Insurance",
    "food_insecurity": "Food insecurity",
    "age": "Age",
    "lifestyle_score": "Lifestyle score",
    "psc17_score": "PSC-17",
    "visit_intervals": "Visit intervals",
    "bmi_trajectory": "BMI % trajectory",
    "diagnoses": "Diagnoses",
}


def model_feature_groups(n_buckets: int, temporal_width: int) -> list:
    """Partition [static ++ flattened temporal] into named groups: one per
    static block (food-insecurity items merged), plus whole-trajectory
    groups for BMI and the diagnosis block.

    The visit-intervals group spans every channel that encodes visit
    timing: the derived mean-gap scalar together with the per-bucket
    visit-type indicators. Splitting those channels would let attribution
    credit for one underlying driver (how often the patient comes in)
    diffuse across two rows of the report.
    """
    groups = []
    food = []
    gap_idx = None
    for name, start, stop in static_feature_blocks():
        idx = np.arange(start, stop)
        if name in ("food_item1", "food_item2"):
            food.append(idx)
        elif name == "visit_gap":
            gap_idx = idx
        else:
            groups.append(FeatureGroup(name, idx))
    groups.insert(4, FeatureGroup("food_insecurity", np.concatenate(food)))

    s_width = static_width()
    cols = np.arange(temporal_width)
    visit_cols = cols[: len(VISIT_TYPES)]
    bmi_cols = np.array([BMI_COL, BMI_OBS_COL])
    dx_cols = cols[DX_START_COL:]

    def temporal_idx(col_idx):
        return (s_width + np.arange(n_buckets)[:, None] * temporal_width + col_idx).ravel()

    groups.append(FeatureGroup(
        "visit_intervals", np.concatenate([gap_idx, temporal_idx(visit_cols)])))
    groups.append(FeatureGroup("bmi_trajectory", temporal_idx(bmi_cols)))
    if dx_cols.size:
        groups.append(FeatureGroup("diagnoses", temporal_idx(dx_cols)))
    return groups


def flatten_inputs(static: np.ndarray, temporal: np.ndarray) -> np.ndarray:
    static = np.atleast_2d(static)
    n = static.shape[0]
    return np.concatenate([static, temporal.reshape(n, -1)], axis=1)


def model_head_fn(model, n_buckets: int, temporal_width: int, task: str):
    """Wrap a model head as a function of the flat input matrix."""
    s_width = model.config.static_width

    def f(rows: np.ndarray) -> np.ndarray:
        rows = np.atleast_2d(rows)
        static = rows[:, :s_width]
        temporal = rows[:, s_width:].reshape(len(rows), n_buckets, temporal_width)
        p_att, p_out = model.predict(static, temporal)
        return p_att if task == "attrition" else p_out

    return f


@dataclass
class AttributionRow:
    task: str
    obs_months: float
    pred_months: float
    mean_abs: dict
    n_instances: int

    def top(self, k: int = 5) -> list:
        ranked = sorted(self.mean_abs.items(), key=lambda kv: (-kv[1], kv[0]))
        return ranked[:k]

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "obs_months": self.obs_months,
            "pred_months": self.pred_months,
            "mean_abs": self.mean_abs,
            "top5": [{"feature": n, "value": v} for n, v in self.top(5)],
            "n_instances": self.n_instances,
        }


@dataclass
class AttributionReport:
    rows: list = field(default_factory=list)

    def for_task(self, task: str) -> list:
        return [r for r in self.rows if r.task == task]

    def to_json(self) -> str:
        return json.dumps([r.to_dict() for r in self.rows], indent=2, sort_keys=True)


def attribute_instances(model, split, task: str, budget: int, background,
                        max_instances: int, seed: int) -> dict:
    """Mean absolute Shapley value per feature group over test instances."""
    n_buckets, temporal_width = split.temporal.shape[1], split.temporal.shape[2]
    groups = model_feature_groups(n_buckets, temporal_width)
    f = model_head_fn(model, n_buckets, temporal_width, task)
    inst = flatten_inputs(split.static, split.temporal)
    rng = np.random.default_rng((seed, 13))
    if len(inst) > max_instances:
        inst = inst[rng.choice(len(inst), size=max_instances, replace=False)]
    totals = np.zeros(len(groups))
    for k, x in enumerate(inst):
        q = AttributionQuery(f, x, background, groups, budget=budget, seed=seed + k)
        phi = kernel_shap(q)
        totals += np.abs(phi)
    mean_abs = totals / max(len(inst), 1)
    return {GROUP_DISPLAY.get(g.name, g.name): float(v)
            for g, v in zip(groups, mean_abs)}


def attribution_report(trained_set, datasets, budget: int = 256,
                       background_size: int = 50, max_instances: int = 20,
                       seed: int = 0, tasks=("attrition", "outcome")) -> AttributionReport:
    """Tables 4/5-shaped report: per window pair and task, mean |phi| per
    feature group over held-out instances, from train-split backgrounds."""
    report = AttributionReport()
    for result, dataset in zip(trained_set.results, datasets):
        if result.skipped:
            continue
        train, test = dataset.splits["train"], dataset.splits["test"]
        if len(test) == 0:
            raise AttributionError("attribution_report: empty test split")
        bg_all = flatten_inputs(train.static, train.temporal)
        rng = np.random.default_rng((seed, 7))
        if len(bg_all) > background_size:
            bg_all = bg_all[rng.choice(len(bg_all), size=background_size, replace=False)]
        for task in tasks:
            mean_abs = attribute_instances(result.models[task], test, task,
                                           budget, bg_all, max_instances, seed)
            report.rows.append(AttributionRow(
                task=task,
                obs_months=result.window.obs_months,
                pred_months=result.window.pred_months,
                mean_abs=mean_abs,
                n_instances=min(max_instances, len(test)),
            ))
    return report


def render_attribution_table(report: AttributionReport, task: str, sep: str = ",") -> str:
    """One column per window pair, five ranked rows of 'Feature(value)'."""
    rows = report.for_task(task)
    if not rows:
        raise AttributionError(f"no attribution rows for task {task!r}")
    header = [f"{r.obs_months:g}/{r.pred_months:g}" for r in rows]
    tops = [r.top(5) for r in rows]
    lines = [sep.join(header)]
    for rank in range(5):
        cells = []
        for top in tops:
            if rank < len(top):
                name, value = top[rank]
                cells.append(f"{name}({value:.3f})")
            else:
                cells.append("")
        lines.append(sep.join(cells))
    return "\n".join(lines) + "\n"
