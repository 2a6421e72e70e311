"""One-shot layer pruning and multi-objective distillation.

Each shape-preserving layer is scored by the output distortion its
removal causes on a calibration set; the removal set is chosen by exact
0-1 knapsack dynamic programming (minimize total distortion subject to
pruning at least the parameter budget, solved in the complementary
keep-at-most-capacity form).  The pruned student is then fine-tuned
against the frozen teacher with task, output-matching and feature-map
losses.
"""

import copy
import json
from dataclasses import dataclass, field

import numpy as np
import torch

from .denoiser import DenoiserNet, LayerCatalog, PrunedBlock
from .diffusion import NoiseSchedule, training_loss
from .seeding import substream
from .training import batched_q_sample, make_optimizer


class InfeasibleBudgetError(ValueError):
    def __init__(self, message, max_ratio=None):
        super().__init__(message)
        self.max_ratio = max_ratio


class StalePlanError(ValueError):
    """Plan does not match the model's current layer catalog."""


@dataclass
class PruningPlan:
    candidates: list           # (layer_id, value, weight) triples
    budget_params: int
    selection: list            # layer ids chosen for removal
    objective_value: float
    weight_unit: int = 1

    def selected_weight(self) -> int:
        w = {lid: weight for lid, _, weight in self.candidates}
        return sum(w[lid] for lid in self.selection)

    def to_json(self) -> str:
        return json.dumps({
            "candidates": [{"layer_id": lid, "value": v, "weight": w}
                           for lid, v, w in self.candidates],
            "budget_params": self.budget_params,
            "selection": list(self.selection),
            "objective_value": self.objective_value,
            "weight_unit": self.weight_unit,
        }, sort_keys=True, indent=2)

    @staticmethod
    def from_json(text: str) -> "PruningPlan":
        d = json.loads(text)
        return PruningPlan(
            candidates=[(c["layer_id"], c["value"], c["weight"])
                        for c in d["candidates"]],
            budget_params=d["budget_params"],
            selection=list(d["selection"]),
            objective_value=d["objective_value"],
            weight_unit=d.get("weight_unit", 1),
        )


@dataclass
class DistillConfig:
    lambda_o: float = 1.0
    lambda_f: float = 1.0
    iterations: int = 500
    learning_rate: float = 5e-5
    batch_size: int = 16
    feature_taps: tuple = ("dn", "mid", "up")
    seed: int = 0

    def __post_init__(self):
        if self.lambda_o < 0 or self.lambda_f < 0:
            raise ValueError("distillation weights must be nonnegative")


def prunable_layers(catalog: LayerCatalog):
    """Layer ids whose removal keeps every tensor shape intact."""
    return catalog.prunable_ids()


def _forward_draws(model, cond, hr, sched: NoiseSchedule, seed: int,
                   timesteps_per_sample: int):
    """Deterministic (t, eps, g_t) draws shared by importance scoring."""
    gen = torch.Generator().manual_seed(substream(seed, "importance"))
    b = hr.shape[0]
    draws = []
    for _ in range(timesteps_per_sample):
        t = torch.randint(1, sched.T + 1, (b,), generator=gen)
        eps = torch.randn(hr.shape, generator=gen, dtype=hr.dtype)
        g_t = batched_q_sample(hr, t, eps, sched)
        draws.append((t, g_t))
    return draws


def layer_importance(teacher: DenoiserNet, layer_id: str, cond: torch.Tensor,
                     hr: torch.Tensor, sched: NoiseSchedule, seed: int = 0,
                     timesteps_per_sample: int = 4,
                     draws=None) -> float:
    """Monte-Carlo estimate of the squared output distortion caused by
    removing one layer, on identical (t, noise) draws for both passes."""
    record = next((r for r in teacher.catalog().records
                   if r.layer_id == layer_id), None)
    if record is None or not record.prunable:
        raise ValueError(f"layer {layer_id!r} is not a prunable layer")
    if hr.shape[0] == 0:
        raise ValueError("calibration set is empty")
    if draws is None:
        draws = _forward_draws(teacher, cond, hr, sched, seed, timesteps_per_sample)

    teacher.eval()
    total = 0.0
    original = teacher.blocks[layer_id]
    with torch.no_grad():
        for t, g_t in draws:
            full = teacher(cond, g_t, t)
            teacher.blocks[layer_id] = PrunedBlock()
            try:
                ablated = teacher(cond, g_t, t)
            finally:
                teacher.blocks[layer_id] = original
            diff = full - ablated
            total += float((diff * diff).sum() / hr.shape[0])
    return total / len(draws)


def solve_knapsack(values, weights, budget: int):
    """Choose item indices minimizing total value subject to the selected
    weights summing to at least ``budget``.

    Solved exactly as the complementary keep-problem (maximize kept value
    with kept weight at most sum(weights) - budget) by dynamic programming.
    Ties prefer fewer selected items, then the lexicographically smallest
    selected index set.  Weights must be nonnegative integers.
    """
    values = [float(v) for v in values]
    weights = [int(w) for w in weights]
    if any(v < 0 for v in values) or any(w < 0 for w in weights):
        raise ValueError("values and weights must be nonnegative")
    n = len(values)
    total_w = sum(weights)
    budget = int(budget)
    if budget < 0:
        raise ValueError("budget must be nonnegative")
    if budget > total_w:
        raise InfeasibleBudgetError(
            f"budget {budget} exceeds total selectable weight {total_w}")

    cap = total_w - budget

    # dp[i][c]: best (kept value, kept count) using items i.. within capacity c
    dp_val = np.zeros((n + 1, cap + 1), dtype=np.float64)
    dp_cnt = np.zeros((n + 1, cap + 1), dtype=np.int64)
    for i in range(n - 1, -1, -1):
        v, w = values[i], weights[i]
        dp_val[i] = dp_val[i + 1]
        dp_cnt[i] = dp_cnt[i + 1]
        if w <= cap:
            keep_val = dp_val[i + 1][: cap - w + 1] + v if w else dp_val[i + 1] + v
            keep_cnt = dp_cnt[i + 1][: cap - w + 1] + 1 if w else dp_cnt[i + 1] + 1
            sl = slice(w, cap + 1)
            better = (keep_val > dp_val[i][sl]) | (
                (keep_val == dp_val[i][sl]) & (keep_cnt > dp_cnt[i][sl]))
            dp_val[i][sl] = np.where(better, keep_val, dp_val[i][sl])
            dp_cnt[i][sl] = np.where(better, keep_cnt, dp_cnt[i][sl])
    del neg

    # walk items in index order; drop (select) an item whenever skipping it
    # still attains dp[i][c] -> lexicographically smallest selection among
    # (value, count) optima, with no float re-arithmetic
    selection = []
    c = cap
    for i in range(n):
        if dp_val[i + 1][c] == dp_val[i][c] and dp_cnt[i + 1][c] == dp_cnt[i][c]:
            selection.append(i)        # not kept -> pruned
        else:
            c -= weights[i]
    return selection


def plan_pruning(teacher: DenoiserNet, cond: torch.Tensor, hr: torch.Tensor,
                 sched: NoiseSchedule, ratio: float, seed: int = 0,
                 timesteps_per_sample: int = 4,
                 weight_unit: int = None) -> PruningPlan:
    """Score all prunable layers and solve for the removal set.

    ``ratio`` is the fraction of total teacher parameters to remove.  For
    large models the knapsack weights are bucketed (ceil) into
    ``weight_unit``-parameter units with the keep capacity floored, which
    keeps the DP table small while guaranteeing the raw-parameter budget
    is still met.
    """
    if not 0 < ratio < 1:
        raise ValueError("ratio must lie in (0, 1)")
    catalog = teacher.catalog()
    total = catalog.total_params()
    budget = int(round(ratio * total))

    cand_records = [r for r in catalog.records if r.prunable]
    cand_weight = sum(r.params for r in cand_records)
    if cand_weight < budget:
        max_ratio = cand_weight / total
        raise InfeasibleBudgetError(
            f"budget {budget} exceeds prunable mass {cand_weight} "
            f"(max achievable ratio {max_ratio:.4f})", max_ratio=max_ratio)

    draws = _forward_draws(teacher, cond, hr, sched, seed, timesteps_per_sample)
    candidates = []
    for r in cand_records:
        value = layer_importance(teacher, r.layer_id, cond, hr, sched,
                                 seed=seed, draws=draws)
        candidates.append((r.layer_id, value, r.params))

    if weight_unit is None:
        weight_unit = 1024 if total > 2**20 else 1
    if weight_unit == 1:
        unit_weights = [w for _, _, w in candidates]
        unit_budget = budget
    else:
        unit_weights = [-(-w // weight_unit) for _, _, w in candidates]
        keep_cap_units = (cand_weight - budget) // weight_unit
        unit_budget = sum(unit_weights) - keep_cap_units

    idx = solve_knapsack([v for _, v, _ in candidates], unit_weights, unit_budget)
    selection = [candidates[i][0] for i in idx]
    objective = float(sum(candidates[i][1] for i in idx))
    plan = PruningPlan(candidates=candidates, budget_params=budget,
                       selection=selection, objective_value=objective,
                       weight_unit=weight_unit)
    assert plan.selected_weight() >= budget
    return plan


def apply_pruning(teacher: DenoiserNet, plan: PruningPlan) -> DenoiserNet:
    """Materialize the student: selected layers identity-substituted,
    every remaining weight copied bit-exactly."""
    catalog = teacher.catalog()
    by_id = {r.layer_id: r for r in catalog.records}
    for lid, _, weight in plan.candidates:
        rec = by_id.get(lid)
        if rec is None or not rec.prunable or rec.params != weight:
            raise StalePlanError(f"plan entry {lid!r} does not match the catalog")
    student = copy.deepcopy(teacher)
    for lid in plan.selection:
        student.prune_layer(lid)
    expected = teacher.parameter_count() - plan.selected_weight()
    got = student.parameter_count()
    if got != expected:
        raise StalePlanError(
            f"student has {got} parameters, expected {expected}")
    return student


def kd_losses(teacher: DenoiserNet, student: DenoiserNet,
              cond: torch.Tensor, hr: torch.Tensor, sched: NoiseSchedule,
              gen: torch.Generator, taps=("dn", "mid", "up")):
    """Task, output-distillation and feature-distillation losses on one
    shared (t, noise) draw.  Teacher runs without gradients."""
    b = hr.shape[0]
    t = torch.randint(1, sched.T + 1, (b,), generator=gen)
    eps = torch.randn(hr.shape, generator=gen, dtype=hr.dtype)
    torch.manual_seed(int(torch.randint(2**62, (1,), generator=gen)))
    g_t = batched_q_sample(hr, t, eps, sched)

    with torch.no_grad():
        eps_t, feats_t = teacher(cond, g_t, t, return_features=True)
    eps_s, feats_s = student(cond, g_t, t, return_features=True)

    l_task = training_loss(eps, eps_s)
    l_okd = training_loss(eps_t, eps_s)
    l_fkd = None
    for tap in taps:
        if tap not in feats_t or tap not in feats_s:
            raise ValueError(f"unknown feature tap {tap!r}")
        ft, fs = feats_t[tap], feats_s[tap]
        if ft.shape != fs.shape:
            raise ValueError(
                f"feature tap {tap!r} shapes differ: "
                f"{tuple(ft.shape)} vs {tuple(fs.shape)}")
        term = training_loss(ft, fs)
        l_fkd = term if l_fkd is None else l_fkd + term
    if l_fkd is None:
        l_fkd = torch.zeros((), dtype=hr.dtype)
    return l_task, l_okd, l_fkd


@dataclass
class DistillResult:
    trace: list = field(default_factory=list)  # (it, task, okd, fkd, total)


def distill_finetune(teacher: DenoiserNet, student: DenoiserNet,
                     config: DistillConfig, pairs_tensors,
                     log_every: int = 0) -> DistillResult:
    """Fine-tune the student on the combined distillation objective with
    the teacher frozen throughout."""
    cond_all, hr_all = pairs_tensors
    n = hr_all.shape[0]
    if n == 0:
        raise ValueError("distillation dataset is empty")

    teacher.eval()
    student.train()
    optimizer = make_optimizer(student, config.learning_rate)
    result = DistillResult()

    from .seeding import rng_for
    for it in range(1, config.iterations + 1):
        idx = rng_for(config.seed, "distill-batch", it).integers(
            0, n, config.batch_size)
        idx_t = torch.as_tensor(idx, dtype=torch.long)
        gen = torch.Generator().manual_seed(
            substream(config.seed, "distill-step", it))
        l_task, l_okd, l_fkd = kd_losses(
            teacher, student, cond_all[idx_t], hr_all[idx_t], sched=config._sched,
            gen=gen, taps=config.feature_taps)
        total = l_task + config.lambda_o * l_okd + config.lambda_f * l_fkd
        if not torch.isfinite(total):
            raise RuntimeError(f"non-finite distillation loss at iteration {it}")
        optimizer.zero_grad(set_to_none=True)
        total.backward()
        optimizer.step()
        result.trace.append((it, float(l_task), float(l_okd), float(l_fkd),
                             float(total)))
        if log_every and it % log_every == 0:
            print(f"distill iter {it}: total {float(total):.6f}")
    student.eval()
    return result
