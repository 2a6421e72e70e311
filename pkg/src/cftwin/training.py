"""Offline training loop for the conditional noise predictor.

Per iteration: per-element uniform steps, unit Gaussian noise, closed-form
corruption of the fine map, one Adam update on the noise-prediction MSE.
EMA weights are tracked after a warm-up iteration.  All randomness is
derived per-iteration from the config seed, so runs are reproducible and
resumable bit-exactly from a checkpoint.
"""

import csv
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .checkpoint import save_checkpoint
from .diffusion import NoiseSchedule, training_loss
from .sampling import upsample_condition
from .seeding import rng_for, substream


class TrainingError(RuntimeError):
    """Non-finite loss or inconsistent training state."""


@dataclass
class TrainConfig:
    iterations: int = 1000
    batch_size: int = 16
    learning_rate: float = 5e-5
    ema_rate: float = 0.9999
    ema_start_iter: int = 5000
    checkpoint_every: int = 1000
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.ema_rate < 1:
            raise ValueError("ema_rate must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


@dataclass
class TrainResult:
    trace: list = field(default_factory=list)   # (iteration, loss, ema_active)
    ema_state: dict = None
    checkpoint_path: str = None


def prepare_tensors(pairs, device="cpu"):
    """Stack normalized HR maps and bicubically upsampled LR conditions as
    (N, C, H, W) float32 tensors."""
    hrs, conds = [], []
    for hr, lr in pairs:
        target = hr.resolution
        cond = upsample_condition(lr, target)
        hrs.append(np.moveaxis(hr.values, -1, 0))
        conds.append(np.moveaxis(cond, -1, 0))
    hr_t = torch.as_tensor(np.stack(hrs), dtype=torch.float32, device=device)
    cond_t = torch.as_tensor(np.stack(conds), dtype=torch.float32, device=device)
    return cond_t, hr_t


def batched_q_sample(g0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor,
                     sched: NoiseSchedule) -> torch.Tensor:
    """q_sample with a per-element step vector."""
    ab = torch.as_tensor(sched.alpha_bars, dtype=g0.dtype,
                         device=g0.device)[t - 1]
    ab = ab.view(-1, *([1] * (g0.dim() - 1)))
    return torch.sqrt(ab) * g0 + torch.sqrt(1.0 - ab) * eps


def train_step(model, optimizer, cond: torch.Tensor, hr: torch.Tensor,
               sched: NoiseSchedule, gen: torch.Generator) -> float:
    """One optimization step on a batch; all randomness (steps, noise,
    dropout) is drawn from ``gen``."""
    b = hr.shape[0]
    t = torch.randint(1, sched.T + 1, (b,), generator=gen)
    eps = torch.randn(hr.shape, generator=gen, dtype=hr.dtype, device=hr.device)
    # dropout draws from the global stream; pin it to this step's substream
    torch.manual_seed(int(torch.randint(2**62, (1,), generator=gen)))

    g_t = batched_q_sample(hr, t, eps, sched)
    eps_hat = model(cond, g_t, t)
    loss = training_loss(eps, eps_hat)
    if not torch.isfinite(loss):
        raise TrainingError(
            f"non-finite loss {float(loss)}; g_t range "
            f"[{float(g_t.min())}, {float(g_t.max())}], steps {t.tolist()}")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def ema_update(ema_params: dict, params, rate: float) -> dict:
    """ema' = rate * ema + (1 - rate) * params, elementwise per tensor."""
    params = dict(params)
    if set(ema_params) != set(params):
        raise ValueError("EMA and raw parameter sets differ structurally")
    out = {}
    for name, ema in ema_params.items():
        p = params[name]
        if tuple(ema.shape) != tuple(p.shape):
            raise ValueError(f"EMA shape mismatch at {name}")
        out[name] = rate * ema + (1.0 - rate) * p.detach()
    return out


def _named_params(model) -> dict:
    return {n: p for n, p in model.named_parameters()}


def _snapshot(model) -> dict:
    return {n: p.detach().clone() for n, p in model.named_parameters()}


def make_optimizer(model, learning_rate: float) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=learning_rate,
                            betas=(0.9, 0.999))


def export_optimizer_state(model, optimizer) -> dict:
    state = {"exp_avg": {}, "exp_avg_sq": {}, "steps": {}}
    for name, p in model.named_parameters():
        s = optimizer.state.get(p)
        if not s:
            continue
        state["exp_avg"][name] = s["exp_avg"].detach().clone()
        state["exp_avg_sq"][name] = s["exp_avg_sq"].detach().clone()
        state["steps"][name] = float(s["step"])
    return state


def restore_optimizer_state(model, optimizer, state: dict):
    if not state:
        return
    for name, p in model.named_parameters():
        if name not in state["exp_avg"]:
            continue
        optimizer.state[p] = {
            "step": torch.tensor(float(state["steps"][name])),
            "exp_avg": state["exp_avg"][name].clone().to(p.dtype),
            "exp_avg_sq": state["exp_avg_sq"][name].clone().to(p.dtype),
        }


def write_loss_trace(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "loss", "ema_active"])
        for it, loss, active in rows:
            writer.writerow([it, f"{loss:.17g}", int(active)])


def train(config: TrainConfig, pairs, model, sched: NoiseSchedule,
          out_dir=None, schedule_info: dict = None,
          start_iteration: int = 0, opt_state: dict = None,
          ema_state: dict = None, log_every: int = 0) -> TrainResult:
    """Run ``train_step`` for the configured budget.

    Resume by passing the checkpoint's iteration / optimizer state / EMA
    state; because every iteration reseeds its own substream, a resumed
    run reproduces the uninterrupted one bit-for-bit.
    """
    if not pairs:
        raise ValueError("dataset is empty")
    cond_all, hr_all = prepare_tensors(pairs)
    n = hr_all.shape[0]

    optimizer = make_optimizer(model, config.learning_rate)
    restore_optimizer_state(model, optimizer, opt_state)

    # checkpoints mirror raw weights into the EMA set before activation, so
    # a pre-activation resume must not treat the mirror as live EMA state
    if start_iteration < config.ema_start_iter:
        ema_state = None
    result = TrainResult(ema_state=ema_state)
    model.train()

    if (result.ema_state is None and config.ema_start_iter <= start_iteration):
        result.ema_state = _snapshot(model)

    def save(it, path):
        ema = result.ema_state if result.ema_state is not None else _snapshot(model)
        save_checkpoint(path, model, schedule_info or {}, iteration=it,
                        ema_state=ema,
                        opt_state=export_optimizer_state(model, optimizer))
        result.checkpoint_path = str(path)

    it = start_iteration
    for it in range(start_iteration + 1, config.iterations + 1):
        idx = rng_for(config.seed, "batch", it).integers(0, n, config.batch_size)
        idx_t = torch.as_tensor(idx, dtype=torch.long)
        gen = torch.Generator().manual_seed(substream(config.seed, "step", it))
        loss = train_step(model, optimizer, cond_all[idx_t], hr_all[idx_t],
                          sched, gen)

        if result.ema_state is None and it >= config.ema_start_iter:
            result.ema_state = _snapshot(model)
        elif result.ema_state is not None:
            result.ema_state = ema_update(result.ema_state, _named_params(model),
                                          config.ema_rate)
        ema_active = result.ema_state is not None
        result.trace.append((it, loss, ema_active))
        if log_every and it % log_every == 0:
            print(f"iter {it}: loss {loss:.6f}")

        if out_dir is not None and config.checkpoint_every > 0 \
                and it % config.checkpoint_every == 0:
            save(it, os.path.join(out_dir, f"ckpt_{it:07d}.ckpt"))

    if out_dir is not None:
        save(it, os.path.join(out_dir, "final.ckpt"))
        write_loss_trace(os.path.join(out_dir, "loss_trace.csv"), result.trace)
    model.eval()
    return result
