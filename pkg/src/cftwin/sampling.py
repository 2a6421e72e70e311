"""Iterative refinement sampler.

Starts from pure Gaussian noise and walks the reverse chain conditioned
on the bicubically upsampled coarse map, injecting posterior noise at
every step except the last, then de-normalizes the result back to dB.
"""

from dataclasses import dataclass

import numpy as np
import torch
from scipy.interpolate import RegularGridInterpolator

from .cfgen import CFGrid, MINMAX01, RAW_DB
from .diffusion import NoiseSchedule, reverse_step
from .seeding import substream


class SamplingError(RuntimeError):
    pass


@dataclass
class SampleRequest:
    lr_map: CFGrid
    target_resolution: int
    schedule: NoiseSchedule
    seed: int = 0
    weights: str = "ema"            # which weight set the caller loaded
    save_trajectory: bool = False
    trajectory_every: int = 10

    def __post_init__(self):
        if self.target_resolution % self.lr_map.resolution != 0:
            raise ValueError("target resolution must be an integer multiple "
                             "of the coarse resolution")
        if self.weights not in ("raw", "ema"):
            raise ValueError("weights must be 'raw' or 'ema'")


@dataclass
class SampleResult:
    grid_db: CFGrid
    normalized: np.ndarray
    trajectory: list = None


def upsample_condition(lr, target: int, clamp01: bool = None) -> np.ndarray:
    """Interpolate a coarse map onto the target grid.

    Coarse sample j sits at fine index j * factor; cubic interpolation
    (linear when the map is too small for cubic) with extrapolation at the
    trailing edge.  Returns a (target, target, channels) float64 array.
    """
    if isinstance(lr, CFGrid):
        values = lr.values
        if clamp01 is None:
            clamp01 = lr.normalization == MINMAX01
    else:
        values = np.asarray(lr)
        if values.ndim == 2:
            values = values[:, :, None]
    res = values.shape[0]
    if target % res != 0:
        raise ValueError(f"target {target} not a multiple of resolution {res}")
    factor = target // res
    if factor == 1:
        out = values.astype(np.float64).copy()
        return np.clip(out, 0.0, 1.0) if clamp01 else out

    coords = np.arange(res, dtype=np.float64) * factor
    pts = np.arange(target, dtype=np.float64)
    gx, gy = np.meshgrid(pts, pts, indexing="ij")
    query = np.stack([gx.ravel(), gy.ravel()], axis=-1)
    method = "cubic" if res >= 4 else "linear"

    out = np.empty((target, target, values.shape[2]), dtype=np.float64)
    for c in range(values.shape[2]):
        interp = RegularGridInterpolator(
            (coords, coords), values[:, :, c].astype(np.float64),
            method=method, bounds_error=False, fill_value=None)
        out[:, :, c] = interp(query).reshape(target, target)
    if clamp01:
        out = np.clip(out, 0.0, 1.0)
    return out


def nearest_upsample(values: np.ndarray, target: int) -> np.ndarray:
    """Nearest-neighbor upsampling (baseline / ablation path)."""
    values = np.asarray(values)
    if values.ndim == 2:
        values = values[:, :, None]
    res = values.shape[0]
    if target % res != 0:
        raise ValueError(f"target {target} not a multiple of resolution {res}")
    f = target // res
    return np.repeat(np.repeat(values, f, axis=0), f, axis=1)


def sample_hr(model, request: SampleRequest) -> SampleResult:
    """Run the T-step refinement chain for one coarse map.

    ``model`` is any callable (condition, g_t, t) -> predicted noise on
    torch tensors; trained networks and test oracles both fit.
    """
    lr = request.lr_map
    if lr.normalization != MINMAX01:
        raise ValueError("sampling expects a normalized coarse map")
    sched = request.schedule
    target = request.target_resolution

    cond_np = upsample_condition(lr, target)
    cond = torch.as_tensor(np.moveaxis(cond_np, -1, 0)[None], dtype=torch.float32)

    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    gen = torch.Generator().manual_seed(substream(request.seed, "sample"))
    g = torch.randn(cond.shape, generator=gen, dtype=torch.float32)

    trajectory = [] if request.save_trajectory else None
    with torch.no_grad():
        for t in range(sched.T, 0, -1):
            eps_hat = model(cond, g, t)
            if t > 1:
                noise = torch.randn(g.shape, generator=gen, dtype=torch.float32)
            else:
                noise = torch.zeros_like(g)
            g = reverse_step(g, eps_hat, t, noise, sched)
            if not torch.isfinite(g).all():
                raise SamplingError(f"non-finite state at step t={t}")
            if trajectory is not None and \
                    (t % request.trajectory_every == 0 or t == 1):
                trajectory.append((t - 1, g[0].numpy().copy()))
    if was_training and hasattr(model, "train"):
        model.train()

    normalized = np.clip(np.moveaxis(g[0].numpy(), 0, -1).astype(np.float64), 0.0, 1.0)
    lo, hi = lr.norm_min, lr.norm_max
    db = normalized * (hi - lo) + lo
    cell = lr.cell_size_m * lr.resolution / target
    grid = CFGrid(values=db, cell_size_m=cell, normalization=RAW_DB)
    return SampleResult(grid_db=grid, normalized=normalized, trajectory=trajectory)
