"""Channel-fingerprint synthesis.

Generates ground-truth channel power maps from a parametric multipath
model: a uniform planar array at the base station, OFDM subcarriers, and
per-location path sets whose statistics vary smoothly over the area
(log-distance mean gain plus a spatially correlated shadowing field).
The per-location channel is assembled from Kronecker-structured steering
vectors, and its squared norm in dB is the map value.
"""

from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from .seeding import rng_for, substream

SPEED_OF_LIGHT = 299_792_458.0

# raw power floor in dB applied at rasterization time, keeps -inf out of
# the normalization path
POWER_FLOOR_DB = -174.0

RAW_DB = "raw_db"
MINMAX01 = "minmax01"


class ScenarioError(ValueError):
    """Invalid scenario parameters or out-of-area location."""


class DegenerateGridError(ValueError):
    """Raised when an operation cannot handle a constant grid."""


@dataclass(frozen=True)
class PathGainParams:
    """Distribution parameters for per-path complex gains."""

    ref_gain_db: float = -40.0       # mean channel gain at 1 m
    pathloss_exponent: float = 3.0
    shadowing_std_db: float = 6.0
    power_decay: float = 0.7         # exponential decay of per-path power
    angle_spread: float = 0.35       # rad, scatter of NLOS path angles


@dataclass(frozen=True)
class Scenario:
    """Wireless scenario driving CF synthesis."""

    area_side_m: float = 128.0
    n_ant_v: int = 8
    n_ant_h: int = 8
    n_subcarriers_total: int = 512
    n_subcarriers_active: int = 300
    subcarrier_spacing_hz: float = 15e3
    bs_location: tuple = (64.0, 64.0)
    bs_height_m: float = 25.0
    ue_height_m: float = 1.5
    n_paths_mean: float = 8.0
    path_gain_params: PathGainParams = field(default_factory=PathGainParams)
    delay_spread_s: float = 1e-7
    shadowing_corr_m: float = 20.0
    ue_velocity_mps: float = 0.3     # echoed for fidelity; unused on static maps
    seed: int = 0

    def __post_init__(self):
        if self.area_side_m <= 0:
            raise ScenarioError("area_side_m must be positive")
        for name in ("n_ant_v", "n_ant_h", "n_subcarriers_total",
                     "n_subcarriers_active"):
            if getattr(self, name) < 1:
                raise ScenarioError(f"{name} must be >= 1")
        if self.n_subcarriers_active > self.n_subcarriers_total:
            raise ScenarioError("n_subcarriers_active exceeds n_subcarriers_total")
        if self.n_paths_mean < 1:
            raise ScenarioError("n_paths_mean must be >= 1")
        x, y = self.bs_location
        if not (0 <= x <= self.area_side_m and 0 <= y <= self.area_side_m):
            raise ScenarioError("bs_location outside the area")

    @property
    def n_ant(self) -> int:
        return self.n_ant_v * self.n_ant_h

    @property
    def channel_length(self) -> int:
        return self.n_subcarriers_active * self.n_ant

    def with_seed(self, seed: int) -> "Scenario":
        return replace(self, seed=seed)


@dataclass(frozen=True)
class PathSet:
    """Sampled multipath components at one location."""

    gains: np.ndarray    # complex, (L,)
    delays: np.ndarray   # seconds, (L,)
    psi: np.ndarray      # normalized horizontal angles, (L,) in [-1, 1]
    phi: np.ndarray      # normalized vertical angles, (L,) in [-1, 1]

    def __len__(self):
        return len(self.gains)


@dataclass
class CFGrid:
    """A square power map with resolution metadata.

    ``values`` has shape (resolution, resolution, channels).  Raw maps are
    in dB; normalized maps are in [0, 1] and carry the (min, max) used so
    de-normalization is exact.
    """

    values: np.ndarray
    cell_size_m: float
    normalization: str = RAW_DB
    norm_min: float = None
    norm_max: float = None

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim == 2:
            self.values = self.values[:, :, None]
        if self.values.ndim != 3 or self.values.shape[0] != self.values.shape[1]:
            raise ValueError("values must be a square (res, res, channels) array")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("grid values must be finite")
        if self.normalization not in (RAW_DB, MINMAX01):
            raise ValueError(f"unknown normalization {self.normalization!r}")
        if self.normalization == MINMAX01:
            if self.norm_min is None or self.norm_max is None:
                raise ValueError("normalized grid must carry (min, max)")
            if not self.norm_min < self.norm_max:
                raise ValueError("stored min must be < max")
            if self.values.min() < 0 or self.values.max() > 1:
                raise ValueError("normalized values must lie in [0, 1]")

    @property
    def resolution(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    def plane(self, channel: int = 0) -> np.ndarray:
        return self.values[:, :, channel]


@lru_cache(maxsize=64)
def _shadowing_features(scenario: Scenario, n_features: int = 128):
    """Random Fourier features of a Gaussian shadowing field.

    Frequencies/phases are drawn once from the scenario seed, giving a
    smooth stationary field with correlation length ``shadowing_corr_m``
    that any location can query independently (cells can be evaluated in
    parallel without shared state).
    """
    rng = rng_for(scenario.seed, "shadowing")
    ell = max(scenario.shadowing_corr_m, 1e-9)
    omega = rng.normal(0.0, 1.0 / ell, size=(n_features, 2))
    phase = rng.uniform(0.0, 2.0 * np.pi, size=n_features)
    return omega, phase


def shadowing_db(scenario: Scenario, location) -> float:
    """Correlated log-normal shadowing (dB) at a location."""
    omega, phase = _shadowing_features(scenario)
    x = np.asarray(location, dtype=float)
    std = scenario.path_gain_params.shadowing_std_db
    feats = np.cos(omega @ x + phase)
    return float(std * np.sqrt(2.0 / len(phase)) * feats.sum())


def _check_location(scenario: Scenario, location):
    x, y = float(location[0]), float(location[1])
    side = scenario.area_side_m
    if not (0 <= x <= side and 0 <= y <= side):
        raise ScenarioError(f"location {location} outside [0, {side}]^2")
    return x, y


def sample_paths(scenario: Scenario, location, rng: np.random.Generator) -> PathSet:
    """Draw the multipath components seen at ``location``.

    The first path is the geometric (LOS-like) component; additional paths
    get excess delay and angular scatter.  Mean gain follows log-distance
    path loss plus the correlated shadowing field, so nearby locations have
    correlated statistics.
    """
    x, y = _check_location(scenario, location)
    p = scenario.path_gain_params

    bx, by = scenario.bs_location
    dx, dy = x - bx, y - by
    d_horiz = float(np.hypot(dx, dy))
    dz = scenario.ue_height_m - scenario.bs_height_m
    d3 = max(float(np.hypot(d_horiz, dz)), 1.0)

    mean_gain_db = (p.ref_gain_db
                    - 10.0 * p.pathloss_exponent * np.log10(d3)
                    + shadowing_db(scenario, (x, y)))
    total_power = 10.0 ** (mean_gain_db / 10.0)

    n_extra = rng.poisson(scenario.n_paths_mean - 1.0)
    n_paths = 1 + int(n_extra)

    # per-path power split: exponentially decaying profile with random draw
    weights = rng.exponential(1.0, size=n_paths) * np.exp(-p.power_decay * np.arange(n_paths))
    weights = weights / weights.sum()
    amplitudes = np.sqrt(total_power * weights)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=n_paths)
    gains = amplitudes * np.exp(1j * phases)

    los_delay = d3 / SPEED_OF_LIGHT
    delays = np.full(n_paths, los_delay)
    if n_paths > 1:
        delays[1:] += rng.exponential(scenario.delay_spread_s, size=n_paths - 1)

    elev = float(np.arctan2(dz, d_horiz))
    azim = float(np.arctan2(dy, dx))
    elevs = np.full(n_paths, elev)
    azims = np.full(n_paths, azim)
    if n_paths > 1:
        elevs[1:] += rng.normal(0.0, p.angle_spread, size=n_paths - 1)
        azims[1:] += rng.normal(0.0, 2.0 * p.angle_spread, size=n_paths - 1)

    phi = np.sin(elevs)                  # normalized vertical angle
    psi = np.cos(elevs) * np.sin(azims)  # normalized horizontal angle
    return PathSet(gains=gains, delays=delays, psi=psi, phi=phi)


def steering_vertical(n_ant_v: int, phi: float) -> np.ndarray:
    n = np.arange(n_ant_v)
    return np.exp(-1j * np.pi * n * phi)


def steering_horizontal(n_ant_h: int, psi: float) -> np.ndarray:
    n = np.arange(n_ant_h)
    return np.exp(-1j * np.pi * n * psi)


def steering_frequency(n_active: int, spacing_hz: float, delay: float) -> np.ndarray:
    k = np.arange(-(n_active // 2), n_active - n_active // 2)
    return np.exp(-2j * np.pi * k * spacing_hz * delay)


def channel_vector(scenario: Scenario, paths: PathSet) -> np.ndarray:
    """Spatial-frequency channel: sum over paths of gain times the
    Kronecker product of frequency, horizontal and vertical steering
    vectors.  Length is N_k * N_r,h * N_r,v."""
    if len(paths) == 0:
        raise ScenarioError("empty path set")
    if np.any(paths.delays < 0):
        raise ScenarioError("negative path delay")
    if np.any(np.abs(paths.psi) > 1) or np.any(np.abs(paths.phi) > 1):
        raise ScenarioError("normalized angles must lie in [-1, 1]")

    k = np.arange(-(scenario.n_subcarriers_active // 2),
                  scenario.n_subcarriers_active - scenario.n_subcarriers_active // 2)
    a_t = np.exp(-2j * np.pi * np.outer(k, scenario.subcarrier_spacing_hz * paths.delays))
    a_h = np.exp(-1j * np.pi * np.outer(np.arange(scenario.n_ant_h), paths.psi))
    a_v = np.exp(-1j * np.pi * np.outer(np.arange(scenario.n_ant_v), paths.phi))

    vec = np.einsum("l,kl,hl,vl->khv", np.conj(paths.gains), a_t, a_h, a_v)
    return vec.reshape(-1)


def channel_power_db(channel: np.ndarray, floor_db: float = None) -> float:
    """10 log10 of the squared channel norm; -inf (or the floor) when zero."""
    channel = np.asarray(channel)
    if channel.size == 0:
        raise ScenarioError("empty channel vector")
    power = float(np.sum(np.abs(channel) ** 2))
    if power == 0.0:
        return -np.inf if floor_db is None else floor_db
    value = 10.0 * np.log10(power)
    if floor_db is not None:
        value = max(value, floor_db)
    return value


def rasterize_cf(scenario: Scenario, resolution: int, seed: int = None,
                 floor_db: float = POWER_FLOOR_DB) -> CFGrid:
    """Evaluate the channel power on a resolution x resolution grid.

    Cell (i, j) holds the power at ((i+1) dx, (j+1) dy); each cell draws
    its paths from a substream keyed by (seed, i, j) so evaluation order
    does not matter.
    """
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    if seed is None:
        seed = scenario.seed
    cell = scenario.area_side_m / resolution
    values = np.empty((resolution, resolution), dtype=np.float64)
    for i in range(resolution):
        for j in range(resolution):
            loc = ((i + 1) * cell, (j + 1) * cell)
            rng = rng_for(seed, "cell", i, j)
            paths = sample_paths(scenario, loc, rng)
            vec = channel_vector(scenario, paths)
            values[i, j] = channel_power_db(vec, floor_db=floor_db)
    return CFGrid(values=values, cell_size_m=cell, normalization=RAW_DB)


def downsample_cf(hr: CFGrid, factor: int) -> CFGrid:
    """Stride subsampling: measurements retained only every ``factor`` cells."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if hr.resolution % factor != 0:
        raise ValueError(f"factor {factor} does not divide resolution {hr.resolution}")
    if factor == 1:
        return CFGrid(values=hr.values.copy(), cell_size_m=hr.cell_size_m,
                      normalization=hr.normalization,
                      norm_min=hr.norm_min, norm_max=hr.norm_max)
    return CFGrid(values=hr.values[::factor, ::factor].copy(),
                  cell_size_m=hr.cell_size_m * factor,
                  normalization=hr.normalization,
                  norm_min=hr.norm_min, norm_max=hr.norm_max)


def minmax_normalize(grid: CFGrid):
    """Map a raw-dB grid to [0, 1]; returns the grid and the (min, max) used."""
    if grid.normalization != RAW_DB:
        raise ValueError("grid is already normalized")
    lo = float(grid.values.min())
    hi = float(grid.values.max())
    if not lo < hi:
        raise DegenerateGridError("constant grid cannot be min-max normalized")
    values = (grid.values.astype(np.float64) - lo) / (hi - lo)
    out = CFGrid(values=values, cell_size_m=grid.cell_size_m,
                 normalization=MINMAX01, norm_min=lo, norm_max=hi)
    return out, (lo, hi)


def denormalize(grid: CFGrid) -> CFGrid:
    """Invert min-max normalization back to raw dB."""
    if grid.normalization != MINMAX01:
        raise ValueError("grid is not normalized")
    values = grid.values.astype(np.float64) * (grid.norm_max - grid.norm_min) + grid.norm_min
    return CFGrid(values=values, cell_size_m=grid.cell_size_m, normalization=RAW_DB)


def normalize_pair(hr: CFGrid, lr: CFGrid):
    """Normalize an HR/LR pair with the HR grid's (min, max) so that shared
    cells keep identical values in both maps."""
    hr_n, (lo, hi) = minmax_normalize(hr)
    if lr.normalization != RAW_DB:
        raise ValueError("lr grid is already normalized")
    lr_vals = np.clip((lr.values.astype(np.float64) - lo) / (hi - lo), 0.0, 1.0)
    lr_n = CFGrid(values=lr_vals, cell_size_m=lr.cell_size_m,
                  normalization=MINMAX01, norm_min=lo, norm_max=hi)
    return hr_n, lr_n


def replicate_channels(grid: CFGrid, channels: int) -> CFGrid:
    """Replicate a single-channel grid (architecture-parity option)."""
    if grid.channels != 1:
        raise ValueError("expected a single-channel grid")
    return CFGrid(values=np.repeat(grid.values, channels, axis=2),
                  cell_size_m=grid.cell_size_m, normalization=grid.normalization,
                  norm_min=grid.norm_min, norm_max=grid.norm_max)


def map_seed(base_seed: int, index: int) -> int:
    """Seed of the index-th map in a generated dataset."""
    return substream(base_seed, "map", index)
