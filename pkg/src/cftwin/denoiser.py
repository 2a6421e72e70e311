"""Conditional denoising network.

A U-shaped stack of Res+ blocks (residual conv blocks with sinusoidal
time-embedding injection) and single-head self-attention, staged as a
down path, a middle stage and a mirrored up path with concatenated skip
connections.  The network consumes the upsampled coarse map concatenated
channel-wise with the noisy fine map and predicts the corrupting noise.

Alongside the torch modules, this file carries the pure reference math
(time embedding, rotation shift matrix, single-matrix attention) and an
analytic layer catalog used for parameter/FLOP accounting and pruning.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch
from torch import nn

from .seeding import substream


class SpecError(ValueError):
    pass


# ---------------------------------------------------------------------------
# pure reference math


def time_embedding(t, c_time: int) -> np.ndarray:
    """Sinusoidal embedding [sin(w0 t), cos(w0 t), ..., sin(w_{m-1} t),
    cos(w_{m-1} t)] with w_j = 10000^(-2j / c_time)."""
    if c_time % 2 != 0:
        raise ValueError("c_time must be even")
    j = np.arange(c_time // 2, dtype=np.float64)
    w = 10000.0 ** (-2.0 * j / c_time)
    out = np.empty(c_time, dtype=np.float64)
    out[0::2] = np.sin(w * t)
    out[1::2] = np.cos(w * t)
    return out


def time_shift_matrix(dt, c_time: int) -> np.ndarray:
    """Block-diagonal rotation matrix M with Gamma_{t+dt} = M Gamma_t."""
    if c_time % 2 != 0:
        raise ValueError("c_time must be even")
    j = np.arange(c_time // 2, dtype=np.float64)
    w = 10000.0 ** (-2.0 * j / c_time)
    m = np.zeros((c_time, c_time), dtype=np.float64)
    c, s = np.cos(w * dt), np.sin(w * dt)
    for b in range(c_time // 2):
        m[2 * b, 2 * b] = c[b]
        m[2 * b, 2 * b + 1] = s[b]
        m[2 * b + 1, 2 * b] = -s[b]
        m[2 * b + 1, 2 * b + 1] = c[b]
    return m


def self_attention_forward(z, wk, wq, wv):
    """Single-matrix scaled dot-product attention.

    z: (d_m, d_n) sequence; wk, wq: (d_n, d_k); wv: (d_n, d_n).
    Returns softmax(z wq (z wk)^T / sqrt(d_k)) z wv.  Accepts NumPy
    arrays or torch tensors.
    """
    if wk.shape != wq.shape:
        raise ValueError("key and query transforms must share shape (d_k = d_q)")
    d_n = z.shape[-1]
    if wk.shape[0] != d_n or wv.shape[0] != d_n or wv.shape[1] != d_n:
        raise ValueError("transform shapes inconsistent with the input dimension")
    d_k = wk.shape[1]
    k = z @ wk
    q = z @ wq
    v = z @ wv
    scores = (q @ _transpose_last(k)) / math.sqrt(d_k)
    return _softmax_last(scores) @ v


def _transpose_last(x):
    if isinstance(x, torch.Tensor):
        return x.transpose(-2, -1)
    return np.swapaxes(x, -2, -1)


def _softmax_last(s):
    if isinstance(s, torch.Tensor):
        return torch.softmax(s, dim=-1)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def time_embedding_batch(t: torch.Tensor, c_time: int) -> torch.Tensor:
    """Torch version of ``time_embedding`` for a batch of steps."""
    if c_time % 2 != 0:
        raise ValueError("c_time must be even")
    j = torch.arange(c_time // 2, dtype=torch.float64, device=t.device)
    w = 10000.0 ** (-2.0 * j / c_time)
    arg = t.to(torch.float64)[:, None] * w[None, :]
    out = torch.empty(t.shape[0], c_time, dtype=torch.float64, device=t.device)
    out[:, 0::2] = torch.sin(arg)
    out[:, 1::2] = torch.cos(arg)
    return out


# ---------------------------------------------------------------------------
# architecture description


@dataclass(frozen=True)
class DenoiserSpec:
    """Architecture hyperparameters."""

    base_channels: int = 64
    channel_multipliers: tuple = (1, 2, 4, 8, 16)
    blocks_per_stage: int = 2            # Res+/attention pairs per substage
    time_embed_dim: int = 0              # 0 -> 4 * base_channels
    input_channels: int = 1              # per map; the net sees 2x of these
    dropout_rate: float = 0.1
    attention_stages: tuple = None       # None -> auto by spatial side
    attention_max_side: int = 32
    groups_for_norm: int = 32
    zero_init_head: bool = True
    max_width: int = 4096                # memory cap on base * max(multiplier)

    def __post_init__(self):
        if not self.channel_multipliers:
            raise SpecError("channel_multipliers must be nonempty")
        if any(m < 1 for m in self.channel_multipliers):
            raise SpecError("channel multipliers must be >= 1")
        if self.base_channels < 1 or self.input_channels < 1:
            raise SpecError("channel counts must be >= 1")
        if self.base_channels * max(self.channel_multipliers) > self.max_width:
            raise SpecError("width exceeds the configured memory cap")
        if self.time_embed_dim and self.time_embed_dim % 2 != 0:
            raise SpecError("time_embed_dim must be even")
        if self.blocks_per_stage < 1:
            raise SpecError("blocks_per_stage must be >= 1")
        object.__setattr__(self, "channel_multipliers",
                           tuple(int(m) for m in self.channel_multipliers))
        if self.attention_stages is not None:
            object.__setattr__(self, "attention_stages",
                               tuple(int(s) for s in self.attention_stages))

    @property
    def c_time(self) -> int:
        return self.time_embed_dim or 4 * self.base_channels

    @property
    def levels(self) -> int:
        return len(self.channel_multipliers)

    def to_dict(self) -> dict:
        d = {
            "base_channels": self.base_channels,
            "channel_multipliers": list(self.channel_multipliers),
            "blocks_per_stage": self.blocks_per_stage,
            "time_embed_dim": self.time_embed_dim,
            "input_channels": self.input_channels,
            "dropout_rate": self.dropout_rate,
            "attention_stages": (list(self.attention_stages)
                                 if self.attention_stages is not None else None),
            "attention_max_side": self.attention_max_side,
            "groups_for_norm": self.groups_for_norm,
            "zero_init_head": self.zero_init_head,
            "max_width": self.max_width,
        }
        return d

    @staticmethod
    def from_dict(d: dict) -> "DenoiserSpec":
        d = dict(d)
        for key in ("channel_multipliers", "attention_stages"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return DenoiserSpec(**d)


@dataclass(frozen=True)
class LayerRecord:
    layer_id: str
    stage: str            # stem / dn<i> / mid / up<i> / head
    kind: str             # res_plus, attention, downsample, upsample, head, tail
    c_in: int
    c_out: int
    side: int             # output spatial side
    params: int
    flops: int
    prunable: bool


@dataclass
class LayerCatalog:
    records: list

    def total_params(self) -> int:
        return sum(r.params for r in self.records)

    def total_flops(self) -> int:
        return sum(r.flops for r in self.records)

    def prunable_ids(self):
        return [r.layer_id for r in self.records if r.prunable]

    def by_id(self, layer_id: str) -> LayerRecord:
        for r in self.records:
            if r.layer_id == layer_id:
                return r
        raise KeyError(layer_id)

    def without(self, layer_ids) -> "LayerCatalog":
        drop = set(layer_ids)
        return LayerCatalog([r for r in self.records if r.layer_id not in drop])


def _gn_groups(preferred: int, channels: int) -> int:
    return math.gcd(channels, max(1, preferred))


def _conv_params(k: int, c_in: int, c_out: int) -> int:
    return k * k * c_in * c_out + c_out


def _conv_flops(k: int, c_in: int, c_out: int, side_out: int) -> int:
    return (2 * k * k * c_in * c_out + c_out) * side_out * side_out


def _res_params(c_in: int, c_out: int, c_time: int) -> int:
    p = 2 * c_in                                  # group norm 1 affine
    p += _conv_params(3, c_in, c_out)
    p += c_time * c_out + c_out                   # time fc 1
    p += c_out * c_out + c_out                    # time fc 2
    p += 2 * c_out                                # group norm 2 affine
    p += _conv_params(3, c_out, c_out)
    if c_in != c_out:
        p += _conv_params(1, c_in, c_out)         # shortcut
    return p


def _res_flops(c_in: int, c_out: int, c_time: int, side: int) -> int:
    f = _conv_flops(3, c_in, c_out, side)
    f += 2 * c_time * c_out + c_out + 2 * c_out * c_out + c_out
    f += _conv_flops(3, c_out, c_out, side)
    if c_in != c_out:
        f += _conv_flops(1, c_in, c_out, side)
    return f


def _attn_params(c: int) -> int:
    return 2 * c + 3 * c * c + c * c + c          # norm, k/q/v, projection


def _attn_flops(c: int, side: int) -> int:
    d_m = side * side
    f = 3 * 2 * d_m * c * c                       # k, q, v
    f += 2 * d_m * d_m * c + d_m * d_m            # scores + scaling
    f += 2 * d_m * d_m * c                        # weighted values
    f += 2 * d_m * c * c + d_m * c                # projection
    return f


def enumerate_layers(spec: DenoiserSpec, input_resolution: int):
    """Analytic layer layout: ordered records plus the execution plan.

    The same layout drives model construction, so the catalog's parameter
    counts match the built model exactly.
    """
    levels = spec.levels
    if input_resolution % (1 << (levels - 1)) != 0:
        raise SpecError(
            f"input side {input_resolution} not divisible by 2^{levels - 1}")

    widths = [spec.base_channels * m for m in spec.channel_multipliers]
    sides = [input_resolution >> i for i in range(levels)]
    if spec.attention_stages is not None:
        attn_levels = set(spec.attention_stages)
    else:
        attn_levels = {i for i in range(levels) if sides[i] <= spec.attention_max_side}
    ct = spec.c_time

    records = []
    plan = []

    def rec(layer_id, stage, kind, c_in, c_out, side, params, flops, prunable):
        records.append(LayerRecord(layer_id, stage, kind, c_in, c_out, side,
                                   params, flops, prunable))

    # substage 0: expand the concatenated input to the base width
    c_in0 = 2 * spec.input_channels
    rec("stem", "stem", "head", c_in0, widths[0], sides[0],
        _conv_params(3, c_in0, widths[0]), _conv_flops(3, c_in0, widths[0], sides[0]),
        False)
    plan.append(("run", "stem"))
    plan.append(("push",))

    skip_widths = [widths[0]]
    ch = widths[0]
    for lv in range(levels):
        w, s = widths[lv], sides[lv]
        for b in range(spec.blocks_per_stage):
            rid = f"dn{lv}_res{b}"
            rec(rid, f"dn{lv}", "res_plus", ch, w, s,
                _res_params(ch, w, ct), _res_flops(ch, w, ct, s), ch == w)
            plan.append(("run", rid))
            ch = w
            if lv in attn_levels:
                aid = f"dn{lv}_attn{b}"
                rec(aid, f"dn{lv}", "attention", w, w, s,
                    _attn_params(w), _attn_flops(w, s), True)
                plan.append(("run", aid))
            plan.append(("push",))
            skip_widths.append(w)
        if lv < levels - 1:
            did = f"dn{lv}_down"
            rec(did, f"dn{lv}", "downsample", w, w, sides[lv + 1],
                _conv_params(3, w, w), _conv_flops(3, w, w, sides[lv + 1]), False)
            plan.append(("run", did))
            plan.append(("push",))
            skip_widths.append(w)
    plan.append(("tap", "dn"))

    w, s = widths[-1], sides[-1]
    mid_attn = (levels - 1) in attn_levels
    rec("mid_res0", "mid", "res_plus", w, w, s,
        _res_params(w, w, ct), _res_flops(w, w, ct, s), True)
    plan.append(("run", "mid_res0"))
    if mid_attn:
        rec("mid_attn0", "mid", "attention", w, w, s,
            _attn_params(w), _attn_flops(w, s), True)
        plan.append(("run", "mid_attn0"))
    rec("mid_res1", "mid", "res_plus", w, w, s,
        _res_params(w, w, ct), _res_flops(w, w, ct, s), True)
    plan.append(("run", "mid_res1"))
    plan.append(("tap", "mid"))

    ch = widths[-1]
    for lv in reversed(range(levels)):
        w, s = widths[lv], sides[lv]
        for b in range(spec.blocks_per_stage + 1):
            skip = skip_widths.pop()
            rid = f"up{lv}_res{b}"
            rec(rid, f"up{lv}", "res_plus", ch + skip, w, s,
                _res_params(ch + skip, w, ct), _res_flops(ch + skip, w, ct, s),
                False)
            plan.append(("pop_concat",))
            plan.append(("run", rid))
            ch = w
            if lv in attn_levels:
                aid = f"up{lv}_attn{b}"
                rec(aid, f"up{lv}", "attention", w, w, s,
                    _attn_params(w), _attn_flops(w, s), True)
                plan.append(("run", aid))
        if lv > 0:
            uid = f"up{lv}_up"
            rec(uid, f"up{lv}", "upsample", w, w, sides[lv - 1],
                _conv_params(3, w, w), _conv_flops(3, w, w, sides[lv - 1]), False)
            plan.append(("run", uid))
    plan.append(("tap", "up"))

    rec("out", "out", "tail", widths[0], spec.input_channels, sides[0],
        2 * widths[0] + _conv_params(3, widths[0], spec.input_channels),
        _conv_flops(3, widths[0], spec.input_channels, sides[0]), False)
    plan.append(("run", "out"))

    assert not skip_widths
    return records, plan


def count_params_flops(spec: DenoiserSpec, input_resolution: int):
    """Analytic (parameter, FLOP) totals; MACs count as 2 FLOPs and only
    MAC-bearing layers are counted (norms/activations excluded)."""
    records, _ = enumerate_layers(spec, input_resolution)
    return sum(r.params for r in records), sum(r.flops for r in records)


# ---------------------------------------------------------------------------
# torch modules


def _swish(x):
    return x * torch.sigmoid(x)


class ResPlusBlock(nn.Module):
    """Residual conv block with time-embedding injection:
    out = g(g(x) + mlp(gamma)) + shortcut(x), g = conv3 . dropout . swish . gn."""

    def __init__(self, c_in, c_out, c_time, dropout, groups):
        super().__init__()
        self.c_in, self.c_out = c_in, c_out
        self.norm1 = nn.GroupNorm(_gn_groups(groups, c_in), c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.time_fc1 = nn.Linear(c_time, c_out)
        self.time_fc2 = nn.Linear(c_out, c_out)
        self.norm2 = nn.GroupNorm(_gn_groups(groups, c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.drop = nn.Dropout(dropout)
        self.shortcut = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else None

    def forward(self, x, gamma):
        if x.shape[1] != self.c_in:
            raise ValueError(f"expected {self.c_in} channels, got {x.shape[1]}")
        h = self.conv1(self.drop(_swish(self.norm1(x))))
        temb = self.time_fc2(_swish(self.time_fc1(gamma)))
        h = h + temb[:, :, None, None]
        h = self.conv2(self.drop(_swish(self.norm2(h))))
        skip = x if self.shortcut is None else self.shortcut(x)
        return h + skip


class SelfAttentionBlock(nn.Module):
    """Single-head spatial self-attention over flattened positions with a
    residual output projection (zero-initialized so the block starts as
    identity)."""

    def __init__(self, channels, groups):
        super().__init__()
        self.channels = channels
        self.norm = nn.GroupNorm(_gn_groups(groups, channels), channels)
        self.wk = nn.Linear(channels, channels, bias=False)
        self.wq = nn.Linear(channels, channels, bias=False)
        self.wv = nn.Linear(channels, channels, bias=False)
        self.proj = nn.Linear(channels, channels)

    def forward(self, x):
        b, c, h, w = x.shape
        z = self.norm(x).reshape(b, c, h * w).transpose(1, 2)      # (b, hw, c)
        k, q, v = self.wk(z), self.wq(z), self.wv(z)
        scores = q @ k.transpose(-2, -1) / math.sqrt(c)
        out = torch.softmax(scores, dim=-1) @ v
        out = self.proj(out).transpose(1, 2).reshape(b, c, h, w)
        return x + out


class Downsample(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return self.conv(nn.functional.interpolate(x, scale_factor=2, mode="nearest"))


class Head(nn.Module):
    def __init__(self, c_in, c_out, groups):
        super().__init__()
        self.norm = nn.GroupNorm(_gn_groups(groups, c_in), c_in)
        self.conv = nn.Conv2d(c_in, c_out, 3, padding=1)

    def forward(self, x):
        return self.conv(_swish(self.norm(x)))


class PrunedBlock(nn.Module):
    """Identity stand-in for a removed shape-preserving layer."""

    def forward(self, x, gamma=None):
        return x


class DenoiserNet(nn.Module):
    """The conditional noise predictor eps(condition, g_t, t)."""

    def __init__(self, spec: DenoiserSpec, input_resolution: int):
        super().__init__()
        self.spec = spec
        self.input_resolution = int(input_resolution)
        records, plan = enumerate_layers(spec, input_resolution)
        self._records = records
        self._plan = plan
        self.pruned_ids = set()

        blocks = {}
        ct, dr, gr = spec.c_time, spec.dropout_rate, spec.groups_for_norm
        for r in records:
            if r.kind == "res_plus":
                blocks[r.layer_id] = ResPlusBlock(r.c_in, r.c_out, ct, dr, gr)
            elif r.kind == "attention":
                blocks[r.layer_id] = SelfAttentionBlock(r.c_out, gr)
            elif r.kind == "downsample":
                blocks[r.layer_id] = Downsample(r.c_out)
            elif r.kind == "upsample":
                blocks[r.layer_id] = Upsample(r.c_out)
            elif r.kind == "head":
                blocks[r.layer_id] = nn.Conv2d(r.c_in, r.c_out, 3, padding=1)
            elif r.kind == "tail":
                blocks[r.layer_id] = Head(r.c_in, r.c_out, gr)
            else:
                raise SpecError(f"unknown layer kind {r.kind}")
        self.blocks = nn.ModuleDict(blocks)

    def catalog(self) -> LayerCatalog:
        return LayerCatalog([r for r in self._records
                             if r.layer_id not in self.pruned_ids])

    def prune_layer(self, layer_id: str):
        record = next((r for r in self._records if r.layer_id == layer_id), None)
        if record is None:
            raise KeyError(layer_id)
        if not record.prunable:
            raise ValueError(f"layer {layer_id} is not prunable")
        self.blocks[layer_id] = PrunedBlock()
        self.pruned_ids.add(layer_id)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def forward(self, condition, g_t, t, return_features=False):
        if condition.shape != g_t.shape:
            raise ValueError(
                f"condition {tuple(condition.shape)} and state {tuple(g_t.shape)} differ")
        b, c, h, w = g_t.shape
        if c != self.spec.input_channels:
            raise ValueError(f"expected {self.spec.input_channels} channels, got {c}")
        if h != self.input_resolution or w != self.input_resolution:
            raise ValueError(
                f"expected {self.input_resolution}x{self.input_resolution} input, got {h}x{w}")

        if not torch.is_tensor(t):
            t = torch.full((b,), int(t), dtype=torch.long, device=g_t.device)
        gamma = time_embedding_batch(t, self.spec.c_time).to(g_t.dtype)

        x = torch.cat([condition, g_t], dim=1)
        stack = []
        features = {}
        for step in self._plan:
            op = step[0]
            if op == "push":
                stack.append(x)
            elif op == "pop_concat":
                x = torch.cat([x, stack.pop()], dim=1)
            elif op == "tap":
                if return_features:
                    features[step[1]] = x
            elif op == "run":
                block = self.blocks[step[1]]
                if isinstance(block, (ResPlusBlock, PrunedBlock)):
                    x = block(x, gamma)
                else:
                    x = block(x)
            else:
                raise RuntimeError(f"bad plan step {step}")
        assert not stack
        if return_features:
            return x, features
        return x


def _init_parameters(model: nn.Module, gen: torch.Generator):
    """Deterministic variance-scaling init from an explicit generator.

    Matches torch's default fan-in uniform bounds but draws from ``gen``
    so builds are reproducible independent of global RNG state.
    """
    def fill_uniform(tensor, bound):
        with torch.no_grad():
            tensor.copy_((torch.rand(tensor.shape, generator=gen,
                                     dtype=tensor.dtype) * 2 - 1) * bound)

    for module in model.modules():
        if isinstance(module, nn.Conv2d):
            fan_in = module.in_channels * module.kernel_size[0] * module.kernel_size[1]
            bound = 1.0 / math.sqrt(fan_in)
            fill_uniform(module.weight, bound)
            if module.bias is not None:
                fill_uniform(module.bias, bound)
        elif isinstance(module, nn.Linear):
            bound = 1.0 / math.sqrt(module.in_features)
            fill_uniform(module.weight, bound)
            if module.bias is not None:
                fill_uniform(module.bias, bound)


def build_denoiser(spec: DenoiserSpec, input_resolution: int, seed: int = 0):
    """Construct the network plus its layer catalog; init is deterministic
    in (spec, resolution, seed)."""
    model = DenoiserNet(spec, input_resolution)
    gen = torch.Generator().manual_seed(substream(seed, "denoiser-init"))
    _init_parameters(model, gen)
    # attention output projections start at zero: blocks begin as identity
    for module in model.modules():
        if isinstance(module, SelfAttentionBlock):
            nn.init.zeros_(module.proj.weight)
            nn.init.zeros_(module.proj.bias)
    if spec.zero_init_head:
        out = model.blocks["out"].conv
        nn.init.zeros_(out.weight)
        nn.init.zeros_(out.bias)
    return model, model.catalog()


def denoise_forward(model, condition, g_t, t, return_features=False):
    """Run the noise predictor on already-upsampled conditioning."""
    return model(condition, g_t, t, return_features=return_features)
