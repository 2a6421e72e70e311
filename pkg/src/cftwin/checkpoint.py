"""Checkpoint container.

Layout: little-endian uint32 length prefix, UTF-8 JSON metadata (spec,
input resolution, schedule echo, iteration, pruned layer ids, optimizer
step counters, tensor directory), then the tensors in directory order as
raw little-endian float32 payloads.  EMA and raw weights are separate
named sets ("raw/...", "ema/..."); Adam moments ride along under "opt/"
so training resumes bit-exactly.
"""

import json
import struct

import numpy as np
import torch

from .denoiser import DenoiserNet, DenoiserSpec


class CheckpointError(Exception):
    pass


def _tensor_sets(model, ema_state=None, opt_state=None):
    sets = {}
    for name, p in model.named_parameters():
        sets[f"raw/{name}"] = p.detach()
    if ema_state is not None:
        for name, v in ema_state.items():
            sets[f"ema/{name}"] = v
    if opt_state is not None:
        for name, v in opt_state.get("exp_avg", {}).items():
            sets[f"opt/exp_avg/{name}"] = v
        for name, v in opt_state.get("exp_avg_sq", {}).items():
            sets[f"opt/exp_avg_sq/{name}"] = v
    return sets


def save_checkpoint(path, model: DenoiserNet, schedule_info: dict,
                    iteration: int = 0, ema_state=None, opt_state=None,
                    extra: dict = None):
    sets = _tensor_sets(model, ema_state, opt_state)
    directory = [{"name": k, "shape": list(v.shape)} for k, v in sets.items()]
    meta = {
        "format": "CFCK0001",
        "spec": model.spec.to_dict(),
        "input_resolution": model.input_resolution,
        "schedule": schedule_info,
        "iteration": int(iteration),
        "pruned_layers": sorted(model.pruned_ids),
        "opt_steps": (opt_state or {}).get("steps", {}),
        "tensors": directory,
    }
    if extra:
        meta["extra"] = extra
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for entry in directory:
            arr = sets[entry["name"]].detach().cpu().numpy().astype("<f4")
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path):
    """Returns (model, meta, ema_state, opt_state); the model carries raw
    weights and any recorded pruning applied."""
    with open(path, "rb") as fh:
        raw_len = fh.read(4)
        if len(raw_len) < 4:
            raise CheckpointError("missing metadata length")
        (meta_len,) = struct.unpack("<I", raw_len)
        blob = fh.read(meta_len)
        if len(blob) < meta_len:
            raise CheckpointError("truncated metadata")
        try:
            meta = json.loads(blob.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"undecodable metadata: {exc}") from exc
        if meta.get("format") != "CFCK0001":
            raise CheckpointError(f"unknown checkpoint format {meta.get('format')!r}")

        tensors = {}
        for entry in meta["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            payload = fh.read(4 * count)
            if len(payload) < 4 * count:
                raise CheckpointError(f"truncated tensor {entry['name']}")
            tensors[entry["name"]] = torch.from_numpy(
                np.frombuffer(payload, dtype="<f4").reshape(shape).copy())

    spec = DenoiserSpec.from_dict(meta["spec"])
    model = DenoiserNet(spec, meta["input_resolution"])
    for lid in meta.get("pruned_layers", []):
        model.prune_layer(lid)

    raw = {k[len("raw/"):]: v for k, v in tensors.items() if k.startswith("raw/")}
    missing = {n for n, _ in model.named_parameters()} - set(raw)
    if missing:
        raise CheckpointError(f"checkpoint missing parameters: {sorted(missing)[:3]}...")
    with torch.no_grad():
        for name, p in model.named_parameters():
            if tuple(raw[name].shape) != tuple(p.shape):
                raise CheckpointError(f"shape mismatch for {name}")
            p.copy_(raw[name])

    ema_state = {k[len("ema/"):]: v for k, v in tensors.items() if k.startswith("ema/")}
    opt_state = None
    exp_avg = {k[len("opt/exp_avg/"):]: v for k, v in tensors.items()
               if k.startswith("opt/exp_avg/")}
    exp_avg_sq = {k[len("opt/exp_avg_sq/"):]: v for k, v in tensors.items()
                  if k.startswith("opt/exp_avg_sq/")}
    if exp_avg:
        opt_state = {"exp_avg": exp_avg, "exp_avg_sq": exp_avg_sq,
                     "steps": meta.get("opt_steps", {})}
    return model, meta, (ema_state or None), opt_state
