"""Paired-map dataset container.

Single-file layout: 8-byte magic ``CFDS0001``, a little-endian uint32
length prefix, a UTF-8 JSON header (scenario echo, resolutions, factor,
normalization, count, per-sample min/max), then per-pair payload of
little-endian float32 values, row-major, HR grid first then LR grid.
"""

import dataclasses
import hashlib
import json
import struct

import numpy as np

from .cfgen import CFGrid, MINMAX01, PathGainParams, RAW_DB, Scenario

MAGIC = b"CFDS0001"


class DatasetFormatError(Exception):
    """Base class for container format problems."""


class DatasetHeaderError(DatasetFormatError):
    """Bad magic, undecodable JSON, or missing header fields."""


class DatasetShapeError(DatasetFormatError):
    """Header shapes are inconsistent or pairs disagree."""


class DatasetTruncatedError(DatasetFormatError):
    """Payload shorter than the header promises."""


def scenario_to_dict(scenario: Scenario) -> dict:
    return dataclasses.asdict(scenario)


def scenario_from_dict(d: dict) -> Scenario:
    d = dict(d)
    gains = d.pop("path_gain_params", None)
    if gains is not None:
        d["path_gain_params"] = PathGainParams(**gains)
    if "bs_location" in d:
        d["bs_location"] = tuple(d["bs_location"])
    return Scenario(**d)


def _validate_pairs(pairs):
    if not pairs:
        return None
    hr0, lr0 = pairs[0]
    for hr, lr in pairs:
        if hr.resolution != hr0.resolution or lr.resolution != lr0.resolution:
            raise DatasetShapeError("pairs must share resolutions")
        if hr.channels != hr0.channels or lr.channels != lr0.channels:
            raise DatasetShapeError("pairs must share channel counts")
        if hr.normalization != hr0.normalization or lr.normalization != hr0.normalization:
            raise DatasetShapeError("pairs must share normalization mode")
    return hr0, lr0


def write_dataset(pairs, path, scenario: Scenario = None) -> str:
    """Write HR/LR pairs to ``path``; returns the payload SHA-256 hex digest."""
    first = _validate_pairs(pairs)

    header = {
        "count": len(pairs),
        "scenario": scenario_to_dict(scenario) if scenario is not None else None,
    }
    if first is not None:
        hr0, lr0 = first
        header.update({
            "hr_resolution": hr0.resolution,
            "lr_resolution": lr0.resolution,
            "factor": hr0.resolution // lr0.resolution,
            "channels": hr0.channels,
            "hr_cell_size_m": hr0.cell_size_m,
            "normalization": hr0.normalization,
            "min": [hr.norm_min for hr, _ in pairs],
            "max": [hr.norm_max for hr, _ in pairs],
        })
    else:
        header.update({
            "hr_resolution": None, "lr_resolution": None, "factor": None,
            "channels": None, "hr_cell_size_m": None,
            "normalization": None, "min": [], "max": [],
        })

    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    digest = hashlib.sha256()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for hr, lr in pairs:
            for grid in (hr, lr):
                blob = np.ascontiguousarray(grid.values, dtype="<f4").tobytes()
                digest.update(blob)
                fh.write(blob)
    return digest.hexdigest()


def read_dataset(path):
    """Read a container; returns (pairs, header dict)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise DatasetHeaderError(f"bad magic {magic!r}")
        raw_len = fh.read(4)
        if len(raw_len) < 4:
            raise DatasetHeaderError("missing header length")
        (header_len,) = struct.unpack("<I", raw_len)
        header_bytes = fh.read(header_len)
        if len(header_bytes) < header_len:
            raise DatasetHeaderError("truncated header")
        try:
            header = json.loads(header_bytes.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise DatasetHeaderError(f"undecodable header: {exc}") from exc

        try:
            count = int(header["count"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetHeaderError("header missing count") from exc
        if count == 0:
            return [], header

        try:
            hr_res = int(header["hr_resolution"])
            lr_res = int(header["lr_resolution"])
            channels = int(header["channels"])
            normalization = header["normalization"]
            mins = header["min"]
            maxs = header["max"]
            cell = header["hr_cell_size_m"]
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetHeaderError(f"header missing field: {exc}") from exc

        if hr_res < 2 or lr_res < 1 or channels < 1 or hr_res % lr_res != 0:
            raise DatasetShapeError(
                f"inconsistent shapes hr={hr_res} lr={lr_res} channels={channels}")
        if normalization not in (RAW_DB, MINMAX01):
            raise DatasetShapeError(f"unknown normalization {normalization!r}")
        if len(mins) != count or len(maxs) != count:
            raise DatasetShapeError("per-sample min/max length mismatch")

        factor = hr_res // lr_res
        hr_count = hr_res * hr_res * channels
        lr_count = lr_res * lr_res * channels
        pair_bytes = 4 * (hr_count + lr_count)

        pairs = []
        for u in range(count):
            blob = fh.read(pair_bytes)
            if len(blob) < pair_bytes:
                raise DatasetTruncatedError(
                    f"payload ends inside pair {u} ({len(blob)} of {pair_bytes} bytes)")
            flat = np.frombuffer(blob, dtype="<f4")
            hr_vals = flat[:hr_count].reshape(hr_res, hr_res, channels)
            lr_vals = flat[hr_count:].reshape(lr_res, lr_res, channels)
            hr = CFGrid(values=hr_vals.copy(), cell_size_m=cell,
                        normalization=normalization,
                        norm_min=mins[u], norm_max=maxs[u])
            lr = CFGrid(values=lr_vals.copy(), cell_size_m=cell * factor,
                        normalization=normalization,
                        norm_min=mins[u], norm_max=maxs[u])
            pairs.append((hr, lr))
    return pairs, header


def payload_checksum(path) -> str:
    """SHA-256 of the payload section (everything after the header)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise DatasetHeaderError(f"bad magic {magic!r}")
        (header_len,) = struct.unpack("<I", fh.read(4))
        fh.seek(header_len, 1)
        digest = hashlib.sha256()
        while True:
            chunk = fh.read(1 << 20)
            if not chunk:
                break
            digest.update(chunk)
    return digest.hexdigest()
