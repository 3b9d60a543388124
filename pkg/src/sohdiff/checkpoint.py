"""Checkpoint container: JSON metadata header plus checksummed float32 blobs.

Layout:  magic ``SOHDCKPT`` | version u32 LE | header length u64 LE |
UTF-8 JSON header | concatenated parameter blobs.  Each blob is raw
little-endian float32 with its shape, offset, and CRC32 recorded in the
header.  Stored groups: ``param.*`` (raw weights), ``ema.*`` (averaged
weights), ``opt.*.exp_avg`` / ``opt.*.exp_avg_sq`` (Adam moments).
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np
import torch

from .data import FeatureStats
from .denoiser import CurveDenoiser, DenoiserConfig, DenoiserModel
from .errors import CorruptionError, IncompatibilityError

MAGIC = b"SOHDCKPT"
FORMAT_VERSION = 1


def _blob_bytes(tensor: torch.Tensor) -> bytes:
    arr = tensor.detach().cpu().numpy().astype("<f4", copy=False)
    return np.ascontiguousarray(arr).tobytes()


def save_checkpoint(model: DenoiserModel, optimizer_state: dict | None, path) -> None:
    """Serialize a model (raw weights, EMA weights, Adam moments) to ``path``."""
    blobs: list[tuple[str, tuple[int, ...], bytes]] = []
    for name, p in model.net.named_parameters():
        blobs.append((f"param.{name}", tuple(p.shape), _blob_bytes(p)))
    if model.ema is not None:
        for name, t in model.ema.items():
            blobs.append((f"ema.{name}", tuple(t.shape), _blob_bytes(t)))
    adam_meta = None
    if optimizer_state is not None:
        adam_meta = {
            "lr": optimizer_state["lr"],
            "betas": optimizer_state["betas"],
            "eps": optimizer_state["eps"],
            "steps": {},
        }
        for name, st in optimizer_state["params"].items():
            adam_meta["steps"][name] = st["step"]
            blobs.append((f"opt.{name}.exp_avg", tuple(st["exp_avg"].shape),
                          _blob_bytes(st["exp_avg"])))
            blobs.append((f"opt.{name}.exp_avg_sq", tuple(st["exp_avg_sq"].shape),
                          _blob_bytes(st["exp_avg_sq"])))

    index = []
    offset = 0
    for name, shape, raw in blobs:
        index.append({
            "name": name,
            "shape": list(shape),
            "dtype": "<f4",
            "offset": offset,
            "nbytes": len(raw),
            "crc32": zlib.crc32(raw),
        })
        offset += len(raw)

    header = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "schedule": model.schedule_desc,
        "norm": None if model.norm is None else {
            "feature_mean": model.norm.mean.tolist(),
            "feature_sd": model.norm.sd.tolist(),
        },
        "grid_c_max": model.grid_c_max,
        "adam": adam_meta,
        "blobs": index,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for _, _, raw in blobs:
            fh.write(raw)


def _read_exact(data: bytes, offset: int, n: int, what: str) -> bytes:
    if offset + n > len(data):
        raise CorruptionError(f"checkpoint truncated while reading {what}")
    return data[offset:offset + n]


def load_checkpoint(path, expect_l: int | None = None) -> tuple[DenoiserModel, dict | None]:
    """Load a checkpoint; validates version, checksums, and (optionally) grid length."""
    data = Path(path).read_bytes()
    if _read_exact(data, 0, len(MAGIC), "magic") != MAGIC:
        raise CorruptionError(f"{path}: not a checkpoint file (bad magic)")
    version = struct.unpack("<I", _read_exact(data, len(MAGIC), 4, "version"))[0]
    if version != FORMAT_VERSION:
        raise IncompatibilityError(
            f"{path}: format version {version}, this build reads {FORMAT_VERSION}"
        )
    pos = len(MAGIC) + 4
    header_len = struct.unpack("<Q", _read_exact(data, pos, 8, "header length"))[0]
    pos += 8
    try:
        header = json.loads(_read_exact(data, pos, header_len, "header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptionError(f"{path}: unreadable header: {exc}") from None
    body = data[pos + header_len:]

    arrays: dict[str, torch.Tensor] = {}
    for entry in header["blobs"]:
        raw = _read_exact(body, entry["offset"], entry["nbytes"], f"blob {entry['name']}")
        if zlib.crc32(raw) != entry["crc32"]:
            raise CorruptionError(f"{path}: checksum mismatch in blob {entry['name']}")
        arr = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).copy()
        arrays[entry["name"]] = torch.from_numpy(arr)

    config = DenoiserConfig.from_dict(header["config"])
    if expect_l is not None and config.l != expect_l:
        raise IncompatibilityError(
            f"{path}: checkpoint grid length {config.l}, expected {expect_l}"
        )

    net = CurveDenoiser(config)
    state = dict(net.state_dict())
    for name, _ in net.named_parameters():
        key = f"param.{name}"
        if key not in arrays:
            raise IncompatibilityError(f"{path}: missing parameter blob {key}")
        if tuple(arrays[key].shape) != tuple(state[name].shape):
            raise IncompatibilityError(
                f"{path}: blob {key} has shape {tuple(arrays[key].shape)}, "
                f"model expects {tuple(state[name].shape)}"
            )
        state[name] = arrays[key]
    net.load_state_dict(state)
    net.eval()

    ema = {k[len("ema."):]: v for k, v in arrays.items() if k.startswith("ema.")} or None
    norm = None
    if header.get("norm") is not None:
        norm = FeatureStats(
            mean=np.asarray(header["norm"]["feature_mean"], dtype=np.float64),
            sd=np.asarray(header["norm"]["feature_sd"], dtype=np.float64),
        )
    sched = header.get("schedule")
    model = DenoiserModel(
        config=config,
        net=net,
        norm=norm,
        grid_c_max=header.get("grid_c_max"),
        schedule_T=None if sched is None else int(sched["T"]),
        schedule_desc=sched,
        ema=ema,
    )

    optimizer_state = None
    if header.get("adam") is not None:
        meta = header["adam"]
        optimizer_state = {"lr": meta["lr"], "betas": tuple(meta["betas"]),
                           "eps": meta["eps"], "params": {}}
        for name, step in meta["steps"].items():
            optimizer_state["params"][name] = {
                "step": step,
                "exp_avg": arrays[f"opt.{name}.exp_avg"],
                "exp_avg_sq": arrays[f"opt.{name}.exp_avg_sq"],
            }
    return model, optimizer_state
