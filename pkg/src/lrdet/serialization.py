"""Single-file tensor archive and checkpoint plumbing.

Layout: magic "LRTD" | u32 format version | u64 header length | JSON
header | raw payload. The header carries arbitrary JSON meta plus one
entry per tensor (name, dtype, shape, payload offset, byte count);
payloads are C-order little-endian bytes at 8-byte aligned offsets.
Writes go to a temp file in the target directory and are renamed into
place, so readers never observe a truncated archive. Round-trips are
bit-exact.
"""

import json
import os
import tempfile

import numpy as np

from .errors import ContractError

MAGIC = b"LRTD"
FORMAT_VERSION = 1
_ALIGN = 8


def _align(n):
    return (n + _ALIGN - 1) // _ALIGN * _ALIGN


def atomic_write_text(path, text):
    """Write a text file via temp + rename; never leaves a truncated file."""
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(prefix=".txt-", dir=directory)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            f.write(text)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_tensors(path, tensors, meta=None):
    entries = []
    offset = 0
    blobs = []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        shape = list(arr.shape)  # before ascontiguousarray, which promotes 0-d to (1,)
        arr = np.ascontiguousarray(arr)
        if arr.dtype.byteorder == ">":
            raise ContractError("big-endian arrays are not supported")
        raw = arr.tobytes()
        entries.append({
            "name": name,
            "dtype": arr.dtype.str,
            "shape": shape,
            "offset": offset,
            "nbytes": len(raw),
        })
        blobs.append(raw)
        offset = _align(offset + len(raw))
    header = json.dumps(
        {"meta": meta or {}, "tensors": entries}, sort_keys=True
    ).encode("utf-8")

    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(prefix=".lrt-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC)
            f.write(np.uint32(FORMAT_VERSION).tobytes())
            f.write(np.uint64(len(header)).tobytes())
            f.write(header)
            pos = 0
            for entry, raw in zip(entries, blobs):
                f.write(b"\x00" * (entry["offset"] - pos))
                f.write(raw)
                pos = entry["offset"] + len(raw)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_tensors(path):
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise ContractError(f"{path} is not a tensor archive (bad magic)")
        version = int(np.frombuffer(f.read(4), dtype=np.uint32)[0])
        if version != FORMAT_VERSION:
            raise ContractError(
                f"unsupported archive version {version} (expected {FORMAT_VERSION})"
            )
        header_len = int(np.frombuffer(f.read(8), dtype=np.uint64)[0])
        header = json.loads(f.read(header_len).decode("utf-8"))
        payload_start = f.tell()
        tensors = {}
        for entry in header["tensors"]:
            f.seek(payload_start + entry["offset"])
            raw = f.read(entry["nbytes"])
            if len(raw) != entry["nbytes"]:
                raise ContractError(f"truncated payload for tensor {entry['name']}")
            arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"]))
            tensors[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return tensors, header["meta"]


def save_checkpoint(path, model, optimizer, batch_rng, config_echo, step):
    """Everything needed to resume bit-exactly: params, Adam moments,
    step count, the batch-sampling RNG state, and the config echo."""
    tensors = {}
    for name, p in model.named_parameters():
        tensors[f"param/{name}"] = p.data
    state = optimizer.state_dict()
    for name, arr in state["m"].items():
        tensors[f"adam.m/{name}"] = arr
    for name, arr in state["v"].items():
        tensors[f"adam.v/{name}"] = arr
    meta = {
        "kind": "checkpoint",
        "format_version": FORMAT_VERSION,
        "step": int(step),
        "adam_step": int(state["step_count"]),
        "rng_state": batch_rng.bit_generator.state if batch_rng is not None else None,
        "config": config_echo,
    }
    save_tensors(path, tensors, meta)


def load_checkpoint(path):
    tensors, meta = load_tensors(path)
    if meta.get("kind") != "checkpoint":
        raise ContractError(f"{path} is not a checkpoint")
    params = {}
    adam_m = {}
    adam_v = {}
    for name, arr in tensors.items():
        group, _, pname = name.partition("/")
        if group == "param":
            params[pname] = arr
        elif group == "adam.m":
            adam_m[pname] = arr
        elif group == "adam.v":
            adam_v[pname] = arr
        else:
            raise ContractError(f"unknown checkpoint tensor group {group!r}")
    return {
        "params": params,
        "adam": {"m": adam_m, "v": adam_v, "step_count": meta["adam_step"]},
        "step": int(meta["step"]),
        "rng_state": meta["rng_state"],
        "config": meta["config"],
    }


def restore_model(model, ckpt):
    """Load checkpoint params into a model, naming any mismatches."""
    own = dict(model.named_parameters())
    saved = ckpt["params"]
    missing = sorted(set(own) - set(saved))
    extra = sorted(set(saved) - set(own))
    if missing or extra:
        raise ContractError(
            f"checkpoint incompatible with model: missing={missing} extra={extra}"
        )
    bad = [
        f"{name}: checkpoint {saved[name].shape} vs model {own[name].data.shape}"
        for name in own
        if saved[name].shape != own[name].data.shape
    ]
    if bad:
        raise ContractError("checkpoint shape mismatches: " + "; ".join(bad))
    for name, p in own.items():
        p.data[...] = saved[name]
