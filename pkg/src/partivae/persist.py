"""On-disk formats: canonical JSON records, CSV tables and model binaries.

Canonical JSON has sorted keys, no insignificant whitespace beyond a newline
per top-level write, and every float printed with 17 significant digits, so
parsing a record and writing it again reproduces the same bytes.

A model file is::

    uint64 little-endian   header length h
    h bytes                UTF-8 JSON header (canonical)
    float64 little-endian  every array in header order, row-major

The header lists ``arrays`` as ``[name, shape]`` pairs.
"""
from __future__ import annotations

import csv
import json
import math
import struct
from pathlib import Path

import numpy as np

from partivae.diffcore import MlpParams
from partivae.errors import DataError
from partivae.vae import DecoderR, EncoderQ, LatentSpec, VaeModel

MODEL_MAGIC = "partivae-model"
MODEL_FORMAT = 1


def _canon(obj) -> str:
    if isinstance(obj, dict):
        items = sorted((str(k), v) for k, v in obj.items())
        return "{" + ",".join(json.dumps(k) + ":" + _canon(v) for k, v in items) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ",".join(_canon(v) for v in obj) + "]"
    if isinstance(obj, np.ndarray):
        return _canon(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if obj is None:
        return "null"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            raise ValueError(f"cannot serialise non-finite float {x!r}")
        return format(x, ".17g")
    if isinstance(obj, str):
        return json.dumps(obj, ensure_ascii=False)
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def canonical_dumps(obj) -> str:
    return _canon(obj) + "\n"


def write_json(path, obj) -> None:
    Path(path).write_text(canonical_dumps(obj), encoding="utf-8")


def read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([format(v, ".17g") if isinstance(v, (float, np.floating)) else v for v in row])


def write_configs_csv(path, x, as_ranks: bool) -> None:
    """One configuration per row: spins as -1/1, rankings as integers 1..n."""
    x = np.asarray(x)
    n = x.shape[1] if x.ndim == 2 else 0
    vals = np.rint(x * n if as_ranks else x).astype(np.int64)
    write_csv(path, [f"x{i}" for i in range(n)], vals.tolist())


def save_model(path, model: VaeModel, target_spec: dict) -> None:
    named = [
        (f"{part}.{k}", a)
        for part, net in (("decoder", model.decoder.net), ("encoder", model.encoder.net))
        for k, a in zip(("w1", "b1", "w2", "b2"), net.arrays())
    ]
    header = {
        "format": MODEL_FORMAT,
        "magic": MODEL_MAGIC,
        "D": model.latent.D,
        "domain": model.decoder.domain,
        "family": model.decoder.family,
        "target": target_spec,
        "arrays": [[name, list(a.shape)] for name, a in named],
    }
    hb = canonical_dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(hb)))
        fh.write(hb)
        for _, a in named:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_model(path) -> tuple[VaeModel, dict]:
    """Read a model file; returns ``(model, header)``."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: no such file")
    raw = path.read_bytes()
    try:
        (hlen,) = struct.unpack_from("<Q", raw, 0)
        header = json.loads(raw[8:8 + hlen].decode("utf-8"))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: unreadable model header ({exc})") from None
    if header.get("magic") != MODEL_MAGIC or header.get("format") != MODEL_FORMAT:
        raise DataError(f"{path}: not a partivae model file")
    offset = 8 + hlen
    arrays = {}
    for name, shape in header["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(raw):
            raise DataError(f"{path}: truncated at array {name}")
        arrays[name] = np.frombuffer(raw[offset:end], dtype="<f8").reshape(shape).astype(np.float64)
        offset = end
    if offset != len(raw):
        raise DataError(f"{path}: {len(raw) - offset} trailing bytes")

    def net(part):
        return MlpParams(*(arrays[f"{part}.{k}"] for k in ("w1", "b1", "w2", "b2")))

    model = VaeModel(
        DecoderR(net("decoder"), header["domain"], header["family"]),
        EncoderQ(net("encoder")),
        LatentSpec(int(header["D"])),
    )
    return model, header
