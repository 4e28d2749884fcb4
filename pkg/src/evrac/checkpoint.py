"""Checkpoint container and model (de)serialization.

Layout:
    b"RACCKPT1\\n"
    <header byte length, ASCII decimal>\\n
    <header JSON, UTF-8>
    <payload: concatenated little-endian float64 arrays>

The header carries format_version, kind, tool version, model metadata and a
per-array manifest (name, shape, byte offset into the payload). Offsets must
be contiguous and strictly increasing; load(save(x)) is a bitwise identity.
No wall-clock metadata is stored, so identical runs produce identical files.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

from . import __version__
from .agent import RacHyper, RacModel
from .baselines import FpmcHyper, FpmcRecommender, MarkovRecommender, PopularityRecommender
from .errors import DataFormatError
from .reward import RewardNetHyper, WaitForecastNet

MAGIC = b"RACCKPT1\n"
FORMAT_VERSION = 1


def save_checkpoint(arrays: dict[str, np.ndarray], kind: str, meta: dict, path: str | Path) -> None:
    names = sorted(arrays)
    manifest = []
    offset = 0
    blobs = []
    for name in names:
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blob = arr.tobytes()
        blobs.append(blob)
        offset += len(blob)
    header = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "tool": f"evrac {__version__}",
        "meta": meta,
        "arrays": manifest,
    }
    header_bytes = (json.dumps(header, sort_keys=True) + "\n").encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(f"{len(header_bytes)}\n".encode("ascii"))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise DataFormatError(f"{path}: bad checkpoint magic")
    rest = raw[len(MAGIC) :]
    nl = rest.find(b"\n")
    if nl < 0:
        raise DataFormatError(f"{path}: missing header length")
    try:
        header_len = int(rest[:nl])
    except ValueError as exc:
        raise DataFormatError(f"{path}: bad header length") from exc
    header_start = nl + 1
    header_bytes = rest[header_start : header_start + header_len]
    if len(header_bytes) < header_len:
        raise DataFormatError(f"{path}: truncated header")
    try:
        header = json.loads(header_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"{path}: corrupt header: {exc}") from exc
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise DataFormatError(
            f"{path}: unsupported checkpoint format_version {version!r} (expected {FORMAT_VERSION})"
        )

    payload = rest[header_start + header_len :]
    arrays: dict[str, np.ndarray] = {}
    expected_offset = 0
    manifest = header.get("arrays", [])
    names = [entry.get("name") for entry in manifest]
    if len(set(names)) != len(names):
        raise DataFormatError(f"{path}: duplicate array names in manifest")
    for entry in manifest:
        name, shape, offset = entry["name"], tuple(entry["shape"]), entry["offset"]
        if offset != expected_offset:
            raise DataFormatError(f"{path}: non-contiguous manifest at array {name!r}")
        size = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = size * 8
        chunk = payload[offset : offset + nbytes]
        if len(chunk) < nbytes:
            raise DataFormatError(f"{path}: truncated payload, array {name!r} incomplete")
        arrays[name] = np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(shape)
        expected_offset = offset + nbytes
    if len(payload) != expected_offset:
        raise DataFormatError(f"{path}: {len(payload) - expected_offset} trailing bytes after payload")
    return arrays, header


def _copy_into(params: dict[str, np.ndarray], arrays: dict[str, np.ndarray], path: str | Path) -> None:
    missing = sorted(set(params) - set(arrays))
    if missing:
        raise DataFormatError(f"{path}: checkpoint is missing arrays {missing}")
    for name, target in params.items():
        src = arrays[name]
        if src.shape != target.shape:
            raise DataFormatError(
                f"{path}: array {name!r} has shape {src.shape}, expected {target.shape}"
            )
        np.copyto(target, src)


# ---------------------------------------------------------------------------
# Actor-critic bundle
# ---------------------------------------------------------------------------

def save_rac_model(model: RacModel, path: str | Path, extra_meta: dict | None = None) -> None:
    meta = {
        "obs_dim": model.obs_dim,
        "num_stations": model.num_stations,
        "hyper": dataclasses.asdict(model.hyper),
        "critic_updates": model.critic_updates,
    }
    if extra_meta:
        meta.update(extra_meta)
    save_checkpoint(model.all_params(), "rac", meta, path)


def load_rac_model(path: str | Path) -> tuple[RacModel, dict]:
    arrays, header = load_checkpoint(path)
    if header.get("kind") != "rac":
        raise DataFormatError(f"{path}: expected a rac checkpoint, got {header.get('kind')!r}")
    meta = header["meta"]
    hyper = RacHyper(**meta["hyper"])
    model = RacModel(meta["obs_dim"], meta["num_stations"], hyper)
    _copy_into(model.all_params(), arrays, path)
    model.critic_updates = int(meta.get("critic_updates", 0))
    return model, header


# ---------------------------------------------------------------------------
# Wait forecaster
# ---------------------------------------------------------------------------

def save_reward_net(net: WaitForecastNet, hyper: RewardNetHyper, path: str | Path,
                    extra_meta: dict | None = None) -> None:
    meta = {
        "input_dim": net.input_dim,
        "hidden": net.hidden_dim,
        "layers": net.lstm.num_layers,
        "hyper": dataclasses.asdict(hyper),
    }
    if extra_meta:
        meta.update(extra_meta)
    save_checkpoint(net.params, "reward", meta, path)


def load_reward_net(path: str | Path) -> tuple[WaitForecastNet, RewardNetHyper, dict]:
    arrays, header = load_checkpoint(path)
    if header.get("kind") != "reward":
        raise DataFormatError(f"{path}: expected a reward checkpoint, got {header.get('kind')!r}")
    meta = header["meta"]
    hyper = RewardNetHyper(**meta["hyper"])
    net = WaitForecastNet(meta["input_dim"], meta["hidden"], meta["layers"],
                          np.random.default_rng(0))
    _copy_into(net.params, arrays, path)
    return net, hyper, header


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------

def save_baseline(model, path: str | Path, extra_meta: dict | None = None) -> None:
    extra = extra_meta or {}
    if isinstance(model, MarkovRecommender):
        arrays = {"global": model.global_matrix}
        arrays.update({f"driver.{d}": m for d, m in model.per_driver.items()})
        meta = {"stations": model.stations, "lam": model.lam, **extra}
        save_checkpoint(arrays, "markov", meta, path)
    elif isinstance(model, FpmcRecommender):
        arrays = {"UI": model.UI, "IU": model.IU, "LI": model.LI, "IL": model.IL}
        meta = {
            "stations": model.stations,
            "drivers": sorted(model.driver_index, key=model.driver_index.get),
            "hyper": dataclasses.asdict(model.hyper),
            **extra,
        }
        save_checkpoint(arrays, "fpmc", meta, path)
    elif isinstance(model, PopularityRecommender):
        arrays = {"global": model.global_counts}
        arrays.update({f"driver.{d}": c for d, c in model.per_driver.items()})
        meta = {"stations": model.stations, **extra}
        save_checkpoint(arrays, "popularity", meta, path)
    else:
        raise DataFormatError(f"cannot checkpoint {type(model).__name__}")


def load_baseline(path: str | Path):
    arrays, header = load_checkpoint(path)
    kind = header.get("kind")
    meta = header["meta"]
    if kind == "markov":
        model = MarkovRecommender(meta["stations"], lam=meta["lam"])
        model.global_matrix = arrays["global"]
        model.per_driver = {
            name[len("driver.") :]: arr for name, arr in arrays.items() if name.startswith("driver.")
        }
        return model, header
    if kind == "fpmc":
        model = FpmcRecommender(meta["stations"], FpmcHyper(**meta["hyper"]))
        model.driver_index = {d: i for i, d in enumerate(meta["drivers"])}
        model.UI, model.IU = arrays["UI"], arrays["IU"]
        model.LI, model.IL = arrays["LI"], arrays["IL"]
        return model, header
    if kind == "popularity":
        model = PopularityRecommender(meta["stations"])
        model.global_counts = arrays["global"]
        model.per_driver = {
            name[len("driver.") :]: arr for name, arr in arrays.items() if name.startswith("driver.")
        }
        return model, header
    raise DataFormatError(f"{path}: unknown baseline kind {kind!r}")
