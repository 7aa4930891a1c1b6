"""On-disk formats.

Frame datasets are a directory with ``manifest.json`` and ``frames.txt``.
Each line of ``frames.txt`` is one frame::

    t=<timestamp> | <id> <x> <y> <gaze angle> <vx> <vy> <gx> <gy> | ... | att <x> <y>

Players are separated by `` | `` and the ``att`` record is optional. The gaze
angle (radians) is the human-readable field; ``gx gy`` carry the exact unit
vector so reading back is lossless. Floats are written with ``repr``.

Binary records (label images, exemplars, checkpoints) use a small container::

    magic "EGOFCAST" | u32 version | u64 header length | JSON header | zlib payload

The header lists each array's name, dtype, shape and byte range inside the
decompressed payload, plus the payload's sha256. Everything is written in a
fixed order, so identical inputs give identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import zlib
from dataclasses import asdict, fields
from pathlib import Path
from typing import Dict, Optional, Sequence

import numpy as np

from .attention import AttentionModel, ModelConfig
from .errors import Corrupt, HashMismatch, VersionMismatch
from .formation import FrameState
from .geometry import Court, GridSpec, LabelImage, PlayerState
from .retrieval import EmbeddingConfig, EmbeddingParams, Exemplar, ExemplarDatabase, Trajectory

FORMAT_VERSION = 1
MAGIC = b"EGOFCAST"
_PREFIX = struct.Struct("<8sIQ")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


# ---------------------------------------------------------------- frames


def format_frame(frame: FrameState) -> str:
    parts = [f"t={frame.timestamp!r}"]
    for p in frame.players:
        vals = (p.position[0], p.position[1], p.gaze_angle, p.velocity[0], p.velocity[1], p.gaze[0], p.gaze[1])
        parts.append(" ".join([str(p.player_id)] + [repr(float(v)) for v in vals]))
    if frame.attention is not None:
        parts.append(f"att {float(frame.attention[0])!r} {float(frame.attention[1])!r}")
    return " | ".join(parts)


def parse_frame(line: str) -> FrameState:
    try:
        fields_ = [s.strip() for s in line.strip().split("|")]
        if not fields_[0].startswith("t="):
            raise ValueError("missing timestamp")
        t = float(fields_[0][2:])
        players, att = [], None
        for rec in fields_[1:]:
            tok = rec.split()
            if tok[0] == "att":
                att = np.array([float(tok[1]), float(tok[2])])
                continue
            pid = int(tok[0])
            x, y, ang, vx, vy = (float(v) for v in tok[1:6])
            if len(tok) >= 8:
                g = (float(tok[6]), float(tok[7]))
            else:
                g = (np.cos(ang), np.sin(ang))
            players.append(PlayerState(np.array([x, y]), np.array(g), np.array([vx, vy]), pid))
        return FrameState(t, players, att)
    except (ValueError, IndexError) as e:
        raise Corrupt(f"bad frame record: {e}") from None


def write_dataset(directory, frames: Sequence[FrameState], court: Court = Court(), extra: Optional[dict] = None) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    text = "".join(format_frame(f) + "\n" for f in frames)
    (d / "frames.txt").write_text(text, encoding="utf-8")
    dt = float(frames[1].timestamp - frames[0].timestamp) if len(frames) > 1 else 0.0
    manifest = {
        "format": "egoforecast-frames",
        "version": FORMAT_VERSION,
        "court": {"width": court.width, "length": court.length},
        "dt": dt,
        "players": len(frames[0].players) if frames else 0,
        "frames": len(frames),
        "files": {"frames.txt": sha256_file(d / "frames.txt")},
        "sizes": {"frames.txt": (d / "frames.txt").stat().st_size},
    }
    if extra:
        manifest["extra"] = extra
    (d / "manifest.json").write_text(_dump_json(manifest), encoding="utf-8")
    return d


def read_manifest(directory, kind: str) -> dict:
    d = Path(directory)
    try:
        manifest = json.loads((d / "manifest.json").read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise
    except (ValueError, UnicodeDecodeError) as e:
        raise Corrupt(f"unreadable manifest: {e}") from None
    if manifest.get("format") != kind:
        raise Corrupt(f"expected a {kind} manifest, found {manifest.get('format')!r}")
    if manifest.get("version") != FORMAT_VERSION:
        raise VersionMismatch(f"format version {manifest.get('version')} (supported: {FORMAT_VERSION})")
    sizes = manifest.get("sizes", {})
    for name, digest in sorted(manifest.get("files", {}).items()):
        size = (d / name).stat().st_size
        if name in sizes and size != sizes[name]:
            raise Corrupt(f"{name}: {size} bytes, manifest lists {sizes[name]} (truncated or padded)")
        actual = sha256_file(d / name)
        if actual != digest:
            raise HashMismatch(f"{name}: manifest {digest[:12]}..., file {actual[:12]}...")
    return manifest


def read_dataset(directory):
    """Returns ``(frames, court, manifest)``."""
    d = Path(directory)
    manifest = read_manifest(d, "egoforecast-frames")
    lines = (d / "frames.txt").read_text(encoding="utf-8").splitlines()
    frames = [parse_frame(l) for l in lines if l.strip()]
    if len(frames) != manifest["frames"]:
        raise Corrupt(f"manifest lists {manifest['frames']} frames, file has {len(frames)}")
    court = Court(**manifest["court"])
    return frames, court, manifest


# ---------------------------------------------------------------- container


def pack(meta: dict, arrays: Dict[str, np.ndarray]) -> bytes:
    table, chunks, offset = [], [], 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        if a.dtype.byteorder == ">" or (a.dtype.byteorder == "=" and not np.little_endian):
            a = a.astype(a.dtype.newbyteorder("<"))
        raw = a.tobytes()
        table.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {"meta": meta, "arrays": table, "sha256": hashlib.sha256(payload).hexdigest(), "size": len(payload)}
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    return _PREFIX.pack(MAGIC, FORMAT_VERSION, len(hbytes)) + hbytes + zlib.compress(payload, 6)


def unpack(blob: bytes):
    """Returns ``(meta, arrays)``; raises Corrupt on any damage."""
    if len(blob) < _PREFIX.size:
        raise Corrupt("truncated container prefix")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise Corrupt("bad magic")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"container version {version} (supported: {FORMAT_VERSION})")
    start = _PREFIX.size
    if len(blob) < start + hlen:
        raise Corrupt("truncated header")
    try:
        header = json.loads(blob[start : start + hlen].decode("utf-8"))
        payload = zlib.decompress(blob[start + hlen :])
    except (ValueError, UnicodeDecodeError, zlib.error) as e:
        raise Corrupt(f"damaged container: {e}") from None
    if len(payload) != header["size"] or hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise Corrupt("payload checksum mismatch")
    arrays = {}
    for entry in header["arrays"]:
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
    return header["meta"], arrays


def write_blob(path, meta: dict, arrays: Dict[str, np.ndarray]) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    tmp = p.with_name(p.name + ".tmp")
    tmp.write_bytes(pack(meta, arrays))
    os.replace(tmp, p)
    return p


def read_blob(path):
    return unpack(Path(path).read_bytes())


# ---------------------------------------------------------------- label images and exemplars


def _grid_dict(grid: GridSpec) -> dict:
    return asdict(grid)


def _grid_from(d: dict) -> GridSpec:
    return GridSpec(**{f.name: d[f.name] for f in fields(GridSpec)})


def label_arrays(label: LabelImage, prefix: str = "label.") -> dict:
    return {prefix + "hsv": label.hsv, prefix + "owner": label.owner.astype(np.int64)}


def write_label_image(path, label: LabelImage) -> Path:
    return write_blob(path, {"kind": "label", "grid": _grid_dict(label.grid)}, label_arrays(label, ""))


def read_label_image(path) -> LabelImage:
    meta, a = read_blob(path)
    if meta.get("kind") != "label":
        raise Corrupt("not a label image")
    return LabelImage(_grid_from(meta["grid"]), a["hsv"], a["owner"])


def _exemplar_record(e: Exemplar) -> tuple:
    t = e.trajectory
    meta = {"kind": "exemplar", "player_id": e.state.player_id, "traj_player_id": t.player_id, "start": t.start, "dt": t.dt}
    arrays = {
        "state.position": e.state.position,
        "state.gaze": e.state.gaze,
        "state.velocity": e.state.velocity,
        "traj.positions": t.positions,
        "traj.gazes": t.gazes,
        **label_arrays(e.label),
    }
    if e.embedding is not None:
        arrays["embedding"] = np.asarray(e.embedding, dtype=float)
    return meta, arrays


def write_exemplar_db(directory, db: ExemplarDatabase) -> Path:
    d = Path(directory)
    (d / "records").mkdir(parents=True, exist_ok=True)
    files, sizes = {}, {}
    for k, e in enumerate(db.exemplars):
        name = f"records/{k:06d}.bin"
        write_blob(d / name, *_exemplar_record(e))
        files[name] = sha256_file(d / name)
        sizes[name] = (d / name).stat().st_size
    manifest = {
        "format": "egoforecast-exemplars",
        "version": FORMAT_VERSION,
        "grid": _grid_dict(db.grid),
        "count": len(db),
        "files": files,
        "sizes": sizes,
    }
    (d / "manifest.json").write_text(_dump_json(manifest), encoding="utf-8")
    return d


def read_exemplar_db(directory) -> ExemplarDatabase:
    d = Path(directory)
    manifest = read_manifest(d, "egoforecast-exemplars")
    grid = _grid_from(manifest["grid"])
    out = []
    for name in sorted(manifest["files"]):
        meta, a = read_blob(d / name)
        if meta.get("kind") != "exemplar":
            raise Corrupt(f"{name} is not an exemplar record")
        state = PlayerState(a["state.position"], a["state.gaze"], a["state.velocity"], meta["player_id"])
        traj = Trajectory(meta["traj_player_id"], meta["start"], meta["dt"], a["traj.positions"], a["traj.gazes"])
        out.append(Exemplar(state, LabelImage(grid, a["label.hsv"], a["label.owner"]), traj, a.get("embedding")))
    if len(out) != manifest["count"]:
        raise Corrupt("exemplar count does not match the manifest")
    return ExemplarDatabase(tuple(out), grid)


# ---------------------------------------------------------------- checkpoints


def _config_dict(cfg) -> dict:
    out = {}
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, Court):
            v = {"width": v.width, "length": v.length}
        elif isinstance(v, tuple):
            v = list(v)
        out[f.name] = v
    return out


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode("utf-8")).hexdigest()


def write_attention_checkpoint(path, model: AttentionModel) -> Path:
    cfg = _config_dict(model.config)
    meta = {"kind": "attention", "config": cfg, "config_hash": config_hash(cfg)}
    return write_blob(path, meta, {k: np.asarray(v, dtype=float) for k, v in model.params.items()})


def read_attention_checkpoint(path) -> AttentionModel:
    meta, params = read_blob(path)
    if meta.get("kind") != "attention":
        raise Corrupt("not an attention checkpoint")
    if config_hash(meta["config"]) != meta["config_hash"]:
        raise HashMismatch("attention config hash mismatch")
    cfg = dict(meta["config"])
    cfg["court"] = Court(**cfg["court"])
    cfg["grid"] = tuple(cfg["grid"])
    return AttentionModel(ModelConfig(**cfg), params)


def write_embedding_checkpoint(path, params: EmbeddingParams, eps: float, extra: Optional[dict] = None) -> Path:
    cfg = {"embedding": asdict(params.config), "grid": _grid_dict(params.grid)}
    meta = {"kind": "embedding", "config": cfg, "config_hash": config_hash(cfg), "eps": float(eps), "extra": extra or {}}
    return write_blob(path, meta, {k: np.asarray(v, dtype=float) for k, v in params.params.items()})


def read_embedding_checkpoint(path):
    """Returns ``(params, eps, extra)``."""
    meta, arrays = read_blob(path)
    if meta.get("kind") != "embedding":
        raise Corrupt("not an embedding checkpoint")
    if config_hash(meta["config"]) != meta["config_hash"]:
        raise HashMismatch("embedding config hash mismatch")
    cfg = meta["config"]
    params = EmbeddingParams(EmbeddingConfig(**cfg["embedding"]), _grid_from(cfg["grid"]), arrays)
    return params, meta["eps"], meta.get("extra", {})
