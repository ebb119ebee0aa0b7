"""On-disk formats: checkpoints, scene and rig files, images and loss curves.

Checkpoint layout (all integers little-endian)::

    b"OPO1" | u32 version | 32-byte config digest | u32 meta length | meta JSON
    | u32 tensor count | per tensor: u16 name length, name, u8 ndim,
      u64 shape[ndim], f64 data | u64 length of everything before this field
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .camera import Camera
from .config import Config, dump_config, parse_config
from .model import OPONeRF
from .scene import Image, Light, Scene, SceneObject

MAGIC = b"OPO1"
CHECKPOINT_VERSION = 1
SCENE_VERSION = 1
RIG_VERSION = 1


class FormatError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: Config
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    @property
    def digest(self) -> str:
        return self.config.digest()


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    meta = dict(ckpt.meta)
    meta["config"] = dump_config(ckpt.config)
    meta_raw = json.dumps(meta, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<I", CHECKPOINT_VERSION), bytes.fromhex(ckpt.digest)]
    parts += [struct.pack("<I", len(meta_raw)), meta_raw, struct.pack("<I", len(ckpt.tensors))]
    for name in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[name], dtype=np.float64)
        raw_name = name.encode()
        parts.append(struct.pack("<H", len(raw_name)) + raw_name + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<Q", len(body))


def checkpoint_from_bytes(raw: bytes) -> Checkpoint:
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    (declared,) = struct.unpack_from("<Q", raw, len(raw) - 8)
    if declared != len(raw) - 8:
        raise FormatError(f"truncated or padded checkpoint: expected {declared} body bytes, found {len(raw) - 8}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    pos = 8
    digest = raw[pos : pos + 32].hex()
    pos += 32
    (n_meta,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    meta = json.loads(raw[pos : pos + n_meta])
    pos += n_meta
    config = parse_config(meta.pop("config"))
    if config.digest() != digest:
        raise FormatError("config digest does not match the stored configuration")
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (n_name,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos : pos + n_name].decode()
        pos += n_name
        (ndim,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", raw, pos)
        pos += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    if pos != len(raw) - 8:
        raise FormatError("trailing bytes after tensor table")
    return Checkpoint(config, tensors, meta)


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.write_bytes(checkpoint_bytes(ckpt))
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return checkpoint_from_bytes(path.read_bytes())


def model_checkpoint(model: OPONeRF, rngs: dict | None = None, meta: dict | None = None) -> Checkpoint:
    """Snapshot of every parameter (copied) plus the RNG stream states."""
    tensors = {name: p.data.copy() for name, p in model.parameters().items()}
    info = dict(meta or {})
    info["rng_states"] = rng_states(rngs or {})
    return Checkpoint(model.cfg, tensors, info)


def model_from_checkpoint(ckpt: Checkpoint) -> OPONeRF:
    model = OPONeRF(ckpt.config, np.random.default_rng(0))
    params = model.parameters()
    if set(params) != set(ckpt.tensors):
        missing = sorted(set(params) ^ set(ckpt.tensors))
        raise FormatError(f"checkpoint parameters do not match the model: {missing[:5]}")
    for name, p in params.items():
        if p.shape != ckpt.tensors[name].shape:
            raise FormatError(f"parameter {name}: shape {ckpt.tensors[name].shape}, expected {p.shape}")
        p.data[...] = ckpt.tensors[name]
    return model


def rng_states(rngs: dict[str, np.random.Generator]) -> dict:
    return {name: g.bit_generator.state for name, g in rngs.items()}


def restore_rngs(states: dict) -> dict[str, np.random.Generator]:
    out = {}
    for name, state in states.items():
        bitgen = getattr(np.random, state["bit_generator"])()
        bitgen.state = state
        out[name] = np.random.Generator(bitgen)
    return out


# ---------------------------------------------------------------------------
# Scene and rig
# ---------------------------------------------------------------------------


def scene_to_dict(scene: Scene) -> dict:
    return {
        "version": SCENE_VERSION,
        "seed": int(scene.seed),
        "background": [float(x) for x in scene.background],
        "bounds": [[float(x) for x in b] for b in scene.bounds],
        "light": {
            "position": [float(x) for x in scene.light.position],
            "intensity": float(scene.light.intensity),
            "ambient": float(scene.light.ambient),
        },
        "objects": [
            {
                "shape": o.shape,
                "center": [float(x) for x in o.center],
                "size": float(o.size),
                "albedo": [float(x) for x in o.albedo],
            }
            for o in scene.objects
        ],
    }


def scene_from_dict(d: dict) -> Scene:
    if d.get("version") != SCENE_VERSION:
        raise FormatError(f"unsupported scene file version {d.get('version')}")
    light = Light(np.array(d["light"]["position"]), d["light"]["intensity"], d["light"]["ambient"])
    objects = [SceneObject(o["shape"], np.array(o["center"]), o["size"], np.array(o["albedo"])) for o in d["objects"]]
    bounds = (np.array(d["bounds"][0]), np.array(d["bounds"][1]))
    return Scene(objects, light, np.array(d["background"]), bounds, d["seed"])


def rig_to_dict(cameras: list[Camera]) -> dict:
    return {
        "version": RIG_VERSION,
        "cameras": [
            {
                "K": c.K.tolist(),
                "R": c.R.tolist(),
                "t": c.t.tolist(),
                "width": c.width,
                "height": c.height,
                "near": c.near,
                "far": c.far,
            }
            for c in cameras
        ],
    }


def rig_from_dict(d: dict) -> list[Camera]:
    if d.get("version") != RIG_VERSION:
        raise FormatError(f"unsupported rig file version {d.get('version')}")
    return [
        Camera(np.array(c["K"]), np.array(c["R"]), np.array(c["t"]), c["width"], c["height"], c["near"], c["far"])
        for c in d["cameras"]
    ]


def write_json(path, payload: dict) -> Path:
    path = Path(path)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def read_json(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"missing file: {path}")
    return json.loads(path.read_text())


def save_scene(path, scene: Scene) -> Path:
    return write_json(path, scene_to_dict(scene))


def load_scene(path) -> Scene:
    return scene_from_dict(read_json(path))


def save_rig(path, cameras: list[Camera]) -> Path:
    return write_json(path, rig_to_dict(cameras))


def load_rig(path) -> list[Camera]:
    return rig_from_dict(read_json(path))


# ---------------------------------------------------------------------------
# Images and curves
# ---------------------------------------------------------------------------


def write_image(path, image) -> Path:
    """8-bit RGB; the format (PNG, PPM, ...) follows the file extension."""
    path = Path(path)
    img = image if isinstance(image, Image) else Image(np.asarray(image, dtype=np.float64))
    PILImage.fromarray(img.to_uint8(), mode="RGB").save(path)
    return path


def read_image(path) -> Image:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"missing image: {path}")
    with PILImage.open(path) as im:
        data = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return Image(data, {"path": str(path)})


def view_name(index: int, ext: str = "png") -> str:
    return f"view_{index:03d}.{ext}"


def write_loss_csv(path, rows, columns) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow([int(row[0])] + [repr(float(v)) for v in row[1:]])
    return path


def read_loss_csv(path) -> list[tuple]:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        return [(int(r[0]), *map(float, r[1:])) for r in reader]


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
