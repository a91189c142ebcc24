"""File formats: DAMF flow fields, DAMM mask stacks, P5/P6 images and
JSON-syntax documents.

DAMF: magic b"DAMF", height and width as 32-bit little-endian unsigned ints,
then H*W*2 IEEE-754 little-endian 32-bit floats row-major, x then y per pixel.

DAMM: magic b"DAMM", channel count (K+1), height, width as 32-bit LE unsigned
ints, then (K+1)*H*W 32-bit LE floats channel-major.

Images: binary portable pixmaps, P5 (1 channel) / P6 (3 channels), maxval
255, values mapped linearly to [0, 1]; the quantization round trip is exact
to 1/510 per channel.

JSON documents emit floats with 17 significant digits so values round-trip
losslessly.
"""
from __future__ import annotations

import json
import struct

import numpy as np

from .errors import DimensionMismatch
from .flow import AnchorSet, FlowField, LatentAnchor, MaskStack
from .geometry import GridSpec
from .losses import LossReport
from .warp import ImageGrid

_U32 = "<I"


# ---------------------------------------------------------------------------
# JSON with lossless float formatting.
# ---------------------------------------------------------------------------

def _encode(obj) -> str:
    if obj is None:
        return "null"
    if isinstance(obj, bool):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if not np.isfinite(v):
            raise ValueError(f"cannot serialize non-finite number {v!r}")
        return format(v, ".17g")
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, np.ndarray):
        return _encode(obj.tolist())
    if isinstance(obj, (list, tuple)):
        return "[" + ",".join(_encode(v) for v in obj) + "]"
    if isinstance(obj, dict):
        items = (f"{json.dumps(str(k))}:{_encode(v)}" for k, v in obj.items())
        return "{" + ",".join(items) + "}"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps_json(obj) -> str:
    return _encode(obj)


def loads_json(text: str):
    return json.loads(text)


def write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(dumps_json(obj))
        f.write("\n")


def read_json(path):
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


# ---------------------------------------------------------------------------
# Binary flow / mask formats.
# ---------------------------------------------------------------------------

def flow_field_bytes(field: FlowField) -> bytes:
    head = b"DAMF" + struct.pack(_U32, field.spec.height) + struct.pack(_U32, field.spec.width)
    return head + field.vectors.astype("<f4").tobytes()


def write_flow_field(path, field: FlowField) -> None:
    with open(path, "wb") as f:
        f.write(flow_field_bytes(field))


def read_flow_field(path) -> FlowField:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != b"DAMF":
        raise ValueError(f"{path}: not a DAMF file")
    h, w = struct.unpack(_U32, data[4:8])[0], struct.unpack(_U32, data[8:12])[0]
    vec = np.frombuffer(data[12:], dtype="<f4")
    if vec.size != h * w * 2:
        raise ValueError(f"{path}: expected {h * w * 2} floats, found {vec.size}")
    return FlowField(GridSpec(h, w), vec.astype(np.float64).reshape(h, w, 2))


def mask_stack_bytes(masks: MaskStack) -> bytes:
    c = masks.weights.shape[0]
    head = (b"DAMM" + struct.pack(_U32, c)
            + struct.pack(_U32, masks.spec.height) + struct.pack(_U32, masks.spec.width))
    return head + masks.weights.astype("<f4").tobytes()


def write_mask_stack(path, masks: MaskStack) -> None:
    with open(path, "wb") as f:
        f.write(mask_stack_bytes(masks))


def read_mask_stack(path) -> MaskStack:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != b"DAMM":
        raise ValueError(f"{path}: not a DAMM file")
    c = struct.unpack(_U32, data[4:8])[0]
    h = struct.unpack(_U32, data[8:12])[0]
    w = struct.unpack(_U32, data[12:16])[0]
    arr = np.frombuffer(data[16:], dtype="<f4")
    if arr.size != c * h * w:
        raise ValueError(f"{path}: expected {c * h * w} floats, found {arr.size}")
    # float32 rounding keeps weights in [0, 1] and per-pixel sums well within
    # the stack's 1e-6 tolerance, so the values load back verbatim.
    weights = arr.astype(np.float64).reshape(c, h, w)
    return MaskStack(GridSpec(h, w), weights)


# ---------------------------------------------------------------------------
# P5 / P6 images.
# ---------------------------------------------------------------------------

def image_bytes(img: ImageGrid) -> bytes:
    if img.channels not in (1, 3):
        raise ValueError(f"only 1- or 3-channel images are supported, got {img.channels}")
    magic = b"P5" if img.channels == 1 else b"P6"
    header = magic + b"\n" + f"{img.spec.width} {img.spec.height}\n255\n".encode()
    q = np.round(np.clip(img.values, 0.0, 1.0) * 255.0).astype(np.uint8)
    raster = q[0] if img.channels == 1 else np.ascontiguousarray(q.transpose(1, 2, 0))
    return header + raster.tobytes()


def write_image(path, img: ImageGrid) -> None:
    with open(path, "wb") as f:
        f.write(image_bytes(img))


def read_image(path) -> ImageGrid:
    with open(path, "rb") as f:
        data = f.read()
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: not a binary P5/P6 file")
    # Header tokens may be separated by arbitrary whitespace and # comments.
    pos = 2
    tokens = []
    while len(tokens) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1  # single whitespace byte after maxval
    w, h, maxval = (int(t) for t in tokens)
    if maxval != 255:
        raise ValueError(f"{path}: expected maxval 255, got {maxval}")
    channels = 1 if magic == b"P5" else 3
    raster = np.frombuffer(data[pos:pos + w * h * channels], dtype=np.uint8)
    if raster.size != w * h * channels:
        raise ValueError(f"{path}: truncated raster")
    if channels == 1:
        values = raster.reshape(1, h, w).astype(np.float64) / 255.0
    else:
        values = raster.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / 255.0
    return ImageGrid(GridSpec(h, w), values)


# ---------------------------------------------------------------------------
# Anchor documents, joints, loss log lines.
# ---------------------------------------------------------------------------

def _latent_doc(a: LatentAnchor) -> dict:
    return {"pos_d": a.pos_d, "flow": a.flow, "theta": a.theta}


def _latent_from_doc(doc: dict) -> LatentAnchor:
    return LatentAnchor(np.array(doc["pos_d"]), np.array(doc["flow"]), np.array(doc["theta"]))


def anchor_set_doc(anchors: AnchorSet, attention_logits: np.ndarray | None = None) -> dict:
    doc = {
        "motion_anchors": [
            {"pos_d": anchors.pos_d[k], "pos_s": anchors.pos_s[k], "theta": anchors.theta[k]}
            for k in range(anchors.num_anchors)
        ],
        "root": _latent_doc(anchors.root) if anchors.root is not None else None,
        "intermediates": [_latent_doc(a) for a in anchors.intermediates],
        "attention_logits": (attention_logits if attention_logits is not None
                             else np.zeros((anchors.num_intermediates, anchors.num_anchors))),
    }
    return doc


def anchor_set_from_doc(doc: dict) -> tuple[AnchorSet, np.ndarray]:
    motion = doc["motion_anchors"]
    pos_d = np.array([m["pos_d"] for m in motion], dtype=np.float64)
    pos_s = np.array([m["pos_s"] for m in motion], dtype=np.float64)
    theta = np.array([m["theta"] for m in motion], dtype=np.float64)
    root = _latent_from_doc(doc["root"]) if doc.get("root") is not None else None
    inters = tuple(_latent_from_doc(d) for d in doc.get("intermediates", []))
    anchors = AnchorSet(pos_d, pos_s, theta, root=root, intermediates=inters)
    attn = np.array(doc.get("attention_logits", []), dtype=np.float64)
    attn = attn.reshape(len(inters), anchors.num_anchors) if attn.size else np.zeros(
        (len(inters), anchors.num_anchors))
    return anchors, attn


def write_anchor_set(path, anchors: AnchorSet, attention_logits: np.ndarray | None = None) -> None:
    write_json(path, anchor_set_doc(anchors, attention_logits))


def read_anchor_set(path) -> tuple[AnchorSet, np.ndarray]:
    return anchor_set_from_doc(read_json(path))


def joints_doc(joints_src, joints_drv) -> dict:
    return {
        "source": [[p.x, p.y] for p in joints_src],
        "driving": [[p.x, p.y] for p in joints_drv],
    }


def loss_report_line(iteration: int, report: LossReport) -> str:
    return dumps_json({
        "iter": int(iteration),
        "total": report.total,
        "rec": report.components["reconstruction"],
        "equi": report.components["equivariance"],
        "dam": report.components["dam"],
        "hdam": report.components["hdam"],
    })
