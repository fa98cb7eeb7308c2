"""Byte-level readers and writers: PLY, OBJ, PNG, JGAT tensors, JSON config."""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict
from io import BytesIO
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from ..core import Camera, DepthMap, GaussianSet, Image, LatentGrid, LossWeights, SmplMesh


class ParseError(ValueError):
    """Malformed input; ``offset`` is the byte position where parsing stopped."""

    def __init__(self, message: str, offset: int | None = None, path=None):
        where = f" at byte {offset}" if offset is not None else ""
        src = f"{path}: " if path is not None else ""
        super().__init__(f"{src}{message}{where}")
        self.offset = offset
        self.path = path


def _read_bytes(source) -> tuple[bytes, str | None]:
    if isinstance(source, (bytes, bytearray)):
        return bytes(source), None
    path = Path(source)
    return path.read_bytes(), str(path)


# -- PLY ---------------------------------------------------------------------

PLY_PROPERTIES = (
    "x", "y", "z", "red", "green", "blue",
    "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3", "opacity",
)
_PLY_TYPES = {
    "float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
    "uchar": "u1", "uint8": "u1", "char": "i1", "int8": "i1",
    "short": "<i2", "int16": "<i2", "ushort": "<u2", "uint16": "<u2",
    "int": "<i4", "int32": "<i4", "uint": "<u4", "uint32": "<u4",
}


def ply_bytes(gaussians: GaussianSet, binary: bool = True) -> bytes:
    """Serialise as float32 PLY with the common splatting property names."""
    m = gaussians.attribute_matrix().astype("<f4")
    fmt = "binary_little_endian" if binary else "ascii"
    header = ["ply", f"format {fmt} 1.0", f"element vertex {len(m)}"]
    header += [f"property float {name}" for name in PLY_PROPERTIES]
    header.append("end_header")
    head = ("\n".join(header) + "\n").encode("ascii")
    if binary:
        return head + m.tobytes()
    rows = "".join(" ".join(repr(float(v)) for v in row) + "\n" for row in m)
    return head + rows.encode("ascii")


def write_ply(path, gaussians: GaussianSet, binary: bool = True) -> None:
    Path(path).write_bytes(ply_bytes(gaussians, binary))


def _parse_ply_header(data: bytes, path):
    end = data.find(b"end_header")
    if not data.startswith(b"ply\n") and not data.startswith(b"ply\r\n"):
        raise ParseError("missing 'ply' magic", 0, path)
    if end < 0:
        raise ParseError("header has no 'end_header' line", len(data), path)
    nl = data.find(b"\n", end)
    if nl < 0:
        raise ParseError("header ends without a newline", len(data), path)
    body_start = nl + 1
    try:
        lines = data[:end].decode("ascii").splitlines()
    except UnicodeDecodeError as exc:
        raise ParseError("non-ASCII header", exc.start, path) from None
    fmt, count, props, offset, seen_vertex = None, None, [], 0, False
    for line in lines:
        here = offset
        offset += len(line) + 1
        parts = line.split()
        if not parts or parts[0] in ("ply", "comment", "obj_info"):
            continue
        if parts[0] == "format":
            if len(parts) != 3 or parts[1] not in ("binary_little_endian", "ascii"):
                raise ParseError(f"unsupported format line {line!r}", here, path)
            fmt = parts[1]
        elif parts[0] == "element":
            if len(parts) != 3 or parts[1] != "vertex" or seen_vertex:
                raise ParseError(f"unsupported element line {line!r}", here, path)
            try:
                count = int(parts[2])
            except ValueError:
                raise ParseError(f"bad vertex count {parts[2]!r}", here, path) from None
            if count < 0:
                raise ParseError(f"negative vertex count {count}", here, path)
            seen_vertex = True
        elif parts[0] == "property":
            if len(parts) != 3 or parts[1] not in _PLY_TYPES:
                raise ParseError(f"unsupported property line {line!r}", here, path)
            if parts[2] not in PLY_PROPERTIES:
                raise ParseError(f"unknown property {parts[2]!r}", here, path)
            if parts[2] in (p for p, _ in props):
                raise ParseError(f"duplicate property {parts[2]!r}", here, path)
            props.append((parts[2], _PLY_TYPES[parts[1]]))
        else:
            raise ParseError(f"unexpected header line {line!r}", here, path)
    if fmt is None or count is None:
        raise ParseError("header lacks a format or vertex element", body_start, path)
    missing = [p for p in PLY_PROPERTIES if p not in dict(props)]
    if missing:
        raise ParseError(f"missing properties {missing}", body_start, path)
    return fmt, count, props, body_start


def read_ply(source) -> GaussianSet:
    data, path = _read_bytes(source)
    fmt, count, props, start = _parse_ply_header(data, path)
    dtype = np.dtype([(name, t) for name, t in props])
    if fmt == "binary_little_endian":
        need = count * dtype.itemsize
        have = len(data) - start
        if have < need:
            raise ParseError(
                f"truncated payload: expected {need} bytes of vertex data, "
                f"found {have} ({need - have} bytes missing)", len(data), path)
        if have > need:
            raise ParseError(f"{have - need} trailing bytes after vertex data", start + need, path)
        rec = np.frombuffer(data, dtype=dtype, count=count, offset=start)
        cols = np.stack([rec[p].astype(np.float64) for p in PLY_PROPERTIES], axis=1) if count else np.zeros((0, 14))
    else:
        try:
            text = data[start:].decode("ascii")
        except UnicodeDecodeError as exc:
            raise ParseError("non-ASCII vertex data", start + exc.start, path) from None
        rows = [r for r in text.splitlines() if r.strip()]
        if len(rows) != count:
            raise ParseError(f"expected {count} vertex rows, found {len(rows)}", len(data), path)
        order = [p for p, _ in props]
        cols = np.zeros((count, 14))
        pos = start
        for i, row in enumerate(rows):
            fields = row.split()
            if len(fields) != len(order):
                raise ParseError(f"row {i} has {len(fields)} values, expected {len(order)}", pos, path)
            try:
                vals = [float(v) for v in fields]
            except ValueError:
                raise ParseError(f"row {i} has a non-numeric value", pos, path) from None
            for name, v in zip(order, vals):
                cols[i, PLY_PROPERTIES.index(name)] = v
            pos += len(row) + 1
    if not np.all(np.isfinite(cols)):
        raise ParseError("non-finite vertex values", start, path)
    return GaussianSet.from_attribute_matrix(cols)


# -- OBJ ---------------------------------------------------------------------


def write_obj(path, mesh: SmplMesh) -> None:
    lines = []
    for i, v in enumerate(mesh.vertices):
        if mesh.vertex_colors is not None:
            c = mesh.vertex_colors[i]
            lines.append("v " + " ".join(repr(float(x)) for x in (*v, *c)))
        else:
            lines.append("v " + " ".join(repr(float(x)) for x in v))
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(source) -> SmplMesh:
    """Vertices (optionally with RGB) and triangular faces; other records are skipped."""
    data, path = _read_bytes(source)
    verts, colors, faces = [], [], []
    offset = 0
    for raw in data.split(b"\n"):
        here = offset
        offset += len(raw) + 1
        try:
            line = raw.decode("ascii").strip()
        except UnicodeDecodeError:
            raise ParseError("non-ASCII content", here, path) from None
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            if parts[0] == "v":
                vals = [float(x) for x in parts[1:]]
                if len(vals) not in (3, 6):
                    raise ParseError(f"vertex with {len(vals)} values", here, path)
                verts.append(vals[:3])
                colors.append(vals[3:] if len(vals) == 6 else None)
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) for p in parts[1:]]
                if len(idx) < 3:
                    raise ParseError("face with fewer than 3 vertices", here, path)
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                if min(idx) < 0 or max(idx) >= len(verts):
                    raise ParseError("face index out of range", here, path)
                faces += [[idx[0], idx[k], idx[k + 1]] for k in range(1, len(idx) - 1)]
        except ValueError as exc:
            if isinstance(exc, ParseError):
                raise
            raise ParseError(f"bad number in {line[:40]!r}", here, path) from None
    if not verts:
        raise ParseError("no vertices", len(data), path)
    v = np.array(verts, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ParseError("non-finite vertex coordinates", 0, path)
    has_color = all(c is not None for c in colors)
    vc = np.array(colors, dtype=np.float64) if has_color else None
    return SmplMesh(v, np.array(faces, dtype=np.int64).reshape(-1, 3), vc)


# -- PNG ---------------------------------------------------------------------

DEPTH_SCALE = 1000.0  # stored units per world unit (millimetres for metre scenes)


def _open_png(source):
    data, path = _read_bytes(source)
    try:
        img = PILImage.open(BytesIO(data))
        img.load()
    except Exception as exc:  # the decoder raises a wide variety of types on corrupt input
        raise ParseError(f"unreadable PNG ({exc})", None, path) from None
    if img.format != "PNG":
        raise ParseError(f"not a PNG ({img.format})", 0, path)
    return img, path


def write_png(path, image: Image) -> None:
    """8-bit RGB PNG; values are clamped to [0, 1]."""
    px = np.clip(image.pixels, 0.0, 1.0)
    arr = np.rint(px * 255).astype(np.uint8)
    PILImage.fromarray(arr if arr.shape[2] == 3 else arr[..., 0]).save(path, format="PNG")


def read_png(source) -> Image:
    img, path = _open_png(source)
    if img.mode not in ("RGB", "L", "RGBA"):
        raise ParseError(f"unsupported RGB PNG mode {img.mode}", None, path)
    arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    return Image(arr)


def write_depth_png(path, depth: DepthMap, scale: float = DEPTH_SCALE) -> None:
    """16-bit depth PNG plus a ``.json`` sidecar recording the scale factor."""
    q = np.rint(depth.depth * scale)
    if q.min() < 0 or q.max() > 65535:
        raise ValueError(f"depth range exceeds 16 bits at scale {scale}")
    PILImage.fromarray(q.astype(np.uint16)).save(path, format="PNG")
    Path(str(path) + ".json").write_text(json.dumps({"scale": scale}))


def read_depth_png(source, scale: float | None = None) -> DepthMap:
    img, path = _open_png(source)
    if img.mode not in ("I;16", "I"):
        raise ParseError(f"depth PNG must be 16-bit, got mode {img.mode}", None, path)
    if scale is None:
        sidecar = Path(str(source) + ".json")
        scale = float(read_config(sidecar)["scale"]) if sidecar.exists() else DEPTH_SCALE
    raw = np.asarray(img).astype(np.float64)
    return DepthMap(raw / scale)


def read_depth_png_raw(source) -> np.ndarray:
    img, _ = _open_png(source)
    return np.asarray(img).astype(np.uint16)


# -- JGAT tensor container -----------------------------------------------------

TENSOR_MAGIC = b"JGAT"
_MAX_RANK = 16


def tensor_bytes(array) -> bytes:
    a = np.ascontiguousarray(array, dtype="<f4")
    head = TENSOR_MAGIC + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + a.tobytes()


def _parse_tensor(data: bytes, offset: int, path) -> tuple[np.ndarray, int]:
    if data[offset:offset + 4] != TENSOR_MAGIC:
        raise ParseError("bad magic (expected b'JGAT')", offset, path)
    if len(data) < offset + 8:
        raise ParseError("truncated rank field: expected 4 bytes", len(data), path)
    (rank,) = struct.unpack_from("<I", data, offset + 4)
    if rank > _MAX_RANK:
        raise ParseError(f"rank {rank} exceeds limit {_MAX_RANK}", offset + 4, path)
    dims_end = offset + 8 + 8 * rank
    if len(data) < dims_end:
        raise ParseError(f"truncated shape: expected {dims_end - len(data)} more bytes", len(data), path)
    dims = struct.unpack_from(f"<{rank}Q", data, offset + 8)
    count = 1
    for d in dims:
        count *= d
    need = 4 * count
    have = len(data) - dims_end
    if have < need:
        raise ParseError(
            f"truncated payload: expected {need} bytes of float32 data, found {have} "
            f"({need - have} bytes missing)", len(data), path)
    arr = np.frombuffer(data, dtype="<f4", count=count, offset=dims_end).reshape(dims)
    return arr.astype(np.float32), dims_end + need


def write_tensor(path, array) -> None:
    Path(path).write_bytes(tensor_bytes(array))


def read_tensor(source) -> np.ndarray:
    data, path = _read_bytes(source)
    arr, end = _parse_tensor(data, 0, path)
    if end != len(data):
        raise ParseError(f"{len(data) - end} trailing bytes after tensor", end, path)
    return arr


def write_latent(path, grid: LatentGrid) -> None:
    write_tensor(path, grid.stacked())


def read_latent(source) -> LatentGrid:
    arr = read_tensor(source)
    if arr.ndim != 4 or arr.shape[3] < 2 or not (arr.shape[0] == arr.shape[1] == arr.shape[2]):
        raise ParseError(f"latent tensor has shape {arr.shape}, expected (r, r, r, F+1)", 0, source)
    return LatentGrid.from_stacked(arr.astype(np.float64))


def write_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Concatenated JGAT records plus a ``.json`` manifest naming them in order."""
    names = list(arrays)
    blob = b"".join(tensor_bytes(arrays[n]) for n in names)
    Path(path).write_bytes(blob)
    manifest = {"tensors": names, "sha256": hashlib.sha256(blob).hexdigest(), "meta": meta or {}}
    Path(str(path) + ".json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    data, p = _read_bytes(path)
    manifest = read_config(str(path) + ".json")
    names = manifest.get("tensors")
    if not isinstance(names, list):
        raise ParseError("checkpoint manifest lacks a 'tensors' list", None, str(path) + ".json")
    out, offset = {}, 0
    for name in names:
        if offset >= len(data):
            raise ParseError(f"missing tensor {name!r}", offset, p)
        out[name], offset = _parse_tensor(data, offset, p)
    if offset != len(data):
        raise ParseError(f"{len(data) - offset} trailing bytes after last tensor", offset, p)
    return out, manifest.get("meta", {})


# -- JSON ----------------------------------------------------------------------


def read_config(source) -> dict:
    data, path = _read_bytes(source)
    try:
        cfg = json.loads(data.decode("utf-8"))
    except UnicodeDecodeError as exc:
        raise ParseError("config is not UTF-8", exc.start, path) from None
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON ({exc.msg}, line {exc.lineno} column {exc.colno})", exc.pos, path) from None
    if not isinstance(cfg, dict):
        raise ParseError("config root must be a JSON object", 0, path)
    return cfg


def camera_to_dict(cam: Camera) -> dict:
    return {
        "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
        "rotation": cam.rotation.tolist(), "translation": cam.translation.tolist(),
        "width": cam.width, "height": cam.height,
    }


def camera_from_dict(d: dict) -> Camera:
    try:
        return Camera(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                      np.array(d["rotation"], dtype=np.float64), np.array(d["translation"], dtype=np.float64),
                      int(d["width"]), int(d["height"]))
    except KeyError as exc:
        raise ParseError(f"camera is missing field {exc.args[0]!r}") from None


def loss_weights_to_dict(w: LossWeights) -> dict:
    return asdict(w)


def loss_weights_from_dict(d: dict) -> LossWeights:
    unknown = set(d) - set(asdict(LossWeights()))
    if unknown:
        raise ParseError(f"unknown loss weight fields {sorted(unknown)}")
    return LossWeights(**{k: float(v) for k, v in d.items()})
