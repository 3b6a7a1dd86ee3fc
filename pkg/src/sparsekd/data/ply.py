"""Minimal PLY reader/writer for vertex clouds (ascii and binary_little_endian)."""

from __future__ import annotations

import os

import numpy as np

from ..distill.losses import IGNORE_LABEL
from .pointcloud import PointCloud

_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}
_LABEL_NAMES = ("label", "class", "semantic_label")


class PlyError(ValueError):
    pass


def _parse_header(fh):
    first = fh.readline()
    if first.strip() != b"ply":
        raise PlyError("line 1: missing 'ply' magic")
    fmt = None
    elements = []  # (name, count, [(prop, dtype or ('list', count_t, item_t))])
    lineno = 1
    while True:
        raw = fh.readline()
        lineno += 1
        if not raw:
            raise PlyError(f"line {lineno}: header ended before 'end_header'")
        try:
            line = raw.decode("ascii").strip()
        except UnicodeDecodeError:
            raise PlyError(f"line {lineno}: non-ascii header line") from None
        if not line or line.startswith(("comment", "obj_info")):
            continue
        parts = line.split()
        if parts[0] == "end_header":
            break
        if parts[0] == "format":
            if len(parts) != 3:
                raise PlyError(f"line {lineno}: malformed format line")
            fmt = parts[1]
            if fmt not in ("ascii", "binary_little_endian"):
                raise PlyError(f"line {lineno}: unsupported format {fmt!r}")
        elif parts[0] == "element":
            if len(parts) != 3 or not parts[2].isdigit():
                raise PlyError(f"line {lineno}: malformed element line")
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise PlyError(f"line {lineno}: property before any element")
            if len(parts) == 5 and parts[1] == "list":
                if parts[2] not in _TYPES or parts[3] not in _TYPES:
                    raise PlyError(f"line {lineno}: unsupported property type")
                elements[-1][2].append((parts[4], ("list", _TYPES[parts[2]], _TYPES[parts[3]])))
            elif len(parts) == 3:
                if parts[1] not in _TYPES:
                    raise PlyError(f"line {lineno}: unsupported property type {parts[1]!r}")
                elements[-1][2].append((parts[2], _TYPES[parts[1]]))
            else:
                raise PlyError(f"line {lineno}: malformed property line")
        else:
            raise PlyError(f"line {lineno}: unknown header keyword {parts[0]!r}")
    if fmt is None:
        raise PlyError(f"line {lineno}: missing format line")
    return fmt, elements


def _read_vertices(fh, fmt, elements):
    for name, count, props in elements:
        is_list = any(isinstance(t, tuple) for _, t in props)
        if name == "vertex":
            if is_list:
                raise PlyError("list properties on vertex element are not supported")
            dtype = np.dtype([(p, "<" + t) for p, t in props])
            if fmt == "ascii":
                rows = []
                for i in range(count):
                    line = fh.readline()
                    if not line:
                        raise PlyError(f"truncated file: expected {count} vertices, got {i}")
                    vals = line.split()
                    if len(vals) != len(props):
                        raise PlyError(f"vertex {i}: expected {len(props)} values, got {len(vals)}")
                    rows.append(tuple(vals))
                return np.array(rows, dtype=dtype) if rows else np.zeros(0, dtype)
            data = fh.read(dtype.itemsize * count)
            if len(data) != dtype.itemsize * count:
                raise PlyError(f"truncated file: vertex block needs {dtype.itemsize * count} bytes, got {len(data)}")
            return np.frombuffer(data, dtype=dtype, count=count)
        # skip an element that precedes the vertices
        if fmt == "ascii":
            for _ in range(count):
                if not fh.readline():
                    raise PlyError(f"truncated file inside element {name!r}")
        elif is_list:
            raise PlyError(f"cannot skip binary list element {name!r} before vertices")
        else:
            size = np.dtype([(p, "<" + t) for p, t in props]).itemsize * count
            if len(fh.read(size)) != size:
                raise PlyError(f"truncated file inside element {name!r}")
    raise PlyError("no vertex element")


def load_ply(path) -> PointCloud:
    """Parse vertex positions, optional ``red/green/blue`` and optional label property."""
    with open(path, "rb") as fh:
        fmt, elements = _parse_header(fh)
        try:
            verts = _read_vertices(fh, fmt, elements)
        except ValueError as err:
            if isinstance(err, PlyError):
                raise
            raise PlyError(f"malformed vertex data: {err}") from None
    names = verts.dtype.names or ()
    for axis in "xyz":
        if axis not in names:
            raise PlyError(f"vertex element lacks property {axis!r}")
    pos = np.stack([verts[a].astype(np.float64) for a in "xyz"], axis=1)
    if all(c in names for c in ("red", "green", "blue")):
        cols = np.stack([verts[c] for c in ("red", "green", "blue")], axis=1)
        if np.issubdtype(cols.dtype, np.integer):
            scale = 255.0 if cols.dtype.itemsize == 1 else float(np.iinfo(cols.dtype).max)
            cols = cols.astype(np.float64) / scale
        colors = cols.astype(np.float64)
    else:
        colors = np.full((len(pos), 3), 0.5)
    label_name = next((n for n in _LABEL_NAMES if n in names), None)
    labels = verts[label_name].astype(np.int64) if label_name else np.full(len(pos), IGNORE_LABEL, np.int64)
    return PointCloud(pos, colors, labels)


def write_ply(path, pc: PointCloud, binary: bool = False) -> None:
    """Write x/y/z as double, colors as uchar and labels as int."""
    n = len(pc)
    dtype = np.dtype([("x", "<f8"), ("y", "<f8"), ("z", "<f8"),
                      ("red", "u1"), ("green", "u1"), ("blue", "u1"), ("label", "<i4")])
    rec = np.empty(n, dtype=dtype)
    for i, a in enumerate("xyz"):
        rec[a] = pc.positions[:, i]
    rgb = np.round(pc.colors * 255).astype(np.uint8)
    rec["red"], rec["green"], rec["blue"] = rgb[:, 0], rgb[:, 1], rgb[:, 2]
    rec["label"] = pc.labels
    header = [
        "ply",
        f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
        f"element vertex {n}",
        "property double x", "property double y", "property double z",
        "property uchar red", "property uchar green", "property uchar blue",
        "property int label",
        "end_header",
    ]
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(rec.tobytes())
        else:
            for x, y, z, r, g, b, lab in rec.tolist():
                fh.write(f"{x!r} {y!r} {z!r} {r} {g} {b} {lab}\n".encode())
    os.replace(tmp, path)
