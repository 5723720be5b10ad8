"""Minimal PLY point-cloud reader/writer (ASCII and binary little-endian).

Only the ``vertex`` element is read; its ``x``, ``y`` and ``z`` properties are
returned as float64. Clouds are written as 32-bit floats.
"""

import numpy as np

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


class PlyError(ValueError):
    pass


def write_ply(path, points, binary=False):
    pts = np.asarray(points, dtype=np.float32)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise PlyError(f"points must have shape (N, 3), got {pts.shape}")
    fmt = "binary_little_endian" if binary else "ascii"
    header = (
        "ply\n"
        f"format {fmt} 1.0\n"
        f"element vertex {len(pts)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "end_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if binary:
            fh.write(pts.astype("<f4").tobytes())
        else:
            # %.9g round-trips every float32 exactly.
            lines = "\n".join(" ".join(f"{v:.9g}" for v in row) for row in pts.tolist())
            fh.write((lines + "\n").encode("ascii") if len(pts) else b"")


def _parse_header(fh):
    if fh.readline().strip() != b"ply":
        raise PlyError("not a PLY file")
    fmt = None
    elements = []
    while True:
        line = fh.readline()
        if not line:
            raise PlyError("unexpected end of header")
        tokens = line.decode("ascii").split()
        if not tokens or tokens[0] in ("comment", "obj_info"):
            continue
        if tokens[0] == "end_header":
            break
        if tokens[0] == "format":
            fmt = tokens[1]
        elif tokens[0] == "element":
            elements.append((tokens[1], int(tokens[2]), []))
        elif tokens[0] == "property":
            if not elements:
                raise PlyError("property before element")
            if tokens[1] == "list":
                raise PlyError("list properties are not supported")
            if tokens[1] not in _PLY_TYPES:
                raise PlyError(f"unknown property type {tokens[1]!r}")
            elements[-1][2].append((tokens[2], _PLY_TYPES[tokens[1]]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise PlyError(f"unsupported PLY format {fmt!r}")
    return fmt, elements


def read_ply(path):
    """Return the vertex positions of a PLY file as an (N, 3) float64 array."""
    with open(path, "rb") as fh:
        fmt, elements = _parse_header(fh)
        body = fh.read()
    offset = 0
    lines = body.decode("ascii").splitlines() if fmt == "ascii" else None
    for name, count, props in elements:
        if fmt == "ascii":
            rows = lines[offset:offset + count]
            offset += count
            if name != "vertex":
                continue
            if len(rows) != count:
                raise PlyError("truncated vertex data")
            table = np.array([r.split() for r in rows], dtype=np.float64).reshape(count, len(props))
            # round each column to its declared type so float32 data reads back exactly
            for j, (_, t) in enumerate(props):
                table[:, j] = table[:, j].astype(t)
            cols = [p[0] for p in props]
        else:
            dtype = np.dtype([(p, "<" + t) for p, t in props])
            nbytes = dtype.itemsize * count
            if name != "vertex":
                offset += nbytes
                continue
            if len(body) < offset + nbytes:
                raise PlyError("truncated vertex data")
            rec = np.frombuffer(body, dtype=dtype, count=count, offset=offset)
            cols = list(dtype.names)
            table = np.stack([rec[c].astype(np.float64) for c in cols], axis=1) if count else np.zeros((0, len(cols)))
        try:
            idx = [cols.index(c) for c in ("x", "y", "z")]
        except ValueError as exc:
            raise PlyError("vertex element lacks x/y/z") from exc
        return np.ascontiguousarray(table[:, idx])
    raise PlyError("no vertex element")
