"""Binary little-endian PLY persistence using the common 3DGS property names.

Values are written as float32, so a cloud survives ``load_ply(save_ply(...))``
bit-exactly once its parameters are float32-representable (any cloud that has
been through one save/load cycle is).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import FormatError
from .gaussians import GaussianCloud

PROPERTIES = (
    ["x", "y", "z", "opacity"]
    + [f"scale_{i}" for i in range(3)]
    + [f"rot_{i}" for i in range(4)]
    + [f"f_dc_{i}" for i in range(3)]
)

_PLY_TYPES = {
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
    "uchar": "u1", "uint8": "u1", "char": "i1", "int8": "i1",
    "ushort": "u2", "uint16": "u2", "short": "i2", "int16": "i2",
    "uint": "u4", "uint32": "u4", "int": "i4", "int32": "i4",
}


def save_ply(cloud: GaussianCloud, path) -> None:
    n = len(cloud)
    data = np.empty(n, dtype=[(name, "<f4") for name in PROPERTIES])
    columns = np.concatenate(
        [cloud.means, cloud.opacity_logits, cloud.log_scales, cloud.rotations, cloud.colors], axis=1
    )
    for i, name in enumerate(PROPERTIES):
        data[name] = columns[:, i]
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {name}" for name in PROPERTIES]
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(data.tobytes())


def _read_header(raw: bytes):
    marker = b"end_header\n"
    end = raw.find(marker)
    if not raw.startswith(b"ply\n") or end < 0:
        raise FormatError("not a PLY file (missing 'ply' magic or end_header)")
    lines = raw[:end].decode("ascii", errors="replace").splitlines()
    fmt = None
    elements = []  # (name, count, [(prop, dtype)])
    for line in lines[1:]:
        parts = line.split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            fmt = parts[1] if len(parts) > 1 else None
        elif parts[0] == "element":
            if len(parts) != 3:
                raise FormatError(f"malformed element line: {line!r}")
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise FormatError("property before any element")
            if len(parts) != 3 or parts[1] not in _PLY_TYPES:
                raise FormatError(f"unsupported property line: {line!r}")
            elements[-1][2].append((parts[2], _PLY_TYPES[parts[1]]))
        else:
            raise FormatError(f"unexpected header line: {line!r}")
    if fmt != "binary_little_endian":
        raise FormatError(f"unsupported PLY format {fmt!r}")
    return elements, end + len(marker)


def load_ply(path) -> GaussianCloud:
    raw = Path(path).read_bytes()
    if not raw:
        raise FormatError("empty file")
    elements, offset = _read_header(raw)
    if not elements or elements[0][0] != "vertex":
        raise FormatError("first element must be 'vertex'")
    _, count, props = elements[0]
    dtype = np.dtype([(name, "<" + t) for name, t in props])
    names = [p[0] for p in props]
    for name in PROPERTIES:
        if name not in names:
            raise FormatError(f"missing property {name}")
    need = count * dtype.itemsize
    if len(raw) - offset < need:
        raise FormatError(
            f"truncated payload: expected {need} bytes of vertex data, found {len(raw) - offset}"
        )
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)

    def cols(keys):
        return np.stack([data[k].astype(np.float64) for k in keys], axis=1).reshape(count, len(keys))

    return GaussianCloud(
        means=cols(["x", "y", "z"]),
        rotations=cols([f"rot_{i}" for i in range(4)]),
        log_scales=cols([f"scale_{i}" for i in range(3)]),
        opacity_logits=cols(["opacity"]),
        colors=cols([f"f_dc_{i}" for i in range(3)]),
    )
