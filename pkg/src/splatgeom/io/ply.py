"""PLY codecs: Gaussian clouds with splatting-conventional properties, plus meshes.

Gaussian files store per-vertex ``x y z``, DC color features ``f_dc_0..2``,
``opacity`` as a logit, ``scale_0..2`` as logs, and the ``rot_0..3``
quaternion, binary little-endian. The reader keys properties by name, so
files with extra fields (normals, higher-order features) from other
splatting tools load fine.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..scene import GaussianCloud
from .pfm import CodecError

GAUSSIAN_PROPERTIES = (
    "x", "y", "z",
    "f_dc_0", "f_dc_1", "f_dc_2",
    "opacity",
    "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
)


def save_gaussian_ply(path, cloud: GaussianCloud) -> None:
    n = len(cloud)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {name}" for name in GAUSSIAN_PROPERTIES]
    header.append("end_header")
    table = np.empty((n, len(GAUSSIAN_PROPERTIES)), dtype="<f4")
    table[:, 0:3] = cloud.centers.detach().numpy()
    table[:, 3:6] = cloud.features_dc.detach().numpy()
    table[:, 6] = cloud.logit_opacities.detach().numpy()
    table[:, 7:10] = cloud.log_scales.detach().numpy()
    table[:, 10:14] = cloud.rotations.detach().numpy()
    Path(path).write_bytes("\n".join(header).encode("ascii") + b"\n" + table.tobytes())


def _parse_ply_header(buf: bytes) -> tuple[int, list[str], int]:
    """Returns (vertex count, property names, payload offset)."""
    end = buf.find(b"end_header\n")
    if end < 0:
        raise CodecError("missing end_header", len(buf))
    offset = end + len(b"end_header\n")
    lines = buf[:end].decode("ascii", errors="replace").splitlines()
    if not lines or lines[0].strip() != "ply":
        raise CodecError("not a PLY file", 0)
    count = None
    props: list[str] = []
    fmt = None
    in_vertex = False
    for line in lines[1:]:
        parts = line.split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                count = int(parts[2])
        elif parts[0] == "property" and in_vertex:
            if parts[1] != "float":
                raise CodecError(f"unsupported property type {parts[1]!r}", 0)
            props.append(parts[2])
    if fmt != "binary_little_endian":
        raise CodecError(f"unsupported PLY format {fmt!r}", 0)
    if count is None:
        raise CodecError("no vertex element", 0)
    return count, props, offset


def load_gaussian_ply(path) -> GaussianCloud:
    buf = Path(path).read_bytes()
    count, props, offset = _parse_ply_header(buf)
    missing = [p for p in GAUSSIAN_PROPERTIES if p not in props]
    if missing:
        raise CodecError(f"missing Gaussian properties {missing}", offset)
    expected = count * len(props) * 4
    if len(buf) - offset < expected:
        raise CodecError(
            f"truncated payload: expected {expected} bytes, found {len(buf) - offset}",
            len(buf))
    table = np.frombuffer(buf, dtype="<f4", count=count * len(props),
                          offset=offset).reshape(count, len(props))
    col = {name: table[:, i].astype(np.float64) for i, name in enumerate(props)}
    return GaussianCloud(
        centers=np.stack([col["x"], col["y"], col["z"]], axis=1),
        log_scales=np.stack([col["scale_0"], col["scale_1"], col["scale_2"]], axis=1),
        rotations=np.stack([col["rot_0"], col["rot_1"], col["rot_2"], col["rot_3"]], axis=1),
        logit_opacities=col["opacity"],
        features_dc=np.stack([col["f_dc_0"], col["f_dc_1"], col["f_dc_2"]], axis=1),
    )


def save_mesh_ply(path, vertices: np.ndarray, faces: np.ndarray, binary: bool = True) -> None:
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    header = [
        "ply",
        "format binary_little_endian 1.0" if binary else "format ascii 1.0",
        f"element vertex {len(vertices)}",
        "property float x", "property float y", "property float z",
        f"element face {len(faces)}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    out = "\n".join(header).encode("ascii") + b"\n"
    if binary:
        out += vertices.astype("<f4").tobytes()
        face_block = np.empty((len(faces), 13), dtype=np.uint8)
        face_block[:, 0] = 3
        face_block[:, 1:] = faces.astype("<i4").view(np.uint8).reshape(len(faces), 12)
        out += face_block.tobytes()
    else:
        rows = [" ".join(repr(float(c)) for c in v) for v in vertices]
        rows += ["3 " + " ".join(str(int(i)) for i in f) for f in faces]
        out += ("\n".join(rows) + "\n").encode("ascii")
    Path(path).write_bytes(out)


def save_mesh_obj(path, vertices: np.ndarray, faces: np.ndarray) -> None:
    lines = [f"v {v[0]!r} {v[1]!r} {v[2]!r}" for v in np.asarray(vertices, dtype=np.float64)]
    lines += [f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}" for f in np.asarray(faces, dtype=np.int64)]
    Path(path).write_text("\n".join(lines) + "\n")
