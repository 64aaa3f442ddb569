"""TUM trajectory and PLY mesh readers and writers."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from loguru import logger

from fgo_slam.errors import LengthMismatchError, MissingFileError
from fgo_slam.geometry import Array, RigidPose, matrix_to_quat
from fgo_slam.surface_extraction import TriangleMesh

TUM_COLUMNS = ["timestamp", "tx", "ty", "tz", "qx", "qy", "qz", "qw"]


@dataclass
class Trajectory:
    """Camera-to-world poses as stored in a TUM file.

    Quaternions are kept as read so a read/write cycle is exact.
    """

    timestamps: Array  # (N,)
    positions: Array  # (N, 3) camera centers
    quaternions: Array  # (N, 4) camera-to-world rotation, (x, y, z, w)

    def __len__(self) -> int:
        return int(len(self.timestamps))

    @classmethod
    def from_poses(cls, timestamps: Sequence[float], poses: Sequence[RigidPose]) -> Trajectory:
        """Build from world-to-camera poses."""
        if len(timestamps) != len(poses):
            raise LengthMismatchError(f"{len(timestamps)} timestamps for {len(poses)} poses")
        positions = np.array([p.camera_center() for p in poses]).reshape(-1, 3)
        quats = []
        for p in poses:
            w, x, y, z = matrix_to_quat(p.rotation.T)
            quats.append([x, y, z, w])
        return cls(np.asarray(timestamps, dtype=np.float64), positions, np.array(quats).reshape(-1, 4))

    def poses(self) -> List[RigidPose]:
        """World-to-camera poses."""
        out = []
        for c, (x, y, z, w) in zip(self.positions, self.quaternions):
            cam_to_world = RigidPose.from_quaternion([w, x, y, z], c)
            out.append(cam_to_world.inverse())
        return out


def write_tum(path: Union[str, Path], trajectory: Trajectory) -> Path:
    """Write ``timestamp tx ty tz qx qy qz qw`` lines with shortest round-trip floats."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = np.column_stack([trajectory.timestamps, trajectory.positions, trajectory.quaternions])
    with path.open("w", encoding="utf-8") as fh:
        fh.write("# " + " ".join(TUM_COLUMNS) + "\n")
        for row in rows:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")
    logger.debug(f"Wrote {len(trajectory)} poses to {path}")
    return path


def read_tum(path: Union[str, Path]) -> Trajectory:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"trajectory not found: {path}")
    try:
        df = pd.read_csv(
            path, sep=r"\s+", comment="#", header=None, names=TUM_COLUMNS, dtype=np.float64,
            float_precision="round_trip",
        )
    except pd.errors.EmptyDataError:
        df = pd.DataFrame(columns=TUM_COLUMNS, dtype=np.float64)
    values = df.to_numpy(dtype=np.float64)
    logger.debug(f"Read {len(values)} poses from {path}")
    return Trajectory(values[:, 0].copy(), values[:, 1:4].copy(), values[:, 4:8].copy())


# ----------------------------------------------------------------------------
# PLY
# ----------------------------------------------------------------------------


def _ply_header(mesh: TriangleMesh, binary: bool, with_normals: bool) -> str:
    lines = [
        "ply",
        f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
        f"element vertex {mesh.num_vertices}",
        "property float x",
        "property float y",
        "property float z",
    ]
    if with_normals:
        lines += ["property float nx", "property float ny", "property float nz"]
    lines += [
        f"element face {mesh.num_triangles}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    return "\n".join(lines) + "\n"


def _vertex_block(mesh: TriangleMesh, with_normals: bool) -> np.ndarray:
    columns = [mesh.vertices]
    if with_normals and mesh.normals is not None:
        columns.append(mesh.normals)
    return np.concatenate(columns, axis=1).astype("<f4")


def write_ply(path: Union[str, Path], mesh: TriangleMesh, binary: bool = True) -> Path:
    """Write float32 vertices (plus normals when present) and uchar/int32 faces."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with_normals = mesh.normals is not None
    vertices = _vertex_block(mesh, with_normals)
    faces = np.asarray(mesh.triangles, dtype="<i4").reshape(-1, 3)
    with path.open("wb") as fh:
        fh.write(_ply_header(mesh, binary, with_normals).encode("ascii"))
        if binary:
            fh.write(vertices.tobytes())
            face_dtype = np.dtype([("n", "u1"), ("idx", "<i4", (3,))])
            packed = np.empty(len(faces), dtype=face_dtype)
            packed["n"] = 3
            packed["idx"] = faces
            fh.write(packed.tobytes())
        else:
            for row in vertices:
                fh.write((" ".join(repr(float(v)) for v in row) + "\n").encode("ascii"))
            for a, b, c in faces:
                fh.write(f"3 {a} {b} {c}\n".encode("ascii"))
    logger.debug(f"Wrote {mesh.num_vertices} vertices / {mesh.num_triangles} faces to {path}")
    return path


@dataclass
class _PlyHeader:
    binary: bool
    n_vertices: int
    n_faces: int
    vertex_properties: List[str]
    size: int


def _parse_header(data: bytes) -> _PlyHeader:
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise ValueError("not a PLY file")
    size = end + len(b"end_header\n")
    binary = True
    n_vertices = n_faces = 0
    props: List[str] = []
    element: Optional[str] = None
    for line in data[:end].decode("ascii").splitlines()[1:]:
        parts = line.split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "format":
            if parts[1] not in ("ascii", "binary_little_endian"):
                raise ValueError(f"unsupported PLY format {parts[1]}")
            binary = parts[1] == "binary_little_endian"
        elif parts[0] == "element":
            element = parts[1]
            if element == "vertex":
                n_vertices = int(parts[2])
            elif element == "face":
                n_faces = int(parts[2])
        elif parts[0] == "property" and element == "vertex":
            if parts[1] != "float":
                raise ValueError(f"unsupported vertex property type {parts[1]}")
            props.append(parts[2])
    return _PlyHeader(binary, n_vertices, n_faces, props, size)


def _read_binary_faces(body: bytes, offset: int, n_faces: int) -> np.ndarray:
    face_dtype = np.dtype([("n", "u1"), ("idx", "<i4", (3,))])
    if len(body) - offset == face_dtype.itemsize * n_faces:
        packed = np.frombuffer(body, dtype=face_dtype, count=n_faces, offset=offset)
        if np.all(packed["n"] == 3):
            return packed["idx"].astype(np.int64)
    faces = np.empty((n_faces, 3), dtype=np.int64)
    for k in range(n_faces):
        (count,) = struct.unpack_from("<B", body, offset)
        if count != 3:
            raise ValueError(f"face {k} has {count} vertices, only triangles are supported")
        faces[k] = struct.unpack_from("<3i", body, offset + 1)
        offset += 1 + 4 * count
    return faces


def read_ply(path: Union[str, Path]) -> TriangleMesh:
    """Read a mesh written by :func:`write_ply` (ascii or binary little-endian)."""
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"mesh not found: {path}")
    data = path.read_bytes()
    header = _parse_header(data)
    n_props = len(header.vertex_properties)
    body = data[header.size:]
    if header.binary:
        vertex_bytes = 4 * n_props * header.n_vertices
        block = np.frombuffer(body[:vertex_bytes], dtype="<f4").reshape(header.n_vertices, n_props)
        faces = _read_binary_faces(body, vertex_bytes, header.n_faces)
    else:
        lines = body.decode("ascii").split("\n")
        block = np.array(
            [[np.float32(v) for v in lines[i].split()] for i in range(header.n_vertices)], dtype=np.float32
        ).reshape(header.n_vertices, n_props)
        faces = np.array(
            [[int(v) for v in lines[header.n_vertices + k].split()[1:4]] for k in range(header.n_faces)],
            dtype=np.int64,
        ).reshape(header.n_faces, 3)
    block = block.astype(np.float32)
    normals = block[:, 3:6].astype(np.float64) if n_props >= 6 else None
    return TriangleMesh(block[:, :3].astype(np.float64), faces, normals)
