"""Persistence: splat PLY, voxel bitsets, PFM radiance maps, OBJ meshes,
scene bundles, camera trajectories, and run manifests.

Binary formats round-trip bit-exactly and carry no timestamps, so
deterministic runs produce byte-identical artifacts.
"""

from __future__ import annotations

import json
import math
import os
import struct
import subprocess
from dataclasses import dataclass, field

import numpy as np

from . import sh
from .camera import Camera, TrajectorySpec
from .layout import VoxelGrid
from .scene import EnvironmentMap, SceneModel, SplatCloud, TriangleMesh

LSDV_MAGIC = b"LSDV"
LSDV_VERSION = 1


class FileFormatError(ValueError):
    """Base for structured-file load failures."""


class BadMagicError(FileFormatError):
    pass


class BadVersionError(FileFormatError):
    pass


class TruncatedFileError(FileFormatError):
    pass


class PropertyMismatchError(FileFormatError):
    pass


# ---------------------------------------------------------------------------
# splats: binary little-endian PLY


def _ply_property_names(num_bases: int):
    names = ["x", "y", "z", "tu_x", "tu_y", "tu_z", "tv_x", "tv_y", "tv_z",
             "su", "sv", "opacity"]
    names += [f"sh_{i}" for i in range(num_bases * 3)]
    return names


def save_splats(path, cloud: SplatCloud):
    n = len(cloud)
    nb = cloud.sh_coeffs.shape[1]
    names = _ply_property_names(nb)
    header = ["ply", "format binary_little_endian 1.0",
              f"element vertex {n}"]
    header += [f"property float {name}" for name in names]
    header.append("end_header")
    body = np.concatenate([
        cloud.centers.astype("<f4"),
        cloud.tangent_u.astype("<f4"),
        cloud.tangent_v.astype("<f4"),
        cloud.scales.astype("<f4"),
        cloud.opacities.astype("<f4")[:, None],
        cloud.sh_coeffs.astype("<f4").reshape(n, nb * 3),
    ], axis=1)
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(np.ascontiguousarray(body).tobytes())


def load_splats(path) -> SplatCloud:
    with open(path, "rb") as fh:
        data = fh.read()
    end_tag = b"end_header\n"
    pos = data.find(end_tag)
    if pos < 0:
        raise TruncatedFileError(f"{path}: missing end_header")
    lines = data[:pos].decode("ascii", errors="replace").splitlines()
    if not lines or lines[0] != "ply":
        raise BadMagicError(f"{path}: not a PLY file")
    if len(lines) < 2 or lines[1] != "format binary_little_endian 1.0":
        raise BadVersionError(f"{path}: unsupported PLY format "
                              f"{lines[1] if len(lines) > 1 else '<missing>'}")
    count = None
    props = []
    for line in lines[2:]:
        if line.startswith("comment"):
            continue
        if line.startswith("element vertex "):
            count = int(line.split()[-1])
        elif line.startswith("element "):
            raise PropertyMismatchError(f"{path}: unexpected {line!r}")
        elif line.startswith("property "):
            parts = line.split()
            if parts[1] != "float":
                raise PropertyMismatchError(
                    f"{path}: property {parts[-1]} is {parts[1]}, "
                    "expected float")
            props.append(parts[2])
    if count is None:
        raise PropertyMismatchError(f"{path}: missing vertex element")
    base = _ply_property_names(0)
    if props[:len(base)] != base:
        raise PropertyMismatchError(
            f"{path}: vertex properties {props[:len(base)]} do not match "
            f"{base}")
    sh_names = props[len(base):]
    if len(sh_names) % 3 != 0 or \
            sh_names != [f"sh_{i}" for i in range(len(sh_names))]:
        raise PropertyMismatchError(f"{path}: malformed color properties")
    nb = len(sh_names) // 3
    sh.degree_for_bases(nb)  # rejects counts that are not (L+1)^2

    width = len(props)
    body = data[pos + len(end_tag):]
    need = count * width * 4
    if len(body) < need:
        raise TruncatedFileError(
            f"{path}: body holds {len(body)} bytes, header promises {need}")
    flat = np.frombuffer(body[:need], dtype="<f4").reshape(count, width)
    return SplatCloud(flat[:, 0:3], flat[:, 3:6], flat[:, 6:9],
                      flat[:, 9:11], flat[:, 11],
                      flat[:, 12:].reshape(count, nb, 3),
                      dtype=np.float32)


# ---------------------------------------------------------------------------
# voxels: LSDV bitset


def save_voxels(path, grid: VoxelGrid):
    nx, ny, nz = grid.dims
    head = struct.pack("<4sB", LSDV_MAGIC, LSDV_VERSION)
    head += struct.pack("<3d", *grid.origin)
    head += struct.pack("<d", grid.voxel_size)
    head += struct.pack("<3I", nx, ny, nz)
    bits = np.packbits(grid.occupancy.reshape(-1).astype(np.uint8))
    with open(path, "wb") as fh:
        fh.write(head)
        fh.write(bits.tobytes())


def load_voxels(path) -> VoxelGrid:
    with open(path, "rb") as fh:
        data = fh.read()
    head_len = 5 + 24 + 8 + 12
    if len(data) < 5:
        raise TruncatedFileError(f"{path}: shorter than the magic header")
    magic, version = struct.unpack_from("<4sB", data)
    if magic != LSDV_MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != LSDV_VERSION:
        raise BadVersionError(f"{path}: voxel format version {version}, "
                              f"expected {LSDV_VERSION}")
    if len(data) < head_len:
        raise TruncatedFileError(f"{path}: truncated header")
    origin = struct.unpack_from("<3d", data, 5)
    voxel = struct.unpack_from("<d", data, 29)[0]
    dims = struct.unpack_from("<3I", data, 37)
    total = dims[0] * dims[1] * dims[2]
    need = math.ceil(total / 8)
    body = data[head_len:]
    if len(body) < need:
        raise TruncatedFileError(
            f"{path}: occupancy holds {len(body)} bytes, need {need}")
    if len(body) > need:
        raise PropertyMismatchError(f"{path}: {len(body) - need} trailing "
                                    "bytes after occupancy")
    occ = np.unpackbits(np.frombuffer(body, dtype=np.uint8), count=total)
    return VoxelGrid(np.array(origin), voxel,
                     occ.reshape(dims).astype(bool))


# ---------------------------------------------------------------------------
# env maps and float frames: PFM


def save_pfm(path, image: np.ndarray):
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected H x W x 3 image, got {image.shape}")
    h, w = image.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"PF\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image[::-1]).astype("<f4").tobytes())


def load_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(b"\n", 3)
    if len(parts) < 4:
        raise TruncatedFileError(f"{path}: incomplete PFM header")
    magic, dims, scale_s, body = parts
    if magic not in (b"PF", b"Pf"):
        raise BadMagicError(f"{path}: bad PFM magic {magic!r}")
    if magic == b"Pf":
        raise PropertyMismatchError(f"{path}: grayscale PFM, expected color")
    try:
        w, h = (int(v) for v in dims.split())
        scale = float(scale_s)
    except ValueError as exc:
        raise FileFormatError(f"{path}: malformed PFM header") from exc
    if scale == 0.0:
        raise FileFormatError(f"{path}: zero PFM scale")
    dt = "<f4" if scale < 0.0 else ">f4"
    need = w * h * 3 * 4
    if len(body) < need:
        raise TruncatedFileError(
            f"{path}: pixel data holds {len(body)} bytes, need {need}")
    img = np.frombuffer(body[:need], dtype=dt).reshape(h, w, 3)
    img = img[::-1].astype(np.float32)  # PFM rows run bottom to top
    if abs(scale) != 1.0:
        img = img * np.float32(abs(scale))
    return img


def save_envmap(path, env: EnvironmentMap):
    save_pfm(path, env.pixels)


def load_envmap(path) -> EnvironmentMap:
    return EnvironmentMap(load_pfm(path))


# ---------------------------------------------------------------------------
# meshes: ASCII OBJ


def save_mesh_obj(path, mesh: TriangleMesh):
    out = []
    for v in mesh.vertices:
        out.append(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}")
    for f in mesh.faces:
        out.append(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(out))
        if out:
            fh.write("\n")


def load_mesh_obj(path) -> TriangleMesh:
    verts = []
    faces = []
    with open(path, "r", encoding="ascii", errors="replace") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            try:
                if parts[0] == "v":
                    verts.append([float(p) for p in parts[1:4]])
                elif parts[0] == "f":
                    idx = [int(p.split("/")[0]) for p in parts[1:]]
                    if len(idx) != 3:
                        raise FileFormatError(
                            f"{path}:{lineno}: only triangles supported")
                    if min(idx) < 1:
                        raise FileFormatError(
                            f"{path}:{lineno}: indices must be positive")
                    faces.append([i - 1 for i in idx])
            except (ValueError, IndexError) as exc:
                raise FileFormatError(
                    f"{path}:{lineno}: malformed OBJ line {line!r}") from exc
    if not verts:
        return TriangleMesh.empty()
    return TriangleMesh(np.array(verts),
                        np.array(faces, dtype=np.int64).reshape(-1, 3))


# ---------------------------------------------------------------------------
# scene bundles


def save_scene_bundle(path, scene: SceneModel):
    """Directory bundle: splats.ply + env.pfm + proxy.obj + meta.json."""
    os.makedirs(path, exist_ok=True)
    save_splats(os.path.join(path, "splats.ply"), scene.cloud)
    save_envmap(os.path.join(path, "env.pfm"), scene.env)
    save_mesh_obj(os.path.join(path, "proxy.obj"), scene.proxy)
    meta = {"splat_cap": scene.splat_cap, "metadata": scene.metadata}
    with open(os.path.join(path, "meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_scene_bundle(path) -> SceneModel:
    cloud = load_splats(os.path.join(path, "splats.ply"))
    env = load_envmap(os.path.join(path, "env.pfm"))
    proxy_path = os.path.join(path, "proxy.obj")
    proxy = load_mesh_obj(proxy_path) if os.path.exists(proxy_path) \
        else TriangleMesh.empty()
    meta_path = os.path.join(path, "meta.json")
    cap_kw = {}
    metadata = {}
    if os.path.exists(meta_path):
        with open(meta_path, "r", encoding="utf-8") as fh:
            meta = json.load(fh)
        metadata = meta.get("metadata", {})
        if "splat_cap" in meta:
            cap_kw["splat_cap"] = int(meta["splat_cap"])
    return SceneModel(cloud, env, proxy=proxy, metadata=metadata, **cap_kw)


def persist_roundtrip(kind: str, path, value):
    """Save then reload one artifact; the reload is returned for checking."""
    savers = {"splats": (save_splats, load_splats),
              "voxels": (save_voxels, load_voxels),
              "envmap": (save_envmap, load_envmap),
              "mesh": (save_mesh_obj, load_mesh_obj)}
    if kind not in savers:
        raise ValueError(f"unknown artifact kind {kind!r}")
    save, load = savers[kind]
    save(path, value)
    return load(path)


# ---------------------------------------------------------------------------
# trajectories


def _matrix_to_quat(rot: np.ndarray):
    m = np.asarray(rot, dtype=np.float64)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0.0:
        s = math.sqrt(tr + 1.0) * 2.0
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s,
             (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s,
             (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] >= m[2, 2]:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s,
             0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s,
             (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    return q


def _quat_to_matrix(q):
    w, x, y, z = (float(v) for v in q)
    n = math.sqrt(w * w + x * x + y * y + z * z)
    if n == 0.0:
        raise ValueError("zero quaternion")
    w, x, y, z = w / n, x / n, y / n, z / n
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def save_trajectory(path, spec: TrajectorySpec):
    poses = []
    for cam in spec.cameras:
        poses.append({
            "position": [float(v) for v in cam.position],
            "quaternion": _matrix_to_quat(cam.rotation),
            "fov_y": float(cam.fov_y),
            "width": int(cam.width), "height": int(cam.height),
            "near": float(cam.near), "far": float(cam.far),
        })
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"fps": spec.fps, "poses": poses}, fh, indent=2)
        fh.write("\n")


def load_trajectory(path) -> TrajectorySpec:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FileFormatError(f"{path}: not valid JSON: {exc}") from exc
    poses = data.get("poses")
    if not poses:
        raise FileFormatError(f"{path}: trajectory has no poses")
    cams = []
    for i, pose in enumerate(poses):
        try:
            kwargs = dict(fov_y=float(pose.get("fov_y", math.radians(60))),
                          width=int(pose.get("width", 256)),
                          height=int(pose.get("height", 256)),
                          near=float(pose.get("near", 0.05)),
                          far=float(pose.get("far", 1000.0)))
            position = np.asarray(pose["position"], dtype=np.float64)
            if "quaternion" in pose:
                cams.append(Camera(position,
                                   _quat_to_matrix(pose["quaternion"]),
                                   **kwargs))
            elif "look_at" in pose:
                cams.append(Camera.look_at(
                    position, np.asarray(pose["look_at"], dtype=np.float64),
                    up=pose.get("up", (0.0, 0.0, 1.0)), **kwargs))
            else:
                raise KeyError("quaternion or look_at")
        except (KeyError, ValueError, TypeError) as exc:
            raise FileFormatError(f"{path}: pose {i} invalid: {exc}") from exc
    return TrajectorySpec(cams, fps=float(data.get("fps", 10.0)))


# ---------------------------------------------------------------------------
# run manifests


def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=10)
        if out.returncode == 0:
            return out.stdout.strip()
    except (OSError, subprocess.TimeoutExpired):
        pass
    return "unknown"


@dataclass
class RunManifest:
    config: dict
    seed: int
    git: str = field(default_factory=git_describe)
    loss_log: str | None = None
    checkpoints: list = field(default_factory=list)
    outputs: list = field(default_factory=list)

    def validate(self, base_dir="."):
        for rel in ([self.loss_log] if self.loss_log else []) \
                + list(self.checkpoints) + list(self.outputs):
            full = rel if os.path.isabs(rel) else os.path.join(base_dir, rel)
            if not os.path.exists(full):
                raise ValueError(f"manifest references missing file {rel}")

    def save(self, path):
        self.validate(os.path.dirname(os.path.abspath(path)))
        payload = {"config": self.config, "seed": self.seed, "git": self.git,
                   "loss_log": self.loss_log,
                   "checkpoints": list(self.checkpoints),
                   "outputs": list(self.outputs)}
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")


def load_manifest(path) -> RunManifest:
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    return RunManifest(config=data.get("config", {}),
                       seed=int(data.get("seed", 0)),
                       git=data.get("git", "unknown"),
                       loss_log=data.get("loss_log"),
                       checkpoints=list(data.get("checkpoints", [])),
                       outputs=list(data.get("outputs", [])))
