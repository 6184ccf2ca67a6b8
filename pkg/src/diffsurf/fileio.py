"""File formats: scene JSON, ASCII PLY, PFM, PNG, transient binaries, CSVs.

All writes are atomic (write to a temp file in the target directory, then
rename) so partially-written artifacts never appear under their final name.
Depth/normal maps use 32-bit float PFM and must round-trip bit-exactly.
"""

from __future__ import annotations

import csv
import json
import os
import struct
import tempfile
from contextlib import contextmanager
from pathlib import Path

import numpy as np
from PIL import Image

from .core import Scene, sh_to_color

TRANSIENT_MAGIC = b"TRNS"


class DataError(Exception):
    """Malformed or missing input data (CLI exit code 3)."""


@contextmanager
def atomic_write(path, mode: str = "w"):
    """Write to `path` atomically via a sibling temp file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- scene JSON ------------------------------------------------------------------


def save_scene_json(scene: Scene, path) -> None:
    """Full-fidelity scene save: flat per-surfel arrays, exact float round-trip."""
    doc = {
        "sh_degree": scene.sh_degree,
        "n_surfels": scene.n_surfels,
        "positions": scene.positions.tolist(),
        "rotations": scene.rotations.tolist(),
        "scales": scene.scales.tolist(),
        "opacities": scene.opacities.tolist(),
        "color_coeffs": scene.color_coeffs.reshape(scene.n_surfels, -1).tolist(),
    }
    with atomic_write(path) as fh:
        json.dump(doc, fh)


def load_scene_json(path) -> Scene:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read scene file {path}: {e}") from e
    try:
        n = int(doc["n_surfels"])
        bands = (int(doc["sh_degree"]) + 1) ** 2
        return Scene(
            np.asarray(doc["positions"], dtype=np.float64),
            np.asarray(doc["rotations"], dtype=np.float64),
            np.asarray(doc["scales"], dtype=np.float64),
            np.asarray(doc["opacities"], dtype=np.float64),
            np.asarray(doc["color_coeffs"], dtype=np.float64).reshape(n, bands, 3),
        )
    except (KeyError, ValueError) as e:
        raise DataError(f"malformed scene file {path}: {e}") from e


# -- PLY --------------------------------------------------------------------------


def export_ply(scene: Scene, path) -> None:
    """Oriented point cloud: position, normal (rotation's third column), opacity, color."""
    normals = scene.normals()
    colors = sh_to_color(scene.color_coeffs, np.array([0.0, 0.0, 1.0]))
    colors_u8 = (np.clip(colors, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    with atomic_write(path) as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {scene.n_surfels}\n")
        for prop in ("x", "y", "z", "nx", "ny", "nz"):
            fh.write(f"property float {prop}\n")
        fh.write("property float opacity\n")
        for prop in ("red", "green", "blue"):
            fh.write(f"property uchar {prop}\n")
        fh.write("end_header\n")
        for i in range(scene.n_surfels):
            p, nrm = scene.positions[i], normals[i]
            fh.write(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g} "
                     f"{nrm[0]:.9g} {nrm[1]:.9g} {nrm[2]:.9g} "
                     f"{scene.opacities[i]:.9g} "
                     f"{colors_u8[i, 0]} {colors_u8[i, 1]} {colors_u8[i, 2]}\n")


def read_ply(path) -> dict:
    """Parse the ASCII PLY written by export_ply into arrays (for tests/tools)."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != "ply":
        raise DataError(f"{path} is not a PLY file")
    n, props, i = 0, [], 1
    while i < len(lines) and lines[i] != "end_header":
        parts = lines[i].split()
        if parts[:2] == ["element", "vertex"]:
            n = int(parts[2])
        elif parts[0] == "property":
            props.append(parts[2])
        i += 1
    rows = [lines[i + 1 + k].split() for k in range(n)]
    data = np.asarray(rows, dtype=np.float64)
    cols = {name: data[:, j] for j, name in enumerate(props)}
    return {
        "positions": np.stack([cols["x"], cols["y"], cols["z"]], axis=1),
        "normals": np.stack([cols["nx"], cols["ny"], cols["nz"]], axis=1),
        "opacities": cols["opacity"],
        "colors": np.stack([cols["red"], cols["green"], cols["blue"]], axis=1).astype(np.uint8),
    }


# -- PFM (32-bit float images, bottom-up rows, negative scale = little-endian) -----


def write_pfm(path, array: np.ndarray) -> None:
    arr = np.asarray(array, dtype=np.float32)
    if arr.ndim == 2:
        header = "Pf"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        header = "PF"
    else:
        raise DataError(f"PFM supports HxW or HxWx3, got {arr.shape}")
    with atomic_write(path, "wb") as fh:
        fh.write(f"{header}\n{arr.shape[1]} {arr.shape[0]}\n-1.0\n".encode("ascii"))
        fh.write(np.flipud(arr).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline().strip()
        if header not in (b"Pf", b"PF"):
            raise DataError(f"{path} is not a PFM file")
        width, height = map(int, fh.readline().split())
        scale = float(fh.readline())
        count = width * height * (3 if header == b"PF" else 1)
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(fh.read(count * 4), dtype=dtype, count=count)
    shape = (height, width, 3) if header == b"PF" else (height, width)
    return np.flipud(data.reshape(shape)).astype(np.float32)


# -- PNG ----------------------------------------------------------------------------


def write_png(path, image: np.ndarray) -> None:
    """8-bit PNG from a float image in [0, 1] (values clamped, then rounded)."""
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    u8 = (arr * 255.0).round().astype(np.uint8)
    with atomic_write(path, "wb") as fh:
        Image.fromarray(u8).save(fh, format="PNG")


def read_png(path) -> np.ndarray:
    """Float image in [0, 1] from an 8-bit PNG."""
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("RGB") if img.mode != "L" else img)
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read PNG {path}: {e}") from e
    return arr.astype(np.float64) / 255.0


# -- transient binaries ----------------------------------------------------------------


def write_transient_bin(path, histograms: np.ndarray) -> None:
    """16-byte header (magic, N_x, N_y, N_t) + float32 LE array [N_y][N_x][N_t]."""
    h = np.asarray(histograms, dtype="<f4")
    if h.ndim != 3:
        raise DataError(f"histograms must be (ny, nx, nt), got {h.shape}")
    ny, nx, nt = h.shape
    with atomic_write(path, "wb") as fh:
        fh.write(TRANSIENT_MAGIC + struct.pack("<III", nx, ny, nt))
        fh.write(h.tobytes())


def read_transient_bin(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) != 16 or header[:4] != TRANSIENT_MAGIC:
            raise DataError(f"{path} is not a transient histogram file")
        nx, ny, nt = struct.unpack("<III", header[4:])
        data = np.frombuffer(fh.read(ny * nx * nt * 4), dtype="<f4", count=ny * nx * nt)
    return data.reshape(ny, nx, nt).astype(np.float32)


def write_histogram_csv(path, histograms: np.ndarray) -> None:
    """Debug dump: one row per (zone_ix, zone_iy, bin) with its count."""
    h = np.asarray(histograms)
    with atomic_write(path, "w") as fh:
        writer = csv.writer(fh)
        writer.writerow(["zone_ix", "zone_iy", "bin", "count"])
        for iy in range(h.shape[0]):
            for ix in range(h.shape[1]):
                for b in range(h.shape[2]):
                    writer.writerow([ix, iy, b, repr(float(h[iy, ix, b]))])


# -- sparse depth CSV ---------------------------------------------------------------


def write_sparse_depth_csv(path, rows) -> None:
    """Rows of (zone_ix, zone_iy, u, v, depth_m); depth < 0 means no return."""
    with atomic_write(path, "w") as fh:
        writer = csv.writer(fh)
        writer.writerow(["zone_ix", "zone_iy", "u", "v", "depth_m"])
        for ix, iy, u, v, d in rows:
            writer.writerow([ix, iy, repr(float(u)), repr(float(v)), repr(float(d))])


def read_sparse_depth_csv(path):
    """List of (zone_ix, zone_iy, u, v, depth_m) tuples."""
    try:
        with open(path) as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header[:2] != ["zone_ix", "zone_iy"]:
                raise DataError(f"unexpected sparse-depth header in {path}")
            return [(int(r[0]), int(r[1]), float(r[2]), float(r[3]), float(r[4]))
                    for r in reader]
    except (OSError, ValueError, StopIteration) as e:
        raise DataError(f"cannot read sparse depth CSV {path}: {e}") from e


# -- pose JSON ----------------------------------------------------------------------


def camera_to_dict(cam) -> dict:
    return {
        "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
        "width": cam.width, "height": cam.height,
        "rotation": cam.rotation.tolist(),
        "translation": cam.translation.tolist(),
    }


def camera_from_dict(doc: dict):
    from .core import CameraModel

    try:
        return CameraModel(
            float(doc["fx"]), float(doc["fy"]), float(doc["cx"]), float(doc["cy"]),
            int(doc["width"]), int(doc["height"]),
            np.asarray(doc["rotation"], dtype=np.float64),
            np.asarray(doc["translation"], dtype=np.float64),
        )
    except KeyError as e:
        raise DataError(f"pose document missing field {e}") from e


def save_pose_json(cam, path) -> None:
    with atomic_write(path) as fh:
        json.dump(camera_to_dict(cam), fh, indent=2)


def load_pose_json(path):
    try:
        with open(path) as fh:
            return camera_from_dict(json.load(fh))
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read pose {path}: {e}") from e
