"""On-disk formats.

* Images: binary 16-bit PGM (P5, maxval 65535, big-endian samples); value v
  is stored as round(v * 65535).
* Volumes and checkpoints: a JSON header next to a raw little-endian float32
  payload in the flattened ``(t, h, w, d)`` order.
* Manifests: JSON listing views with their acquisition geometry.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import SceneBounds, ViewPose, assign_view_times
from .grid import Grid4D

FORMAT_VERSION = 1
PGM_MAXVAL = 65535


class ImageFormatError(ValueError):
    pass


class MalformedHeaderError(ImageFormatError):
    pass


class UnsupportedMaxvalError(ImageFormatError):
    pass


class TruncatedDataError(ImageFormatError):
    pass


class VolumeFormatError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class ManifestError(ValueError):
    pass


def write_image(path, image) -> None:
    img = np.asarray(image, dtype=float)
    if img.ndim != 2:
        raise ValueError(f"images must be 2D, got shape {img.shape}")
    samples = np.rint(np.clip(img, 0.0, 1.0) * PGM_MAXVAL).astype(">u2")
    rows, cols = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n{PGM_MAXVAL}\n".encode("ascii"))
        fh.write(samples.tobytes())


_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def read_image(path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields, pos = [], 0
    for _ in range(4):
        m = _TOKEN.match(data, pos)
        if m is None:
            raise MalformedHeaderError(f"{path}: incomplete PGM header")
        fields.append(m.group(1))
        pos = m.end()
    if fields[0] != b"P5":
        raise MalformedHeaderError(f"{path}: expected P5 magic, got {fields[0]!r}")
    try:
        cols, rows, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise MalformedHeaderError(f"{path}: non-numeric PGM header field") from None
    if cols < 1 or rows < 1:
        raise MalformedHeaderError(f"{path}: invalid size {cols}x{rows}")
    if maxval != PGM_MAXVAL:
        raise UnsupportedMaxvalError(f"{path}: maxval {maxval} (only {PGM_MAXVAL} is supported)")
    pos += 1  # single whitespace byte ends the header
    need = rows * cols * 2
    payload = data[pos:pos + need]
    if len(payload) < need:
        raise TruncatedDataError(f"{path}: expected {need} bytes of samples, found {len(payload)}")
    samples = np.frombuffer(payload, dtype=">u2").reshape(rows, cols)
    return samples.astype(np.float64) / PGM_MAXVAL


def _bounds_json(bounds: SceneBounds) -> dict:
    return {"min": list(bounds.min_corner), "max": list(bounds.max_corner)}


def _bounds_from_json(d) -> SceneBounds:
    try:
        return SceneBounds(tuple(d["min"]), tuple(d["max"]))
    except (KeyError, TypeError) as exc:
        raise ValueError(f"bounds must be an object with 'min' and 'max' corners ({exc})") from None


def _payload_path(header_path: Path) -> Path:
    return header_path.with_suffix(".raw")


def _write_raw(path: Path, array: np.ndarray) -> None:
    path.write_bytes(np.ascontiguousarray(array, dtype="<f4").tobytes())


def _read_raw(path: Path, dims, what: str) -> np.ndarray:
    if not path.exists():
        raise FileNotFoundError(f"{what} payload {path} not found")
    payload = path.read_bytes()
    expected = int(np.prod(dims))
    if len(payload) != 4 * expected:
        raise VolumeFormatError(
            f"{what} header dims {list(dims)} need {expected} values but {path.name} holds "
            f"{len(payload) / 4:g}")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).copy()


@dataclass
class Volume:
    data: np.ndarray
    bounds: SceneBounds
    times: list


def write_volume(path, volume, bounds: SceneBounds, times=()) -> Path:
    """Write ``path`` (JSON header) and its ``.raw`` payload. 3D or 4D ``(t, h, w, d)``."""
    path = Path(path)
    vol = np.asarray(volume)
    if vol.ndim not in (3, 4):
        raise ValueError(f"volumes must be 3D or 4D, got shape {vol.shape}")
    times = [float(t) for t in times]
    if vol.ndim == 4 and len(times) != vol.shape[0]:
        raise ValueError(f"4D volume with {vol.shape[0]} frames needs as many times, got {len(times)}")
    header = {"format_version": FORMAT_VERSION, "kind": "volume", "dims": list(vol.shape),
              "bounds": _bounds_json(bounds), "times": times, "dtype": "<f4",
              "data_file": _payload_path(path).name}
    path.write_text(json.dumps(header, indent=2))
    _write_raw(_payload_path(path), vol)
    return path


def read_volume(path) -> Volume:
    path = Path(path)
    header = json.loads(path.read_text())
    if header.get("format_version") != FORMAT_VERSION:
        raise VolumeFormatError(f"{path}: unsupported format_version {header.get('format_version')!r}")
    dims = [int(n) for n in header["dims"]]
    data = _read_raw(path.parent / header.get("data_file", _payload_path(path).name), dims, "volume")
    return Volume(data, _bounds_from_json(header["bounds"]), list(header.get("times", [])))


def save_checkpoint(path, grid: Grid4D, pixel_model: str = "absorbance") -> Path:
    """Header JSON plus float32 payload; raw values are stored as float32."""
    path = Path(path)
    header = {"format_version": FORMAT_VERSION, "kind": "grid4d", "dims": list(grid.dims),
              "bounds": _bounds_json(grid.bounds), "activation_bias": float(grid.activation_bias),
              "sigma_init": float(grid.sigma_init), "pixel_model": pixel_model, "dtype": "<f4",
              "data_file": _payload_path(path).name}
    path.write_text(json.dumps(header, indent=2))
    _write_raw(_payload_path(path), grid.raw)
    return path


def load_checkpoint(path) -> tuple[Grid4D, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    header = json.loads(path.read_text())
    if header.get("kind") != "grid4d":
        raise CheckpointError(f"{path}: not a grid checkpoint")
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format_version {header.get('format_version')!r}")
    dims = [int(n) for n in header["dims"]]
    raw = _read_raw(path.parent / header.get("data_file", _payload_path(path).name), dims, "checkpoint")
    grid = Grid4D(raw, _bounds_from_json(header["bounds"]), float(header["activation_bias"]),
                  float(header.get("sigma_init", 1e-4)))
    return grid, header


@dataclass
class ManifestView:
    image: Path
    pose: ViewPose


@dataclass
class Manifest:
    bounds: SceneBounds
    views: list

    @property
    def poses(self) -> list:
        return [v.pose for v in self.views]

    def load_images(self) -> list:
        out = []
        for i, v in enumerate(self.views):
            img = read_image(v.image)
            if img.shape != (v.pose.rows, v.pose.cols):
                raise ManifestError(f"view {i}: image {v.image.name} is {img.shape[0]}x{img.shape[1]}, "
                                    f"manifest says {v.pose.rows}x{v.pose.cols}")
            out.append(img)
        return out


_VIEW_KEYS = ("image", "primary_angle_deg", "secondary_angle_deg", "sdd_mm", "pixel_spacing_mm", "rows", "cols")


def parse_manifest(doc: dict, base_dir=".", check_images: bool = True) -> Manifest:
    base_dir = Path(base_dir)
    if "bounds" not in doc:
        raise ManifestError("manifest has no 'bounds'")
    try:
        bounds = _bounds_from_json(doc["bounds"])
    except ValueError as exc:
        raise ManifestError(f"bounds: {exc}") from None
    views = doc.get("views")
    if not isinstance(views, list) or not views:
        raise ManifestError("manifest needs a non-empty 'views' array")
    has_time = ["time" in v for v in views]
    if any(has_time) and not all(has_time):
        missing = has_time.index(False)
        raise ManifestError(f"view {missing}: 'time' missing while other views specify it")
    times = [v["time"] for v in views] if all(has_time) else assign_view_times(len(views))
    out = []
    for i, (v, t) in enumerate(zip(views, times)):
        for key in _VIEW_KEYS:
            if key not in v:
                raise ManifestError(f"view {i}: missing '{key}'")
        sdd = float(v["sdd_mm"])
        sod = float(v["sod_mm"]) if v.get("sod_mm") is not None else sdd / 2.0
        try:
            pose = ViewPose(float(v["primary_angle_deg"]), float(v["secondary_angle_deg"]), sdd, sod,
                            float(v["pixel_spacing_mm"]), int(v["rows"]), int(v["cols"]), float(t))
        except (TypeError, ValueError) as exc:
            raise ManifestError(f"view {i}: {exc}") from None
        image = base_dir / v["image"]
        if check_images:
            if not image.exists():
                raise ManifestError(f"view {i}: image {image} not found")
            try:
                shape = _pgm_shape(image)
            except ImageFormatError as exc:
                raise ManifestError(f"view {i}: {exc}") from None
            if shape != (pose.rows, pose.cols):
                raise ManifestError(f"view {i}: image {image.name} is {shape[0]}x{shape[1]}, "
                                    f"manifest says {pose.rows}x{pose.cols}")
        out.append(ManifestView(image, pose))
    return Manifest(bounds, out)


def _pgm_shape(path) -> tuple[int, int]:
    img = read_image(path)
    return img.shape


def load_manifest(path, check_images: bool = True) -> Manifest:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest {path} not found")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    return parse_manifest(doc, path.parent, check_images)


def manifest_document(bounds: SceneBounds, entries) -> dict:
    """``entries`` are ``(relative image path, ViewPose)`` pairs."""
    views = []
    for image, pose in entries:
        views.append({"image": str(image), "primary_angle_deg": pose.primary_angle,
                      "secondary_angle_deg": pose.secondary_angle, "sdd_mm": pose.sdd,
                      "sod_mm": pose.sod, "pixel_spacing_mm": pose.pixel_spacing,
                      "rows": pose.rows, "cols": pose.cols, "time": pose.time})
    return {"format_version": FORMAT_VERSION, "bounds": _bounds_json(bounds), "views": views}


def write_manifest(path, bounds: SceneBounds, entries) -> Path:
    path = Path(path)
    path.write_text(json.dumps(manifest_document(bounds, entries), indent=2))
    return path
