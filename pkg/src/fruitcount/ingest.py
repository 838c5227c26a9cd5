"""Dataset loading: manifests, detection masks, SVG circle labels, pose and
feature-track text files.

All pixel positions in files use (row, column) order except SVG, whose
``cx``/``cy`` attributes are column/row as the SVG standard defines them.
"""

from __future__ import annotations

import json
import logging
import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, PngImagePlugin
from scipy import ndimage

from .core import CameraPose, FrameImage, Intrinsics, Region

log = logging.getLogger(__name__)

DEFAULT_MIN_AREA = 20
ORTHO_TOL = 1e-4
_EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)
_SVG_NS = "http://www.w3.org/2000/svg"


class IngestError(Exception):
    """Base class for dataset loading failures."""


class MissingFile(IngestError):
    pass


class LengthMismatch(IngestError):
    pass


class MalformedManifest(IngestError):
    pass


class MalformedSvg(IngestError):
    pass


class NonOrthonormalRotation(IngestError):
    pass


class FrameCountMismatch(IngestError):
    pass


@dataclass(frozen=True)
class Segment:
    """A labelled frame range (one tree or row), inclusive on both ends."""

    id: str
    first_frame: int
    last_frame: int
    visual_count: int | None = None

    def contains(self, frame: float) -> bool:
        return self.first_frame <= frame <= self.last_frame


@dataclass
class DatasetManifest:
    root: Path
    frames: list[Path]
    masks: list[Path]
    poses: Path | None = None
    labels: list[Path] = field(default_factory=list)
    features: Path | None = None
    segments: list[Segment] = field(default_factory=list)
    seed: int | None = None

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    def to_json(self) -> dict:
        """Manifest document with paths relative to ``root``."""

        def rel(p: Path) -> str:
            try:
                return p.relative_to(self.root).as_posix()
            except ValueError:
                return str(p)

        doc: dict = {}
        if self.seed is not None:
            doc["seed"] = self.seed
        doc["frames"] = [rel(p) for p in self.frames]
        doc["masks"] = [rel(p) for p in self.masks]
        if self.poses is not None:
            doc["poses"] = rel(self.poses)
        if self.labels:
            doc["labels"] = [rel(p) for p in self.labels]
        if self.features is not None:
            doc["features"] = rel(self.features)
        segs = []
        for s in self.segments:
            entry = {"id": s.id, "first_frame": s.first_frame, "last_frame": s.last_frame}
            if s.visual_count is not None:
                entry["visual_count"] = s.visual_count
            segs.append(entry)
        doc["segments"] = segs
        return doc


def write_manifest(manifest: DatasetManifest, path: Path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(manifest.to_json(), indent=2) + "\n")
    return path


def load_dataset(manifest_path) -> DatasetManifest:
    """Parse and validate a dataset manifest.

    ``manifest_path`` may be the JSON file or a directory holding
    ``manifest.json``. Relative paths resolve against the manifest's folder.

    Raises:
        MissingFile: manifest or any referenced file does not exist.
        LengthMismatch: frame and mask lists differ in length.
        MalformedManifest: JSON does not parse or fields are invalid.
    """
    path = Path(manifest_path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.is_file():
        raise MissingFile(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise MalformedManifest(f"{path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise MalformedManifest(f"{path}: top level must be an object")

    root = path.parent

    def resolve(entry, key):
        if not isinstance(entry, str):
            raise MalformedManifest(f"{key}: expected a path string, got {entry!r}")
        p = Path(entry)
        return p if p.is_absolute() else root / p

    def path_list(key, required):
        if key not in doc:
            if required:
                raise MalformedManifest(f"missing required field '{key}'")
            return []
        if not isinstance(doc[key], list):
            raise MalformedManifest(f"'{key}' must be a list")
        return [resolve(e, key) for e in doc[key]]

    frames = path_list("frames", required=True)
    masks = path_list("masks", required=True)
    labels = path_list("labels", required=False)
    if len(frames) != len(masks):
        raise LengthMismatch(f"{len(frames)} frames but {len(masks)} masks")
    if labels and len(labels) != len(frames):
        raise LengthMismatch(f"{len(frames)} frames but {len(labels)} label files")
    poses = resolve(doc["poses"], "poses") if doc.get("poses") is not None else None
    features = resolve(doc["features"], "features") if doc.get("features") is not None else None

    segments = []
    for i, s in enumerate(doc.get("segments", [])):
        try:
            seg = Segment(
                id=str(s["id"]),
                first_frame=int(s["first_frame"]),
                last_frame=int(s["last_frame"]),
                visual_count=None if s.get("visual_count") is None else int(s["visual_count"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedManifest(f"segment {i}: {exc!r}") from exc
        if not 0 <= seg.first_frame <= seg.last_frame < len(frames):
            raise MalformedManifest(f"segment '{seg.id}' range outside the sequence")
        if seg.visual_count is not None and seg.visual_count < 0:
            raise MalformedManifest(f"segment '{seg.id}' has a negative visual count")
        segments.append(seg)
    ordered = sorted(segments, key=lambda s: s.first_frame)
    for a, b in zip(ordered, ordered[1:]):
        if b.first_frame <= a.last_frame:
            raise MalformedManifest(f"segments '{a.id}' and '{b.id}' overlap")
    if len({s.id for s in segments}) != len(segments):
        raise MalformedManifest("segment ids must be unique")

    for p in [*frames, *masks, *labels, *(x for x in (poses, features) if x is not None)]:
        if not p.is_file():
            raise MissingFile(f"referenced file not found: {p}")

    seed = doc.get("seed")
    return DatasetManifest(
        root=root,
        frames=frames,
        masks=masks,
        poses=poses,
        labels=labels,
        features=features,
        segments=segments,
        seed=None if seed is None else int(seed),
    )


# --------------------------------------------------------------------------
# images and masks
# --------------------------------------------------------------------------


def read_image(path, index: int, gray: bool = True) -> FrameImage:
    with Image.open(path) as im:
        im = im.convert("L" if gray else "RGB")
        return FrameImage(index, np.asarray(im, dtype=np.uint8).copy())


def write_png(path, pixels: np.ndarray, seed: int | None = None) -> None:
    info = PngImagePlugin.PngInfo()
    if seed is not None:
        info.add_text("seed", str(seed))
    Image.fromarray(np.asarray(pixels, dtype=np.uint8)).save(path, pnginfo=info)


def mask_to_regions(mask, min_area: int = DEFAULT_MIN_AREA, frame: int | None = None) -> list[Region]:
    """Turn a binary detection mask into candidate fruit regions.

    Each 8-connected component of nonzero pixels with at least ``min_area``
    pixels becomes one Region. Output is sorted by centroid so the result does
    not depend on labelling order.
    """
    if isinstance(mask, FrameImage):
        frame = mask.index if frame is None else frame
        mask = mask.pixels
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be single-channel, got shape {mask.shape}")
    frame = 0 if frame is None else frame
    labels, n = ndimage.label(mask != 0, structure=_EIGHT_CONNECTED)
    if n == 0:
        return []
    rows, cols = np.nonzero(labels)
    ids = labels[rows, cols]
    areas = np.bincount(ids, minlength=n + 1)
    sum_r = np.bincount(ids, weights=rows, minlength=n + 1)
    sum_c = np.bincount(ids, weights=cols, minlength=n + 1)
    regions = []
    for lab, sl in enumerate(ndimage.find_objects(labels), start=1):
        if sl is None or areas[lab] < min_area:
            continue
        a = int(areas[lab])
        regions.append(
            Region(
                frame=frame,
                centroid=(sum_r[lab] / a, sum_c[lab] / a),
                box=(sl[0].start, sl[1].start, sl[0].stop - 1, sl[1].stop - 1),
                area=a,
            )
        )
    regions.sort(key=lambda r: (r.centroid, r.box))
    return regions


# --------------------------------------------------------------------------
# SVG circle labels
# --------------------------------------------------------------------------


@dataclass
class GroundTruthLabel:
    """Circles drawn by a human labeller on one frame.

    ``circles`` holds ``(cx, cy, r)`` with ``cx`` the column and ``cy`` the row.
    """

    frame: int
    circles: list[tuple[float, float, float]]
    width: float | None = None
    height: float | None = None

    @property
    def visual_count(self) -> int:
        return len(self.circles)


def _local(tag: str) -> str:
    return tag.rsplit("}", 1)[-1]


def _svg_number(text: str | None, what: str) -> float | None:
    if text is None:
        return None
    try:
        return float(text.strip().removesuffix("px"))
    except ValueError as exc:
        raise MalformedSvg(f"bad numeric {what} attribute {text!r}") from exc


def load_svg_labels(path, frame: int | None = None) -> GroundTruthLabel:
    """Read circle annotations from an SVG file.

    Raises:
        MalformedSvg: the file is not well-formed XML or a circle lacks
            ``cx``, ``cy`` or ``r`` (or has ``r <= 0``).
    """
    try:
        root = ET.parse(path).getroot()
    except ET.ParseError as exc:
        raise MalformedSvg(f"{path}: {exc}") from exc
    if _local(root.tag) != "svg":
        raise MalformedSvg(f"{path}: root element is <{_local(root.tag)}>, not <svg>")
    if frame is None:
        frame = int(root.get("data-frame", 0))
    width = _svg_number(root.get("width"), "width")
    height = _svg_number(root.get("height"), "height")
    circles = []
    for el in root.iter():
        if _local(el.tag) != "circle":
            continue
        vals = []
        for attr in ("cx", "cy", "r"):
            val = _svg_number(el.get(attr), attr)
            if val is None:
                raise MalformedSvg(f"{path}: circle missing '{attr}' attribute")
            vals.append(val)
        cx, cy, r = vals
        if not r > 0:
            raise MalformedSvg(f"{path}: circle radius must be positive, got {r}")
        if width is not None and height is not None:
            if cx - r < 0 or cy - r < 0 or cx + r > width or cy + r > height:
                log.warning("%s: circle (%g, %g, r=%g) clipped by image bounds", path, cx, cy, r)
        circles.append((cx, cy, r))
    return GroundTruthLabel(frame=frame, circles=circles, width=width, height=height)


def write_svg_labels(path, label: GroundTruthLabel, seed: int | None = None) -> None:
    attrs = {"xmlns": _SVG_NS, "data-frame": str(label.frame)}
    if label.width is not None:
        attrs["width"] = repr(float(label.width))
    if label.height is not None:
        attrs["height"] = repr(float(label.height))
    head = " ".join(f'{k}="{v}"' for k, v in attrs.items())
    lines = ['<?xml version="1.0" encoding="UTF-8"?>']
    if seed is not None:
        lines.append(f"<!-- seed {seed} -->")
    lines.append(f"<svg {head}>")
    for cx, cy, r in label.circles:
        lines.append(f'  <circle cx="{float(cx)!r}" cy="{float(cy)!r}" r="{float(r)!r}" />')
    lines.append("</svg>")
    Path(path).write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------------
# camera poses
# --------------------------------------------------------------------------


def quat_to_rotation(q) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def rotation_to_quat(R: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) with w >= 0 for a proper rotation."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return -q if q[0] < 0 else q


def orthonormalize(R: np.ndarray, frame: int = -1) -> np.ndarray:
    """Snap a near-rotation to the closest rotation matrix.

    Raises:
        NonOrthonormalRotation: if ``R`` deviates from orthonormal by more
            than 1e-4 or is a reflection.
    """
    R = np.asarray(R, dtype=np.float64).reshape(3, 3)
    if np.max(np.abs(R.T @ R - np.eye(3))) > ORTHO_TOL or np.linalg.det(R) <= 0:
        raise NonOrthonormalRotation(f"frame {frame}: rotation is not orthonormal with det +1")
    U, _, Vt = np.linalg.svd(R)
    return U @ Vt


def load_poses(path, n_frames: int | None = None) -> list[CameraPose]:
    """Read a pose file.

    Format: ``#`` comment lines, one intrinsics line ``fx fy cx cy``, then one
    record per frame, either ``frame qw qx qy qz tx ty tz`` or
    ``frame r11 r12 r13 r21 r22 r23 r31 r32 r33 tx ty tz``. Poses map world
    to camera coordinates.

    Raises:
        NonOrthonormalRotation: a rotation is off by more than 1e-4 or is a
            reflection.
        FrameCountMismatch: ``n_frames`` is given and the record count, or
            the frame indices ``0..n_frames-1``, do not match.
        IngestError: the file does not parse.
    """
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"pose file not found: {path}")
    intr = None
    poses = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        try:
            vals = [float(t) for t in line.split()]
        except ValueError as exc:
            raise IngestError(f"{path}:{lineno}: non-numeric token") from exc
        if intr is None:
            if len(vals) != 4:
                raise IngestError(f"{path}:{lineno}: expected intrinsics line 'fx fy cx cy'")
            intr = Intrinsics(*vals)
            continue
        frame = int(vals[0])
        if len(vals) == 8:
            q = np.array(vals[1:5])
            norm = np.linalg.norm(q)
            if abs(norm - 1.0) > ORTHO_TOL:
                raise NonOrthonormalRotation(f"{path}:{lineno}: quaternion norm {norm:g}")
            R = quat_to_rotation(q / norm)
            t = vals[5:8]
        elif len(vals) == 13:
            R = orthonormalize(np.array(vals[1:10]), frame)
            t = vals[10:13]
        else:
            raise IngestError(f"{path}:{lineno}: expected 8 or 13 fields, got {len(vals)}")
        poses.append(CameraPose(frame, R, np.array(t), intr))
    if intr is None:
        raise IngestError(f"{path}: no intrinsics line")
    poses.sort(key=lambda p: p.frame)
    if len({p.frame for p in poses}) != len(poses):
        raise IngestError(f"{path}: duplicate frame records")
    if n_frames is not None and [p.frame for p in poses] != list(range(n_frames)):
        raise FrameCountMismatch(f"{path}: {len(poses)} pose records for {n_frames} frames")
    return poses


def write_poses(path, poses: list[CameraPose], seed: int | None = None) -> None:
    if not poses:
        raise ValueError("no poses to write")
    k = poses[0].intrinsics
    lines = ["# fruitcount poses: world->camera, pixel (u, v) = (row, column)"]
    if seed is not None:
        lines.append(f"# seed {seed}")
    lines.append("# fx fy cx cy")
    lines.append(" ".join(repr(float(x)) for x in (k.fx, k.fy, k.cx, k.cy)))
    lines.append("# frame qw qx qy qz tx ty tz")
    for p in poses:
        q = rotation_to_quat(p.rotation)
        fields = [str(p.frame), *(repr(float(x)) for x in q), *(repr(float(x)) for x in p.translation)]
        lines.append(" ".join(fields))
    Path(path).write_text("\n".join(lines) + "\n")
