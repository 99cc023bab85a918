"""RGB-D samples on disk, the synthetic scene generator, and PLY export.

Sample directory layout::

    <root>/manifest.txt          one sample id per line
    <root>/generator.txt         key = value provenance (synthetic sets only)
    <root>/<id>/color.png        8-bit RGB
    <root>/<id>/depth.png        16-bit grey, millimetres
    <root>/<id>/labels.txt       "class_id cx cy cz w h d" per box
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image

from .geometry import Box3D
from .tensor import Tensor

logger = logging.getLogger(__name__)

DEPTH_RANGE_M = 10.0
DEPTH_RANGE_MM = DEPTH_RANGE_M * 1000.0

PERSON, OBJECT = 0, 1
CLASS_NAMES = ("person", "object")

GT_COLOR = (255, 0, 0)
DETECTION_COLOR = (255, 255, 0)

PathLike = Union[str, Path]


class LabelParseError(ValueError):
    pass


class SampleFormatError(ValueError):
    pass


@dataclass
class Sample:
    input: Tensor  # (1, 4, N, N): R, G, B, normalized depth
    boxes: List[Box3D]
    id: str = ""

    @property
    def size(self) -> int:
        return self.input.shape[-1]

    @property
    def depth(self) -> np.ndarray:
        return self.input.data[0, 3]

    @property
    def rgb(self) -> np.ndarray:
        return self.input.data[0, :3]


def normalize_depth(depth_mm: np.ndarray) -> np.ndarray:
    return np.clip(np.asarray(depth_mm, dtype=np.float64) / DEPTH_RANGE_MM, 0.0, 1.0)


# -- labels -------------------------------------------------------------------


def parse_labels(text: str, source: str = "labels") -> List[Box3D]:
    boxes = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 7:
            raise LabelParseError(f"{source}:{lineno}: expected 7 fields 'class_id cx cy cz w h d', got {len(parts)}")
        try:
            cid = int(parts[0])
            cx, cy, cz, w, h, d = (float(p) for p in parts[1:])
        except ValueError as exc:
            raise LabelParseError(f"{source}:{lineno}: {exc}") from None
        if cid not in (PERSON, OBJECT):
            raise LabelParseError(f"{source}:{lineno}: unknown class id {cid}")
        if not all(0.0 <= v <= 1.0 for v in (cx, cy, cz)):
            raise LabelParseError(f"{source}:{lineno}: box centre outside [0, 1]")
        if min(w, h, d) < 0:
            raise LabelParseError(f"{source}:{lineno}: negative box extent")
        boxes.append(Box3D.labelled(cid, cx, cy, cz, w, h, d))
    return boxes


def format_labels(boxes: Iterable[Box3D]) -> str:
    return "".join(
        f"{b.class_id} {b.cx:.9f} {b.cy:.9f} {b.cz:.9f} {b.w:.9f} {b.h:.9f} {b.d:.9f}\n" for b in boxes
    )


# -- loading ------------------------------------------------------------------


def _resize(channel: np.ndarray, size: int) -> np.ndarray:
    img = Image.fromarray(channel.astype(np.float32), mode="F")
    return np.asarray(img.resize((size, size), Image.BILINEAR), dtype=np.float64)


def load_sample(dir_path: PathLike, size: Optional[int] = None) -> Sample:
    """Read one sample directory into a (1, 4, N, N) tensor plus its boxes.

    Colour is scaled by 1/255, depth by 1/10000 mm and clamped to [0, 1].
    With ``size`` set and different from the stored resolution, every
    channel is bilinearly resized.
    """
    root = Path(dir_path)
    paths = {name: root / name for name in ("color.png", "depth.png", "labels.txt")}
    for path in paths.values():
        if not path.is_file():
            raise FileNotFoundError(f"missing sample file: {path}")

    with Image.open(paths["color.png"]) as im:
        color = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    with Image.open(paths["depth.png"]) as im:
        depth_mm = np.asarray(im, dtype=np.float64)
    if depth_mm.ndim != 2:
        raise SampleFormatError(f"{paths['depth.png']}: expected single-channel 16-bit depth")
    if depth_mm.shape != color.shape[:2]:
        raise SampleFormatError(
            f"{root}: depth size {depth_mm.shape[::-1]} does not match color size {color.shape[1::-1]}"
        )
    if depth_mm.shape[0] != depth_mm.shape[1]:
        raise SampleFormatError(f"{root}: images must be square, got {depth_mm.shape[::-1]}")

    channels = [color[..., c] for c in range(3)] + [normalize_depth(depth_mm)]
    if size is not None and size != depth_mm.shape[0]:
        channels = [_resize(ch, size) for ch in channels]
        channels[3] = np.clip(channels[3], 0.0, 1.0)
    boxes = parse_labels(paths["labels.txt"].read_text(), source=str(paths["labels.txt"]))
    return Sample(Tensor(np.stack(channels)[None]), boxes, id=root.name)


def read_manifest(root: PathLike) -> List[str]:
    path = Path(root) / "manifest.txt"
    if not path.is_file():
        raise FileNotFoundError(f"missing dataset manifest: {path}")
    return [line.strip() for line in path.read_text().splitlines() if line.strip()]


def load_dataset(root: PathLike, size: Optional[int] = None) -> List[Sample]:
    root = Path(root)
    return [load_sample(root / sid, size) for sid in read_manifest(root)]


def write_sample(out_dir: PathLike, color: np.ndarray, depth_mm: np.ndarray, boxes: Sequence[Box3D]) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(color, dtype=np.uint8), mode="RGB").save(out / "color.png")
    Image.fromarray(np.asarray(depth_mm, dtype=np.uint16)).save(out / "depth.png")
    (out / "labels.txt").write_text(format_labels(boxes))
    return out


# -- synthetic scenes ---------------------------------------------------------


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    object_count: int = 3  # upper bound; each scene draws 1..object_count
    depth_range_m: float = DEPTH_RANGE_M
    image_size: int = 128
    person_fraction: float = 0.5

    def __post_init__(self):
        if not 1 <= self.object_count <= 5:
            raise ValueError(f"object_count must be in 1..5, got {self.object_count}")
        if self.depth_range_m <= 0:
            raise ValueError("depth_range_m must be positive")
        if not 0.0 <= self.person_fraction <= 1.0:
            raise ValueError("person_fraction must be in [0, 1]")


@dataclass
class SceneRecord:
    """What the generator placed, in paint order (far to near)."""

    id: str
    boxes: List[Box3D]
    front_depth_mm: List[int]
    colors: List[Tuple[int, int, int]]
    background_mm: int
    silhouettes: List[Tuple[slice, slice]] = field(default_factory=list)


def _draw_box(rng: np.random.Generator, person_fraction: float) -> Box3D:
    if rng.random() < person_fraction:
        cls = PERSON
        w, h, d = rng.uniform(0.08, 0.18), rng.uniform(0.3, 0.6), rng.uniform(0.03, 0.06)
    else:
        cls = OBJECT
        w, h, d = rng.uniform(0.1, 0.3), rng.uniform(0.1, 0.3), rng.uniform(0.05, 0.15)
    cx = rng.uniform(w / 2, 1 - w / 2)
    cy = rng.uniform(h / 2, 1 - h / 2)
    cz = rng.uniform(0.15, 0.8)
    return Box3D.labelled(cls, cx, cy, cz, w, h, d)


def _pixel_span(centre: float, extent: float, n: int) -> slice:
    # pixels whose centre (p + 0.5) / n falls inside [centre - extent/2, centre + extent/2]
    lo = int(np.ceil((centre - extent / 2) * n - 0.5))
    hi = int(np.floor((centre + extent / 2) * n - 0.5))
    return slice(max(lo, 0), max(min(hi + 1, n), 0))


def render_scene(rng: np.random.Generator, spec: SceneSpec, scene_id: str):
    """Paint one scene; returns (color uint8 HxWx3, depth uint16 HxW, record)."""
    n = spec.image_size
    range_mm = spec.depth_range_m * 1000.0
    count = int(rng.integers(1, spec.object_count + 1))
    boxes = [_draw_box(rng, spec.person_fraction) for _ in range(count)]
    colors = [tuple(int(c) for c in rng.integers(40, 256, size=3)) for _ in boxes]
    background_mm = int(rng.integers(9000, 10001))
    background_rgb = rng.integers(0, 60, size=3)

    front = [int(round((b.cz - b.d / 2) * range_mm)) for b in boxes]
    order = sorted(range(count), key=lambda i: -front[i])

    color = np.empty((n, n, 3), dtype=np.float64)
    color[:] = background_rgb
    depth = np.full((n, n), background_mm, dtype=np.int64)
    silhouettes = []
    for i in order:
        b = boxes[i]
        rows, cols = _pixel_span(b.cy, b.h, n), _pixel_span(b.cx, b.w, n)
        color[rows, cols] = colors[i]
        depth[rows, cols] = front[i]
        silhouettes.append((rows, cols))
    color += rng.normal(0.0, 6.0, size=color.shape)
    color = np.clip(np.rint(color), 0, 255).astype(np.uint8)

    record = SceneRecord(
        id=scene_id,
        boxes=[boxes[i] for i in order],
        front_depth_mm=[front[i] for i in order],
        colors=[colors[i] for i in order],
        background_mm=background_mm,
        silhouettes=silhouettes,
    )
    return color, depth.astype(np.uint16), record


def generate_synthetic(spec: SceneSpec, out_dir: PathLike, scenes: int = 16) -> List[SceneRecord]:
    """Write ``scenes`` cuboid scenes plus manifest and provenance under ``out_dir``.

    Output depends only on ``spec`` and ``scenes``.
    """
    if scenes < 1:
        raise ValueError("scenes must be >= 1")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc
    rng = np.random.default_rng(spec.seed)
    records = []
    for s in range(scenes):
        sid = f"scene{s:04d}"
        color, depth, record = render_scene(rng, spec, sid)
        write_sample(out / sid, color, depth, record.boxes)
        records.append(record)
    (out / "manifest.txt").write_text("".join(r.id + "\n" for r in records))
    provenance = {
        "generator": "eyolo.synthetic",
        "seed": spec.seed,
        "scenes": scenes,
        "object_count": spec.object_count,
        "image_size": spec.image_size,
        "depth_range_m": spec.depth_range_m,
        "person_fraction": spec.person_fraction,
    }
    (out / "generator.txt").write_text("".join(f"{k} = {v}\n" for k, v in provenance.items()))
    logger.info("wrote %d synthetic scenes to %s", scenes, out)
    return records


# -- PLY export ---------------------------------------------------------------

_EDGES = [(0, 1), (1, 3), (3, 2), (2, 0), (4, 5), (5, 7), (7, 6), (6, 4), (0, 4), (1, 5), (2, 6), (3, 7)]


def default_intrinsics(size: int) -> Tuple[float, float, float, float]:
    return (float(size), float(size), size / 2.0, size / 2.0)


def deproject(u: np.ndarray, v: np.ndarray, z_m: np.ndarray, intrinsics) -> np.ndarray:
    fx, fy, cx0, cy0 = intrinsics
    return np.stack([(u - cx0) * z_m / fx, (v - cy0) * z_m / fy, z_m], axis=-1)


def box_wireframe(box: Box3D, size: int, intrinsics, samples_per_edge: int = 16) -> np.ndarray:
    """Points along the 12 edges of a box, deprojected into camera space (metres)."""
    corners = []
    for dz in (-0.5, 0.5):
        for dy in (-0.5, 0.5):
            for dx in (-0.5, 0.5):
                corners.append((box.cx + dx * box.w, box.cy + dy * box.h, box.cz + dz * box.d))
    corners = np.array(corners)
    # normalized image coordinates -> pixel-index coordinates (pixel p covers [p, p + 1) / size)
    u, v = corners[:, 0] * size - 0.5, corners[:, 1] * size - 0.5
    xyz = deproject(u, v, corners[:, 2] * DEPTH_RANGE_M, intrinsics)
    t = np.linspace(0.0, 1.0, samples_per_edge)[:, None]
    return np.concatenate([xyz[a] * (1 - t) + xyz[b] * t for a, b in _EDGES])


def export_ply(
    sample: Sample,
    detections: Sequence[Box3D],
    intrinsics: Optional[Tuple[float, float, float, float]] = None,
    out_path: PathLike = "scene.ply",
    ground_truth: Optional[Sequence[Box3D]] = None,
    samples_per_edge: int = 16,
) -> Path:
    """Write an ASCII PLY: coloured depth cloud plus box wireframes.

    Ground-truth boxes (if given) are drawn red, detections yellow.
    """
    n = sample.size
    intrinsics = intrinsics or default_intrinsics(n)
    depth = sample.depth
    v, u = np.nonzero(depth > 0)
    points = deproject(u.astype(np.float64), v.astype(np.float64), depth[v, u] * DEPTH_RANGE_M, intrinsics)
    colors = np.clip(np.rint(sample.rgb[:, v, u].T * 255.0), 0, 255).astype(np.int64)

    parts, cols = [points], [colors]
    for boxes, rgb in ((ground_truth or [], GT_COLOR), (detections, DETECTION_COLOR)):
        for box in boxes:
            wire = box_wireframe(box, n, intrinsics, samples_per_edge)
            parts.append(wire)
            cols.append(np.tile(np.array(rgb), (len(wire), 1)))
    xyz = np.concatenate(parts)
    rgb = np.concatenate(cols)

    out = Path(out_path)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w") as fh:
            fh.write(
                "ply\nformat ascii 1.0\n"
                f"element vertex {len(xyz)}\n"
                "property float x\nproperty float y\nproperty float z\n"
                "property uchar red\nproperty uchar green\nproperty uchar blue\n"
                "end_header\n"
            )
            np.savetxt(fh, np.column_stack([xyz, rgb]), fmt=["%.6f", "%.6f", "%.6f", "%d", "%d", "%d"])
    except OSError as exc:
        raise OSError(f"cannot write PLY {out}: {exc}") from exc
    return out
