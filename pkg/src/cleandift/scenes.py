"""Procedural scene generator with exact ground truth for every downstream
protocol: keypoint correspondences, depth maps, segmentation masks, class
labels and per-object boxes. Also ingests external image folders for
distillation-only use."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, asdict

import numpy as np
from PIL import Image

CATEGORY_NAMES = {1: "disk", 2: "square", 3: "triangle"}
NUM_CLASSES = 4  # background + 3 shape categories
DEPTH_MIN = 1.0
DEPTH_MAX = 10.0

_PALETTE = np.array(
    [
        [0.9, 0.2, -0.5],
        [-0.6, 0.7, 0.1],
        [-0.2, -0.4, 0.9],
        [0.8, 0.8, -0.2],
        [-0.8, 0.2, 0.7],
        [0.3, -0.7, -0.3],
    ]
)


@dataclass(frozen=True)
class SceneObject:
    category: int  # 1=disk, 2=square, 3=triangle
    size: float  # circumradius-like extent in pixels
    cx: float
    cy: float
    orientation: float  # radians
    color: tuple[float, float, float]
    depth: float


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    canvas: int
    objects: tuple[SceneObject, ...]
    background_id: int


@dataclass
class SceneSample:
    image: np.ndarray  # [3, H, W] in [-1, 1]
    mask: np.ndarray  # [H, W] int, 0 = background
    depth: np.ndarray  # [H, W] float
    label: int  # dominant object category
    keypoints: list[dict]  # {object_index, name, x, y}
    categories: list[int]
    bboxes: list[tuple[float, float, float, float]]  # (x, y, w, h) per object


@dataclass(frozen=True)
class PairTransform:
    scale: float = 1.0
    rotation: float = 0.0  # radians, about the canvas center
    dx: float = 0.0
    dy: float = 0.0
    brightness: float = 0.0
    contrast: float = 1.0


@dataclass
class CorrespondenceAnnotation:
    source_id: str
    target_id: str
    keypoints: list[tuple[tuple[float, float], tuple[float, float]]]
    target_bbox: tuple[float, float, float, float]
    category: int


def _keypoint_offsets(obj: SceneObject) -> list[tuple[str, float, float]]:
    """Named landmarks in the object frame; all strictly inside the shape."""
    r = obj.size
    if obj.category == 1:
        return [("center", 0.0, 0.0), ("east", r / 2, 0.0), ("north", 0.0, -r / 2)]
    if obj.category == 2:
        h = r / 2
        return [
            ("center", 0.0, 0.0), ("corner_ne", h, -h), ("corner_nw", -h, -h),
            ("corner_sw", -h, h), ("corner_se", h, h),
        ]
    out = [("center", 0.0, 0.0)]
    for i, name in enumerate(("apex", "left", "right")):
        ang = -math.pi / 2 + i * 2 * math.pi / 3
        out.append((name, 0.5 * r * math.cos(ang), 0.5 * r * math.sin(ang)))
    return out


def object_keypoints(obj: SceneObject) -> list[tuple[str, float, float]]:
    """Landmarks in canvas pixels (object-frame offsets rotated by orientation)."""
    c, s = math.cos(obj.orientation), math.sin(obj.orientation)
    out = []
    for name, ox, oy in _keypoint_offsets(obj):
        out.append((name, obj.cx + c * ox - s * oy, obj.cy + s * ox + c * oy))
    return out


def _triangle_vertices(obj: SceneObject) -> np.ndarray:
    angles = obj.orientation + (-math.pi / 2 + np.arange(3) * 2 * math.pi / 3)
    return np.stack(
        [obj.cx + obj.size * np.cos(angles), obj.cy + obj.size * np.sin(angles)], axis=1
    )


def _coverage(obj: SceneObject, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """Boolean mask of pixel centers covered by the object."""
    dx = px - obj.cx
    dy = py - obj.cy
    if obj.category == 1:
        return dx * dx + dy * dy <= obj.size * obj.size
    if obj.category == 2:
        c, s = math.cos(obj.orientation), math.sin(obj.orientation)
        u = c * dx + s * dy
        v = -s * dx + c * dy
        return np.maximum(np.abs(u), np.abs(v)) <= obj.size / math.sqrt(2.0)
    verts = _triangle_vertices(obj)
    inside = np.ones(px.shape, dtype=bool)
    for i in range(3):
        ax, ay = verts[i]
        bx, by = verts[(i + 1) % 3]
        cross = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
        inside &= cross >= 0
    return inside


def object_bbox(obj: SceneObject) -> tuple[float, float, float, float]:
    """Tight axis-aligned analytic box (x, y, w, h)."""
    if obj.category == 1:
        return (obj.cx - obj.size, obj.cy - obj.size, 2 * obj.size, 2 * obj.size)
    if obj.category == 2:
        h = obj.size / math.sqrt(2.0)
        pts = np.array([[h, h], [h, -h], [-h, h], [-h, -h]])
        c, s = math.cos(obj.orientation), math.sin(obj.orientation)
        rot = pts @ np.array([[c, s], [-s, c]])
        xs = rot[:, 0] + obj.cx
        ys = rot[:, 1] + obj.cy
    else:
        verts = _triangle_vertices(obj)
        xs, ys = verts[:, 0], verts[:, 1]
    return (float(xs.min()), float(ys.min()), float(xs.max() - xs.min()), float(ys.max() - ys.min()))


def _background(canvas: int, background_id: int) -> np.ndarray:
    yy, xx = np.mgrid[0:canvas, 0:canvas].astype(np.float64)
    kind = background_id % 3
    if kind == 0:
        base = (xx / (canvas - 1)) * 0.3 - 0.8
    elif kind == 1:
        base = (yy / (canvas - 1)) * 0.3 - 0.8
    else:
        base = (((xx // 4 + yy // 4) % 2) * 0.2) - 0.8
    img = np.stack([base, base + 0.05, base + 0.1])
    return img


def generate_scene(spec: SceneSpec) -> SceneSample:
    """Deterministic rasterization of a spec at pixel centers."""
    n = spec.canvas
    yy, xx = np.mgrid[0:n, 0:n]
    px = xx + 0.5
    py = yy + 0.5
    image = _background(n, spec.background_id).copy()
    mask = np.zeros((n, n), dtype=np.int64)
    depth = np.full((n, n), DEPTH_MAX, dtype=np.float64)
    # Paint far-to-near so nearer objects occlude.
    order = sorted(range(len(spec.objects)), key=lambda i: -spec.objects[i].depth)
    for i in order:
        obj = spec.objects[i]
        cov = _coverage(obj, px, py)
        mask[cov] = obj.category
        depth[cov] = obj.depth
        for ch in range(3):
            image[ch][cov] = obj.color[ch]
    areas = {}
    for obj in spec.objects:
        areas[obj.category] = areas.get(obj.category, 0) + int(
            np.sum(mask == obj.category)
        )
    label = max(areas, key=lambda c: (areas[c], -c)) if areas else 0
    keypoints = []
    for i, obj in enumerate(spec.objects):
        for name, x, y in object_keypoints(obj):
            keypoints.append({"object_index": i, "name": name, "x": x, "y": y})
    return SceneSample(
        image=image.astype(np.float32),
        mask=mask,
        depth=depth.astype(np.float32),
        label=int(label),
        keypoints=keypoints,
        categories=[o.category for o in spec.objects],
        bboxes=[object_bbox(o) for o in spec.objects],
    )


def make_scene_spec(seed: int, canvas: int = 32, max_tries: int = 200) -> SceneSpec:
    """Seed-derived spec with 2-4 non-overlapping objects fully inside the
    canvas and pairwise-distinct depth planes."""
    rng = np.random.default_rng(np.random.SeedSequence([0x5CE4E, seed]))
    num_objects = int(rng.integers(2, 5))
    background_id = int(rng.integers(0, 3))
    objects: list[SceneObject] = []
    tries = 0
    while len(objects) < num_objects:
        if tries > max_tries:
            raise RuntimeError(f"could not place {num_objects} objects after {max_tries} tries")
        tries += 1
        size = float(rng.uniform(canvas * 0.14, canvas * 0.22))
        margin = size + 1.0
        cx = float(rng.uniform(margin, canvas - margin))
        cy = float(rng.uniform(margin, canvas - margin))
        if any(math.hypot(cx - o.cx, cy - o.cy) < size + o.size + 1.0 for o in objects):
            continue
        category = int(rng.integers(1, 4))
        objects.append(
            SceneObject(
                category=category,
                size=size,
                cx=cx,
                cy=cy,
                orientation=float(rng.uniform(0, 2 * math.pi)),
                color=tuple(_PALETTE[int(rng.integers(0, len(_PALETTE)))].tolist()),
                depth=float(DEPTH_MIN + (len(objects) + rng.uniform(0.1, 0.9)) * 1.7),
            )
        )
    return SceneSpec(seed=seed, canvas=canvas, objects=tuple(objects), background_id=background_id)


def transform_spec(spec: SceneSpec, tf: PairTransform) -> SceneSpec:
    """Apply a similarity transform about the canvas center to every object."""
    cc = spec.canvas / 2.0
    c, s = math.cos(tf.rotation), math.sin(tf.rotation)
    new_objects = []
    for obj in spec.objects:
        dx0, dy0 = obj.cx - cc, obj.cy - cc
        cx = cc + tf.scale * (c * dx0 - s * dy0) + tf.dx
        cy = cc + tf.scale * (s * dx0 + c * dy0) + tf.dy
        new_objects.append(
            SceneObject(
                category=obj.category,
                size=obj.size * tf.scale,
                cx=cx,
                cy=cy,
                orientation=obj.orientation + tf.rotation,
                color=obj.color,
                depth=obj.depth,
            )
        )
    return SceneSpec(
        seed=spec.seed, canvas=spec.canvas, objects=tuple(new_objects),
        background_id=spec.background_id,
    )


def transform_point(spec: SceneSpec, tf: PairTransform, x: float, y: float) -> tuple[float, float]:
    cc = spec.canvas / 2.0
    c, s = math.cos(tf.rotation), math.sin(tf.rotation)
    dx0, dy0 = x - cc, y - cc
    return (cc + tf.scale * (c * dx0 - s * dy0) + tf.dx,
            cc + tf.scale * (s * dx0 + c * dy0) + tf.dy)


def _photometric(image: np.ndarray, tf: PairTransform) -> np.ndarray:
    return np.clip(image * tf.contrast + tf.brightness, -1.0, 1.0).astype(np.float32)


def make_pair(
    spec: SceneSpec, tf: PairTransform
) -> tuple[SceneSample, SceneSample, CorrespondenceAnnotation]:
    """Source scene plus its transformed twin; target keypoints are the exact
    transformed source keypoints."""
    source = generate_scene(spec)
    target_spec = transform_spec(spec, tf)
    n = spec.canvas
    pairs = []
    for kp in source.keypoints:
        tx, ty = transform_point(spec, tf, kp["x"], kp["y"])
        if not (0 <= tx < n and 0 <= ty < n):
            raise ValueError(f"keypoint {kp['name']} leaves the canvas after transform")
        pairs.append(((kp["x"], kp["y"]), (tx, ty)))
    target = generate_scene(target_spec)
    target.image = _photometric(target.image, tf)
    dominant = target.categories.index(target.label)
    annotation = CorrespondenceAnnotation(
        source_id=f"scene{spec.seed:06d}_src",
        target_id=f"scene{spec.seed:06d}_tgt",
        keypoints=pairs,
        target_bbox=target.bboxes[dominant],
        category=target.label,
    )
    return source, target, annotation


def sample_pair_transform(rng: np.random.Generator, canvas: int) -> PairTransform:
    return PairTransform(
        scale=float(rng.uniform(0.85, 1.15)),
        rotation=float(rng.uniform(-0.5, 0.5)),
        dx=float(rng.uniform(-0.08, 0.08) * canvas),
        dy=float(rng.uniform(-0.08, 0.08) * canvas),
        brightness=float(rng.uniform(-0.1, 0.1)),
        contrast=float(rng.uniform(0.9, 1.1)),
    )


def generate_pair_set(
    num_pairs: int, canvas: int = 32, seed: int = 0, max_tries: int = 50
) -> list[tuple[SceneSample, SceneSample, CorrespondenceAnnotation]]:
    rng = np.random.default_rng(np.random.SeedSequence([0x9A12, seed]))
    out = []
    scene_seed = seed * 1_000_000
    while len(out) < num_pairs:
        scene_seed += 1
        tries = 0
        while True:
            tries += 1
            if tries > max_tries:
                raise RuntimeError("could not find an in-canvas pair transform")
            tf = sample_pair_transform(rng, canvas)
            try:
                spec = make_scene_spec(scene_seed, canvas)
                out.append(make_pair(spec, tf))
                break
            except (ValueError, RuntimeError):
                scene_seed += 1
                continue
    return out


def generate_scene_set(num: int, canvas: int = 32, seed: int = 0) -> list[SceneSample]:
    out = []
    base = 10_000_000 + seed * 1_000_000
    i = 0
    while len(out) < num:
        try:
            out.append(generate_scene(make_scene_spec(base + i, canvas)))
        except RuntimeError:
            pass
        i += 1
    return out


def images_tensor(samples: list[SceneSample]):
    import torch

    return torch.from_numpy(np.stack([s.image for s in samples]))


# ---------------------------------------------------------------------------
# Dataset directory I/O


def _to_png(image: np.ndarray) -> Image.Image:
    arr = np.clip((image.transpose(1, 2, 0) + 1.0) * 127.5, 0, 255).round().astype(np.uint8)
    return Image.fromarray(arr)


def save_scene_dataset(path: str, samples: list[SceneSample], annotations: list[CorrespondenceAnnotation] | None = None) -> None:
    os.makedirs(os.path.join(path, "images"), exist_ok=True)
    os.makedirs(os.path.join(path, "masks"), exist_ok=True)
    os.makedirs(os.path.join(path, "depth"), exist_ok=True)
    meta = {"samples": []}
    for i, s in enumerate(samples):
        name = f"{i:06d}"
        _to_png(s.image).save(os.path.join(path, "images", name + ".png"))
        Image.fromarray(s.mask.astype(np.uint8)).save(os.path.join(path, "masks", name + ".png"))
        raw = s.depth.astype("<f4")
        with open(os.path.join(path, "depth", name + ".npybin"), "wb") as f:
            f.write(raw.tobytes())
        with open(os.path.join(path, "depth", name + ".json"), "w") as f:
            json.dump({"shape": list(raw.shape), "dtype": "float32"}, f)
        meta["samples"].append(
            {
                "id": name,
                "label": s.label,
                "categories": s.categories,
                "bboxes": s.bboxes,
                "keypoints": s.keypoints,
            }
        )
    if annotations is not None:
        meta["pairs"] = [asdict(a) for a in annotations]
    with open(os.path.join(path, "annotations.json"), "w") as f:
        json.dump(meta, f, indent=1)


def ingest_folder(path: str, target_size: int) -> np.ndarray:
    """Center-crop images in a directory to square, resize, normalize to
    [-1, 1]. Returns [N, 3, S, S]; undecodable files are skipped with a
    warning, an empty result is an error."""
    import warnings

    if not os.path.isdir(path):
        raise ValueError(f"not a directory: {path}")
    out = []
    for name in sorted(os.listdir(path)):
        full = os.path.join(path, name)
        if not os.path.isfile(full):
            continue
        try:
            img = Image.open(full).convert("RGB")
        except Exception:
            warnings.warn(f"skipping undecodable file {name}")
            continue
        w, h = img.size
        side = min(w, h)
        left = (w - side) // 2
        top = (h - side) // 2
        img = img.crop((left, top, left + side, top + side))
        if side != target_size:
            img = img.resize((target_size, target_size), Image.BILINEAR)
        arr = np.asarray(img, dtype=np.float32).transpose(2, 0, 1) / 127.5 - 1.0
        out.append(arr)
    if not out:
        raise ValueError(f"no decodable images found in {path}")
    return np.stack(out)
