"""Zero-shot semantic correspondence evaluation: nearest-neighbor keypoint
transfer on feature maps and PCK scoring with image- and box-relative margins,
plus the timestep sweep comparing noisy-input, clean-control and consolidated
features."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import torch

from .features import ExtractionRequest, FeatureService, sample_at_point
from .scenes import CorrespondenceAnnotation

# Tap used for matching: the second-coarsest map, mirroring single-map
# mid-decoder protocols. Configurable at every call site.
DEFAULT_MATCH_STAGE = 1


@dataclass
class PCKResult:
    hits: list[bool]
    threshold: float
    mode: str
    per_category_hits: dict[int, tuple[int, int]] = field(default_factory=dict)

    @property
    def pck(self) -> float:
        return float(np.mean(self.hits)) if self.hits else float("nan")


def match_keypoint(source_vector: np.ndarray, target_map: np.ndarray, image_size: int) -> tuple[float, float]:
    """Argmax of cosine similarity between `source_vector` and every position
    of the [C, H, W] target map; returns the matched grid cell's pixel center
    at image resolution. Ties break to the lowest row-major index; zero
    vectors have similarity 0 everywhere."""
    if not np.isfinite(source_vector).all() or not np.isfinite(target_map).all():
        raise ValueError("non-finite inputs")
    c, h, w = target_map.shape
    flat = target_map.reshape(c, -1)
    norms = np.linalg.norm(flat, axis=0)
    src_norm = np.linalg.norm(source_vector)
    sims = np.zeros(h * w)
    alive = norms > 1e-8
    if src_norm > 1e-8:
        sims[alive] = (source_vector @ flat[:, alive]) / (src_norm * norms[alive])
    idx = int(np.argmax(sims))  # argmax returns the first (lowest) max index
    row, col = divmod(idx, w)
    return ((col + 0.5) * image_size / w, (row + 0.5) * image_size / h)


def compute_pck(
    predictions: list[tuple[float, float]],
    annotation: CorrespondenceAnnotation,
    alpha: float,
    mode: str,
    image_size: int | None = None,
) -> PCKResult:
    """Hit iff Euclidean distance <= alpha * max(H, W) of the image (mode
    'img') or of the target box (mode 'bbox'); aggregation is per keypoint."""
    if not annotation.keypoints:
        raise ValueError("empty keypoint set")
    if len(predictions) != len(annotation.keypoints):
        raise ValueError("prediction count != keypoint count")
    if mode == "img":
        if image_size is None:
            raise ValueError("image mode needs image_size")
        threshold = alpha * image_size
    elif mode == "bbox":
        _, _, bw, bh = annotation.target_bbox
        if bw <= 0 or bh <= 0:
            raise ValueError("degenerate bbox")
        threshold = alpha * max(bw, bh)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    hits = []
    for (px, py), (_, (gx, gy)) in zip(predictions, annotation.keypoints):
        hits.append(bool(np.hypot(px - gx, py - gy) <= threshold))
    cat = annotation.category
    return PCKResult(
        hits=hits, threshold=threshold, mode=mode,
        per_category_hits={cat: (sum(hits), len(hits))},
    )


def aggregate_pck(results: list[PCKResult]) -> tuple[float, dict[int, float]]:
    """Per-point aggregation over a result list, plus per-category PCK."""
    hits = [h for r in results for h in r.hits]
    cats: dict[int, list[int]] = {}
    for r in results:
        for c, (k, n) in r.per_category_hits.items():
            cats.setdefault(c, [0, 0])
            cats[c][0] += k
            cats[c][1] += n
    per_cat = {c: k / n for c, (k, n) in cats.items() if n}
    return float(np.mean(hits)), per_cat


def evaluate_pairs(
    pairs: list[tuple],
    service: FeatureService,
    request: ExtractionRequest,
    alpha: float = 0.1,
    stage: int = DEFAULT_MATCH_STAGE,
) -> tuple[float, float, int]:
    """PCK_img and PCK_bbox over annotated scene pairs using one extraction
    request for both images of each pair. Returns (pck_img, pck_bbox, n_kp)."""
    img_results = []
    bbox_results = []
    image_size = None
    for source, target, annotation in pairs:
        src_img = torch.from_numpy(source.image)
        tgt_img = torch.from_numpy(target.image)
        image_size = src_img.shape[-1]
        src_stack = service.extract(request, src_img)
        tgt_stack = service.extract(request, tgt_img)
        src_map = src_stack.array(stage)
        tgt_map = tgt_stack.array(stage)
        preds = []
        for (sx, sy), _ in annotation.keypoints:
            vec = sample_at_point(src_map, sx / image_size, sy / image_size)
            preds.append(match_keypoint(vec, tgt_map, image_size))
        img_results.append(compute_pck(preds, annotation, alpha, "img", image_size))
        bbox_results.append(compute_pck(preds, annotation, alpha, "bbox"))
    pck_img, _ = aggregate_pck(img_results)
    pck_bbox, _ = aggregate_pck(bbox_results)
    return pck_img, pck_bbox, sum(len(r.hits) for r in img_results)


def timestep_sweep(
    pairs: list[tuple],
    service: FeatureService,
    timesteps: list[int],
    alpha: float = 0.1,
    stage: int = DEFAULT_MATCH_STAGE,
    ensemble_n: int = 1,
) -> list[dict]:
    """Rows of (mode, t, pck_img, pck_bbox, n_keypoints). The consolidated
    student is timestep-free and evaluated once; its row is repeated per t."""
    if not pairs or not timesteps:
        raise ValueError("need a non-empty pair set and timestep list")
    rows = []
    s_img, s_bbox, n_kp = evaluate_pairs(
        pairs, service, ExtractionRequest(model_ref="student", input_mode="clean_student"),
        alpha, stage,
    )
    for t in timesteps:
        for mode, req in (
            ("noisy_teacher", ExtractionRequest(
                model_ref="teacher", input_mode="noisy_teacher", t=t, ensemble_n=ensemble_n)),
            ("clean_teacher_control", ExtractionRequest(
                model_ref="teacher", input_mode="clean_teacher", t=t)),
        ):
            p_img, p_bbox, n = evaluate_pairs(pairs, service, req, alpha, stage)
            rows.append({"mode": mode, "t": t, "pck_img": p_img, "pck_bbox": p_bbox,
                         "n_keypoints": n})
        rows.append({"mode": "student", "t": t, "pck_img": s_img, "pck_bbox": s_bbox,
                     "n_keypoints": n_kp})
    return rows


def write_sweep_csv(path: str, rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["mode", "t", "pck_img", "pck_bbox", "n_keypoints"])
        for r in rows:
            writer.writerow([r["mode"], r["t"], f"{r['pck_img']:.6f}",
                             f"{r['pck_bbox']:.6f}", r["n_keypoints"]])
