"""Non-correspondence downstream protocols: kNN classification on pooled
features, linear probes for binned metric depth and semantic segmentation,
and the timestep / feature-map sweeps over teacher, student and projected
student features."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .features import ExtractionRequest, FeatureService, pool
from .scenes import DEPTH_MAX, DEPTH_MIN, NUM_CLASSES, SceneSample


@dataclass(frozen=True)
class DepthBinning:
    num_bins: int = 256
    depth_min: float = DEPTH_MIN
    depth_max: float = DEPTH_MAX

    def centers(self) -> np.ndarray:
        edges = np.linspace(self.depth_min, self.depth_max, self.num_bins + 1)
        return 0.5 * (edges[:-1] + edges[1:])

    def bin_of(self, depth: np.ndarray) -> np.ndarray:
        width = (self.depth_max - self.depth_min) / self.num_bins
        idx = np.floor((depth - self.depth_min) / width).astype(np.int64)
        return np.clip(idx, 0, self.num_bins - 1)


@dataclass
class LinearProbeParams:
    weight: np.ndarray  # [outputs, channels]
    bias: np.ndarray  # [outputs]
    task: str  # depth | segmentation

    def logits(self, features: np.ndarray) -> np.ndarray:
        """features: [..., channels] -> [..., outputs]."""
        return features @ self.weight.T + self.bias


@dataclass
class ProbeTrainConfig:
    epochs: int = 60
    learning_rate: float = 0.05
    batch_positions: int = 0  # 0 = full batch


def knn_classify(
    train_vectors: np.ndarray, train_labels: np.ndarray, query_vector: np.ndarray, k: int
) -> int:
    """Majority label among the k most cosine-similar neighbors. Ties break by
    summed similarity, then by the lowest label id."""
    n = train_vectors.shape[0]
    if n == 0:
        raise ValueError("empty training set")
    if k > n:
        raise ValueError(f"k={k} exceeds training-set size {n}")
    norms = np.linalg.norm(train_vectors, axis=1)
    qn = np.linalg.norm(query_vector)
    sims = np.zeros(n)
    alive = norms > 1e-12
    if qn > 1e-12:
        sims[alive] = (train_vectors[alive] @ query_vector) / (norms[alive] * qn)
    top = np.argsort(-sims, kind="stable")[:k]
    votes: dict[int, list[float]] = {}
    for i in top:
        votes.setdefault(int(train_labels[i]), [0, 0.0])
        votes[int(train_labels[i])][0] += 1
        votes[int(train_labels[i])][1] += sims[i]
    best = sorted(votes.items(), key=lambda kv: (-kv[1][0], -kv[1][1], kv[0]))
    return best[0][0]


def train_linear_probe(
    features: np.ndarray,
    targets: np.ndarray,
    task: str,
    config: ProbeTrainConfig | None = None,
    num_outputs: int | None = None,
    seed: int = 0,
) -> LinearProbeParams:
    """Softmax cross-entropy probe on per-position features [N, C] against
    integer targets [N] (depth bin index or class id). Full-batch Adam with a
    fixed epoch budget; deterministic from the seed."""
    config = config or ProbeTrainConfig()
    if features.ndim != 2 or features.shape[0] != targets.shape[0]:
        raise ValueError("features must be [N, C] aligned with targets [N]")
    if num_outputs is None:
        num_outputs = 256 if task == "depth" else NUM_CLASSES
    gen = torch.Generator().manual_seed(seed)
    x = torch.from_numpy(np.ascontiguousarray(features, dtype=np.float32))
    y = torch.from_numpy(np.ascontiguousarray(targets, dtype=np.int64))
    weight = torch.zeros(num_outputs, x.shape[1], requires_grad=True)
    bias = torch.zeros(num_outputs, requires_grad=True)
    with torch.no_grad():
        weight.normal_(0.0, 0.01, generator=gen)
    opt = torch.optim.Adam([weight, bias], lr=config.learning_rate)
    rng = np.random.default_rng(seed)
    for _ in range(config.epochs):
        if config.batch_positions and config.batch_positions < x.shape[0]:
            idx = torch.as_tensor(rng.choice(x.shape[0], config.batch_positions, replace=False))
            xb, yb = x[idx], y[idx]
        else:
            xb, yb = x, y
        loss = F.cross_entropy(xb @ weight.T + bias, yb)
        if not torch.isfinite(loss):
            raise RuntimeError("probe training diverged")
        opt.zero_grad()
        loss.backward()
        opt.step()
    return LinearProbeParams(
        weight=weight.detach().numpy(), bias=bias.detach().numpy(), task=task
    )


def probe_loss(probe: LinearProbeParams, features: np.ndarray, targets: np.ndarray) -> float:
    logits = torch.from_numpy(probe.logits(features).astype(np.float32))
    return float(F.cross_entropy(logits, torch.from_numpy(targets.astype(np.int64))))


def depth_decode(bin_probabilities: np.ndarray, binning: DepthBinning) -> np.ndarray:
    """Expectation of bin centers under per-position probabilities
    [..., num_bins] -> [...]."""
    p = np.asarray(bin_probabilities, dtype=np.float64)
    if p.shape[-1] != binning.num_bins:
        raise ValueError("probability vector length != num_bins")
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-5):
        raise ValueError("malformed probability distribution")
    return p @ binning.centers()


def depth_rmse(predicted: np.ndarray, ground_truth: np.ndarray, valid_mask: np.ndarray | None = None) -> float:
    predicted = np.asarray(predicted, dtype=np.float64)
    ground_truth = np.asarray(ground_truth, dtype=np.float64)
    if predicted.shape != ground_truth.shape:
        raise ValueError("shape mismatch")
    if valid_mask is None:
        valid_mask = np.ones(predicted.shape, dtype=bool)
    if not valid_mask.any():
        raise ValueError("empty valid mask")
    err = predicted[valid_mask] - ground_truth[valid_mask]
    return float(np.sqrt(np.mean(err**2)))


def segmentation_miou(
    predicted_labels: np.ndarray, ground_truth_labels: np.ndarray, num_classes: int
) -> tuple[float, dict[int, float]]:
    """IoU per class over the whole set; mIoU averages classes present in the
    ground truth. Predictions must already be at ground-truth resolution."""
    pred = np.asarray(predicted_labels)
    gt = np.asarray(ground_truth_labels)
    if pred.shape != gt.shape:
        raise ValueError("shape mismatch")
    if pred.min() < 0 or pred.max() >= num_classes or gt.min() < 0 or gt.max() >= num_classes:
        raise ValueError("class id out of range")
    per_class = {}
    for c in range(num_classes):
        gt_c = gt == c
        if not gt_c.any():
            continue
        pred_c = pred == c
        inter = np.logical_and(pred_c, gt_c).sum()
        union = np.logical_or(pred_c, gt_c).sum()
        per_class[c] = float(inter / union)
    miou = float(np.mean(list(per_class.values())))
    return miou, per_class


def nearest_upsample(labels: np.ndarray, size: int) -> np.ndarray:
    """Nearest-neighbor upsample a [h, w] label map to [size, size]."""
    h, w = labels.shape
    rows = (np.arange(size) * h // size)
    cols = (np.arange(size) * w // size)
    return labels[np.ix_(rows, cols)]


def downsample_targets(target: np.ndarray, feat_size: int, reduce: str) -> np.ndarray:
    """Downsample a [H, W] target map to feature resolution: nearest pick for
    labels, block mean for depth."""
    h = target.shape[0]
    if reduce == "nearest":
        idx = (np.arange(feat_size) * h // feat_size) + (h // feat_size) // 2
        return target[np.ix_(idx, idx)]
    block = h // feat_size
    return target.reshape(feat_size, block, feat_size, block).mean(axis=(1, 3))


# ---------------------------------------------------------------------------
# Feature gathering for probe protocols


def source_request(source: str, t: int) -> ExtractionRequest:
    if source == "noisy_teacher":
        return ExtractionRequest(model_ref="teacher", input_mode="noisy_teacher", t=t)
    if source in ("student", "projected_student"):
        return ExtractionRequest(model_ref="student", input_mode="clean_student")
    raise ValueError(f"unknown feature source {source!r}")


def gather_position_features(
    scenes: list[SceneSample],
    service: FeatureService,
    source: str,
    t: int,
    stage: int,
    task: str,
    binning: DepthBinning | None = None,
) -> tuple[np.ndarray, np.ndarray, int]:
    """Per-position (feature, target) pairs across scenes at one tap. Targets
    are depth-bin indices or class ids at feature resolution. Returns
    (features [N, C], targets [N], feature_size)."""
    feats, targets = [], []
    feat_size = None
    for scene in scenes:
        img = torch.from_numpy(scene.image)
        stack = service.extract(source_request(source, t), img)
        if source == "projected_student":
            stack = service.project_at_timestep(stack, t)
        fm = stack.array(stage)  # [C, h, w]
        feat_size = fm.shape[-1]
        pos = fm.reshape(fm.shape[0], -1).T  # [h*w, C]
        feats.append(pos)
        if task == "depth":
            d = downsample_targets(scene.depth, feat_size, "mean")
            targets.append((binning or DepthBinning()).bin_of(d).reshape(-1))
        else:
            m = downsample_targets(scene.mask, feat_size, "nearest")
            targets.append(m.reshape(-1))
    return np.concatenate(feats), np.concatenate(targets), feat_size


def evaluate_depth_probe(
    probe: LinearProbeParams,
    scenes: list[SceneSample],
    service: FeatureService,
    source: str,
    t: int,
    stage: int,
    binning: DepthBinning,
) -> float:
    """RMSE of expectation-decoded depth at feature resolution."""
    feats, _, feat_size = gather_position_features(scenes, service, source, t, stage, "depth", binning)
    logits = probe.logits(feats)
    prob = torch.softmax(torch.from_numpy(logits.astype(np.float64)), dim=-1).numpy()
    decoded = depth_decode(prob, binning)
    gts = np.concatenate(
        [downsample_targets(s.depth, feat_size, "mean").reshape(-1) for s in scenes]
    )
    return depth_rmse(decoded, gts)


def evaluate_seg_probe(
    probe: LinearProbeParams,
    scenes: list[SceneSample],
    service: FeatureService,
    source: str,
    t: int,
    stage: int,
) -> float:
    """mIoU at ground-truth resolution after nearest-neighbor upsampling."""
    preds, gts = [], []
    for scene in scenes:
        img = torch.from_numpy(scene.image)
        stack = service.extract(source_request(source, t), img)
        if source == "projected_student":
            stack = service.project_at_timestep(stack, t)
        fm = stack.array(stage)
        logits = probe.logits(fm.reshape(fm.shape[0], -1).T)
        labels = logits.argmax(axis=1).reshape(fm.shape[1], fm.shape[2])
        preds.append(nearest_upsample(labels, scene.mask.shape[0]))
        gts.append(scene.mask)
    miou, _ = segmentation_miou(np.stack(preds), np.stack(gts), NUM_CLASSES)
    return miou


def gather_pooled(
    scenes: list[SceneSample], service: FeatureService, source: str, t: int, stage: int
) -> tuple[np.ndarray, np.ndarray]:
    vecs, labels = [], []
    for scene in scenes:
        stack = service.extract(source_request(source, t), torch.from_numpy(scene.image))
        if source == "projected_student":
            stack = service.project_at_timestep(stack, t)
        vecs.append(pool(stack, stage, "mean"))
        labels.append(scene.label)
    return np.stack(vecs), np.array(labels)


def evaluate_knn(
    train_scenes: list[SceneSample],
    test_scenes: list[SceneSample],
    service: FeatureService,
    source: str,
    t: int,
    stage: int,
    k: int = 10,
) -> float:
    train_v, train_l = gather_pooled(train_scenes, service, source, t, stage)
    test_v, test_l = gather_pooled(test_scenes, service, source, t, stage)
    k = min(k, len(train_l))
    correct = sum(
        knn_classify(train_v, train_l, v, k) == l for v, l in zip(test_v, test_l)
    )
    return correct / len(test_l)


def probe_timestep_sweep(
    train_scenes: list[SceneSample],
    test_scenes: list[SceneSample],
    service: FeatureService,
    timesteps: list[int],
    task: str,
    sources: list[str],
    stages: list[int],
    probe_config: ProbeTrainConfig | None = None,
    seed: int = 0,
    knn_k: int = 10,
) -> list[dict]:
    """One probe (or kNN evaluation) per (source, t, feature_map) cell. Emits
    rows `source,t,feature_map,metric_name,metric_value,seed`."""
    binning = DepthBinning()
    metric_name = {"depth": "rmse", "seg": "miou", "knn": "accuracy"}[task]
    rows = []
    for source in sources:
        if source == "projected_student" and service.heads is None:
            raise ValueError("projected_student sweep requires projection heads")
        for stage in stages:
            for t in timesteps:
                if task == "knn":
                    value = evaluate_knn(train_scenes, test_scenes, service, source, t, stage, knn_k)
                elif task == "depth":
                    feats, targs, _ = gather_position_features(
                        train_scenes, service, source, t, stage, "depth", binning)
                    probe = train_linear_probe(feats, targs, "depth", probe_config, seed=seed)
                    value = evaluate_depth_probe(probe, test_scenes, service, source, t, stage, binning)
                elif task == "seg":
                    feats, targs, _ = gather_position_features(
                        train_scenes, service, source, t, stage, "seg")
                    probe = train_linear_probe(feats, targs, "segmentation", probe_config, seed=seed)
                    value = evaluate_seg_probe(probe, test_scenes, service, source, t, stage)
                else:
                    raise ValueError(f"unknown task {task!r}")
                rows.append({
                    "source": source, "t": t, "feature_map": stage,
                    "metric_name": metric_name, "metric_value": value, "seed": seed,
                })
    return rows


def write_probe_csv(path: str, rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["source", "t", "feature_map", "metric_name", "metric_value", "seed"])
        for r in rows:
            writer.writerow([r["source"], r["t"], r["feature_map"], r["metric_name"],
                             f"{r['metric_value']:.6f}", r["seed"]])
