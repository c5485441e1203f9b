"""Command-line entry point orchestrating the whole lifecycle: data
generation, teacher training, consolidation, evaluation suites, the noise
analysis, ablation grids and plots. Every command writes into its own
timestamped run directory with the resolved config and an input manifest."""

from __future__ import annotations

import argparse
import csv
import datetime
import hashlib
import json
import os
import sys
import traceback

import numpy as np
import torch

from . import correspondence, probes, scenes, variance
from .backbone import (
    BackboneConfig, TeacherTrainConfig, init_denoiser, load_denoiser,
    save_denoiser, train_teacher,
)
from .config import ConfigError, RunConfig, load_config
from .consolidate import (
    AlignmentConfig, init_heads, init_student_from_teacher, load_heads,
    run_distillation, save_heads,
)
from .features import ExtractionRequest, FeatureService
from .schedule import build_schedule


# ---------------------------------------------------------------------------
# Workspace helpers


def _file_sha(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def make_run_dir(out: str, command: str) -> str:
    stamp = datetime.datetime.now(datetime.timezone.utc).strftime("%Y%m%dT%H%M%S_%f")
    run_dir = os.path.join(out, "runs", f"{command}-{stamp}")
    os.makedirs(run_dir)
    return run_dir


def write_run_metadata(run_dir: str, command: str, config: RunConfig, inputs: list[str]) -> None:
    with open(os.path.join(run_dir, "config.resolved.json"), "w") as f:
        f.write(config.to_json())
    manifest = {
        "command": command,
        "inputs": {p: _file_sha(p) for p in inputs},
        "config_sha": hashlib.sha256(config.to_json().encode()).hexdigest(),
    }
    with open(os.path.join(run_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)


def require(path: str, hint: str) -> str:
    if not os.path.exists(path):
        raise RuntimeError(f"missing required artifact {path}; run `cleandift {hint}` first")
    return path


# Deterministic seed offsets for the synthetic splits.
_SPLIT_SEEDS = {"teacher": 1, "distill": 2, "heldout": 3, "pairs": 4,
                "probe_train": 5, "probe_test": 6}


def _canvas(config: RunConfig) -> int:
    return int(config["backbone.image_size"])


def scene_split(config: RunConfig, seed: int, split: str) -> list[scenes.SceneSample]:
    counts = {
        "teacher": config["data.num_teacher"],
        "distill": config["data.num_distill"],
        "heldout": config["data.num_heldout"],
        "probe_train": config["data.num_probe_train"],
        "probe_test": config["data.num_probe_test"],
    }
    return scenes.generate_scene_set(
        int(counts[split]), _canvas(config), seed * 100 + _SPLIT_SEEDS[split]
    )


def pair_split(config: RunConfig, seed: int):
    return scenes.generate_pair_set(
        int(config["data.num_pairs"]), _canvas(config), seed * 100 + _SPLIT_SEEDS["pairs"]
    )


def _backbone_config(config: RunConfig) -> BackboneConfig:
    return BackboneConfig(
        image_size=int(config["backbone.image_size"]),
        base_channels=int(config["backbone.base_channels"]),
        stage_multipliers=config.stage_multipliers(),
        timestep_embed_dim=int(config["backbone.timestep_embed_dim"]),
    )


def _alignment_config(config: RunConfig, steps: int | None = None) -> AlignmentConfig:
    return AlignmentConfig(
        metric=str(config["distill.metric"]),
        use_heads=bool(config["distill.use_heads"]),
        bins=int(config["distill.bins"]),
        steps=int(steps if steps is not None else config["distill.steps"]),
        batch_size=int(config["distill.batch_size"]),
        learning_rate=float(config["distill.learning_rate"]),
        warmup_steps=int(config["distill.warmup_steps"]),
        head_conditioning=str(config["distill.head_conditioning"]),
        head_gating=str(config["distill.head_gating"]),
        head_pretraining=str(config["distill.head_pretraining"]),
        head_pretrain_steps=int(config["distill.head_pretrain_steps"]),
    )


def _service(out: str, with_student: bool = True, with_heads: bool = True) -> tuple[FeatureService, list[str]]:
    inputs = [require(os.path.join(out, "teacher.ckpt"), "train-teacher")]
    teacher, schedule = load_denoiser(inputs[0])
    student = None
    heads = None
    if with_student:
        inputs.append(require(os.path.join(out, "student.ckpt"), "distill"))
        student, _ = load_denoiser(inputs[-1])
    if with_heads and os.path.exists(os.path.join(out, "heads.ckpt")):
        inputs.append(os.path.join(out, "heads.ckpt"))
        heads = load_heads(inputs[-1])
    return FeatureService(teacher, student, schedule, heads=heads), inputs


# ---------------------------------------------------------------------------
# Commands


def cmd_gen_data(config: RunConfig, seed: int, out: str) -> str:
    run_dir = make_run_dir(out, "gen-data")
    data_dir = os.path.join(out, "data")
    for split in ("teacher", "distill", "probe_train", "probe_test"):
        scenes.save_scene_dataset(os.path.join(data_dir, split), scene_split(config, seed, split))
    pairs = pair_split(config, seed)
    flat = [s for pair in pairs for s in pair[:2]]
    scenes.save_scene_dataset(os.path.join(data_dir, "pairs"), flat, [p[2] for p in pairs])
    write_run_metadata(run_dir, "gen-data", config, [])
    with open(os.path.join(run_dir, "datasets.json"), "w") as f:
        json.dump({"data_dir": data_dir,
                   "splits": {s: len(scene_split(config, seed, s)) for s in
                              ("teacher", "distill", "probe_train", "probe_test")},
                   "pairs": len(pairs)}, f, indent=1)
    return run_dir


def cmd_train_teacher(config: RunConfig, seed: int, out: str) -> str:
    run_dir = make_run_dir(out, "train-teacher")
    schedule = build_schedule(int(config["schedule.T"]), str(config["schedule.family"]))
    images = scenes.images_tensor(scene_split(config, seed, "teacher"))
    model = init_denoiser(_backbone_config(config), seed)
    model, curve = train_teacher(
        images, schedule,
        TeacherTrainConfig(
            steps=int(config["teacher.steps"]),
            batch_size=int(config["teacher.batch_size"]),
            learning_rate=float(config["teacher.learning_rate"]),
        ),
        seed=seed, model=model,
    )
    save_denoiser(os.path.join(out, "teacher.ckpt"), model, schedule)
    with open(os.path.join(run_dir, "teacher_loss.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "eps_mse"])
        for i, v in enumerate(curve):
            writer.writerow([i, f"{v:.6f}"])
    write_run_metadata(run_dir, "train-teacher", config, [])
    return run_dir


def cmd_distill(config: RunConfig, seed: int, out: str) -> str:
    run_dir = make_run_dir(out, "distill")
    teacher_path = require(os.path.join(out, "teacher.ckpt"), "train-teacher")
    teacher, schedule = load_denoiser(teacher_path)
    images = scenes.images_tensor(scene_split(config, seed, "distill"))
    heldout = scenes.images_tensor(scene_split(config, seed, "heldout"))
    acfg = _alignment_config(config)
    student = init_student_from_teacher(teacher)
    heads = init_heads(teacher, acfg, seed=seed + 11)
    student, heads, log = run_distillation(
        teacher, student, heads, images, schedule, acfg, seed=seed, heldout=heldout
    )
    save_denoiser(os.path.join(out, "student.ckpt"), student, schedule)
    save_heads(os.path.join(out, "heads.ckpt"), heads)
    with open(os.path.join(run_dir, "distill_log.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        k = len(log.stage_sims[0]) if log.stage_sims else 0
        writer.writerow(["step", "loss"] + [f"sim_stage{i}" for i in range(k)])
        for i, (loss, sims) in enumerate(zip(log.losses, log.stage_sims)):
            writer.writerow([i, f"{loss:.6f}"] + [f"{s:.6f}" for s in sims])
    with open(os.path.join(run_dir, "bin_similarity.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["bin", "sim_start", "sim_end"])
        for i, (a, b) in enumerate(zip(log.bin_sims_start, log.bin_sims_end)):
            writer.writerow([i, f"{a:.6f}", f"{b:.6f}"])
    write_run_metadata(run_dir, "distill", config, [teacher_path])
    return run_dir


def cmd_eval_pck(config: RunConfig, seed: int, out: str) -> str:
    run_dir = make_run_dir(out, "eval-pck")
    service, inputs = _service(out)
    pairs = pair_split(config, seed)
    alpha = float(config["eval.alpha"])
    stage = int(config["eval.match_stage"])
    T = service.schedule.T
    reference_t = max(1, T // 4)
    rows = []
    baseline = ExtractionRequest(model_ref="teacher", input_mode="noisy_teacher",
                                 t=reference_t, ensemble_n=int(config["eval.ensemble_n"]))
    p_img, p_bbox, n = correspondence.evaluate_pairs(pairs, service, baseline, alpha, stage)
    rows.append({"mode": f"noisy_teacher_ens{baseline.ensemble_n}", "t": reference_t,
                 "pck_img": p_img, "pck_bbox": p_bbox, "n_keypoints": n})
    student_req = ExtractionRequest(model_ref="student", input_mode="clean_student")
    p_img, p_bbox, n = correspondence.evaluate_pairs(pairs, service, student_req, alpha, stage)
    rows.append({"mode": "student", "t": 0, "pck_img": p_img, "pck_bbox": p_bbox,
                 "n_keypoints": n})
    correspondence.write_sweep_csv(os.path.join(run_dir, "pck.csv"), rows)
    sweep = correspondence.timestep_sweep(
        pairs, service, config.eval_timesteps(), alpha, stage
    )
    correspondence.write_sweep_csv(os.path.join(run_dir, "pck_timestep_sweep.csv"), sweep)
    write_run_metadata(run_dir, "eval-pck", config, inputs)
    return run_dir


def cmd_eval_probe(config: RunConfig, seed: int, out: str, task: str) -> str:
    if task not in ("depth", "seg", "knn"):
        raise ConfigError(f"unknown probe task {task!r}")
    run_dir = make_run_dir(out, f"eval-probe-{task}")
    service, inputs = _service(out)
    train_sc = scene_split(config, seed, "probe_train")
    test_sc = scene_split(config, seed, "probe_test")
    probe_config = probes.ProbeTrainConfig(epochs=int(config["eval.probe_epochs"]))
    sources = ["noisy_teacher", "student"]
    if service.heads is not None:
        sources.append("projected_student")
    if task == "knn":
        stages = list(range(service.teacher.config.num_taps))
    else:
        stages = [int(config["eval.probe_stage"])]
    rows = probes.probe_timestep_sweep(
        train_sc, test_sc, service, config.eval_timesteps(), task, sources, stages,
        probe_config, seed=seed, knn_k=int(config["eval.knn_k"]),
    )
    probes.write_probe_csv(os.path.join(run_dir, f"probe_{task}.csv"), rows)
    if task == "depth":
        transfer_rows = probe_transfer_table(config, service, train_sc, test_sc, probe_config, seed)
        with open(os.path.join(run_dir, "probe_transfer.csv"), "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["probe_source", "feature_source", "metric_name", "metric_value"])
            for r in transfer_rows:
                writer.writerow([r["probe_source"], r["feature_source"], "rmse",
                                 f"{r['rmse']:.6f}"])
    write_run_metadata(run_dir, f"eval-probe-{task}", config, inputs)
    return run_dir


def probe_transfer_table(
    config: RunConfig,
    service: FeatureService,
    train_sc,
    test_sc,
    probe_config: probes.ProbeTrainConfig,
    seed: int,
) -> list[dict]:
    """Three-way depth-probe transfer: teacher probe on teacher features,
    student probe on student features, teacher probe on student features."""
    binning = probes.DepthBinning()
    stage = int(config["eval.probe_stage"])
    t_ref = max(1, service.schedule.T // 4)
    f_t, y_t, _ = probes.gather_position_features(
        train_sc, service, "noisy_teacher", t_ref, stage, "depth", binning)
    probe_teacher = probes.train_linear_probe(f_t, y_t, "depth", probe_config, seed=seed)
    f_s, y_s, _ = probes.gather_position_features(
        train_sc, service, "student", 0, stage, "depth", binning)
    probe_student = probes.train_linear_probe(f_s, y_s, "depth", probe_config, seed=seed)
    rows = []
    for probe, probe_src, feat_src, t in (
        (probe_teacher, "noisy_teacher", "noisy_teacher", t_ref),
        (probe_student, "student", "student", 0),
        (probe_teacher, "noisy_teacher", "student", 0),
    ):
        rmse = probes.evaluate_depth_probe(probe, test_sc, service, feat_src, t, stage, binning)
        rows.append({"probe_source": probe_src, "feature_source": feat_src, "rmse": rmse})
    return rows


def cmd_analyze_noise(config: RunConfig, seed: int, out: str) -> str:
    run_dir = make_run_dir(out, "analyze-noise")
    teacher_path = require(os.path.join(out, "teacher.ckpt"), "train-teacher")
    teacher, schedule = load_denoiser(teacher_path)
    images = scenes.images_tensor(scene_split(config, seed, "heldout"))
    ts = sorted(set([0] + config.eval_timesteps() + [schedule.T]))
    report = variance.noise_decomposition_sweep(
        teacher, images, schedule, ts, stage=int(config["eval.match_stage"]), seed=seed
    )
    variance.write_variance_csv(os.path.join(run_dir, "variance.csv"), report)
    try:
        _plot_csv(os.path.join(run_dir, "variance.csv"), run_dir)
    except Exception:
        print("warning: plot rendering failed", file=sys.stderr)
    write_run_metadata(run_dir, "analyze-noise", config, [teacher_path])
    return run_dir


OBJECTIVE_GRID = [(m, h) for m in ("cosine", "l2", "l1") for h in (True, False)]
HEAD_GRID = [
    (cond, gate, pre)
    for cond in ("film", "adarms")
    for gate in ("swiglu", "swish")
    for pre in ("none", "joint")
]


def cmd_ablate(config: RunConfig, seed: int, out: str) -> str:
    run_dir = make_run_dir(out, "ablate")
    teacher_path = require(os.path.join(out, "teacher.ckpt"), "train-teacher")
    teacher, schedule = load_denoiser(teacher_path)
    images = scenes.images_tensor(scene_split(config, seed, "distill"))
    pairs = pair_split(config, seed)
    alpha = float(config["eval.alpha"])
    stage = int(config["eval.match_stage"])
    steps = int(config["distill.ablate_steps"])
    rows = []

    def run_cell(name: str, acfg: AlignmentConfig) -> None:
        student = init_student_from_teacher(teacher)
        heads = init_heads(teacher, acfg, seed=seed + 11)
        student, heads, _ = run_distillation(
            teacher, student, heads, images, schedule, acfg, seed=seed
        )
        service = FeatureService(teacher, student, schedule, heads=heads)
        p_img, p_bbox, _ = correspondence.evaluate_pairs(
            pairs, service,
            ExtractionRequest(model_ref="student", input_mode="clean_student"),
            alpha, stage,
        )
        rows.append({"cell": name, "pck_img": p_img, "pck_bbox": p_bbox})

    for metric, use_heads in OBJECTIVE_GRID:
        acfg = _alignment_config(config, steps=steps)
        acfg.metric = metric
        acfg.use_heads = use_heads
        run_cell(f"objective:{metric}|heads:{'on' if use_heads else 'off'}", acfg)
    for cond, gate, pre in HEAD_GRID:
        acfg = _alignment_config(config, steps=steps)
        acfg.head_conditioning = cond
        acfg.head_gating = gate
        acfg.head_pretraining = pre
        run_cell(f"head:{cond}|{gate}|pretrain:{pre}", acfg)
    with open(os.path.join(run_dir, "ablation.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["cell", "pck_img", "pck_bbox"])
        for r in rows:
            writer.writerow([r["cell"], f"{r['pck_img']:.6f}", f"{r['pck_bbox']:.6f}"])
    write_run_metadata(run_dir, "ablate", config, [teacher_path])
    return run_dir


def _plot_csv(csv_path: str, out_dir: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with open(csv_path, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        return
    headers = rows[0].keys()
    base = os.path.splitext(os.path.basename(csv_path))[0]
    fig, ax = plt.subplots(figsize=(6, 4))
    numeric = [h for h in headers if h not in ("mode", "source", "cell", "metric_name",
                                               "probe_source", "feature_source")]
    if "t" in headers:
        group_key = next((k for k in ("mode", "source") if k in headers), None)
        ycols = [h for h in numeric if h not in ("t", "n_keypoints", "seed", "feature_map",
                                                 "n_images", "step", "bin")]
        groups = sorted({r[group_key] for r in rows}) if group_key else [None]
        for g in groups:
            sub = [r for r in rows if group_key is None or r[group_key] == g]
            ts = [float(r["t"]) for r in sub]
            for y in ycols:
                label = f"{g}:{y}" if g else y
                ax.plot(ts, [float(r[y]) for r in sub], marker="o", label=label)
        ax.set_xlabel("t")
    else:
        ycol = next((h for h in ("pck_bbox", "metric_value", "loss", "eps_mse", "sim_end")
                     if h in headers), None)
        if ycol is None:
            plt.close(fig)
            return
        xcol = next((h for h in ("cell", "step", "bin", "probe_source") if h in headers), None)
        xs = range(len(rows))
        ax.bar(xs, [float(r[ycol]) for r in rows])
        if xcol and xcol in ("cell", "probe_source"):
            ax.set_xticks(list(xs))
            ax.set_xticklabels([r[xcol] for r in rows], rotation=60, ha="right", fontsize=6)
        ax.set_ylabel(ycol)
    ax.legend(fontsize=6)
    fig.tight_layout()
    for ext in ("svg", "png"):
        fig.savefig(os.path.join(out_dir, f"{base}.{ext}"))
    plt.close(fig)


def cmd_plot(run_dir: str) -> None:
    if not os.path.isdir(run_dir):
        raise RuntimeError(f"run directory {run_dir} does not exist")
    for name in sorted(os.listdir(run_dir)):
        if name.endswith(".csv"):
            try:
                _plot_csv(os.path.join(run_dir, name), run_dir)
            except Exception:
                print(f"warning: could not plot {name}", file=sys.stderr)


# ---------------------------------------------------------------------------
# Argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cleandift")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="TOML config file")
        p.add_argument("--preset", default="default", choices=["tiny", "default", "paper_scale"])
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default="cleandift_out", help="workspace directory")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="config override, repeatable")

    for name in ("gen-data", "train-teacher", "distill", "eval-pck", "analyze-noise", "ablate"):
        common(sub.add_parser(name))
    p = sub.add_parser("eval-probe")
    common(p)
    p.add_argument("--task", required=True, choices=["depth", "seg", "knn"])
    p = sub.add_parser("plot")
    p.add_argument("run_dir")
    return parser


def _overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for item in pairs:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not KEY=VALUE")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "plot":
        try:
            cmd_plot(args.run_dir)
        except RuntimeError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
        return 0
    try:
        config = load_config(args.preset, args.config, _overrides(args.set))
    except (ConfigError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    os.makedirs(args.out, exist_ok=True)
    torch.manual_seed(args.seed)
    np.random.seed(args.seed)
    dispatch = {
        "gen-data": cmd_gen_data,
        "train-teacher": cmd_train_teacher,
        "distill": cmd_distill,
        "eval-pck": cmd_eval_pck,
        "analyze-noise": cmd_analyze_noise,
        "ablate": cmd_ablate,
    }
    try:
        if args.command == "eval-probe":
            run_dir = cmd_eval_probe(config, args.seed, args.out, args.task)
        else:
            run_dir = dispatch[args.command](config, args.seed, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        traceback.print_exc()
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(run_dir)
    return 0


if __name__ == "__main__":
    sys.exit(main())
