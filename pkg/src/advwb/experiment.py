"""Desk-scale end-to-end run: synth -> train two heads -> sweep -> maps.

Everything is keyed on ``ExperimentConfig.seed``; two runs with the same
config write byte-identical files.
"""

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .attacks import DEFAULT_SCHEDULE, AttackConfig, EpsilonSchedule
from .data_io import SynthConfig, generate_synthetic, save_container, save_dataset
from .explain import default_target_layer, difference_map, export_maps, grad_cam, map_correlation, saliency_overlap
from .kernels import BACKEND
from .model import ModelConfig, build_model, save_model
from .report import Report, content_hash, render_svg, robustness_curve, write_curve_csv
from .trainer import TrainConfig, accuracy, train

HEADS = ("baseline", "attention")


@dataclass
class ExperimentConfig:
    seed: int = 7
    n_train: int = 2000
    n_test: int = 500
    image_size: int = 32
    max_epochs: int = 12
    patience: int = 40
    batch_size: int = 64
    attack_steps: int = 10
    attack_batch_size: int = 32
    schedule: tuple = DEFAULT_SCHEDULE
    sample_images: int = 8
    overlap_epsilons: tuple = (0.02, 0.08)
    workers: int = 1
    log_x: bool = True
    stage_channels: tuple = (16, 32, 64)

    def __post_init__(self):
        self.schedule = tuple(EpsilonSchedule(self.schedule))
        self.overlap_epsilons = tuple(float(e) for e in self.overlap_epsilons)
        self.stage_channels = tuple(self.stage_channels)
        for e in self.overlap_epsilons:
            if e not in self.schedule:
                raise ValueError(f"overlap epsilon {e} is not in the schedule")

    def to_dict(self):
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d


@dataclass
class ExperimentResult:
    out_dir: Path
    clean_accuracy: dict
    curves: dict
    overlap: dict  # head -> {eps: mean overlap}
    correlation: dict  # head -> {eps: mean clean-vs-adversarial Grad-CAM correlation}
    files: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)


def _dump_json(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def run_experiment(out_dir, config=None, progress=None):
    config = config or ExperimentConfig()
    say = progress or (lambda msg: None)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _dump_json(config.to_dict(), out / "experiment_config.json")
    timings = {}
    t0 = time.perf_counter()

    # separate seeds for the two splits so test images are never training images
    train_set = generate_synthetic(SynthConfig(n=config.n_train, size=config.image_size, seed=config.seed))
    test_set = generate_synthetic(SynthConfig(n=config.n_test, size=config.image_size, seed=config.seed + 1))
    save_dataset(train_set, out / "data" / "train")
    save_dataset(test_set, out / "data" / "test")
    timings["synth"] = time.perf_counter() - t0

    tcfg = TrainConfig(
        max_epochs=config.max_epochs, patience=config.patience, batch_size=config.batch_size, seed=config.seed
    )
    acfg = AttackConfig(steps=config.attack_steps, seed=config.seed, batch_size=config.attack_batch_size)
    schedule = EpsilonSchedule(config.schedule)
    models, curves, results, clean = {}, {}, {}, {}
    for head in HEADS:
        t = time.perf_counter()
        mcfg = ModelConfig(
            input_shape=(1, config.image_size, config.image_size), head_kind=head, stage_channels=config.stage_channels
        )
        model = build_model(mcfg, seed=config.seed)
        model, history = train(model, train_set, tcfg, progress=lambda m, h=head: say(f"[{h}] {m}"))
        path = out / f"model_{head}.atwb"
        save_model(model, path)
        history.write_csv(out / f"history_{head}.csv")
        clean[head] = accuracy(model, test_set.images, test_set.labels)
        timings[f"train_{head}"] = time.perf_counter() - t
        say(f"[{head}] clean test accuracy {clean[head]:.4f}")

        t = time.perf_counter()
        curve, res = robustness_curve(
            model, test_set.images, test_set.labels, schedule, acfg, config.workers,
            model_id=content_hash(path), return_results=True,
        )
        write_curve_csv(curve, out / f"curve_{head}.csv")
        timings[f"attack_{head}"] = time.perf_counter() - t
        say(f"[{head}] accuracies " + " ".join(f"{a:.3f}" for a in curve.accuracies))
        models[head], curves[head], results[head] = model, curve, res

    report = Report(
        [curves[h] for h in HEADS],
        metadata={
            "experiment": config.to_dict(),
            "train_config": tcfg.to_dict(),
            "attack_config": acfg.to_dict(),
            "models": {h: content_hash(out / f"model_{h}.atwb") for h in HEADS},
            "gradcam_layer": default_target_layer(models[HEADS[0]]),
        },
        log_x=config.log_x,
    )
    render_svg(report, out / "robustness.svg")

    t = time.perf_counter()
    overlap, correlation = _maps(out / "maps", config, test_set, models, results, schedule)
    timings["maps"] = time.perf_counter() - t
    timings["total"] = time.perf_counter() - t0

    summary = {
        "clean_accuracy": clean,
        "curves": {h: {"epsilon": curves[h].epsilons, "accuracy": curves[h].accuracies} for h in HEADS},
        "saliency_overlap": overlap,
        "gradcam_correlation": correlation,
        # overlap a spatially uniform perturbation would score
        "mask_area_fraction": float(test_set.masks.mean()),
        "backend": BACKEND,
    }
    _dump_json(summary, out / "summary.json")
    # wall-clock times differ between runs, so they live outside the reproducible set
    _dump_json({k: round(v, 3) for k, v in timings.items()}, out / "timings.json")
    files = sorted(str(p.relative_to(out)) for p in out.rglob("*") if p.is_file())
    return ExperimentResult(out, clean, curves, overlap, correlation, files, timings)


def _maps(directory, config, test_set, models, results, schedule):
    """Grad-CAM and difference maps for sample images; overlap over the whole test set."""
    k = min(config.sample_images, len(test_set))
    sample = np.arange(k)
    overlap, correlation = {}, {}
    for head in HEADS:
        model = models[head]
        overlap[head], correlation[head] = {}, {}
        for eps in config.overlap_epsilons:
            res = results[head][schedule.index(eps)]
            scores = [
                saliency_overlap(difference_map(test_set.images[i], res.x_adv[i]), test_set.masks[i])
                for i in range(len(test_set))
                if np.any(res.x_adv[i] != test_set.images[i])
            ]
            overlap[head][f"{eps:g}"] = float(np.mean(scores)) if scores else 0.0
            corrs = []
            for i in sample:
                label = int(test_set.labels[i])
                clean_map = grad_cam(model, test_set.images[i], label)
                adv_map = grad_cam(model, res.x_adv[i], label)
                diff = difference_map(test_set.images[i], res.x_adv[i])
                if eps == config.overlap_epsilons[0]:
                    export_maps(directory, i, 0.0, head, amap=clean_map)
                export_maps(directory, i, eps, head, amap=adv_map, diff=diff)
                corrs.append(map_correlation(clean_map, adv_map))
            finite = [c for c in corrs if np.isfinite(c)]
            correlation[head][f"{eps:g}"] = float(np.mean(finite)) if finite else float("nan")
    save_container({"images": test_set.images[sample], "masks": test_set.masks[sample]}, directory / "samples.atwb")
    return overlap, correlation
