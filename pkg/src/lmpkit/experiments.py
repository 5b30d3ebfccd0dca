"""Comparison experiments across pooling kernels on the synthetic task.

One call to :func:`run_comparison` trains a model per pooling kind on one
seed and reports feature entropy, classification accuracy and keypoint PCK.
Everything written to disk is a function of the arguments only.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .metrics import PckConfig, PckReport, entropy_summary, greedy_pck, write_entropy_csv, write_pck_csv
from .pooling import PoolingKernel, PoolKind
from .synth import SceneSpec, generate_dataset, stack_scenes
from .trainer import (ToyModel, TrainConfig, _features_chunked, evaluate, predict_keypoints_batch,
                      train)

log = logging.getLogger(__name__)

RANDOM_LABEL = "random"


def entropy_report(models: dict, images: np.ndarray) -> list:
    """``[(label, mean, std, n_images)]`` of final-feature entropy per model."""
    rows = []
    for label, model in models.items():
        mean, std, n = entropy_summary(_features_chunked(model, images))
        rows.append((label, mean, std, n))
    return rows


def random_keypoints(n_images: int, k: int, image_size, seed: int) -> list:
    """``k`` uniformly random pixel locations per image."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 99]))
    h, w = image_size
    return [[(float(r), float(c)) for r, c in zip(rng.uniform(0, h, k), rng.uniform(0, w, k))]
            for _ in range(n_images)]


def table_column(label: str) -> str:
    """``lmp(eps=0.1)`` -> ``LMP(ε=0.1)``, ``avg`` -> ``AVG``."""
    return label.upper().replace("EPS", "ε")


def write_accuracy_table(path, accuracies: dict) -> None:
    """One header row of kernel columns, one row of accuracies in percent."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow([table_column(label) for label in accuracies])
        out.writerow([f"{100.0 * a:.6f}" for a in accuracies.values()])


@dataclass
class Arm:
    """One trained configuration of the comparison."""
    label: str
    kernel: PoolingKernel
    maskout: bool = False


def default_arms() -> list:
    return [Arm("avg", PoolingKernel(PoolKind.AVERAGE), maskout=True),
            Arm("max", PoolingKernel(PoolKind.MAX)),
            Arm("lmp(eps=0.1)", PoolingKernel(PoolKind.LEAKY_MAX, 0.1), maskout=True),
            Arm("lmp(eps=0.01)", PoolingKernel(PoolKind.LEAKY_MAX, 0.01))]


@dataclass
class ComparisonResult:
    seed: int
    entropy: list                                  # [(label, mean, std, n)]
    accuracy: dict                                 # label -> test accuracy
    pck: dict                                      # label -> PckReport
    models: dict = field(default_factory=dict)     # label -> (model, replica)

    def entropy_of(self, label) -> float:
        return next(m for l, m, _, _ in self.entropy if l == label)


def run_comparison(base: TrainConfig, spec: SceneSpec = SceneSpec(), n_train_per_class: int = 500,
                   n_test_per_class: int = 100, seed: int = 0, arms=None,
                   pck_cfg: PckConfig = PckConfig(), k=None, out_dir=None) -> ComparisonResult:
    """Train every arm on one seed and collect the three reports.

    Training seeds and data both derive from ``seed``. Keypoint PCK uses
    ``k`` predictions per image (default: planted keypoints + 1) for every
    arm trained with mask-out, plus a uniform random baseline.
    """
    arms = default_arms() if arms is None else arms
    k = spec.num_unique_per_image + 1 if k is None else k
    train_set, test_set = generate_dataset(spec, n_train_per_class, seed, n_test_per_class)
    x_test, y_test = stack_scenes(test_set)
    gts = [s.keypoints for s in test_set]
    clustering = dataclasses.replace(base.clustering, k=k)

    models, accuracy, pck = {}, {}, {}
    for arm in arms:
        cfg = dataclasses.replace(base, seed=seed, pooling_kind=arm.kernel.kind,
                                  epsilon=arm.kernel.epsilon, enable_maskout=arm.maskout,
                                  clustering=clustering)
        log.info("seed %d: training %s", seed, arm.label)
        res = train(cfg, train_set, num_classes=spec.num_classes)
        models[arm.label] = (res.model, res.replica)
        accuracy[arm.label] = evaluate(res.model, x_test, y_test)[1]
        if arm.maskout:
            preds = predict_keypoints_batch(res.model, res.replica, x_test, cfg.selection, clustering,
                                            cfg.mask_radius, cfg.mask_mode)
            pck[arm.label] = greedy_pck(preds, gts, pck_cfg, spec.image_size, k=k)
    pck[RANDOM_LABEL] = greedy_pck(random_keypoints(len(test_set), k, spec.image_size, seed),
                                   gts, pck_cfg, spec.image_size, k=k)
    entropy = entropy_report({label: m for label, (m, _) in models.items()}, x_test)
    result = ComparisonResult(seed=seed, entropy=entropy, accuracy=accuracy, pck=pck, models=models)
    if out_dir is not None:
        write_comparison(result, out_dir)
    return result


def write_comparison(result: ComparisonResult, out_dir) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"entropy": out_dir / "entropy.csv", "pck": out_dir / "pck.csv",
             "accuracy": out_dir / "accuracy.csv"}
    write_entropy_csv(paths["entropy"], result.entropy)
    write_pck_csv(paths["pck"], list(result.pck.items()))
    write_accuracy_table(paths["accuracy"], result.accuracy)
    return paths
