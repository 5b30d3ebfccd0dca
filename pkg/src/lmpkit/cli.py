"""Command line driver: ``lmpkit {gen,train,eval,entropy,pooldemo,flops}``.

Every command takes ``--config FILE`` (JSON, optional) plus any number of
``--set dotted.key=value`` overrides, and writes under the config's
``output_dir``. Failures print one JSON object to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig, load_config, write_resolved
from .errors import ConfigError, IoError, LmpkitError
from .experiments import entropy_report
from .metrics import MatchMode, PckConfig, greedy_pck, write_entropy_csv, write_pck_csv
from .pooling import PoolingKernel, PoolKind, pool_forward
from .synth import generate_dataset, generate_split, read_split, stack_scenes, write_split
from .trainer import (Architecture, ToyModel, count_flops, load_checkpoint, predict_keypoints_batch,
                      save_checkpoint, train, write_history_csv)

log = logging.getLogger("lmpkit")

DEMO_INPUTS = {
    "dense": np.ones((1, 1, 2, 2)),
    "sparse": np.array([1.0, 0.0, 0.0, 0.0]).reshape(1, 1, 2, 2),
}


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _test_split(cfg: ExperimentConfig, data_dir):
    if data_dir is not None:
        manifest = Path(data_dir) / "test_manifest.json"
        if not manifest.exists():
            raise IoError(f"missing dataset manifest {manifest}")
        return read_split(manifest)
    d = cfg.dataset
    return generate_split(cfg.scene_spec(), d.n_test_per_class, d.seed, 1)


def cmd_gen(cfg: ExperimentConfig, out=None) -> dict:
    d = cfg.dataset
    out = Path(out) if out else _out_dir(cfg) / "data"
    train_set, test_set = generate_dataset(cfg.scene_spec(), d.n_train_per_class, d.seed,
                                           d.n_test_per_class)
    write_resolved(cfg, out)
    return {"train": str(write_split(out, "train", train_set)),
            "test": str(write_split(out, "test", test_set)),
            "n_train": len(train_set), "n_test": len(test_set)}


def cmd_train(cfg: ExperimentConfig, data_dir=None) -> dict:
    out = _out_dir(cfg)
    write_resolved(cfg, out)
    d = cfg.dataset
    if data_dir is not None:
        train_set = read_split(Path(data_dir) / "train_manifest.json")
        test_set = _test_split(cfg, data_dir)
    else:
        train_set, test_set = generate_dataset(cfg.scene_spec(), d.n_train_per_class, d.seed,
                                               d.n_test_per_class)
    tcfg = cfg.train_config()
    res = train(tcfg, train_set, test_set, num_classes=d.num_classes)
    echo = cfg.resolved()
    paths = {"primary": str(save_checkpoint(res.model, out / "checkpoints" / "primary", echo,
                                            tcfg.epochs, tcfg.seed).parent)}
    if res.replica is not None:
        paths["replica"] = str(save_checkpoint(res.replica, out / "checkpoints" / "replica", echo,
                                               tcfg.epochs, tcfg.seed).parent)
    write_history_csv(out / "history.csv", res.history)
    paths["history"] = str(out / "history.csv")
    return paths


def cmd_eval(cfg: ExperimentConfig, checkpoint, replica=None, data_dir=None) -> dict:
    out = _out_dir(cfg)
    model = load_checkpoint(checkpoint)
    rep = load_checkpoint(replica) if replica else None
    scenes = _test_split(cfg, data_dir)
    images, _ = stack_scenes(scenes)
    k = cfg.clustering.k
    preds = predict_keypoints_batch(model, rep, images, cfg.selection_config(), cfg.clustering_config(),
                                    cfg.train.mask_radius, cfg.train.mask_mode) if scenes else []
    gts = [s.keypoints for s in scenes]
    rows, report = [], {}
    for mode in MatchMode:
        pck_cfg = PckConfig(alpha=cfg.pck.alpha, match_mode=mode)
        r = greedy_pck(preds, gts, pck_cfg, cfg.dataset.image_size, k=k)
        rows.append((mode.value, r))
        report[mode.value] = {"per_keypoint_acc": r.per_keypoint_acc, "average": r.average,
                              "n_images": r.n_images, "warning": r.warning}
    write_pck_csv(out / "pck.csv", rows)
    (out / "pck_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    keypoints = [{"index": i, "keypoints": [list(p) for p in ps], "ground_truth": [list(g) for g in gt]}
                 for i, (ps, gt) in enumerate(zip(preds, gts))]
    (out / "keypoints.json").write_text(json.dumps(keypoints, indent=1) + "\n")
    return {"pck": str(out / "pck.csv"), "report": report}


def cmd_entropy(cfg: ExperimentConfig, checkpoints, data_dir=None) -> dict:
    if not checkpoints:
        raise ConfigError("at least one checkpoint is required")
    out = _out_dir(cfg)
    models = {}
    for ck in checkpoints:
        m = load_checkpoint(ck)
        models[m.pooling.label] = m
    images, _ = stack_scenes(_test_split(cfg, data_dir))
    rows = entropy_report(models, images)
    write_entropy_csv(out / "entropy.csv", rows)
    return {"entropy": str(out / "entropy.csv"),
            "rows": [{"pooling": l, "mean": m, "std": s, "n_images": n} for l, m, s, n in rows]}


def pooldemo_rows() -> list:
    rows = []
    for kernel in (PoolingKernel(PoolKind.AVERAGE), PoolingKernel(PoolKind.MAX),
                   PoolingKernel(PoolKind.LEAKY_MAX, 0.1)):
        for name, x in DEMO_INPUTS.items():
            rows.append((kernel.label, name, pool_forward(x, kernel)[0].item()))
    return rows


def cmd_pooldemo() -> list:
    lines = [f"{label}, {name}, {value:.12g}" for label, name, value in pooldemo_rows()]
    print("\n".join(lines))
    return lines


def cmd_flops(cfg: ExperimentConfig, checkpoint=None) -> dict:
    if checkpoint:
        model = load_checkpoint(checkpoint)
    else:
        t = cfg.train
        arch = Architecture(widths=t.widths, strides=t.strides, num_classes=cfg.dataset.num_classes,
                            conv_bias=t.conv_bias)
        model = ToyModel.initialize(arch, cfg.train_config().pooling, 0)
    rep = count_flops(model, (model.arch.in_channels,) + tuple(cfg.dataset.image_size)).as_dict()
    path = _out_dir(cfg) / "flops.json"
    path.write_text(json.dumps(rep, indent=2) + "\n")
    return rep


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lmpkit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override a config key, e.g. train.epochs=3")
        return p

    p = with_config(sub.add_parser("gen", help="write a synthetic dataset and manifests"))
    p.add_argument("--out", help="dataset directory (default: <output_dir>/data)")
    p = with_config(sub.add_parser("train", help="train and write checkpoints and history.csv"))
    p.add_argument("--data", help="dataset directory written by 'gen'")
    p = with_config(sub.add_parser("eval", help="keypoint PCK on the test split"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--replica")
    p.add_argument("--data")
    p = with_config(sub.add_parser("entropy", help="feature entropy per checkpoint"))
    p.add_argument("checkpoints", nargs="+")
    p.add_argument("--data")
    sub.add_parser("pooldemo", help="pooling outputs on the dense and sparse 2x2 inputs")
    p = with_config(sub.add_parser("flops", help="multiply-add counts as JSON"))
    p.add_argument("--checkpoint")
    return parser


def run(args) -> object:
    if args.command == "pooldemo":
        return cmd_pooldemo()
    cfg = load_config(args.config, args.overrides)
    if args.command == "gen":
        result = cmd_gen(cfg, args.out)
    elif args.command == "train":
        result = cmd_train(cfg, args.data)
    elif args.command == "eval":
        result = cmd_eval(cfg, args.checkpoint, args.replica, args.data)
    elif args.command == "entropy":
        result = cmd_entropy(cfg, args.checkpoints, args.data)
    else:
        result = cmd_flops(cfg, args.checkpoint)
    print(json.dumps(result, indent=2, sort_keys=True))
    return result


def _error_object(exc: BaseException) -> dict:
    obj = {"error": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, ConfigError):
        obj["pointer"] = exc.pointer
        obj["message"] = exc.detail
    return obj


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run(args)
    except (LmpkitError, OSError, ValueError) as exc:
        print(json.dumps(_error_object(exc)), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
