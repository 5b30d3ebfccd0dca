"""Toy keypoint network: conv backbone, global pooling, linear classifier.

The network is small enough to hand-backpropagate:

    conv(1->16, s1) -> relu -> conv(16->32, s2) -> relu -> conv(32->32, s2) -> relu
        -> global pooling -> linear(32 -> classes)

With 32x32 inputs the final feature grid is 8x8. The final ReLU output is
what the keypoint branch (selection, binarization, clustering) consumes.

Training uses SGD with momentum. With mask-out enabled a second, replica
network with independent weights is trained on images whose first
predicted keypoint (from the primary network) has been blanked.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .clustering import ClusteringConfig, ClusteringOutput, binarize_proposals, cluster
from .errors import IoError, NonFiniteError, SizeError, TrainingDiverged
from .maskout import MaskMode, MaskSpec, apply_mask, fuse_predictions, make_mask
from .parallel import ordered_map
from .pooling import PoolingKernel, PoolKind, pool_backward, pool_forward
from .selection import SelectionConfig, select_filters
from .synth import stack_scenes
from .tensor_core import (check_finite, conv2d_backward, conv2d_forward, conv_output_size,
                          linear_bwd, linear_fwd, load_tensor, relu_bwd, relu_fwd, save_tensor,
                          softmax_xent_bwd, softmax_xent_fwd)

log = logging.getLogger(__name__)

CALIBRATION_IMAGES = 256
EVAL_CHUNK = 256


def aligned_pads(kernel_size: int, strides) -> tuple:
    """Per-layer ``(before, after)`` padding that centres final unit ``k`` on
    pixel ``(k + 0.5) * S``, the point the grid-to-pixel map assigns to it.

    Symmetric ``kernel_size // 2`` padding centres unit ``k`` on pixel
    ``k * S``. Moving one cell of padding from the top/left to the
    bottom/right of layer ``l`` shifts every unit above it by the product of
    the strides below ``l``; total padding, and so every grid size, is kept.
    """
    half = kernel_size // 2
    pads = [[half, half] for _ in strides]
    need = int(np.prod(strides)) // 2
    for layer in reversed(range(len(strides))):
        unit = int(np.prod(strides[:layer]))
        while need >= unit and pads[layer][0] > 0:
            pads[layer][0] -= 1
            pads[layer][1] += 1
            need -= unit
    return tuple(tuple(p) for p in pads)


@dataclass(frozen=True)
class Architecture:
    in_channels: int = 1
    widths: tuple = (16, 32, 32)
    strides: tuple = (1, 2, 2)
    kernel_size: int = 3
    num_classes: int = 4
    conv_bias: bool = True
    pads: Optional[tuple] = None      # per layer (before, after); None -> aligned_pads

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(v) for v in self.widths))
        object.__setattr__(self, "strides", tuple(int(v) for v in self.strides))
        if len(self.widths) != len(self.strides) or not self.widths:
            raise ValueError("widths and strides must be nonempty and of equal length")
        pads = aligned_pads(self.kernel_size, self.strides) if self.pads is None else self.pads
        pads = tuple(tuple(int(v) for v in p) for p in pads)
        if len(pads) != len(self.strides) or any(len(p) != 2 or min(p) < 0 for p in pads):
            raise ValueError(f"pads must hold one nonnegative (before, after) pair per layer: {pads}")
        object.__setattr__(self, "pads", pads)

    @property
    def feature_stride(self) -> int:
        return int(np.prod(self.strides))

    def grid_shapes(self, h: int, w: int) -> list:
        """Spatial size after each conv layer."""
        shapes = []
        for s, p in zip(self.strides, self.pads):
            h = conv_output_size(h, self.kernel_size, s, p)
            w = conv_output_size(w, self.kernel_size, s, p)
            shapes.append((h, w))
        return shapes


class ToyModel:
    """Parameters plus explicit forward/backward passes.

    ``params`` maps ``conv{i}_w``, ``conv{i}_b``, ``fc_w``, ``fc_b`` to float64
    arrays.
    """

    def __init__(self, arch: Architecture, pooling: PoolingKernel, params: dict):
        self.arch = arch
        self.pooling = pooling
        self.params = params

    @classmethod
    def initialize(cls, arch: Architecture, pooling: PoolingKernel, seed,
                   conv_bias: float = 0.0) -> "ToyModel":
        """He-normal conv kernels, conv biases at ``conv_bias``, zero fc bias."""
        rng = np.random.default_rng(seed)
        params = {}
        cin, ks = arch.in_channels, arch.kernel_size
        for i, cout in enumerate(arch.widths):
            fan_in = cin * ks * ks
            params[f"conv{i}_w"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), (cout, cin, ks, ks))
            if arch.conv_bias:
                params[f"conv{i}_b"] = np.full(cout, float(conv_bias))
            cin = cout
        params["fc_w"] = rng.normal(0.0, np.sqrt(1.0 / cin), (arch.num_classes, cin))
        params["fc_b"] = np.zeros(arch.num_classes)
        return cls(arch, pooling, params)

    @property
    def channels(self) -> int:
        return self.arch.widths[-1]

    def calibrate_biases(self, images: np.ndarray, active_fraction: float) -> None:
        """Data-dependent bias init: set each conv channel's bias so that about
        ``active_fraction`` of its units are positive on ``images``.

        Layers are calibrated in order, each on the output of the calibrated
        layers below it.
        """
        if not self.arch.conv_bias:
            raise ValueError("model has no conv biases to calibrate")
        if not 0.0 < active_fraction <= 1.0:
            raise ValueError("active_fraction must be in (0, 1]")
        a = images
        for i, s in enumerate(self.arch.strides):
            z = conv2d_forward(a, self.params[f"conv{i}_w"], s, self.arch.pads[i])
            per_channel = np.moveaxis(z, 1, 0).reshape(z.shape[1], -1)
            self.params[f"conv{i}_b"] = -np.quantile(per_channel, 1.0 - active_fraction, axis=1)
            a = relu_fwd(z + self.params[f"conv{i}_b"][None, :, None, None])

    def copy(self) -> "ToyModel":
        return ToyModel(self.arch, self.pooling, {k: v.copy() for k, v in self.params.items()})

    def _backbone(self, x, cache=None):
        a = x
        for i, s in enumerate(self.arch.strides):
            z = conv2d_forward(a, self.params[f"conv{i}_w"], s, self.arch.pads[i])
            if self.arch.conv_bias:
                z += self.params[f"conv{i}_b"][None, :, None, None]
            if cache is not None:
                cache.append((a, z))
            a = relu_fwd(z)
        return a

    def features(self, x: np.ndarray) -> np.ndarray:
        """Final post-ReLU conv features ``[b, c, h', w']``."""
        return self._backbone(x)

    def forward(self, x: np.ndarray):
        """Return ``(logits, cache)``."""
        convs = []
        feat = self._backbone(x, convs)
        pooled, ctx = pool_forward(feat, self.pooling)
        logits = linear_fwd(pooled, self.params["fc_w"], self.params["fc_b"])
        return logits, {"convs": convs, "feat": feat, "pool_ctx": ctx, "pooled": pooled}

    def backward(self, cache: dict, grad_logits: np.ndarray) -> dict:
        grads = {}
        g_pooled, grads["fc_w"], grads["fc_b"] = linear_bwd(cache["pooled"], self.params["fc_w"], grad_logits)
        g = pool_backward(g_pooled, cache["pool_ctx"], self.pooling)
        for i in reversed(range(len(self.arch.strides))):
            a_in, z = cache["convs"][i]
            g = relu_bwd(z, g)
            if self.arch.conv_bias:
                grads[f"conv{i}_b"] = g.sum(axis=(0, 2, 3))
            g, grads[f"conv{i}_w"] = conv2d_backward(a_in, self.params[f"conv{i}_w"], g,
                                                     self.arch.strides[i], self.arch.pads[i])
        return grads

    def loss_and_grads(self, x, labels):
        """Mean cross-entropy, class probabilities, parameter gradients, final features."""
        logits, cache = self.forward(x)
        loss, probs = softmax_xent_fwd(logits, labels)
        grads = self.backward(cache, softmax_xent_bwd(probs, labels))
        return loss, probs, grads, cache["feat"]

    def loss(self, x, labels) -> float:
        logits, _ = self.forward(x)
        return softmax_xent_fwd(logits, labels)[0]


class SGD:
    """Heavy-ball SGD: ``v = mu * v + g; p -= lr * v``."""

    def __init__(self, lr: float, momentum: float = 0.9):
        self.lr = lr
        self.momentum = momentum
        self.velocity = {}

    def step(self, params: dict, grads: dict) -> None:
        for name in params:
            v = self.velocity.get(name)
            v = grads[name] if v is None else self.momentum * v + grads[name]
            self.velocity[name] = v
            params[name] -= self.lr * v


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 8
    learning_rate: float = 0.01
    momentum: float = 0.9
    pooling_kind: PoolKind = PoolKind.LEAKY_MAX
    epsilon: float = 0.1
    seed: int = 0
    enable_maskout: bool = False
    maskout_start_epoch: int = 2
    mask_radius: Optional[float] = None   # pixels; None -> one feature stride
    mask_mode: MaskMode = MaskMode.SQUARE
    widths: tuple = (16, 32, 32)
    strides: tuple = (1, 2, 2)
    conv_bias: bool = True
    conv_bias_init: float = 0.0
    init_active_fraction: Optional[float] = None   # calibrate conv biases on training images
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    clustering: ClusteringConfig = field(default_factory=ClusteringConfig)

    def __post_init__(self):
        object.__setattr__(self, "pooling_kind", PoolKind(self.pooling_kind))
        object.__setattr__(self, "mask_mode", MaskMode(self.mask_mode))
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")

    @property
    def pooling(self) -> PoolingKernel:
        return PoolingKernel(self.pooling_kind, self.epsilon)


@dataclass
class TrainResult:
    model: ToyModel
    replica: Optional[ToyModel]
    history: list      # rows: {epoch, split, loss, acc, net}
    steps: int = 0


# --- keypoint branch --------------------------------------------------------


def propose(feat: np.ndarray, selection: SelectionConfig, clustering: ClusteringConfig) -> ClusteringOutput:
    """Selection, binarization and clustering on one image's ``[c, h, w]`` features."""
    kept, _ = select_filters(feat, selection)
    return cluster(binarize_proposals(kept), clustering)


def grid_to_pixel(peak, stride: int):
    """Feature-grid cell ``(row, col)`` to image pixel ``((row + .5) s, (col + .5) s)``."""
    return ((peak[0] + 0.5) * stride, (peak[1] + 0.5) * stride)


def _mask_for(peak, stride, img_shape, radius, mode):
    center = grid_to_pixel(peak, stride)
    spec = MaskSpec(center=center, radius=stride if radius is None else radius, mode=mode)
    return make_mask(spec, img_shape[-2], img_shape[-1])


def mask_first_keypoint(images: np.ndarray, feats: np.ndarray, stride: int,
                        selection: SelectionConfig, clustering: ClusteringConfig,
                        radius=None, mode=MaskMode.SQUARE) -> np.ndarray:
    """Blank each image around its first clustered keypoint.

    Images with no keypoint are returned unchanged.
    """
    first_only = dataclasses.replace(clustering, k=1)
    out = images.copy()

    def one(n):
        res = propose(feats[n], selection, first_only)
        if res.count:
            out[n] = apply_mask(images[n], _mask_for(res.peaks[0], stride, images.shape, radius, mode))

    ordered_map(one, range(images.shape[0]))
    return out


def _features_chunked(model, images):
    if images.shape[0] == 0:
        return np.zeros((0, model.channels, 0, 0))
    return np.concatenate([model.features(images[i:i + EVAL_CHUNK])
                           for i in range(0, images.shape[0], EVAL_CHUNK)])


def predict_outputs(model: ToyModel, replica: Optional[ToyModel], images: np.ndarray,
                    selection: SelectionConfig = SelectionConfig(),
                    clustering: ClusteringConfig = ClusteringConfig(),
                    mask_radius=None, mask_mode=MaskMode.SQUARE) -> list:
    """Grid-level :class:`ClusteringOutput` per image, fused with the replica if given."""
    feats = _features_chunked(model, images)
    primary = ordered_map(lambda f: propose(f, selection, clustering), feats)
    if replica is None:
        return primary
    stride = model.arch.feature_stride
    masked = images.copy()
    for n, res in enumerate(primary):
        if res.count:
            masked[n] = apply_mask(images[n], _mask_for(res.peaks[0], stride, images.shape,
                                                          mask_radius, mask_mode))
    rfeats = _features_chunked(replica, masked)
    second = ordered_map(lambda f: propose(f, selection, clustering), rfeats)
    return [fuse_predictions(p, r, clustering.k, clustering.thr, clustering.metric)
            for p, r in zip(primary, second)]


def predict_keypoints_batch(model, replica, images, selection=SelectionConfig(),
                            clustering=ClusteringConfig(), mask_radius=None,
                            mask_mode=MaskMode.SQUARE) -> list:
    """Pixel-space keypoints for each image of ``images[N, ch, h, w]``."""
    outs = predict_outputs(model, replica, images, selection, clustering, mask_radius, mask_mode)
    stride = model.arch.feature_stride
    return [[grid_to_pixel(p, stride) for p in o.peaks] for o in outs]


def predict_keypoints(model, replica, image, selection=SelectionConfig(),
                      clustering=ClusteringConfig(), mask_radius=None,
                      mask_mode=MaskMode.SQUARE) -> list:
    """Pixel ``(row, col)`` keypoints for one ``[ch, h, w]`` image, at most ``k``."""
    return predict_keypoints_batch(model, replica, image[None], selection, clustering,
                                   mask_radius, mask_mode)[0]


# --- training ---------------------------------------------------------------


def evaluate(model: ToyModel, images: np.ndarray, labels: np.ndarray):
    """``(mean loss, accuracy)`` over a labelled set."""
    if images.shape[0] == 0:
        return float("nan"), float("nan")
    total, hits = 0.0, 0
    for i in range(0, images.shape[0], EVAL_CHUNK):
        xb, yb = images[i:i + EVAL_CHUNK], labels[i:i + EVAL_CHUNK]
        logits, _ = model.forward(xb)
        total += softmax_xent_fwd(logits, yb)[0] * xb.shape[0]
        hits += int((logits.argmax(axis=1) == yb).sum())
    return total / images.shape[0], hits / images.shape[0]


def _check_params(model, step):
    for name, p in model.params.items():
        try:
            check_finite(p, name)
        except NonFiniteError:
            raise TrainingDiverged(step, f"parameter {name} became non-finite") from None


def train(cfg: TrainConfig, train_scenes, eval_scenes=None, num_classes=None) -> TrainResult:
    """Fit the primary (and, with mask-out, the replica) network.

    The run is a pure function of ``cfg`` and the data: initial weights and
    the per-epoch sample order derive from ``cfg.seed``.
    """
    if not train_scenes:
        raise ValueError("training set is empty")
    x_all, y_all = stack_scenes(train_scenes)
    if num_classes is None:
        num_classes = int(y_all.max()) + 1
    arch = Architecture(in_channels=x_all.shape[1], widths=cfg.widths, strides=cfg.strides,
                        num_classes=num_classes, conv_bias=cfg.conv_bias)
    model = ToyModel.initialize(arch, cfg.pooling, np.random.SeedSequence([cfg.seed, 0]),
                               cfg.conv_bias_init)
    replica = None
    if cfg.enable_maskout:
        replica = ToyModel.initialize(arch, cfg.pooling, np.random.SeedSequence([cfg.seed, 1]),
                                     cfg.conv_bias_init)
    if cfg.init_active_fraction is not None:
        calib = x_all[:CALIBRATION_IMAGES]
        for net in (model, replica):
            if net is not None:
                net.calibrate_biases(calib, cfg.init_active_fraction)
    order_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    opt_p = SGD(cfg.learning_rate, cfg.momentum)
    opt_r = SGD(cfg.learning_rate, cfg.momentum)
    x_eval, y_eval = stack_scenes(eval_scenes or [])
    stride = arch.feature_stride

    history, step = [], 0
    for epoch in range(1, cfg.epochs + 1):
        replica_on = replica is not None and epoch >= cfg.maskout_start_epoch
        perm = order_rng.permutation(x_all.shape[0])
        sums = {"primary": [0.0, 0, 0], "replica": [0.0, 0, 0]}
        for start in range(0, len(perm), cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            xb, yb = x_all[idx], y_all[idx]
            loss, probs, grads, feats = _guarded(model, xb, yb, step, "primary")
            if replica_on:
                masked = mask_first_keypoint(xb, feats, stride, cfg.selection, cfg.clustering,
                                             cfg.mask_radius, cfg.mask_mode)
            opt_p.step(model.params, grads)
            _check_params(model, step)
            _accumulate(sums["primary"], loss, probs, yb)
            if replica_on:
                rloss, rprobs, rgrads, _ = _guarded(replica, masked, yb, step, "replica")
                opt_r.step(replica.params, rgrads)
                _check_params(replica, step)
                _accumulate(sums["replica"], rloss, rprobs, yb)
            step += 1

        for net in ("primary", "replica"):
            tot, hits, n = sums[net]
            if n:
                history.append(_row(epoch, "train", tot / n, hits / n, net))
        if x_eval.shape[0]:
            history.append(_row(epoch, "test", *evaluate(model, x_eval, y_eval), "primary"))
            if replica_on:
                feats = _features_chunked(model, x_eval)
                masked = mask_first_keypoint(x_eval, feats, stride, cfg.selection, cfg.clustering,
                                             cfg.mask_radius, cfg.mask_mode)
                history.append(_row(epoch, "test", *evaluate(replica, masked, y_eval), "replica"))
        log.info("epoch %d: %s", epoch, [r for r in history if r["epoch"] == epoch])
    return TrainResult(model=model, replica=replica, history=history, steps=step)


def _guarded(model, x, y, step, net):
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            out = model.loss_and_grads(x, y)
    except NonFiniteError as exc:
        raise TrainingDiverged(step, f"{net}: {exc}") from None
    if not np.isfinite(out[0]):
        raise TrainingDiverged(step, f"{net} loss is not finite")
    return out


def _accumulate(acc, loss, probs, labels):
    n = labels.shape[0]
    acc[0] += loss * n
    acc[1] += int((probs.argmax(axis=1) == labels).sum())
    acc[2] += n


def _row(epoch, split, loss, acc, net):
    return {"epoch": epoch, "split": split, "loss": float(loss), "acc": float(acc), "net": net}


def write_history_csv(path, history) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["epoch", "split", "loss", "acc", "net"])
        for r in history:
            out.writerow([r["epoch"], r["split"], f"{r['loss']:.8f}", f"{r['acc']:.6f}", r["net"]])


# --- FLOPs --------------------------------------------------------------------


@dataclass
class FlopReport:
    layers: list                     # [(name, multiply-adds)]
    total: int
    pooling: int
    pooling_overhead_fraction: float

    def as_dict(self) -> dict:
        return {"layers": [{"name": n, "macs": m} for n, m in self.layers],
                "total": self.total, "pooling": self.pooling,
                "pooling_overhead_fraction": self.pooling_overhead_fraction}


def count_flops(model: ToyModel, input_shape) -> FlopReport:
    """Multiply-add counts of one forward pass over ``input_shape``.

    ``input_shape`` is ``(b, ch, h, w)`` or ``(ch, h, w)``. Biases and ReLUs
    are not multiply-adds and are not counted; pooling costs ``c*h*w`` per
    image (one pooling-vector product per channel).
    """
    if len(input_shape) == 3:
        input_shape = (1,) + tuple(input_shape)
    b, cin, h, w = input_shape
    arch = model.arch
    if cin != arch.in_channels:
        raise SizeError(f"model expects {arch.in_channels} input channels, got {cin}")
    layers = []
    for i, ((oh, ow), cout) in enumerate(zip(arch.grid_shapes(h, w), arch.widths)):
        layers.append((f"conv{i}", b * cout * cin * arch.kernel_size ** 2 * oh * ow))
        cin = cout
    pool = b * cin * oh * ow
    layers.append(("pool", pool))
    layers.append(("fc", b * cin * arch.num_classes))
    total = sum(m for _, m in layers)
    return FlopReport(layers=layers, total=total, pooling=pool,
                      pooling_overhead_fraction=pool / total)


# --- checkpoints --------------------------------------------------------------


def save_checkpoint(model: ToyModel, directory, cfg_echo=None, epoch=None, seed=None) -> Path:
    """Write each parameter as an LMPT1 file plus ``manifest.json``.

    LMPT1 stores float32, so a reloaded model is the float32 rounding of the
    trained one.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    layers = {}
    for name, p in model.params.items():
        fname = f"{name}.lmpt"
        save_tensor(directory / fname, p)
        layers[name] = fname
    manifest = {
        "layers": layers,
        "architecture": dataclasses.asdict(model.arch),
        "pooling": {"kind": model.pooling.kind.value, "epsilon": model.pooling.epsilon},
        "config": cfg_echo,
        "epoch": epoch,
        "seed": seed,
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(directory) -> ToyModel:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
    except FileNotFoundError:
        raise IoError(f"no checkpoint manifest in {directory}") from None
    arch = Architecture(**manifest["architecture"])
    pooling = PoolingKernel(manifest["pooling"]["kind"], manifest["pooling"]["epsilon"])
    try:
        params = {name: load_tensor(directory / fname) for name, fname in manifest["layers"].items()}
    except FileNotFoundError as exc:
        raise IoError(f"checkpoint tensor missing: {exc.filename}") from None
    return ToyModel(arch, pooling, params)
