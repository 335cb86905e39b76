"""A toy single-stage detector with decoupled box and objectness branches.

Backbone: three 3x3 conv -> BN -> ReLU blocks (widths 8, 16, 16; strides 1,
2, 2) giving one stride-4 feature grid.  The box branch regresses, per cell,
``(dx, dy, ln w, ln h)`` where ``(dx, dy)`` is the object centre offset in
cell units and ``w, h`` are pixels.  Objectness comes from either the
anomaly-aware head or the logistic baseline.
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np
from scipy.ndimage import maximum_filter
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import stat_test as st
from .aadh import AADHead, BaselineHead, make_head
from .evaluation import Box, Detection, iou, metrics_at_threshold
from .tensor_nn import (SGD, Conv3x3, NonFiniteError, Pointwise, ReLU, Sequential, ShapeError, conv_bn_relu,
                        mse_loss)
from .validation import check_box_lists, check_images

logger = logging.getLogger(__name__)

STRIDE = 4
TRAIN_CONFIG_VERSION = 1
# The scaled sigmoid multiplies the anomaly head's gradient by alpha/2, so the
# two heads need objectness weights orders of magnitude apart.
DEFAULT_OBJECTNESS_WEIGHT = {"aadh": 1e4, "baseline": 10.0}


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int, history: list):
        self.epoch, self.batch, self.history = epoch, batch, history
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}")


@dataclass
class TrainConfig:
    epochs: int = 60
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 16
    seed: int = 0
    objectness_loss_weight: float | None = None  # None: per-head default
    box_loss_weight: float = 1.0
    head_kind: str = "aadh"
    measure: str = "sum"
    channels: int = 8
    alpha_sigmoid: float = 1e-3
    clamp_significance: float = st.SIGNIFICANCE_CLAMP
    null_model_mode: str = "image"
    score_threshold: float = 0.1
    nms_iou: float = 0.5
    iou_min: float = 0.05
    format_version: int = TRAIN_CONFIG_VERSION

    def __post_init__(self):
        if self.head_kind not in ("aadh", "baseline"):
            raise ConfigError(f"head_kind must be 'aadh' or 'baseline', got {self.head_kind!r}")
        if self.objectness_loss_weight is None:
            self.objectness_loss_weight = DEFAULT_OBJECTNESS_WEIGHT[self.head_kind]
        if self.format_version != TRAIN_CONFIG_VERSION:
            raise ConfigError(f"unsupported train config format_version {self.format_version}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        for name in ("lr", "objectness_loss_weight", "channels", "alpha_sigmoid", "clamp_significance"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("momentum", "weight_decay", "box_loss_weight"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.measure not in {m.value for m in st.Measure}:
            raise ConfigError(f"unknown measure {self.measure!r}")
        if self.null_model_mode not in ("image", "batch"):
            raise ConfigError(f"null_model_mode must be 'image' or 'batch' for training, got {self.null_model_mode!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def test_config(self) -> st.TestConfig:
        return st.TestConfig(measure=self.measure, channels=self.channels, alpha_sigmoid=self.alpha_sigmoid,
                             clamp_significance=self.clamp_significance)


# ----------------------------------------------------------------------------
# Model
# ----------------------------------------------------------------------------


def as_image_batch(images) -> np.ndarray:
    x = np.asarray(images)
    if x.ndim == 2:
        x = x[None, :, :, None]
    elif x.ndim == 3:
        x = x[..., None]
    if x.ndim != 4 or x.shape[-1] != 1:
        raise ShapeError(f"images must be (H, W), (N, H, W) or (N, H, W, 1), got shape {np.shape(images)}")
    if x.shape[1] % STRIDE or x.shape[2] % STRIDE:
        raise ShapeError(f"image height and width must be divisible by {STRIDE}, got {x.shape[1]}x{x.shape[2]}")
    return x


class DetectorModel:
    stride = STRIDE

    def __init__(self, head_kind: str = "aadh", test_config: st.TestConfig | None = None,
                 null_model_mode: str = "image", seed: int = 0, widths=(8, 16, 16), dtype=np.float32):
        self.head_kind = head_kind
        self.test_config = st.TestConfig() if test_config is None else test_config
        rng = np.random.default_rng(seed)
        w1, w2, w3 = widths
        first = conv_bn_relu(1, w1, 1, rng=rng, name="backbone.b1", dtype=dtype).layers
        first[0].input_grad = False
        self.backbone = Sequential(
            *first,
            *conv_bn_relu(w1, w2, 2, rng=rng, name="backbone.b2", dtype=dtype).layers,
            *conv_bn_relu(w2, w3, 2, rng=rng, name="backbone.b3", dtype=dtype).layers,
        )
        self.box_branch = Sequential(
            Conv3x3(w3, w3, rng=rng, name="box.conv", dtype=dtype),
            ReLU(name="box.relu"),
            Pointwise(w3, 4, rng=rng, name="box.out", dtype=dtype),
        )
        self.head: AADHead | BaselineHead = make_head(head_kind, w3, self.test_config, null_model_mode,
                                                      rng=rng, dtype=dtype)

    def params(self):
        return self.backbone.params() + self.box_branch.params() + self.head.params()

    def named_tensors(self) -> dict[str, np.ndarray]:
        """Parameters and running statistics by name, in a fixed order."""
        out = {p.name: p.value for p in self.params()}
        for part in (self.backbone, self.box_branch, self.head):
            out.update(part.buffers())
        return out

    def load_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        own = self.named_tensors()
        missing = set(own) - set(tensors)
        if missing:
            raise ShapeError(f"checkpoint lacks tensor {sorted(missing)[0]!r}")
        extra = set(tensors) - set(own)
        if extra:
            raise ShapeError(f"checkpoint has unexpected tensor {sorted(extra)[0]!r}")
        for name, arr in own.items():
            if tuple(tensors[name].shape) != arr.shape:
                raise ShapeError(f"tensor {name!r}: checkpoint shape {tuple(tensors[name].shape)}, model expects {arr.shape}")
        for name, arr in own.items():
            arr[...] = tensors[name]

    def forward(self, images, training=False, update_stats=True):
        """Returns ``(objectness (N, h, w), boxes (N, h, w, 4), cache)``."""
        x = as_image_batch(images).astype(self.params()[0].value.dtype, copy=False)
        feats, bcache = self.backbone.forward(x, training, update_stats)
        boxes, xcache = self.box_branch.forward(feats, training, update_stats)
        obj, hcache = self.head.forward(feats, training, update_stats)
        return obj, boxes, (bcache, xcache, hcache)

    def backward(self, dobj, dbox, cache) -> np.ndarray:
        bcache, xcache, hcache = cache
        dfeat = self.box_branch.backward(dbox, xcache)
        dfeat = dfeat + self.head.backward(dobj, hcache)
        return self.backbone.backward(dfeat, bcache)

    def significance_map(self, images) -> np.ndarray | None:
        if not isinstance(self.head, AADHead):
            return None
        _, _, (_, _, hcache) = self.forward(images, training=False)
        return hcache.significance.values

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()


def build_model(config: TrainConfig) -> DetectorModel:
    return DetectorModel(config.head_kind, config.test_config, config.null_model_mode, seed=config.seed)


# ----------------------------------------------------------------------------
# Targets, loss, decoding
# ----------------------------------------------------------------------------


@dataclass
class Targets:
    objectness: np.ndarray  # (N, h, w) in {0, 1}
    boxes: np.ndarray  # (N, h, w, 4)
    mask: np.ndarray  # (N, h, w) bool


def assign_targets(gt_boxes: Sequence[Box], grid_shape: tuple[int, int], stride: int = STRIDE):
    """Centre-cell assignment for one image.

    Returns ``(objectness, box_targets, mask)``.  When two objects share a
    cell the larger one is kept.
    """
    gh, gw = grid_shape
    obj = np.zeros((gh, gw), dtype=np.float32)
    boxes = np.zeros((gh, gw, 4), dtype=np.float32)
    area = np.zeros((gh, gw))
    for b in gt_boxes:
        cx, cy = b.center
        col = min(max(int(math.floor(cx / stride)), 0), gw - 1)
        row = min(max(int(math.floor(cy / stride)), 0), gh - 1)
        if obj[row, col] and area[row, col] >= b.area:
            continue
        obj[row, col] = 1.0
        area[row, col] = b.area
        boxes[row, col] = (cx / stride - col, cy / stride - row, math.log(b.w), math.log(b.h))
    return obj, boxes, obj > 0


def build_targets(box_lists: Sequence[Sequence[Box]], grid_shape, stride: int = STRIDE) -> Targets:
    parts = [assign_targets(b, grid_shape, stride) for b in box_lists]
    return Targets(np.stack([p[0] for p in parts]), np.stack([p[1] for p in parts]), np.stack([p[2] for p in parts]))


def detection_loss(obj: np.ndarray, boxes: np.ndarray, targets: Targets,
                   objectness_weight: float = 1.0, box_weight: float = 1.0):
    """``w_obj * MSE(objectness) + w_box * L1(box params at positive cells)``.

    The L1 term is summed over the four box parameters and averaged over
    positive cells.  Returns ``(loss, dobj, dbox)``.
    """
    obj_loss, dobj = mse_loss(obj, targets.objectness.astype(obj.dtype))
    n_pos = int(targets.mask.sum())
    dbox = np.zeros_like(boxes)
    box_loss = 0.0
    if n_pos:
        diff = (boxes.astype(np.float64) - targets.boxes) * targets.mask[..., None]
        box_loss = float(np.abs(diff).sum() / n_pos)
        dbox = (np.sign(diff) / n_pos * box_weight).astype(boxes.dtype)
    loss = objectness_weight * obj_loss + box_weight * box_loss
    return loss, (dobj * objectness_weight).astype(obj.dtype), dbox


def _nms(cands: list[Detection], nms_iou: float) -> list[Detection]:
    order = sorted(cands, key=lambda d: (-d.score, d.x, d.y, d.w, d.h))
    keep: list[Detection] = []
    for d in order:
        if all(iou(d, k) < nms_iou for k in keep):
            keep.append(d)
    return keep


def decode_detections(obj: np.ndarray, boxes: np.ndarray, stride: int = STRIDE, score_threshold: float = 0.1,
                      nms_iou: float = 0.5, image_shape: tuple[int, int] | None = None) -> list[Detection]:
    """Turn one image's dense maps into scored boxes.

    Cells at or above ``score_threshold`` that are maxima of their 3x3
    neighbourhood become candidates, then greedy NMS at ``nms_iou``.
    """
    obj = np.asarray(obj, dtype=np.float64)
    gh, gw = obj.shape
    ih, iw = image_shape if image_shape is not None else (gh * stride, gw * stride)
    peaks = (obj >= score_threshold) & (obj >= maximum_filter(obj, size=3, mode="constant", cval=-np.inf))
    cands = []
    for row, col in zip(*np.nonzero(peaks)):
        dx, dy, lw, lh = (float(v) for v in boxes[row, col])
        cx, cy = (col + dx) * stride, (row + dy) * stride
        w, h = math.exp(min(lw, 20.0)), math.exp(min(lh, 20.0))
        x0, y0 = max(cx - w / 2, 0.0), max(cy - h / 2, 0.0)
        x1, y1 = min(cx + w / 2, float(iw)), min(cy + h / 2, float(ih))
        if x1 <= x0 or y1 <= y0:
            continue
        cands.append(Detection(x0, y0, x1 - x0, y1 - y0, float(obj[row, col])))
    return _nms(cands, nms_iou)


def predict_maps(model: DetectorModel, images, chunk: int = 64):
    x = as_image_batch(images)
    objs, boxes = [], []
    for i in range(0, len(x), chunk):
        o, b, _ = model.forward(x[i:i + chunk], training=False)
        objs.append(o)
        boxes.append(b)
    return np.concatenate(objs), np.concatenate(boxes)


def detect(model: DetectorModel, images, score_threshold=0.1, nms_iou=0.5) -> list[list[Detection]]:
    x = as_image_batch(images)
    objs, boxes = predict_maps(model, x)
    return [decode_detections(o, b, model.stride, score_threshold, nms_iou, x.shape[1:3])
            for o, b in zip(objs, boxes)]


# ----------------------------------------------------------------------------
# Training
# ----------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: DetectorModel
    config: TrainConfig
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val_f1: float = 0.0


def _stack(samples) -> tuple[np.ndarray, list[list[Box]]]:
    images = np.stack([np.asarray(s.image, dtype=np.float32) for s in samples])
    return images, [list(s.boxes) for s in samples]


def evaluate_model(model: DetectorModel, images, box_lists, config: TrainConfig, threshold=None):
    """Metrics at ``threshold`` (default: the config's); AP uses every local maximum."""
    preds = detect(model, images, score_threshold=0.0, nms_iou=config.nms_iou)
    thr = config.score_threshold if threshold is None else threshold
    return metrics_at_threshold(preds, box_lists, thr, config.iou_min)


def train(train_set, val_set, config: TrainConfig, on_epoch=None) -> TrainResult:
    """Mini-batch SGD with per-epoch validation; keeps the best validation-F1 weights.

    ``train_set`` and ``val_set`` are sequences of objects with ``image`` and
    ``boxes`` attributes.  ``on_epoch(row, result)`` is called after each
    epoch's history row is recorded.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("training and validation sets must be non-empty")
    images, box_lists = _stack(train_set)
    val_images, val_boxes = _stack(val_set)
    model = build_model(config)
    grid = (images.shape[1] // STRIDE, images.shape[2] // STRIDE)
    targets = build_targets(box_lists, grid)
    opt = SGD(model.params(), config.lr, config.momentum, config.weight_decay)
    rng = np.random.default_rng(config.seed)
    result = TrainResult(copy.deepcopy(model), config)
    best_f1 = -1.0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(images))
        losses = []
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            idx = order[start:start + config.batch_size]
            if len(idx) < 2 and len(order) > 1:
                continue  # a single image gives degenerate batch statistics
            opt.zero_grad()
            try:
                obj, boxes, cache = model.forward(images[idx], training=True)
            except NonFiniteError:
                raise TrainingDiverged(epoch, b, result.history) from None
            sub = Targets(targets.objectness[idx], targets.boxes[idx], targets.mask[idx])
            loss, dobj, dbox = detection_loss(obj, boxes, sub, config.objectness_loss_weight,
                                              config.box_loss_weight)
            if not math.isfinite(loss):
                raise TrainingDiverged(epoch, b, result.history)
            model.backward(dobj, dbox, cache)
            try:
                opt.step()
            except NonFiniteError:
                raise TrainingDiverged(epoch, b, result.history) from None
            losses.append(loss)
        report = evaluate_model(model, val_images, val_boxes, config)
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)) if losses else float("nan"),
               "val_f1": report.f1, "val_ap": report.ap if report.ap is not None else float("nan")}
        result.history.append(row)
        logger.info("epoch %d loss %.5f val_f1 %.4f val_ap %.4f", epoch, row["train_loss"], row["val_f1"],
                    row["val_ap"])
        if report.f1 > best_f1:
            best_f1 = report.f1
            result.model = copy.deepcopy(model)
            result.best_epoch = epoch
            result.best_val_f1 = report.f1
        if on_epoch is not None:
            on_epoch(row, result)
    return result


# ----------------------------------------------------------------------------
# Estimator interface
# ----------------------------------------------------------------------------

@dataclass
class _Sample:
    image: np.ndarray
    boxes: list


class AnomalyAwareDetector(BaseEstimator):
    """Estimator wrapper: ``fit(images, boxes)`` / ``predict(images)``.

    ``X`` is an ``(N, H, W)`` array of images in [0, 1]; ``y`` is a list of
    per-image box lists (``Box`` objects or ``[x, y, w, h]`` rows).
    ``predict`` returns a list of ``Detection`` lists.
    """

    def __init__(self, head_kind="aadh", measure="sum", channels=8, alpha_sigmoid=1e-3,
                 null_model_mode="image", epochs=60, lr=0.01, momentum=0.9, weight_decay=5e-4,
                 batch_size=16, objectness_loss_weight=None, box_loss_weight=1.0, score_threshold=0.1,
                 nms_iou=0.5, iou_min=0.05, seed=0):
        self.head_kind = head_kind
        self.measure = measure
        self.channels = channels
        self.alpha_sigmoid = alpha_sigmoid
        self.null_model_mode = null_model_mode
        self.epochs = epochs
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.objectness_loss_weight = objectness_loss_weight
        self.box_loss_weight = box_loss_weight
        self.score_threshold = score_threshold
        self.nms_iou = nms_iou
        self.iou_min = iou_min
        self.seed = seed

    def _config(self) -> TrainConfig:
        return TrainConfig(**self.get_params())

    def fit(self, X, y, X_val=None, y_val=None):
        X = check_images(X)
        y = check_box_lists(y, len(X))
        if X_val is None:
            X_val, y_val = X, y
        else:
            X_val = check_images(X_val)
            y_val = check_box_lists(y_val, len(X_val))
        result = train([_Sample(i, b) for i, b in zip(X, y)], [_Sample(i, b) for i, b in zip(X_val, y_val)],
                       self._config())
        self.model_ = result.model
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        self.config_ = result.config
        return self

    @classmethod
    def from_result(cls, result: TrainResult) -> "AnomalyAwareDetector":
        params = {k: v for k, v in result.config.to_dict().items() if k in cls._get_param_names()}
        est = cls(**params)
        est.model_, est.history_ = result.model, result.history
        est.best_epoch_, est.config_ = result.best_epoch, result.config
        return est

    def decision_function(self, X) -> np.ndarray:
        """Dense objectness maps, shape ``(N, H/4, W/4)``."""
        check_is_fitted(self, "model_")
        return predict_maps(self.model_, check_images(X))[0]

    def predict(self, X, score_threshold=None) -> list[list[Detection]]:
        check_is_fitted(self, "model_")
        thr = self.score_threshold if score_threshold is None else score_threshold
        return detect(self.model_, check_images(X), thr, self.nms_iou)

    def score(self, X, y) -> float:
        """F1 at ``score_threshold`` with the relaxed IoU criterion."""
        X = check_images(X)
        y = check_box_lists(y, len(X))
        return metrics_at_threshold(self.predict(X), y, self.score_threshold, self.iou_min, with_ap=False).f1
