"""Max-margin training of the backbone through snake inference, evaluation and checkpoints."""

from __future__ import annotations

import json
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import acm, backbone, ssvm
from .backbone import ArchConfig, BackboneParams
from .data import Sample
from .geometry import Polygon, iou, rasterize, resample
from .ssvm import MapGrads, SsvmConfig

OPTIMIZERS = ("sgd", "adam")
DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 15
    step_size: float = 1e-4
    C: float = 1.0
    batch: int = 8
    seed: int = 0
    acm: acm.AcmOptions = acm.AcmOptions()
    loss_scale: float = 1.0
    margin_rule: str = "hinge"
    optimizer: str = "sgd"
    update_per_init: bool = False
    compute_dtype: str = "float32"
    arch: ArchConfig = field(default_factory=ArchConfig.desk)
    checkpoint_every: int = 0
    track_train_iou: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.step_size < 0:
            raise ValueError("step_size must be non-negative")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.compute_dtype not in DTYPES:
            raise ValueError(f"compute_dtype must be one of {tuple(DTYPES)}")
        SsvmConfig(self.C, self.loss_scale)
        if self.margin_rule not in ssvm.MARGIN_RULES:
            raise ValueError(f"margin_rule must be one of {ssvm.MARGIN_RULES}")

    @property
    def ssvm(self) -> SsvmConfig:
        return SsvmConfig(self.C, self.loss_scale)

    @property
    def dtype(self):
        return DTYPES[self.compute_dtype]

    def to_json(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["acm"] = asdict(self.acm)
        d["arch"] = self.arch.to_json()
        return d

    @classmethod
    def from_json(cls, d: dict) -> TrainConfig:
        d = dict(d)
        d["acm"] = acm.AcmOptions(**d["acm"])
        d["arch"] = ArchConfig.from_json(d["arch"])
        return cls(**d)


@dataclass
class TrainReport:
    epoch_hinge: list[float] = field(default_factory=list)
    epoch_train_iou: list[float] = field(default_factory=list)
    test_iou: float | None = None
    seconds: float = 0.0
    train_ids: list[str] = field(default_factory=list)
    test_ids: list[str] = field(default_factory=list)
    config: dict | None = None

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> TrainReport:
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))


class Optimizer:
    """Applies ``w <- w - eta * (w + C/N * sum_i g_i)``, optionally through Adam moments."""

    def __init__(self, cfg: TrainConfig, beta1=0.9, beta2=0.999, eps=1e-8):
        self.cfg = cfg
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: BackboneParams, grad_sum: dict[str, np.ndarray] | None, n: int) -> None:
        cfg = self.cfg
        total = {}
        for name, w in params.items():
            g = w.copy()
            if grad_sum is not None and name in grad_sum:
                g += (cfg.C / n) * grad_sum[name]
            total[name] = g
        if cfg.optimizer == "sgd":
            params.apply_({k: cfg.step_size * g for k, g in total.items()})
            return
        self.t += 1
        step = {}
        for name, g in total.items():
            m = self.m.get(name, 0.0) * self.beta1 + (1 - self.beta1) * g
            v = self.v.get(name, 0.0) * self.beta2 + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            mhat = m / (1 - self.beta1 ** self.t)
            vhat = v / (1 - self.beta2 ** self.t)
            step[name] = cfg.step_size * mhat / (np.sqrt(vhat) + self.eps)
        params.apply_(step)


def update_step(params: BackboneParams, grad_sum, n: int, cfg: TrainConfig,
                optimizer: Optimizer | None = None) -> None:
    """One weight update from the summed backbone gradients of ``n`` samples."""
    (optimizer or Optimizer(cfg)).step(params, grad_sum, n)


def _accumulate(total, grads):
    if total is None:
        return {k: v.copy() for k, v in grads.items()}
    for k, v in grads.items():
        total[k] += v
    return total


def gt_contour(sample: Sample, L: int) -> Polygon:
    """Ground-truth polygon with the same node count as the snake."""
    return resample(sample.gt_polygon, L)


def _check_dataset(dataset, arch: ArchConfig):
    if not dataset:
        raise ValueError("dataset is empty")
    for s in dataset:
        if s.image.shape != (arch.input_size, arch.input_size, 3):
            raise ValueError(f"sample {s.id}: image shape {s.image.shape} does not match "
                             f"input_size {arch.input_size}")
        if arch.output_size != arch.input_size:
            raise ValueError("training needs output_size == input_size; crop the data first")
        if not s.gt_mask.any():
            raise ValueError(f"sample {s.id}: empty ground-truth mask")


def _sample_step(params, sample, cfg):
    """Forward, loss-augmented inference and backward for one sample.

    Returns ``(grads or None, hinge, maps)``.
    """
    maps, cache = backbone.forward(params, sample.image, cfg.dtype)
    gt = gt_contour(sample, cfg.acm.L)
    y_hat = ssvm.loss_augmented_infer(maps, sample.gt_mask, cfg.acm, cfg.ssvm)
    h = ssvm.hinge(gt, y_hat, maps, sample.gt_mask)
    v = ssvm.subgradient(gt, y_hat, maps, sample.gt_mask, cfg.margin_rule)
    grads = None if v.is_zero() else backbone.backward(params, cache, v)
    return grads, h, maps


def _per_init_steps(params, sample, cfg, opt):
    """One update per initialization, using that start's loss-augmented result."""
    gt = gt_contour(sample, cfg.acm.L)
    hinges = []
    inits = acm.init_polygons(sample.size, sample.size, cfg.acm.init_radius_frac, cfg.acm.L)
    maps = None
    for init in inits:
        maps, cache = backbone.forward(params, sample.image, cfg.dtype)
        aug = ssvm.augmented_maps(maps, sample.gt_mask, cfg.loss_scale)
        y_hat, _ = acm.evolve(init, aug, cfg.acm)
        hinges.append(ssvm.hinge(gt, y_hat, maps, sample.gt_mask))
        v = ssvm.subgradient(gt, y_hat, maps, sample.gt_mask, cfg.margin_rule)
        grads = None if v.is_zero() else backbone.backward(params, cache, v)
        opt.step(params, grads, 1)
    return float(np.mean(hinges)), maps


def _train_iou(maps, sample, opts):
    results = acm.infer_multi(maps, opts)
    return acm.select_best([p for p, _ in results], sample.gt_mask)[1]


def train(dataset: list[Sample], cfg: TrainConfig, test_set: list[Sample] | None = None,
          params: BackboneParams | None = None, log: Callable[[str], None] | None = None,
          checkpoint_path=None) -> tuple[BackboneParams, TrainReport]:
    """Subgradient training of the backbone on ``dataset``; returns the params and a report."""
    _check_dataset(dataset, cfg.arch)
    if test_set:
        _check_dataset(test_set, cfg.arch)
    if params is None:
        params = backbone.init_params(cfg.arch, cfg.seed)
    elif params.arch != cfg.arch:
        raise ValueError("initial params do not match the configured architecture")
    rng = np.random.default_rng(cfg.seed)
    opt = Optimizer(cfg)
    report = TrainReport(train_ids=[s.id for s in dataset],
                         test_ids=[s.id for s in test_set or []], config=cfg.to_json())
    start = time.perf_counter()
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(dataset))
        hinges, ious = [], []
        for b in range(0, len(order), cfg.batch):
            batch = sorted((dataset[i] for i in order[b:b + cfg.batch]), key=lambda s: s.id)
            if cfg.update_per_init:
                for sample in batch:
                    h, maps = _per_init_steps(params, sample, cfg, opt)
                    hinges.append(h)
                    if cfg.track_train_iou:
                        ious.append(_train_iou(maps, sample, cfg.acm))
                continue
            total = None
            for sample in batch:
                grads, h, maps = _sample_step(params, sample, cfg)
                hinges.append(h)
                if grads is not None:
                    total = _accumulate(total, grads)
                if cfg.track_train_iou:
                    ious.append(_train_iou(maps, sample, cfg.acm))
            opt.step(params, total, len(batch))
        report.epoch_hinge.append(float(np.mean(hinges)))
        report.epoch_train_iou.append(float(np.mean(ious)) if ious else float("nan"))
        report.seconds = time.perf_counter() - start
        if log:
            log(f"epoch {epoch + 1}/{cfg.epochs}  hinge {report.epoch_hinge[-1]:.4f}  "
                f"train_iou {report.epoch_train_iou[-1]:.4f}  ({report.seconds:.0f}s)")
        if checkpoint_path and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(params, report, checkpoint_path)
    if test_set:
        report.test_iou, _ = evaluate(params, test_set, cfg.acm, dtype=cfg.dtype)
        if log:
            log(f"test_iou {report.test_iou:.4f}")
    report.seconds = time.perf_counter() - start
    if checkpoint_path:
        save_checkpoint(params, report, checkpoint_path)
    return params, report


@dataclass(frozen=True)
class EvalRecord:
    id: str
    iou: float
    winner: int
    energy: float
    polygon: Polygon


def evaluate_maps(maps, sample: Sample, opts: acm.AcmOptions, mode: str = "multi") -> EvalRecord:
    if mode == "multi":
        results = acm.infer_multi(maps, opts)
        winner, score = acm.select_best([p for p, _ in results], sample.gt_mask)
        poly, energy = results[winner]
    elif mode == "center":
        poly, energy = acm.infer_center(maps, opts)
        winner = acm.CENTER_INDEX
        score = iou(rasterize(poly, maps.width, maps.height), sample.gt_mask)
    else:
        raise ValueError(f"unknown evaluation mode {mode!r}")
    return EvalRecord(sample.id, float(score), int(winner), float(energy), poly)


def evaluate(params: BackboneParams, dataset: list[Sample], opts: acm.AcmOptions = acm.AcmOptions(),
             mode: str = "multi", dtype=np.float32) -> tuple[float, list[EvalRecord]]:
    """Mean IoU with ground-truth selection among the five starts (or the centre start only)."""
    if not dataset:
        raise ValueError("dataset is empty")
    records = []
    for s in dataset:
        maps, _ = backbone.forward(params, s.image, dtype)
        records.append(evaluate_maps(maps, s, opts, mode))
    return float(np.mean([r.iou for r in records])), records


def split_dataset(samples: list[Sample], n_test: int, seed: int = 0) -> tuple[list[Sample], list[Sample]]:
    """Seeded random train/test split; both halves keep id order."""
    if not 0 <= n_test < len(samples):
        raise ValueError(f"n_test must lie in [0, {len(samples)})")
    perm = np.random.default_rng(seed).permutation(len(samples))
    test_idx = set(perm[:n_test].tolist())
    train = [s for i, s in enumerate(samples) if i not in test_idx]
    test = [s for i, s in enumerate(samples) if i in test_idx]
    return train, test


# ---------------------------------------------------------------- checkpoints

MAGIC = b"PSNAKE01"


class CheckpointError(ValueError):
    pass


def save_checkpoint(params: BackboneParams, report: TrainReport | None, path) -> None:
    """Write ``MAGIC``, a little-endian u64 header length, a JSON header, then float64 LE data."""
    manifest = []
    offset = 0
    for name, t in params.items():
        manifest.append({"name": name, "shape": list(t.shape), "offset": offset})
        offset += t.size * 8
    header = {"arch": params.arch.to_json(), "tensors": manifest, "data_bytes": offset,
              "report": report.to_json() if report is not None else None}
    blob = json.dumps(header).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, t in params.items():
            fh.write(t.astype("<f8").tobytes())
    tmp.replace(path)


def load_checkpoint(path, arch: ArchConfig | None = None) -> tuple[BackboneParams, TrainReport | None]:
    """Inverse of :func:`save_checkpoint`; ``arch`` (if given) must match the stored tensors."""
    raw = Path(path).read_bytes()
    if raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic bytes)")
    pos = len(MAGIC)
    if len(raw) < pos + 8:
        raise CheckpointError(f"{path}: corrupt checkpoint (truncated header length)")
    (hlen,) = struct.unpack("<Q", raw[pos:pos + 8])
    pos += 8
    if len(raw) < pos + hlen:
        raise CheckpointError(f"{path}: corrupt checkpoint (truncated header)")
    try:
        header = json.loads(raw[pos:pos + hlen].decode())
        stored = ArchConfig.from_json(header["arch"])
        manifest = header["tensors"]
        data_bytes = int(header["data_bytes"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint header ({exc})") from None
    data = raw[pos + hlen:]
    if len(data) != data_bytes:
        raise CheckpointError(f"{path}: corrupt checkpoint (expected {data_bytes} data bytes, "
                              f"found {len(data)})")
    target = arch or stored
    expected = backbone.param_shapes(target)
    names = [m["name"] for m in manifest]
    for name in expected:
        if name not in names:
            raise CheckpointError(f"{path}: tensor {name} required by the architecture is missing")
    tensors = {}
    for m in manifest:
        name, shape, off = m["name"], tuple(m["shape"]), int(m["offset"])
        if name not in expected:
            raise CheckpointError(f"{path}: tensor {name} is not part of the architecture")
        if shape != expected[name]:
            raise CheckpointError(f"{path}: tensor {name} has shape {shape}, "
                                  f"architecture expects {expected[name]}")
        n = int(np.prod(shape))
        if off < 0 or off + 8 * n > len(data):
            raise CheckpointError(f"{path}: tensor {name} lies outside the data section")
        tensors[name] = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
    tensors = {k: tensors[k] for k in expected}
    try:
        params = BackboneParams(target, tensors)
    except ValueError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    report = TrainReport.from_json(header["report"]) if header.get("report") else None
    return params, report
