"""Training loop, evaluation loop, and the gradient-check runner."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DataMissing, InvalidConfig, NonFiniteLoss, UnknownStrategy
from .masks import BinaryMask
from .metrics import DEFAULT_NORM_SIZE, EvalSample, MetricsReport, build_report
from .model import (
    ModelConfig,
    SelectionModel,
    load_checkpoint,
    predict_mask,
    save_checkpoint,
    select_threshold_iop,
    select_threshold_from_top5,
    select_top1_iou,
    select_union_top1_threshold,
    loss_iou,
    loss_iop,
)
from .nn import OptimizerConfig, OptimizerState, adamw_step, finite_diff_grad
from .synth import SyntheticSample, load_samples, pool_embeddings

STRATEGIES = ("top1-iou", "threshold-iop", "union", "top5-threshold", "gt-top1")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    steps: int = 5000
    grad_accumulation: int = 10
    batch_size: int = 1
    seed: int = 0
    train_data: str = ""
    eval_data: str = ""
    checkpoint: str = ""
    report: str = ""
    log: str = ""

    def __post_init__(self):
        if self.steps < 1:
            raise InvalidConfig(f"steps must be >= 1, got {self.steps}")
        if self.grad_accumulation < 1 or self.batch_size < 1:
            raise InvalidConfig("grad_accumulation and batch_size must be >= 1")

    @classmethod
    def from_json(cls, obj: dict) -> "RunConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise InvalidConfig(f"unknown run config keys: {sorted(unknown)}")
        obj = dict(obj)
        model = ModelConfig.from_json(obj.pop("model", {}))
        opt_obj = dict(obj.pop("optimizer", {}))
        steps = obj.get("steps", 5000)
        opt_obj.setdefault("total_steps", steps)  # schedule spans the run
        unknown_opt = set(opt_obj) - set(OptimizerConfig.__dataclass_fields__)
        if unknown_opt:
            raise InvalidConfig(f"unknown optimizer keys: {sorted(unknown_opt)}")
        optimizer = OptimizerConfig(**opt_obj)
        return cls(model=model, optimizer=optimizer, **obj)


def _sample_inputs(sample: SyntheticSample):
    emb = pool_embeddings(sample)
    ious = np.asarray(sample.targets.ious, dtype=np.float64)
    iops = np.asarray(sample.targets.iops, dtype=np.float64)
    return emb, sample.seg_token, ious, iops


def train(cfg: RunConfig):
    """Run the accumulate/update loop over the training directory.

    Returns (model, log_records). Each log record carries the per-step mean
    component losses; the logged total is their weighted combination.
    """
    if not cfg.train_data:
        raise DataMissing("train_data directory not set")
    samples = load_samples(cfg.train_data)
    inputs = [_sample_inputs(s) for s in samples]
    model = SelectionModel(cfg.model, seed=cfg.seed)
    state = OptimizerState(config=cfg.optimizer)
    order = np.random.default_rng(cfg.seed).permutation(len(inputs))
    micro_per_step = cfg.grad_accumulation * cfg.batch_size
    log_records = []
    cursor = 0
    for step in range(1, cfg.steps + 1):
        model.store.zero_grads()
        sum_iou = 0.0
        sum_iop = 0.0
        for _ in range(micro_per_step):
            emb, seg, ious, iops = inputs[order[cursor % len(inputs)]]
            cursor += 1
            total, l_iou, l_iop, _, _ = model.loss_and_backward(emb, seg, ious, iops)
            if not np.isfinite(total):
                raise NonFiniteLoss(
                    f"step {step}: loss became non-finite "
                    f"(iou={l_iou}, iop={l_iop})"
                )
            sum_iou += l_iou
            sum_iop += l_iop
        model.store.scale_grads(1.0 / micro_per_step)
        lr = adamw_step(model.store, state)
        mean_iou = sum_iou / micro_per_step
        mean_iop = sum_iop / micro_per_step
        log_records.append(
            {
                "step": step,
                "lr": lr,
                "loss_iou": mean_iou,
                "loss_iop": mean_iop,
                "loss_total": cfg.model.lambda_iou * mean_iou
                + cfg.model.lambda_iop * mean_iop,
            }
        )
    if cfg.checkpoint:
        save_checkpoint(model, cfg.checkpoint)
    if cfg.log:
        write_log(log_records, cfg.log)
    return model, log_records


def write_log(records, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec))
            fh.write("\n")


def read_log(path) -> list[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def select_indices(model: SelectionModel, sample: SyntheticSample,
                   strategy: str, iop_threshold: float) -> list[int]:
    """Apply one selection strategy to a sample; 'gt-top1' is the oracle that
    picks the proposal with the highest true IoU."""
    if strategy not in STRATEGIES:
        raise UnknownStrategy(f"{strategy!r}; choose from {', '.join(STRATEGIES)}")
    k = len(sample.proposals)
    if k == 0:
        return []
    if strategy == "gt-top1":
        return [int(np.argmax(sample.targets.ious))]
    emb = pool_embeddings(sample)
    output = model.forward(emb, sample.seg_token)
    if strategy == "top1-iou":
        return select_top1_iou(output)
    if strategy == "threshold-iop":
        return select_threshold_iop(output, iop_threshold)
    if strategy == "union":
        return select_union_top1_threshold(output, iop_threshold)
    return select_threshold_from_top5(output, iop_threshold)


def evaluate(checkpoint, data_dir: str, strategy: str = "threshold-iop",
             iop_threshold: float = None, norm_size: int = DEFAULT_NORM_SIZE) -> MetricsReport:
    """Select masks for every sample in the directory and score the unions."""
    model = checkpoint if isinstance(checkpoint, SelectionModel) else load_checkpoint(checkpoint)
    if iop_threshold is None:
        iop_threshold = model.config.iop_threshold
    samples = load_samples(data_dir)
    eval_samples = []
    for sample in samples:
        indices = select_indices(model, sample, strategy, iop_threshold)
        prediction = predict_mask(sample.proposals, indices)
        eval_samples.append(
            EvalSample(prediction=prediction, ground_truth=sample.gt_mask,
                       image_id=sample.image_id)
        )
    return build_report(eval_samples, norm_size)


# ---------------------------------------------------------------- gradcheck

GRADCHECK_TOLERANCE = 1e-4


@dataclass
class GradCheckBlock:
    name: str
    max_rel_error: float
    passed: bool


@dataclass
class GradCheckReport:
    blocks: list[GradCheckBlock]
    passed: bool

    def worst(self) -> GradCheckBlock:
        return max(self.blocks, key=lambda b: b.max_rel_error)


def _rel_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / scale)) if a.size else 0.0


def gradcheck(seed: int, tolerance: float = GRADCHECK_TOLERANCE) -> GradCheckReport:
    """Compare every analytic parameter/input gradient of the full loss
    against central finite differences on a small random model."""
    rng = np.random.default_rng(seed)
    dim = int(rng.choice((8, 8, 12, 16)))
    k = int(rng.integers(2, 9))
    config = ModelConfig(
        model_dim=dim,
        fusion_blocks=2,
        attention_heads=2,
        fusion_hidden_dim=2 * dim,
        iou_head_dims=(dim, dim),
        iop_head_dims=(dim, 1),
    )
    model = SelectionModel(config, seed=seed)
    embeddings = rng.standard_normal((k, dim))
    seg = rng.standard_normal(dim)
    ious = rng.uniform(0.0, 1.0, size=k)
    iops = rng.uniform(0.0, 1.0, size=k)

    model.store.zero_grads()
    _, _, _, demb, dseg = model.loss_and_backward(embeddings, seg, ious, iops)

    blocks = []
    for name in model.store.names():
        original = model.store.params[name]

        def loss_at(value, name=name, original=original):
            model.store.params[name] = value
            out = model.loss_only(embeddings, seg, ious, iops)
            model.store.params[name] = original
            return out

        fd = finite_diff_grad(loss_at, original)
        err = _rel_error(model.store.grads[name], fd)
        blocks.append(GradCheckBlock(name, err, err <= tolerance))

    fd_emb = finite_diff_grad(
        lambda e: model.loss_only(e, seg, ious, iops), embeddings
    )
    blocks.append(GradCheckBlock("input.embeddings", _rel_error(demb, fd_emb),
                                 _rel_error(demb, fd_emb) <= tolerance))
    fd_seg = finite_diff_grad(
        lambda s: model.loss_only(embeddings, s, ious, iops), seg
    )
    blocks.append(GradCheckBlock("input.seg", _rel_error(dseg, fd_seg),
                                 _rel_error(dseg, fd_seg) <= tolerance))
    return GradCheckReport(blocks=blocks, passed=all(b.passed for b in blocks))
