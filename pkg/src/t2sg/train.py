"""Losses, target assignment, AdamW with cosine annealing, and the training loop."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tape, Tensor
from .datagen import DetectionSample, normalize_points
from .model import ForwardOutput, ModelConfig, TopoFormer, reference_points
from .scene import CATEGORY_INDEX, NUM_CLASSES

log = logging.getLogger(__name__)

EDGE_OBJECTIVES = ("auto", "tie", "tie_anchored", "direct")
TIE_MAPPINGS = ("clamp", "sigmoid")


class NumericAbort(RuntimeError):
    """Training hit a non-finite value."""


@dataclass(frozen=True)
class LossWeights:
    lambda_cls: float = 1.5
    lambda_reg: float = 0.02
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0

    def __post_init__(self):
        if min(self.lambda_cls, self.lambda_reg, self.focal_alpha, self.focal_gamma) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class Targets:
    cls: np.ndarray  # (N, NUM_CLASSES) one-hot, zero rows for background
    reg: np.ndarray  # (N, 3l) normalized GT points, zero rows for background
    reg_mask: np.ndarray  # (N, 3l)
    edge: np.ndarray  # (N, N) 0/1
    edge_mask: np.ndarray  # (N, N) 0/1, diagonal always 0


def assign_targets(sample: DetectionSample, mask_background_pairs: bool = True) -> Targets:
    """Per-query targets from the generator's query-to-lane provenance."""
    n = sample.n_queries
    lanes = sample.scene.lanes
    l = len(lanes[0].centerline) if lanes else len(sample.pred_centerlines[0])
    cls = np.zeros((n, NUM_CLASSES))
    reg = np.zeros((n, 3 * l))
    reg_mask = np.zeros((n, 3 * l))
    gt_to_q = {}
    for q, g in enumerate(sample.assignment):
        if g < 0:
            continue
        gt_to_q[g] = q
        cls[q, CATEGORY_INDEX[lanes[g].category]] = 1.0
        reg[q] = normalize_points(lanes[g].centerline.points, sample.bev_extent).reshape(-1)
        reg_mask[q] = 1.0
    edge = np.zeros((n, n))
    for i, j in sample.scene.edges:
        edge[gt_to_q[i], gt_to_q[j]] = 1.0
    mask = 1.0 - np.eye(n)
    if mask_background_pairs:
        bg = np.array([g < 0 for g in sample.assignment])
        mask[np.ix_(bg, bg)] = 0.0
    return Targets(cls, reg, reg_mask, edge, mask)


def node_loss(out: ForwardOutput, targets: Targets, w: LossWeights = LossWeights()) -> Tensor:
    l_cls = ad.sigmoid_focal_loss(out.cls_logits, targets.cls, w.focal_alpha, w.focal_gamma)
    l_reg = ad.l1_loss(out.reg_points, Tensor(targets.reg), mask=targets.reg_mask)
    return ad.add(ad.scale(l_cls, w.lambda_cls), ad.scale(l_reg, w.lambda_reg))


def tie(e_a: Tensor, e_cf) -> Tensor:
    """Factual minus counterfactual scores, averaged over counterfactual samples."""
    samples = e_cf if isinstance(e_cf, (list, tuple)) else [e_cf]
    diffs = []
    for s in samples:
        if s.shape != e_a.shape:
            raise ad.ContractError(f"tie: shape mismatch {e_a.shape} vs {s.shape}")
        diffs.append(ad.sub(e_a, s))
    acc = diffs[0]
    for dterm in diffs[1:]:
        acc = ad.add(acc, dterm)
    return acc if len(diffs) == 1 else ad.scale(acc, 1.0 / len(diffs))


def edge_loss(
    tie_scores: Tensor,
    targets: Targets,
    w: LossWeights = LossWeights(),
    mapping: str = "clamp",
    eps: float = 1e-6,
) -> Tensor:
    """Focal loss on indirect-effect scores.

    ``mapping="clamp"`` treats the scores as probabilities clamped into
    ``[eps, 1 - eps]``; ``mapping="sigmoid"`` expects a logit-space difference
    and applies the sigmoid focal loss to it.
    """
    if mapping == "clamp":
        core = ad.focal_loss_on_probs(
            tie_scores, targets.edge, w.focal_alpha, w.focal_gamma, mask=targets.edge_mask, eps=eps
        )
    elif mapping == "sigmoid":
        core = ad.sigmoid_focal_loss(tie_scores, targets.edge, w.focal_alpha, w.focal_gamma, mask=targets.edge_mask)
    else:
        raise ValueError(f"unknown TIE mapping {mapping!r}")
    return ad.scale(core, w.lambda_cls)


def direct_edge_loss(out: ForwardOutput, targets: Targets, w: LossWeights = LossWeights()) -> Tensor:
    """Focal loss on the factual edge logits, used when no intervention is configured."""
    core = ad.sigmoid_focal_loss(out.e_a_logits, targets.edge, w.focal_alpha, w.focal_gamma, mask=targets.edge_mask)
    return ad.scale(core, w.lambda_cls)


def total_loss(l_v: Tensor, l_e: Tensor) -> Tensor:
    return ad.add(l_v, l_e)


def resolve_edge_objective(objective: str, cil_mode: str) -> str:
    if objective not in EDGE_OBJECTIVES:
        raise ValueError(f"edge_objective must be one of {EDGE_OBJECTIVES}")
    if objective == "auto":
        return "direct" if cil_mode == "off" else "tie"
    if objective in ("tie", "tie_anchored") and cil_mode == "off":
        raise ValueError(
            f"edge_objective={objective!r} with cil_mode='off' would train on an identically zero "
            "indirect effect; use cil_mode zero/mean/random or edge_objective='direct'"
        )
    return objective


def sample_losses(
    model: TopoFormer,
    out: ForwardOutput,
    targets: Targets,
    w: LossWeights,
    objective: str,
    mapping: str = "clamp",
    edge_on: bool = True,
) -> tuple[Tensor, Tensor]:
    l_v = node_loss(out, targets, w)
    if not edge_on:
        return l_v, Tensor(0.0)
    if objective == "direct":
        return l_v, direct_edge_loss(out, targets, w)
    if mapping == "sigmoid":
        scores = tie(out.e_a_logits, out.e_cf_logit_samples)
    else:
        scores = tie(out.e_a, out.e_cf_samples)
    l_e = edge_loss(scores, targets, w, mapping)
    if objective == "tie_anchored":
        # the indirect effect alone never fixes the level of E_A, which inference thresholds
        l_e = ad.add(l_e, direct_edge_loss(out, targets, w))
    return l_v, l_e


# ---------------------------------------------------------------- optimizer


def cosine_lr(step: int, total_steps: int, base_lr: float, floor: float) -> float:
    if total_steps <= 0:
        return base_lr
    t = min(max(step, 0), total_steps) / total_steps
    return floor + 0.5 * (base_lr - floor) * (1.0 + math.cos(math.pi * t))


@dataclass
class OptimState:
    lr: float = 2e-4
    lr_floor: float = 2e-6
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    total_steps: int = 1
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def current_lr(self) -> float:
        return cosine_lr(self.step, self.total_steps, self.lr, self.lr_floor)


def optimizer_step(state: OptimState, params: dict[str, Parameter]) -> float:
    """One decoupled-weight-decay Adam update; zeroes grads and advances the step."""
    lr = state.current_lr()
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = p.grad
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(g)
            v = np.zeros_like(g)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        new = p.value * (1.0 - lr * state.weight_decay) - lr * m_hat / (np.sqrt(v_hat) + state.eps)
        p.assign(new)
        p.zero_grad()
    return lr


# ---------------------------------------------------------------- loop


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 8
    lr: float = 2e-4
    lr_floor: float = 2e-6
    weight_decay: float = 0.01
    warmup_epochs: int = 0
    seed: int = 0
    edge_objective: str = "auto"
    tie_mapping: str = "clamp"
    mask_background_pairs: bool = True
    eval_every: int = 0
    loss_weights: LossWeights = LossWeights()

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size <= 0:
            raise ValueError("epochs must be >= 0 and batch_size > 0")
        if self.tie_mapping not in TIE_MAPPINGS:
            raise ValueError(f"tie_mapping must be one of {TIE_MAPPINGS}")
        if self.edge_objective not in EDGE_OBJECTIVES:
            raise ValueError(f"edge_objective must be one of {EDGE_OBJECTIVES}")
        if isinstance(self.loss_weights, dict):
            object.__setattr__(self, "loss_weights", LossWeights(**self.loss_weights))


@dataclass
class _Prepared:
    sample: DetectionSample
    queries: Tensor
    a_spm: Tensor
    targets: Targets
    reference: Tensor


def prepare(model: TopoFormer, samples: Sequence[DetectionSample], mask_background_pairs: bool = True) -> list[_Prepared]:
    return [
        _Prepared(
            s, Tensor(s.queries), model.spm(s.pred_centerlines), assign_targets(s, mask_background_pairs), reference_points(s)
        )
        for s in samples
    ]


def _first_nonfinite(model: TopoFormer, out: ForwardOutput | None) -> str:
    if out is not None:
        named = {"x_tilde": out.x_tilde, "e_a": out.e_a, "cls_logits": out.cls_logits, "reg_points": out.reg_points}
        for k, t in named.items():
            if not np.all(np.isfinite(t.value)):
                return k
    for k, p in model.parameters().items():
        if not np.all(np.isfinite(p.value)):
            return f"parameter {k}"
        if not np.all(np.isfinite(p.grad)):
            return f"gradient of {k}"
    return "loss"


@dataclass
class TrainResult:
    model: TopoFormer
    optim: OptimState
    log: list[dict]
    epoch: int


def train(
    train_set: Sequence[DetectionSample],
    model_cfg: ModelConfig,
    cfg: TrainConfig = TrainConfig(),
    val_set: Sequence[DetectionSample] | None = None,
    log_path: str | Path | None = None,
    resume: tuple[TopoFormer, OptimState, int] | None = None,
    evaluate: Callable[[TopoFormer, Sequence[DetectionSample]], dict] | None = None,
    on_epoch: Callable[[TrainResult], None] | None = None,
) -> TrainResult:
    """Train a model; deterministic given the configs and the sample order."""
    if not train_set:
        raise ValueError("training set is empty")
    objective = resolve_edge_objective(cfg.edge_objective, model_cfg.cil_mode)
    steps_per_epoch = math.ceil(len(train_set) / cfg.batch_size)
    if resume is not None:
        model, optim, start_epoch = resume
    else:
        model = TopoFormer(model_cfg)
        optim = OptimState(
            lr=cfg.lr,
            lr_floor=cfg.lr_floor,
            weight_decay=cfg.weight_decay,
            total_steps=steps_per_epoch * cfg.epochs,
        )
        start_epoch = 0
    params = model.parameters()
    data = prepare(model, train_set, cfg.mask_background_pairs)
    w = cfg.loss_weights
    history: list[dict] = []
    log_fh = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        for epoch in range(start_epoch, cfg.epochs):
            edge_on = epoch >= cfg.warmup_epochs
            order = np.random.default_rng([cfg.seed, epoch]).permutation(len(data))
            sums = {"l_v": 0.0, "l_e": 0.0}
            t0 = time.perf_counter()
            lr = optim.current_lr()
            for start in range(0, len(order), cfg.batch_size):
                batch = order[start : start + cfg.batch_size]
                for idx in batch:
                    item = data[idx]
                    out = None
                    with Tape() as tape:
                        out = model.forward_features(
                            item.queries, item.a_spm, step=optim.step, counterfactual=edge_on and objective != "direct",
                            reference=item.reference,
                        )
                        l_v, l_e = sample_losses(model, out, item.targets, w, objective, cfg.tie_mapping, edge_on)
                        loss = ad.scale(total_loss(l_v, l_e), 1.0 / len(batch))
                    if not math.isfinite(loss.item()):
                        raise NumericAbort(
                            f"non-finite loss at epoch {epoch}, step {optim.step}, scene "
                            f"{item.sample.scene_id!r}; first non-finite tensor: {_first_nonfinite(model, out)}"
                        )
                    tape.backward(loss)
                    sums["l_v"] += l_v.item()
                    sums["l_e"] += l_e.item()
                bad = [k for k, p in params.items() if not np.all(np.isfinite(p.grad))]
                if bad:
                    raise NumericAbort(f"non-finite gradient at epoch {epoch}, step {optim.step}: first non-finite tensor: gradient of {bad[0]}")
                lr = optimizer_step(optim, params)
            entry = {
                "epoch": epoch,
                "step": optim.step,
                "l_v": sums["l_v"] / len(data),
                "l_e": sums["l_e"] / len(data),
                "lr": lr,
            }
            if evaluate is not None and val_set and cfg.eval_every and (epoch + 1) % cfg.eval_every == 0:
                entry["val"] = evaluate(model, val_set)
            history.append(entry)
            # wall time goes to the log only, so metrics.jsonl stays byte-reproducible
            log.info(
                "epoch %d step %d l_v=%.5f l_e=%.5f lr=%.2e (%.1fs)",
                epoch, optim.step, entry["l_v"], entry["l_e"], lr, time.perf_counter() - t0,
            )
            if log_fh:
                log_fh.write(json.dumps(entry, sort_keys=True) + "\n")
                log_fh.flush()
            if on_epoch is not None:
                on_epoch(TrainResult(model, optim, history, epoch + 1))
    finally:
        if log_fh:
            log_fh.close()
    return TrainResult(model, optim, history, cfg.epochs)


def optim_arrays(state: OptimState) -> dict[str, np.ndarray]:
    out = {}
    for k in state.m:
        out[f"m/{k}"] = state.m[k]
        out[f"v/{k}"] = state.v[k]
    return out


def optim_from_arrays(meta: dict, arrays: dict[str, np.ndarray]) -> OptimState:
    state = OptimState(**{k: meta[k] for k in ("lr", "lr_floor", "weight_decay", "beta1", "beta2", "eps", "total_steps", "step")})
    for k, v in arrays.items():
        kind, _, name = k.partition("/")
        if kind == "m":
            state.m[name] = v
        elif kind == "v":
            state.v[name] = v
    return state


def optim_meta(state: OptimState) -> dict:
    d = asdict(state)
    d.pop("m")
    d.pop("v")
    return d
