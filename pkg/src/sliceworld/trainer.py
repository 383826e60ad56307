"""Two-stage training: world-model pretraining, then report fine-tuning.

Determinism contract: identical (seed, config, dataset) produce identical
checkpoints byte-for-byte. Data order is shuffled once per epoch from the
run seed; within a batch, per-study gradients are accumulated in ascending
study-id order; the optimizer update is a single serialized apply.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import phantom
from .diffcore import grad as diff_grad
from .errors import SequenceTooShortError, TrainingAborted, ValidationError
from .model import WorldModel
from .objectives import (
    LossBreakdown,
    LossConfig,
    LossInputs,
    recon_loss,
    total_loss,
)

PRETRAIN_ABLATIONS = ("recon", "mfp", "fas", "full")
FINETUNE_FROZEN = WorldModel.PRETRAINED_PREFIXES + ("recon",)


@dataclass
class StageConfig:
    stage: str
    learning_rate: float
    weight_decay: float = 0.01
    batch_size: int = 8
    grad_accum: int = 1
    epochs: int = 3
    max_seq_len: int = 256
    frozen: tuple[str, ...] = ()
    seed: int = 0
    ablation: str = "full"

    def validate(self):
        if self.stage not in ("pretrain", "finetune"):
            raise ValidationError(f"unknown stage '{self.stage}'")
        if self.batch_size < 1 or self.grad_accum < 1 or self.epochs < 0:
            raise ValidationError("batch_size/grad_accum >= 1, epochs >= 0")
        if self.stage == "pretrain" and self.ablation not in PRETRAIN_ABLATIONS:
            raise ValidationError(f"unknown pretrain ablation '{self.ablation}'")


def pretrain_config(**overrides) -> StageConfig:
    cfg = StageConfig(stage="pretrain", learning_rate=1e-4)
    return replace(cfg, **overrides)


def finetune_config(**overrides) -> StageConfig:
    cfg = StageConfig(stage="finetune", learning_rate=2e-5,
                      frozen=FINETUNE_FROZEN)
    return replace(cfg, **overrides)


@dataclass
class TrainingExample:
    """One study prepared for the model: windowed images plus supervision."""

    study_id: str
    images: np.ndarray          # (T, side, side, 3) uint8
    labels: np.ndarray          # (T,)
    report_tokens: tuple[int, ...]
    lesion_positive: bool


def prepare_examples(studies, arch, max_seq_len: int | None = None):
    """Window HU volumes once; truncate to max_seq_len leading slices."""
    examples = []
    for study in studies:
        rgb = phantom.volume_to_rgb(study.volume, arch.image_side)
        labels = study.labels
        if max_seq_len is not None and rgb.shape[0] > max_seq_len:
            rgb = rgb[:max_seq_len]
            labels = labels[:max_seq_len]
        examples.append(TrainingExample(
            study_id=study.study_id, images=rgb, labels=labels,
            report_tokens=tuple(study.report.tokens),
            lesion_positive=study.lesion_positive))
    return sorted(examples, key=lambda ex: ex.study_id)


class AdamW:
    """Decoupled-weight-decay adaptive update over unfrozen groups."""

    def __init__(self, store, learning_rate, weight_decay,
                 betas=(0.9, 0.999), eps=1e-8):
        self.store = store
        self.lr = learning_rate
        self.wd = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {n: np.zeros_like(store.get(n)) for n in store.trainable_names()}
        self.v = {n: np.zeros_like(store.get(n)) for n in store.trainable_names()}

    def apply(self, grads: dict[str, np.ndarray]):
        self.step_count += 1
        t = self.step_count
        for name in sorted(self.m):
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(self.store.get(name))
            m = self.m[name] = self.b1 * self.m[name] + (1 - self.b1) * g
            v = self.v[name] = self.b2 * self.v[name] + (1 - self.b2) * g * g
            m_hat = m / (1 - self.b1 ** t)
            v_hat = v / (1 - self.b2 ** t)
            theta = self.store.get(name)
            theta = theta - self.lr * (m_hat / (np.sqrt(v_hat) + self.eps)
                                       + self.wd * theta)
            self.store.set(name, theta)


def _study_loss(model, params, example, loss_cfg, stage_cfg):
    """Build the stage loss Var for one study; raises on short sequences."""
    if stage_cfg.stage == "pretrain":
        if example.images.shape[0] <= loss_cfg.horizon:
            raise SequenceTooShortError(example.study_id)
        out = model.forward_study(params, example.images)
        state = out["state"]
        if stage_cfg.ablation == "recon":
            value = recon_loss(model.reconstruct(params, out["h"]), out["e"])
            return value, LossBreakdown(terms={"recon": float(value.data)},
                                        total=float(value.data))
        gates = {
            "mfp": dict(alpha_fas=0.0, alpha_cf=0.0),
            "fas": dict(alpha_cf=0.0),
            "full": {},
        }[stage_cfg.ablation]
        cfg = replace(loss_cfg, **gates)
        inputs = LossInputs(
            features=out["e"], preds_h=out["preds_h"], preds_w=out["preds_w"],
            preds_cf=out["preds_cf"], anatomy=state.a, lesion=state.l,
            unc_scalars=out["g_unc"], m_hat=state.m_hat, labels=example.labels)
        return total_loss(inputs, cfg, "pretrain")
    out = model.forward_study(params, example.images, with_predictions=False)
    logprobs, mask = model.decode_report(params, out["z"], "teacher_forced",
                                         example.report_tokens)
    inputs = LossInputs(token_logprobs=logprobs, report_mask=mask)
    return total_loss(inputs, loss_cfg, "finetune")


def step(model, batch, optimizer, stage_cfg, loss_cfg):
    """One optimizer update over a batch of examples.

    Gradients are accumulated study by study in ascending study-id order
    (split into stage_cfg.grad_accum micro-batches), summed, and divided by
    the number of contributing studies before the single apply.
    """
    if not batch:
        raise ValidationError("empty batch")
    batch = sorted(batch, key=lambda ex: ex.study_id)
    acc: dict[str, np.ndarray] = {}
    term_sums: dict[str, float] = {}
    total_sum = 0.0
    used = 0
    for example in batch:
        def loss_fn(params, _ex=example):
            value, breakdown = _study_loss(model, params, _ex, loss_cfg, stage_cfg)
            loss_fn.breakdown = breakdown
            return value

        try:
            value, grads = diff_grad(loss_fn, model.store)
        except SequenceTooShortError:
            continue
        except ValidationError as exc:
            if "non-finite" in str(exc):
                raise TrainingAborted(example.study_id, str(exc)) from exc
            raise
        if not np.isfinite(value):
            raise TrainingAborted(example.study_id)
        for name, g in grads.items():
            if not np.isfinite(g).all():
                raise TrainingAborted(example.study_id,
                                      f"non-finite gradient in {name}")
            if name in acc:
                acc[name] += g
            else:
                acc[name] = g.copy()
        for key, term in loss_fn.breakdown.terms.items():
            term_sums[key] = term_sums.get(key, 0.0) + term
        total_sum += loss_fn.breakdown.total
        used += 1
    if used == 0:
        return None
    scale = 1.0 / used
    optimizer.apply({n: g * scale for n, g in acc.items()})
    return LossBreakdown(
        terms={k: v * scale for k, v in term_sums.items()},
        total=total_sum * scale)


def run_stage(model, examples, stage_cfg: StageConfig, loss_cfg: LossConfig):
    """Run one full stage; returns a list of per-step log records."""
    stage_cfg.validate()
    loss_cfg.validate()
    if loss_cfg.horizon != model.arch.horizon:
        raise ValidationError(
            f"loss horizon {loss_cfg.horizon} != model horizon {model.arch.horizon}")
    if stage_cfg.stage == "finetune" and stage_cfg.frozen:
        model.store.freeze(*stage_cfg.frozen)
    optimizer = AdamW(model.store, stage_cfg.learning_rate, stage_cfg.weight_decay)
    log = []
    window = stage_cfg.batch_size * stage_cfg.grad_accum
    t_start = time.perf_counter()
    step_idx = 0
    for epoch in range(stage_cfg.epochs):
        rng = np.random.default_rng([stage_cfg.seed, 7 + epoch])
        order = rng.permutation(len(examples))
        for lo in range(0, len(order), window):
            batch = [examples[i] for i in order[lo:lo + window]]
            breakdown = step(model, batch, optimizer, stage_cfg, loss_cfg)
            if breakdown is None:
                continue
            step_idx += 1
            record = {
                "step": step_idx,
                "epoch": epoch,
                "stage": stage_cfg.stage,
                "ablation": stage_cfg.ablation,
                "total": breakdown.total,
                "wall_time": time.perf_counter() - t_start,
            }
            record.update({f"loss_{k}": v for k, v in breakdown.terms.items()})
            log.append(record)
    return log


def pretrain(studies, model, stage_cfg: StageConfig, loss_cfg: LossConfig):
    """World-model pretraining on labeled slice sequences (no reports)."""
    if stage_cfg.stage != "pretrain":
        raise ValidationError("pretrain() requires a pretrain StageConfig")
    examples = prepare_examples(studies, model.arch, stage_cfg.max_seq_len)
    return run_stage(model, examples, stage_cfg, loss_cfg)


def finetune(studies, model, stage_cfg: StageConfig, loss_cfg: LossConfig):
    """Report fine-tuning; frozen groups are fixed by stage_cfg.frozen.

    Direct end-to-end training (no pretraining, nothing frozen) is the
    same code path with frozen=() on a freshly initialized model.
    """
    if stage_cfg.stage != "finetune":
        raise ValidationError("finetune() requires a finetune StageConfig")
    examples = prepare_examples(studies, model.arch, stage_cfg.max_seq_len)
    return run_stage(model, examples, stage_cfg, loss_cfg)
