"""Shared test utilities: tiny architectures and forward-to-loss glue."""

import numpy as np

from sliceworld.model import ArchConfig, WorldModel
from sliceworld.objectives import LossConfig, LossInputs
from sliceworld import phantom


def tiny_arch(horizon=2, **overrides) -> ArchConfig:
    base = dict(
        image_side=8, patch=4, d_v=5, d_att=4, d_e=4, d_h=6,
        d_anat=3, d_lesion=3, d_unc=2, d_w=5, d_z=6,
        horizon=horizon, pred_hidden=5, vocab=16, decoder_layers=1,
        decoder_hidden=8, max_positions=48, prompt_tokens=(3,),
        max_report_len=12,
    )
    base.update(overrides)
    return ArchConfig(**base)


def tiny_model(seed=0, horizon=2, **overrides) -> WorldModel:
    return WorldModel.build(tiny_arch(horizon=horizon, **overrides), seed=seed)


def random_images(rng, T, side=8):
    return rng.integers(0, 256, size=(T, side, side, 3)).astype(np.uint8)


def pretrain_inputs(model: WorldModel, params, images, labels) -> LossInputs:
    out = model.forward_study(params, images)
    state = out["state"]
    return LossInputs(
        features=out["e"], preds_h=out["preds_h"], preds_w=out["preds_w"],
        preds_cf=out["preds_cf"], anatomy=state.a, lesion=state.l,
        unc_scalars=out["g_unc"], m_hat=state.m_hat, labels=labels,
    )


def finetune_inputs(model: WorldModel, params, images, report_tokens) -> LossInputs:
    out = model.forward_study(params, images, with_predictions=False)
    logprobs, mask = model.decode_report(params, out["z"], "teacher_forced",
                                         report_tokens)
    return LossInputs(token_logprobs=logprobs, report_mask=mask)


def loss_cfg(horizon=2, **overrides) -> LossConfig:
    cfg = LossConfig(horizon=horizon)
    for key, value in overrides.items():
        setattr(cfg, key, value)
    return cfg


def tiny_report(rng, vocab=16, length=3):
    body = [int(rng.integers(3, vocab)) for _ in range(length)]
    return [phantom.BOS_TOKEN] + body + [phantom.EOS_TOKEN]
