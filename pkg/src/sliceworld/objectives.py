"""Training loss terms and their weighted, stage-gated composition.

Conventions shared by every term: squared norms sum over feature dims;
prediction arrays are laid out (T-K, K, d) with origin index t and horizon
k; lesion masks index the prediction origin t, not the target slice.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffcore import Var, as_var, clip, relu, stop_gradient, take_rows, vabs
from .diffcore.tape import log
from .errors import SequenceTooShortError, ValidationError

STAGES = ("pretrain", "finetune")
_BCE_CLAMP = 1e-12


@dataclass
class LossConfig:
    """Stage gates, per-term weights, horizon, margin, stability constant."""

    alpha_mfp: float = 1.0
    alpha_fas: float = 1.0
    alpha_cf: float = 1.0
    alpha_ctrg: float = 1.0
    lambda_h: float = 1.0
    lambda_w: float = 1.0
    lambda_smooth: float = 1.0
    lambda_sparse: float = 1.0
    lambda_unc: float = 1.0
    lambda_occ: float = 1.0
    lambda_inv: float = 1.0
    lambda_eff: float = 1.0
    horizon: int = 5
    delta: float = 0.1
    epsilon: float = 1e-8

    def validate(self):
        for name, value in vars(self).items():
            if isinstance(value, (int, float)) and value < 0:
                raise ValidationError(f"{name} must be nonnegative, got {value}")
        if self.horizon < 1:
            raise ValidationError("horizon must be >= 1")


@dataclass
class LossBreakdown:
    """Unweighted sub-term values plus the gated, weighted total."""

    terms: dict[str, float] = field(default_factory=dict)
    total: float = 0.0

    def as_dict(self) -> dict:
        out = dict(self.terms)
        out["total"] = self.total
        return out


@dataclass
class LossInputs:
    """Everything total_loss may consume; unused fields stay None."""

    features: Var | None = None        # (T, d_e)
    preds_h: Var | None = None         # (T-K, K, d_e)
    preds_w: Var | None = None
    preds_cf: Var | None = None
    anatomy: Var | None = None         # (T, d_anat)
    lesion: Var | None = None          # (T, d_lesion)
    unc_scalars: Var | None = None     # (T-K,)
    m_hat: Var | None = None           # (T,)
    labels: np.ndarray | None = None   # (T,) in {0, 1}
    token_logprobs: Var | None = None  # (L,)
    report_mask: np.ndarray | None = None


def _target_gather(features: Var, K: int) -> Var:
    """Future targets (T-K, K, d): row (t, k-1) holds e_{t+k}."""
    T = features.shape[0]
    if T <= K:
        raise SequenceTooShortError(f"sequence length {T} requires T > K={K}")
    origins = np.arange(T - K)[:, None]
    idx = origins + np.arange(1, K + 1)[None, :]
    return take_rows(features, idx)


def mfp_loss(features: Var, preds_h: Var, preds_w: Var, cfg: LossConfig):
    """Mean squared multi-step prediction error for both pathways.

    Each pathway is normalized by 1/(K(T-K)); squared norms sum over d_e.
    """
    K = cfg.horizon
    targets = _target_gather(features, K)
    T = features.shape[0]
    scale = 1.0 / (K * (T - K))

    def one(preds):
        diff = preds - targets
        return (diff * diff).sum() * scale

    return one(preds_h), one(preds_w)


def fas_smooth(anatomy: Var) -> Var:
    """Mean squared difference of adjacent anatomy factors; 0 when T == 1."""
    T = anatomy.shape[0]
    if T < 2:
        return as_var(0.0)
    diff = anatomy[1:] - anatomy[:-1]
    return (diff * diff).sum() * (1.0 / (T - 1))


def fas_sparse(lesion: Var) -> Var:
    """Mean L1 norm of the lesion factor across the sequence."""
    T = lesion.shape[0]
    return vabs(lesion).sum() * (1.0 / T)


def fas_uncertainty(unc_scalars: Var, preds_h: Var, features: Var,
                    cfg: LossConfig) -> Var:
    """Squared gap between the difficulty scalar and the frozen mean error.

    The per-horizon error is the per-dimension mean squared error; the
    averaged target is wrapped in stop_gradient.
    """
    K = cfg.horizon
    targets = _target_gather(features, K)
    T = features.shape[0]
    if unc_scalars.shape[0] != T - K:
        raise ValidationError(
            f"need {T - K} uncertainty scalars, got {unc_scalars.shape[0]}")
    diff = preds_h - targets
    err = (diff * diff).mean(axis=-1)          # (T-K, K), per-dim MSE
    target = stop_gradient(err.mean(axis=1))   # (T-K,)
    gap = unc_scalars - target
    return (gap * gap).sum() * (1.0 / (T - K))


def fas_occ(m_hat: Var, labels: np.ndarray) -> Var:
    """Binary cross-entropy of lesion presence, unit positive-class weight."""
    labels = np.asarray(labels, dtype=np.float64)
    if m_hat.shape[0] != labels.shape[0]:
        raise ValidationError("m_hat and labels length mismatch")
    vals = m_hat.data
    if vals.min() < 0.0 or vals.max() > 1.0:
        raise ValidationError("m_hat outside (0, 1)")
    T = labels.shape[0]
    p = clip(m_hat, _BCE_CLAMP, 1.0 - _BCE_CLAMP)
    ll = labels * log(p) + (1.0 - labels) * log(1.0 - p)
    return ll.sum() * (-1.0 / T)


def cf_losses(preds_w: Var, preds_cf: Var, features: Var,
              labels: np.ndarray, cfg: LossConfig):
    """Counterfactual invariance (non-lesion origins) and margin effect."""
    K = cfg.horizon
    targets = _target_gather(features, K)
    T = features.shape[0]
    m = np.asarray(labels, dtype=np.float64)
    if m.shape[0] != T:
        raise ValidationError("labels length must equal T")
    m = m[:T - K]

    gap = preds_w - preds_cf
    gap_sq = (gap * gap).sum(axis=-1)                    # (T-K, K)
    inv_den = K * float((1.0 - m).sum()) + cfg.epsilon
    l_inv = (gap_sq * (1.0 - m)[:, None]).sum() * (1.0 / inv_den)

    df = preds_w - targets
    dc = preds_cf - targets
    l_fact = (df * df).sum(axis=-1)
    l_cf = (dc * dc).sum(axis=-1)
    hinge = relu(cfg.delta + l_fact - l_cf)
    eff_den = K * float(m.sum()) + cfg.epsilon
    l_eff = (hinge * m[:, None]).sum() * (1.0 / eff_den)
    return l_inv, l_eff


def ctrg_loss(token_logprobs: Var, report_mask: np.ndarray) -> Var:
    """Mean negative log-probability over report positions only."""
    mask = np.asarray(report_mask, dtype=bool)
    if token_logprobs.shape[0] != mask.shape[0]:
        raise ValidationError("log-probs and mask length mismatch")
    idx = np.nonzero(mask)[0]
    if idx.size == 0:
        raise ValidationError("empty report mask")
    picked = token_logprobs[idx]
    return picked.sum() * (-1.0 / idx.size)


def recon_loss(recon: Var, features: Var) -> Var:
    """Current-slice reconstruction: mean over t of the squared error."""
    T = features.shape[0]
    diff = recon - features
    return (diff * diff).sum() * (1.0 / T)


def _finite(name: str, value: Var) -> Var:
    if not np.isfinite(value.data):
        raise ValidationError(f"non-finite loss term '{name}'")
    return value


def total_loss(inputs: LossInputs, cfg: LossConfig, stage: str):
    """Stage-gated weighted total; returns (total Var, LossBreakdown).

    pretrain activates MFP + FAS + CF (CTRG gate forced to zero); finetune
    activates CTRG only. Missing stage-required inputs raise.
    """
    if stage not in STAGES:
        raise ValidationError(f"unknown stage '{stage}'")
    cfg.validate()
    terms: dict[str, Var] = {}
    if stage == "pretrain":
        required = ("features", "preds_h", "preds_w", "preds_cf", "anatomy",
                    "lesion", "unc_scalars", "m_hat")
        missing = [n for n in required if getattr(inputs, n) is None]
        if missing or inputs.labels is None:
            raise ValidationError(f"pretrain inputs missing: {missing or ['labels']}")
        mfp_h, mfp_w = mfp_loss(inputs.features, inputs.preds_h, inputs.preds_w, cfg)
        terms["mfp_h"] = _finite("mfp_h", mfp_h)
        terms["mfp_w"] = _finite("mfp_w", mfp_w)
        terms["smooth"] = _finite("smooth", fas_smooth(inputs.anatomy))
        terms["sparse"] = _finite("sparse", fas_sparse(inputs.lesion))
        terms["unc"] = _finite("unc", fas_uncertainty(
            inputs.unc_scalars, inputs.preds_h, inputs.features, cfg))
        terms["occ"] = _finite("occ", fas_occ(inputs.m_hat, inputs.labels))
        l_inv, l_eff = cf_losses(inputs.preds_w, inputs.preds_cf,
                                 inputs.features, inputs.labels, cfg)
        terms["cf_inv"] = _finite("cf_inv", l_inv)
        terms["cf_eff"] = _finite("cf_eff", l_eff)
        total = (
            cfg.alpha_mfp * (cfg.lambda_h * terms["mfp_h"] + cfg.lambda_w * terms["mfp_w"])
            + cfg.alpha_fas * (cfg.lambda_smooth * terms["smooth"]
                               + cfg.lambda_sparse * terms["sparse"]
                               + cfg.lambda_unc * terms["unc"]
                               + cfg.lambda_occ * terms["occ"])
            + cfg.alpha_cf * (cfg.lambda_inv * terms["cf_inv"]
                              + cfg.lambda_eff * terms["cf_eff"])
        )
    else:
        if inputs.token_logprobs is None or inputs.report_mask is None:
            raise ValidationError("finetune inputs missing: token_logprobs/report_mask")
        terms["ctrg"] = _finite("ctrg", ctrg_loss(inputs.token_logprobs,
                                                  inputs.report_mask))
        total = cfg.alpha_ctrg * terms["ctrg"]

    breakdown = LossBreakdown(
        terms={k: float(v.data) for k, v in terms.items()},
        total=float(total.data),
    )
    return total, breakdown
