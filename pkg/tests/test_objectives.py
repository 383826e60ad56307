"""Hand-value, property, and gradient tests for every loss term."""

import math

import numpy as np
import pytest

import helpers
from sliceworld import diffcore as dc
from sliceworld.diffcore import as_var
from sliceworld.errors import SequenceTooShortError, ValidationError
from sliceworld.objectives import (
    LossConfig,
    LossInputs,
    cf_losses,
    ctrg_loss,
    fas_occ,
    fas_smooth,
    fas_sparse,
    fas_uncertainty,
    mfp_loss,
    recon_loss,
    total_loss,
)


def V(x):
    return as_var(np.asarray(x, dtype=np.float64))


class TestMfp:
    def test_hand_case(self):
        cfg = LossConfig(horizon=1)
        e = V([[0.0], [1.0], [2.0]])
        preds = V([[[0.0]], [[0.0]]])
        lh, lw = mfp_loss(e, preds, preds, cfg)
        assert lh.item() == pytest.approx(2.5, abs=1e-15)
        assert lw.item() == pytest.approx(2.5, abs=1e-15)

    def test_perfect_predictions_zero(self):
        cfg = LossConfig(horizon=2)
        rng = np.random.default_rng(0)
        e = rng.normal(size=(6, 3))
        targets = np.stack([np.stack([e[t + k] for k in (1, 2)]) for t in range(4)])
        lh, lw = mfp_loss(V(e), V(targets), V(targets), cfg)
        assert lh.item() == 0.0 and lw.item() == 0.0

    def test_quadratic_scaling(self):
        cfg = LossConfig(horizon=1)
        rng = np.random.default_rng(1)
        e = rng.normal(size=(5, 2))
        base = np.stack([e[t + 1][None, :] for t in range(4)])
        err = rng.normal(size=base.shape)
        l1, _ = mfp_loss(V(e), V(base + err), V(base), cfg)
        l2, _ = mfp_loss(V(e), V(base + 2 * err), V(base), cfg)
        assert l2.item() == pytest.approx(4 * l1.item(), rel=1e-12)

    def test_too_short_rejected(self):
        cfg = LossConfig(horizon=5)
        with pytest.raises(SequenceTooShortError):
            mfp_loss(V(np.zeros((4, 2))), V(np.zeros((0, 5, 2))),
                     V(np.zeros((0, 5, 2))), cfg)


class TestFasSmooth:
    def test_constant_zero(self):
        assert fas_smooth(V(np.ones((5, 3)))).item() == 0.0

    def test_hand_case(self):
        a = np.zeros((3, 2))
        a[:, 0] = [1, 2, 3]
        assert fas_smooth(V(a)).item() == pytest.approx(1.0, abs=1e-15)

    def test_reversal_invariant(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=(7, 4))
        assert fas_smooth(V(a)).item() == pytest.approx(
            fas_smooth(V(a[::-1].copy())).item(), rel=1e-12)

    def test_single_slice_defined_as_zero(self):
        assert fas_smooth(V(np.ones((1, 3)))).item() == 0.0


class TestFasSparse:
    def test_zeros(self):
        assert fas_sparse(V(np.zeros((4, 3)))).item() == 0.0

    def test_hand_case(self):
        assert fas_sparse(V([[1.0, -1.0]])).item() == 2.0

    def test_absolute_homogeneity(self):
        rng = np.random.default_rng(3)
        l = rng.normal(size=(5, 3))
        base = fas_sparse(V(l)).item()
        assert fas_sparse(V(-2.5 * l)).item() == pytest.approx(2.5 * base, rel=1e-12)


class TestFasUncertainty:
    def test_perfect_alignment_zero(self):
        cfg = LossConfig(horizon=1)
        e = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 0.0]])
        preds = np.array([[[0.0, 0.0]], [[1.0, 0.0]]])
        errs = [((preds[t, 0] - e[t + 1]) ** 2).mean() for t in range(2)]
        loss = fas_uncertainty(V(errs), V(preds), V(e), cfg)
        assert loss.item() == 0.0

    def test_hand_case(self):
        # d_e=1, K=1, T=2: target = (p - e_2)^2, loss = (g - target)^2.
        cfg = LossConfig(horizon=1)
        e = V([[0.5], [1.5]])
        preds = V([[[1.0]]])
        g = V([0.7])
        want = (0.7 - (1.0 - 1.5) ** 2) ** 2
        assert fas_uncertainty(g, preds, e, cfg).item() == pytest.approx(want, abs=1e-15)

    def test_stop_gradient_blocks_prediction_heads(self):
        model = helpers.tiny_model(seed=4, horizon=2)
        rng = np.random.default_rng(4)
        images = helpers.random_images(rng, T=6)
        cfg = helpers.loss_cfg(horizon=2)

        def unc_only(params):
            inputs = helpers.pretrain_inputs(model, params, images,
                                             np.zeros(6, dtype=np.int8))
            return fas_uncertainty(inputs.unc_scalars, inputs.preds_h,
                                   inputs.features, cfg)

        _, grads = dc.grad(unc_only, model.store)
        for name in model.store.names():
            if name.startswith("pred/"):
                assert not grads[name].any(), name
        assert any(grads[n].any() for n in model.store.names()
                   if n.startswith("unc/"))

    def test_gradient_matches_fd_with_frozen_target(self):
        # FD check respects stop_gradient by precomputing the target once.
        model = helpers.tiny_model(seed=5, horizon=2)
        rng = np.random.default_rng(5)
        images = helpers.random_images(rng, T=5)
        cfg = helpers.loss_cfg(horizon=2)
        base_inputs = helpers.pretrain_inputs(model, model.leaves(), images,
                                              np.zeros(5, dtype=np.int8))
        diff = base_inputs.preds_h.data - np.stack(
            [base_inputs.features.data[t + 1:t + 3] for t in range(3)])
        frozen_target = (diff ** 2).mean(axis=-1).mean(axis=1)

        def surrogate(params):
            inputs = helpers.pretrain_inputs(model, params, images,
                                             np.zeros(5, dtype=np.int8))
            gap = inputs.unc_scalars - as_var(frozen_target)
            return (gap * gap).sum() * (1.0 / 3)

        frozen = {"img", "seq", "factor", "occ", "tok", "lm", "dec", "recon"}
        model.store.freeze(*frozen)  # keep the FD sweep small
        try:
            errors = dc.check_gradients(surrogate, model.store, rtol=1e-4)
        finally:
            model.store.unfreeze_all()
        assert errors


class TestFasOcc:
    def test_half_everywhere_is_ln2(self):
        m_hat = V(np.full(4, 0.5))
        assert fas_occ(m_hat, np.array([1, 0, 1, 0])).item() == pytest.approx(
            math.log(2), abs=1e-12)

    def test_confident_clipped_predictions(self):
        eps = 1e-7
        m_hat = V(np.array([1 - eps, eps]))
        loss = fas_occ(m_hat, np.array([1, 0])).item()
        assert loss == pytest.approx(eps, rel=1e-6)

    def test_label_flip_symmetry(self):
        rng = np.random.default_rng(6)
        p = rng.uniform(0.01, 0.99, size=7)
        m = rng.integers(0, 2, size=7)
        a = fas_occ(V(p), m).item()
        b = fas_occ(V(1 - p), 1 - m).item()
        assert a == pytest.approx(b, rel=1e-12)

    def test_out_of_range_rejected(self):
        with pytest.raises(ValidationError):
            fas_occ(V(np.array([1.2, 0.5])), np.array([1, 0]))
        with pytest.raises(ValidationError):
            fas_occ(V(np.array([-0.1, 0.5])), np.array([1, 0]))


class TestCf:
    def test_empty_masks(self):
        cfg = LossConfig(horizon=1)
        rng = np.random.default_rng(7)
        e = rng.normal(size=(4, 2))
        pw = rng.normal(size=(3, 1, 2))
        pc = rng.normal(size=(3, 1, 2))
        l_inv, l_eff = cf_losses(V(pw), V(pc), V(e), np.ones(4), cfg)
        assert l_inv.item() == 0.0
        l_inv, l_eff = cf_losses(V(pw), V(pc), V(e), np.zeros(4), cfg)
        assert l_eff.item() == 0.0

    def test_identical_predictions_hinge_is_delta(self):
        cfg = LossConfig(horizon=1)
        e = V(np.array([[0.3], [0.9]]))
        preds = V(np.array([[[0.5]]]))
        _, l_eff = cf_losses(preds, preds, e, np.array([1, 0]), cfg)
        # numerator is exactly delta; denominator K*sum(m) + epsilon.
        assert l_eff.item() == pytest.approx(0.1, abs=1e-8)
        assert l_eff.item() == pytest.approx(0.1 / (1.0 + cfg.epsilon), rel=1e-14)

    def test_large_cf_error_gap_zeroes_hinge(self):
        cfg = LossConfig(horizon=1)
        e = V(np.array([[0.0], [0.0]]))
        pw = V(np.array([[[0.1]]]))     # l_fact = 0.01
        pc = V(np.array([[[math.sqrt(0.31)]]]))  # l_cf = 0.31, gap 0.3 > delta
        _, l_eff = cf_losses(pw, pc, e, np.array([1, 0]), cfg)
        assert l_eff.item() == 0.0

    def test_hinge_monotonicity(self):
        cfg = LossConfig(horizon=1)
        e = V(np.zeros((2, 1)))
        m = np.array([1, 0])

        def eff(pf, pc):
            _, l_eff = cf_losses(V([[[pf]]]), V([[[pc]]]), e, m, cfg)
            return l_eff.item()

        # non-decreasing in l_fact (|pf| up), non-increasing in l_cf (|pc| up)
        assert eff(0.2, 0.3) <= eff(0.4, 0.3)
        assert eff(0.4, 0.3) >= eff(0.4, 0.6)

    def test_masks_disjoint_and_cover(self):
        cfg = LossConfig(horizon=2)
        T = 7
        labels = np.array([0, 1, 1, 0, 0, 1, 0], dtype=float)
        m = labels[:T - cfg.horizon]
        assert m.sum() + (1 - m).sum() == T - cfg.horizon


class TestCtrg:
    def test_uniform_vocab64(self):
        lp = V(np.full(10, -math.log(64)))
        mask = np.zeros(10, dtype=bool)
        mask[4:] = True
        assert ctrg_loss(lp, mask).item() == pytest.approx(math.log(64), abs=1e-12)

    def test_prompt_positions_ignored(self):
        rng = np.random.default_rng(8)
        lp = rng.normal(size=8)
        mask = np.array([0, 0, 0, 1, 1, 1, 1, 0], dtype=bool)
        base = ctrg_loss(V(lp), mask).item()
        lp2 = lp.copy()
        lp2[~mask] = rng.normal(size=4) * 100
        assert ctrg_loss(V(lp2), mask).item() == pytest.approx(base, rel=1e-12)

    def test_three_token_hand_case(self):
        lp = V(np.array([-0.5, -1.0, -2.0]))
        mask = np.ones(3, dtype=bool)
        assert ctrg_loss(lp, mask).item() == pytest.approx(3.5 / 3, abs=1e-12)

    def test_empty_mask_rejected(self):
        with pytest.raises(ValidationError):
            ctrg_loss(V(np.zeros(3)), np.zeros(3, dtype=bool))


class TestTotal:
    def _random_pretrain_inputs(self, seed, T=7, K=2, d=3):
        rng = np.random.default_rng(seed)
        return LossInputs(
            features=V(rng.normal(size=(T, d))),
            preds_h=V(rng.normal(size=(T - K, K, d))),
            preds_w=V(rng.normal(size=(T - K, K, d))),
            preds_cf=V(rng.normal(size=(T - K, K, d))),
            anatomy=V(rng.normal(size=(T, 4))),
            lesion=V(rng.normal(size=(T, 3))),
            unc_scalars=V(rng.uniform(0.1, 1.0, size=T - K)),
            m_hat=V(rng.uniform(0.05, 0.95, size=T)),
            labels=rng.integers(0, 2, size=T),
        )

    def test_recomposition_matches_weighted_sum(self):
        inputs = self._random_pretrain_inputs(9)
        cfg = LossConfig(horizon=2, lambda_h=0.3, lambda_w=1.7, lambda_smooth=0.2,
                         lambda_sparse=2.0, lambda_unc=0.9, lambda_occ=1.1,
                         lambda_inv=0.6, lambda_eff=1.4, alpha_mfp=1.0,
                         alpha_fas=0.8, alpha_cf=0.5)
        total, breakdown = total_loss(inputs, cfg, "pretrain")
        t = breakdown.terms
        want = (cfg.alpha_mfp * (0.3 * t["mfp_h"] + 1.7 * t["mfp_w"])
                + 0.8 * (0.2 * t["smooth"] + 2.0 * t["sparse"]
                         + 0.9 * t["unc"] + 1.1 * t["occ"])
                + 0.5 * (0.6 * t["cf_inv"] + 1.4 * t["cf_eff"]))
        assert breakdown.total == pytest.approx(want, abs=1e-12)
        assert total.item() == breakdown.total
        assert all(v >= 0 for v in t.values()) and breakdown.total >= 0

    def test_zero_weight_drops_term(self):
        inputs = self._random_pretrain_inputs(10)
        cfg = LossConfig(horizon=2)
        full, _ = total_loss(inputs, cfg, "pretrain")
        cfg2 = LossConfig(horizon=2, lambda_sparse=0.0)
        reduced, breakdown = total_loss(inputs, cfg2, "pretrain")
        assert full.item() - reduced.item() == pytest.approx(
            breakdown.terms["sparse"], rel=1e-12)

    def test_finetune_ignores_world_model_inputs(self):
        rng = np.random.default_rng(11)
        lp = V(rng.normal(size=6))
        mask = np.array([0, 0, 1, 1, 1, 0], dtype=bool)
        inputs = LossInputs(token_logprobs=lp, report_mask=mask)
        total, breakdown = total_loss(inputs, LossConfig(horizon=2), "finetune")
        assert set(breakdown.terms) == {"ctrg"}
        assert total.item() == pytest.approx(
            -(lp.data[mask]).mean(), rel=1e-12)

    def test_missing_inputs_rejected(self):
        with pytest.raises(ValidationError):
            total_loss(LossInputs(), LossConfig(), "pretrain")
        with pytest.raises(ValidationError):
            total_loss(LossInputs(), LossConfig(), "finetune")
        with pytest.raises(ValidationError):
            total_loss(LossInputs(), LossConfig(), "warmup")

    def test_negative_weight_rejected(self):
        with pytest.raises(ValidationError):
            LossConfig(lambda_h=-1.0).validate()


class TestReconLoss:
    def test_perfect_zero_and_scaling(self):
        rng = np.random.default_rng(12)
        e = rng.normal(size=(5, 3))
        assert recon_loss(V(e), V(e)).item() == 0.0
        err = rng.normal(size=e.shape)
        l1 = recon_loss(V(e + err), V(e)).item()
        assert l1 == pytest.approx((err ** 2).sum() / 5, rel=1e-12)


class TestGradientContract:
    """Spot FD checks; the acceptance suite runs the full 20-config sweep."""

    @pytest.mark.parametrize("term", ["mfp_h", "mfp_w", "smooth", "sparse",
                                      "occ", "cf_inv", "cf_eff"])
    def test_pretrain_terms_pass_fd(self, term):
        model = helpers.tiny_model(seed=13, horizon=2)
        rng = np.random.default_rng(13)
        images = helpers.random_images(rng, T=5)
        labels = np.array([0, 1, 1, 0, 0], dtype=np.int8)
        cfg = helpers.loss_cfg(horizon=2)

        def term_loss(params):
            inputs = helpers.pretrain_inputs(model, params, images, labels)
            if term in ("mfp_h", "mfp_w"):
                lh, lw = mfp_loss(inputs.features, inputs.preds_h,
                                  inputs.preds_w, cfg)
                return lh if term == "mfp_h" else lw
            if term == "smooth":
                return fas_smooth(inputs.anatomy)
            if term == "sparse":
                return fas_sparse(inputs.lesion)
            if term == "occ":
                return fas_occ(inputs.m_hat, inputs.labels)
            l_inv, l_eff = cf_losses(inputs.preds_w, inputs.preds_cf,
                                     inputs.features, inputs.labels, cfg)
            return l_inv if term == "cf_inv" else l_eff

        model.store.freeze("dec", "lm", "recon")
        try:
            dc.check_gradients(term_loss, model.store, rtol=1e-4)
        finally:
            model.store.unfreeze_all()

    def test_ctrg_passes_fd(self):
        model = helpers.tiny_model(seed=14, horizon=2)
        rng = np.random.default_rng(14)
        images = helpers.random_images(rng, T=4)
        report = helpers.tiny_report(rng)

        def loss_fn(params):
            inputs = helpers.finetune_inputs(model, params, images, report)
            return ctrg_loss(inputs.token_logprobs, inputs.report_mask)

        model.store.freeze("pred", "recon", "unc", "occ")
        try:
            dc.check_gradients(loss_fn, model.store, rtol=1e-4)
        finally:
            model.store.unfreeze_all()
