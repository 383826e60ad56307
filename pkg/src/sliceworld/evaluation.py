"""Diagnostic evaluations: horizon prediction, probes, interventions, robustness.

Everything here runs a frozen model over held-out studies and reduces to
plain numpy; per-study records are JSON-serializable dicts, aggregation is
deterministic in ascending study-id order.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from . import phantom
from .diffcore import as_var
from .errors import DegenerateInput, SequenceTooShortError, ValidationError
from .metrics import HorizonMetrics, auprc, bleu1, horizon_metrics, spearman
from .objectives import ctrg_loss

BASELINE_KINDS = ("persistence", "linear_extrapolation", "model")
PROBE_TASKS = ("lesion_auprc", "zbin_accuracy", "error_spearman")
FACTOR_NAMES = ("a", "l", "u")
# Statistical baselines: positive rate is data-dependent and filled in per run.
ZBIN_BASELINE = 0.1
SPEARMAN_BASELINE = 0.0


# ---------------------------------------------------------------------------
# Continuity baselines
# ---------------------------------------------------------------------------


def baseline_predict(prefix_features, kind: str, k: int) -> np.ndarray:
    """Predict e_{t+k} from the feature prefix e_{1:t} without parameters."""
    prefix = np.asarray(prefix_features, dtype=np.float64)
    if prefix.ndim != 2:
        raise ValidationError("prefix must be (t, d)")
    if k < 1:
        raise ValidationError("k must be >= 1")
    t = prefix.shape[0]
    if kind == "persistence":
        if t < 1:
            raise SequenceTooShortError("persistence needs t >= 1")
        return prefix[-1].copy()
    if kind == "linear_extrapolation":
        if t < 2:
            raise SequenceTooShortError("linear extrapolation needs t >= 2")
        return prefix[-1] + k * (prefix[-1] - prefix[-2])
    raise ValidationError(f"unknown baseline kind '{kind}'")


# ---------------------------------------------------------------------------
# Frozen-model study snapshots
# ---------------------------------------------------------------------------


@dataclass
class StudySnapshot:
    """Numpy views of one study's forward pass under a frozen model."""

    study_id: str
    lesion_positive: bool
    labels: np.ndarray
    report_tokens: tuple[int, ...]
    e: np.ndarray
    h: np.ndarray
    a: np.ndarray
    l: np.ndarray
    u: np.ndarray
    w: np.ndarray
    z: np.ndarray
    preds_w: np.ndarray | None      # (T-K, K, d_e)
    preds_cf: np.ndarray | None

    @property
    def T(self) -> int:
        return self.e.shape[0]


def snapshot_study(model, params, example) -> StudySnapshot:
    want_preds = example.images.shape[0] > model.arch.horizon
    out = model.forward_study(params, example.images,
                              with_predictions=want_preds)
    state = out["state"]
    return StudySnapshot(
        study_id=example.study_id,
        lesion_positive=example.lesion_positive,
        labels=np.asarray(example.labels),
        report_tokens=tuple(example.report_tokens),
        e=out["e"].data, h=out["h"].data,
        a=state.a.data, l=state.l.data, u=state.u.data,
        w=out["w"].data, z=out["z"].data,
        preds_w=out["preds_w"].data if want_preds else None,
        preds_cf=out["preds_cf"].data if want_preds else None,
    )


def snapshot_dataset(model, examples) -> list[StudySnapshot]:
    params = model.leaves()
    return [snapshot_study(model, params, ex)
            for ex in sorted(examples, key=lambda e: e.study_id)]


# ---------------------------------------------------------------------------
# Multi-horizon prediction against continuity baselines, plus CF statistics
# ---------------------------------------------------------------------------


def prediction_eval(model, examples, ks=(1, 3, 5)):
    """Per-study records plus pooled (system, k) horizon metrics.

    Model predictions come from the world-token pathway; origins are
    restricted to t >= 2 so the linear baseline is defined on the same pairs.
    """
    K = model.arch.horizon
    for k in ks:
        if not 1 <= k <= K:
            raise ValidationError(f"eval horizon {k} outside [1, {K}]")
    params = model.leaves()
    pooled = {(sys, k): ([], []) for sys in BASELINE_KINDS for k in ks}
    records = []
    cf_disc_lesion, cf_disc_clean = [], []
    cf_fact, cf_cf = [], []
    skipped = 0
    for example in sorted(examples, key=lambda e: e.study_id):
        snap = snapshot_study(model, params, example)
        T = snap.T
        record = {"study_id": snap.study_id, "lesion_positive": snap.lesion_positive,
                  "T": T}
        any_pair = False
        for k in ks:
            idx = np.arange(1, T - k)  # 0-based origins; 1-based t in [2, T-k]
            if idx.size == 0:
                continue
            any_pair = True
            targets = snap.e[idx + k]
            model_preds = model.predict_at(
                params, model_src_rows(snap, idx), "w", k).data
            persist = snap.e[idx]
            linear = snap.e[idx] + k * (snap.e[idx] - snap.e[idx - 1])
            for sys, preds in (("model", model_preds), ("persistence", persist),
                               ("linear_extrapolation", linear)):
                pooled[(sys, k)][0].append(preds)
                pooled[(sys, k)][1].append(targets)
                hm = horizon_metrics(preds, targets)
                record[f"mse_{sys}_k{k}"] = hm.mse
                record[f"cosine_{sys}_k{k}"] = hm.cosine
        if snap.preds_w is not None:
            m = snap.labels[:T - K].astype(bool)
            disc = ((snap.preds_w - snap.preds_cf) ** 2).sum(axis=-1)
            origins = np.arange(T - K)[:, None]
            tgt = snap.e[origins + np.arange(1, K + 1)[None, :]]
            lf = ((snap.preds_w - tgt) ** 2).sum(axis=-1)
            lc = ((snap.preds_cf - tgt) ** 2).sum(axis=-1)
            if m.any():
                record["cf_l_fact_lesion"] = float(lf[m].mean())
                record["cf_l_cf_lesion"] = float(lc[m].mean())
                record["cf_disc_lesion"] = float(disc[m].mean())
                cf_fact.append(lf[m].mean())
                cf_cf.append(lc[m].mean())
                cf_disc_lesion.append(disc[m].mean())
            if (~m).any():
                record["cf_disc_clean"] = float(disc[~m].mean())
                cf_disc_clean.append(disc[~m].mean())
        if not any_pair:
            skipped += 1
        records.append(record)
    aggregate = {"skipped_studies": skipped, "horizon": {}}
    for (sys, k), (preds, tgts) in pooled.items():
        if not preds:
            continue
        hm = horizon_metrics(np.concatenate(preds), np.concatenate(tgts))
        aggregate["horizon"][f"{sys}_k{k}"] = {
            "mse": hm.mse, "cosine": hm.cosine, "n_pairs": hm.n_pairs,
            "n_skipped": hm.n_skipped}
    aggregate["cf"] = {
        "mean_l_fact_lesion": float(np.mean(cf_fact)) if cf_fact else math.nan,
        "mean_l_cf_lesion": float(np.mean(cf_cf)) if cf_cf else math.nan,
        "disc_lesion": float(np.mean(cf_disc_lesion)) if cf_disc_lesion else math.nan,
        "disc_clean": float(np.mean(cf_disc_clean)) if cf_disc_clean else math.nan,
    }
    return records, aggregate


def model_src_rows(snap: StudySnapshot, idx: np.ndarray):
    """World tokens at the requested origins, as a tape constant."""
    return as_var(snap.w[idx])


# ---------------------------------------------------------------------------
# Factor probes
# ---------------------------------------------------------------------------


@dataclass
class ProbeResult:
    factor: str
    task: str
    score: float | None
    baseline_score: float | None
    skipped: bool = False


def collect_probe_data(snapshots: list[StudySnapshot], horizon: int):
    """Flatten factors and probe targets over all slices of all studies."""
    factors = {"a": [], "l": [], "u": []}
    factors_origin = {"a": [], "l": [], "u": []}
    labels, zbins, groups, groups_origin, difficulty = [], [], [], [], []
    for gi, snap in enumerate(snapshots):
        T = snap.T
        for name, mat in (("a", snap.a), ("l", snap.l), ("u", snap.u)):
            factors[name].append(mat)
        labels.append(snap.labels)
        t_one_based = np.arange(1, T + 1)
        zbins.append(np.minimum((10 * t_one_based) // T, 9))
        groups.append(np.full(T, gi))
        if snap.preds_w is not None:
            origins = np.arange(T - horizon)
            tgt = snap.e[origins[:, None] + np.arange(1, horizon + 1)[None, :]]
            d = ((snap.preds_w - tgt) ** 2).sum(axis=-1).mean(axis=1)
            difficulty.append(d)
            groups_origin.append(np.full(T - horizon, gi))
            for name, mat in (("a", snap.a), ("l", snap.l), ("u", snap.u)):
                factors_origin[name].append(mat[:T - horizon])
    out = {
        "factors": {k: np.concatenate(v) for k, v in factors.items()},
        "labels": np.concatenate(labels),
        "zbins": np.concatenate(zbins),
        "groups": np.concatenate(groups),
    }
    if difficulty:
        out["difficulty"] = np.concatenate(difficulty)
        out["groups_origin"] = np.concatenate(groups_origin)
        out["factors_origin"] = {k: np.concatenate(v)
                                 for k, v in factors_origin.items()}
    return out


def _split_by_group(groups: np.ndarray):
    uniq = np.unique(groups)
    train_groups = set(uniq[::2].tolist())
    train = np.array([g in train_groups for g in groups])
    return train, ~train


def _standardize(train_X, X):
    mu = train_X.mean(axis=0)
    sd = train_X.std(axis=0)
    sd[sd == 0] = 1.0
    return (X - mu) / sd


def _adam_train(grad_fn, w0, iters, lr):
    w = w0.copy()
    m = np.zeros_like(w)
    v = np.zeros_like(w)
    for t in range(1, iters + 1):
        g = grad_fn(w)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - lr * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    return w


def _with_bias(X):
    return np.hstack([X, np.ones((X.shape[0], 1))])


def fit_probe(factor_vectors, targets, task: str, groups) -> ProbeResult:
    """Train a single affine probe and score it on held-out studies.

    Studies are split half/half deterministically; logistic (binary),
    softmax (10-class), and least-squares (regression) objectives share the
    same affine family. Single-class binary targets report a skip.
    """
    X = np.asarray(factor_vectors, dtype=np.float64)
    groups = np.asarray(groups)
    train, evl = _split_by_group(groups)
    Xs = _standardize(X[train], X)
    Xtr, Xev = _with_bias(Xs[train]), _with_bias(Xs[evl])

    if task == "lesion_auprc":
        y = np.asarray(targets, dtype=np.float64)
        ytr, yev = y[train], y[evl]
        if len(np.unique(ytr)) < 2 or len(np.unique(yev)) < 2:
            return ProbeResult("?", task, None, None, skipped=True)

        def grad_fn(w):
            p = 1.0 / (1.0 + np.exp(-(Xtr @ w)))
            return Xtr.T @ (p - ytr) / ytr.size

        w = _adam_train(grad_fn, np.zeros(Xtr.shape[1]), iters=300, lr=0.05)
        score = auprc(Xev @ w, yev.astype(int))
        return ProbeResult("?", task, score, float(yev.mean()))

    if task == "zbin_accuracy":
        y = np.asarray(targets, dtype=np.int64)
        onehot = np.eye(10)[y[train]]

        def grad_fn(W):
            W = W.reshape(Xtr.shape[1], 10)
            logits = Xtr @ W
            logits -= logits.max(axis=1, keepdims=True)
            p = np.exp(logits)
            p /= p.sum(axis=1, keepdims=True)
            return ((Xtr.T @ (p - onehot)) / onehot.shape[0]).ravel()

        W = _adam_train(grad_fn, np.zeros(Xtr.shape[1] * 10), iters=300, lr=0.1)
        pred = np.argmax(Xev @ W.reshape(Xtr.shape[1], 10), axis=1)
        score = float((pred == y[evl]).mean())
        return ProbeResult("?", task, score, ZBIN_BASELINE)

    if task == "error_spearman":
        y = np.asarray(targets, dtype=np.float64)
        lam = 1e-6
        A = Xtr.T @ Xtr + lam * np.eye(Xtr.shape[1])
        w = np.linalg.solve(A, Xtr.T @ y[train])
        try:
            score = spearman(Xev @ w, y[evl])
        except DegenerateInput:
            return ProbeResult("?", task, None, None, skipped=True)
        return ProbeResult("?", task, score, SPEARMAN_BASELINE)

    raise ValidationError(f"unknown probe task '{task}'")


def probe_battery(model, examples) -> list[ProbeResult]:
    """All 9 (factor, task) probes on a held-out set."""
    snapshots = snapshot_dataset(model, examples)
    data = collect_probe_data(snapshots, model.arch.horizon)
    results = []
    for factor in FACTOR_NAMES:
        for task in PROBE_TASKS:
            if task == "lesion_auprc":
                res = fit_probe(data["factors"][factor], data["labels"], task,
                                data["groups"])
            elif task == "zbin_accuracy":
                res = fit_probe(data["factors"][factor], data["zbins"], task,
                                data["groups"])
            else:
                if "difficulty" not in data:
                    res = ProbeResult(factor, task, None, None, skipped=True)
                    results.append(res)
                    continue
                res = fit_probe(data["factors_origin"][factor],
                                data["difficulty"], task, data["groups_origin"])
            res.factor = factor
            results.append(res)
    return results


# ---------------------------------------------------------------------------
# Report generation, interventions, robustness
# ---------------------------------------------------------------------------


def _content(tokens) -> list[int]:
    """Tokens between BOS and the first EOS (fallback: strip specials)."""
    toks = list(tokens)
    if toks and toks[0] == phantom.BOS_TOKEN:
        toks = toks[1:]
    if phantom.EOS_TOKEN in toks:
        toks = toks[:toks.index(phantom.EOS_TOKEN)]
    return [t for t in toks if t != phantom.PAD_TOKEN]


def study_nll(model, params, example) -> float:
    out = model.forward_study(params, example.images, with_predictions=False)
    logprobs, mask = model.decode_report(params, out["z"], "teacher_forced",
                                         example.report_tokens)
    return float(ctrg_loss(logprobs, mask).data)


def generation_eval(model, examples):
    """Greedy BLEU-1 and teacher-forced NLL per study, plus means."""
    params = model.leaves()
    records = []
    for example in sorted(examples, key=lambda e: e.study_id):
        out = model.forward_study(params, example.images, with_predictions=False)
        hyp = model.decode_report(params, out["z"], "greedy")
        score = bleu1(_content(hyp), _content(example.report_tokens))
        records.append({
            "study_id": example.study_id,
            "bleu1": score,
            "nll": study_nll(model, params, example),
            "lesion_positive": example.lesion_positive,
        })
    aggregate = {
        "bleu1": float(np.mean([r["bleu1"] for r in records])),
        "nll": float(np.mean([r["nll"] for r in records])),
        "n_studies": len(records),
    }
    return records, aggregate


def run_intervention_eval(model, examples, modes=("lesion_zero", "uncertainty_zero")):
    """Factual vs intervened greedy reports, finding-set metrics, Table rows.

    target_changed  : the generated target-finding sets differ
    mention_removed : a factually generated target finding disappears
    preserved       : fraction of factual non-target findings kept
    hallucinated    : newly appearing non-target findings over the absent set
    Extractor failures are flagged, excluded from aggregates, and counted.
    """
    params = model.leaves()
    target_set = frozenset(phantom.TARGET_FINDINGS)
    nontarget_set = frozenset(phantom.NONTARGET_FINDINGS)
    records = []
    for example in sorted(examples, key=lambda e: e.study_id):
        out = model.forward_study(params, example.images, with_predictions=False)
        state = out["state"]
        base = {"study_id": example.study_id,
                "lesion_positive": example.lesion_positive}
        try:
            factual_tokens = model.decode_report(params, out["z"], "greedy")
            factual = phantom.extract_findings(factual_tokens)
        except phantom.ReportParseError:
            for mode in modes:
                records.append({**base, "mode": mode, "extractor_failed": True})
            continue
        f_target = factual & target_set
        f_non = factual & nontarget_set
        for mode in modes:
            new_state = model.intervene(params, state, mode)
            _, z_int = model.project_tokens(params, new_state.s)
            try:
                tokens = model.decode_report(params, z_int, "greedy")
                found = phantom.extract_findings(tokens)
            except phantom.ReportParseError:
                records.append({**base, "mode": mode, "extractor_failed": True})
                continue
            i_target = found & target_set
            i_non = found & nontarget_set
            preserved = (len(f_non & i_non) / len(f_non)) if f_non else 1.0
            absent = nontarget_set - f_non
            halluc = (len(i_non - f_non) / len(absent)) if absent else 0.0
            records.append({
                **base,
                "mode": mode,
                "extractor_failed": False,
                "target_changed": bool(f_target != i_target),
                "mention_removed": bool(f_target - i_target),
                "preserved_fraction": preserved,
                "hallucinated_fraction": halluc,
            })
    aggregate = aggregate_interventions(records)
    return records, aggregate


def aggregate_interventions(records) -> list[dict]:
    """Rows keyed by (lesion-positive group, mode), rates in percent."""
    rows = []
    modes = sorted({r["mode"] for r in records})
    for positive in (True, False):
        for mode in modes:
            group = [r for r in records
                     if r["mode"] == mode and r["lesion_positive"] == positive]
            failed = sum(1 for r in group if r.get("extractor_failed"))
            ok = [r for r in group if not r.get("extractor_failed")]
            row = {
                "group": "positive" if positive else "negative",
                "mode": mode,
                "n": len(ok),
                "extractor_failures": failed,
            }
            if ok:
                row.update({
                    "target_change_pct": 100.0 * np.mean([r["target_changed"] for r in ok]),
                    "mention_removal_pct": 100.0 * np.mean([r["mention_removed"] for r in ok]),
                    "preservation_pct": 100.0 * np.mean([r["preserved_fraction"] for r in ok]),
                    "hallucination_pct": 100.0 * np.mean([r["hallucinated_fraction"] for r in ok]),
                })
            rows.append(row)
    return rows


def subsample_indices(T: int, budget: float) -> np.ndarray:
    """Uniform stride subsampling: every ceil(1/budget)-th slice from the first."""
    if not 0 < budget <= 1:
        raise ValidationError(f"budget must be in (0, 1], got {budget}")
    stride = math.ceil(1.0 / budget)
    return np.arange(0, T, stride)


def reduced_slice_eval(model, examples, budgets=(1.0, 0.5, 0.25)):
    """Re-run generation on uniformly subsampled slices per budget."""
    rows = []
    for budget in budgets:
        subset = []
        for example in examples:
            idx = subsample_indices(example.images.shape[0], budget)
            if idx.size == 0:
                continue
            subset.append(dataclasses.replace(
                example, images=example.images[idx], labels=example.labels[idx]))
        if not subset:
            continue
        _, agg = generation_eval(model, subset)
        rows.append({"budget": budget, "n_studies": agg["n_studies"],
                     "bleu1": agg["bleu1"], "nll": agg["nll"]})
    return rows
