"""Network assembly: slice encoding, prefix states, factors, tokens, decoder.

All methods take an explicit ``params`` dict of tape leaves (one per
parameter group) so a caller controls the gradient scope; ``WorldModel``
itself only owns the architecture description and the parameter store.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import phantom
from .diffcore import (
    MapHandle,
    MapSpec,
    ParamStore,
    Var,
    as_var,
    concat,
    log_softmax,
    sigmoid,
    softmax,
    softplus,
    stack,
    take_rows,
)
from .diffcore.maps import layer_norm
from .diffcore.store import init_uniform
from .errors import ValidationError

INTERVENTION_MODES = ("none", "lesion_zero", "uncertainty_zero")


@dataclass
class ArchConfig:
    """Dimensions and decoder settings; toy defaults, all config-driven."""

    image_side: int = 32
    patch: int = 8
    d_v: int = 32
    d_att: int = 32
    d_e: int = 32
    d_h: int = 64
    d_anat: int = 16
    d_lesion: int = 12
    d_unc: int = 4
    d_w: int = 32
    d_z: int = 48
    horizon: int = 5
    pred_hidden: int = 48
    vocab: int = phantom.VOCAB_SIZE
    decoder_layers: int = 2
    decoder_hidden: int = 96
    max_positions: int = 128
    prompt_tokens: tuple = phantom.PROMPT_TOKENS
    max_report_len: int = 48

    @property
    def d_state(self) -> int:
        return self.d_anat + self.d_lesion + self.d_unc

    def validate(self):
        for name in ("image_side", "patch", "d_v", "d_att", "d_e", "d_h",
                     "d_anat", "d_lesion", "d_unc", "d_w", "d_z", "horizon",
                     "pred_hidden", "vocab", "decoder_layers", "decoder_hidden"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.image_side % self.patch != 0:
            raise ValidationError(
                f"image side {self.image_side} not divisible by patch {self.patch}")


@dataclass
class WorldState:
    """Per-slice factor triple plus the lesion-presence probability."""

    a: Var
    l: Var
    u: Var
    s: Var
    m_hat: Var


def positional_encoding(T: int, dim: int) -> np.ndarray:
    """Sinusoids of the normalized index t/T; bounded by 1 in magnitude."""
    if T < 1:
        raise ValidationError("T must be >= 1")
    tau = (np.arange(1, T + 1, dtype=np.float64) / T)[:, None]
    n_sin = (dim + 1) // 2
    omegas = 0.5 * np.pi * (32.0 ** (np.arange(n_sin) / max(n_sin - 1, 1)))
    ang = tau * omegas
    pe = np.zeros((T, dim))
    pe[:, 0::2] = np.sin(ang)
    pe[:, 1::2] = np.cos(ang[:, :dim // 2])
    return pe


class WorldModel:
    """Owns the parameter store and the per-component map handles."""

    def __init__(self, arch: ArchConfig, store: ParamStore):
        arch.validate()
        self.arch = arch
        self.store = store
        a = arch
        patch_dim = a.patch * a.patch * 3
        self.img_patch = MapHandle(MapSpec("affine", patch_dim, a.d_v), "img/patch")
        self.img_compress = MapHandle(
            MapSpec("cross_attention", a.d_v, a.d_e, hidden_dim=a.d_att), "img/compress")
        self.seq_cell = MapHandle(
            MapSpec("causal_cell", a.d_e, a.d_h, hidden_dim=a.d_h), "seq/cell")
        self.head_anat = MapHandle(MapSpec("affine", a.d_h, a.d_anat), "factor/anat")
        self.head_les = MapHandle(MapSpec("affine", a.d_h, a.d_lesion), "factor/les")
        self.head_unc = MapHandle(MapSpec("affine", a.d_h, a.d_unc), "factor/unc")
        self.head_occ = MapHandle(MapSpec("affine", a.d_lesion, 1), "occ/head")
        self.tok_proj = MapHandle(MapSpec("affine", a.d_state, a.d_w), "tok/proj")
        self.lm_proj = MapHandle(MapSpec("mlp2", a.d_w, a.d_z, hidden_dim=a.d_z), "lm/proj")
        self.unc_scalar_head = MapHandle(MapSpec("affine", a.d_unc, 1), "unc/scalar")
        self.recon_head = MapHandle(
            MapSpec("mlp2", a.d_h, a.d_e, hidden_dim=a.pred_hidden), "recon/head")
        self.pred_heads = {}
        for k in range(1, a.horizon + 1):
            self.pred_heads[("h", k)] = MapHandle(
                MapSpec("mlp2", a.d_h, a.d_e, hidden_dim=a.pred_hidden), f"pred/h/k{k}")
            self.pred_heads[("w", k)] = MapHandle(
                MapSpec("mlp2", a.d_w, a.d_e, hidden_dim=a.pred_hidden), f"pred/w/k{k}")
        self.dec_ln1 = []
        self.dec_ln2 = []
        self.dec_qkvo = []
        self.dec_mlp = []
        for i in range(a.decoder_layers):
            self.dec_ln1.append(MapHandle(MapSpec("layernorm", a.d_z, a.d_z), f"dec/l{i}/ln1"))
            self.dec_ln2.append(MapHandle(MapSpec("layernorm", a.d_z, a.d_z), f"dec/l{i}/ln2"))
            self.dec_qkvo.append(tuple(
                MapHandle(MapSpec("affine", a.d_z, a.d_z), f"dec/l{i}/attn_{t}")
                for t in ("q", "k", "v", "o")))
            self.dec_mlp.append(MapHandle(
                MapSpec("mlp2", a.d_z, a.d_z, hidden_dim=a.decoder_hidden), f"dec/l{i}/mlp"))
        self.dec_ln_f = MapHandle(MapSpec("layernorm", a.d_z, a.d_z), "dec/final_ln")
        self.dec_out = MapHandle(MapSpec("affine", a.d_z, a.vocab), "dec/out")

    # -- construction --------------------------------------------------------

    @classmethod
    def build(cls, arch: ArchConfig, seed: int, dtype=np.float64) -> "WorldModel":
        store = ParamStore(dtype=dtype)
        model = cls(arch, store)
        rng = np.random.default_rng(seed)
        for handle in model._map_handles():
            handle.init(store, rng)
        store.create("dec/emb", init_uniform(rng, (arch.vocab, arch.d_z), arch.d_z))
        store.create("dec/pos", init_uniform(rng, (arch.max_positions, arch.d_z), arch.d_z))
        return model

    def _map_handles(self):
        handles = [self.img_patch, self.img_compress, self.seq_cell,
                   self.head_anat, self.head_les, self.head_unc, self.head_occ,
                   self.tok_proj, self.lm_proj, self.unc_scalar_head, self.recon_head]
        handles.extend(self.pred_heads[key] for key in sorted(self.pred_heads))
        for i in range(self.arch.decoder_layers):
            handles.extend([self.dec_ln1[i], *self.dec_qkvo[i], self.dec_ln2[i],
                            self.dec_mlp[i]])
        handles.extend([self.dec_ln_f, self.dec_out])
        return handles

    def leaves(self) -> dict[str, Var]:
        return self.store.leaf_vars()

    # -- vision --------------------------------------------------------------

    def patchify(self, images: np.ndarray) -> np.ndarray:
        """(T, H, W, 3) uint8 -> (T, M, patch*patch*3) float64 in [0, 1]."""
        a = self.arch
        images = np.asarray(images)
        if images.ndim != 4 or images.shape[-1] != 3:
            raise ValidationError(f"expected (T, H, W, 3), got {images.shape}")
        T, H, W, _ = images.shape
        if H % a.patch or W % a.patch:
            raise ValidationError(f"image side {H}x{W} not divisible by patch {a.patch}")
        gh, gw = H // a.patch, W // a.patch
        x = images.astype(np.float64) / 255.0
        x = x.reshape(T, gh, a.patch, gw, a.patch, 3)
        x = x.transpose(0, 1, 3, 2, 4, 5).reshape(T, gh * gw, a.patch * a.patch * 3)
        return x

    def encode_slices(self, params, images) -> Var:
        """Per-slice features (T, d_e); each slice is encoded independently."""
        patches = as_var(self.patchify(images))
        tokens = self.img_patch(params, patches)       # (T, M, d_v)
        return self.img_compress(params, tokens)       # (T, d_e)

    def encode_prefix(self, params, feats: Var) -> Var:
        """Causal prefix states (T, d_h) from features plus positions."""
        T = feats.shape[0]
        pe = positional_encoding(T, self.arch.d_e)
        return self.seq_cell(params, feats + as_var(pe))

    # -- factors and tokens ----------------------------------------------------

    def decompose_state(self, params, h: Var) -> WorldState:
        a = self.head_anat(params, h)
        l = self.head_les(params, h)
        u = self.head_unc(params, h)
        return self._assemble_state(params, a, l, u)

    def _assemble_state(self, params, a, l, u) -> WorldState:
        s = concat([a, l, u], axis=-1)
        logits = self.head_occ(params, l).reshape((l.shape[0],))
        return WorldState(a=a, l=l, u=u, s=s, m_hat=sigmoid(logits))

    def intervene(self, params, state: WorldState, mode: str) -> WorldState:
        """Zero one factor; the presence probability is recomputed from l."""
        if mode not in INTERVENTION_MODES:
            raise ValidationError(f"unknown intervention mode '{mode}'")
        if mode == "none":
            return state
        if mode == "lesion_zero":
            zeros = as_var(np.zeros(state.l.shape))
            return self._assemble_state(params, state.a, zeros, state.u)
        zeros = as_var(np.zeros(state.u.shape))
        return self._assemble_state(params, state.a, state.l, zeros)

    def project_tokens(self, params, s: Var) -> tuple[Var, Var]:
        """World tokens w = f_tok(s) and language-space tokens z = f_lm(w)."""
        w = self.tok_proj(params, s)
        z = self.lm_proj(params, w)
        return w, z

    # -- prediction ------------------------------------------------------------

    def predict_at(self, params, src: Var, pathway: str, k: int) -> Var:
        """Apply the (pathway, k) head to rows of src."""
        if pathway not in ("h", "w"):
            raise ValidationError(f"unknown pathway '{pathway}'")
        if not 1 <= k <= self.arch.horizon:
            raise ValidationError(f"horizon k={k} outside [1, {self.arch.horizon}]")
        return self.pred_heads[(pathway, k)](params, src)

    def predict_all_horizons(self, params, src: Var, pathway: str) -> Var:
        """Predictions (T-K, K, d_e) from origins t = 1..T-K for k = 1..K."""
        K = self.arch.horizon
        T = src.shape[0]
        if T <= K:
            raise ValidationError(f"sequence length {T} must exceed horizon {K}")
        origins = src[:T - K]
        per_k = [self.predict_at(params, origins, pathway, k) for k in range(1, K + 1)]
        return stack(per_k, axis=1)

    def uncertainty_scalar(self, params, u: Var) -> Var:
        """Nonnegative difficulty estimate per row: softplus of an affine map."""
        return softplus(self.unc_scalar_head(params, u).reshape((u.shape[0],)))

    def reconstruct(self, params, h: Var) -> Var:
        return self.recon_head(params, h)

    # -- decoder ---------------------------------------------------------------

    def _decoder_stack(self, params, x: Var) -> Var:
        """Pre-LN causal self-attention blocks over (L, d_z)."""
        L = x.shape[0]
        mask = np.triu(np.full((L, L), -np.inf), k=1)
        scale = 1.0 / np.sqrt(self.arch.d_z)
        for i in range(self.arch.decoder_layers):
            hq, hk, hv, ho = self.dec_qkvo[i]
            xn = self.dec_ln1[i](params, x)
            q, k, v = hq(params, xn), hk(params, xn), hv(params, xn)
            scores = q @ k.T * scale + as_var(mask)
            att = softmax(scores, axis=-1)
            x = x + ho(params, att @ v)
            x = x + self.dec_mlp[i](params, self.dec_ln2[i](params, x))
        return self.dec_ln_f(params, x)

    def _decoder_inputs(self, params, z: Var, token_ids: np.ndarray) -> Var:
        emb = take_rows(params["dec/emb"], token_ids)
        x = concat([z, emb], axis=0)
        L = x.shape[0]
        if L > self.arch.max_positions:
            raise ValidationError(
                f"sequence length {L} exceeds position table {self.arch.max_positions}")
        return x + params["dec/pos"][:L]

    def decode_report(self, params, z: Var, mode: str, report_tokens=None):
        """Teacher-forced log-probs or a greedy token rollout.

        teacher_forced returns (per_token_logprobs, report_mask) over the
        full input sequence; the mask marks exactly the positions whose
        next-token target is a report token (prompt and z positions are
        excluded from any loss).
        """
        if z.ndim != 2 or z.shape[0] < 1:
            raise ValidationError("empty language-token sequence")
        prompt = np.asarray(self.arch.prompt_tokens, dtype=np.int64)
        if mode == "teacher_forced":
            if report_tokens is None or len(report_tokens) < 2:
                raise ValidationError("teacher forcing needs BOS..EOS report tokens")
            report = np.asarray(report_tokens, dtype=np.int64)
            ids = np.concatenate([prompt, report[:-1]])
            x = self._decoder_inputs(params, z, ids)
            logits = self.dec_out(params, self._decoder_stack(params, x))
            logprobs = log_softmax(logits, axis=-1)
            L = x.shape[0]
            T = z.shape[0]
            labels = np.zeros(L, dtype=np.int64)
            mask = np.zeros(L, dtype=bool)
            # Position j predicts input token j+1; report targets start at
            # report[1] predicted from the position holding report[0].
            start = T + len(prompt)
            labels[start:L] = report[1:]
            mask[start:L] = True
            per_token = logprobs[np.arange(L), labels]
            return per_token, mask
        if mode == "greedy":
            generated = [phantom.BOS_TOKEN]
            for _ in range(self.arch.max_report_len):
                ids = np.concatenate([prompt, np.asarray(generated, dtype=np.int64)])
                x = self._decoder_inputs(params, z, ids)
                logits = self.dec_out(params, self._decoder_stack(params, x))
                nxt = int(np.argmax(logits.data[-1]))
                generated.append(nxt)
                if nxt == phantom.EOS_TOKEN:
                    break
            return generated
        raise ValidationError(f"unknown decode mode '{mode}'")

    # -- full study pass ---------------------------------------------------------

    def forward_study(self, params, images, with_predictions=True,
                      with_counterfactual=True):
        """Run the world-model pipeline on one study; returns a dict of Vars."""
        feats = self.encode_slices(params, images)
        h = self.encode_prefix(params, feats)
        state = self.decompose_state(params, h)
        w, z = self.project_tokens(params, state.s)
        out = {"e": feats, "h": h, "state": state, "w": w, "z": z}
        T = feats.shape[0]
        if with_predictions and T > self.arch.horizon:
            out["preds_h"] = self.predict_all_horizons(params, h, "h")
            out["preds_w"] = self.predict_all_horizons(params, w, "w")
            out["g_unc"] = self.uncertainty_scalar(
                params, state.u[:T - self.arch.horizon])
            if with_counterfactual:
                cf_state = self.intervene(params, state, "lesion_zero")
                w_cf, _ = self.project_tokens(params, cf_state.s)
                out["w_cf"] = w_cf
                out["preds_cf"] = self.predict_all_horizons(params, w_cf, "w")
        return out

    # -- freeze groups -------------------------------------------------------

    PRETRAINED_PREFIXES = ("img", "seq", "factor", "occ", "tok", "pred", "unc")
    FINETUNE_TRAINABLE_PREFIXES = ("lm", "dec")
