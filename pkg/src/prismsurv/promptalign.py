"""Prompt-guided alignment of image tokens with grouped EHR embeddings.

Pieces: a token router that maps a prompt to per-group weights in {0, 0.5, 1},
prompt/image cross-attention fusion, per-feature EHR embedders pooled by group,
a detached visual anchor, and the triplet + anchor-preservation objective.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc
from . import encoders as en
from . import kernels
from . import textcorpus as tc
from .diffcore import Tensor
from .synthgen import FEATURE_NAMES, GROUPS, group_indices, is_binary_mask

log = logging.getLogger(__name__)

ALPHA_LEVELS = np.array([0.0, 0.5, 1.0])


@dataclass
class AlignConfig:
    d_p: int = 64
    d_attn: int = 64
    heads: int = 2
    d_align: int = 64
    delta: float = 0.2              # hinge margin of the triplet term
    mining_delta: float = 0.2       # similarity margin when mining triplets
    beta: float = 1.0
    epochs: int = 20
    batch: int = 16
    lr: float = 1e-3
    weight_decay: float = 0.0
    freeze_encoder: bool = True
    sliced_wasserstein: bool = False
    sw_weight: float = 0.1
    sw_projections: int = 16
    router_dim: int = 32
    router_hidden: int = 64
    router_epochs: int = 40
    router_lr: float = 1e-2
    router_batch: int = 128

    def __post_init__(self):
        if self.d_attn % self.heads:
            raise ValueError("d_attn must be divisible by heads")
        if self.delta < 0 or self.beta < 0:
            raise ValueError("margins and beta must be non-negative")
        if self.batch < 3:
            raise ValueError("triplet mining needs batches of at least 3")


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def init_fusion(cfg: AlignConfig, d_img: int, seed: int = 0, dtype=np.float32) -> dict:
    rng = np.random.default_rng([seed, 2])
    V, F = len(tc.VOCAB), len(FEATURE_NAMES)

    def w(*shape, scale):
        return (rng.standard_normal(shape) * scale).astype(dtype)

    return {
        "prompt.tok": w(V, cfg.d_p, scale=1.0),
        "prompt.pos": w(tc.MAX_LEN, cfg.d_p, scale=0.1),
        "wq": w(cfg.d_p, cfg.d_attn, scale=1.0 / np.sqrt(cfg.d_p)),
        "wk": w(d_img, cfg.d_attn, scale=1.0 / np.sqrt(d_img)),
        "wp": w(cfg.d_attn, cfg.d_align, scale=1.0 / np.sqrt(cfg.d_attn)),
        "bp": np.zeros(cfg.d_align, dtype),
        "wr": w(d_img, cfg.d_align, scale=1.0 / np.sqrt(d_img)),
        "br": np.zeros(cfg.d_align, dtype),
        "phi.w": w(F, cfg.d_align, scale=1.0),
        "phi.b": w(F, cfg.d_align, scale=0.1),
    }


def init_router(cfg: AlignConfig, seed: int = 0, dtype=np.float32) -> dict:
    rng = np.random.default_rng([seed, 3])
    V, d, h = len(tc.VOCAB), cfg.router_dim, cfg.router_hidden
    return {
        # small init so words never seen in training add little to the pooled vector
        "router.tok": (rng.standard_normal((V, d)) * 0.01).astype(dtype),
        "router.w1": (rng.standard_normal((d, h)) / np.sqrt(d)).astype(dtype),
        "router.b1": np.zeros(h, dtype),
        "router.w2": (rng.standard_normal((h, 3 * len(GROUPS))) / np.sqrt(h)).astype(dtype),
        "router.b2": np.zeros(3 * len(GROUPS), dtype),
    }


# ---------------------------------------------------------------------------
# prompt embedding and routing
# ---------------------------------------------------------------------------

def _ids(prompt) -> list:
    if isinstance(prompt, str):
        ids = tc.tokenize(prompt)
    elif isinstance(prompt, tc.Prompt):
        ids = tc.tokenize(prompt.text)
    else:
        ids = [int(i) for i in prompt]
    if not ids:
        raise ValueError("empty prompt")
    return ids[:tc.MAX_LEN]


def pad_batch(prompts):
    """Token ids [B, L] padded with <pad> and a {0,1} mask [B, L]."""
    seqs = [_ids(p) for p in prompts]
    L = max(len(s) for s in seqs)
    ids = np.zeros((len(seqs), L), dtype=np.int64)
    mask = np.zeros((len(seqs), L))
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
        mask[i, :len(s)] = 1.0
    return ids, mask


def embed_prompt(prompt, params: dict) -> Tensor:
    """Token embedding + positional encoding, [N_P, d_P]."""
    ids = np.asarray(_ids(prompt))
    tok = dc.take(params["prompt.tok"], ids, axis=0)
    return tok + params["prompt.pos"][:len(ids)]


def embed_prompt_batch(ids: np.ndarray, params: dict) -> Tensor:
    B, L = ids.shape
    tok = dc.take(params["prompt.tok"], ids.reshape(-1), axis=0).reshape(B, L, -1)
    return tok + params["prompt.pos"][:L]


def router_logits(ids: np.ndarray, mask: np.ndarray, rp: dict) -> Tensor:
    """[B, G, 3] class logits over {0, 0.5, 1} for each group."""
    B, L = ids.shape
    dtype = rp["router.tok"].dtype
    emb = dc.take(rp["router.tok"], ids.reshape(-1), axis=0).reshape(B, L, -1)
    w = Tensor((mask / mask.sum(axis=1, keepdims=True))[:, :, None].astype(dtype))
    pooled = (emb * w).sum(axis=1)
    h = dc.gelu(pooled @ rp["router.w1"] + rp["router.b1"])
    return (h @ rp["router.w2"] + rp["router.b2"]).reshape(B, len(GROUPS), 3)


def route_batch(prompts, router: dict) -> np.ndarray:
    ids, mask = pad_batch(prompts)
    logits = router_logits(ids, mask, en.as_tensors(router)).data
    alpha = ALPHA_LEVELS[logits.argmax(axis=-1)]
    # a prompt must keep at least one group: fall back to the most likely non-zero level
    for b in np.flatnonzero(~alpha.any(axis=1)):
        g, c = np.unravel_index(np.argmax(logits[b, :, 1:]), (len(GROUPS), 2))
        alpha[b, g] = ALPHA_LEVELS[1 + c]
    return alpha


def route(prompt, router: dict) -> np.ndarray:
    """Quantised routing vector (GROUPS order) for one prompt."""
    return route_batch([prompt], router)[0]


def _label_classes(labels) -> np.ndarray:
    lab = np.asarray(labels, dtype=np.float64)
    return np.rint(lab * 2).astype(np.int64)      # 0 -> 0, 0.5 -> 1, 1 -> 2


def router_loss(ids, mask, classes, rp) -> Tensor:
    logits = router_logits(ids, mask, rp)
    ls = dc.log_softmax(logits, axis=-1)
    onehot = np.eye(3, dtype=ls.dtype)[classes]
    B = ids.shape[0]
    return -(ls * Tensor(onehot)).sum() * (1.0 / (B * len(GROUPS)))


_KEEP_IDS = set(tc.PLACEHOLDER_IDS.values())


def _word_dropout(ids, mask, rng, p=0.5):
    """Swap ordinary words for <unk> at rate p so unfamiliar phrasing routes
    on the placeholders alone."""
    drop = (rng.random(ids.shape) < p) & (mask > 0) & ~np.isin(ids, list(_KEEP_IDS))
    return np.where(drop, tc.WORD_ID[tc.UNK], ids)


def train_router(prompts, cfg: AlignConfig, seed: int = 0):
    """Cross-entropy on labelled templates. Returns (params, per-epoch loss)."""
    rp = init_router(cfg, seed)
    ids, mask = pad_batch(prompts)
    classes = _label_classes([p.group_labels for p in prompts])
    opt = dc.AdamState(lr=cfg.router_lr, weight_decay=1e-4)
    trace = []
    for epoch in range(cfg.router_epochs):
        rng = np.random.default_rng([seed, 11, epoch])
        order = rng.permutation(len(prompts))
        losses = []
        for i in range(0, len(order), cfg.router_batch):
            b = order[i:i + cfg.router_batch]
            L = int(mask[b].sum(axis=1).max())
            bid = _word_dropout(ids[b, :L], mask[b, :L], rng)
            P = en.as_tensors(rp, requires_grad=True)
            with dc.Tape() as tape:
                loss = router_loss(bid, mask[b, :L], classes[b], P)
            dc.adam_step(rp, dc.backward(tape, loss, P), opt)
            losses.append(float(loss.data))
        trace.append(float(np.mean(losses)))
    return rp, trace


def router_accuracy(prompts, router) -> float:
    """Fraction of prompts whose full routing vector matches the gold labels exactly."""
    alpha = route_batch(prompts, router)
    gold = np.array([p.group_labels for p in prompts])
    return float(np.mean(np.all(alpha == gold, axis=1)))


# ---------------------------------------------------------------------------
# fusion, EHR embedding, anchor
# ---------------------------------------------------------------------------

def cross_attention_fuse(P: Tensor, Z, params: dict, cfg: AlignConfig, mask=None, return_attn=False):
    """Prompt tokens [B, L, d_P] attend over image tokens [B, N, d_I] -> Z_align [B, d_align].

    Keys and values are the same projection Z W_K. Queries and attended values
    are concatenated along the token axis, averaged over valid prompt tokens,
    compressed by W_p and layer-normalised (no affine).
    """
    Z = Z if isinstance(Z, Tensor) else Tensor(Z, dtype=params["wk"].dtype)
    squeeze = P.ndim == 2
    if squeeze:
        P = P.reshape(1, *P.shape)
        Z = Z.reshape(1, *Z.shape) if Z.ndim == 2 else Z
    B, L, _ = P.shape
    if Z.shape[-1] != params["wk"].shape[0]:
        raise dc.ShapeError("cross_attention_fuse", Z.shape, params["wk"].shape)
    N = Z.shape[1]
    H = cfg.heads
    dh = cfg.d_attn // H
    Q = P @ params["wq"]                                   # [B, L, d_attn]
    K = Z @ params["wk"]                                   # [B, N, d_attn]
    Qh = dc.transpose(Q.reshape(B, L, H, dh), (0, 2, 1, 3))
    Kh = dc.transpose(K.reshape(B, N, H, dh), (0, 2, 1, 3))
    A = dc.softmax((Qh @ dc.swapaxes(Kh, -1, -2)) * (1.0 / np.sqrt(dh)), axis=-1)   # [B, H, L, N]
    att = dc.transpose(A @ Kh, (0, 2, 1, 3)).reshape(B, L, cfg.d_attn)
    seq = dc.concat([Q, att], axis=1)                      # [B, 2L, d_attn]
    m = np.ones((B, L)) if mask is None else np.asarray(mask, dtype=np.float64)
    m2 = np.concatenate([m, m], axis=1)
    w = Tensor((m2 / m2.sum(axis=1, keepdims=True))[:, :, None].astype(Q.dtype))
    pooled = (seq * w).sum(axis=1)
    out = dc.layer_norm(pooled @ params["wp"] + params["bp"])
    if squeeze:
        out = out[0]
    return (out, A.data) if return_attn else out


def group_mean_matrix(dtype=np.float64) -> np.ndarray:
    """[G, F] averaging matrix for the feature groups."""
    gi = group_indices()
    M = np.zeros((len(GROUPS), len(FEATURE_NAMES)), dtype=dtype)
    for g, name in enumerate(GROUPS):
        M[g, gi[name]] = 1.0 / len(gi[name])
    return M


def embed_ehr_groups(e, alpha, params: dict) -> Tensor:
    """Z_ehr = sum_g alpha_g * mean_{f in group g} phi_f(e_f); e [B, F] normalised."""
    e = np.asarray(e, dtype=params["phi.w"].dtype)
    squeeze = e.ndim == 1
    e2 = e[None] if squeeze else e
    if e2.shape[1] != len(FEATURE_NAMES):
        raise ValueError(f"expected {len(FEATURE_NAMES)} EHR features, got {e2.shape[1]}")
    bad = np.flatnonzero(~np.isfinite(e2).all(axis=0))
    if bad.size:
        raise ValueError(f"missing EHR feature: {FEATURE_NAMES[bad[0]]}")
    a = np.asarray(alpha, dtype=e2.dtype).reshape(-1, len(GROUPS))
    if a.shape[0] == 1 and e2.shape[0] > 1:
        a = np.repeat(a, e2.shape[0], axis=0)
    phi = Tensor(e2[:, :, None]) * params["phi.w"] + params["phi.b"]          # [B, F, d]
    G = Tensor(group_mean_matrix(e2.dtype)) @ phi                              # [B, G, d]
    z = (G * Tensor(a[:, :, None])).sum(axis=1)
    return z[0] if squeeze else z


def visual_anchor(Z, params: dict) -> Tensor:
    """LayerNorm(W_r mean_tokens(Z) + b_r), with Z detached from the encoder."""
    Z = dc.detach(Z) if isinstance(Z, Tensor) else Tensor(Z, dtype=params["wr"].dtype)
    pooled = Z.mean(axis=-2)
    return dc.layer_norm(pooled @ params["wr"] + params["br"])


# ---------------------------------------------------------------------------
# similarity, triplets and losses
# ---------------------------------------------------------------------------

@dataclass
class GowerSchema:
    binary: np.ndarray
    ranges: np.ndarray

    @classmethod
    def fit(cls, E) -> "GowerSchema":
        E = np.asarray(E, dtype=np.float64)
        binary = is_binary_mask() if E.shape[1] == len(FEATURE_NAMES) else np.zeros(E.shape[1], bool)
        ranges = np.where(binary, 0.0, E.max(axis=0) - E.min(axis=0))
        return cls(binary, ranges)


def ehr_similarity(e_i, e_j, schema: GowerSchema) -> float:
    a, b = np.asarray(e_i, dtype=np.float64), np.asarray(e_j, dtype=np.float64)
    if a.shape != b.shape or a.shape[-1] != schema.binary.shape[0]:
        raise ValueError("records do not share the feature schema")
    return float(kernels.gower_matrix(np.stack([a, b]), schema.binary, schema.ranges)[0, 1])


def similarity_matrix(E, schema: GowerSchema) -> np.ndarray:
    E = np.ascontiguousarray(E, dtype=np.float64)
    if E.shape[1] != schema.binary.shape[0]:
        raise ValueError("records do not share the feature schema")
    return kernels.gower_matrix(E, schema.binary, schema.ranges)


def mine_triplets(S, delta: float = 0.2) -> np.ndarray:
    """All ordered (i, j, k), pairwise distinct, with S[i, j] > S[i, k] + delta."""
    S = np.ascontiguousarray(S, dtype=np.float64)
    if S.shape[0] < 3:
        return np.zeros((0, 3), dtype=np.int64)
    return kernels.mine_triplets(S, float(delta))


def triangulation_loss(triplets, Z_align: Tensor, Z_ehr: Tensor, delta: float = 0.2) -> Tensor:
    """Sum over triplets of max(0, |a_i - e_j|^2 - |a_i - e_k|^2 + delta)."""
    trip = np.asarray(triplets, dtype=np.int64).reshape(-1, 3)
    if trip.shape[0] == 0:
        return Tensor(np.zeros((), dtype=Z_align.dtype))
    ai = dc.take(Z_align, trip[:, 0], axis=0)
    ej = dc.take(Z_ehr, trip[:, 1], axis=0)
    ek = dc.take(Z_ehr, trip[:, 2], axis=0)
    dp = ai - ej
    dn = ai - ek
    margin = (dp * dp).sum(axis=-1) - (dn * dn).sum(axis=-1) + delta
    return dc.relu(margin).sum()


def topology_loss(Z_align: Tensor, Z_ref) -> Tensor:
    """Batch mean of squared L2 distances."""
    Z_ref = Z_ref if isinstance(Z_ref, Tensor) else Tensor(Z_ref, dtype=Z_align.dtype)
    if Z_align.shape != Z_ref.shape:
        raise dc.ShapeError("topology_loss", Z_align.shape, Z_ref.shape)
    d = Z_align - Z_ref
    return (d * d).sum(axis=-1).mean()


def sliced_wasserstein(X: Tensor, Y: Tensor, n_proj: int, seed: int = 0) -> Tensor:
    """Squared sliced 2-Wasserstein distance between two equal-size point sets."""
    rng = np.random.default_rng([seed, 5])
    dirs = rng.standard_normal((X.shape[-1], n_proj))
    dirs /= np.linalg.norm(dirs, axis=0, keepdims=True)
    D = Tensor(dirs.astype(X.dtype))
    px, py = X @ D, Y @ D                                   # [B, n_proj]
    ix = np.argsort(px.data, axis=0, kind="stable")
    iy = np.argsort(py.data, axis=0, kind="stable")
    B = px.shape[0]
    cols = np.arange(n_proj)
    sx = dc.take(px.reshape(-1), (ix * n_proj + cols).reshape(-1), axis=0)
    sy = dc.take(py.reshape(-1), (iy * n_proj + cols).reshape(-1), axis=0)
    d = sx - sy
    return (d * d).sum() * (1.0 / (B * n_proj))


@dataclass
class AlignBatch:
    ids: np.ndarray
    mask: np.ndarray
    Z: object              # [B, N, d_I] array or Tensor
    e: np.ndarray          # [B, F]
    alpha: np.ndarray      # [B, G]
    S: np.ndarray          # [B, B] EHR similarity


def forward(batch: AlignBatch, params: dict, cfg: AlignConfig):
    P = embed_prompt_batch(batch.ids, params)
    z_align = cross_attention_fuse(P, batch.Z, params, cfg, mask=batch.mask)
    z_ehr = embed_ehr_groups(batch.e, batch.alpha, params)
    z_ref = visual_anchor(batch.Z, params)
    return z_align, z_ehr, z_ref


def stage2_loss(batch: AlignBatch, params: dict, cfg: AlignConfig, seed: int = 0):
    """L_tri + beta * L_pres (+ optional sliced-Wasserstein term). Returns (loss, parts)."""
    z_align, z_ehr, z_ref = forward(batch, params, cfg)
    trip = mine_triplets(batch.S, cfg.mining_delta)
    tri = triangulation_loss(trip, z_align, z_ehr, cfg.delta)
    loss = tri
    parts = {"triplet": float(tri.data), "n_triplets": int(len(trip))}
    if cfg.beta > 0:
        pres = topology_loss(z_align, z_ref)
        loss = loss + pres * cfg.beta
        parts["preserve"] = float(pres.data)
    if cfg.sliced_wasserstein:
        sw = sliced_wasserstein(z_align, z_ref, cfg.sw_projections, seed)
        loss = loss + sw * cfg.sw_weight
        parts["sliced_w"] = float(sw.data)
    return loss, parts


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class Stage2Data:
    Z: np.ndarray            # [n, N, d_I] frozen student tokens (or raw patch values if fine-tuning)
    e: np.ndarray            # [n, F] normalised EHR
    sample_index: np.ndarray  # index into the prompt corpus for each row


def _make_batch(data, rows, prompts, router_cache, schema, Z=None):
    texts = [p.text for p in prompts]
    ids, mask = pad_batch(texts)
    alpha = np.array([router_cache[t] for t in texts])
    return AlignBatch(ids, mask, data.Z[rows] if Z is None else Z, data.e[rows], alpha,
                      similarity_matrix(data.e[rows], schema))


def train_stage2(data: Stage2Data, train_rows, val_rows, corpus: tc.PromptCorpus, cfg: AlignConfig,
                 seed: int = 0, out_dir=None, router=None, encoder=None):
    """Router first (cross-entropy on the template labels), then fusion/embedders on
    L_tri + beta L_pres. ``encoder`` = (params, EncoderConfig) enables fine-tuning,
    in which case ``data.Z`` holds raw SAX patch values.

    Returns (fusion params, router params, trace, encoder params or None).
    """
    train_rows = np.asarray(train_rows)
    val_rows = np.asarray(val_rows)
    if len(train_rows) < 3:
        raise ValueError("stage 2 needs at least 3 training subjects")
    if router is None:
        router, r_trace = train_router(corpus.train, cfg, seed)
        log.info("router loss %.4f -> %.4f", r_trace[0], r_trace[-1])
    fine_tune = encoder is not None and not cfg.freeze_encoder
    enc_params, enc_cfg = (encoder if encoder is not None else (None, None))
    d_img = enc_cfg.dim if fine_tune else data.Z.shape[-1]
    params = init_fusion(cfg, d_img, seed)
    schema = GowerSchema.fit(data.e[train_rows])
    # every prompt a sample may see, routed once
    all_prompts = {}
    for r in np.concatenate([train_rows, val_rows]):
        for p in corpus.for_sample(int(data.sample_index[r])):
            all_prompts[p.text] = p
    texts = sorted(all_prompts)
    router_cache = dict(zip(texts, map(tuple, route_batch(texts, router))))

    opt = dc.AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    enc_opt = dc.AdamState(lr=cfg.lr * 0.1) if fine_tune else None
    trace = []

    def prompts_for(rows, epoch):
        return [corpus.for_sample(int(data.sample_index[r]))[epoch % corpus.n_per_sample] for r in rows]

    def batches(rows, rng=None):
        rows = rng.permutation(rows) if rng is not None else rows
        out = [rows[i:i + cfg.batch] for i in range(0, len(rows), cfg.batch)]
        if len(out) > 1 and len(out[-1]) < 3:
            out[-2] = np.concatenate([out[-2], out[-1]])
            out.pop()
        return [b for b in out if len(b) >= 3]

    def encode_rows(rows, ep):
        return en.encode(data.Z[rows].astype(np.float32), ep, enc_cfg, keep_attn=False).tokens

    for epoch in range(1, cfg.epochs + 1):
        rng = np.random.default_rng([seed, 13, epoch])
        losses = []
        for rows in batches(train_rows, rng):
            P = en.as_tensors(params, requires_grad=True)
            EP = en.as_tensors(enc_params, requires_grad=True) if fine_tune else None
            try:
                with dc.Tape() as tape:
                    Z = encode_rows(rows, EP) if fine_tune else None
                    batch = _make_batch(data, rows, prompts_for(rows, epoch), router_cache, schema, Z)
                    loss, parts = stage2_loss(batch, P, cfg, seed)
                if fine_tune:
                    allp = {**P, **{"enc." + k: v for k, v in EP.items()}}
                    grads = dc.backward(tape, loss, allp)
                    dc.adam_step(enc_params, {k[4:]: g for k, g in grads.items() if k.startswith("enc.")}, enc_opt)
                else:
                    grads = dc.backward(tape, loss, P)
            except dc.NonFiniteError as err:
                raise _abort(out_dir, params, router, cfg, seed, epoch, err)
            dc.adam_step(params, {k: g for k, g in grads.items() if k in params}, opt)
            losses.append(float(loss.data))
        val = []
        for rows in batches(val_rows):
            Z = None
            if fine_tune:
                Z = encode_rows(rows, en.as_tensors(enc_params))
            batch = _make_batch(data, rows, prompts_for(rows, epoch), router_cache, schema, Z)
            val.append(float(stage2_loss(batch, en.as_tensors(params), cfg, seed)[0].data))
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)) if losses else float("nan"),
               "val_loss": float(np.mean(val)) if val else float("nan")}
        trace.append(row)
        log.info("stage2 epoch %d train %.5f val %.5f", epoch, row["train_loss"], row["val_loss"])
    if out_dir is not None:
        out_dir = Path(out_dir)
        save_stage2(out_dir / "checkpoint", params, router, cfg, seed, schema,
                    encoder=enc_params if fine_tune else None)
        with open(out_dir / "losses.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss"])
            for r in trace:
                w.writerow([r["epoch"], f"{r['train_loss']:.8g}", f"{r['val_loss']:.8g}"])
    return params, router, trace, (enc_params if fine_tune else None)


def _abort(out_dir, params, router, cfg, seed, epoch, err):
    from .distill import TrainingAborted

    ck = None
    if out_dir is not None:
        ck = save_stage2(Path(out_dir) / "checkpoint", params, router, cfg, seed, None, status="aborted")
    return TrainingAborted(f"non-finite stage-2 loss at epoch {epoch}: {err}", ck)


def save_stage2(path, params, router, cfg, seed, schema=None, encoder=None, status="ok"):
    meta = {"stage": "stage2", "seed": int(seed), "config": asdict(cfg), "status": status,
            "vocab": list(tc.VOCAB)}
    if schema is not None:
        meta["gower"] = {"binary": schema.binary.tolist(), "ranges": schema.ranges.tolist()}
    groups = {"fusion": params, "router": router}
    if encoder is not None:
        groups["encoder"] = encoder
    return en.save_checkpoint(path, groups, meta)


def load_stage2(path):
    groups, meta = en.load_checkpoint(path)
    if meta.get("vocab") not in (None, list(tc.VOCAB)):
        raise ValueError("stage-2 checkpoint was trained with a different vocabulary")
    return groups["fusion"], groups["router"], AlignConfig(**meta["config"]), meta, groups.get("encoder")


def align_features(Z: np.ndarray, prompt, params: dict, cfg: AlignConfig, batch: int = 64,
                   return_attn: bool = False):
    """Z_align for every subject under one prompt (no grad) -> [n, d_align]."""
    P = en.as_tensors(params)
    ids, mask = pad_batch([prompt])
    out, attn = [], []
    for i in range(0, Z.shape[0], batch):
        zb = Z[i:i + batch].astype(params["wk"].dtype)
        Pe = embed_prompt_batch(np.repeat(ids, zb.shape[0], axis=0), P)
        res = cross_attention_fuse(Pe, zb, P, cfg, mask=np.repeat(mask, zb.shape[0], axis=0),
                                   return_attn=return_attn)
        if return_attn:
            out.append(res[0].data)
            attn.append(res[1])
        else:
            out.append(res.data)
    Za = np.concatenate(out).astype(np.float64)
    return (Za, np.concatenate(attn)) if return_attn else Za
