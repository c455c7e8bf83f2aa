"""Self-supervised SAX encoder training: prototype distillation from an EMA
LAX teacher plus a phase-contrastive term."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc
from . import encoders as en
from .diffcore import Tensor
from .synthgen import LAX_VIEWS

log = logging.getLogger(__name__)

P_FLOOR = 1e-8


class TrainingAborted(RuntimeError):
    def __init__(self, msg, checkpoint=None):
        super().__init__(msg)
        self.checkpoint = checkpoint


@dataclass
class DistillConfig:
    tau: float = 0.1
    lam: float = 0.5
    t: float = 0.1
    m: float = 0.996
    epochs: int = 50
    batch: int = 16
    lr: float = 5e-4
    weight_decay: float = 0.0
    lr_step: int = 20
    lr_gamma: float = 0.5
    val_frac: float = 0.3

    def __post_init__(self):
        if self.tau <= 0 or self.t <= 0:
            raise ValueError("temperatures must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.batch < 2:
            raise ValueError("batch must hold at least 2 subjects (contrastive negatives)")
        if not 0.0 <= self.m <= 1.0:
            raise ValueError("EMA momentum must lie in [0, 1]")


def _check_normalized(p, what):
    s = np.asarray(p.data if isinstance(p, Tensor) else p, dtype=np.float64).sum(axis=-1)
    if np.any(np.abs(s - 1.0) > 1e-6):
        raise ValueError(f"{what} is not normalised (row sums {s.min():.6g}..{s.max():.6g})")


def kl_distill_loss(p_s, p_t, tau: float, log_p_s: Tensor | None = None):
    """tau^2 * sum p_s log(p_s / p_t), averaged over leading batch rows.

    ``p_t`` is a constant (teacher). Pass ``log_p_s`` from a log-softmax when
    available; it avoids log(0) for sharp student distributions.
    """
    _check_normalized(p_s, "student distribution")
    _check_normalized(p_t, "teacher distribution")
    p_s = p_s if isinstance(p_s, Tensor) else Tensor(p_s, dtype=np.float64)
    pt = np.maximum(np.asarray(p_t.data if isinstance(p_t, Tensor) else p_t, dtype=p_s.dtype), P_FLOOR)
    if log_p_s is None:
        # zero-probability entries contribute 0 (0 log 0 = 0)
        log_p_s = dc.log(p_s + Tensor((p_s.data == 0).astype(p_s.dtype)))
    kl = (p_s * (log_p_s - Tensor(np.log(pt)))).sum(axis=-1)
    if kl.ndim:
        kl = kl.mean()
    return kl * (tau * tau)


def _l2n(x: Tensor) -> Tensor:
    nrm = np.sqrt((x.data.astype(np.float64) ** 2).sum(axis=-1))
    if np.any(nrm < 1e-12):
        raise ValueError("zero-norm feature in contrastive loss")
    return x / dc.sqrt((x * x).sum(axis=-1, keepdims=True))


def infonce_loss(anchor, positive, negatives, t: float = 0.1):
    """-log softmax of the anchor-positive cosine similarity against the negatives."""
    a = anchor if isinstance(anchor, Tensor) else Tensor(anchor, dtype=np.float64)
    p = positive if isinstance(positive, Tensor) else Tensor(positive, dtype=a.dtype)
    n = negatives if isinstance(negatives, Tensor) else Tensor(negatives, dtype=a.dtype)
    if n.ndim != 2 or n.shape[0] < 1:
        raise ValueError("need at least one negative ([K, d])")
    a, p, n = _l2n(a), _l2n(p), _l2n(n)
    pos = (a * p).sum().reshape(1)
    neg = (n * a).sum(axis=-1)
    logits = dc.concat([pos, neg], axis=0) * (1.0 / t)
    return -dc.log_softmax(logits, axis=0)[0]


def infonce_batch(anchors: Tensor, positives: Tensor, t: float) -> Tensor:
    """Mean InfoNCE over a batch where subject b's negatives are the other
    subjects' positives."""
    a, p = _l2n(anchors), _l2n(positives)
    logits = (a @ dc.transpose(p, (1, 0))) * (1.0 / t)
    B = logits.shape[0]
    ls = dc.log_softmax(logits, axis=-1)
    diag = Tensor(np.eye(B, dtype=ls.dtype))
    return -(ls * diag).sum() * (1.0 / B)


def phase_contrastive(tokens: Tensor, phases: list, t: float) -> Tensor:
    """Average InfoNCE over every ordered pair of distinct phase buckets."""
    pooled = en.phase_pool(tokens, phases)       # [B, 4, d]
    K = pooled.shape[1]
    terms = []
    for i in range(K):
        for j in range(K):
            if i != j:
                terms.append(infonce_batch(pooled[:, i, :], pooled[:, j, :], t))
    total = terms[0]
    for x in terms[1:]:
        total = total + x
    return total * (1.0 / len(terms))


def teacher_forward(teacher: dict, lax_values: np.ndarray, cfg: en.EncoderConfig):
    """No-grad teacher pass. lax_values: [B, V, N, P] -> logits [B, V, K]."""
    B, V = lax_values.shape[:2]
    dtype = next(iter(teacher.values())).dtype
    params = {k: Tensor(v, dtype=v.dtype) for k, v in teacher.items()}
    flat = lax_values.reshape(B * V, *lax_values.shape[2:]).astype(dtype)
    out = en.encode(flat, params, cfg, keep_attn=False)
    return out.logits.data.reshape(B, V, -1)


def stage1_loss(student: dict, teacher: dict, center: np.ndarray, sax_values: np.ndarray,
                lax_values: np.ndarray, phases: list, cfg: en.EncoderConfig, dcfg: DistillConfig):
    """Returns (loss Tensor, parts, teacher logits). ``student`` holds Tensors."""
    if sax_values.shape[0] < 2:
        raise ValueError("stage-1 batch needs at least two subjects")
    t_logits = teacher_forward(teacher, lax_values, cfg)
    p_t = en.teacher_aggregate([t_logits[:, v] for v in range(t_logits.shape[1])],
                               center=center, temp=cfg.teacher_temp)
    dtype = student["patch.w"].dtype
    out = en.encode(sax_values.astype(dtype), student, cfg, keep_attn=False)
    z = out.logits * (1.0 / dcfg.tau)
    log_p = dc.log_softmax(z, axis=-1)
    p_s = dc.softmax(z, axis=-1)
    kl = kl_distill_loss(p_s, p_t.astype(dtype), dcfg.tau, log_p_s=log_p)
    loss = kl
    parts = {"kl": float(kl.data)}
    if dcfg.lam > 0:
        con = phase_contrastive(out.tokens, phases, dcfg.t)
        loss = loss + con * dcfg.lam
        parts["contrastive"] = float(con.data)
    return loss, parts, t_logits


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TokenSet:
    sax: np.ndarray        # [n, N, P]
    lax: np.ndarray        # [n, 3, Nt, P]
    phases: list           # per SAX token
    sax_prov: np.ndarray
    sax_patch: tuple


def build_tokens(studies, cfg: en.EncoderConfig) -> TokenSet:
    sax, lax, phases, prov = [], [], None, None
    for st in studies:
        s, views = en.study_tokens(st, cfg)
        if phases is None:
            phases, prov = s.frame_phase, s.prov
        elif s.frame_phase != phases:
            raise ValueError("all studies must share one frame/phase layout")
        sax.append(s.values)
        lax.append(np.stack([views[v].values for v in LAX_VIEWS]))
    return TokenSet(np.stack(sax), np.stack(lax), phases, prov, cfg.sax_patch)


def ssl_split(n: int, seed: int, val_frac: float = 0.3):
    """Shuffled train/validation index split (7:3 by default)."""
    perm = np.random.default_rng([seed, 7]).permutation(n)
    n_val = max(1, int(round(val_frac * n)))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def _batches(idx, size, rng=None):
    idx = np.asarray(idx)
    if rng is not None:
        idx = rng.permutation(idx)
    out = [idx[i:i + size] for i in range(0, len(idx), size)]
    if len(out) > 1 and len(out[-1]) < 2:
        out[-2] = np.concatenate([out[-2], out[-1]])
        out.pop()
    return [b for b in out if len(b) >= 2]


def train_stage1(tokens: TokenSet, cfg: en.EncoderConfig, dcfg: DistillConfig, seed: int = 0,
                 out_dir=None, subject_ids=None):
    """Adam on the student, EMA teacher after every step, best-validation checkpoint.

    Returns (student params, teacher params, center, trace rows).
    """
    n = tokens.sax.shape[0]
    if n < 4:
        raise ValueError("stage 1 needs at least 4 subjects")
    tr, va = ssl_split(n, seed, dcfg.val_frac)
    n_tok = max(tokens.sax.shape[1], tokens.lax.shape[2])
    student = en.init_params(cfg, n_tok, seed=seed)
    teacher = {k: v.copy() for k, v in student.items()}
    center = np.zeros(cfg.prototypes, dtype=np.float32)
    opt = dc.AdamState(lr=dcfg.lr, weight_decay=dcfg.weight_decay)
    sched = dc.StepLR(opt, dcfg.lr_step, dcfg.lr_gamma)
    out_dir = Path(out_dir) if out_dir is not None else None
    trace, best, best_state = [], np.inf, None
    ckpt = out_dir / "checkpoint" if out_dir else None

    def run_val(st, te, c):
        vals = []
        for b in _batches(va, dcfg.batch) or [va]:
            if len(b) < 2:
                continue
            P = en.as_tensors(st)
            loss, _, _ = stage1_loss(P, te, c, tokens.sax[b], tokens.lax[b], tokens.phases, cfg, dcfg)
            vals.append(float(loss.data))
        return float(np.mean(vals)) if vals else float("nan")

    for epoch in range(1, dcfg.epochs + 1):
        t0 = time.time()
        rng = np.random.default_rng([seed, epoch])
        losses = []
        for b in _batches(tr, dcfg.batch, rng):
            P = en.as_tensors(student, requires_grad=True)
            try:
                with dc.Tape() as tape:
                    loss, parts, t_logits = stage1_loss(P, teacher, center, tokens.sax[b], tokens.lax[b],
                                                        tokens.phases, cfg, dcfg)
                grads = dc.backward(tape, loss, P)
            except dc.NonFiniteError as err:
                raise TrainingAborted(f"non-finite stage-1 loss at epoch {epoch}: {err}", ckpt) from err
            if not np.isfinite(float(loss.data)):
                raise TrainingAborted(f"non-finite stage-1 loss at epoch {epoch}", ckpt)
            dc.adam_step(student, grads, opt)
            teacher = en.ema_update(teacher, student, dcfg.m)
            center = en.update_center(center, t_logits, cfg.center_momentum)
            losses.append(float(loss.data))
        sched.step()
        val = run_val(student, teacher, center)
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": val}
        trace.append(row)
        log.info("stage1 epoch %d train %.5f val %.5f (%.1fs)", epoch, row["train_loss"], val, time.time() - t0)
        if np.isfinite(val) and val < best:
            best = val
            best_state = ({k: v.copy() for k, v in student.items()}, {k: v.copy() for k, v in teacher.items()},
                          center.copy(), epoch)
            if ckpt is not None:
                save_stage1(ckpt, *best_state[:3], cfg, dcfg, seed, epoch, val, subject_ids)
        if out_dir is not None:
            write_losses(out_dir / "losses.csv", trace)
    if best_state is None:
        best_state = (student, teacher, center, dcfg.epochs)
        if ckpt is not None:
            save_stage1(ckpt, student, teacher, center, cfg, dcfg, seed, dcfg.epochs, float("nan"), subject_ids)
    return best_state[0], best_state[1], best_state[2], trace


def save_stage1(path, student, teacher, center, cfg, dcfg, seed, epoch, val_loss, subject_ids=None):
    meta = {"stage": "stage1", "seed": int(seed), "epoch": int(epoch), "val_loss": float(val_loss),
            "encoder": asdict(cfg), "distill": asdict(dcfg),
            "n_pos": int(student["pos"].shape[0])}
    if subject_ids is not None:
        meta["subjects"] = list(subject_ids)
    return en.save_checkpoint(path, {"student": student, "teacher": teacher, "center": {"center": center}}, meta)


def load_stage1(path):
    groups, meta = en.load_checkpoint(path)
    cfg = en.EncoderConfig(**meta["encoder"])
    return groups["student"], groups["teacher"], groups["center"]["center"], cfg, meta


def write_losses(path, trace):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss"])
        for r in trace:
            w.writerow([r["epoch"], f"{r['train_loss']:.8g}", f"{r['val_loss']:.8g}"])


def encode_all(params: dict, cfg: en.EncoderConfig, values: np.ndarray, batch: int = 16, keep_attn=False):
    """No-grad forward over [n, N, P] tokens -> token features [n, N, d] (+ attention maps)."""
    P = en.as_tensors(params)
    feats, attn = [], []
    for i in range(0, values.shape[0], batch):
        out = en.encode(values[i:i + batch].astype(np.float32), P, cfg, keep_attn=keep_attn)
        feats.append(out.tokens.data)
        if keep_attn:
            attn.append(np.stack(out.attn, axis=1))      # [b, L, heads, N+1, N+1]
    feats = np.concatenate(feats)
    return (feats, np.concatenate(attn)) if keep_attn else feats
