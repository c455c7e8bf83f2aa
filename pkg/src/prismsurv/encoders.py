"""Spatiotemporal token encoders for the SAX (student) and LAX (teacher) paths.

Both paths share one architecture and one parameter layout so the teacher can
track the student by EMA. The positional table is sized for the longer token
sequence; the shorter one uses its leading rows.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .synthgen import LAX_VIEWS, PHASES


@dataclass
class EncoderConfig:
    dim: int = 128
    layers: int = 4
    heads: int = 4
    mlp_ratio: int = 2
    prototypes: int = 256
    student_pool: int = 2                  # spatial average-pool factor for SAX
    teacher_pool: int = 1
    sax_patch: tuple = (4, 4, 8, 8)        # (slices, frames, rows, cols) after pooling
    lax_patch: tuple = (4, 16, 16)         # (frames, rows, cols); same voxel count as sax_patch
    student_temp: float = 0.1
    teacher_temp: float = 0.04
    center_momentum: float = 0.9

    def __post_init__(self):
        self.sax_patch = tuple(int(v) for v in self.sax_patch)
        self.lax_patch = tuple(int(v) for v in self.lax_patch)
        if self.dim % self.heads:
            raise ValueError("dim must be divisible by heads")
        if int(np.prod(self.sax_patch)) != int(np.prod(self.lax_patch)):
            raise ValueError("SAX and LAX patches must hold the same number of voxels (shared embedding)")
        if self.student_temp <= 0 or self.teacher_temp <= 0:
            raise ValueError("temperatures must be positive")

    @property
    def patch_dim(self) -> int:
        return int(np.prod(self.sax_patch))


@dataclass
class Tokens:
    values: np.ndarray        # [N, P]
    prov: np.ndarray          # [N, 4] start (slice, frame, row, col) of each patch
    grid: tuple               # patch-grid dims
    patch: tuple
    frame_phase: list = field(default_factory=list)   # phase label per token

    @property
    def n(self) -> int:
        return self.values.shape[0]


def avg_pool(x: np.ndarray, k: int) -> np.ndarray:
    """k x k average pooling over the two trailing axes (crops any remainder)."""
    if k == 1:
        return x
    H, W = x.shape[-2] // k * k, x.shape[-1] // k * k
    x = x[..., :H, :W]
    return x.reshape(*x.shape[:-2], H // k, k, W // k, k).mean(axis=(-3, -1))


def patchify(volume: np.ndarray, patch) -> Tokens:
    """Split a [D, T, H, W] (or [T, H, W]) volume into non-overlapping patches."""
    vol = np.asarray(volume, dtype=np.float32)
    if vol.ndim == 3:
        vol = vol[None]
        patch = (1, *patch)
    if vol.ndim != 4 or len(patch) != 4:
        raise ValueError("expected a [D,T,H,W] or [T,H,W] volume with a matching patch")
    bad = [(i, s, p) for i, (s, p) in enumerate(zip(vol.shape, patch)) if s % p]
    if bad:
        hint = ", ".join(f"axis {i}: pad {s} -> {-(-s // p) * p}" for i, s, p in bad)
        raise ValueError(f"volume {vol.shape} not divisible by patch {tuple(patch)} ({hint})")
    g = tuple(s // p for s, p in zip(vol.shape, patch))
    pd, pt, ph, pw = patch
    x = vol.reshape(g[0], pd, g[1], pt, g[2], ph, g[3], pw).transpose(0, 2, 4, 6, 1, 3, 5, 7)
    values = x.reshape(int(np.prod(g)), pd * pt * ph * pw)
    idx = np.stack(np.meshgrid(*[np.arange(n) for n in g], indexing="ij"), axis=-1).reshape(-1, 4)
    prov = idx * np.array(patch)
    return Tokens(np.ascontiguousarray(values), prov, g, tuple(patch))


def _standardize(x):
    x = np.asarray(x, dtype=np.float32)
    return (x - x.mean()) / (x.std() + 1e-6)


def study_tokens(study, cfg: EncoderConfig):
    """Student tokens from SAX and teacher tokens per LAX view for one study."""
    sax = avg_pool(_standardize(study.sax), cfg.student_pool)
    s = patchify(sax, cfg.sax_patch)
    s.frame_phase = token_phases(s, study.phase_labels)
    lax = {}
    for v in LAX_VIEWS:
        t = patchify(avg_pool(_standardize(study.lax[v]), cfg.teacher_pool), cfg.lax_patch)
        t.frame_phase = token_phases(t, study.phase_labels)
        lax[v] = t
    return s, lax


def token_phases(tokens: Tokens, labels) -> list:
    """Phase of each token = label of the middle frame of its tubelet."""
    pt = tokens.patch[1]
    return [labels[min(int(t0) + pt // 2, len(labels) - 1)] for t0 in tokens.prov[:, 1]]


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def init_params(cfg: EncoderConfig, n_tokens: int, seed: int = 0, dtype=np.float32) -> dict:
    rng = np.random.default_rng(seed)
    d, P, K = cfg.dim, cfg.patch_dim, cfg.prototypes
    h = cfg.mlp_ratio * d

    def w(*shape, scale):
        return (rng.standard_normal(shape) * scale).astype(dtype)

    p = {
        "patch.w": w(P, d, scale=1.0 / np.sqrt(P)),
        "patch.b": np.zeros(d, dtype),
        "pos": w(n_tokens, d, scale=0.02),
        "summary": w(d, scale=0.02),
        "head.w": w(d, K, scale=1.0 / np.sqrt(d)),
        "head.b": np.zeros(K, dtype),
    }
    for l in range(cfg.layers):
        for nm in ("wq", "wk", "wv", "wo"):
            p[f"blk{l}.{nm}"] = w(d, d, scale=1.0 / np.sqrt(d))
        p[f"blk{l}.bo"] = np.zeros(d, dtype)
        p[f"blk{l}.w1"] = w(d, h, scale=1.0 / np.sqrt(d))
        p[f"blk{l}.b1"] = np.zeros(h, dtype)
        p[f"blk{l}.w2"] = w(h, d, scale=1.0 / np.sqrt(h))
        p[f"blk{l}.b2"] = np.zeros(d, dtype)
    return p


def as_tensors(params: dict, requires_grad: bool = False) -> dict:
    return {k: Tensor(v, requires_grad=requires_grad, name=k, dtype=v.dtype) for k, v in params.items()}


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

@dataclass
class EncodeOut:
    tokens: Tensor            # [B, N, d] final-normalised token features
    summary: Tensor           # [B, d]
    logits: Tensor            # [B, K] prototype logits (before temperature)
    attn: list                # per layer: np [B, heads, N+1, N+1]


def embed_patches(values, params) -> Tensor:
    x = values if isinstance(values, Tensor) else Tensor(values, dtype=params["patch.w"].dtype)
    return x @ params["patch.w"] + params["patch.b"]


def encode(values, params: dict, cfg: EncoderConfig, keep_attn: bool = True) -> EncodeOut:
    """Pre-norm transformer over [B, N, P] patch values with a prepended summary token."""
    x = embed_patches(values, params)
    if x.ndim == 2:
        x = x.reshape(1, *x.shape)
    B, N, d = x.shape
    if N > params["pos"].shape[0]:
        raise ValueError(f"{N} tokens exceed the positional table ({params['pos'].shape[0]})")
    x = x + params["pos"][:N]
    summ = params["summary"].reshape(1, 1, d) + Tensor(np.zeros((B, 1, d), dtype=x.dtype))
    x = dc.concat([summ, x], axis=1)
    H = cfg.heads
    dh = d // H
    attn_maps = []
    for l in range(cfg.layers):
        try:
            x, a = _block(x, params, l, H, dh)
        except dc.NonFiniteError as err:
            raise dc.NonFiniteError(f"block{l}/{err.primitive}", err.op_id) from err
        if keep_attn:
            attn_maps.append(a)
    x = dc.layer_norm(x)
    summary = x[:, 0, :]
    logits = summary @ params["head.w"] + params["head.b"]
    return EncodeOut(x[:, 1:, :], summary, logits, attn_maps)


def _block(x, p, l, H, dh):
    B, N1, d = x.shape
    h = dc.layer_norm(x)

    def heads(t):
        return dc.transpose(t.reshape(B, N1, H, dh), (0, 2, 1, 3))

    q = heads(h @ p[f"blk{l}.wq"])
    k = heads(h @ p[f"blk{l}.wk"])
    v = heads(h @ p[f"blk{l}.wv"])
    a = dc.softmax((q @ dc.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(dh)), axis=-1)
    o = dc.transpose(a @ v, (0, 2, 1, 3)).reshape(B, N1, d)
    x = x + o @ p[f"blk{l}.wo"] + p[f"blk{l}.bo"]
    h = dc.gelu(dc.layer_norm(x) @ p[f"blk{l}.w1"] + p[f"blk{l}.b1"])
    x = x + h @ p[f"blk{l}.w2"] + p[f"blk{l}.b2"]
    return x, a.data


def prototype_probs(logits, temp: float):
    """Temperature-sharpened prototype distribution (works on Tensor or ndarray)."""
    if isinstance(logits, Tensor):
        return dc.softmax(logits * (1.0 / temp), axis=-1)
    z = np.asarray(logits, dtype=np.float64) / temp
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def teacher_probs(logits: np.ndarray, center: np.ndarray, temp: float) -> np.ndarray:
    return prototype_probs(np.asarray(logits) - center, temp)


def teacher_aggregate(p_views, center=None, temp: float | None = None) -> np.ndarray:
    """Mean of the per-view teacher distributions, renormalised.

    Pass distributions directly, or logits together with ``center`` and
    ``temp`` to have them centred and sharpened first.
    """
    views = [np.asarray(p, dtype=np.float64) for p in p_views]
    if center is not None:
        views = [teacher_probs(v, center, temp) for v in views]
    m = np.mean(views, axis=0)
    return m / m.sum(axis=-1, keepdims=True)


def update_center(center: np.ndarray, teacher_logits: np.ndarray, momentum: float) -> np.ndarray:
    batch_mean = np.asarray(teacher_logits).reshape(-1, center.shape[-1]).mean(axis=0)
    return (momentum * center + (1.0 - momentum) * batch_mean).astype(center.dtype)


def ema_update(teacher: dict, student: dict, m: float) -> dict:
    if not 0.0 <= m <= 1.0:
        raise ValueError("momentum must lie in [0, 1]")
    if set(teacher) != set(student):
        raise ValueError("teacher and student parameter names differ")
    out = {}
    for k, t in teacher.items():
        s = student[k]
        if t.shape != s.shape:
            raise ValueError(f"shape mismatch for {k}: {t.shape} vs {s.shape}")
        if m == 1.0:
            out[k] = t.copy()
        elif m == 0.0:
            out[k] = s.astype(t.dtype, copy=True)
        else:
            out[k] = (m * t + (1.0 - m) * s).astype(t.dtype)
    return out


def phase_pool(tokens: Tensor, phases: list) -> Tensor:
    """[B, N, d] token features -> [B, 4, d] mean per cardiac phase bucket."""
    cols = []
    ph = np.asarray(phases)
    for name in PHASES:
        idx = np.flatnonzero(ph == name)
        if idx.size == 0:
            raise ValueError(f"no tokens fall in phase '{name}'")
        cols.append(dc.take(tokens, idx, axis=1).mean(axis=1))
    return dc.stack(cols, axis=1)


# ---------------------------------------------------------------------------
# checkpoints: JSON manifest + raw little-endian float32 blob
# ---------------------------------------------------------------------------

def save_checkpoint(path, groups: dict, meta: dict) -> Path:
    """``groups`` maps a group name (e.g. "student") to a {param: array} dict."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for g in sorted(groups):
        for name in sorted(groups[g]):
            arr = np.ascontiguousarray(groups[g][name], dtype="<f4")
            entries.append({"group": g, "name": name, "shape": list(arr.shape), "offset": offset})
            chunks.append(arr.tobytes())
            offset += arr.size
    blob_tmp = path / "params.f32.tmp"
    blob_tmp.write_bytes(b"".join(chunks))
    os.replace(blob_tmp, path / "params.f32")
    manifest = dict(meta, params=entries, blob="params.f32", dtype="f32le")
    man_tmp = path / "manifest.json.tmp"
    man_tmp.write_text(json.dumps(manifest, indent=1, default=_jsonable))
    os.replace(man_tmp, path / "manifest.json")
    return path


def load_checkpoint(path):
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    flat = np.frombuffer((path / manifest["blob"]).read_bytes(), dtype="<f4")
    groups: dict = {}
    for e in manifest["params"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = flat[e["offset"]:e["offset"] + n].reshape(e["shape"]).astype(np.float32)
        groups.setdefault(e["group"], {})[e["name"]] = arr
    return groups, manifest


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if hasattr(o, "__dataclass_fields__"):
        return asdict(o)
    raise TypeError(f"not JSON serialisable: {type(o)}")
