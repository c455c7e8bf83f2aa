from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tape, Tensor, backward


def value_and_grad(f: Callable[[dict[str, Tensor]], Tensor], params: dict[str, np.ndarray]):
    tensors = {k: Tensor(v, requires_grad=True, dtype=v.dtype) for k, v in params.items()}
    with Tape() as tape:
        loss = f(tensors)
    grads = backward(tape, loss, tensors)
    return float(loss.data), grads


def finite_diff_check(
    f: Callable[[dict[str, Tensor]], Tensor],
    params: dict[str, np.ndarray],
    eps: float = 1e-6,
    max_entries: int | None = None,
    seed: int = 0,
) -> float:
    """Worst per-parameter relative error between tape gradients and central
    differences, ``|g - g_fd| / max(|g|, |g_fd|)`` over the probed entries.

    Measuring per tensor rather than per entry keeps entries whose gradient is
    below the finite-difference roundoff floor (~1e-10 |f|) from dominating.

    ``f`` maps a dict of parameter tensors to a scalar tensor. Parameters should
    be float64. With ``max_entries`` only a seeded random subset of entries is
    probed per parameter.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    _, grads = value_and_grad(f, params)

    def scalar(p):
        val = float(f({k: Tensor(v, dtype=np.float64) for k, v in p.items()}).data)
        if not np.isfinite(val):
            raise FloatingPointError("finite_diff_check: objective returned a non-finite value")
        return val

    rng = np.random.default_rng(seed)
    worst = 0.0
    for name in sorted(params):
        p = params[name]
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
        analytic = grads[name].reshape(-1)[idx]
        fds = np.empty(len(idx))
        for n, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            hi = flat[i]
            up = scalar(params)
            flat[i] = orig - eps
            lo = flat[i]
            down = scalar(params)
            flat[i] = orig
            # realised step, not the nominal one, to keep representation error out
            fds[n] = (up - down) / (hi - lo)
        scale = max(np.linalg.norm(analytic), np.linalg.norm(fds))
        if scale > 0:
            worst = max(worst, float(np.linalg.norm(analytic - fds) / scale))
    return worst
