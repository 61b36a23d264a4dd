from __future__ import annotations

from typing import Callable

import numpy as np

from .params import ParamStore
from .tensor import NonFiniteError, Tape, Tensor


def analytic_grads(f: Callable[[ParamStore], Tensor], params: ParamStore) -> dict[str, np.ndarray]:
    params.zero_grad()
    params.begin()
    with Tape() as tape:
        loss = f(params)
    if not np.isfinite(loss.data).all():
        raise NonFiniteError("loss is not finite")
    tape.backward(loss)
    params.collect_grads()
    return {name: p.grad.copy() for name, p in params.items()}


def grad_check(f: Callable[[ParamStore], Tensor], params: ParamStore, h: float = 1e-4,
               max_entries: int | None = None, seed: int = 0) -> float:
    """Largest |analytic - central difference| / max(1, |central difference|).

    ``f`` maps the store to a scalar Tensor. Use a float64 store; checking
    in float32 is possible but the finite differences get noisy. With
    ``max_entries`` only that many randomly chosen entries per parameter are
    probed.
    """
    grads = analytic_grads(f, params)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in params.items():
        flat = p.value.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        g = grads[name].reshape(-1)
        for i in idx:
            if not p.trainable:
                if g[i] != 0.0:
                    return float("inf")
                continue
            orig = flat[i]
            flat[i] = orig + h
            params.begin()
            up = float(f(params).data)
            flat[i] = orig - h
            params.begin()
            dn = float(f(params).data)
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(dn)):
                raise NonFiniteError(f"non-finite loss while probing {name}[{i}]")
            fd = (up - dn) / (2 * h)
            worst = max(worst, abs(g[i] - fd) / max(1.0, abs(fd)))
    params.begin()
    return worst
