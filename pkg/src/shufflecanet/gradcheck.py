"""Central-difference gradient checks in double precision."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tape, Tensor

STEP = 1e-5


def rel_error(analytic, numeric) -> np.ndarray:
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(1e-8, np.abs(a) + np.abs(n))


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[Tensor], seed: int = 0, max_elems: int | None = 64,
              step: float = STEP) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn(*inputs)`` may return any shape; it is reduced to a scalar by a fixed
    random projection so every output element contributes an O(1) gradient.
    Only ``max_elems`` randomly chosen entries of each input are perturbed
    (all of them when ``None``). Inputs must be float64 and are restored.
    """
    rng = np.random.default_rng(seed)
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError(f"gradcheck needs float64 inputs, got {t.dtype}")
        t.requires_grad = True
    out = fn(*inputs)
    # separate stream so the projection never coincides with inputs drawn from the same seed
    prng = np.random.default_rng([seed, 0x9E37])
    proj = prng.uniform(0.5, 1.5, out.shape) * prng.choice([-1.0, 1.0], out.shape)

    def scalar() -> float:
        return float(np.sum(fn(*inputs).data * proj))

    with Tape() as tape:
        loss = T.tsum(T.mul(fn(*inputs), proj))
    grads = tape.backward(loss)
    worst = 0.0
    for t in inputs:
        g = grads[t].reshape(-1)
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_elems is not None and flat.size > max_elems:
            idx = rng.choice(flat.size, size=max_elems, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            hi = scalar()
            flat[i] = orig - step
            lo = scalar()
            flat[i] = orig
            num = (hi - lo) / (2 * step)
            worst = max(worst, float(rel_error(g[i], num)))
    return worst


def module_gradcheck(module, x: Tensor, seed: int = 0, max_elems: int | None = 32, step: float = STEP) -> float:
    """Gradcheck a module's input and every parameter (module must already be float64)."""
    params = module.parameters()
    return gradcheck(lambda x_, *_: _flat_outputs(module(x_)), [x, *params], seed=seed, max_elems=max_elems, step=step)


def _flat_outputs(out):
    """Multi-output modules (neck, head) are checked on their concatenated flat outputs."""
    if isinstance(out, (list, tuple)):
        return T.concat([T.reshape(o, (-1,)) for o in out], axis=0)
    return out
