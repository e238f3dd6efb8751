"""Central finite-difference gradient verification."""
from __future__ import annotations

from typing import Callable, Sequence, Union

import numpy as np

from .tensor import Tape, Tensor


def finite_diff_check(
    f: Callable[..., Tensor],
    x: Union[Tensor, Sequence[Tensor]],
    eps: float = 1e-5,
) -> float:
    """Return the worst relative error between tape and central-difference gradients.

    ``f`` maps the tensor(s) ``x`` to a scalar Tensor. Every coordinate of every
    input is perturbed. Relative error per coordinate is
    ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    saved = [t.requires_grad for t in xs]
    for t in xs:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        out = f(*xs) if not isinstance(x, Tensor) else f(x)
        tape.backward(out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in xs]
    for t, s in zip(xs, saved):
        t.requires_grad = s
        t.grad = None

    def value():
        return float((f(*xs) if not isinstance(x, Tensor) else f(x)).data.reshape(-1)[0])

    worst = 0.0
    for t, a in zip(xs, analytic):
        flat = t.data.reshape(-1)
        af = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = value()
            flat[i] = orig - eps
            fm = value()
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            err = abs(af[i] - num) / max(abs(af[i]), abs(num), 1e-8)
            worst = max(worst, err)
    return worst
