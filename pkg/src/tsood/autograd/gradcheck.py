from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tape, Tensor, no_record


def finite_difference_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-3, floor: float = 1e-8) -> float:
    """Max relative error between tape gradients and central differences.

    ``x`` is promoted to float64 so the numerical side is not dominated by
    float32 rounding; parameters captured by ``f`` keep their own dtype.
    The relative error uses ``max(|analytic|, |numeric|, floor)`` as denominator;
    raise ``floor`` above the central-difference roundoff (about ``eps * |f| / h``)
    when some gradient entries are exactly zero.
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)

    with Tape() as tape:
        xt = Tensor(base, requires_grad=True, dtype=np.float64)
        y = f(xt)
    analytic = tape.backward(y, wrt=[xt])[xt].data.astype(np.float64)

    numeric = np.empty_like(base)
    flat = base.reshape(-1)
    with no_record():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(Tensor(base, dtype=np.float64)).data)
            flat[i] = orig - h
            fm = float(f(Tensor(base, dtype=np.float64)).data)
            flat[i] = orig
            numeric.reshape(-1)[i] = (fp - fm) / (2 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))
