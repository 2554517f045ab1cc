from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from ..errors import InvalidArgumentError

LossFn = Callable[[Mapping[str, np.ndarray]], tuple[float, Mapping[str, np.ndarray]]]


def grad_check(arrays: dict[str, np.ndarray], loss_fn: LossFn, eps: float = 1e-6, n_checks: int = 40,
               rng: np.random.Generator | None = None, keys=None,
               kink_signature: Callable[[Mapping[str, np.ndarray]], object] | None = None,
               floor: float = 1e-7) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``loss_fn`` reads ``arrays`` (perturbed in place and restored) and returns
    ``(loss, grads)``. Entries are sampled at random across ``keys``. When
    ``kink_signature`` is given, an entry is skipped if the signature (e.g. the
    set of active hinge terms) differs between ``theta - eps``, ``theta`` and
    ``theta + eps``, since the loss is not differentiable there. Relative error
    is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise InvalidArgumentError("eps must lie in [1e-7, 1e-3]")
    rng = rng or np.random.default_rng(0)
    keys = sorted(keys or arrays)
    _, grads = loss_fn(arrays)
    grads = {k: np.array(grads[k], copy=True) for k in keys}
    sizes = np.array([arrays[k].size for k in keys])
    worst = 0.0
    base_sig = kink_signature(arrays) if kink_signature else None
    for _ in range(n_checks):
        ki = int(rng.choice(len(keys), p=sizes / sizes.sum()))
        k = keys[ki]
        flat = arrays[k].reshape(-1)
        j = int(rng.integers(flat.size))
        orig = flat[j]
        flat[j] = orig + eps
        lp, _ = loss_fn(arrays)
        sig_p = kink_signature(arrays) if kink_signature else None
        flat[j] = orig - eps
        lm, _ = loss_fn(arrays)
        sig_m = kink_signature(arrays) if kink_signature else None
        flat[j] = orig
        if kink_signature and not (sig_p == base_sig == sig_m):
            continue
        numeric = (lp - lm) / (2 * eps)
        analytic = float(grads[k].reshape(-1)[j])
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        worst = max(worst, err)
    return worst
