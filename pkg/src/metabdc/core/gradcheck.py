"""Central-difference gradient checking for scalar functions of arrays."""

from __future__ import annotations

from typing import Callable

import numpy as np

GradFn = Callable[[dict[str, np.ndarray]], tuple[float, dict[str, np.ndarray]]]


def grad_check(fn: GradFn, point: dict[str, np.ndarray], eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    `fn` maps {name: array} to (scalar loss, {name: grad}); only the loss is
    used for the perturbed evaluations. Error metric per coordinate is
    |analytic - numeric| / max(1, |analytic|), and the max runs over every
    coordinate of every entry in `point`. Use float64 points; at float32 the
    difference quotient itself carries ~1e-3 noise.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    _, grads = fn(point)
    missing = set(point) - set(grads)
    if missing:
        raise ValueError(f"fn returned no gradient for {sorted(missing)}")

    worst = 0.0
    for name, arr in point.items():
        arr = np.asarray(arr, dtype=np.float64)
        analytic = np.asarray(grads[name], dtype=np.float64)
        if analytic.shape != arr.shape:
            raise ValueError(f"gradient shape {analytic.shape} != point shape {arr.shape} for {name!r}")
        flat = arr.ravel()
        for i in range(flat.size):
            bumped = dict(point)
            plus = arr.copy().ravel()
            plus[i] += eps
            bumped[name] = plus.reshape(arr.shape)
            f_plus, _ = fn(bumped)
            minus = arr.copy().ravel()
            minus[i] -= eps
            bumped[name] = minus.reshape(arr.shape)
            f_minus, _ = fn(bumped)
            numeric = (float(f_plus) - float(f_minus)) / (2.0 * eps)
            a = float(analytic.ravel()[i])
            err = abs(a - numeric) / max(1.0, abs(a))
            if err > worst:
                worst = err
    return worst
