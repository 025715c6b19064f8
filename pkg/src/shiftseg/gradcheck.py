"""Central finite-difference oracle for checking hand-written gradients."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np


class OracleFailure(RuntimeError):
    """The function under test produced a non-finite value at a probe point."""


def finite_diff_grad(f: Callable[[np.ndarray], float], at, h: float = 1e-5, workers: int | None = None):
    """Central differences ``(f(x + h e_i) - f(x - h e_i)) / 2h`` per coordinate.

    ``workers`` > 1 evaluates coordinates on a thread pool; each coordinate
    works on its own copy of ``at`` so the result matches serial evaluation.
    """
    if h <= 0:
        raise ValueError("step size must be positive")
    x0 = np.array(at, dtype=np.float64, copy=True)
    flat = x0.reshape(-1)

    def partial(i):
        x = flat.copy()
        x[i] += h
        fp = f(x.reshape(x0.shape))
        x[i] = flat[i] - h
        fm = f(x.reshape(x0.shape))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise OracleFailure(f"non-finite function value while perturbing coordinate {i}")
        return (fp - fm) / (2.0 * h)

    idx = range(flat.size)
    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            vals = list(pool.map(partial, idx))
    else:
        vals = [partial(i) for i in idx]
    return np.asarray(vals, dtype=np.float64).reshape(x0.shape)


@dataclass
class GradCheckReport:
    h: float
    max_abs_err: float = 0.0
    max_rel_err: float = 0.0
    per_param: dict = field(default_factory=dict)

    def passed(self, rel_tol: float = 1e-5) -> bool:
        return self.max_rel_err < rel_tol


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    # floor keeps round-off on near-zero partials (~1e-11 for O(1) losses) from dominating
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_gradients(
    loss_fn: Callable[[], float],
    arrays: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    rng: np.random.Generator,
    probes: int = 10,
    h: float = 1e-5,
) -> GradCheckReport:
    """Compare analytic ``grads`` with central differences at random entries.

    ``arrays`` are perturbed in place (and restored), so ``loss_fn`` must read
    them by reference.  Probes are spread over all named arrays.
    """
    names = [k for k in arrays if arrays[k].size > 0]
    sizes = np.array([arrays[k].size for k in names])
    report = GradCheckReport(h=h)
    for _ in range(probes):
        k = names[rng.choice(len(names), p=sizes / sizes.sum())] if len(names) > 1 else names[0]
        a = arrays[k]
        flat_i = int(rng.integers(a.size))
        pos = np.unravel_index(flat_i, a.shape)
        orig = a[pos]
        a[pos] = orig + h
        fp = loss_fn()
        a[pos] = orig - h
        fm = loss_fn()
        a[pos] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise OracleFailure(f"non-finite loss probing {k}{pos}")
        numeric = (fp - fm) / (2.0 * h)
        analytic = float(grads[k][pos])
        abs_err = abs(analytic - numeric)
        rel_err = relative_error(analytic, numeric)
        report.max_abs_err = max(report.max_abs_err, abs_err)
        report.max_rel_err = max(report.max_rel_err, rel_err)
        report.per_param[k] = max(report.per_param.get(k, 0.0), rel_err)
    return report
