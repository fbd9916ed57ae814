"""Central finite-difference oracle for reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np

from .exceptions import NumericsError
from .tensor import Tensor, backward, leaves


@dataclass
class GradCheckReport:
    errors: dict = field(default_factory=dict)  # block name -> max relative error
    tol: float = 1e-4
    kinks: dict = field(default_factory=dict)  # block name -> coordinates re-probed one-sidedly

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tol

    def worst(self, n=5):
        return sorted(self.errors.items(), key=lambda kv: -kv[1])[:n]

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        lines = [f"{status} max rel err {self.max_error:.3e} (tol {self.tol:.0e}) over {len(self.errors)} blocks"]
        if self.kinks:
            lines.append(f"  one-sided re-probes at kinks: {sum(self.kinks.values())}")
        lines += [f"  {name}: {err:.3e}" for name, err in self.worst()]
        return "\n".join(lines)


def _scalar(f, params):
    out = f(leaves(params))
    value = float(out.data) if isinstance(out, Tensor) else float(out)
    if not np.isfinite(value):
        raise NumericsError("finite_diff_check: objective is not finite")
    return value


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-10) -> float:
    """Block-scaled relative error: ``max|a - n| / max(max|a|, max|n|, floor)``."""
    diff = np.max(np.abs(analytic - numeric), initial=0.0)
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0), floor)
    return float(diff / scale) if diff > 0 else 0.0


def finite_diff_check(
    f: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    h: float = 1e-4,
    tol: float = 1e-4,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> GradCheckReport:
    """Compare ``backward`` against central differences for every parameter block.

    ``f`` receives a dict of named leaf tensors and returns a scalar tensor.
    With ``max_coords`` set, each block is probed on that many coordinates
    drawn without replacement (always including its largest-gradient entry).
    Coordinates whose central stencil crosses a kink are re-probed one-sidedly
    and counted in ``report.kinks``.
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    ts = leaves(params)
    loss = f(ts)
    if not np.isfinite(loss.data).all():
        raise NumericsError("finite_diff_check: objective is not finite")
    grads = backward(loss, wrt=ts)
    base = float(loss.data)
    rng = rng or np.random.default_rng(0)
    report = GradCheckReport(tol=tol)
    for name, value in params.items():
        analytic = grads[name].ravel()
        coords = np.arange(value.size)
        if max_coords is not None and value.size > max_coords:
            top = int(np.argmax(np.abs(analytic)))
            rest = rng.choice(np.delete(coords, top), size=max_coords - 1, replace=False)
            coords = np.concatenate([[top], rest])
        numeric = np.empty(len(coords))
        flat = value.reshape(-1)

        def probe(c, delta):
            orig = flat[c]
            flat[c] = orig + delta
            try:
                return _scalar(f, params)
            finally:
                flat[c] = orig

        ups, downs = np.empty(len(coords)), np.empty(len(coords))
        for i, c in enumerate(coords):
            ups[i], downs[i] = probe(c, h), probe(c, -h)
            numeric[i] = (ups[i] - downs[i]) / (2.0 * h)
        a = analytic[coords]
        scale = max(np.abs(a).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-10)
        # A central stencil that straddles a ReLU / max kink is not a valid
        # oracle.  Re-estimate such coordinates with the second-order one-sided
        # stencil on the smoother side, which lies entirely on one side of it.
        for i in np.nonzero(np.abs(a - numeric) > tol * scale)[0]:
            c = coords[i]
            up2, down2 = probe(c, 2 * h), probe(c, -2 * h)
            right_curv = abs(up2 - 2 * ups[i] + base)
            left_curv = abs(base - 2 * downs[i] + down2)
            if right_curv < left_curv:
                numeric[i] = (-3 * base + 4 * ups[i] - up2) / (2 * h)
            else:
                numeric[i] = (3 * base - 4 * downs[i] + down2) / (2 * h)
            report.kinks[name] = report.kinks.get(name, 0) + 1
        report.errors[name] = relative_error(a, numeric)
    return report
