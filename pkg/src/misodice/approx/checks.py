"""Finite-difference gradient checks and midpoint convexity probes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def numeric_grad(fn, params: dict, h=1e-5) -> dict:
    """Central differences of ``fn()`` w.r.t. every entry of ``params`` (perturbed in place)."""
    out = {}
    for name, p in params.items():
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = fn()
            flat[i] = old - h
            down = fn()
            flat[i] = old
            gflat[i] = (up - down) / (2.0 * h)
        out[name] = g
    return out


def max_relative_error(analytic: dict, numeric: dict, floor=1e-7) -> float:
    worst = 0.0
    for k in numeric:
        a, n = np.asarray(analytic.get(k, 0.0)), numeric[k]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def gradient_check(loss_and_grad, params: dict, h=1e-5) -> float:
    """Max relative error between ``loss_and_grad()[1]`` and central differences.

    ``loss_and_grad`` takes no arguments and reads the current ``params``.
    """
    _, analytic = loss_and_grad()
    numeric = numeric_grad(lambda: loss_and_grad()[0], params, h)
    return max_relative_error(analytic, numeric)


@dataclass
class ProbeReport:
    n_segments: int
    tol: float
    violations: list = field(default_factory=list)   # (x, y, gap)

    @property
    def max_gap(self) -> float:
        return max((v[2] for v in self.violations), default=0.0)

    @property
    def ok(self) -> bool:
        return not self.violations


def convexity_probe(loss_fn, param_sampler, n_segments: int, tol: float, rng=None) -> ProbeReport:
    """Midpoint test ``f((x+y)/2) <= (f(x)+f(y))/2 + tol`` on random segments.

    ``param_sampler(rng)`` returns an endpoint pair ``(x, y)``; drawing both
    together lets callers restrict segments (e.g. vary one block, or stay in
    a region).
    """
    rng = np.random.default_rng(0) if rng is None else rng
    report = ProbeReport(n_segments=n_segments, tol=tol)
    for _ in range(n_segments):
        x, y = param_sampler(rng)
        fx, fy, fm = loss_fn(x), loss_fn(y), loss_fn(0.5 * (x + y))
        if not np.isfinite([fx, fy, fm]).all():
            raise FloatingPointError(f"non-finite loss at probe point (values {fx}, {fy}, {fm})")
        gap = fm - 0.5 * (fx + fy)
        if gap > tol:
            report.violations.append((x, y, float(gap)))
    return report
