"""Finite-difference verification of taped gradients.

`grad_check` compares the tape's gradient of a scalar function against
central differences, coordinate by coordinate.  `primitive_battery` runs it
over every registered primitive on random shapes and is what the
`grad-check` CLI subcommand executes.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .errors import ContractError, NumericError
from .tensor import Tensor


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between taped and central-difference gradients.

    Returns max_i |g_i - fd_i| / max(1, |g_i|), probing every coordinate of
    `x` at x +- h.  `f` must map `x` to a scalar tensor via taped primitives.
    """
    T.reset_tape()
    x.requires_grad = True
    x.zero_grad()
    out = f(x)
    if out.data.shape != ():
        raise ContractError(f"grad_check: f must return a scalar, got shape {out.shape}")
    T.backward(out)
    if x.grad is None:
        raise ContractError("grad_check: f does not depend on x")
    analytic = x.grad.copy()

    flat = x.data.reshape(-1)
    fd = np.zeros_like(flat)
    with T.no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f(x).item()
            flat[i] = orig - h
            down = f(x).item()
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError(f"grad_check: non-finite value at probe {i}")
            fd[i] = (up - down) / (2.0 * h)
    ga = analytic.reshape(-1)
    return float(np.max(np.abs(ga - fd) / np.maximum(1.0, np.abs(ga))))


def _rand(rng: np.random.Generator, *shape: int) -> Tensor:
    return Tensor(rng.normal(0.0, 1.0, shape))


def _away_from_kink(rng: np.random.Generator, *shape: int, gap: float = 1e-3) -> Tensor:
    """Values bounded away from 0, where abs/smooth-L1 derivatives jump."""
    mag = rng.uniform(gap, 1.5, shape)
    sign = rng.choice([-1.0, 1.0], shape)
    return Tensor(mag * sign)


def _battery_cases(rng: np.random.Generator) -> list[tuple[str, Callable[[Tensor], Tensor], Tensor]]:
    """One (kind, scalar function, probe tensor) case per primitive."""
    i = rng.integers
    a2 = int(i(2, 5))
    b2 = int(i(2, 5))
    c2 = int(i(2, 5))
    cases: list[tuple[str, Callable[[Tensor], Tensor], Tensor]] = []

    other = _rand(rng, a2, b2)
    cases.append(("add", lambda x: T.tsum(T.add(x, other)), _rand(rng, a2, b2)))
    cases.append(("sub", lambda x: T.tsum(T.sub(other, x)), _rand(rng, a2, b2)))
    cases.append(("mul", lambda x: T.tsum(T.mul(x, other)), _rand(rng, 1, b2)))
    cases.append(("scale", lambda x: T.tsum(T.scale(x, -1.7)), _rand(rng, a2)))

    rhs = _rand(rng, b2, c2)
    cases.append(("matmul", lambda x: T.tsum(T.matmul(x, rhs)), _rand(rng, a2, b2)))
    rhs_b = _rand(rng, 2, b2, c2)
    cases.append(("matmul", lambda x: T.tsum(T.matmul(x, rhs_b)), _rand(rng, 2, a2, b2)))
    w3 = _rand(rng, a2, b2, 2)
    cases.append(
        ("transpose", lambda x: T.tsum(T.mul(T.transpose(x, (1, 2, 0)), w3)), _rand(rng, 2, a2, b2))
    )
    wf = _rand(rng, a2 * b2)
    cases.append(("reshape", lambda x: T.tsum(T.mul(T.reshape(x, (a2 * b2,)), wf)), _rand(rng, a2, b2)))
    tail = _rand(rng, 2, b2)
    wc = _rand(rng, a2 + 2, b2)
    cases.append(("concat", lambda x: T.tsum(T.mul(T.concat([x, tail], axis=0), wc)), _rand(rng, a2, b2)))
    cases.append(("narrow", lambda x: T.tsum(T.narrow(x, 0, 1, a2 - 1)), _rand(rng, a2, b2)))

    wsm = _rand(rng, a2, b2)
    cases.append(("softmax", lambda x: T.tsum(T.mul(T.softmax(x), wsm)), _rand(rng, a2, b2)))
    gain = _rand(rng, b2)
    bias = _rand(rng, b2)
    wln = _rand(rng, a2, b2)
    cases.append(("layer_norm", lambda x: T.tsum(T.mul(T.layer_norm(x, gain, bias), wln)), _rand(rng, a2, b2)))
    xln = _rand(rng, 3, b2)
    cases.append(("layer_norm", lambda g: T.tsum(T.layer_norm(xln, g, bias)), _rand(rng, b2)))
    cases.append(("gelu", lambda x: T.tsum(T.gelu(x)), _rand(rng, a2, b2)))
    cases.append(("sigmoid", lambda x: T.tsum(T.sigmoid(x)), _rand(rng, a2, b2)))
    cases.append(("abs", lambda x: T.tsum(T.absval(x)), _away_from_kink(rng, a2, b2)))

    ids = rng.integers(0, a2, size=(6,))
    cases.append(("embedding", lambda x: T.tsum(T.embedding(x, ids)), _rand(rng, a2, b2)))
    cases.append(("sum", lambda x: T.tsum(x), _rand(rng, a2, b2)))
    cases.append(("mean", lambda x: T.tmean(x), _rand(rng, a2, b2)))
    wp = _rand(rng, 2, 2, 3)
    cases.append(("avg_pool2", lambda x: T.tsum(T.mul(T.avg_pool2(x), wp)), _rand(rng, 2, 4, 6)))
    wu = _rand(rng, 2, 4, 6)
    cases.append(("upsample2", lambda x: T.tsum(T.mul(T.upsample2(x), wu)), _rand(rng, 2, 2, 3)))

    # boxes kept off integer sampling grids so bilinear weights stay smooth
    boxes = np.array(
        [
            [1.3 + rng.uniform(0, 0.3), 1.2, 5.7, 6.3],
            [0.6, 2.1, 7.2, 7.7 + rng.uniform(0, 0.2)],
        ]
    )
    cases.append(("roi_align", lambda x: T.tsum(T.roi_align(x, boxes, 3, 2.0)), _rand(rng, 2, 5, 5)))

    tgt = _rand(rng, a2, b2)
    cases.append(
        ("smooth_l1", lambda x: T.tsum(T.smooth_l1(T.add(tgt, x), tgt, beta=0.4)), _away_from_kink(rng, a2, b2))
    )
    toks = rng.integers(0, 5, size=(a2,))
    cases.append(
        ("cross_entropy", lambda x: T.tmean(T.sequence_cross_entropy(x, toks, 0.1)), _rand(rng, a2, 5))
    )
    heat = np.zeros((4, 4))
    heat[1, 2] = 1.0
    heat[3, 0] = 0.6
    cases.append(
        ("focal_heatmap", lambda x: T.focal_heatmap_loss(x, heat, n_pos=1), _rand(rng, 4, 4))
    )
    return cases


def primitive_battery(seeds: int = 20, h: float = 1e-5, tol: float = 1e-4) -> dict[str, float]:
    """Grad-check every registered primitive over `seeds` random shapes.

    Returns the worst relative error seen per primitive kind and raises
    NumericError if any exceeds `tol`.
    """
    worst: dict[str, float] = {}
    for seed in range(seeds):
        rng = np.random.default_rng(1000 + seed)
        for kind, fn, probe in _battery_cases(rng):
            err = grad_check(fn, probe, h=h)
            if err > worst.get(kind, 0.0):
                worst[kind] = err
    covered = set(worst)
    registered = set(T.PRIMITIVES)
    missing = registered - covered
    if missing:
        raise ContractError(f"primitive battery misses kinds: {sorted(missing)}")
    bad = {k: v for k, v in worst.items() if v >= tol}
    if bad:
        raise NumericError(f"gradient check failed: {bad}")
    return worst
