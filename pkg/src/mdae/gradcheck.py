"""Finite-difference and adjoint checks for the primitives in :mod:`mdae.tensor`."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T

FD_STEP = 1e-5
# denominators below this are clamped, so gradients that are ~0 on both sides
# are compared in absolute terms
REL_FLOOR = 1e-6


@dataclass
class GradcheckReport:
    name: str
    max_rel_err: dict[str, float] = field(default_factory=dict)
    probes: int = 0

    @property
    def worst(self) -> float:
        return max(self.max_rel_err.values(), default=0.0)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.worst < tol

    def __str__(self) -> str:
        parts = ", ".join(f"{k}={v:.2e}" for k, v in self.max_rel_err.items())
        return f"{self.name}: {parts}"


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), REL_FLOOR)
    return np.abs(analytic - numeric) / denom


def gradcheck(
    forward: Callable[..., np.ndarray],
    backward: Callable[[np.ndarray], Sequence[np.ndarray]],
    inputs: dict[str, np.ndarray],
    *,
    seed: int = 0,
    step: float = FD_STEP,
    max_probes: int | None = None,
    name: str = "op",
) -> GradcheckReport:
    """Compare analytic gradients against central differences.

    ``forward(**inputs)`` returns the output array (any shape, or a float).
    ``backward(g_out)`` must return gradients for ``inputs`` in dict order,
    computed for the most recent forward at the unperturbed inputs.
    The scalar probed is ``<forward(...), r>`` for a fixed random ``r``;
    each perturbation's output difference is formed before projecting on
    ``r`` so linear maps are reproduced to near machine precision.
    """
    rng = np.random.default_rng(seed)
    y0 = np.asarray(forward(**inputs))
    r = rng.standard_normal(y0.shape) if y0.shape else np.float64(1.0)
    r = np.asarray(r, dtype=y0.dtype)
    analytic = backward(r)
    report = GradcheckReport(name)
    for (key, arr), g in zip(inputs.items(), analytic):
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if max_probes is not None and flat.size > max_probes:
            idx = np.sort(rng.choice(flat.size, size=max_probes, replace=False))
        num = np.empty(idx.size)
        for j, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + step
            y_plus = np.asarray(forward(**inputs))
            flat[i] = old - step
            y_minus = np.asarray(forward(**inputs))
            flat[i] = old
            num[j] = np.sum((y_plus - y_minus) * r) / (2 * step)
        ana = np.asarray(g, dtype=np.float64).reshape(-1)[idx]
        report.max_rel_err[key] = float(rel_err(ana, num).max()) if idx.size else 0.0
        report.probes += int(idx.size)
    return report


def adjoint_error(apply: Callable, apply_t: Callable, x: np.ndarray, y: np.ndarray) -> float:
    """Relative mismatch |<Lx, y> - <x, L^T y>| / (|<Lx, y>| + |<x, L^T y>|)."""
    lhs = float(np.vdot(apply(x), y))
    rhs = float(sum(np.vdot(a, b) for a, b in zip(_as_tuple(x), _as_tuple(apply_t(y)))))
    scale = abs(lhs) + abs(rhs)
    return abs(lhs - rhs) / scale if scale else 0.0


def _as_tuple(v):
    return v if isinstance(v, tuple) else (v,)


# --------------------------------------------------------------------------
# the op suite run by `mdae gradcheck` and the acceptance tests
# --------------------------------------------------------------------------

def _stateful(fwd, bwd):
    """Glue a (y, cache) forward and a cache-consuming backward into gradcheck's shape."""
    holder = {}

    def forward(**kw):
        y, holder["cache"] = fwd(**kw)
        return y

    def backward(g):
        out = bwd(holder["cache"], g)
        return out if isinstance(out, tuple) else (out,)

    return forward, backward


def check_conv2d(rng, dims=(2, 3, 8, 8), out_channels=4, **kw) -> GradcheckReport:
    n, c, h, w = dims
    inputs = {
        "x": rng.standard_normal(dims),
        "w": rng.standard_normal((out_channels, c, 3, 3)),
        "b": rng.standard_normal(out_channels),
    }
    fwd, bwd = _stateful(lambda x, w, b: T.conv2d(x, T.ConvParams(w, b)), T.conv2d_backward)
    return gradcheck(fwd, bwd, inputs, name="conv2d", **kw)


def check_maxpool2(rng, dims=(1, 2, 6, 6), **kw) -> GradcheckReport:
    # a shuffled grid keeps every window's max well separated from the runner-up
    size = int(np.prod(dims))
    x = rng.permutation(size).reshape(dims) / size
    fwd, bwd = _stateful(lambda x: T.maxpool2(x), T.maxpool2_backward)
    return gradcheck(fwd, bwd, {"x": x}, name="maxpool2", **kw)


def check_upsample(rng, dims=(2, 3, 4, 5), **kw) -> GradcheckReport:
    fwd, bwd = _stateful(lambda x: T.upsample_nearest2(x), T.upsample_nearest2_backward)
    return gradcheck(fwd, bwd, {"x": rng.standard_normal(dims)}, name="upsample_nearest2", **kw)


def check_concat(rng, n=2, ca=2, cb=3, h=4, w=4, **kw) -> GradcheckReport:
    inputs = {"a": rng.standard_normal((n, ca, h, w)), "b": rng.standard_normal((n, cb, h, w))}
    fwd, bwd = _stateful(lambda a, b: T.concat_channels(a, b), T.concat_channels_backward)
    return gradcheck(fwd, bwd, inputs, name="concat_channels", **kw)


def check_batchnorm(rng, dims=(3, 2, 4, 4), mode="train", **kw) -> GradcheckReport:
    c = dims[1]
    state = T.BNState.fresh(c, np.float64)
    if mode == "infer":
        state.running_mean[...] = rng.standard_normal(c)
        state.running_var[...] = rng.uniform(0.5, 2.0, c)
        state.num_updates[...] = 1
    inputs = {
        "x": rng.standard_normal(dims) * 2 + 0.5,
        "gamma": rng.uniform(0.5, 1.5, c),
        "beta": rng.standard_normal(c),
    }
    fwd, bwd = _stateful(
        lambda x, gamma, beta: T.batchnorm(x, gamma, beta, state, mode), T.batchnorm_backward
    )
    return gradcheck(fwd, bwd, inputs, name=f"batchnorm[{mode}]", **kw)


def check_relu(rng, dims=(2, 3, 5, 5), **kw) -> GradcheckReport:
    # keep |x| > 0.1 so no probe crosses the kink
    x = rng.uniform(0.1, 2.0, dims) * rng.choice([-1.0, 1.0], dims)
    fwd, bwd = _stateful(lambda x: T.relu(x), T.relu_backward)
    return gradcheck(fwd, bwd, {"x": x}, name="relu", **kw)


def check_sigmoid(rng, dims=(2, 3, 5, 5), **kw) -> GradcheckReport:
    fwd, bwd = _stateful(lambda x: T.sigmoid(x), T.sigmoid_backward)
    return gradcheck(fwd, bwd, {"x": rng.standard_normal(dims) * 3}, name="sigmoid", **kw)


def check_mse(rng, dims=(2, 1, 6, 6), **kw) -> GradcheckReport:
    target = rng.standard_normal(dims)
    fwd, bwd = _stateful(lambda pred: T.mse(pred, target), T.mse_backward)
    return gradcheck(fwd, bwd, {"pred": rng.standard_normal(dims)}, name="mse", **kw)


def _random_dims(rng, even=False):
    n = int(rng.integers(1, 4))
    c = int(rng.integers(1, 4))
    h, w = (int(v) for v in rng.integers(2, 6, size=2))
    if even:
        h, w = 2 * h, 2 * w
    return n, c, h, w


def run_suite(seed: int = 0, randomize: bool = True) -> list[GradcheckReport]:
    """Finite-difference check of every differentiable op, optionally on random dims."""
    rng = np.random.default_rng(seed)
    reports = [check_conv2d(rng, seed=seed)]
    if randomize:
        reports.append(check_conv2d(rng, dims=_random_dims(rng), out_channels=int(rng.integers(1, 5)), seed=seed))
    reports.append(check_maxpool2(rng, seed=seed))
    if randomize:
        reports.append(check_maxpool2(rng, dims=_random_dims(rng, even=True), seed=seed))
    reports += [
        check_upsample(rng, dims=_random_dims(rng) if randomize else (2, 3, 4, 5), seed=seed),
        check_concat(rng, seed=seed),
        check_batchnorm(rng, seed=seed),
        check_batchnorm(rng, mode="infer", seed=seed),
        check_relu(rng, dims=_random_dims(rng) if randomize else (2, 3, 5, 5), seed=seed),
        check_sigmoid(rng, seed=seed),
        check_mse(rng, seed=seed),
    ]
    return reports


def adjoint_suite(seed: int = 0) -> dict[str, float]:
    """Inner-product identity <Lx, y> = <x, L^T y> for every linear op."""
    rng = np.random.default_rng(seed)
    out = {}

    x = rng.standard_normal((2, 3, 6, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    zero_b = np.zeros(4)

    def conv_x(v):
        return T.conv2d(v, T.ConvParams(w, zero_b))[0]

    def conv_x_t(g):
        _, cache = T.conv2d(x, T.ConvParams(w, zero_b))
        return T.conv2d_backward(cache, g)[0]

    out["conv2d[x]"] = adjoint_error(conv_x, conv_x_t, x, rng.standard_normal((2, 4, 6, 6)))

    def conv_w(v):
        return T.conv2d(x, T.ConvParams(v, zero_b))[0]

    def conv_w_t(g):
        _, cache = T.conv2d(x, T.ConvParams(w, zero_b))
        return T.conv2d_backward(cache, g)[1]

    out["conv2d[w]"] = adjoint_error(conv_w, conv_w_t, w, rng.standard_normal((2, 4, 6, 6)))

    u = rng.standard_normal((2, 3, 4, 5))

    def up_t(g):
        _, cache = T.upsample_nearest2(u)
        return T.upsample_nearest2_backward(cache, g)

    out["upsample_nearest2"] = adjoint_error(
        lambda v: T.upsample_nearest2(v)[0], up_t, u, rng.standard_normal((2, 3, 8, 10))
    )

    a, b = rng.standard_normal((2, 2, 4, 4)), rng.standard_normal((2, 3, 4, 4))

    def cat(v):
        return T.concat_channels(*v)[0]

    def cat_t(g):
        _, cache = T.concat_channels(a, b)
        return T.concat_channels_backward(cache, g)

    out["concat_channels"] = adjoint_error(cat, cat_t, (a, b), rng.standard_normal((2, 5, 4, 4)))
    return out
