"""Central-difference gradient checking for functions built on :mod:`hse.tensor`."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import NumericError, Tensor


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    n_probes: int
    worst: tuple[int, tuple[int, ...]] | None = None
    details: dict = field(default_factory=dict)


def _scalarize(out: Tensor, projection: np.ndarray | None) -> Tensor:
    if out.data.size == 1:
        return T.reshape(out, ())
    return T.sum(T.mul(out, Tensor(projection, dtype=out.dtype)))


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5,
               tol: float = 1e-4, seed: int = 0, floor: float = 1e-3,
               max_probes: int | None = None, retry_kinks: bool = True) -> GradCheckReport:
    """Compare analytic gradients of ``fn(*inputs)`` with central differences.

    Multi-element outputs are reduced to a scalar by a fixed random projection.
    Each coordinate ``x`` is probed with step ``h * max(1, |x|)``. The error of
    one coordinate is ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``;
    the check passes when the largest error is below ``tol``.

    Only inputs with ``requires_grad`` are probed. ``max_probes`` caps the
    number of probed coordinates per input (chosen by ``seed``).

    A central difference is wrong when the step straddles a kink (a ReLU input
    near zero). With ``retry_kinks`` a failing coordinate is probed again with
    steps 10x and 100x smaller before it counts as an error; the number of
    such coordinates is reported in ``details["refined"]``.
    """
    inputs = list(inputs)
    for x in inputs:
        if x.dtype != np.float64:
            raise TypeError("grad_check requires float64 inputs")
    rng = np.random.default_rng(seed)
    with T.no_grad():
        ref = fn(*inputs)
    projection = None if ref.data.size == 1 else rng.standard_normal(ref.shape)

    for x in inputs:
        x.zero_grad()
    out = _scalarize(fn(*inputs), projection)
    out.check_finite()
    T.backward(out)

    def probe() -> float:
        with T.no_grad():
            val = _scalarize(fn(*inputs), projection)
        if not val.is_finite():
            raise NumericError("non-finite value while probing")
        return float(val.data)

    refine = (1.0, 0.1, 0.01) if retry_kinks else (1.0,)
    worst_err, worst_at, n_probes, refined = 0.0, None, 0, 0
    for k, x in enumerate(inputs):
        if not x.requires_grad:
            continue
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad
        x.data = np.ascontiguousarray(x.data)
        flat = x.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_probes is not None and flat.size > max_probes:
            coords = np.sort(rng.choice(flat.size, size=max_probes, replace=False))
        for j in coords:
            orig = flat[j]
            a = analytic.reshape(-1)[j]
            err = np.inf
            for attempt, scale in enumerate(refine):
                step = h * scale * max(1.0, abs(orig))
                flat[j] = orig + step
                f_plus = probe()
                flat[j] = orig - step
                f_minus = probe()
                flat[j] = orig
                numeric = (f_plus - f_minus) / (2 * step)
                err = min(err, abs(a - numeric) / max(abs(a), abs(numeric), floor))
                if err < tol:
                    refined += attempt > 0
                    break
            n_probes += 1
            if worst_at is None or err > worst_err:
                worst_err = err
                worst_at = (k, tuple(int(i) for i in np.unravel_index(j, x.shape)))
    for x in inputs:
        x.zero_grad()
    return GradCheckReport(max_rel_err=float(worst_err), passed=worst_err < tol,
                           n_probes=n_probes, worst=worst_at, details={"refined": refined})


# -- the standard suite ------------------------------------------------------------

def _toy_network(detach_guidance: bool, seed: int = 0):
    from .model import HSENetwork, ModelConfig
    from .taxonomy import Taxonomy

    parents = [[0, 0, 1], [0, 1, 1, 2, 2, 2]]
    sizes = (2, 3, 6)
    names = [[f"l{lvl}_{k}" for k in range(n)] for lvl, n in enumerate(sizes, 1)]
    tax = Taxonomy.from_parents(names, parents)
    cfg = ModelConfig(level_sizes=tax.level_sizes, trunk_widths=(4, 6), feature_dim=8,
                      semantic_dim=5, attention_hidden=6, detach_guidance=detach_guidance,
                      dtype="float64")
    return HSENetwork(cfg, tax, seed=seed), tax


def toy_hse_objective(detach_guidance: bool = False, seed: int = 0):
    """A float64 toy network (3 levels, 8 feature channels, 4x4 grid) and its summed loss.

    Returns ``(fn, inputs)`` ready for :func:`grad_check`: ``fn`` evaluates the
    sum of every level objective on a fixed batch; ``inputs`` are the parameters.
    """
    from .training import level_objective

    net, tax = _toy_network(detach_guidance, seed)
    rng = np.random.default_rng(seed + 1)
    images = Tensor(rng.standard_normal((2, 3, 16, 16)))
    leaves = np.array([1, 5])
    labels = np.stack([[tax.parent_map(2)[tax.parent_map(3)[k]], tax.parent_map(3)[k], k] for k in leaves])

    def fn(*_params):
        scores = net.forward(images)
        total = None
        for level in range(1, 4):
            loss, _, _ = level_objective(net, scores, labels, level)
            total = loss if total is None else total + loss
        return total

    return fn, list(net.params.values())


def _primitive_cases(rng) -> dict[str, tuple[Callable, list[Tensor]]]:
    from .losses import cross_entropy, kl_regularizer
    from .model import attend_aggregate, normalize_attention

    def t(*shape, positive=False, away_from_zero=False):
        x = rng.standard_normal(shape)
        if positive:
            x = np.abs(x) + 0.5
        if away_from_zero:
            x = np.where(np.abs(x) < 0.1, x + np.sign(x + 1e-9) * 0.2, x)
        return Tensor(x, requires_grad=True)

    idx = np.array([2, 0, 2, 1])
    target = np.array([0, 3, 1])
    return {
        "add": (T.add, [t(3, 4), t(4)]),
        "sub": (T.sub, [t(3, 4), t(3, 1)]),
        "mul": (T.mul, [t(3, 4), t(1, 4)]),
        "div": (T.div, [t(3, 4), t(3, 4, positive=True)]),
        "neg": (T.neg, [t(5)]),
        "power": (lambda a: T.power(a, 3.0), [t(2, 3)]),
        "exp": (T.exp, [t(2, 3)]),
        "log": (T.log, [t(2, 3, positive=True)]),
        "relu": (T.relu, [t(3, 5, away_from_zero=True)]),
        "tanh": (T.tanh, [t(3, 5)]),
        "sum": (lambda a: T.sum(a, axis=1), [t(3, 4)]),
        "mean": (lambda a: T.mean(a, axis=(0, 2), keepdims=True), [t(2, 3, 4)]),
        "reshape": (lambda a: T.reshape(a, (4, 3)), [t(3, 4)]),
        "transpose": (lambda a: T.transpose(a, (2, 0, 1)), [t(2, 3, 4)]),
        "broadcast_to": (lambda a: T.broadcast_to(a, (3, 2, 4)), [t(2, 1)]),
        "concat": (lambda a, b: T.concat([a, b], axis=1), [t(2, 3), t(2, 2)]),
        "take": (lambda a: T.take(a, idx), [t(4, 3)]),
        "index_select": (lambda a: T.index_select(a, idx, axis=1), [t(2, 3)]),
        "softmax": (lambda a: T.softmax(a, axis=-1), [t(3, 5)]),
        "log_softmax": (lambda a: T.log_softmax(a, axis=-1), [t(3, 5)]),
        "matmul": (T.matmul, [t(3, 4), t(4, 2)]),
        "linear": (T.linear, [t(3, 4), t(2, 4), t(2)]),
        "conv2d": (lambda x, w, b: T.conv2d(x, w, b, stride=1, pad=1), [t(2, 2, 5, 5), t(3, 2, 3, 3), t(3)]),
        "conv2d_stride2": (lambda x, w: T.conv2d(x, w, None, stride=2, pad=0), [t(1, 2, 6, 6), t(2, 2, 3, 3)]),
        "avg_pool2d": (lambda x: T.avg_pool2d(x, 2), [t(2, 3, 4, 6)]),
        "global_avg_pool": (T.global_avg_pool, [t(2, 3, 4, 4)]),
        "cross_entropy": (lambda s: cross_entropy(s, target), [t(3, 4)]),
        "kl_regularizer": (lambda p, s: kl_regularizer(p, s, 4.0, detach_target=False), [t(3, 6), t(3, 6)]),
        "kl_regularizer_detached": (lambda p, s: kl_regularizer(p, s, 4.0),
                                    [Tensor(rng.standard_normal((3, 6))), t(3, 6)]),
        "normalize_attention": (normalize_attention, [t(2, 3, 4, 4)]),
        "attend_aggregate": (attend_aggregate, [t(2, 3, 4, 4), t(2, 3, 4, 4)]),
    }


def gradient_suite(seed: int = 0, tol: float = 1e-4, include_model: bool = True
                   ) -> list[tuple[str, GradCheckReport]]:
    """Check every differentiable primitive and the toy network at float64."""
    rng = np.random.default_rng(seed)
    results = [(name, grad_check(fn, inputs, tol=tol, seed=seed))
               for name, (fn, inputs) in _primitive_cases(rng).items()]
    if include_model:
        # with detached guidance the objective is not the function being
        # differentiated, so only the undetached graph can be checked numerically
        fn, inputs = toy_hse_objective(detach_guidance=False, seed=seed)
        results.append(("toy_hse", grad_check(fn, inputs, tol=tol, seed=seed)))
    return results
