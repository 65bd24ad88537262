"""Central finite-difference gradient checking.

The oracle is intentionally independent of the analytic backward rules: it
perturbs one input coordinate at a time with step 1e-6 * max(1, |x|) and
compares the directional derivative of a scalar probe against the vjp.
All checks run in float64; they are not meaningful in float32.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import ops
from .rng import RngState, randint, randn

FD_STEP = 1e-6
# Relative-error denominators are floored so that finite-difference noise on
# near-zero gradient entries does not register as spurious failure.
REL_FLOOR = 1e-4


def fd_gradient(f: Callable[[np.ndarray], float], x: np.ndarray) -> np.ndarray:
    """Central-difference gradient of scalar f at x, coordinate by coordinate."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        h = FD_STEP * max(1.0, abs(flat[i]))
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def rel_error(analytic: np.ndarray, fd: np.ndarray) -> float:
    """Max elementwise relative error with an absolute floor on the denominator."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), REL_FLOOR)
    return float(np.max(np.abs(analytic - fd) / denom))


@dataclass
class OpCheck:
    """One primitive's gradient-check case."""

    name: str
    sample: Callable[[RngState], tuple]          # draws the op's inputs
    forward: Callable[..., np.ndarray]
    vjp: Callable[..., Sequence[np.ndarray]]     # (inputs..., upstream) -> grads
    n_diff: int                                  # how many leading inputs are differentiable


def _check_one(case: OpCheck, rng: RngState) -> float:
    inputs = case.sample(rng)
    out = case.forward(*inputs)
    upstream = randn(out.shape, rng)
    grads = case.vjp(*inputs, upstream)
    if isinstance(grads, np.ndarray):
        grads = (grads,)
    worst = 0.0
    for idx in range(case.n_diff):
        def probe(x, _idx=idx):
            args = list(inputs)
            args[_idx] = x
            return float(np.sum(case.forward(*args) * upstream))

        fd = fd_gradient(probe, np.array(inputs[idx], dtype=np.float64, copy=True))
        worst = max(worst, rel_error(np.asarray(grads[idx], dtype=np.float64), fd))
    return worst


def primitive_checks() -> list[OpCheck]:
    """The table of primitives covered by the gradient oracle."""

    def sample_matmul(rng: RngState):
        m, k, n = (int(v) for v in randint(rng, 2, 6, (3,)))
        return randn((m, k), rng), randn((k, n), rng)

    def sample_matmul_batched(rng: RngState):
        b, s, k, n = (int(v) for v in randint(rng, 2, 5, (4,)))
        return randn((b, s, k), rng), randn((k, n), rng)

    def sample_add(rng: RngState):
        m, n = (int(v) for v in randint(rng, 2, 6, (2,)))
        return randn((m, n), rng), randn((m, n), rng)

    def sample_add_broadcast(rng: RngState):
        m, n = (int(v) for v in randint(rng, 2, 6, (2,)))
        return randn((m, n), rng), randn((n,), rng)

    def sample_gelu(rng: RngState):
        m, n = (int(v) for v in randint(rng, 2, 6, (2,)))
        return (randn((m, n), rng),)

    def sample_softmax(rng: RngState):
        m, n = (int(v) for v in randint(rng, 2, 6, (2,)))
        return (randn((m, n), rng),)

    def sample_layer_norm(rng: RngState):
        m, n = (int(v) for v in randint(rng, 2, 6, (2,)))
        return randn((m, n), rng), randn((n,), rng), randn((n,), rng)

    def softmax_vjp_from_input(x, upstream):
        return ops.softmax_rows_vjp(ops.softmax_rows(x), upstream)

    def layer_norm_fwd(x, gamma, beta):
        return ops.layer_norm(x, gamma, beta)[0]

    def layer_norm_vjp_from_input(x, gamma, beta, upstream):
        _, x_hat, inv_std = ops.layer_norm(x, gamma, beta)
        return ops.layer_norm_vjp(x_hat, inv_std, gamma, upstream)

    return [
        OpCheck("matmul", sample_matmul, ops.matmul,
                lambda a, b, u: ops.matmul_vjp(a, b, u), 2),
        OpCheck("matmul_batched", sample_matmul_batched, ops.matmul,
                lambda a, b, u: ops.matmul_vjp(a, b, u), 2),
        OpCheck("add", sample_add, ops.add,
                lambda a, b, u: ops.add_vjp(a, b, u), 2),
        OpCheck("add_broadcast", sample_add_broadcast, ops.add,
                lambda a, b, u: ops.add_vjp(a, b, u), 2),
        OpCheck("gelu", sample_gelu, ops.gelu,
                lambda x, u: ops.gelu_vjp(x, u), 1),
        OpCheck("softmax_rows", sample_softmax, ops.softmax_rows,
                softmax_vjp_from_input, 1),
        OpCheck("layer_norm", sample_layer_norm, layer_norm_fwd,
                layer_norm_vjp_from_input, 3),
    ]


def check_primitives(seed: int = 0, trials: int = 20) -> dict[str, float]:
    """Worst relative error per primitive over ``trials`` random shapes."""
    results: dict[str, float] = {}
    for case in primitive_checks():
        rng = RngState(seed)
        worst = 0.0
        for _ in range(trials):
            worst = max(worst, _check_one(case, rng))
        results[case.name] = worst
    return results


def check_adapter_layer(mode, seed: int = 0, trials: int = 5) -> float:
    """FD-check every gradient an adapted layer emits, via loss = 0.5 ||y||^2."""
    from . import adapters

    rng = RngState(seed)
    worst = 0.0
    for _ in range(trials):
        d_in, d_out, r = (int(v) for v in randint(rng, 2, 7, (3,)))
        r = min(r, d_in, d_out)
        layer = adapters.init_adapter(d_in, d_out, r, None, mode, rng)
        if layer.b is not None:
            # zero B hides the adapter branch from the loss; give it signal
            layer.b[:] = randn(layer.b.shape, rng)
        x = randn((2, 3, d_in), rng)

        def loss_of(layer_):
            y, _ = adapters.forward(layer_, x)
            return 0.5 * float(np.sum(y * y))

        y, kept = adapters.forward(layer, x)
        _, grads = adapters.backward(layer, kept, y.copy())
        tensors = {"w": layer.w, "a": layer.a, "b": layer.b}
        for name, analytic in grads.items():
            def probe(t, _name=name):
                saved = tensors[_name].copy()
                tensors[_name][...] = t
                try:
                    return loss_of(layer)
                finally:
                    tensors[_name][...] = saved

            fd = fd_gradient(probe, tensors[name].copy())
            worst = max(worst, rel_error(analytic, fd))
    return worst


def check_tiny_model(mode, seed: int = 0, d: int = 8, n_layers: int = 1, vocab: int = 11) -> float:
    """FD-check the full backward pass of a tiny transformer against its loss."""
    from .model import ModelConfig, backward, build_model, forward_loss, trainable_params
    from .rng import derive

    rng = RngState(seed)
    config = ModelConfig(
        d=d, n_layers=n_layers, n_heads=2, vocab=vocab, seq_len=6, batch_size=2
    )
    m = build_model(config, mode, rank=2, alpha=0.5, rng=rng)
    data_rng = derive(rng, "gradcheck-data")
    tokens = randint(data_rng, 0, vocab, (2, 6))
    targets = randint(data_rng, 0, vocab, (2, 6))
    targets[0, 0] = -1  # exercise the ignore mask
    params = trainable_params(m)
    if mode.has_adapter:
        # B starts at zero, which zeroes dA in lora mode; perturb so every
        # gradient path carries signal.
        for name, p in params.items():
            if name.endswith(".b"):
                p[:] = 0.1 * randn(p.shape, data_rng)
    _, tape = forward_loss(m, tokens, targets)
    grads = backward(m, tape)
    worst = 0.0
    for name, p in params.items():
        def probe(t, _p=p):
            saved = _p.copy()
            _p[...] = t
            try:
                return forward_loss(m, tokens, targets)[0]
            finally:
                _p[...] = saved

        fd = fd_gradient(probe, p.copy())
        worst = max(worst, rel_error(grads[name], fd))
    return worst
