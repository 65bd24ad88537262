"""Primitive tensor operations and their reverse-mode (vjp) rules.

Values are plain numpy arrays in float64 or float32; every operation
validates shapes up front and checks its output for NaN/Inf, which is
treated as an error state rather than a value. Backward rules are paired
functions taking exactly the tensors the forward pass retained; the
``vjp`` dispatcher exposes them uniformly for the gradient-check harness.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, NumericsError, ParameterError

# GeLU uses the tanh approximation throughout so forward and backward share
# one canonical formula.
_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715

# Relative threshold on pivoted-QR diagonals when counting numerical rank.
RANK_REL_TOL = 1e-8


def ensure_finite(x: np.ndarray, what: str = "result") -> np.ndarray:
    # sum() is NaN/Inf-propagating and cheaper than isfinite().all(); float64
    # headroom makes spurious overflow of the sum itself a non-issue here.
    if not np.isfinite(np.sum(x)):
        raise NumericsError(f"{what} contains NaN or Inf")
    return x


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product; leading dimensions of ``a`` are treated as batch."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must have at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul inner extents differ: {a.shape} x {b.shape}"
        )
    return ensure_finite(a @ b, "matmul")


def matmul_vjp(a: np.ndarray, b: np.ndarray, upstream: np.ndarray):
    """d(a @ b): da = upstream @ b^T, db = a^T @ upstream.

    Batched leading dimensions are folded into db (the weight operand is
    2-d in every layer of this repo).
    """
    da = upstream @ np.swapaxes(b, -1, -2)
    if a.ndim > 2 and b.ndim == 2:
        a2 = a.reshape(-1, a.shape[-1])
        u2 = upstream.reshape(-1, upstream.shape[-1])
        db = a2.T @ u2
    else:
        db = np.swapaxes(a, -1, -2) @ upstream
    return ensure_finite(da, "matmul vjp"), ensure_finite(db, "matmul vjp")


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    try:
        out = a + b
    except ValueError as exc:
        raise DimensionError(f"add shapes not broadcastable: {a.shape} + {b.shape}") from exc
    return ensure_finite(out, "add")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add_vjp(a: np.ndarray, b: np.ndarray, upstream: np.ndarray):
    return _unbroadcast(upstream, a.shape), _unbroadcast(upstream, b.shape)


def scale(x: np.ndarray, c: float) -> np.ndarray:
    return ensure_finite(c * x, "scale")


def scale_vjp(c: float, upstream: np.ndarray) -> np.ndarray:
    return c * upstream


def elementwise(kind: str, *args):
    """Named elementwise dispatch: kind is one of add, scale, gelu."""
    table = {"add": add, "scale": scale, "gelu": gelu}
    if kind not in table:
        raise DimensionError(f"unknown elementwise kind {kind!r}")
    return table[kind](*args)


def gelu(x: np.ndarray) -> np.ndarray:
    """GeLU, tanh approximation: 0.5 x (1 + tanh(c (x + a x^3)))."""
    x2 = x * x
    t = np.tanh(_GELU_C * (x + _GELU_A * (x2 * x)))
    t += 1.0
    t *= 0.5 * x
    return ensure_finite(t, "gelu")


def gelu_vjp(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    x2 = x * x
    t = np.tanh(_GELU_C * (x + _GELU_A * (x2 * x)))
    # d/dx [0.5 x (1+t)] = 0.5 (1+t) + 0.5 x (1-t^2) * c (1 + 3a x^2)
    grad = 0.5 * (1.0 + t) + (0.5 * _GELU_C) * x * (1.0 - t * t) * (1.0 + 3.0 * _GELU_A * x2)
    grad *= upstream
    return ensure_finite(grad, "gelu vjp")


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax over the last dimension, max-subtracted for stability.

    -Inf entries are permitted in the input (attention masking) as long as
    each row keeps at least one finite entry; the output is always finite.
    """
    if x.shape[-1] < 1:
        raise DimensionError("softmax_rows needs a non-empty last dimension")
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    out = e / np.sum(e, axis=-1, keepdims=True)
    return ensure_finite(out, "softmax_rows")


def softmax_rows_vjp(probs: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    dot = np.sum(upstream * probs, axis=-1, keepdims=True)
    return ensure_finite(probs * (upstream - dot), "softmax_rows vjp")


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5):
    """Normalize rows (last dim) to mean 0 / variance 1, then affine.

    Returns (y, x_hat, inv_std); the latter two are what backward needs.
    """
    if x.shape[-1] < 1:
        raise DimensionError("layer_norm needs a non-empty last dimension")
    if not eps > 0:
        raise ParameterError("layer_norm eps must be positive")
    mean = np.mean(x, axis=-1, keepdims=True)
    var = np.mean((x - mean) ** 2, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x - mean) * inv_std
    y = ensure_finite(gamma * x_hat + beta, "layer_norm")
    return y, x_hat, inv_std


def layer_norm_vjp(
    x_hat: np.ndarray,
    inv_std: np.ndarray,
    gamma: np.ndarray,
    upstream: np.ndarray,
):
    """Gradients (dx, dgamma, dbeta) for layer_norm."""
    dxhat = upstream * gamma
    dx = inv_std * (
        dxhat
        - np.mean(dxhat, axis=-1, keepdims=True)
        - x_hat * np.mean(dxhat * x_hat, axis=-1, keepdims=True)
    )
    axes = tuple(range(x_hat.ndim - 1))
    dgamma = np.sum(upstream * x_hat, axis=axes)
    dbeta = np.sum(upstream, axis=axes)
    return ensure_finite(dx, "layer_norm vjp"), dgamma, dbeta


def vjp(kind: str, saved: tuple, upstream: np.ndarray):
    """Uniform dispatch over the primitive backward rules.

    ``saved`` must be exactly the tensors the forward pass retained for
    ``kind``; see the individual *_vjp functions for each signature.
    """
    table = {
        "matmul": lambda: matmul_vjp(*saved, upstream),
        "add": lambda: add_vjp(*saved, upstream),
        "scale": lambda: scale_vjp(*saved, upstream),
        "gelu": lambda: gelu_vjp(*saved, upstream),
        "softmax_rows": lambda: softmax_rows_vjp(*saved, upstream),
        "layer_norm": lambda: layer_norm_vjp(*saved, upstream),
    }
    if kind not in table:
        raise DimensionError(f"unknown op kind {kind!r}")
    return table[kind]()


def _apply_reflector(v: np.ndarray, block: np.ndarray) -> None:
    block -= 2.0 * np.outer(v, v @ block)


def qr(m: np.ndarray):
    """Reduced Householder QR of a d x r matrix (d >= r): m = q @ rr.

    q is d x r with orthonormal columns, rr is r x r upper-triangular.
    Rank-deficient input is allowed; it shows up as near-zero diagonal
    entries of rr for the caller to inspect.
    """
    if m.ndim != 2:
        raise DimensionError("qr expects a matrix")
    d, r = m.shape
    if d < r:
        raise DimensionError(f"qr expects d >= r, got {d} x {r}")
    R = np.array(m, dtype=np.float64, copy=True)
    vs: list[np.ndarray] = []
    for j in range(r):
        x = R[j:, j]
        normx = np.linalg.norm(x)
        v = x.copy()
        if normx > 0.0:
            v[0] += (1.0 if x[0] >= 0 else -1.0) * normx
            vnorm = np.linalg.norm(v)
            if vnorm > 0.0:
                v /= vnorm
                _apply_reflector(v, R[j:, j:])
            else:
                v[:] = 0.0
        else:
            v[:] = 0.0
        vs.append(v)
    rr = np.triu(R[:r, :])
    q = np.eye(d, r)
    for j in reversed(range(r)):
        _apply_reflector(vs[j], q[j:, :])
    return ensure_finite(q, "qr"), ensure_finite(rr, "qr")


def qr_pivoted(m: np.ndarray):
    """Column-pivoted Householder QR: m[:, perm] = q @ rr.

    Pivoting on the largest remaining column norm makes |diag(rr)|
    non-increasing, which is what makes the diagonal a reliable rank
    detector.
    """
    if m.ndim != 2:
        raise DimensionError("qr_pivoted expects a matrix")
    d, n = m.shape
    k = min(d, n)
    R = np.array(m, dtype=np.float64, copy=True)
    perm = np.arange(n)
    vs: list[np.ndarray] = []
    for j in range(k):
        norms = np.linalg.norm(R[j:, j:], axis=0)
        p = j + int(np.argmax(norms))
        if p != j:
            R[:, [j, p]] = R[:, [p, j]]
            perm[[j, p]] = perm[[p, j]]
        x = R[j:, j]
        normx = np.linalg.norm(x)
        v = x.copy()
        if normx > 0.0:
            v[0] += (1.0 if x[0] >= 0 else -1.0) * normx
            vnorm = np.linalg.norm(v)
            if vnorm > 0.0:
                v /= vnorm
                _apply_reflector(v, R[j:, j:])
            else:
                v[:] = 0.0
        else:
            v[:] = 0.0
        vs.append(v)
    rr = np.triu(R[:k, :])
    q = np.eye(d, k)
    for j in reversed(range(k)):
        _apply_reflector(vs[j], q[j:, :])
    return ensure_finite(q, "qr_pivoted"), ensure_finite(rr, "qr_pivoted"), perm


def numerical_rank(m: np.ndarray, rel_tol: float = RANK_REL_TOL) -> int:
    """Count pivoted-QR diagonal entries above rel_tol * ||m||_F."""
    scale_f = np.linalg.norm(m)
    if scale_f == 0.0:
        return 0
    _, rr, _ = qr_pivoted(m)
    diag = np.abs(np.diag(rr))
    return int(np.sum(diag > rel_tol * scale_f))
