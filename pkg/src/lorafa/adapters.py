"""Linear layers with four adaptation modes and mode-dependent activation retention.

The mode fixes three things at once: which parameters train, which
gradients exist, and which forward activations the layer is allowed to
keep for backward.

    mode     trains        retains for backward        gradients
    ft       W             x (full width)              dW
    lora     A, B          x and x@A                   dA, dB
    lora-fa  B             x@A only                    dB
    frozen   nothing       nothing                     none

With frozen A the layer never stores the full-width input: a layer whose
input dimension is d keeps only the rank-r projection, shrinking retained
elements per token from d to r. Retention is structural, not advisory;
asking a frozen-A layer for its full input raises RetentionPolicyError.
"""

from __future__ import annotations

from enum import Enum
from typing import Optional

import numpy as np

from .errors import DimensionError, ModeError, ParameterError, RetentionPolicyError
from .ops import ensure_finite, matmul
from .rng import RngState, randn


class Mode(str, Enum):
    FT = "ft"
    LORA = "lora"
    LORA_FA = "lora-fa"
    FROZEN = "frozen"

    @property
    def has_adapter(self) -> bool:
        return self in (Mode.LORA, Mode.LORA_FA)

    @property
    def retains_full_input(self) -> bool:
        return self in (Mode.FT, Mode.LORA)


class RetainedActivations:
    """What one layer's forward pass kept for its backward pass.

    Fields are only reachable through accessors that raise
    RetentionPolicyError when the mode's policy did not retain them, so a
    backward implementation physically cannot touch the full input of a
    frozen-A layer.
    """

    __slots__ = ("_x_full", "_x_low")

    def __init__(self, x_full: Optional[np.ndarray], x_low: Optional[np.ndarray]):
        self._x_full = x_full
        self._x_low = x_low

    @property
    def has_x_full(self) -> bool:
        return self._x_full is not None

    @property
    def has_x_low(self) -> bool:
        return self._x_low is not None

    @property
    def x_full(self) -> np.ndarray:
        if self._x_full is None:
            raise RetentionPolicyError(
                "full-width input was not retained under this adaptation mode"
            )
        return self._x_full

    @property
    def x_low(self) -> np.ndarray:
        if self._x_low is None:
            raise RetentionPolicyError("low-rank input was not retained (no adapter)")
        return self._x_low


class AdaptedLinear:
    """A d_in x d_out linear map with an optional low-rank adapter branch.

    y = x @ W + alpha * (x @ A) @ B  when an adapter is present, else x @ W.
    Bias terms are omitted. A is d_in x r (projection down), B is r x d_out
    (projection up); alpha defaults to 1/r.
    """

    def __init__(
        self,
        w: np.ndarray,
        a: Optional[np.ndarray],
        b: Optional[np.ndarray],
        rank: int,
        alpha: float,
        mode: Mode,
    ):
        self.w = w
        self.a = a
        self.b = b
        self.rank = rank
        self.alpha = alpha
        self.mode = mode

    @property
    def d_in(self) -> int:
        return self.w.shape[0]

    @property
    def d_out(self) -> int:
        return self.w.shape[1]

    def clone(self) -> "AdaptedLinear":
        return AdaptedLinear(
            self.w.copy(),
            None if self.a is None else self.a.copy(),
            None if self.b is None else self.b.copy(),
            self.rank,
            self.alpha,
            self.mode,
        )


def init_adapter(
    d_in: int,
    d_out: int,
    rank: int,
    alpha: Optional[float],
    mode: Mode,
    rng: RngState,
    a_std: float = 1.0,
    w: Optional[np.ndarray] = None,
    w_std: Optional[float] = None,
) -> AdaptedLinear:
    """Build a layer: W supplied or sampled as a pretrained stand-in, A normal, B zero.

    a_std defaults to 1.0 (unit-variance entries) so that E[A A^T] = rank * I
    holds exactly; pass a_std=1/sqrt(d_in) for classic fan-in scaling. W
    defaults to std 1/sqrt(d_in) when sampled here.
    """
    if rank < 1:
        raise ParameterError(f"rank must be >= 1, got {rank}")
    if mode.has_adapter and rank > min(d_in, d_out):
        raise ParameterError(
            f"rank {rank} exceeds min(d_in, d_out) = {min(d_in, d_out)}"
        )
    if not a_std > 0:
        raise ParameterError(f"a_std must be positive, got {a_std}")
    if alpha is None:
        alpha = 1.0 / rank
    if not alpha > 0:
        raise ParameterError(f"alpha must be positive, got {alpha}")
    if w is None:
        w = randn((d_in, d_out), rng, std=w_std if w_std is not None else 1.0 / np.sqrt(d_in))
    elif w.shape != (d_in, d_out):
        raise DimensionError(f"w has shape {w.shape}, expected {(d_in, d_out)}")
    a = b = None
    if mode.has_adapter:
        a = randn((d_in, rank), rng, std=a_std)
        b = np.zeros((rank, d_out))
    return AdaptedLinear(w, a, b, rank, alpha, mode)


def forward(layer: AdaptedLinear, x: np.ndarray):
    """Apply the layer; returns (y, kept) with retention fixed by the mode."""
    if x.shape[-1] != layer.d_in:
        raise DimensionError(
            f"input trailing extent {x.shape[-1]} != d_in {layer.d_in}"
        )
    y = matmul(x, layer.w)
    x_low = None
    if layer.mode.has_adapter:
        x_low = matmul(x, layer.a)
        y = ensure_finite(y + layer.alpha * matmul(x_low, layer.b), "adapter forward")
    kept = RetainedActivations(
        x_full=x if layer.mode.retains_full_input else None,
        x_low=x_low,
    )
    return y, kept


def _fold(x: np.ndarray) -> np.ndarray:
    """Collapse batch and sequence dims ahead of the gradient outer products."""
    return x.reshape(-1, x.shape[-1])


def backward(layer: AdaptedLinear, kept: RetainedActivations, dy: np.ndarray):
    """Input gradient plus exactly the mode's trainable-parameter gradients.

    dx = dy @ W^T + alpha * (dy @ B^T) @ A^T. Parameter gradients fold the
    leading dims without averaging (loss normalization owns averaging):
      ft:      dW = x^T dy
      lora:    dA = alpha * x^T (dy B^T),  dB = alpha * (x A)^T dy
      lora-fa: dB only, computed from the retained x@A; the full input is
               never touched (and is not there to touch).
    """
    if dy.shape[-1] != layer.d_out:
        raise DimensionError(
            f"upstream trailing extent {dy.shape[-1]} != d_out {layer.d_out}"
        )
    dx = matmul(dy, layer.w.T)
    if layer.mode.has_adapter:
        dx = ensure_finite(
            dx + layer.alpha * matmul(matmul(dy, layer.b.T), layer.a.T),
            "adapter backward",
        )
    grads: dict[str, np.ndarray] = {}
    dy2 = _fold(dy)
    if layer.mode is Mode.FT:
        grads["w"] = _fold(kept.x_full).T @ dy2
    elif layer.mode is Mode.LORA:
        grads["a"] = layer.alpha * (_fold(kept.x_full).T @ (dy2 @ layer.b.T))
        grads["b"] = layer.alpha * (_fold(kept.x_low).T @ dy2)
    elif layer.mode is Mode.LORA_FA:
        grads["b"] = layer.alpha * (_fold(kept.x_low).T @ dy2)
    for g in grads.values():
        ensure_finite(g, "adapter backward")
    return dx, grads


def merge(layer: AdaptedLinear) -> np.ndarray:
    """Fold the adapter into a dense weight: W + alpha * A @ B. Pure."""
    if not layer.mode.has_adapter:
        raise ModeError(f"merge requires an adapter mode, layer is {layer.mode.value}")
    return ensure_finite(layer.w + layer.alpha * (layer.a @ layer.b), "merge")


def retained_elements(layer: AdaptedLinear, b: int, s: int) -> int:
    """Retained activation elements for one (batch, seq) forward of this layer.

    Shared-input deduplication across layers (query/key/value) is handled
    one level up, in the memory model.
    """
    n = 0
    if layer.mode.retains_full_input:
        n += b * s * layer.d_in
    if layer.mode.has_adapter:
        n += b * s * layer.rank
    return n
