"""Executable checks that frozen-A training is low-rank gradient compression.

Three facts are verified numerically rather than assumed:

  1. one SGD step on B changes the merged weight by exactly
     -eta * alpha^2 * A A^T dW (project dW onto rank r, lift back);
  2. E[A A^T] = r I when A has unit-variance normal entries, so the
     compression is unbiased up to the scalar r;
  3. however B is trained, the cumulative merged-weight change stays in
     the column space of the frozen A (residual at rounding level and
     numerical rank at most r).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import adapters, ops
from .adapters import AdaptedLinear, Mode
from .errors import DimensionError, ModeError
from .optim import SGDConfig, sgd_step
from .rng import RngState, randn

SUBSPACE_TINY = 1e-30  # residual denominator floor for the zero-update case


@dataclass
class CompressionTranscript:
    dw: np.ndarray            # d_in x d_out full gradient
    compressed: np.ndarray    # r x d_out, A^T dW
    decompressed: np.ndarray  # d_in x d_out, A A^T dW


@dataclass
class SubspaceReport:
    q: np.ndarray             # orthonormal basis of col(A), d_in x r
    residual: float           # ||dW - Q Q^T dW||_F / max(||dW||_F, tiny)
    numerical_rank: int


def compress_decompress(a: np.ndarray, dw: np.ndarray) -> CompressionTranscript:
    """Project a full weight gradient through A and lift it back."""
    if a.ndim != 2 or dw.ndim != 2 or a.shape[0] != dw.shape[0]:
        raise DimensionError(f"incompatible shapes A {a.shape}, dW {dw.shape}")
    compressed = a.T @ dw
    return CompressionTranscript(dw=dw, compressed=compressed, decompressed=a @ compressed)


def verify_sgd_equivalence(
    layer: AdaptedLinear, x: np.ndarray, dy: np.ndarray, eta: float
) -> float:
    """Max-abs gap between a real SGD step's merged-weight change and the identity.

    Asserted identity (the alpha^2 factor carries the adapter scale on both
    the forward branch and the B gradient):

        merged(after) - merged(before) = -eta * alpha^2 * A A^T dW,
        dW = X^T dY (batch and sequence folded).

    Both sides are computed through independent code paths: the left via
    adapters.forward/backward and optim.sgd_step on a cloned layer, the
    right directly from the inputs.
    """
    if layer.mode is not Mode.LORA_FA:
        raise ModeError("sgd equivalence is defined for frozen-A layers")
    work = layer.clone()
    before = adapters.merge(work)
    _, kept = adapters.forward(work, x)
    _, grads = adapters.backward(work, kept, dy)
    if eta != 0.0:  # eta = 0 is a legal degenerate probe: no step, zero change
        sgd_step({"b": work.b}, {"b": grads["b"]}, SGDConfig(eta=eta))
    after = adapters.merge(work)
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    dw = x2.T @ dy2
    predicted = -eta * layer.alpha**2 * (layer.a @ (layer.a.T @ dw))
    return float(np.max(np.abs((after - before) - predicted)))


def estimate_unbiasedness(d: int, r: int, num_samples: int, rng: RngState) -> float:
    """Relative Frobenius error of the Monte-Carlo mean of A A^T against r * I.

    Shrinks at the Monte-Carlo rate ~1/sqrt(num_samples); entries of A are
    unit-variance normals.
    """
    acc = np.zeros((d, d))
    chunk = max(1, min(num_samples, 20000))
    left = num_samples
    while left > 0:
        m = min(chunk, left)
        a = randn((m, d, r), rng)
        acc += np.einsum("mik,mjk->ij", a, a)
        left -= m
    mean = acc / num_samples
    target = r * np.eye(d)
    return float(np.linalg.norm(mean - target) / np.linalg.norm(target))


def subspace_check(a: np.ndarray, delta_w: np.ndarray) -> SubspaceReport:
    """How far delta_w sits from the column space of A, plus its numerical rank.

    A zero delta_w (e.g. before any update) reports residual 0 by
    definition; numerical rank uses the pivoted-QR diagonal rule with the
    repo-wide 1e-8 relative threshold.
    """
    q, _ = ops.qr(a)
    norm = float(np.linalg.norm(delta_w))
    if norm == 0.0:
        residual = 0.0
    else:
        off = delta_w - q @ (q.T @ delta_w)
        residual = float(np.linalg.norm(off) / max(norm, SUBSPACE_TINY))
    return SubspaceReport(
        q=q,
        residual=residual,
        numerical_rank=ops.numerical_rank(delta_w),
    )


def rbar(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """R @ B, the coefficients of delta_w's columns in the QR basis of A."""
    _, r_factor = ops.qr(a)
    return r_factor @ b
