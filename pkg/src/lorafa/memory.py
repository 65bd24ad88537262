"""Analytic memory accounting and the runtime activation meter.

Accounting follows the 16-bit mixed-precision convention: 2 bytes per
element regardless of the compute precision actually used, with n = 12 d^2 L
block-linear weight parameters and n_r = 18 d r L adapter parameters.
Per mode the trainable-state bytes (gradient, optimizer moments, master
copies, and for adapter modes the adapter weights themselves) are

    ft       14 n
    lora     16 n_r
    lora-fa   8 n_r
    frozen    0

and the linear-input activation bytes come in two flavors:

  * paper_constant: the standard closed forms 14 b s d L (ft),
    14 b s d L + 8 b s r L (lora), 8 b s r L (lora-fa);
  * per_layer_count: enumeration over the six block layers with
    query/key/value sharing one stored input, times 2 bytes.

For lora/lora-fa low-rank terms the two flavors disagree (4 b s r L versus
6 b s r L elements, the constant apparently counting four adapted layers
instead of six); reconcile() reports that delta instead of asserting it.
Everything outside linear inputs (attention, GeLU, layernorm, loss
softmax) is measured by the meter but excluded from analytic comparison.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .adapters import Mode
from .errors import ParameterError, ReconciliationError
from .model import ModelConfig, Tape, block_layer_specs

BYTES_PER_ELEMENT = 2  # accounting precision (16-bit), not compute precision


@dataclass
class Modifiers:
    """Analytic-only memory optimizations; defaults model plain 16-bit training."""

    weight_bits: int = 16
    num_shards: int = 1
    full_recompute: bool = False

    def __post_init__(self):
        if self.weight_bits not in (16, 8, 4):
            raise ParameterError(f"weight_bits must be 16, 8, or 4, got {self.weight_bits}")
        if self.num_shards < 1:
            raise ParameterError("num_shards must be >= 1")


@dataclass
class MemoryBreakdown:
    mode: str
    accounting_bytes_per_element: int
    weight_bytes: float
    trainable_state_bytes: float
    activation_bytes_linear: float
    activation_bytes_other: float
    recompute_flops_flag: bool = False

    @property
    def total_bytes(self) -> float:
        return (
            self.weight_bytes
            + self.trainable_state_bytes
            + self.activation_bytes_linear
            + self.activation_bytes_other
        )

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "accounting_bytes_per_element": self.accounting_bytes_per_element,
            "weight_bytes": self.weight_bytes,
            "trainable_state_bytes": self.trainable_state_bytes,
            "activation_bytes_linear": self.activation_bytes_linear,
            "activation_bytes_other": self.activation_bytes_other,
            "recompute_flops_flag": self.recompute_flops_flag,
            "total_bytes": self.total_bytes,
        }


def weight_param_count(config: ModelConfig) -> int:
    """Block-linear weight parameters; 12 d^2 L when d_ff = 4d."""
    per_block = sum(d_in * d_out for _, d_in, d_out, _ in block_layer_specs(config))
    return per_block * config.n_layers


def adapter_param_count(config: ModelConfig, rank: int) -> int:
    """A plus B elements across all adapted layers; 18 d r L when d_ff = 4d."""
    per_block = sum((d_in + d_out) * rank for _, d_in, d_out, _ in block_layer_specs(config))
    return per_block * config.n_layers


def analytic_linear_elements(
    config: ModelConfig, mode: Mode, rank: int, b: int, s: int
) -> dict[str, dict[str, int]]:
    """Per-layer retained linear-input elements, with q/k/v input deduplicated.

    Keys are block-qualified layer names; each value holds "full" and "low"
    element counts. This is the per_layer_count enumeration and is exactly
    what the runtime meter must reproduce.
    """
    out: dict[str, dict[str, int]] = {}
    for i in range(config.n_layers):
        for name, d_in, _d_out, shares_input in block_layer_specs(config):
            full = 0
            if mode.retains_full_input and not shares_input:
                full = b * s * d_in
            low = b * s * rank if mode.has_adapter else 0
            out[f"block{i}.{name}"] = {"full": full, "low": low}
    return out


def _paper_constant_elements(config: ModelConfig, mode: Mode, rank: int, b: int, s: int):
    """Quoted closed forms, in elements (bytes / 2): 7bsdL full, 4bsrL low."""
    bsL = b * s * config.n_layers
    if mode is Mode.FT:
        return 7 * bsL * config.d, 0
    if mode is Mode.LORA:
        return 7 * bsL * config.d, 4 * bsL * rank
    if mode is Mode.LORA_FA:
        return 0, 4 * bsL * rank
    return 0, 0


def analytic_report(
    config: ModelConfig,
    mode: Mode,
    rank: int,
    b: int,
    s: int,
    modifiers: Optional[Modifiers] = None,
    activation_model: str = "paper_constant",
) -> MemoryBreakdown:
    """Bytes by category for one (mode, geometry, batch) triple.

    Sharding and quantization apply to the frozen weight bytes only;
    adapter-related state is never sharded. full_recompute zeroes the
    linear activation term and flags that recompute flops would be paid.
    """
    if activation_model not in ("paper_constant", "per_layer_count"):
        raise ParameterError(f"unknown activation model {activation_model!r}")
    if not isinstance(mode, Mode):
        raise ParameterError(f"unknown mode {mode!r}")
    mods = modifiers or Modifiers()
    n = weight_param_count(config)
    n_r = adapter_param_count(config, rank)
    weight_bytes = 2.0 * n * (mods.weight_bits / 16.0) / mods.num_shards
    if mode is Mode.FT:
        state = 14.0 * n
    elif mode is Mode.LORA:
        state = 16.0 * n_r
    elif mode is Mode.LORA_FA:
        state = 8.0 * n_r
    else:
        state = 0.0
    if activation_model == "paper_constant":
        full, low = _paper_constant_elements(config, mode, rank, b, s)
    else:
        per_layer = analytic_linear_elements(config, mode, rank, b, s)
        full = sum(v["full"] for v in per_layer.values())
        low = sum(v["low"] for v in per_layer.values())
    act_linear = float((full + low) * BYTES_PER_ELEMENT)
    recompute = False
    if mods.full_recompute:
        act_linear = 0.0
        recompute = True
    return MemoryBreakdown(
        mode=mode.value,
        accounting_bytes_per_element=BYTES_PER_ELEMENT,
        weight_bytes=weight_bytes,
        trainable_state_bytes=state,
        activation_bytes_linear=act_linear,
        activation_bytes_other=0.0,
        recompute_flops_flag=recompute,
    )


@dataclass
class MeasuredActivations:
    """Distinct retained tensors from one forward tape, counted once each."""

    linear_full: int = 0
    linear_low: int = 0
    other: int = 0
    per_layer: dict[str, dict[str, int]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "linear_full_elements": self.linear_full,
            "linear_low_elements": self.linear_low,
            "other_elements": self.other,
            "per_layer": self.per_layer,
        }


def measured_activation_elements(tape: Tape) -> MeasuredActivations:
    """Count retained activation elements per category from a forward tape.

    A tensor referenced by several layers (the shared query/key/value
    input) is counted once, attributed to the first layer that retained it.
    """
    seen: set[int] = set()
    out = MeasuredActivations()
    for category, key, arr in tape.records:
        if id(arr) in seen:
            continue
        seen.add(id(arr))
        n = int(arr.size)
        if category == "linear_full":
            out.linear_full += n
            out.per_layer.setdefault(key, {"full": 0, "low": 0})["full"] += n
        elif category == "linear_low":
            out.linear_low += n
            out.per_layer.setdefault(key, {"full": 0, "low": 0})["low"] += n
        else:
            out.other += n
    return out


def reconcile(
    config: ModelConfig,
    mode: Mode,
    rank: int,
    measured: MeasuredActivations,
    b: int,
    s: int,
) -> dict:
    """Exactly match measured linear-input elements against the enumeration.

    Raises ReconciliationError with per-layer diffs on any mismatch. The
    paper-constant deltas are included informationally and never asserted.
    """
    analytic = analytic_linear_elements(config, mode, rank, b, s)
    diffs = []
    for key, expected in analytic.items():
        got = measured.per_layer.get(key, {"full": 0, "low": 0})
        if got != expected:
            diffs.append({"layer": key, "expected": expected, "measured": got})
    for key in measured.per_layer:
        if key not in analytic:
            diffs.append({"layer": key, "expected": None, "measured": measured.per_layer[key]})
    a_full = sum(v["full"] for v in analytic.values())
    a_low = sum(v["low"] for v in analytic.values())
    if diffs or a_full != measured.linear_full or a_low != measured.linear_low:
        raise ReconciliationError(f"activation reconciliation failed: {diffs}")
    pc_full, pc_low = _paper_constant_elements(config, mode, rank, b, s)
    return {
        "match": True,
        "linear_full_elements": a_full,
        "linear_low_elements": a_low,
        "paper_constant_delta": {
            "full": pc_full - a_full,
            "low": pc_low - a_low,
        },
    }
