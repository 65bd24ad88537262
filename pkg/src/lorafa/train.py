"""Training runs, sweeps, and their serialized reports."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import adapters, memory, optim
from .adapters import Mode
from .equivalence import subspace_check
from .errors import LorafaError, NumericsError, ParameterError
from .model import ModelConfig, TransformerModel, backward, build_model, count_trainable, forward_loss, trainable_params
from .rng import RngState, derive
from .serialize import SCHEMA_VERSION, dumps_canonical
from .tasks import Dataset, gen_task

SUBSPACE_PASS_THRESHOLD = 1e-8


@dataclass
class RunConfig:
    model: ModelConfig
    mode: Mode
    rank: int = 8
    alpha: Optional[float] = None
    optimizer: str = "adamw"
    lr: float = 1e-3
    weight_decay: float = 0.0
    steps: int = 100
    seed: int = 0
    task: str = "copy"
    n_examples: int = 256
    warmup_steps: int = 0
    equiv_every: int = 0
    report_path: Optional[str] = None

    def __post_init__(self):
        if self.optimizer not in ("adamw", "sgd"):
            raise ParameterError(f"optimizer must be adamw or sgd, got {self.optimizer!r}")
        if self.steps < 0:
            raise ParameterError("steps must be >= 0")
        if not self.lr > 0:
            raise ParameterError("lr must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        return d

    @staticmethod
    def from_dict(d: dict) -> "RunConfig":
        d = dict(d)
        d["model"] = ModelConfig(**d["model"])
        d["mode"] = Mode(d["mode"])
        return RunConfig(**d)


@dataclass
class RunReport:
    schema_version: int
    config: dict
    status: str                      # "ok" or "diverged"
    loss_curve: list[float]
    final_loss: Optional[float]
    trainable_linear_only: int
    trainable_full: int
    memory_analytic_paper_constant: dict
    memory_analytic_per_layer_count: dict
    memory_measured: dict
    reconciliation: dict
    equivalence: list[dict]
    wall_clock_s: float

    def to_json(self) -> str:
        return dumps_canonical(asdict(self))

    @staticmethod
    def from_json_dict(d: dict) -> "RunReport":
        return RunReport(**d)


def _eval_loss(model: TransformerModel, dataset: Dataset, batch_size: int) -> float:
    """Mean loss over the full dataset, batched deterministically."""
    n = len(dataset)
    total = 0.0
    batches = 0
    for start in range(0, n, batch_size):
        tokens = dataset.tokens[start : start + batch_size]
        targets = dataset.targets[start : start + batch_size]
        loss, _ = forward_loss(model, tokens, targets)
        total += loss
        batches += 1
    return total / batches


def _merged_weights(model: TransformerModel) -> dict[str, np.ndarray]:
    return {name: adapters.merge(layer) for name, layer in model.adapted_layers()}


def _equiv_snapshot(model: TransformerModel, merged_0: dict, step: int) -> dict:
    worst_residual = 0.0
    worst_rank = 0
    for name, layer in model.adapted_layers():
        delta = adapters.merge(layer) - merged_0[name]
        rep = subspace_check(layer.a, delta)
        worst_residual = max(worst_residual, rep.residual)
        worst_rank = max(worst_rank, rep.numerical_rank)
    return {
        "step": step,
        "max_subspace_residual": worst_residual,
        "max_numerical_rank": worst_rank,
        "rank_bound": model.rank,
        "pass": bool(worst_residual < SUBSPACE_PASS_THRESHOLD and worst_rank <= model.rank),
    }


def train_run(cfg: RunConfig) -> RunReport:
    """Execute one training run; deterministic under cfg (including seed)."""
    t0 = time.perf_counter()
    mc = cfg.model
    dataset = gen_task(cfg.task, mc.vocab, mc.seq_len, cfg.n_examples, cfg.seed)
    model = build_model(mc, cfg.mode, cfg.rank, cfg.alpha, RngState(cfg.seed))
    params = trainable_params(model)
    opt_state = optim.init_adamw_state(params) if cfg.optimizer == "adamw" else None

    def lr_at(step: int) -> float:
        # linear warmup hook; constant schedule otherwise
        if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
            return cfg.lr * (step + 1) / cfg.warmup_steps
        return cfg.lr

    counts = count_trainable(model)
    analytic_pc = memory.analytic_report(
        mc, cfg.mode, cfg.rank, mc.batch_size, mc.seq_len, activation_model="paper_constant"
    )
    analytic_plc = memory.analytic_report(
        mc, cfg.mode, cfg.rank, mc.batch_size, mc.seq_len, activation_model="per_layer_count"
    )

    merged_0 = _merged_weights(model) if cfg.mode.has_adapter and cfg.equiv_every > 0 else None
    equivalence: list[dict] = []
    loss_curve: list[float] = []
    status = "ok"
    measured_dict: dict = {}
    reconciliation: dict = {}

    for step in range(cfg.steps):
        tokens, targets = dataset.batch(step, mc.batch_size)
        try:
            loss, tape = forward_loss(model, tokens, targets)
            if step == 0:
                measured = memory.measured_activation_elements(tape)
                measured_dict = measured.to_dict()
                reconciliation = memory.reconcile(
                    mc, cfg.mode, cfg.rank, measured, tokens.shape[0], tokens.shape[1]
                )
            loss_curve.append(loss)
            grads = backward(model, tape)
            if cfg.optimizer == "adamw":
                opt_cfg = optim.AdamWConfig(eta=lr_at(step), weight_decay=cfg.weight_decay)
                optim.adamw_step(params, grads, opt_state, opt_cfg)
            else:
                optim.sgd_step(params, grads, optim.SGDConfig(eta=lr_at(step)))
        except NumericsError:
            status = "diverged"
            break
        if merged_0 is not None and (step + 1) % cfg.equiv_every == 0:
            equivalence.append(_equiv_snapshot(model, merged_0, step + 1))

    if cfg.steps == 0:
        # measure the untouched model once so the report is still complete
        tokens, targets = dataset.batch(0, mc.batch_size)
        _, tape = forward_loss(model, tokens, targets)
        measured = memory.measured_activation_elements(tape)
        measured_dict = measured.to_dict()
        reconciliation = memory.reconcile(
            mc, cfg.mode, cfg.rank, measured, tokens.shape[0], tokens.shape[1]
        )

    final_loss = None
    if status == "ok":
        final_loss = _eval_loss(model, dataset, mc.batch_size)

    report = RunReport(
        schema_version=SCHEMA_VERSION,
        config=cfg.to_dict(),
        status=status,
        loss_curve=loss_curve,
        final_loss=final_loss,
        trainable_linear_only=counts.linear_only,
        trainable_full=counts.full,
        memory_analytic_paper_constant=analytic_pc.to_dict(),
        memory_analytic_per_layer_count=analytic_plc.to_dict(),
        memory_measured=measured_dict,
        reconciliation=reconciliation,
        equivalence=equivalence,
        wall_clock_s=time.perf_counter() - t0,
    )
    return report


def cell_seed(base_seed: int, rank: int, lr: float) -> int:
    """Deterministic per-cell seed: hash of (seed, rank, lr bit pattern)."""
    return derive(RngState(base_seed), f"cell:{rank}:{float(lr).hex()}").seed


@dataclass
class SweepGrid:
    schema_version: int
    ranks: list[int]
    lrs: list[float]
    cells: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        return dumps_canonical(asdict(self))

    def to_csv(self) -> str:
        lines = ["rank,lr,final_loss,status"]
        for cell in self.cells:
            fl = cell["final_loss"]
            lines.append(
                f"{cell['rank']},{cell['lr']},{'' if fl is None else repr(fl)},{cell['status']}"
            )
        return "\n".join(lines) + "\n"


def sweep(base: RunConfig, ranks: list[int], lrs: list[float]) -> SweepGrid:
    """Run every (rank, lr) cell; per-cell failures are recorded, not raised."""
    if not ranks or not lrs:
        raise ParameterError("sweep axes must be non-empty")
    grid = SweepGrid(schema_version=SCHEMA_VERSION, ranks=list(ranks), lrs=list(lrs))
    for rank in ranks:
        for lr in lrs:
            cfg_dict = base.to_dict()
            cfg_dict.update(rank=rank, lr=lr, seed=cell_seed(base.seed, rank, lr))
            cell = {"rank": rank, "lr": lr, "seed": cfg_dict["seed"]}
            try:
                report = train_run(RunConfig.from_dict(cfg_dict))
                cell["final_loss"] = report.final_loss
                cell["status"] = report.status
            except LorafaError as exc:
                cell["final_loss"] = None
                cell["status"] = f"error:{type(exc).__name__}"
            grid.cells.append(cell)
    return grid
