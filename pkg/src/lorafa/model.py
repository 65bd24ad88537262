"""GPT-style transformer assembled from adapted linear layers.

Backprop here is a fixed tape over the known block structure, not a
general autodiff graph: the forward pass records exactly what each op's
backward rule needs, with linear-layer inputs governed by the adaptation
mode's retention policy and everything else (attention, GeLU, layernorm,
loss softmax) filed under the "other" activation category.

Blocks are pre-norm: x + attn(ln(x)), x + ffn(ln(x)), with a final
layernorm and an output head tied to the (frozen-in-adapter-modes) token
embedding. Attention is plain scaled dot-product with a causal mask and
no dropout. Bias terms are omitted everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import adapters, ops
from .adapters import AdaptedLinear, Mode, RetainedActivations
from .errors import DataError, DimensionError, NumericsError, ParameterError
from .rng import RngState, derive, randn

IGNORE_TARGET = -1


@dataclass
class ModelConfig:
    """Transformer geometry; also drives the analytic memory formulas."""

    d: int
    n_layers: int
    n_heads: int
    vocab: int
    seq_len: int
    batch_size: int = 1
    d_ff: Optional[int] = None

    def __post_init__(self):
        if self.d_ff is None:
            self.d_ff = 4 * self.d
        for name in ("d", "n_layers", "n_heads", "vocab", "seq_len", "batch_size", "d_ff"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be >= 1")
        if self.d % self.n_heads != 0:
            raise ParameterError(f"d={self.d} not divisible by n_heads={self.n_heads}")


def block_layer_specs(config: ModelConfig) -> list[tuple[str, int, int, bool]]:
    """The six linear layers of one block: (name, d_in, d_out, shares_input).

    shares_input marks key/value, whose stored input is the same tensor as
    query's; the memory model must count that tensor once.
    """
    d, d_ff = config.d, config.d_ff
    return [
        ("attn_q", d, d, False),
        ("attn_k", d, d, True),
        ("attn_v", d, d, True),
        ("attn_o", d, d, False),
        ("ffn1", d, d_ff, False),
        ("ffn2", d_ff, d, False),
    ]


@dataclass
class Block:
    ln1_gamma: np.ndarray
    ln1_beta: np.ndarray
    attn_q: AdaptedLinear
    attn_k: AdaptedLinear
    attn_v: AdaptedLinear
    attn_o: AdaptedLinear
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray
    ffn1: AdaptedLinear
    ffn2: AdaptedLinear

    def layers(self) -> dict[str, AdaptedLinear]:
        return {
            "attn_q": self.attn_q,
            "attn_k": self.attn_k,
            "attn_v": self.attn_v,
            "attn_o": self.attn_o,
            "ffn1": self.ffn1,
            "ffn2": self.ffn2,
        }


@dataclass
class TransformerModel:
    config: ModelConfig
    mode: Mode
    rank: int
    alpha: float
    tok_emb: np.ndarray
    pos_emb: np.ndarray
    blocks: list[Block]
    lnf_gamma: np.ndarray
    lnf_beta: np.ndarray

    def adapted_layers(self) -> list[tuple[str, AdaptedLinear]]:
        out = []
        for i, block in enumerate(self.blocks):
            for name, layer in block.layers().items():
                out.append((f"block{i}.{name}", layer))
        return out


def build_model(
    config: ModelConfig,
    mode: Mode,
    rank: int = 1,
    alpha: Optional[float] = None,
    rng: Optional[RngState] = None,
    a_std: float = 1.0,
) -> TransformerModel:
    """Deterministic model construction.

    Frozen weights and adapters draw from independent substreams derived
    from the seed, so models built in different modes from the same seed
    share bit-identical W and embeddings.
    """
    if rng is None:
        rng = RngState(0)
    if mode.has_adapter and rank > config.d:
        raise ParameterError(f"rank {rank} exceeds hidden dimension {config.d}")
    rng_w = derive(rng, "weights")
    rng_a = derive(rng, "adapters")
    rng_e = derive(rng, "embeddings")
    d = config.d
    tok_emb = randn((config.vocab, d), rng_e, std=1.0 / np.sqrt(d))
    pos_emb = randn((config.seq_len, d), rng_e, std=1.0 / np.sqrt(d))
    if alpha is None:
        alpha = 1.0 / rank
    blocks = []
    for _ in range(config.n_layers):
        layers = {}
        for name, d_in, d_out, _shared in block_layer_specs(config):
            w = randn((d_in, d_out), rng_w, std=1.0 / np.sqrt(d_in))
            layers[name] = adapters.init_adapter(
                d_in, d_out, rank, alpha, mode, rng_a, a_std=a_std, w=w
            )
        blocks.append(
            Block(
                ln1_gamma=np.ones(d),
                ln1_beta=np.zeros(d),
                ln2_gamma=np.ones(d),
                ln2_beta=np.zeros(d),
                **layers,
            )
        )
    return TransformerModel(
        config=config,
        mode=mode,
        rank=rank,
        alpha=alpha,
        tok_emb=tok_emb,
        pos_emb=pos_emb,
        blocks=blocks,
        lnf_gamma=np.ones(d),
        lnf_beta=np.zeros(d),
    )


# --- tape ---------------------------------------------------------------

@dataclass
class BlockCache:
    ln1_xhat: np.ndarray
    ln1_inv: np.ndarray
    kept_q: RetainedActivations
    kept_k: RetainedActivations
    kept_v: RetainedActivations
    qh: np.ndarray
    kh: np.ndarray
    vh: np.ndarray
    probs: np.ndarray
    kept_o: RetainedActivations
    ln2_xhat: np.ndarray
    ln2_inv: np.ndarray
    kept_f1: RetainedActivations
    gelu_in: np.ndarray
    kept_f2: RetainedActivations


@dataclass
class Tape:
    """Everything retained by one forward pass, in registration order.

    records holds (category, key, array) for the activation meter, where
    category is one of {"linear_full", "linear_low", "other"}. The
    structured caches drive the backward pass.
    """

    b: int
    s: int
    records: list[tuple[str, str, np.ndarray]] = field(default_factory=list)
    block_caches: list[BlockCache] = field(default_factory=list)
    tokens: Optional[np.ndarray] = None
    targets: Optional[np.ndarray] = None
    lnf_xhat: Optional[np.ndarray] = None
    lnf_inv: Optional[np.ndarray] = None
    head_input: Optional[np.ndarray] = None
    loss_probs: Optional[np.ndarray] = None
    loss_mask: Optional[np.ndarray] = None
    loss_count: int = 0

    def retain(self, category: str, key: str, arr: np.ndarray) -> None:
        self.records.append((category, key, arr))

    def retain_kept(self, key: str, kept: RetainedActivations) -> None:
        if kept.has_x_full:
            self.retain("linear_full", key, kept.x_full)
        if kept.has_x_low:
            self.retain("linear_low", key, kept.x_low)


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    b, s, d = x.shape
    return x.reshape(b, s, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, nh, s, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, s, nh * dh)


def _block_forward(model, i: int, block: Block, x: np.ndarray, tape: Tape) -> np.ndarray:
    nh = model.config.n_heads
    dh = model.config.d // nh
    pre = f"block{i}"

    h, xh1, inv1 = ops.layer_norm(x, block.ln1_gamma, block.ln1_beta)
    tape.retain("other", f"{pre}.ln1", xh1)
    tape.retain("other", f"{pre}.ln1", inv1)

    q, kept_q = adapters.forward(block.attn_q, h)
    k, kept_k = adapters.forward(block.attn_k, h)
    v, kept_v = adapters.forward(block.attn_v, h)
    tape.retain_kept(f"{pre}.attn_q", kept_q)
    tape.retain_kept(f"{pre}.attn_k", kept_k)
    tape.retain_kept(f"{pre}.attn_v", kept_v)

    qh, kh, vh = (_split_heads(t, nh) for t in (q, k, v))
    scores = (qh @ np.swapaxes(kh, -1, -2)) / np.sqrt(dh)
    s_len = x.shape[1]
    causal = np.tril(np.ones((s_len, s_len), dtype=bool))
    probs = ops.softmax_rows(np.where(causal, scores, -np.inf))
    for key, arr in (("attn_q_heads", qh), ("attn_k_heads", kh),
                     ("attn_v_heads", vh), ("attn_probs", probs)):
        tape.retain("other", f"{pre}.{key}", arr)

    ctx = _merge_heads(probs @ vh)
    attn_out, kept_o = adapters.forward(block.attn_o, ctx)
    tape.retain_kept(f"{pre}.attn_o", kept_o)
    x = x + attn_out

    h2, xh2, inv2 = ops.layer_norm(x, block.ln2_gamma, block.ln2_beta)
    tape.retain("other", f"{pre}.ln2", xh2)
    tape.retain("other", f"{pre}.ln2", inv2)
    f1, kept_f1 = adapters.forward(block.ffn1, h2)
    tape.retain_kept(f"{pre}.ffn1", kept_f1)
    g = ops.gelu(f1)
    tape.retain("other", f"{pre}.gelu", f1)
    f2, kept_f2 = adapters.forward(block.ffn2, g)
    tape.retain_kept(f"{pre}.ffn2", kept_f2)
    x = x + f2

    tape.block_caches.append(
        BlockCache(
            ln1_xhat=xh1, ln1_inv=inv1,
            kept_q=kept_q, kept_k=kept_k, kept_v=kept_v,
            qh=qh, kh=kh, vh=vh, probs=probs,
            kept_o=kept_o,
            ln2_xhat=xh2, ln2_inv=inv2,
            kept_f1=kept_f1, gelu_in=f1, kept_f2=kept_f2,
        )
    )
    return x


def _forward(model: TransformerModel, tokens: np.ndarray):
    """Shared forward: returns (logits, tape)."""
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise DimensionError("tokens must be (batch, seq)")
    b, s = tokens.shape
    if s > model.config.seq_len:
        raise DimensionError(f"sequence length {s} exceeds configured {model.config.seq_len}")
    if tokens.min() < 0 or tokens.max() >= model.config.vocab:
        raise DataError("token id out of range")
    tape = Tape(b=b, s=s, tokens=tokens)
    x = model.tok_emb[tokens] + model.pos_emb[:s]
    for i, block in enumerate(model.blocks):
        x = _block_forward(model, i, block, x, tape)
    h, xhf, invf = ops.layer_norm(x, model.lnf_gamma, model.lnf_beta)
    tape.retain("other", "ln_f", xhf)
    tape.retain("other", "ln_f", invf)
    tape.lnf_xhat, tape.lnf_inv = xhf, invf
    if model.mode is Mode.FT:
        # Tied head: h is needed for the embedding gradient only when training it.
        tape.head_input = h
        tape.retain("other", "head", h)
    logits = ops.matmul(h, model.tok_emb.T)
    return logits, tape


def forward_logits(model: TransformerModel, tokens: np.ndarray) -> np.ndarray:
    return _forward(model, tokens)[0]


def forward_loss(model: TransformerModel, tokens: np.ndarray, targets: np.ndarray):
    """Mean cross-entropy over supervised positions (targets of -1 are ignored)."""
    logits, tape = _forward(model, tokens)
    targets = np.asarray(targets)
    if targets.shape != tokens.shape:
        raise DimensionError("targets must match tokens shape")
    if targets.max() >= model.config.vocab:
        raise DataError("target id out of range")
    mask = targets != IGNORE_TARGET
    count = int(mask.sum())
    if count == 0:
        raise DataError("no supervised positions in targets")
    m = logits.max(axis=-1, keepdims=True)
    shifted = logits - m
    logz = np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    log_probs = shifted - logz
    probs = np.exp(log_probs)
    tape.loss_probs = probs
    tape.loss_mask = mask
    tape.loss_count = count
    tape.targets = targets
    tape.retain("other", "loss_probs", probs)
    picked = np.where(mask, targets, 0)
    ll = np.take_along_axis(log_probs, picked[..., None], axis=-1)[..., 0]
    loss = -float(np.sum(ll[mask])) / count
    if not np.isfinite(loss):
        raise NumericsError("loss is not finite")
    return loss, tape


# --- backward -----------------------------------------------------------

def _block_backward(model, block: Block, cache: BlockCache, dx: np.ndarray, grads, pre: str):
    nh = model.config.n_heads
    dh = model.config.d // nh
    ft = model.mode is Mode.FT

    # x_out = x_mid + ffn2(gelu(ffn1(ln2(x_mid))))
    dupstream, g_f2 = adapters.backward(block.ffn2, cache.kept_f2, dx)
    _store(grads, f"{pre}.ffn2", g_f2)
    df1 = ops.gelu_vjp(cache.gelu_in, dupstream)
    dh2, g_f1 = adapters.backward(block.ffn1, cache.kept_f1, df1)
    _store(grads, f"{pre}.ffn1", g_f1)
    dx_mid, dg2, db2 = ops.layer_norm_vjp(cache.ln2_xhat, cache.ln2_inv, block.ln2_gamma, dh2)
    dx_mid = dx + dx_mid
    if ft:
        grads[f"{pre}.ln2.gamma"] = dg2
        grads[f"{pre}.ln2.beta"] = db2

    # x_mid = x_in + attn_o(attention(q, k, v))
    dctx, g_o = adapters.backward(block.attn_o, cache.kept_o, dx_mid)
    _store(grads, f"{pre}.attn_o", g_o)
    dctx_h = _split_heads(dctx, nh)
    dprobs = dctx_h @ np.swapaxes(cache.vh, -1, -2)
    dvh = np.swapaxes(cache.probs, -1, -2) @ dctx_h
    dscores = ops.softmax_rows_vjp(cache.probs, dprobs) / np.sqrt(dh)
    dqh = dscores @ cache.kh
    dkh = np.swapaxes(dscores, -1, -2) @ cache.qh
    dq, dk, dv = (_merge_heads(t) for t in (dqh, dkh, dvh))
    dh1_q, g_q = adapters.backward(block.attn_q, cache.kept_q, dq)
    dh1_k, g_k = adapters.backward(block.attn_k, cache.kept_k, dk)
    dh1_v, g_v = adapters.backward(block.attn_v, cache.kept_v, dv)
    _store(grads, f"{pre}.attn_q", g_q)
    _store(grads, f"{pre}.attn_k", g_k)
    _store(grads, f"{pre}.attn_v", g_v)
    dx_in, dg1, db1 = ops.layer_norm_vjp(
        cache.ln1_xhat, cache.ln1_inv, block.ln1_gamma, dh1_q + dh1_k + dh1_v
    )
    dx_in = dx_mid + dx_in
    if ft:
        grads[f"{pre}.ln1.gamma"] = dg1
        grads[f"{pre}.ln1.beta"] = db1
    return dx_in


def _store(grads: dict, prefix: str, layer_grads: dict) -> None:
    for name, g in layer_grads.items():
        grads[f"{prefix}.{name}"] = g


def backward(model: TransformerModel, tape: Tape) -> dict[str, np.ndarray]:
    """Gradients for exactly the mode's trainable set, keyed like trainable_params."""
    if tape.loss_probs is None:
        raise DataError("tape has no loss; run forward_loss first")
    # (probs - onehot) / count on supervised positions, zero elsewhere.
    dlogits = tape.loss_probs.copy()
    safe_targets = np.where(tape.loss_mask, tape.targets, 0)[..., None]
    np.put_along_axis(
        dlogits, safe_targets,
        np.take_along_axis(dlogits, safe_targets, axis=-1) - 1.0,
        axis=-1,
    )
    dlogits *= tape.loss_mask[..., None] / tape.loss_count

    grads: dict[str, np.ndarray] = {}
    ft = model.mode is Mode.FT
    dh = dlogits @ model.tok_emb
    if ft:
        d2 = dlogits.reshape(-1, dlogits.shape[-1])
        h2 = tape.head_input.reshape(-1, tape.head_input.shape[-1])
        grads["tok_emb"] = d2.T @ h2
    dx, dgf, dbf = ops.layer_norm_vjp(tape.lnf_xhat, tape.lnf_inv, model.lnf_gamma, dh)
    if ft:
        grads["ln_f.gamma"] = dgf
        grads["ln_f.beta"] = dbf
    for i in reversed(range(len(model.blocks))):
        dx = _block_backward(model, model.blocks[i], tape.block_caches[i], dx, grads, f"block{i}")
    if ft:
        dtok = np.zeros_like(model.tok_emb)
        np.add.at(dtok, tape.tokens, dx)
        grads["tok_emb"] = grads["tok_emb"] + dtok
        dpos = np.zeros_like(model.pos_emb)
        dpos[: tape.s] = dx.sum(axis=0)
        grads["pos_emb"] = dpos

    ordered = trainable_params(model)
    if set(grads) != set(ordered):
        extra = sorted(set(grads) ^ set(ordered))
        raise DataError(f"gradient keys do not match trainable set: {extra}")
    return {k: grads[k] for k in ordered}


# --- parameter accounting -------------------------------------------------

def trainable_params(model: TransformerModel) -> dict[str, np.ndarray]:
    """Insertion-ordered {name: array} views of the mode's trainable set."""
    params: dict[str, np.ndarray] = {}
    mode = model.mode
    if mode is Mode.FT:
        params["tok_emb"] = model.tok_emb
        params["pos_emb"] = model.pos_emb
    for i, block in enumerate(model.blocks):
        pre = f"block{i}"
        if mode is Mode.FT:
            params[f"{pre}.ln1.gamma"] = block.ln1_gamma
            params[f"{pre}.ln1.beta"] = block.ln1_beta
        for name, layer in block.layers().items():
            if mode is Mode.FT:
                params[f"{pre}.{name}.w"] = layer.w
            elif mode is Mode.LORA:
                params[f"{pre}.{name}.a"] = layer.a
                params[f"{pre}.{name}.b"] = layer.b
            elif mode is Mode.LORA_FA:
                params[f"{pre}.{name}.b"] = layer.b
        if mode is Mode.FT:
            params[f"{pre}.ln2.gamma"] = block.ln2_gamma
            params[f"{pre}.ln2.beta"] = block.ln2_beta
    if mode is Mode.FT:
        params["ln_f.gamma"] = model.lnf_gamma
        params["ln_f.beta"] = model.lnf_beta
    return params


@dataclass
class TrainableCount:
    linear_only: int
    full: int


def count_trainable(model: TransformerModel) -> TrainableCount:
    """Enumerated trainable parameters: block-linear-only and full counts.

    The linear-only figure is the one comparable to the closed forms, which
    exclude embeddings and layernorms.
    """
    linear = 0
    for _, layer in model.adapted_layers():
        if model.mode is Mode.FT:
            linear += layer.w.size
        elif model.mode is Mode.LORA:
            linear += layer.a.size + layer.b.size
        elif model.mode is Mode.LORA_FA:
            linear += layer.b.size
    full = sum(p.size for p in trainable_params(model).values())
    return TrainableCount(linear_only=linear, full=full)


def count_trainable_formula(config: ModelConfig, mode: Mode, rank: int) -> int:
    """Closed-form linear-only trainable count; 12d^2L / 18drL / 9drL at d_ff=4d."""
    d, d_ff, L = config.d, config.d_ff, config.n_layers
    if mode is Mode.FT:
        return L * (4 * d * d + 2 * d * d_ff)
    if mode is Mode.LORA:
        return L * rank * (8 * d + 2 * (d + d_ff))
    if mode is Mode.LORA_FA:
        return L * rank * (4 * d + d_ff + d)
    return 0
