"""Self-attention encoder with an MLM head over a closed vocabulary.

Input positions carry three summed embeddings: token, absolute position,
and slot type (which structural slot the position belongs to: previous
utterance, current utterance, or one of the five sense modalities).  The
encoder stack is the post-layer-norm arrangement (norm after each residual
add).  The output head is weight-tied to the token embedding table.

Weight matrices are drawn N(0, init_std^2) from a seeded generator in a
fixed documented order; bias vectors start at zero, layer-norm gains at
one.  Pads are attended to by default (they act as learnable "nothing
here" signals in this tiny world); ``mask_pads`` hides them for ablation.
"""

import math
from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from .rng import Rng

ACTIVATIONS = ("gelu", "relu")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 29
    seq_len: int = 11
    n_slots: int = 7
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ffn: int = 256
    init_std: float = 0.02
    seed: int = 0
    activation: str = "gelu"
    dropout: float = 0.0
    mask_pads: bool = False
    pad_id: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "seq_len", "n_slots", "d_model",
                     "n_layers", "n_heads", "d_ffn"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.init_std < 0.0:
            raise ValueError("init_std must be non-negative")

    @property
    def d_head(self):
        return self.d_model // self.n_heads

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def param_count(config):
    """Closed-form parameter count for a ModelConfig."""
    v, s, k = config.vocab_size, config.seq_len, config.n_slots
    d, f, layers = config.d_model, config.d_ffn, config.n_layers
    embeddings = (v + s + k) * d
    attention = 4 * d * d + 4 * d           # Q,K,V,O matrices and biases
    ffn = 2 * d * f + f + d                 # two matrices and their biases
    norms = 4 * d                           # two norms, gain and bias each
    return embeddings + layers * (attention + ffn + norms) + v  # +output bias


@dataclass(frozen=True)
class AttentionMaps:
    """Per-layer (n_heads, seq_len, seq_len) attention weights for one input."""
    layers: tuple

    def row_sums(self):
        return np.concatenate([m.sum(axis=-1).reshape(-1) for m in self.layers])


class EncoderModel:
    """Parameter container; all computation lives in module functions."""

    def __init__(self, config, params):
        self.config = config
        self.params = params  # ordered name -> Tensor

    def param_list(self):
        return list(self.params.values())

    def n_params(self):
        return sum(p.size for p in self.params.values())


def _param_shapes(config):
    d, f = config.d_model, config.d_ffn
    shapes = [
        ("tok_emb", (config.vocab_size, d)),
        ("pos_emb", (config.seq_len, d)),
        ("slot_emb", (config.n_slots, d)),
    ]
    for i in range(config.n_layers):
        shapes += [
            (f"layer{i}.wq", (d, d)), (f"layer{i}.bq", (d,)),
            (f"layer{i}.wk", (d, d)), (f"layer{i}.bk", (d,)),
            (f"layer{i}.wv", (d, d)), (f"layer{i}.bv", (d,)),
            (f"layer{i}.wo", (d, d)), (f"layer{i}.bo", (d,)),
            (f"layer{i}.ln1_gain", (d,)), (f"layer{i}.ln1_bias", (d,)),
            (f"layer{i}.w1", (d, f)), (f"layer{i}.b1", (f,)),
            (f"layer{i}.w2", (f, d)), (f"layer{i}.b2", (d,)),
            (f"layer{i}.ln2_gain", (d,)), (f"layer{i}.ln2_bias", (d,)),
        ]
    shapes.append(("out_bias", (config.vocab_size,)))
    return shapes


def init_model(config, rng=None):
    """Build a model; matrices and embeddings N(0, init_std^2), biases zero,
    layer-norm gains one.  Draw order is the ``_param_shapes`` order."""
    gen = rng if rng is not None else Rng(config.seed)
    params = {}
    for name, shape in _param_shapes(config):
        base = name.rsplit(".", 1)[-1]
        if base.endswith(("_gain",)):
            data = np.ones(shape)
        elif base.startswith("b") or base.endswith("_bias") or base == "out_bias":
            data = np.zeros(shape)
        else:
            data = gen.normals(int(np.prod(shape))).reshape(shape) * config.init_std
        params[name] = T.param(data)
    return EncoderModel(config, params)


def _validate_ids(config, token_ids, slot_ids):
    token_ids = np.asarray(token_ids, dtype=np.int64)
    slot_ids = np.asarray(slot_ids, dtype=np.int64)
    if token_ids.shape != slot_ids.shape:
        raise ValueError(
            f"token/slot shapes differ: {token_ids.shape} vs {slot_ids.shape}"
        )
    if token_ids.shape[-1] != config.seq_len:
        raise ValueError(
            f"expected sequences of length {config.seq_len}, "
            f"got {token_ids.shape[-1]}"
        )
    if token_ids.min() < 0 or token_ids.max() >= config.vocab_size:
        raise ValueError("token id out of range")
    if slot_ids.min() < 0 or slot_ids.max() >= config.n_slots:
        raise ValueError("slot id out of range")
    return token_ids, slot_ids


def forward_hidden(model, token_ids, slot_ids, dropout_rng=None):
    """Batched encoder pass.

    ``token_ids``/``slot_ids`` are (batch, seq_len); returns the final
    hidden states Tensor (batch, seq_len, d_model) and a list with one
    (batch, n_heads, seq_len, seq_len) attention array per layer.  Dropout
    fires only when a generator is supplied and the configured rate is
    nonzero (training path).
    """
    cfg = model.config
    token_ids, slot_ids = _validate_ids(cfg, token_ids, slot_ids)
    if token_ids.ndim == 1:
        token_ids = token_ids[None, :]
        slot_ids = slot_ids[None, :]
    p = model.params
    b, s = token_ids.shape
    d, h, dh = cfg.d_model, cfg.n_heads, cfg.d_head

    def drop(x):
        if dropout_rng is not None and cfg.dropout > 0.0:
            return T.dropout(x, cfg.dropout, dropout_rng)
        return x

    positions = np.broadcast_to(np.arange(s), (b, s))
    x = T.add(T.gather(p["tok_emb"], token_ids),
              T.add(T.gather(p["pos_emb"], positions),
                    T.gather(p["slot_emb"], slot_ids)))
    # dense projections run on (b*s, d): one large matmul instead of a
    # stack of b tiny ones
    x = drop(T.reshape(x, (b * s, d)))

    pad_bias = None
    if cfg.mask_pads:
        bias = np.where(token_ids == cfg.pad_id, -1e9, 0.0)
        pad_bias = T.Tensor(bias[:, None, None, :])

    maps = []
    for i in range(cfg.n_layers):
        def proj(name_w, name_b):
            y = T.linear(x, p[f"layer{i}.{name_w}"], p[f"layer{i}.{name_b}"])
            return T.transpose(T.reshape(y, (b, s, h, dh)), (0, 2, 1, 3))

        q = proj("wq", "bq")
        k = proj("wk", "bk")
        v = proj("wv", "bv")
        scores = T.scale(T.matmul(q, k, trans_b=True), 1.0 / math.sqrt(dh))
        if pad_bias is not None:
            scores = T.add(scores, pad_bias)
        attn = T.softmax(scores, axis=-1)
        maps.append(attn.data)
        ctx = T.reshape(T.transpose(T.matmul(attn, v), (0, 2, 1, 3)),
                        (b * s, d))
        ctx = drop(T.linear(ctx, p[f"layer{i}.wo"], p[f"layer{i}.bo"]))
        x = T.layer_norm(T.add(x, ctx), p[f"layer{i}.ln1_gain"],
                         p[f"layer{i}.ln1_bias"])

        act = T.gelu if cfg.activation == "gelu" else T.relu
        ff = T.linear(x, p[f"layer{i}.w1"], p[f"layer{i}.b1"])
        ff = T.linear(act(ff), p[f"layer{i}.w2"], p[f"layer{i}.b2"])
        ff = drop(ff)
        x = T.layer_norm(T.add(x, ff), p[f"layer{i}.ln2_gain"],
                         p[f"layer{i}.ln2_bias"])
    return T.reshape(x, (b, s, d)), maps


def encode(model, token_ids, slot_ids):
    """Single-sequence encoder pass: (seq_len, d_model) plus AttentionMaps."""
    token_ids = np.asarray(token_ids, dtype=np.int64)
    if token_ids.ndim != 1:
        raise ValueError("encode takes a single sequence; use forward_hidden for batches")
    hidden, maps = forward_hidden(model, token_ids, slot_ids)
    single = AttentionMaps(tuple(m[0] for m in maps))
    return T.reshape(hidden, (model.config.seq_len, model.config.d_model)), single


def mlm_logits(model, hidden):
    """Project hidden states to vocabulary logits (weight-tied head)."""
    return T.add(T.matmul(hidden, model.params["tok_emb"], trans_b=True),
                 model.params["out_bias"])


def predict_masked(model, example):
    """Full-vocabulary ranking at each masked position of one example.

    Returns a list aligned with ``example.mask_positions``; each entry is
    the vocabulary sorted by descending logit (ties broken by token id).
    """
    if len(example.mask_positions) == 0:
        raise ValueError("example has no masked positions")
    hidden, _ = forward_hidden(model, example.token_ids, example.slot_ids)
    logits = mlm_logits(model, hidden).data[0]
    rankings = []
    for pos in example.mask_positions:
        row = logits[pos]
        order = np.lexsort((np.arange(len(row)), -row))
        rankings.append(order)
    return rankings


def batch_arrays(batch):
    tokens = np.stack([ex.token_ids for ex in batch])
    slots = np.stack([ex.slot_ids for ex in batch])
    flat_positions = []
    targets = []
    seq_len = tokens.shape[1]
    for row, ex in enumerate(batch):
        for pos, tgt in zip(ex.mask_positions, ex.target_ids):
            flat_positions.append(row * seq_len + pos)
            targets.append(tgt)
    return tokens, slots, np.array(flat_positions), np.array(targets)


def masked_loss(model, batch, dropout_rng=None):
    """Mean cross-entropy over the masked positions of a batch (forward
    only; call inside a tape to train)."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    tokens, slots, flat_positions, targets = batch_arrays(batch)
    if len(flat_positions) == 0:
        raise ValueError("batch has zero masked positions")
    hidden, _ = forward_hidden(model, tokens, slots, dropout_rng=dropout_rng)
    b, s = tokens.shape
    flat_hidden = T.reshape(hidden, (b * s, model.config.d_model))
    picked = T.take_rows(flat_hidden, flat_positions)
    return T.cross_entropy(mlm_logits(model, picked), targets)


def loss_and_grads(model, batch, dropout_rng=None):
    """One backward pass; leaves gradients populated on the parameters."""
    with T.Tape():
        loss = masked_loss(model, batch, dropout_rng=dropout_rng)
        T.backward(loss)
    return loss.item()


def train_step(model, batch, adam, dropout_rng=None):
    """Backward over the batch's masked positions, then one Adam update."""
    loss = loss_and_grads(model, batch, dropout_rng=dropout_rng)
    adam.step()
    return loss
