"""BERT-style transformer encoder with adapters and a declarative freeze policy.

The encoder owns all model parameters through a ParameterRegistry: an ordered,
named collection of tensors with per-parameter trainable flags. Freeze
policies mark attention and feed-forward weights of the bottom layers as
non-trainable; layer norms (including the embedding layer norm) and the task
head are always trainable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autograd as ag
from .autograd import Tensor

MASK_BIAS = -1e9
INIT_STD = 0.02


@dataclass
class AdapterConfig:
    """Bottleneck adapter: down-project to ``adapter_size``, gelu, up-project.

    The up-projection is zero-initialized so a freshly built adapter is an
    exact identity and the encoder output matches the adapter-free model.
    """
    adapter_size: int

    def __post_init__(self):
        if self.adapter_size < 1:
            raise ValueError(f"adapter_size must be >= 1, got {self.adapter_size}")


@dataclass
class EncoderConfig:
    vocab_size: int
    hidden_size: int
    num_layers: int
    num_heads: int
    intermediate_size: int
    max_seq_len: int
    segment_types: int = 2
    adapter: Optional[AdapterConfig] = None

    def __post_init__(self):
        if self.hidden_size % self.num_heads != 0:
            raise ValueError(
                f"hidden_size {self.hidden_size} not divisible by "
                f"num_heads {self.num_heads}"
            )

    @property
    def head_dim(self):
        return self.hidden_size // self.num_heads


def desk_config(num_layers=2, adapter=None):
    return EncoderConfig(
        vocab_size=64, hidden_size=32, num_layers=num_layers, num_heads=4,
        intermediate_size=128, max_seq_len=64, adapter=adapter,
    )


def bert_base_config(adapter=None):
    return EncoderConfig(
        vocab_size=30522, hidden_size=768, num_layers=12, num_heads=12,
        intermediate_size=3072, max_seq_len=512, adapter=adapter,
    )


PRESETS = {"desk": desk_config, "bert-base": bert_base_config}


@dataclass
class FreezePolicy:
    """Trainability rule: top ``top_layers_trainable`` layers train fully.

    Layer norms (every layer plus the embedding layer norm) and the task head
    are always trainable regardless of this policy.
    """
    top_layers_trainable: int
    embeddings_trainable: bool = False
    adapters_trainable: bool = True


class ParameterRegistry:
    """Ordered, named parameter store with per-parameter trainable flags."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._trainable: dict[str, bool] = {}

    def add(self, name, values, trainable=True):
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(values, dtype=np.float64), requires_grad=trainable)
        self._params[name] = t
        self._trainable[name] = bool(trainable)
        return t

    def __contains__(self, name):
        return name in self._params

    def __getitem__(self, name) -> Tensor:
        return self._params[name]

    def names(self):
        return list(self._params)

    def items(self):
        return list(self._params.items())

    def is_trainable(self, name):
        return self._trainable[name]

    def set_trainable(self, name, flag):
        self._trainable[name] = bool(flag)
        self._params[name].requires_grad = bool(flag)

    def trainable_items(self):
        return [(n, t) for n, t in self._params.items() if self._trainable[n]]

    @property
    def total_count(self):
        return sum(t.size for t in self._params.values())

    @property
    def trainable_count(self):
        return sum(t.size for n, t in self._params.items() if self._trainable[n])

    @property
    def frozen_count(self):
        return self.total_count - self.trainable_count

    def save(self, path):
        """One line per parameter: name, shape, trainable flag, values."""
        with open(path, "w", encoding="utf-8") as fh:
            for name, t in self._params.items():
                shape = ",".join(str(d) for d in t.data.shape)
                flag = "1" if self._trainable[name] else "0"
                values = " ".join(repr(float(v)) for v in t.data.reshape(-1))
                fh.write(f"{name}\t{shape}\t{flag}\t{values}\n")

    @classmethod
    def load(cls, path):
        reg = cls()
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if not line:
                    continue
                name, shape_s, flag, values_s = line.split("\t")
                shape = tuple(int(d) for d in shape_s.split(",")) if shape_s else ()
                values = np.fromiter(
                    (float(v) for v in values_s.split(" ")), dtype=np.float64
                ).reshape(shape)
                reg.add(name, values, trainable=flag == "1")
        return reg


def trainable_parameters(registry):
    """Deterministic (names, total_count, trainable_count) summary."""
    names = [n for n, _ in registry.trainable_items()]
    return names, registry.total_count, registry.trainable_count


def _truncated_normal(rng, shape, std=INIT_STD):
    """Normal(0, std) with redraws beyond two standard deviations."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out


def build_encoder(config, seed, include_head=True):
    """Initialize all encoder parameters (and the affine span head).

    Weights are truncated-normal (std 0.02); biases zero; layer-norm gains
    one; adapter up-projections zero so adapters start as identities.
    """
    rng = np.random.default_rng(seed)
    reg = ParameterRegistry()
    H, I = config.hidden_size, config.intermediate_size

    reg.add("embeddings.token", _truncated_normal(rng, (config.vocab_size, H)))
    reg.add("embeddings.position", _truncated_normal(rng, (config.max_seq_len, H)))
    reg.add("embeddings.segment", _truncated_normal(rng, (config.segment_types, H)))
    reg.add("embeddings.ln_gain", np.ones(H))
    reg.add("embeddings.ln_bias", np.zeros(H))

    for i in range(config.num_layers):
        p = f"layer{i}"
        for proj in ("q", "k", "v", "o"):
            reg.add(f"{p}.attn.{proj}_w", _truncated_normal(rng, (H, H)))
            reg.add(f"{p}.attn.{proj}_b", np.zeros(H))
        reg.add(f"{p}.ln1_gain", np.ones(H))
        reg.add(f"{p}.ln1_bias", np.zeros(H))
        reg.add(f"{p}.ffn.w1", _truncated_normal(rng, (H, I)))
        reg.add(f"{p}.ffn.b1", np.zeros(I))
        reg.add(f"{p}.ffn.w2", _truncated_normal(rng, (I, H)))
        reg.add(f"{p}.ffn.b2", np.zeros(H))
        reg.add(f"{p}.ln2_gain", np.ones(H))
        reg.add(f"{p}.ln2_bias", np.zeros(H))
        if config.adapter is not None:
            a = config.adapter.adapter_size
            for slot in ("adapter_attn", "adapter_ffn"):
                reg.add(f"{p}.{slot}.down_w", _truncated_normal(rng, (H, a)))
                reg.add(f"{p}.{slot}.down_b", np.zeros(a))
                reg.add(f"{p}.{slot}.up_w", np.zeros((a, H)))
                reg.add(f"{p}.{slot}.up_b", np.zeros(H))

    if include_head:
        reg.add("head.w", _truncated_normal(rng, (H, 2)))
        reg.add("head.b", np.zeros(2))
    return reg


def _adapter(reg, prefix, z):
    down = ag.add(ag.matmul(z, reg[f"{prefix}.down_w"]), reg[f"{prefix}.down_b"])
    up = ag.add(ag.matmul(ag.gelu(down), reg[f"{prefix}.up_w"]), reg[f"{prefix}.up_b"])
    return ag.add(z, up)


def _attention(reg, config, prefix, x, mask_bias):
    H, A, Hd = config.hidden_size, config.num_heads, config.head_dim
    q = ag.add(ag.matmul(x, reg[f"{prefix}.q_w"]), reg[f"{prefix}.q_b"])
    k = ag.add(ag.matmul(x, reg[f"{prefix}.k_w"]), reg[f"{prefix}.k_b"])
    v = ag.add(ag.matmul(x, reg[f"{prefix}.v_w"]), reg[f"{prefix}.v_b"])
    sizes = [Hd] * A
    heads = []
    for qh, kh, vh in zip(ag.split(q, sizes, 1), ag.split(k, sizes, 1),
                          ag.split(v, sizes, 1)):
        scores = ag.scale(ag.matmul(qh, ag.transpose(kh)), 1.0 / math.sqrt(Hd))
        if mask_bias is not None:
            scores = ag.add(scores, mask_bias)
        heads.append(ag.matmul(ag.softmax(scores, 1), vh))
    out = ag.concat(heads, 1)
    return ag.add(ag.matmul(out, reg[f"{prefix}.o_w"]), reg[f"{prefix}.o_b"])


def forward(registry, config, tokens, segments, attention_mask=None):
    """Run the encoder; returns the [L, hidden_size] sequence output."""
    tokens = np.asarray(tokens, dtype=np.int64)
    segments = np.asarray(segments, dtype=np.int64)
    L = tokens.shape[0]
    if L > config.max_seq_len:
        raise ValueError(f"sequence length {L} exceeds max {config.max_seq_len}")
    if tokens.size and tokens.max() >= config.vocab_size:
        raise IndexError(f"token id {tokens.max()} out of range")
    if segments.size and (segments.min() < 0 or segments.max() >= config.segment_types):
        raise IndexError("segment id out of range")

    x = ag.add(
        ag.add(
            ag.embedding_lookup(registry["embeddings.token"], tokens),
            ag.embedding_lookup(registry["embeddings.position"], np.arange(L)),
        ),
        ag.embedding_lookup(registry["embeddings.segment"], segments),
    )
    x = ag.layer_norm(x, registry["embeddings.ln_gain"], registry["embeddings.ln_bias"])

    mask_bias = None
    if attention_mask is not None:
        m = np.asarray(attention_mask, dtype=np.float64)
        mask_bias = Tensor((1.0 - m).reshape(1, L) * MASK_BIAS)

    for i in range(config.num_layers):
        p = f"layer{i}"
        attn = _attention(registry, config, f"{p}.attn", x, mask_bias)
        if config.adapter is not None:
            attn = _adapter(registry, f"{p}.adapter_attn", attn)
        x = ag.layer_norm(ag.add(x, attn), registry[f"{p}.ln1_gain"],
                          registry[f"{p}.ln1_bias"])
        h = ag.gelu(ag.add(ag.matmul(x, registry[f"{p}.ffn.w1"]),
                           registry[f"{p}.ffn.b1"]))
        ffn = ag.add(ag.matmul(h, registry[f"{p}.ffn.w2"]), registry[f"{p}.ffn.b2"])
        if config.adapter is not None:
            ffn = _adapter(registry, f"{p}.adapter_ffn", ffn)
        x = ag.layer_norm(ag.add(x, ffn), registry[f"{p}.ln2_gain"],
                          registry[f"{p}.ln2_bias"])
    return x


def span_head_logits(registry, sequence_output):
    """Per-position affine hidden -> 2; returns (start_logits, end_logits)."""
    logits = ag.add(ag.matmul(sequence_output, registry["head.w"]), registry["head.b"])
    start, end = ag.split(logits, [1, 1], 1)
    L = sequence_output.shape[0]
    return ag.reshape(start, (L,)), ag.reshape(end, (L,))


def apply_freeze_policy(registry, config, policy):
    """Set trainable flags in place; returns the registry for chaining."""
    if not 0 <= policy.top_layers_trainable <= config.num_layers:
        raise ValueError(
            f"top_layers_trainable {policy.top_layers_trainable} out of range "
            f"0..{config.num_layers}"
        )
    first_trainable_layer = config.num_layers - policy.top_layers_trainable
    for name in registry.names():
        if name.startswith("head.") or name.startswith("cacnn."):
            registry.set_trainable(name, True)
        elif name.rsplit(".", 1)[-1].startswith("ln"):
            registry.set_trainable(name, True)
        elif ".adapter_" in name:
            registry.set_trainable(name, policy.adapters_trainable)
        elif name.startswith("embeddings."):
            registry.set_trainable(name, policy.embeddings_trainable)
        elif name.startswith("layer"):
            layer_idx = int(name.split(".")[0][len("layer"):])
            registry.set_trainable(name, layer_idx >= first_trainable_layer)
        else:
            raise ValueError(f"unknown parameter group for {name!r}")
    return registry
