"""Context-aware convolutional heads.

Both variants synthesize per-example convolution filters from the example's
own first-stage feature maps, then convolve those filters back over the
encoder sequence output. Only the first-stage filters (and the context
convolution, for the context-vector variant) are parameters; the synthesized
second-stage filters are activations, so gradients flow through them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .encoder import INIT_STD, _truncated_normal

CONTEXT_VECTOR = "context_vector"
SIMPLIFIED = "simplified"


@dataclass
class CacnnConfig:
    variant: str
    initial_filters: int          # feature maps from the first convolution
    initial_width: int
    sample_filters: int           # synthesized feature maps per example (K)
    sample_width: int
    context_width: int = 0        # context-vector variant only
    context_filters: int = 0      # context-vector variant only
    reduction: str = "max"        # length reduction: max or sum
    interstage_relu: bool = False

    def __post_init__(self):
        if self.variant not in (CONTEXT_VECTOR, SIMPLIFIED):
            raise ValueError(f"unknown CACNN variant {self.variant!r}")
        if self.reduction not in ("max", "sum"):
            raise ValueError(f"unknown reduction {self.reduction!r}")
        if min(self.initial_filters, self.initial_width,
               self.sample_filters, self.sample_width) < 1:
            raise ValueError("CACNN filter counts and widths must be >= 1")
        if self.variant == CONTEXT_VECTOR:
            if self.context_width < 1 or self.context_filters < 1:
                raise ValueError(
                    "context_vector variant needs context_width and "
                    "context_filters >= 1"
                )
            if self.context_width > self.initial_filters:
                raise ValueError(
                    f"context_width {self.context_width} exceeds the context "
                    f"vector length {self.initial_filters}"
                )


def validate(config, seq_len, hidden_size):
    """Reject configs whose synthesized filters cannot be materialized."""
    needed = config.sample_filters * config.sample_width * hidden_size
    if config.variant == SIMPLIFIED:
        available = seq_len * config.initial_filters
        if available < needed:
            raise ValueError(
                f"simplified CACNN needs seq_len*initial_filters >= "
                f"K*sample_width*hidden ({available} < {needed})"
            )


def parameter_count(config, hidden_size):
    """Closed-form trainable parameter count of the head."""
    n = config.initial_filters * (config.initial_width * hidden_size + 1)
    if config.variant == CONTEXT_VECTOR:
        n += config.context_filters * (config.context_width + 1)
    n += 2 * config.sample_filters + 2
    return n


def build_params(registry, config, hidden_size, seed):
    """Add CACNN head parameters (prefix ``cacnn.``) to a registry."""
    rng = np.random.default_rng(seed)
    registry.add(
        "cacnn.init_filters",
        _truncated_normal(rng, (config.initial_filters, config.initial_width,
                                hidden_size)),
    )
    registry.add("cacnn.init_bias", np.zeros(config.initial_filters))
    if config.variant == CONTEXT_VECTOR:
        registry.add(
            "cacnn.context_filters",
            _truncated_normal(rng, (config.context_filters, config.context_width, 1)),
        )
        registry.add("cacnn.context_bias", np.zeros(config.context_filters))
    registry.add(
        "cacnn.head_w", _truncated_normal(rng, (config.sample_filters, 2))
    )
    registry.add("cacnn.head_b", np.zeros(2))
    return registry


def _initial_maps(x, registry, config):
    maps = ag.add(
        ag.conv1d(x, registry["cacnn.init_filters"], "same"),
        registry["cacnn.init_bias"],
    )
    if config.interstage_relu:
        maps = ag.relu(maps)
    return maps


def _tile_to(flat, target):
    """Cyclically repeat a 1-d tensor and truncate to ``target`` entries."""
    n = flat.shape[0]
    reps = -(-target // n)
    tiled = ag.concat([flat] * reps, 0) if reps > 1 else flat
    if tiled.shape[0] == target:
        return tiled
    return ag.split(tiled, [target, tiled.shape[0] - target], 0)[0]


def forward_context_vector(x, registry, config):
    """Figure-style head with context vectorization; x [L,H] -> [L,K]."""
    if config.variant != CONTEXT_VECTOR:
        raise ValueError("config is not a context_vector variant")
    L, H = x.shape
    maps = _initial_maps(x, registry, config)                    # [L, n_f]
    reduce = ag.max_reduce if config.reduction == "max" else ag.sum_reduce
    context = reduce(maps, 0)                                    # [n_f]
    signal = ag.reshape(context, (config.initial_filters, 1))
    ctx_maps = ag.add(
        ag.conv1d(signal, registry["cacnn.context_filters"], "valid"),
        registry["cacnn.context_bias"],
    )                                                            # [n_f-w_c+1, m]
    flat = ag.reshape(ctx_maps, (ctx_maps.size,))
    needed = config.sample_filters * config.sample_width * H
    filters = ag.reshape(
        _tile_to(flat, needed),
        (config.sample_filters, config.sample_width, H),
    )
    return ag.conv1d(x, filters, "same")


def forward_simplified(x, registry, config):
    """Head without context vectorization; x [L,H] -> [L,K]."""
    if config.variant != SIMPLIFIED:
        raise ValueError("config is not a simplified variant")
    L, H = x.shape
    validate(config, L, H)
    maps = _initial_maps(x, registry, config)                    # [L, n_f]
    flat = ag.reshape(maps, (maps.size,))
    needed = config.sample_filters * config.sample_width * H
    first = ag.split(flat, [needed, flat.shape[0] - needed], 0)[0] \
        if flat.shape[0] > needed else flat
    filters = ag.reshape(first, (config.sample_filters, config.sample_width, H))
    return ag.conv1d(x, filters, "same")


def forward(x, registry, config):
    if config.variant == CONTEXT_VECTOR:
        return forward_context_vector(x, registry, config)
    return forward_simplified(x, registry, config)


def head_logits(feature_maps, registry):
    """Affine K -> 2 per position; returns (start_logits, end_logits)."""
    logits = ag.add(ag.matmul(feature_maps, registry["cacnn.head_w"]),
                    registry["cacnn.head_b"])
    L = feature_maps.shape[0]
    start, end = ag.split(logits, [1, 1], 1)
    return ag.reshape(start, (L,)), ag.reshape(end, (L,))
