"""Finite-difference verification suite over all ops and model composites."""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from . import cacnn as cacnn_mod
from . import encoder as enc
from . import trainer
from .gradcheck import check_gradients, random_tensor
from .span import generate_dataset

TOLERANCE = 1e-4


def _op_checks(rng):
    a = random_tensor(rng, (3, 4))
    b = random_tensor(rng, (4, 2))
    yield "matmul", lambda: ag.matmul(a, b), [a, b]

    x = random_tensor(rng, (2, 5))
    w = random_tensor(rng, (2, 5))
    yield "add", lambda: ag.add(x, w), [x, w]
    yield "mul", lambda: ag.mul(x, w), [x, w]
    yield "scale", lambda: ag.scale(x, 1.7), [x]
    yield "gelu", lambda: ag.gelu(x), [x]
    yield "tanh", lambda: ag.tanh(x), [x]
    yield "softmax", lambda: ag.sum_all(ag.mul(ag.softmax(x, 1), w)), [x]
    yield "reshape", lambda: ag.mul(ag.reshape(x, (5, 2)), ag.reshape(w, (5, 2))), [x]
    yield "transpose", lambda: ag.mul(ag.transpose(x), ag.transpose(w)), [x]
    yield "concat", lambda: ag.mul(ag.concat([x, w], 0),
                                   ag.concat([w, x], 0)), [x, w]
    yield "split", lambda: ag.mul(ag.split(x, [2, 3], 1)[0],
                                  ag.split(w, [2, 3], 1)[0]), [x]

    # relu away from the kink, where finite differences are valid
    xr = random_tensor(rng, (2, 5))
    xr.data[np.abs(xr.data) < 0.1] += 0.5
    yield "relu", lambda: ag.mul(ag.relu(xr), w), [xr]

    xl = random_tensor(rng, (3, 8))
    gain = random_tensor(rng, (8,))
    bias = random_tensor(rng, (8,))
    wl = random_tensor(rng, (3, 8))
    yield "layer_norm", lambda: ag.sum_all(
        ag.mul(ag.layer_norm(xl, gain, bias), wl)), [xl, gain, bias]

    xc = random_tensor(rng, (7, 3))
    fc = random_tensor(rng, (2, 3, 3))
    yield "conv1d_same", lambda: ag.conv1d(xc, fc, "same"), [xc, fc]
    yield "conv1d_valid", lambda: ag.conv1d(xc, fc, "valid"), [xc, fc]

    # distinct entries keep the max unique so the subgradient is exact
    xm = random_tensor(rng, (5, 3))
    xm.data = np.argsort(np.argsort(xm.data, axis=None)).reshape(5, 3) * 0.1 \
        + xm.data * 1e-3
    yield "max_reduce", lambda: ag.max_reduce(xm, 0), [xm]
    yield "sum_reduce", lambda: ag.sum_reduce(xm, 0), [xm]

    table = random_tensor(rng, (6, 4))
    ids = np.array([0, 3, 3, 5])
    wt = random_tensor(rng, (4, 4))
    yield "embedding_lookup", lambda: ag.mul(
        ag.embedding_lookup(table, ids), wt), [table]

    logits = random_tensor(rng, (7,))
    yield "cross_entropy_from_logits", lambda: ag.cross_entropy_from_logits(
        logits, 2), [logits]


def _composite_checks(rng):
    seed = int(rng.integers(0, 2**31))
    config = enc.EncoderConfig(vocab_size=12, hidden_size=8, num_layers=1,
                               num_heads=2, intermediate_size=12, max_seq_len=8,
                               adapter=enc.AdapterConfig(adapter_size=3))
    reg = enc.build_encoder(config, seed)
    # zero-init up-projections hide adapter gradients; perturb them
    for name in reg.names():
        if name.endswith("up_w"):
            reg[name].data += rng.standard_normal(reg[name].data.shape) * 0.05
    tokens = rng.integers(0, config.vocab_size, size=6)
    segments = np.array([0, 0, 0, 1, 1, 1])

    checked = ["layer0.attn.q_w", "layer0.ffn.w1", "layer0.adapter_attn.down_w",
               "layer0.adapter_ffn.up_w", "layer0.ln1_gain", "embeddings.token",
               "head.w"]
    tensors = [reg[n] for n in checked]
    weights = rng.standard_normal((6, 8))

    def encoder_fn():
        out = enc.forward(reg, config, tokens, segments)
        return ag.sum_all(ag.mul(out, ag.Tensor(weights)))

    yield "encoder_adapter_forward", encoder_fn, tensors

    def span_loss_fn():
        model = trainer.Model(reg, config, "affine_span")
        start, end = model.span_logits(_FakeExample(tokens, segments))
        return ag.add(ag.cross_entropy_from_logits(start, 3),
                      ag.cross_entropy_from_logits(end, 4))

    yield "encoder_span_loss", span_loss_fn, tensors

    for variant, name in ((cacnn_mod.CONTEXT_VECTOR, "cacnn_context_vector"),
                          (cacnn_mod.SIMPLIFIED, "cacnn_simplified")):
        ccfg = cacnn_mod.CacnnConfig(
            variant=variant, initial_filters=4, initial_width=2,
            sample_filters=2, sample_width=1, context_width=2,
            context_filters=2,
        )
        creg = enc.ParameterRegistry()
        cacnn_mod.build_params(creg, ccfg, 8, seed + 1)
        x = random_tensor(rng, (6, 8))
        params = [creg["cacnn.init_filters"], creg["cacnn.init_bias"],
                  creg["cacnn.head_w"]]
        if variant == cacnn_mod.CONTEXT_VECTOR:
            params.append(creg["cacnn.context_filters"])

        def cacnn_fn(x=x, creg=creg, ccfg=ccfg):
            maps = cacnn_mod.forward(x, creg, ccfg)
            start, end = cacnn_mod.head_logits(maps, creg)
            return ag.add(ag.cross_entropy_from_logits(start, 1),
                          ag.cross_entropy_from_logits(end, 2))

        yield name, cacnn_fn, [x] + params


class _FakeExample:
    def __init__(self, tokens, segments):
        self.tokens = tokens
        self.segments = segments
        self.attention_mask = np.ones(len(tokens))


def run_suite(seed=0, include_composites=True, tolerance=TOLERANCE):
    """Run every check; returns a list of (name, max_rel_err, passed)."""
    rng = np.random.default_rng(seed)
    results = []
    checks = list(_op_checks(rng))
    if include_composites:
        checks += list(_composite_checks(rng))
    for name, fn, tensors in checks:
        err = check_gradients(fn, tensors)
        results.append((name, err, err < tolerance))
    return results
