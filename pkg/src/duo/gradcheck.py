"""Central-difference gradient verification.

:func:`finite_diff_check` compares the reverse-mode gradient of a tensor
function against central differences. :func:`default_items` lists the checks
behind the ``grad-check`` command: every primitive op plus both full models at
toy size, all in double precision.
"""
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError
from .rng import SplitMix64

TOLERANCE = 1e-4


def _scalarize(y, weights):
    if y.data.size == 1:
        return ad.reshape(y, ())
    return ad.sum_all(ad.mul(y, ad.constant(weights, y.dtype)))


def finite_diff_check(f, inputs, eps=1e-5, seed=1234):
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps the input tensors to a tensor; non-scalar outputs are reduced
    with fixed random weights. ``inputs`` are tensors whose ``data`` is
    perturbed in place (and restored). Relative error per coordinate is
    ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ContractError(f"finite-difference step {eps} outside [1e-7, 1e-4]")
    tensors = [t if isinstance(t, ad.Tensor) else ad.Tensor(np.array(t, dtype=np.float64)) for t in inputs]
    saved = [(t.requires_grad, t.grad) for t in tensors]
    for t in tensors:
        t.data = np.array(t.data, dtype=np.float64)
        t.requires_grad = True
        t.grad = None
    try:
        y = f(*tensors)
        weights = SplitMix64(seed).uniform(y.shape) * 2.0 - 1.0
        loss = _scalarize(y, weights)
        ad.backward(loss)
        worst = 0.0
        with ad.no_grad():
            for t in tensors:
                analytic = np.zeros_like(t.data) if t.grad is None else np.asarray(t.grad)
                flat = t.data.reshape(-1)
                for i in range(flat.size):
                    orig = flat[i]
                    flat[i] = orig + eps
                    up = float(_scalarize(f(*tensors), weights).data)
                    flat[i] = orig - eps
                    down = float(_scalarize(f(*tensors), weights).data)
                    flat[i] = orig
                    numeric = (up - down) / (2 * eps)
                    a = float(analytic.reshape(-1)[i])
                    err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                    worst = max(worst, err)
        return worst
    finally:
        for t, (rg, g) in zip(tensors, saved):
            t.requires_grad = rg
            t.grad = g


# --------------------------------------------------------------------------
# registry


@dataclass
class GradItem:
    name: str
    build: object  # () -> (f, inputs)
    eps: float = 1e-5


def _rand(rng, *shape, lo=-1.0, hi=1.0):
    return ad.Tensor(lo + (hi - lo) * rng.uniform(shape))


def _away_from_zero(rng, *shape):
    x = rng.uniform(shape) * 0.9 + 0.1
    sign = np.where(rng.uniform(shape) < 0.5, -1.0, 1.0)
    return ad.Tensor(x * sign)


def _toy_classifier():
    from .classifier import DuoClassifier
    from .data import ClassificationData, make_batches
    from .embeddings import DuoEmbeddingPair, Vocabulary, align_table_to_vocab

    rng = SplitMix64(7)
    vocab = Vocabulary([f"t{i}" for i in range(6)])
    pair = DuoEmbeddingPair(vocab, align_table_to_vocab(None, vocab, 3, rng),
                            align_table_to_vocab(None, vocab, 4, rng))
    model = DuoClassifier(pair, d_ff=5, label_num=3, rng=rng, dropout=0.0)
    data = ClassificationData([[4, 5, 6], [7, 8], [9, 4, 5, 6]], [0, 2, 1])
    batch = make_batches(data, 3, shuffle=False)[0]
    return model, batch


def _toy_translator(**overrides):
    from .data import ParallelData, make_batches
    from .transformer import DuoTransformer, TransformerConfig

    opts = dict(vocab_size=9, d_model=8, d_ff=12, n_layers=1, heads=2, dropout=0.0, d_model1=6)
    opts.update(overrides)
    model = DuoTransformer(TransformerConfig(**opts), SplitMix64(11))
    data = ParallelData([[4, 5, 6, 7, 8], [5, 6]], [[6, 7, 8, 4], [8, 4]])
    batch = make_batches(data, 2, shuffle=False)[0]
    return model, batch


def _model_item(builder, smoothing=0.1):
    def build():
        model, batch = builder()
        params = list(model.trainable_parameters().values())
        return (lambda *_: model.loss(batch, smoothing=smoothing)), params
    return build


def default_items():
    from .classifier import duo_attention_pool
    from .transformer import causal_mask, duo_layer_norm, duo_multi_head, scaled_dot_attention

    rng = SplitMix64(2024)
    mask_2x4 = np.array([[True, True, False, True], [True, False, False, False]])

    def dropout_fn(x):
        return ad.dropout(x, 0.3, SplitMix64(5), training=True)

    def site(shared):
        names = ("wq_s", "wq_p", "wkv_s", "wkv_p") if shared else \
            ("wq_s", "wq_p", "wk_s", "wv_s", "wk_p", "wv_p")
        return {n: _rand(rng, 4, 4) for n in names + ("wo_s", "wo_p")}

    def duo_mh(shared):
        p = site(shared)
        names = list(p)
        x_S, x_P, c_S, c_P = (_rand(rng, 3, 4) for _ in range(4))

        def f(xs, xp, cs, cp, *ws):
            return ad.concat_lastdim(*duo_multi_head(xs, xp, cs, cp, dict(zip(names, ws)), 2,
                                                     causal_mask(3)))
        return f, [x_S, x_P, c_S, c_P] + [p[n] for n in names]

    ids = np.array([[4, 1, 4], [2, 3, 0]])
    items = [
        GradItem("matmul", lambda: (ad.matmul, [_rand(rng, 3, 4), _rand(rng, 4, 2)])),
        GradItem("matmul_batched", lambda: (ad.matmul, [_rand(rng, 2, 3, 4), _rand(rng, 2, 4, 2)])),
        GradItem("matmul_shared_rhs", lambda: (ad.matmul, [_rand(rng, 2, 3, 4), _rand(rng, 4, 2)])),
        GradItem("add", lambda: (ad.add, [_rand(rng, 2, 3), _rand(rng, 2, 3)])),
        GradItem("sub", lambda: (ad.sub, [_rand(rng, 2, 3), _rand(rng, 2, 3)])),
        GradItem("mul", lambda: (ad.mul, [_rand(rng, 2, 3), _rand(rng, 2, 3)])),
        GradItem("scale", lambda: ((lambda x: ad.scale(x, -2.5)), [_rand(rng, 2, 3)])),
        GradItem("relu", lambda: (ad.relu, [_away_from_zero(rng, 3, 4)])),
        GradItem("softmax_lastdim", lambda: (ad.softmax_lastdim, [_rand(rng, 3, 5)])),
        GradItem("masked_softmax", lambda: ((lambda x: ad.masked_softmax(x, mask_2x4)), [_rand(rng, 2, 4)])),
        GradItem("layer_norm", lambda: ((lambda x, g, b: ad.layer_norm(x, g, b)),
                                        [_rand(rng, 2, 8), _rand(rng, 8, lo=0.5, hi=1.5), _rand(rng, 8)])),
        GradItem("concat_lastdim", lambda: (ad.concat_lastdim, [_rand(rng, 2, 3), _rand(rng, 2, 2)])),
        GradItem("reshape_transpose", lambda: ((lambda x: ad.transpose(ad.reshape(x, (2, 3, 2)), (2, 0, 1))),
                                               [_rand(rng, 3, 4)])),
        GradItem("embedding", lambda: ((lambda t: ad.embedding(t, ids)), [_rand(rng, 5, 3)])),
        GradItem("dropout", lambda: (dropout_fn, [_rand(rng, 4, 5)])),
        GradItem("sum_mean", lambda: ((lambda x: ad.add(ad.sum_all(x), ad.mean_all(x))), [_rand(rng, 3, 3)])),
        GradItem("cross_entropy_smoothed", lambda: (
            (lambda z: ad.cross_entropy(z, np.array([[2, 0, 1], [3, 4, 0]]), smoothing=0.1, ignore_pad=True)),
            [_rand(rng, 2, 3, 5, lo=-2, hi=2)])),
        GradItem("scaled_dot_attention", lambda: (
            (lambda q, k, v: scaled_dot_attention(q, k, v, causal_mask(4))),
            [_rand(rng, 4, 3), _rand(rng, 4, 3), _rand(rng, 4, 2)])),
        GradItem("duo_attention_pool_softmax", lambda: (
            (lambda S, P, ws, wp: ad.concat_lastdim(*duo_attention_pool(S, P, ws, wp, True, mask_2x4))),
            [_rand(rng, 2, 4, 3), _rand(rng, 2, 4, 2), _rand(rng, 3), _rand(rng, 2)])),
        GradItem("duo_attention_pool_raw", lambda: (
            (lambda S, P, ws, wp: ad.concat_lastdim(*duo_attention_pool(S, P, ws, wp, False, mask_2x4))),
            [_rand(rng, 2, 4, 3), _rand(rng, 2, 4, 2), _rand(rng, 3), _rand(rng, 2)])),
        GradItem("duo_multi_head_shared", lambda: duo_mh(True)),
        GradItem("duo_multi_head_unshared", lambda: duo_mh(False)),
        GradItem("duo_layer_norm", lambda: (
            (lambda x, s, g, b: duo_layer_norm(x, s, g, b)),
            [_rand(rng, 3, 6), _rand(rng, 3, 6), _rand(rng, 6, lo=0.5, hi=1.5), _rand(rng, 6)])),
        GradItem("classifier_loss", _model_item(_toy_classifier, smoothing=0.0)),
        GradItem("translator_loss", _model_item(_toy_translator)),
        GradItem("vanilla_translator_loss", _model_item(lambda: _toy_translator(meta_embeddings=False))),
    ]
    return items


def run_grad_check(items=None, tolerance=TOLERANCE):
    """Run every item; returns a list of ``(name, max_error, passed)``."""
    prev = ad.DEFAULT_DTYPE
    ad.DEFAULT_DTYPE = np.float64
    try:
        report = []
        for item in items if items is not None else default_items():
            f, inputs = item.build()
            err = finite_diff_check(f, inputs, eps=item.eps)
            report.append((item.name, err, err < tolerance))
        return report
    finally:
        ad.DEFAULT_DTYPE = prev
