"""Attention-pooled dual-embedding text classifier.

Each stream scores the tokens with a learned vector and those weights pool
the *other* stream; the two pooled vectors are concatenated, fused by one
matrix and fed to a linear softmax head.
"""
import numpy as np

from . import autodiff as ad
from .embeddings import PAD, DuoEmbeddingPair
from .errors import ContractError, DimensionError
from .rng import SplitMix64, xavier_uniform

POOLING_MODES = ("duo", "concat", "average")


def _pool(weights, values):
    # weights [..., l], values [..., l, d] -> [..., d]
    lead = weights.shape[:-1]
    w = ad.reshape(weights, lead + (1, weights.shape[-1]))
    out = ad.matmul(w, values)
    return ad.reshape(out, lead + (values.shape[-1],))


def _scores(x, w):
    col = ad.reshape(w, (w.shape[0], 1))
    s = ad.matmul(x, col)
    return ad.reshape(s, x.shape[:-1])


def duo_attention_pool(S, P, w_S, w_P, use_softmax=True, mask=None):
    """Cross-stream pooling; returns ``(a_P, a_S)``.

    ``S`` is ``[..., l, d1]`` and ``P`` is ``[..., l, d2]``. ``mask`` marks the
    non-padding positions (``[..., l]``); padding gets zero weight in both
    modes. Without softmax the raw scores are used as weights.
    """
    l = S.shape[-2]
    if l == 0:
        raise ContractError("cannot pool an empty sequence")
    if S.shape[:-1] != P.shape[:-1]:
        raise DimensionError(f"stream lengths differ: {S.shape} vs {P.shape}")
    if w_S.shape != (S.shape[-1],) or w_P.shape != (P.shape[-1],):
        raise DimensionError("attention vectors must match stream widths")
    score_S = _scores(S, w_S)
    score_P = _scores(P, w_P)
    if use_softmax:
        alpha_S = ad.masked_softmax(score_S, mask)
        alpha_P = ad.masked_softmax(score_P, mask)
    elif mask is not None:
        keep = ad.constant(np.broadcast_to(mask, score_S.shape), score_S.dtype)
        alpha_S = ad.mul(score_S, keep)
        alpha_P = ad.mul(score_P, keep)
    else:
        alpha_S, alpha_P = score_S, score_P
    return _pool(alpha_S, P), _pool(alpha_P, S)


def fuse_sentence(a_P, a_S, W_O):
    """``[a_P, a_S] @ W_O``."""
    return ad.linear(ad.concat_lastdim(a_P, a_S), W_O)


def count_classifier_params(d1, d2, d_ff, label_num) -> int:
    return d1 + d2 + (d1 + d2) * d_ff + d_ff * label_num


class DuoClassifier:
    """Holds the parameters and runs batched forward passes.

    Pretrained tables are frozen unless ``train_embeddings`` overrides that;
    ``learned:`` tables train by default.
    """

    def __init__(self, pair: DuoEmbeddingPair, d_ff: int, label_num: int, rng: SplitMix64,
                 use_softmax=True, pooling="duo", dropout=0.1, dtype=np.float64,
                 train_embeddings=None):
        if pooling not in POOLING_MODES:
            raise ContractError(f"unknown pooling mode {pooling!r}")
        d1, d2 = pair.d_model1, pair.d_model2
        if pooling == "average" and d1 != d2:
            raise DimensionError("average pooling needs equal stream widths")
        self.vocab = pair.vocab
        self.d1, self.d2, self.d_ff, self.label_num = d1, d2, d_ff, label_num
        self.use_softmax = use_softmax
        self.pooling = pooling
        self.dropout = dropout
        self.dtype = dtype

        def table(t, name):
            trainable = t.trainable if train_embeddings is None else train_embeddings
            return ad.Tensor(t.matrix, requires_grad=trainable, name=name, dtype=dtype)

        self.params = {"emb.s": table(pair.s, "emb.s"), "emb.p": table(pair.p, "emb.p")}
        fused_in = d1 if pooling == "average" else d1 + d2
        if pooling == "duo":
            self.params["pool.w_s"] = ad.parameter(xavier_uniform(rng, (d1,)), "pool.w_s", dtype)
            self.params["pool.w_p"] = ad.parameter(xavier_uniform(rng, (d2,)), "pool.w_p", dtype)
        self.params["fuse.w"] = ad.parameter(xavier_uniform(rng, (fused_in, d_ff)), "fuse.w", dtype)
        self.params["head.w"] = ad.parameter(xavier_uniform(rng, (d_ff, label_num)), "head.w", dtype)

    # -- parameters

    def named_parameters(self):
        return dict(self.params)

    def trainable_parameters(self):
        return {n: p for n, p in self.params.items() if p.requires_grad}

    def num_trainable(self):
        return sum(p.data.size for p in self.trainable_parameters().values())

    def frozen_rows(self):
        return {n: [PAD] for n in ("emb.s", "emb.p") if self.params[n].requires_grad}

    @property
    def model_dim(self):
        return self.d_ff

    # -- forward

    def sentence_embedding(self, ids, training=False, rng=None):
        ids = np.asarray(ids, dtype=np.int64)
        if ids.shape[-1] == 0:
            raise ContractError("cannot classify an empty sequence")
        mask = ids != PAD
        S = ad.embedding(self.params["emb.s"], ids)
        P = ad.embedding(self.params["emb.p"], ids)
        if self.pooling == "duo":
            a_P, a_S = duo_attention_pool(S, P, self.params["pool.w_s"], self.params["pool.w_p"],
                                          self.use_softmax, mask)
            pooled = ad.concat_lastdim(a_P, a_S)
        else:
            counts = mask.sum(axis=-1, keepdims=True)
            uniform = ad.constant(mask / np.maximum(counts, 1), self.dtype)
            mean_S, mean_P = _pool(uniform, S), _pool(uniform, P)
            if self.pooling == "concat":
                pooled = ad.concat_lastdim(mean_P, mean_S)
            else:
                pooled = ad.scale(ad.add(mean_S, mean_P), 0.5)
        e = ad.linear(pooled, self.params["fuse.w"])
        if training and self.dropout > 0:
            e = ad.dropout(e, self.dropout, rng, training=True)
        return e

    def forward(self, ids, training=False, rng=None):
        """Logits ``[..., label_num]`` for padded id rows ``[..., l]``."""
        e = self.sentence_embedding(ids, training, rng)
        return ad.linear(e, self.params["head.w"])

    def loss(self, batch, training=False, rng=None, smoothing=0.0):
        logits = self.forward(batch.ids, training, rng)
        return ad.cross_entropy(logits, batch.labels, smoothing=smoothing)

    def predict(self, ids):
        with ad.no_grad():
            return self.forward(ids).data.argmax(axis=-1)

    # -- state

    def state_dict(self):
        return {n: p.data for n, p in self.params.items()}

    def load_state_dict(self, state):
        for n, p in self.params.items():
            if n not in state:
                raise ContractError(f"checkpoint lacks tensor {n}")
            if state[n].shape != p.shape:
                raise DimensionError(f"{n}: checkpoint {state[n].shape} vs model {p.shape}")
            p.data = np.array(state[n], dtype=self.dtype)
