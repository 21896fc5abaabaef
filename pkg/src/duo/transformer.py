"""Dual-stream encoder-decoder with cross-stream multi-head attention.

Two embedding streams (``s`` and ``p``) run side by side. In every attention
site the queries and keys come from one stream while the values come from the
other:

    A_s = MultiHead(Q_p, K_p, V_s)        A_p = MultiHead(Q_s, K_s, V_p)

With K/V sharing, one matrix per stream yields both that stream's keys and
its values, so a site has four input projections instead of six. After the
decoder's masked self-attention each stream is normalized together with the
*other* stream's sublayer output. Output logits are tied to a learned linear
projection of the concatenated embedding tables.

The same class also builds the single-stream baseline (``meta_embeddings``
off) and every intermediate rung of the ablation ladder.
"""
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .embeddings import BOS, EOS, PAD
from .errors import ConfigError, ContractError, DimensionError
from .rng import SplitMix64, xavier_uniform

VANILLA_PROJ = ("wq", "wk", "wv")
DUO_PROJ = ("wq_s", "wq_p", "wk_s", "wv_s", "wk_p", "wv_p")
SHARED_PROJ = ("wq_s", "wq_p", "wkv_s", "wkv_p")


@dataclass
class TransformerConfig:
    vocab_size: int
    d_model: int = 32
    d_ff: int = 64
    n_layers: int = 2
    heads: int = 4
    dropout: float = 0.1
    d_model1: int = 0  # width of the s table; 0 means d_model
    meta_embeddings: bool = True
    kv_sharing: bool = True
    duo_norm: bool = True
    fusion: bool = True
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.d_model % 2:
            raise ConfigError(f"d_model must be even for sinusoidal positions, got {self.d_model}")
        if self.heads < 1 or self.d_model % self.heads:
            raise ConfigError(f"d_model {self.d_model} is not divisible by {self.heads} heads")
        if self.d_model1 <= 0:
            self.d_model1 = self.d_model

    @property
    def has_projection(self):
        return self.meta_embeddings and self.d_model1 != self.d_model

    def as_dict(self):
        return asdict(self)


# --------------------------------------------------------------------------
# functional pieces


def sinusoidal_positions(length: int, d_model: int) -> np.ndarray:
    if d_model % 2:
        raise ConfigError(f"d_model must be even, got {d_model}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    rates = 10000.0 ** (np.arange(0, d_model, 2, dtype=np.float64) / d_model)
    pe = np.zeros((length, d_model))
    pe[:, 0::2] = np.sin(pos / rates)
    pe[:, 1::2] = np.cos(pos / rates)
    return pe


def causal_mask(length: int) -> np.ndarray:
    """``[l, l]`` boolean mask, true where key ``j <= i``."""
    if length < 1:
        raise ContractError("causal mask needs length >= 1")
    return np.tril(np.ones((length, length), dtype=bool))


def scaled_dot_attention(Q, K, V, mask=None):
    """``softmax(Q K^T / sqrt(d_k)) V`` with disallowed cells excluded.

    A query row with no allowed key returns zeros.
    """
    if Q.shape[-1] != K.shape[-1] or K.shape[-2] != V.shape[-2]:
        raise DimensionError(f"attention shapes Q{Q.shape} K{K.shape} V{V.shape}")
    scores = ad.scale(ad.matmul(Q, ad.swap_last(K)), 1.0 / math.sqrt(Q.shape[-1]))
    return ad.matmul(ad.masked_softmax(scores, mask), V)


def _split_heads(x, h):
    B, l, d = x.shape
    return ad.transpose(ad.reshape(x, (B, l, h, d // h)), (0, 2, 1, 3))


def _merge_heads(x):
    B, h, l, dk = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (B, l, h * dk))


def _head_mask(mask, ndim_in):
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool)
    if ndim_in == 2:
        mask = mask[None]
    if mask.ndim == 3:
        mask = mask[:, None]
    return mask


def multi_head(q, k, v, heads, mask=None):
    """Attention over already-projected ``[B, l, d]`` (or ``[l, d]``) inputs."""
    d = q.shape[-1]
    if d % heads:
        raise ConfigError(f"width {d} is not divisible by {heads} heads")
    unbatched = q.ndim == 2
    mask = _head_mask(mask, q.ndim)
    if unbatched:
        q, k, v = (ad.reshape(t, (1,) + t.shape) for t in (q, k, v))
    out = _merge_heads(scaled_dot_attention(_split_heads(q, heads), _split_heads(k, heads),
                                            _split_heads(v, heads), mask))
    if unbatched:
        out = ad.reshape(out, out.shape[1:])
    return out


def vanilla_multi_head(x, ctx, params, heads, mask=None):
    q = ad.linear(x, params["wq"])
    k = ad.linear(ctx, params["wk"])
    v = ad.linear(ctx, params["wv"])
    return ad.linear(multi_head(q, k, v, heads, mask), params["wo"])


def duo_multi_head(x_S, x_P, ctx_S, ctx_P, params, heads, mask=None):
    """Cross-stream attention; returns ``(A_S, A_P)``.

    ``A_S`` attends with the p stream's queries and keys over the s stream's
    values, ``A_P`` the mirror image. ``params`` holds either ``wkv_s``/``wkv_p``
    (shared key/value projection) or separate ``wk_*``/``wv_*`` matrices.
    """
    for t in (x_P, ctx_S, ctx_P):
        if t.shape[-1] != x_S.shape[-1]:
            raise DimensionError("duo attention streams must share one width")
    q_S = ad.linear(x_S, params["wq_s"])
    q_P = ad.linear(x_P, params["wq_p"])
    if "wkv_s" in params:
        k_S = v_S = ad.linear(ctx_S, params["wkv_s"])
        k_P = v_P = ad.linear(ctx_P, params["wkv_p"])
    else:
        k_S, v_S = ad.linear(ctx_S, params["wk_s"]), ad.linear(ctx_S, params["wv_s"])
        k_P, v_P = ad.linear(ctx_P, params["wk_p"]), ad.linear(ctx_P, params["wv_p"])
    A_S = ad.linear(multi_head(q_P, k_P, v_S, heads, mask), params["wo_s"])
    A_P = ad.linear(multi_head(q_S, k_S, v_P, heads, mask), params["wo_p"])
    return A_S, A_P


def duo_layer_norm(x, other_sublayer_out, gamma, beta, eps=1e-5):
    """``LayerNorm(x + Sublayer(other stream))``."""
    if x.shape != other_sublayer_out.shape:
        raise DimensionError(f"duo layer norm: {x.shape} vs {other_sublayer_out.shape}")
    return ad.layer_norm(ad.add(x, other_sublayer_out), gamma, beta, eps)


def fused_output_logits(h_S, h_P, E_S, E_P, W_fuse, F_dec):
    """``([h_S, h_P] F_dec) T^T`` with the tied matrix ``T = [E_S, E_P] W_fuse``."""
    T = ad.linear(ad.concat_lastdim(E_S, E_P), W_fuse)
    h = ad.linear(ad.concat_lastdim(h_S, h_P), F_dec)
    return ad.matmul(h, ad.swap_last(T))


# --------------------------------------------------------------------------
# model


class DuoTransformer:
    def __init__(self, cfg: TransformerConfig, rng: SplitMix64, dtype=np.float64,
                 s_table=None, train_s_table=True):
        self.cfg = cfg
        self.dtype = dtype
        self.params = {}
        V, d, dff = cfg.vocab_size, cfg.d_model, cfg.d_ff
        self.streams = ("_s", "_p") if cfg.meta_embeddings else ("",)

        if cfg.meta_embeddings:
            if s_table is not None:
                if s_table.shape != (V, cfg.d_model1):
                    raise DimensionError(f"s table {s_table.shape}, expected {(V, cfg.d_model1)}")
                table = np.array(s_table, dtype=np.float64)
                table[PAD] = 0.0
                self._add("emb.s", table, trainable=train_s_table)
            else:
                self._add("emb.s", self._table(rng, V, cfg.d_model1))
            self._add("emb.p", self._table(rng, V, d))
            if cfg.has_projection:
                self._add("emb.proj", xavier_uniform(rng, (cfg.d_model1, d)))
        else:
            self._add("emb", self._table(rng, V, d))

        for i in range(cfg.n_layers):
            self._attention_site(rng, f"enc.{i}.")
            self._ffn_and_norms(rng, f"enc.{i}.", n_norms=2)
        for i in range(cfg.n_layers):
            self._attention_site(rng, f"dec.{i}.self.")
            self._attention_site(rng, f"dec.{i}.cross.")
            self._ffn_and_norms(rng, f"dec.{i}.", n_norms=3)

        if cfg.meta_embeddings and cfg.fusion:
            self._add("fuse.w", xavier_uniform(rng, (cfg.d_model1 + d, d)))
            self._add("fuse.dec", xavier_uniform(rng, (2 * d, d)))

    # -- construction helpers

    def _add(self, name, arr, trainable=True):
        self.params[name] = ad.Tensor(arr, requires_grad=trainable, name=name, dtype=self.dtype)

    @staticmethod
    def _table(rng, V, d):
        t = xavier_uniform(rng, (V, d))
        t[PAD] = 0.0
        return t

    def _attention_site(self, rng, prefix):
        d = self.cfg.d_model
        if not self.cfg.meta_embeddings:
            names = VANILLA_PROJ + ("wo",)
        elif self.cfg.kv_sharing:
            names = SHARED_PROJ + ("wo_s", "wo_p")
        else:
            names = DUO_PROJ + ("wo_s", "wo_p")
        for n in names:
            self._add(prefix + n, xavier_uniform(rng, (d, d)))

    def _ffn_and_norms(self, rng, prefix, n_norms):
        d, dff = self.cfg.d_model, self.cfg.d_ff
        for s in self.streams:
            self._add(f"{prefix}ffn{s}.w1", xavier_uniform(rng, (d, dff)))
            self._add(f"{prefix}ffn{s}.w2", xavier_uniform(rng, (dff, d)))
            for k in range(1, n_norms + 1):
                self._add(f"{prefix}ln{k}{s}.g", np.ones(d))
                self._add(f"{prefix}ln{k}{s}.b", np.zeros(d))

    # -- parameter bookkeeping

    def named_parameters(self):
        return dict(self.params)

    def trainable_parameters(self):
        return {n: p for n, p in self.params.items() if p.requires_grad}

    def num_trainable(self):
        return sum(p.data.size for p in self.trainable_parameters().values())

    def frozen_rows(self):
        return {n: [PAD] for n in ("emb", "emb.s", "emb.p")
                if n in self.params and self.params[n].requires_grad}

    @property
    def model_dim(self):
        return self.cfg.d_model

    def site_params(self, prefix):
        n = len(prefix)
        return {k[n:]: v for k, v in self.params.items()
                if k.startswith(prefix) and "." not in k[n:]}

    def attention_sites(self):
        sites = [f"enc.{i}." for i in range(self.cfg.n_layers)]
        for i in range(self.cfg.n_layers):
            sites += [f"dec.{i}.self.", f"dec.{i}.cross."]
        return sites

    def state_dict(self):
        return {n: p.data for n, p in self.params.items()}

    def load_state_dict(self, state):
        for n, p in self.params.items():
            if n not in state:
                raise ContractError(f"checkpoint lacks tensor {n}")
            if state[n].shape != p.shape:
                raise DimensionError(f"{n}: checkpoint {state[n].shape} vs model {p.shape}")
            p.data = np.array(state[n], dtype=self.dtype)

    # -- building blocks

    def _drop(self, x, training, rng):
        if training and self.cfg.dropout > 0:
            return ad.dropout(x, self.cfg.dropout, rng, training=True)
        return x

    def _norm(self, name, x):
        return ad.layer_norm(x, self.params[name + ".g"], self.params[name + ".b"], self.cfg.ln_eps)

    def _ffn(self, prefix, x):
        h = ad.relu(ad.linear(x, self.params[prefix + ".w1"]))
        return ad.linear(h, self.params[prefix + ".w2"])

    def _attend(self, prefix, xs, ctxs, mask):
        site = self.site_params(prefix)
        if not self.cfg.meta_embeddings:
            return [vanilla_multi_head(xs[0], ctxs[0], site, self.cfg.heads, mask)]
        return list(duo_multi_head(xs[0], xs[1], ctxs[0], ctxs[1], site, self.cfg.heads, mask))

    def _residual_norm(self, prefix, k, xs, outs, training, rng):
        return [self._norm(f"{prefix}ln{k}{s}", ad.add(x, self._drop(o, training, rng)))
                for s, x, o in zip(self.streams, xs, outs)]

    def _feed_forward(self, prefix, k, xs, training, rng):
        outs = [self._ffn(f"{prefix}ffn{s}", x) for s, x in zip(self.streams, xs)]
        return self._residual_norm(prefix, k, xs, outs, training, rng)

    # -- public forward pieces

    def embed(self, ids, training=False, rng=None):
        """Scaled embeddings plus positions, one tensor per stream."""
        ids = np.asarray(ids, dtype=np.int64)
        d = self.cfg.d_model
        pe = ad.constant(np.broadcast_to(sinusoidal_positions(ids.shape[-1], d), ids.shape + (d,)),
                         self.dtype)
        root = math.sqrt(d)
        if self.cfg.meta_embeddings:
            s = ad.embedding(self.params["emb.s"], ids)
            if self.cfg.has_projection:
                s = ad.linear(s, self.params["emb.proj"])
            raw = [s, ad.embedding(self.params["emb.p"], ids)]
        else:
            raw = [ad.embedding(self.params["emb"], ids)]
        return [self._drop(ad.add(ad.scale(x, root), pe), training, rng) for x in raw]

    def encode_streams(self, xs, src_mask, training=False, rng=None):
        """Run the encoder stack on embedded streams; ``src_mask`` is ``[B, l]``."""
        mask = src_mask[:, None, None, :]
        for i in range(self.cfg.n_layers):
            p = f"enc.{i}."
            outs = self._attend(p, xs, xs, mask)
            xs = self._residual_norm(p, 1, xs, outs, training, rng)
            xs = self._feed_forward(p, 2, xs, training, rng)
        return xs

    def encode(self, src, training=False, rng=None):
        src = np.asarray(src, dtype=np.int64)
        mask = src != PAD
        return self.encode_streams(self.embed(src, training, rng), mask, training, rng), mask

    def decode_streams(self, ys, memory, src_mask, tgt_mask, training=False, rng=None):
        """Decoder stack; ``tgt_mask`` is the ``[B, lt]`` non-pad mask of the target input."""
        lt = ys[0].shape[-2]
        self_mask = causal_mask(lt)[None, None] & tgt_mask[:, None, None, :]
        cross_mask = src_mask[:, None, None, :]
        for i in range(self.cfg.n_layers):
            p = f"dec.{i}."
            outs = self._attend(p + "self.", ys, ys, self_mask)
            if self.cfg.meta_embeddings and self.cfg.duo_norm:
                outs = outs[::-1]  # each stream is normalized with the other's sublayer output
            ys = self._residual_norm(p, 1, ys, outs, training, rng)
            outs = self._attend(p + "cross.", ys, memory, cross_mask)
            ys = self._residual_norm(p, 2, ys, outs, training, rng)
            ys = self._feed_forward(p, 3, ys, training, rng)
        return ys

    def decode(self, tgt_in, memory, src_mask, training=False, rng=None):
        tgt_in = np.asarray(tgt_in, dtype=np.int64)
        ys = self.embed(tgt_in, training, rng)
        return self.decode_streams(ys, memory, src_mask, tgt_in != PAD, training, rng)

    def output_matrix(self):
        """The tied ``[V, d_model]`` matrix the decoder states are scored against."""
        if not self.cfg.meta_embeddings:
            return self.params["emb"]
        if self.cfg.fusion:
            both = ad.concat_lastdim(self.params["emb.s"], self.params["emb.p"])
            return ad.linear(both, self.params["fuse.w"])
        raise ContractError("without the fusion layer each stream has its own output matrix")

    def output_logits(self, hs):
        if not self.cfg.meta_embeddings:
            return ad.matmul(hs[0], ad.swap_last(self.params["emb"]))
        h_S, h_P = hs
        if self.cfg.fusion:
            return fused_output_logits(h_S, h_P, self.params["emb.s"], self.params["emb.p"],
                                       self.params["fuse.w"], self.params["fuse.dec"])
        E_S = self.params["emb.s"]
        if self.cfg.has_projection:
            E_S = ad.linear(E_S, self.params["emb.proj"])
        return ad.add(ad.matmul(h_S, ad.swap_last(E_S)),
                      ad.matmul(h_P, ad.swap_last(self.params["emb.p"])))

    def forward(self, src, tgt_in, training=False, rng=None):
        memory, src_mask = self.encode(src, training, rng)
        return self.output_logits(self.decode(tgt_in, memory, src_mask, training, rng))

    def loss(self, batch, training=False, rng=None, smoothing=0.0):
        logits = self.forward(batch.src, batch.tgt_in, training, rng)
        return ad.cross_entropy(logits, batch.tgt_out, smoothing=smoothing, ignore_pad=True)

    def greedy_decode(self, sources, max_len=None):
        """Greedy translations for a list of id sequences (no framing tokens)."""
        if not sources:
            return []
        lengths = [len(s) for s in sources]
        limits = [2 * n + 5 if max_len is None else max_len for n in lengths]
        src = np.full((len(sources), max(max(lengths), 1)), PAD, dtype=np.int64)
        for r, s in enumerate(sources):
            src[r, :len(s)] = s
        out = [[] for _ in sources]
        done = [lim == 0 for lim in limits]
        ys = np.full((len(sources), 1), BOS, dtype=np.int64)
        with ad.no_grad():
            memory, src_mask = self.encode(src)
            for step in range(max(limits)):
                if all(done):
                    break
                hs = self.decode(ys, memory, src_mask)
                last = [ad.reshape(_last_position(h), (h.shape[0], 1, h.shape[-1])) for h in hs]
                logits = self.output_logits(last).data[:, 0, :].copy()
                logits[:, [PAD, BOS]] = -np.inf
                nxt = logits.argmax(axis=-1)
                for r, tok in enumerate(nxt):
                    if done[r]:
                        continue
                    if tok == EOS:
                        done[r] = True
                    else:
                        out[r].append(int(tok))
                        if len(out[r]) >= limits[r]:
                            done[r] = True
                ys = np.concatenate([ys, np.where(done, PAD, nxt)[:, None]], axis=1)
        return out


def _last_position(h):
    return ad.Tensor(h.data[:, -1, :])


# --------------------------------------------------------------------------
# parameter accounting


def input_projection_count(site_params) -> int:
    return sum(1 for n in site_params if n.startswith(("wq", "wk", "wv")))


def count_projection_params(model: DuoTransformer) -> dict:
    """Input projections per attention site, duo/vanilla ratio and totals."""
    sites = {p.rstrip("."): input_projection_count(model.site_params(p))
             for p in model.attention_sites()}
    per_site = set(sites.values())
    return {
        "sites": sites,
        "input_projections": per_site.pop() if len(per_site) == 1 else None,
        "vanilla_input_projections": len(VANILLA_PROJ),
        "ratio": (next(iter(sites.values())) / len(VANILLA_PROJ)) if sites else None,
        "projection_params": sum(p.data.size for n, p in model.params.items()
                                 if n.rsplit(".", 1)[-1].startswith(("wq", "wk", "wv", "wo"))),
        "total": model.num_trainable(),
    }


def transformer_param_formula(cfg: TransformerConfig) -> int:
    """Closed-form trainable parameter count (all tables trainable)."""
    V, d, dff, N, d1 = cfg.vocab_size, cfg.d_model, cfg.d_ff, cfg.n_layers, cfg.d_model1
    if cfg.meta_embeddings:
        streams = 2
        emb = V * d1 + V * d + (d1 * d if d1 != d else 0)
        site = (6 if cfg.kv_sharing else 8) * d * d
        fusion = ((d1 + d) * d + 2 * d * d) if cfg.fusion else 0
    else:
        streams, emb, site, fusion = 1, V * d, 4 * d * d, 0
    ffn = 2 * d * dff
    norm = 2 * d
    enc_layer = site + streams * (ffn + 2 * norm)
    dec_layer = 2 * site + streams * (ffn + 3 * norm)
    return emb + N * (enc_layer + dec_layer) + fusion


def match_vanilla_width(duo_cfg: TransformerConfig, tolerance=0.05) -> TransformerConfig:
    """Single-stream config whose parameter count is closest to ``duo_cfg``'s."""
    target = transformer_param_formula(duo_cfg)
    h = duo_cfg.heads
    step = h if h % 2 == 0 else 2 * h
    best = None
    d = step
    while d <= 4 * duo_cfg.d_model:
        for ratio in (1, 2, 3, 4):
            cand = TransformerConfig(
                vocab_size=duo_cfg.vocab_size, d_model=d, d_ff=ratio * d,
                n_layers=duo_cfg.n_layers, heads=h, dropout=duo_cfg.dropout,
                meta_embeddings=False, ln_eps=duo_cfg.ln_eps)
            gap = abs(transformer_param_formula(cand) - target) / target
            if best is None or gap < best[0]:
                best = (gap, cand)
        d += step
    if best[0] > tolerance:
        raise ConfigError(f"no single-stream width within {tolerance:.0%} of {target} parameters")
    return best[1]
