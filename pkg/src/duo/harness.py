"""Run pipelines shared by the CLI: data loading, model construction,
artifact writing and the multi-run experiments (couple grid, ablation
ladder, convergence comparison).
"""
import csv
import io
import json
import logging
import math
import statistics
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .classifier import DuoClassifier, count_classifier_params
from .config import RunConfig, format_config
from .data import (TASKS, ClassificationData, ParallelData, content_tokens, encode_pairs,
                   gen_keyword_classification, gen_synthetic_parallel, label_index,
                   numericalize_classification, numericalize_parallel, read_classification_tsv,
                   read_parallel, split_validation)
from .embeddings import (DuoEmbeddingPair, EmbeddingTable, Vocabulary, align_table_to_vocab,
                         build_vocab, load_embedding_file, load_source, tokenize)
from .errors import ConfigError, ContractError
from .rng import SplitMix64
from .training import TrainConfig, evaluate, fmt6, seed_streams, train_loop
from .transformer import (DuoTransformer, TransformerConfig, count_projection_params,
                          match_vanilla_width, transformer_param_formula)

logger = logging.getLogger(__name__)

DATA_SALT = 0xDA7A
PRECISIONS = {"float32": np.float32, "float64": np.float64}


def dtype_of(cfg: RunConfig):
    try:
        return PRECISIONS[cfg.train.precision]
    except KeyError:
        raise ConfigError(f"precision must be float32 or float64, got {cfg.train.precision!r}",
                          cfg.line_of("train", "precision")) from None


def data_rng(cfg: RunConfig) -> SplitMix64:
    # data draws stay fixed while model seeds vary across repeated runs
    return SplitMix64(cfg.train.seed ^ DATA_SALT)


def train_config(cfg: RunConfig, task: str, seed=None) -> TrainConfig:
    smoothing = cfg.model.label_smoothing
    if smoothing is None:
        smoothing = 0.1 if task == "translation" else 0.0
    t = cfg.train
    return TrainConfig(batch_size=t.batch_size, max_epochs=t.max_epochs, patience=t.patience,
                       warmup=t.warmup, lr_scale=t.lr_scale, smoothing=smoothing,
                       seed=t.seed if seed is None else seed, eval_bleu=t.eval_bleu)


def _fmt(x):
    return "" if x is None else fmt6(x)


def _csv(rows) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


# --------------------------------------------------------------------------
# classification


@dataclass
class ClassificationTask:
    vocab: Vocabulary
    label_names: list
    train: ClassificationData
    val: ClassificationData


def load_classification(cfg: RunConfig) -> ClassificationTask:
    """Corpus TSV (or the synthetic keyword task) split into train/validation."""
    d = cfg.data
    rng = data_rng(cfg)
    if d.synthetic == "keywords":
        texts, labels = gen_keyword_classification(d.synth_classes, d.synth_train + d.synth_valid, rng)
        split = d.synth_train
        tr_t, tr_l, va_t, va_l = texts[:split], labels[:split], texts[split:], labels[split:]
    elif d.synthetic == "none":
        tr_t, tr_l = read_classification_tsv(cfg.path("corpus"))
        va_path = cfg.path("valid_corpus", required=False)
        va_t, va_l = read_classification_tsv(va_path) if va_path else (None, None)
    else:
        raise ConfigError(f"classification synthetic task must be 'keywords' or 'none', got {d.synthetic!r}",
                          cfg.line_of("data", "synthetic"))
    vocab = build_vocab([tokenize(t) for t in tr_t], d.min_freq)
    label_names = label_index(tr_l + (va_l or []))
    train = numericalize_classification(tr_t, tr_l, vocab, label_names)
    if va_t is None:
        train, val = split_validation(train, rng)
    else:
        val = numericalize_classification(va_t, va_l, vocab, label_names)
    if len(train) == 0 or len(val) == 0:
        raise ConfigError("classification corpus is too small to split")
    return ClassificationTask(vocab, label_names, train, val)


def _classifier_source(cfg, key, given, default_dim):
    if given:
        return given
    path = cfg.path(key, required=False)
    return path or f"learned:{default_dim}"


def build_classifier(cfg: RunConfig, task: ClassificationTask, seed: int,
                     emb_s=None, emb_p=None) -> DuoClassifier:
    m = cfg.model
    init = seed_streams(seed).init
    s = load_source(_classifier_source(cfg, "emb_s", emb_s, m.d_model1 or 16), task.vocab, init)
    p = load_source(_classifier_source(cfg, "emb_p", emb_p, m.d_model2 or 32), task.vocab, init)
    if cfg.data.freeze_pretrained is False:
        for t in (s, p):
            t.trainable = True
    label_num = m.label_num or len(task.label_names)
    if label_num < len(task.label_names):
        raise ConfigError(f"label_num {label_num} < {len(task.label_names)} labels in the corpus",
                          cfg.line_of("model", "label_num"))
    d_ff = m.classifier_d_ff or s.dim + p.dim
    return DuoClassifier(DuoEmbeddingPair(task.vocab, s, p), d_ff, label_num, init,
                         use_softmax=m.use_softmax_pooling, pooling=m.pooling, dropout=m.dropout,
                         dtype=dtype_of(cfg))


# --------------------------------------------------------------------------
# translation


@dataclass
class TranslationTask:
    vocab: Vocabulary
    train: ParallelData
    val: ParallelData
    mapping: dict = field(default_factory=dict)


def load_translation(cfg: RunConfig) -> TranslationTask:
    d = cfg.data
    rng = data_rng(cfg)
    if d.synthetic in TASKS:
        train_pairs, valid_pairs, mapping = gen_synthetic_parallel(
            d.synthetic, d.synth_vocab, (d.synth_min_len, d.synth_max_len), d.synth_train, rng,
            valid_count=d.synth_valid)
        vocab = Vocabulary(content_tokens(d.synth_vocab))
        val = encode_pairs(valid_pairs, vocab) if valid_pairs else None
        train = encode_pairs(train_pairs, vocab)
        if val is None:
            train, val = split_validation(train, rng)
        return TranslationTask(vocab, train, val, mapping)
    if d.synthetic != "none":
        raise ConfigError(f"unknown synthetic task {d.synthetic!r}", cfg.line_of("data", "synthetic"))
    src, tgt = read_parallel(cfg.path("train_src"), cfg.path("train_tgt"))
    vocab = build_vocab([tokenize(t) for t in src + tgt], d.min_freq)
    train = numericalize_parallel(src, tgt, vocab)
    if d.valid_src or d.valid_tgt:
        vsrc, vtgt = read_parallel(cfg.path("valid_src"), cfg.path("valid_tgt"))
        val = numericalize_parallel(vsrc, vtgt, vocab)
    else:
        train, val = split_validation(train, rng)
    if len(train) == 0 or len(val) == 0:
        raise ConfigError("parallel corpus is too small to split")
    return TranslationTask(vocab, train, val)


def transformer_config(cfg: RunConfig, vocab_size: int, **toggles) -> TransformerConfig:
    m, a = cfg.model, cfg.ablation
    opts = dict(meta_embeddings=a.meta_embeddings, kv_sharing=a.kv_sharing,
                duo_norm=a.duo_norm, fusion=a.fusion)
    opts.update(toggles)
    return TransformerConfig(vocab_size=vocab_size, d_model=m.d_model, d_ff=m.d_ff,
                             n_layers=m.n_layers, heads=m.heads, dropout=m.dropout,
                             d_model1=m.d_model1, **opts)


def build_translator(cfg: RunConfig, vocab: Vocabulary, seed: int, tcfg=None) -> DuoTransformer:
    """Translator for ``vocab``; the s stream may come from a pretrained file."""
    init = seed_streams(seed).init
    tcfg = tcfg or transformer_config(cfg, len(vocab))
    p_name = cfg.data.emb_p
    if p_name and p_name != f"learned:{tcfg.d_model}":
        raise ConfigError(f"the translator's p stream is a learned table of width d_model "
                          f"({tcfg.d_model}); got {p_name!r}", cfg.line_of("data", "emb_p"))
    s_name = cfg.path("emb_s", required=False)
    s_table = None
    if s_name and tcfg.meta_embeddings:
        if s_name.startswith("learned:"):
            tcfg = replace(tcfg, d_model1=int(s_name.split(":", 1)[1]))
        else:
            raw = load_embedding_file(s_name)
            if cfg.model.d_model1 and cfg.model.d_model1 != raw.dim:
                raise ConfigError(f"d_model1 = {cfg.model.d_model1} but {s_name} has dim {raw.dim}",
                                  cfg.line_of("model", "d_model1"))
            s_table = align_table_to_vocab(raw, vocab, raw.dim, init, source=s_name).matrix
            tcfg = replace(tcfg, d_model1=raw.dim)
    return DuoTransformer(tcfg, init, dtype_of(cfg), s_table=s_table,
                          train_s_table=cfg.data.freeze_pretrained is not True)


# --------------------------------------------------------------------------
# artifacts


def write_run(out_dir, cfg: RunConfig, result, model, vocab: Vocabulary, label_names=None):
    """history.csv, checkpoint.duo, vocab.txt, config.cfg (+ labels.txt / model.json)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "history.csv").write_text(result.history.to_csv(timing=cfg.train.timing),
                                     encoding="utf-8", newline="\n")
    save_checkpoint(model.state_dict(), out / "checkpoint.duo")
    vocab.save(out / "vocab.txt")
    (out / "config.cfg").write_text(format_config(cfg), encoding="utf-8", newline="\n")
    if label_names is not None:
        (out / "labels.txt").write_text("".join(n + "\n" for n in label_names),
                                        encoding="utf-8", newline="\n")
    if isinstance(model, DuoTransformer):
        (out / "model.json").write_text(json.dumps(model.cfg.as_dict(), indent=1, sort_keys=True) + "\n",
                                        encoding="utf-8", newline="\n")
    return out


def load_translator(checkpoint_path):
    """Rebuild a translator from a checkpoint and its sibling model.json/vocab.txt."""
    ckpt = Path(checkpoint_path)
    run_dir = ckpt.parent
    try:
        meta = json.loads((run_dir / "model.json").read_text(encoding="utf-8"))
        vocab = Vocabulary.load(run_dir / "vocab.txt")
    except OSError as exc:
        raise ConfigError(f"translate needs model.json and vocab.txt next to the checkpoint: {exc}") from None
    tcfg = TransformerConfig(**meta)
    if tcfg.vocab_size != len(vocab):
        raise ContractError(f"vocabulary has {len(vocab)} entries but the model expects {tcfg.vocab_size}")
    model = DuoTransformer(tcfg, SplitMix64(0), np.float64)
    model.load_state_dict(load_checkpoint(ckpt))
    return model, vocab


def translate_lines(model, vocab: Vocabulary, lines, batch_size=64):
    sources = [vocab.numericalize(line) for line in lines]
    out = [""] * len(lines)
    todo = [i for i, s in enumerate(sources) if s]
    for start in range(0, len(todo), batch_size):
        idx = todo[start:start + batch_size]
        for i, hyp in zip(idx, model.greedy_decode([sources[i] for i in idx])):
            out[i] = " ".join(vocab.decode(hyp))
    return out


# --------------------------------------------------------------------------
# parameter report


def _ratio(n, base):
    r = Fraction(n, base)
    return str(r.numerator) if r.denominator == 1 else f"{r.numerator}/{r.denominator}"


def param_report(cfg: RunConfig):
    """Closed-form counts next to live tallies; returns ``(lines, all_equal)``."""
    m = cfg.model
    d1, d2 = m.d_model1 or 300, m.d_model2 or 300
    d_ff = m.classifier_d_ff or d1 + d2
    labels = m.label_num or 20
    formula = count_classifier_params(d1, d2, d_ff, labels)
    vocab = Vocabulary(["x"])
    frozen = lambda d: EmbeddingTable(np.zeros((len(vocab), d)), source="pretrained", trainable=False)
    clf = DuoClassifier(DuoEmbeddingPair(vocab, frozen(d1), frozen(d2)), d_ff, labels, SplitMix64(0),
                        use_softmax=m.use_softmax_pooling)
    live = clf.num_trainable()
    lines = [f"classifier d1={d1} d2={d2} d_ff={d_ff} labels={labels}",
             f"  formula: {formula}",
             f"  live tally: {live}",
             f"  < 0.4M: {'yes' if formula < 400_000 else 'no'}"]
    ok = formula == live

    tcfg = transformer_config(cfg, cfg.data.synth_vocab)
    duo = DuoTransformer(tcfg, SplitMix64(0))
    proj = count_projection_params(duo)
    closed = transformer_param_formula(tcfg)
    vanilla = DuoTransformer(replace(tcfg, meta_embeddings=False), SplitMix64(0))
    van_proj = count_projection_params(vanilla)
    n, base = proj["input_projections"], van_proj["input_projections"]
    lines += [f"translator V={tcfg.vocab_size} d_model={tcfg.d_model} d_model1={tcfg.d_model1} "
              f"d_ff={tcfg.d_ff} N={tcfg.n_layers} h={tcfg.heads}",
              f"  attention sites: {len(proj['sites'])}",
              f"  input projections: {n} (vanilla {base}, ratio {_ratio(n, base)})",
              f"  projection parameters: {proj['projection_params']}",
              f"  closed form: {closed}",
              f"  live tally: {proj['total']}"]
    ok = ok and closed == proj["total"] and n is not None and base == 3
    return lines, ok


# --------------------------------------------------------------------------
# experiments


def _mean_std(xs):
    mean = statistics.fmean(xs)
    return mean, (statistics.stdev(xs) if len(xs) > 1 else 0.0)


def couple_grid(cfg: RunConfig, sources, seeds, on_cell=None):
    """Validation accuracy for every unordered pair of embedding sources.

    Returns ``(cells, csv_text)``; ``cells`` maps ``(i, j)`` with ``i <= j``
    to the mean accuracy over ``seeds``.
    """
    if len(sources) < 2:
        raise ConfigError(f"couple grid needs at least 2 embedding sources, got {len(sources)}")
    task = load_classification(cfg)
    tc = train_config(cfg, "classification")
    cells = {}
    for i in range(len(sources)):
        for j in range(i, len(sources)):
            accs = []
            for seed in seeds:
                model = build_classifier(cfg, task, seed, emb_s=sources[i], emb_p=sources[j])
                result = train_loop(model, task.train, task.val, replace(tc, seed=seed))
                accs.append(result.history.records[result.history.best_epoch - 1].val_metric)
            cells[(i, j)] = statistics.fmean(accs)
            if on_cell is not None:
                on_cell(i, j, cells[(i, j)])
    rows = [["source"] + list(sources)]
    for i, name in enumerate(sources):
        rows.append([name] + [_fmt(cells.get((i, j))) for j in range(len(sources))])
    return cells, _csv(rows)


RUNGS = (
    ("vanilla", dict(meta_embeddings=False, kv_sharing=False, duo_norm=False, fusion=False),
     "single stream; 3 input projections per site; output tied to the embedding table"),
    ("+meta_embeddings", dict(meta_embeddings=True, kv_sharing=False, duo_norm=False, fusion=False),
     "two learned streams; cross-stream attention with separate K and V (6 input projections); "
     "per-stream residual norm; logits summed over both tied tables"),
    ("+kv_sharing", dict(meta_embeddings=True, kv_sharing=True, duo_norm=False, fusion=False),
     "as above with one K/V matrix per stream (4 input projections)"),
    ("+duo_norm", dict(meta_embeddings=True, kv_sharing=True, duo_norm=True, fusion=False),
     "as above with cross-stream residual norm after decoder self-attention"),
    ("+fusion", dict(meta_embeddings=True, kv_sharing=True, duo_norm=True, fusion=True),
     "as above with the fused output layer tied to the projected table concatenation"),
)

ABLATION_HEADER = ("rung", "construction", "params", "input_projections",
                   "bleu_mean", "bleu_std", "ppl_mean", "ppl_std")


@dataclass
class RungResult:
    name: str
    construction: str
    params: int
    input_projections: int
    bleu: list
    ppl: list


def ablation_ladder(cfg: RunConfig, seeds, on_run=None):
    """Train every rung of the cumulative ladder; returns ``(results, csv_text)``."""
    task = load_translation(cfg)
    tc = train_config(cfg, "translation")
    results = []
    for name, toggles, construction in RUNGS:
        tcfg = transformer_config(cfg, len(task.vocab), **toggles)
        bleus, ppls = [], []
        params = proj = None
        for seed in seeds:
            model = build_translator(cfg, task.vocab, seed, tcfg)
            params = model.num_trainable()
            proj = count_projection_params(model)["input_projections"]
            train_loop(model, task.train, task.val, replace(tc, seed=seed, eval_bleu=False))
            metrics = evaluate(model, task.val)
            bleus.append(metrics["bleu"])
            ppls.append(metrics["perplexity"])
            if on_run is not None:
                on_run(name, seed, metrics)
        results.append(RungResult(name, construction, params, proj, bleus, ppls))
    rows = [list(ABLATION_HEADER)]
    for r in results:
        bm, bs = _mean_std(r.bleu)
        pm, ps = _mean_std(r.ppl)
        rows.append([r.name, r.construction, r.params, r.input_projections,
                     fmt6(bm), fmt6(bs), fmt6(pm), fmt6(ps)])
    return results, _csv(rows)


CONVERGENCE_HEADER = ("epoch", "vanilla_ppl", "duo_ppl", "vanilla_bleu", "duo_bleu")


@dataclass
class Convergence:
    duo_params: int
    vanilla_params: int
    curves: dict  # kind -> list over epochs of (mean ppl, mean bleu)
    final_duo_ppl: float
    final_vanilla_ppl: float
    csv_text: str

    @property
    def param_gap(self):
        return abs(self.vanilla_params - self.duo_params) / self.duo_params

    @property
    def duo_wins(self):
        return self.final_duo_ppl <= self.final_vanilla_ppl


def convergence(cfg: RunConfig, seeds, on_epoch=None) -> Convergence:
    """Duo against a parameter-matched single-stream model under one fixed budget.

    Early stopping is off so every run sees exactly ``max_epochs`` epochs.
    """
    task = load_translation(cfg)
    tc = replace(train_config(cfg, "translation"), patience=cfg.train.max_epochs, eval_bleu=True)
    duo_cfg = transformer_config(cfg, len(task.vocab), meta_embeddings=True, kv_sharing=True,
                                 duo_norm=True, fusion=True)
    van_cfg = match_vanilla_width(duo_cfg)
    per_kind = {}
    params = {}
    for kind, tcfg in (("vanilla", van_cfg), ("duo", duo_cfg)):
        runs = []
        for seed in seeds:
            model = DuoTransformer(tcfg, seed_streams(seed).init, dtype_of(cfg))
            params[kind] = model.num_trainable()
            curve = []

            def record(rec, curve=curve, kind=kind, seed=seed):
                curve.append((math.exp(rec.val_loss), rec.val_metric))
                if on_epoch is not None:
                    on_epoch(kind, seed, rec)

            train_loop(model, task.train, task.val, replace(tc, seed=seed), on_epoch=record)
            runs.append(curve)
        per_kind[kind] = [tuple(statistics.fmean(v) for v in zip(*epoch)) for epoch in zip(*runs)]
    rows = [list(CONVERGENCE_HEADER)]
    for e, (van, duo) in enumerate(zip(per_kind["vanilla"], per_kind["duo"]), start=1):
        rows.append([e, fmt6(van[0]), fmt6(duo[0]), fmt6(van[1]), fmt6(duo[1])])
    return Convergence(params["duo"], params["vanilla"], per_kind,
                       per_kind["duo"][-1][0], per_kind["vanilla"][-1][0], _csv(rows))
