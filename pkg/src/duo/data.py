"""Datasets, batching, corpus readers and synthetic task generators."""
from dataclasses import dataclass, field

import numpy as np

from .embeddings import BOS, EOS, PAD, RESERVED, Vocabulary, build_vocab, tokenize
from .errors import ContractError, ParseError
from .rng import SplitMix64

TASKS = ("copy", "reverse", "lexsub")


@dataclass
class ClassificationData:
    sequences: list  # list of id lists
    labels: list  # list of int

    def __len__(self):
        return len(self.sequences)


@dataclass
class ParallelData:
    sources: list
    targets: list

    def __len__(self):
        return len(self.sources)


@dataclass
class Batch:
    """Padded id matrices. ``ids``/``labels`` for classification,
    ``src``/``tgt_in``/``tgt_out`` for translation."""
    ids: np.ndarray = None
    mask: np.ndarray = None
    labels: np.ndarray = None
    src: np.ndarray = None
    tgt_in: np.ndarray = None
    tgt_out: np.ndarray = None
    indices: list = field(default_factory=list)

    @property
    def size(self):
        return len(self.indices)


def pad_sequences(seqs, width=None) -> np.ndarray:
    width = max(len(s) for s in seqs) if width is None else width
    out = np.full((len(seqs), width), PAD, dtype=np.int64)
    for r, s in enumerate(seqs):
        out[r, :len(s)] = s
    return out


def make_batches(dataset, batch_size: int, rng: SplitMix64 = None, shuffle=True) -> list:
    """Split a dataset into padded batches, optionally in a seeded random order."""
    if batch_size < 1:
        raise ContractError("batch_size must be >= 1")
    n = len(dataset)
    if n == 0:
        raise ContractError("cannot batch an empty dataset")
    order = rng.permutation(n) if shuffle else list(range(n))
    batches = []
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if isinstance(dataset, ClassificationData):
            seqs = [dataset.sequences[i] for i in idx]
            if any(len(s) == 0 for s in seqs):
                raise ContractError("empty sequence in classification data")
            ids = pad_sequences(seqs)
            batches.append(Batch(ids=ids, mask=ids != PAD,
                                 labels=np.array([dataset.labels[i] for i in idx], dtype=np.int64),
                                 indices=idx))
        else:
            src = pad_sequences([dataset.sources[i] for i in idx])
            tgt_in = pad_sequences([[BOS] + list(dataset.targets[i]) for i in idx])
            tgt_out = pad_sequences([list(dataset.targets[i]) + [EOS] for i in idx])
            batches.append(Batch(src=src, mask=src != PAD, tgt_in=tgt_in, tgt_out=tgt_out,
                                 indices=idx))
    return batches


def split_validation(dataset, rng: SplitMix64, fraction=0.1):
    """Hold out a seeded random ``fraction`` of the examples."""
    n = len(dataset)
    order = rng.permutation(n)
    n_val = max(1, int(round(n * fraction)))
    val_idx, train_idx = sorted(order[:n_val]), sorted(order[n_val:])
    if isinstance(dataset, ClassificationData):
        pick = lambda ix: ClassificationData([dataset.sequences[i] for i in ix],
                                             [dataset.labels[i] for i in ix])
    else:
        pick = lambda ix: ParallelData([dataset.sources[i] for i in ix],
                                       [dataset.targets[i] for i in ix])
    return pick(train_idx), pick(val_idx)


# --------------------------------------------------------------------------
# corpus readers


def read_classification_tsv(path):
    """``label<TAB>text`` lines; returns ``(texts, label strings)``."""
    texts, labels = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line:
                continue
            if "\t" not in line:
                raise ParseError("expected label<TAB>text", lineno)
            label, text = line.split("\t", 1)
            if not tokenize(text):
                raise ParseError("empty text", lineno)
            labels.append(label)
            texts.append(text)
    if not texts:
        raise ParseError(f"no examples in {path}")
    return texts, labels


def label_index(labels) -> list:
    """Label strings in first-seen order."""
    seen = {}
    for lab in labels:
        seen.setdefault(lab, len(seen))
    return list(seen)


def read_parallel(src_path, tgt_path):
    with open(src_path, encoding="utf-8") as fs, open(tgt_path, encoding="utf-8") as ft:
        src = [l.rstrip("\r\n") for l in fs]
        tgt = [l.rstrip("\r\n") for l in ft]
    if len(src) != len(tgt):
        raise ParseError(f"parallel files differ in length: {len(src)} vs {len(tgt)}")
    return src, tgt


def numericalize_classification(texts, labels, vocab: Vocabulary, label_names):
    lab = {name: i for i, name in enumerate(label_names)}
    return ClassificationData([vocab.numericalize(t) for t in texts], [lab[l] for l in labels])


def numericalize_parallel(src_texts, tgt_texts, vocab: Vocabulary):
    pairs = [(vocab.numericalize(s), vocab.numericalize(t)) for s, t in zip(src_texts, tgt_texts)]
    pairs = [(s, t) for s, t in pairs if s and t]
    return ParallelData([s for s, _ in pairs], [t for _, t in pairs])


# --------------------------------------------------------------------------
# synthetic tasks


def content_tokens(vocab_size: int) -> list:
    n = vocab_size - len(RESERVED)
    if n < 2:
        raise ContractError(f"vocab_size {vocab_size} leaves fewer than 2 content tokens")
    return [f"w{i}" for i in range(n)]


def gen_synthetic_parallel(task: str, vocab_size: int, length_range, count: int,
                           rng: SplitMix64, valid_count: int = 0):
    """Token-string pairs for the copy/reverse/lexsub tasks.

    ``vocab_size`` includes the four reserved ids. Source sequences are unique
    across the whole draw, so the train and validation splits are disjoint.
    Returns ``(train_pairs, valid_pairs, mapping)`` where ``mapping`` is the
    lexsub bijection (identity for the other tasks).
    """
    if task not in TASKS:
        raise ContractError(f"unknown synthetic task {task!r}")
    tokens = content_tokens(vocab_size)
    lo, hi = length_range
    if not 1 <= lo <= hi:
        raise ContractError(f"bad length range {length_range}")
    total = count + valid_count
    space = sum(len(tokens) ** L for L in range(lo, hi + 1))
    if total > space:
        raise ContractError(f"{total} distinct sequences requested but only {space} exist")
    perm = rng.permutation(len(tokens))
    mapping = {t: tokens[perm[i]] for i, t in enumerate(tokens)} if task == "lexsub" \
        else {t: t for t in tokens}
    seen = set()
    pairs = []
    while len(pairs) < total:
        L = lo + rng.randbelow(hi - lo + 1)
        src = tuple(tokens[rng.randbelow(len(tokens))] for _ in range(L))
        if src in seen:
            continue
        seen.add(src)
        if task == "reverse":
            tgt = src[::-1]
        else:
            tgt = tuple(mapping[t] for t in src)
        pairs.append((list(src), list(tgt)))
    return pairs[:count], pairs[count:], mapping


def gen_keyword_classification(num_classes: int, count: int, rng: SplitMix64,
                               keywords_per_class=4, filler=40, length_range=(6, 14),
                               keywords_per_example=(1, 3)):
    """Texts whose class is given by the keywords they contain, mixed with filler words."""
    keywords = [[f"k{c}_{j}" for j in range(keywords_per_class)] for c in range(num_classes)]
    fillers = [f"f{j}" for j in range(filler)]
    texts, labels = [], []
    for _ in range(count):
        c = rng.randbelow(num_classes)
        L = length_range[0] + rng.randbelow(length_range[1] - length_range[0] + 1)
        k = keywords_per_example[0] + rng.randbelow(keywords_per_example[1] - keywords_per_example[0] + 1)
        words = [fillers[rng.randbelow(filler)] for _ in range(L)]
        for _ in range(min(k, L)):
            words[rng.randbelow(L)] = keywords[c][rng.randbelow(keywords_per_class)]
        texts.append(" ".join(words))
        labels.append(f"c{c}")
    return texts, labels


def build_parallel_vocab(pairs, min_freq=1) -> Vocabulary:
    return build_vocab([s for s, _ in pairs] + [t for _, t in pairs], min_freq)


def encode_pairs(pairs, vocab: Vocabulary) -> ParallelData:
    return ParallelData([vocab.encode(s) for s, _ in pairs], [vocab.encode(t) for _, t in pairs])
