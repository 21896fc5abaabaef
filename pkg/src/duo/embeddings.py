"""Vocabularies, pretrained vector files and the paired embedding tables."""
import io
import logging
import unicodedata
from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DimensionError, ParseError
from .rng import SplitMix64, xavier_uniform

logger = logging.getLogger(__name__)

PAD, UNK, BOS, EOS = 0, 1, 2, 3
RESERVED = ("<pad>", "<unk>", "<bos>", "<eos>")


def tokenize(text: str) -> list:
    """Lowercase, NFC-normalize and split on Unicode whitespace."""
    return unicodedata.normalize("NFC", text.lower()).split()


class Vocabulary:
    def __init__(self, tokens=()):
        self.itos = list(RESERVED)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        for tok in tokens:
            if tok in self.stoi:
                raise ContractError(f"duplicate vocabulary token {tok!r}")
            self.stoi[tok] = len(self.itos)
            self.itos.append(tok)

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def lookup(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def token(self, idx: int) -> str:
        return self.itos[idx]

    def encode(self, tokens) -> list:
        return [self.lookup(t) for t in tokens]

    def decode(self, ids) -> list:
        return [self.itos[i] for i in ids]

    def numericalize(self, text: str) -> list:
        return self.encode(tokenize(text))

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for tok in self.itos[len(RESERVED):]:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls(line.rstrip("\n") for line in fh if line.rstrip("\n"))


def build_vocab(corpus, min_freq: int = 1) -> Vocabulary:
    """Vocabulary ordered by frequency, ties broken by first appearance."""
    if min_freq < 1:
        raise ContractError("min_freq must be >= 1")
    counts = Counter()
    first = {}
    for seq in corpus:
        for tok in seq:
            counts[tok] += 1
            first.setdefault(tok, len(first))
    if not counts:
        raise ContractError("cannot build a vocabulary from an empty corpus")
    kept = [t for t in counts if counts[t] >= min_freq and t not in RESERVED]
    kept.sort(key=lambda t: (-counts[t], first[t]))
    return Vocabulary(kept)


@dataclass
class ParsedEmbeddings:
    vectors: dict
    dim: int
    duplicates: int = 0


def parse_embedding_text(stream, expected_dim=None) -> ParsedEmbeddings:
    """Read GloVe-style lines, with or without a word2vec ``count dim`` header.

    The first occurrence of a duplicated token wins; later ones are counted.
    """
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    vectors = {}
    dim = expected_dim
    duplicates = 0
    header_count = None
    saw_line = False
    for lineno, raw in enumerate(stream, start=1):
        line = raw.rstrip("\r\n").rstrip(" ")
        if not line:
            continue
        fields = line.split(" ")
        if not saw_line:
            saw_line = True
            if len(fields) == 2 and expected_dim != 1 and all(f.isdigit() for f in fields):
                header_count, hdim = int(fields[0]), int(fields[1])
                if dim is not None and hdim != dim:
                    raise ParseError(f"header dimension {hdim}, expected {dim}", lineno)
                dim = hdim
                continue
        token, values = fields[0], fields[1:]
        if dim is None:
            dim = len(values)
            if dim == 0:
                raise ParseError("line has a token but no vector", lineno)
        if len(values) != dim:
            raise ParseError(f"vector has {len(values)} components, expected {dim}", lineno)
        try:
            vec = np.array([float(v) for v in values], dtype=np.float64)
        except ValueError as exc:
            raise ParseError(f"non-numeric field ({exc})", lineno) from None
        if not np.isfinite(vec).all():
            raise ParseError("non-finite vector component", lineno)
        if token in vectors:
            duplicates += 1
            continue
        vectors[token] = vec
    if not saw_line:
        raise ParseError("empty embedding file")
    if dim is None or (not vectors and header_count is None):
        raise ParseError("no vectors found")
    if header_count is not None and header_count != len(vectors) + duplicates:
        logger.warning("header announces %d vectors, read %d", header_count, len(vectors) + duplicates)
    if duplicates:
        logger.warning("%d duplicate tokens ignored (first occurrence kept)", duplicates)
    return ParsedEmbeddings(vectors, dim, duplicates)


def load_embedding_file(path, expected_dim=None) -> ParsedEmbeddings:
    with open(path, encoding="utf-8") as fh:
        return parse_embedding_text(fh, expected_dim)


def format_float32(x) -> str:
    """Shortest decimal string that reads back to the same float32."""
    return np.format_float_positional(np.float32(x), unique=True, trim="-")


@dataclass
class EmbeddingTable:
    matrix: np.ndarray  # [|V|, dim]
    source: str = "learned"
    coverage: float = 0.0
    trainable: bool = True

    @property
    def dim(self):
        return self.matrix.shape[1]

    def write_text(self, vocab: Vocabulary, stream, include_reserved=False):
        start = 0 if include_reserved else len(RESERVED)
        for i in range(start, len(vocab)):
            vals = " ".join(format_float32(v) for v in self.matrix[i])
            stream.write(f"{vocab.token(i)} {vals}\n")


def align_table_to_vocab(raw, vocab: Vocabulary, dim: int, rng: SplitMix64,
                         source="learned", noise=0.01) -> EmbeddingTable:
    """Lay out vectors in vocabulary order.

    ``raw`` is a :class:`ParsedEmbeddings` (or ``None`` for a randomly
    initialized, learned table). Tokens missing from the file get the unknown
    row plus small Gaussian noise; the unknown row is the mean of every loaded
    vector. The padding row is all zeros.
    """
    n = len(vocab)
    if raw is None:
        mat = xavier_uniform(rng, (n, dim))
        mat[PAD] = 0.0
        return EmbeddingTable(mat, source=source, coverage=0.0, trainable=True)
    if raw.dim != dim:
        raise DimensionError(f"embedding file has dim {raw.dim}, expected {dim}")
    if raw.vectors:
        unk = np.mean(np.stack(list(raw.vectors.values())), axis=0)
    else:
        unk = np.zeros(dim)
    mat = np.zeros((n, dim), dtype=np.float64)
    mat[UNK] = unk
    found = 0
    for i in range(len(RESERVED), n):
        vec = raw.vectors.get(vocab.token(i))
        if vec is not None:
            mat[i] = vec
            found += 1
        else:
            mat[i] = unk + rng.normal((dim,), sigma=noise)
    for i in (BOS, EOS):
        mat[i] = unk + rng.normal((dim,), sigma=noise)
    coverage = found / max(n - len(RESERVED), 1)
    logger.info("%s: %.1f%% of %d vocabulary tokens found", source, 100 * coverage, n - len(RESERVED))
    return EmbeddingTable(mat, source=source, coverage=coverage, trainable=False)


def load_source(name: str, vocab: Vocabulary, rng: SplitMix64) -> EmbeddingTable:
    """Build a table from ``"learned:<dim>"`` or a path to a vector file."""
    if name.startswith("learned:"):
        try:
            dim = int(name.split(":", 1)[1])
        except ValueError:
            raise ContractError(f"bad learned source {name!r}") from None
        return align_table_to_vocab(None, vocab, dim, rng, source=name)
    raw = load_embedding_file(name)
    return align_table_to_vocab(raw, vocab, raw.dim, rng, source=name)


@dataclass
class DuoEmbeddingPair:
    vocab: Vocabulary
    s: EmbeddingTable
    p: EmbeddingTable

    def __post_init__(self):
        for table in (self.s, self.p):
            if table.matrix.shape[0] != len(self.vocab):
                raise DimensionError("embedding table rows must match vocabulary size")

    @property
    def d_model1(self):
        return self.s.dim

    @property
    def d_model2(self):
        return self.p.dim


def embed_sequence_duo(ids, pair: DuoEmbeddingPair, dtype=np.float64):
    """Look up one token sequence in both tables; returns ``(S, P)``."""
    ids = np.asarray(ids, dtype=np.int64)
    S = ad.embedding(ad.constant(pair.s.matrix, dtype), ids)
    P = ad.embedding(ad.constant(pair.p.matrix, dtype), ids)
    return S, P


def project_stream(x, W):
    """Linear map fixing a stream's width to the model width."""
    return ad.matmul(x, W)
