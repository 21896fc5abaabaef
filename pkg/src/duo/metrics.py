"""Corpus BLEU, perplexity and accuracy."""
import math
from collections import Counter

from .errors import ContractError


def ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(hypotheses, references, max_n=4) -> float:
    """Corpus-level BLEU in [0, 100] with uniform weights and no smoothing.

    One reference per hypothesis. Any zero n-gram precision gives 0.
    """
    if len(hypotheses) != len(references):
        raise ContractError(f"{len(hypotheses)} hypotheses for {len(references)} references")
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            h, r = ngrams(hyp, n), ngrams(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    if hyp_len == 0 or any(m == 0 for m in matches):
        return 0.0
    log_prec = sum(math.log(m / t) for m, t in zip(matches, totals)) / max_n
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_prec)


def perplexity(mean_nll: float) -> float:
    return math.exp(mean_nll)


def accuracy(predictions, labels) -> float:
    if len(predictions) == 0:
        raise ContractError("accuracy of an empty set")
    return sum(int(p == l) for p, l in zip(predictions, labels)) / len(labels)


def token_accuracy(hypotheses, references) -> float:
    """Position-wise matches over the longer of each hypothesis/reference pair."""
    hits = total = 0
    for hyp, ref in zip(hypotheses, references):
        hits += sum(int(a == b) for a, b in zip(hyp, ref))
        total += max(len(hyp), len(ref))
    return hits / total if total else 1.0
