"""Corpus-level caption metrics, implemented from scratch.

All metrics consume an EvalCorpus: per image one candidate token list
and at least one reference token list. BLEU, ROUGE-L and METEOR sit in
[0, 1]; CIDEr is nonnegative (roughly [0, 10] per its x10 scale). The
report helper rescales everything by 100.

METEOR here is a simplified variant: exact-match alignment only (an
optional crude suffix stemmer, off by default), no synonym resources.
Scores are not comparable with METEOR implementations that use them.
"""

from __future__ import annotations

import itertools
import math
import warnings
from collections import Counter
from dataclasses import dataclass

REPORT_KEYS = ("BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4",
               "METEOR", "ROUGE-L", "CIDEr")


@dataclass
class EvalCorpus:
    """One (candidate, references) pair per image."""

    entries: list[tuple[list[str], list[list[str]]]]

    def __post_init__(self):
        if not self.entries:
            raise ValueError("evaluation corpus is empty")
        for cand, refs in self.entries:
            if not cand:
                raise ValueError("candidate token list is empty")
            if not refs or any(not r for r in refs):
                raise ValueError("every image needs nonempty references")

    def __len__(self):
        return len(self.entries)


def _ngram_counts(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


# ---------------------------------------------------------------------------
# BLEU


def bleu(corpus: EvalCorpus, max_n: int = 4) -> float:
    """Corpus-level BLEU: clipped n-gram precision, geometric mean over
    orders 1..max_n, brevity penalty from closest-reference lengths."""
    if not 1 <= max_n <= 4:
        raise ValueError(f"max_n must be in 1..4, got {max_n}")
    matched = [0] * max_n
    total = [0] * max_n
    cand_len = 0
    ref_len = 0
    for cand, refs in corpus.entries:
        cand_len += len(cand)
        # closest reference length; ties break toward the shorter one
        ref_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for n in range(1, max_n + 1):
            counts = _ngram_counts(cand, n)
            ceiling: Counter = Counter()
            for ref in refs:
                for gram, c in _ngram_counts(ref, n).items():
                    ceiling[gram] = max(ceiling[gram], c)
            matched[n - 1] += sum(min(c, ceiling[gram]) for gram, c in counts.items())
            total[n - 1] += max(0, len(cand) - n + 1)
    if any(t == 0 for t in total):
        return 0.0
    precisions = [m / t for m, t in zip(matched, total)]
    if any(p == 0.0 for p in precisions):
        return 0.0
    geo_mean = math.exp(sum(math.log(p) for p in precisions) / max_n)
    brevity = 1.0 if cand_len >= ref_len else math.exp(1.0 - ref_len / cand_len)
    return brevity * geo_mean


# ---------------------------------------------------------------------------
# ROUGE-L


def _lcs_length(a: list[str], b: list[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(cur[j - 1], prev[j]))
        prev = cur
    return prev[-1]


def rouge_l(corpus: EvalCorpus, beta: float = 1.2) -> float:
    """Mean over images of the best LCS F-measure against any reference."""
    scores = []
    for cand, refs in corpus.entries:
        best = 0.0
        for ref in refs:
            lcs = _lcs_length(cand, ref)
            if lcs == 0:
                continue
            precision = lcs / len(cand)
            recall = lcs / len(ref)
            f = ((1 + beta ** 2) * precision * recall
                 / (recall + beta ** 2 * precision))
            best = max(best, f)
        scores.append(best)
    return sum(scores) / len(scores)


# ---------------------------------------------------------------------------
# CIDEr


def cider(corpus: EvalCorpus, max_n: int = 4, sigma: float = 6.0,
          d_variant: bool = True) -> float:
    """TF-IDF n-gram cosine consensus, averaged over orders, scaled by 10.

    The default follows the D variant: reference-clipped counts and a
    Gaussian penalty on the candidate/reference length gap. IDF document
    frequency counts images whose reference set contains the n-gram.
    """
    n_images = len(corpus)
    if n_images == 1:
        warnings.warn("CIDEr over a single image has all-zero IDF; returning 0",
                      stacklevel=2)
        return 0.0
    doc_freq: Counter = Counter()
    for _, refs in corpus.entries:
        seen: set = set()
        for ref in refs:
            for n in range(1, max_n + 1):
                seen.update(_ngram_counts(ref, n))
        doc_freq.update(seen)
    log_n = math.log(n_images)

    def tfidf(tokens):
        vecs = []
        norms = []
        for n in range(1, max_n + 1):
            vec = {gram: count * (log_n - math.log(max(1.0, doc_freq[gram])))
                   for gram, count in _ngram_counts(tokens, n).items()}
            vecs.append(vec)
            norms.append(math.sqrt(sum(w * w for w in vec.values())))
        return vecs, norms

    scores = []
    for cand, refs in corpus.entries:
        c_vecs, c_norms = tfidf(cand)
        sims = []
        for ref in refs:
            r_vecs, r_norms = tfidf(ref)
            per_n = []
            for n in range(max_n):
                if d_variant:
                    dot = sum(min(w, r_vecs[n].get(gram, 0.0)) * r_vecs[n].get(gram, 0.0)
                              for gram, w in c_vecs[n].items())
                else:
                    dot = sum(w * r_vecs[n].get(gram, 0.0)
                              for gram, w in c_vecs[n].items())
                if c_norms[n] > 0 and r_norms[n] > 0:
                    val = dot / (c_norms[n] * r_norms[n])
                else:
                    val = 0.0
                if d_variant:
                    delta = len(cand) - len(ref)
                    val *= math.exp(-(delta ** 2) / (2 * sigma ** 2))
                per_n.append(val)
            sims.append(sum(per_n) / max_n)
        scores.append(10.0 * sum(sims) / len(sims))
    return sum(scores) / len(scores)


# ---------------------------------------------------------------------------
# METEOR (simplified)

_STEM_SUFFIXES = ("ing", "ed", "es", "s")


def _crude_stem(token: str) -> str:
    for suffix in _STEM_SUFFIXES:
        if token.endswith(suffix) and len(token) > len(suffix) + 2:
            return token[:-len(suffix)]
    return token


_SEARCH_LIMIT = 4096


def _alignment_chunks(cand: list[str], ref: list[str]) -> tuple[int, int]:
    """(matches, chunks) of a max-match alignment with (bounded) minimal chunks.

    Matches per token type are forced to min(count_c, count_r). Which
    occurrences pair up still varies; occurrences of one type always
    pair in position order, and when the number of occurrence choices is
    small we search them all for the fewest chunks, otherwise we take
    the leftmost ones.
    """
    c_pos: dict[str, list[int]] = {}
    for i, tok in enumerate(cand):
        c_pos.setdefault(tok, []).append(i)
    r_pos: dict[str, list[int]] = {}
    for j, tok in enumerate(ref):
        r_pos.setdefault(tok, []).append(j)

    types = []
    n_choices = 1
    for tok, cps in c_pos.items():
        rps = r_pos.get(tok)
        if not rps:
            continue
        m = min(len(cps), len(rps))
        types.append((cps, rps, m))
        n_choices *= math.comb(len(cps), m) * math.comb(len(rps), m)
    matches = sum(m for _, _, m in types)
    if matches == 0:
        return 0, 0

    def chunks_of(pairs: list[tuple[int, int]]) -> int:
        pairs = sorted(pairs)
        count = 1
        for (c0, r0), (c1, r1) in zip(pairs, pairs[1:]):
            if c1 != c0 + 1 or r1 != r0 + 1:
                count += 1
        return count

    if n_choices <= _SEARCH_LIMIT:
        best = matches  # chunks can never exceed matches
        options = [
            [list(zip(cs, rs))
             for cs in itertools.combinations(cps, m)
             for rs in itertools.combinations(rps, m)]
            for cps, rps, m in types
        ]
        for combo in itertools.product(*options):
            best = min(best, chunks_of([p for group in combo for p in group]))
        return matches, best
    pairs = [p for cps, rps, m in types for p in zip(cps[:m], rps[:m])]
    return matches, chunks_of(pairs)


def meteor_simplified(corpus: EvalCorpus, alpha: float = 0.9, beta: float = 3.0,
                      gamma: float = 0.5, stem: bool = False) -> float:
    """Unigram-alignment METEOR without synonym stages.

    Per image the best reference score wins; the corpus score is the
    mean. Score = F_mean * (1 - gamma * (chunks/matches)^beta) with
    F_mean = P*R / (alpha*P + (1-alpha)*R).
    """
    scores = []
    for cand, refs in corpus.entries:
        if stem:
            cand = [_crude_stem(t) for t in cand]
            refs = [[_crude_stem(t) for t in ref] for ref in refs]
        best = 0.0
        for ref in refs:
            matches, chunks = _alignment_chunks(cand, ref)
            if matches == 0:
                continue
            precision = matches / len(cand)
            recall = matches / len(ref)
            f_mean = (precision * recall
                      / (alpha * precision + (1 - alpha) * recall))
            penalty = gamma * (chunks / matches) ** beta
            best = max(best, f_mean * (1.0 - penalty))
        scores.append(best)
    return sum(scores) / len(scores)


# ---------------------------------------------------------------------------


def evaluation_report(corpus: EvalCorpus) -> dict[str, float]:
    """All metrics on the x100 scale, keyed like published score tables."""
    report = {f"BLEU-{n}": 100.0 * bleu(corpus, n) for n in range(1, 5)}
    report["METEOR"] = 100.0 * meteor_simplified(corpus)
    report["ROUGE-L"] = 100.0 * rouge_l(corpus)
    report["CIDEr"] = 100.0 * cider(corpus)
    return report
