"""Caption evaluation metrics.

Reference-based: corpus BLEU-4 (no smoothing), ROUGE-L (beta=1.2), plain
CIDEr (tf-idf n-gram cosine, x10).  Reference-free: an embedding score of the
form 2.5*max(cos, 0) and caption->image recall@k, both over a pluggable
embedder.  The bundled embedder hashes word 1-2-grams into a signed
256-bucket vector, so every value here is deterministic and oracle-checkable.

Tokenization is fixed: lowercase, Unicode punctuation stripped, whitespace
split.  Scores are therefore not bit-comparable with external toolkits that
tokenize differently.
"""
from __future__ import annotations

import hashlib
import math
import unicodedata
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

ROUGE_BETA = 1.2
EMBED_DIM = 256
_UNIT_TOL = 1e-9


def tokenize_for_metrics(text: str) -> list[str]:
    """Lowercase, drop Unicode category-P characters, split on whitespace."""
    out = []
    for raw in text.lower().split():
        word = "".join(ch for ch in raw if not unicodedata.category(ch).startswith("P"))
        if word:
            out.append(word)
    return out


def _ngrams(tokens, n):
    return [tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)]


def _check_aligned(candidates, references):
    if len(candidates) != len(references):
        raise ValidationError(
            f"candidates ({len(candidates)}) and references ({len(references)}) differ in length"
        )
    for i, refs in enumerate(references):
        if not refs:
            raise ValidationError(f"item {i} has an empty reference list")


def bleu4(candidates, references) -> float:
    """Corpus-level BLEU with uniform weights over n=1..4 and no smoothing.

    Clipped n-gram precision; brevity penalty against the closest reference
    length (ties broken toward the shorter reference).  Any zero modified
    precision makes the score 0.
    """
    _check_aligned(candidates, references)
    matches = [0] * 4
    totals = [0] * 4
    cand_len = 0
    ref_len = 0
    for cand, refs in zip(candidates, references):
        ctok = tokenize_for_metrics(cand)
        rtoks = [tokenize_for_metrics(r) for r in refs]
        cand_len += len(ctok)
        ref_len += min((len(r) for r in rtoks), key=lambda L: (abs(L - len(ctok)), L))
        for n in range(1, 5):
            counts = Counter(_ngrams(ctok, n))
            if not counts:
                continue
            best = Counter()
            for rtok in rtoks:
                rcounts = Counter(_ngrams(rtok, n))
                for g, c in rcounts.items():
                    if c > best[g]:
                        best[g] = c
            matches[n - 1] += sum(min(c, best[g]) for g, c in counts.items())
            totals[n - 1] += sum(counts.values())
    precisions = [m / t if t else 0.0 for m, t in zip(matches, totals)]
    if any(p == 0.0 for p in precisions):
        return 0.0
    if cand_len == 0:
        return 0.0
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return bp * math.exp(sum(0.25 * math.log(p) for p in precisions))


def _lcs_length(a, b):
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidates, references, beta: float = ROUGE_BETA) -> float:
    """Mean over items of the best LCS F-measure against any reference."""
    _check_aligned(candidates, references)
    scores = []
    for cand, refs in zip(candidates, references):
        ctok = tokenize_for_metrics(cand)
        best = 0.0
        for ref in refs:
            rtok = tokenize_for_metrics(ref)
            lcs = _lcs_length(ctok, rtok)
            if lcs == 0:
                continue
            recall = lcs / len(rtok)
            precision = lcs / len(ctok)
            denom = recall + beta * beta * precision
            f = (1 + beta * beta) * recall * precision / denom
            best = max(best, f)
        scores.append(best)
    return sum(scores) / len(scores) if scores else 0.0


def _tfidf_vector(tokens, n, idf):
    counts = Counter(_ngrams(tokens, n))
    return {g: c * idf[g] for g, c in counts.items() if g in idf}


def _cider_cosine(ctok, rtok, n, idf):
    u = _tfidf_vector(ctok, n, idf)
    v = _tfidf_vector(rtok, n, idf)
    nu = math.sqrt(math.fsum(x * x for x in u.values()))
    nv = math.sqrt(math.fsum(x * x for x in v.values()))
    if nu == 0.0 and nv == 0.0:
        # No informative n-grams on either side; equal multisets count as a
        # perfect match so exact-copy candidates score 1 at every n.
        return 1.0 if Counter(_ngrams(ctok, n)) == Counter(_ngrams(rtok, n)) else 0.0
    if nu == 0.0 or nv == 0.0:
        return 0.0
    dot = math.fsum(x * v[g] for g, x in u.items() if g in v)
    return dot / (nu * nv)


def cider(candidates, references) -> float:
    """Plain CIDEr: 10x the mean over n=1..4 of the average tf-idf cosine
    between the candidate and each reference.

    Documents are the reference sets; idf(g) = ln((N+1)/df(g)) so that even
    corpus-wide n-grams keep a positive weight and single-item corpora are
    well defined.
    """
    _check_aligned(candidates, references)
    n_items = len(candidates)
    ref_tokens = [[tokenize_for_metrics(r) for r in refs] for refs in references]
    idfs = []
    for n in range(1, 5):
        df = Counter()
        for rtoks in ref_tokens:
            grams = set()
            for rtok in rtoks:
                grams.update(_ngrams(rtok, n))
            df.update(grams)
        idfs.append({g: math.log((n_items + 1) / d) for g, d in df.items()})
    total = 0.0
    for cand, rtoks in zip(candidates, ref_tokens):
        ctok = tokenize_for_metrics(cand)
        item = 0.0
        for n in range(1, 5):
            idf = idfs[n - 1]
            item += math.fsum(_cider_cosine(ctok, rtok, n, idf) for rtok in rtoks) / len(rtoks)
        total += item / 4.0
    return 10.0 * total / n_items if n_items else 0.0


class SyntheticEmbedder:
    """Deterministic stand-in for a learned text/image embedder.

    Word 1- and 2-grams are hashed into ``dim`` signed buckets and the bucket
    counts are L2-normalized.  Identical strings embed identically across
    processes; token-disjoint strings are near-orthogonal in expectation.
    """

    def __init__(self, dim: int = EMBED_DIM):
        if dim < 2:
            raise ValidationError("embedding dimension must be >= 2")
        self.dim = dim

    def embed(self, text: str) -> np.ndarray:
        tokens = tokenize_for_metrics(text)
        vec = np.zeros(self.dim, dtype=np.float64)
        features = tokens + [" ".join(b) for b in _ngrams(tokens, 2)]
        for feat in features:
            digest = hashlib.blake2b(feat.encode("utf-8"), digest_size=8).digest()
            h = int.from_bytes(digest, "big")
            sign = 1.0 if (h >> 40) & 1 == 0 else -1.0
            vec[h % self.dim] += sign
        norm = math.sqrt(float(vec @ vec))
        if norm == 0.0:
            vec[0] = 1.0
            return vec
        return vec / norm


_DEFAULT_EMBEDDER = SyntheticEmbedder()


def synthetic_embed(text: str) -> np.ndarray:
    return _DEFAULT_EMBEDDER.embed(text)


def _check_unit(vec, name):
    norm = math.sqrt(float(np.asarray(vec, dtype=np.float64) @ np.asarray(vec, dtype=np.float64)))
    if abs(norm - 1.0) > 1e-6:
        raise ValidationError(f"{name} must be unit-norm (got norm {norm!r})")


def embed_score(caption_emb, image_emb) -> float:
    """2.5 * max(cos, 0) between unit caption and image embeddings."""
    _check_unit(caption_emb, "caption embedding")
    _check_unit(image_emb, "image embedding")
    cos = float(np.asarray(caption_emb) @ np.asarray(image_emb))
    return 2.5 * max(cos, 0.0)


def ref_only_score(caption_emb, reference_embs) -> float:
    """max over references of cos(caption, reference), clamped at 0."""
    if not len(reference_embs):
        raise ValidationError("reference embedding list must be non-empty")
    _check_unit(caption_emb, "caption embedding")
    best = max(float(np.asarray(caption_emb) @ np.asarray(r)) for r in reference_embs)
    return max(best, 0.0)


def ref_combined_score(embed_s: float, ref_only_s: float) -> float:
    """Harmonic mean of the two scores; 0 if either is 0."""
    if embed_s < 0 or ref_only_s < 0:
        raise ValidationError("scores must be non-negative")
    if embed_s == 0.0 or ref_only_s == 0.0:
        return 0.0
    return 2.0 * embed_s * ref_only_s / (embed_s + ref_only_s)


def recall_at_k(caption_embs, image_embs, ks) -> dict:
    """Caption->image retrieval recall. Pairing is positional; ties in the
    cosine ranking go to the lower image index."""
    n = len(caption_embs)
    if len(image_embs) != n:
        raise ValidationError("caption and image embedding lists differ in length")
    ks = sorted(set(int(k) for k in ks))
    if not ks or ks[0] < 1:
        raise ValidationError("ks must contain integers >= 1")
    if ks[-1] > n:
        raise ValidationError(f"k={ks[-1]} exceeds corpus size {n}")
    caps = np.asarray(caption_embs, dtype=np.float64)
    imgs = np.asarray(image_embs, dtype=np.float64)
    sims = caps @ imgs.T
    ranks = []
    for i in range(n):
        true = sims[i, i]
        better = int(np.sum(sims[i] > true)) + int(np.sum(sims[i, :i] == true))
        ranks.append(better + 1)
    return {k: sum(1 for r in ranks if r <= k) / n for k in ks}


@dataclass(frozen=True)
class LengthStats:
    words_mean: float
    words_sd: float
    chars_mean: float
    chars_sd: float


def _mean_sd(values):
    mean = math.fsum(values) / len(values)
    var = math.fsum((v - mean) ** 2 for v in values) / len(values)
    return mean, math.sqrt(var)


def length_stats(captions) -> LengthStats:
    """Word/character mean and population standard deviation."""
    if not captions:
        raise ValidationError("length_stats requires at least one caption")
    wm, ws = _mean_sd([len(tokenize_for_metrics(c)) for c in captions])
    cm, cs = _mean_sd([len(c) for c in captions])
    return LengthStats(wm, ws, cm, cs)


def mention_rate(captions, phrases, truth=None):
    """Fraction of captions containing any phrase (case-insensitive substring
    over tokenized text) and, when per-caption truth labels are given, the
    fraction of those whose contained phrases include the truth."""
    if not phrases:
        raise ValidationError("phrase list must be non-empty")
    norm_phrases = [" ".join(tokenize_for_metrics(p)) for p in phrases]
    if truth is not None and len(truth) != len(captions):
        raise ValidationError("truth labels must align with captions")
    containing = 0
    correct = 0
    for i, cap in enumerate(captions):
        text = " ".join(tokenize_for_metrics(cap))
        found = {p for p in norm_phrases if p and p in text}
        if not found:
            continue
        containing += 1
        if truth is not None and truth[i] is not None:
            if " ".join(tokenize_for_metrics(truth[i])) in found:
                correct += 1
    rate = containing / len(captions) if captions else 0.0
    if truth is None:
        return rate, None
    precision = correct / containing if containing else 0.0
    return rate, precision


EVAL_CSV_COLUMNS = (
    "label", "bleu4", "rouge_l", "cider", "embed_score", "ref_only",
    "ref_combined", "r@1", "r@5", "r@10", "words_mean", "words_sd",
    "chars_mean", "chars_sd", "mention_rate", "mention_precision",
)


def eval_csv_header(ks=(1, 5, 10)) -> str:
    cols = list(EVAL_CSV_COLUMNS[:7]) + [f"r@{k}" for k in sorted(ks)] + list(EVAL_CSV_COLUMNS[10:])
    return ",".join(cols)


@dataclass
class EvalReport:
    """All metric values for one decoding configuration."""

    label: str
    bleu4: float
    rouge_l: float
    cider: float
    embed_score: float
    ref_only: float
    ref_combined: float
    recall: dict
    words_mean: float
    words_sd: float
    chars_mean: float
    chars_sd: float
    mention_rate: float | None = None
    mention_precision: float | None = None

    def csv_header(self) -> str:
        return eval_csv_header(sorted(self.recall))

    def to_csv_row(self) -> str:
        def fmt(x):
            if x is None:
                return ""
            if isinstance(x, float):
                return repr(x)
            return str(x)

        fields = [self.label, self.bleu4, self.rouge_l, self.cider, self.embed_score,
                  self.ref_only, self.ref_combined]
        fields += [self.recall[k] for k in sorted(self.recall)]
        fields += [self.words_mean, self.words_sd, self.chars_mean, self.chars_sd,
                   self.mention_rate, self.mention_precision]
        return ",".join(fmt(x) for x in fields)

    def to_json_dict(self) -> dict:
        return {
            "label": self.label,
            "bleu4": self.bleu4,
            "rouge_l": self.rouge_l,
            "cider": self.cider,
            "embed_score": self.embed_score,
            "ref_only": self.ref_only,
            "ref_combined": self.ref_combined,
            "recall": {str(k): v for k, v in sorted(self.recall.items())},
            "words_mean": self.words_mean,
            "words_sd": self.words_sd,
            "chars_mean": self.chars_mean,
            "chars_sd": self.chars_sd,
            "mention_rate": self.mention_rate,
            "mention_precision": self.mention_precision,
        }


def build_report(label, candidates, reference_sets, image_embeddings, embedder,
                 ks=(1, 5, 10), phrases=None, truth=None) -> EvalReport:
    """Assemble the full report for one configuration.

    ``image_embeddings`` must be positionally aligned with ``candidates``;
    reductions run in fixed item order so reports are deterministic.
    """
    _check_aligned(candidates, reference_sets)
    if len(image_embeddings) != len(candidates):
        raise ValidationError("image embeddings must align with candidates")
    cand_embs = [embedder.embed(c) for c in candidates]
    ref_embs = [[embedder.embed(r) for r in refs] for refs in reference_sets]

    per_embed = [embed_score(c, v) for c, v in zip(cand_embs, image_embeddings)]
    per_ref_only = [ref_only_score(c, refs) for c, refs in zip(cand_embs, ref_embs)]
    per_combined = [ref_combined_score(a, b) for a, b in zip(per_embed, per_ref_only)]
    n = len(candidates)
    stats = length_stats(candidates)
    rate, precision = (None, None)
    if phrases:
        rate, precision = mention_rate(candidates, phrases, truth)
    return EvalReport(
        label=label,
        bleu4=bleu4(candidates, reference_sets),
        rouge_l=rouge_l(candidates, reference_sets),
        cider=cider(candidates, reference_sets),
        embed_score=math.fsum(per_embed) / n,
        ref_only=math.fsum(per_ref_only) / n,
        ref_combined=math.fsum(per_combined) / n,
        recall=recall_at_k(cand_embs, image_embeddings, ks),
        words_mean=stats.words_mean,
        words_sd=stats.words_sd,
        chars_mean=stats.chars_mean,
        chars_sd=stats.chars_sd,
        mention_rate=rate,
        mention_precision=precision,
    )
