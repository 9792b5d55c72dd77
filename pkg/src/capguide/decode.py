"""Greedy and beam decoding over fused score vectors.

The loop starts from [BOS], fuses the scorer heads according to the guidance
spec, appends the argmax token (ties go to the lowest token id), and stops at
EOS or the length cap.  In LM mode the language model sees
[BOS] + prompt + generated while the captioner heads never see the prompt,
and the newline->EOS mass transfer is applied to every fused vector.

Decoding is deterministic: identical inputs give identical outputs across
runs, batch compositions, and worker counts.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import DecodeError, ValidationError
from .guidance import CfgGuidance, LmGuidance, cfg_fuse, lm_fuse, transfer_newline_to_eos

EOS = "eos"
MAX_LENGTH = "max_length"


@dataclass(frozen=True)
class Greedy:
    pass


@dataclass(frozen=True)
class Beam:
    width: int

    def __post_init__(self):
        if self.width < 1:
            raise ValidationError(f"beam width must be >= 1, got {self.width}")


@dataclass(frozen=True)
class DecodeParams:
    max_length: int = 32
    strategy: object = field(default_factory=Greedy)
    batch_size: int = 1

    def __post_init__(self):
        if self.max_length < 1:
            raise ValidationError(f"max_length must be >= 1, got {self.max_length}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass(frozen=True)
class DecodeResult:
    tokens: tuple
    text: str
    score: float
    terminated_by: str


@dataclass(frozen=True)
class DecodeFailure:
    index: int
    error: str


def _check_lm_setup(scorer, guidance, lm_scorer):
    if getattr(scorer, "vocab", None) is None:
        raise ValidationError(
            "scorer has no vocabulary attached (pass vocab= when connecting a remote scorer)")
    if isinstance(guidance, LmGuidance):
        if lm_scorer is None:
            raise ValidationError("LM guidance requires an lm_scorer")
        vocab = scorer.vocab
        for t in guidance.prompt:
            if t in (vocab.bos_id, vocab.eos_id):
                raise ValidationError("prompt must not contain BOS or EOS")
            if not 0 <= t < vocab.size:
                raise ValidationError(f"prompt token id {t} out of range")


def _fused_scores(scorer, lm_scorer, guidance, conditioning, generated):
    vocab = scorer.vocab
    prefix = [vocab.bos_id] + generated
    if guidance is None:
        return np.asarray(scorer.conditional_logprobs(prefix, conditioning), dtype=np.float64)
    if isinstance(guidance, CfgGuidance):
        cond = scorer.conditional_logprobs(prefix, conditioning)
        uncond = scorer.unconditional_logprobs(prefix)
        return cfg_fuse(cond, uncond, guidance.gamma)
    if isinstance(guidance, LmGuidance):
        lm_prefix = [vocab.bos_id] + list(guidance.prompt) + generated
        lm = lm_scorer.unconditional_logprobs(lm_prefix)
        cond = scorer.conditional_logprobs(prefix, conditioning)
        uncond = scorer.unconditional_logprobs(prefix)
        fused = lm_fuse(lm, cond, uncond, guidance.alpha, guidance.beta)
        return transfer_newline_to_eos(fused, vocab.eos_id, vocab.newline_id)
    raise ValidationError(f"unknown guidance spec {guidance!r}")


def greedy_decode(scorer, guidance, conditioning, params: DecodeParams = DecodeParams(),
                  *, lm_scorer=None, step_hook=None) -> DecodeResult:
    """Per-step argmax of the fused scores until EOS or max_length.

    ``step_hook(step, prefix, fused, chosen)`` is invoked after each fused
    vector is computed; replay checks and traces hang off it.
    """
    _check_lm_setup(scorer, guidance, lm_scorer)
    vocab = scorer.vocab
    generated: list[int] = []
    score = 0.0
    terminated = MAX_LENGTH
    for step in range(params.max_length):
        fused = _fused_scores(scorer, lm_scorer, guidance, conditioning, generated)
        if np.isneginf(fused).all():
            raise DecodeError("no admissible token")
        nxt = int(np.argmax(fused))
        if step_hook is not None:
            step_hook(step, [vocab.bos_id] + generated, fused, nxt)
        score += float(fused[nxt])
        generated.append(nxt)
        if nxt == vocab.eos_id:
            terminated = EOS
            break
    return DecodeResult(
        tokens=tuple(generated),
        text=vocab.text_of(generated),
        score=score,
        terminated_by=terminated,
    )


def beam_decode(scorer, guidance, conditioning, params: DecodeParams = DecodeParams(),
                *, lm_scorer=None) -> list[DecodeResult]:
    """Beam search over cumulative fused scores, no length normalization.

    Hypotheses reaching EOS retire into the result pool; ties break toward
    the higher score and then the lexicographically smaller token sequence.
    Width 1 reproduces greedy decoding token for token.
    """
    if not isinstance(params.strategy, Beam):
        raise ValidationError("beam_decode requires a Beam strategy")
    _check_lm_setup(scorer, guidance, lm_scorer)
    width = params.strategy.width
    vocab = scorer.vocab

    def sort_key(entry):
        tokens, score = entry
        return (-score, tokens)

    active: list[tuple[tuple, float]] = [((), 0.0)]
    pool: list[tuple[tuple, float, str]] = []
    for _ in range(params.max_length):
        candidates = []
        for tokens, score in active:
            fused = _fused_scores(scorer, lm_scorer, guidance, conditioning, list(tokens))
            for t in np.flatnonzero(~np.isneginf(fused)):
                candidates.append((tokens + (int(t),), score + float(fused[t])))
        if not candidates:
            break
        candidates.sort(key=sort_key)
        active = []
        for tokens, score in candidates[:width]:
            if tokens[-1] == vocab.eos_id:
                pool.append((tokens, score, EOS))
            else:
                active.append((tokens, score))
        if not active:
            break
    for tokens, score in active:
        pool.append((tokens, score, MAX_LENGTH))
    if not pool:
        raise DecodeError("no admissible token")
    pool.sort(key=lambda e: (-e[1], e[0]))
    return [
        DecodeResult(tokens=tokens, text=vocab.text_of(tokens), score=score,
                     terminated_by=term)
        for tokens, score, term in pool[:width]
    ]


def _decode_one(scorer, guidance, conditioning, params, lm_scorer):
    if isinstance(params.strategy, Beam):
        return beam_decode(scorer, guidance, conditioning, params, lm_scorer=lm_scorer)
    return greedy_decode(scorer, guidance, conditioning, params, lm_scorer=lm_scorer)


def decode_batch(conditionings, scorer, guidance, params: DecodeParams = DecodeParams(),
                 *, lm_scorer=None):
    """Decode each conditioning independently.

    Slot i holds exactly what a standalone decode of item i would return
    (a DecodeResult, or the beam list under a Beam strategy); failures are
    reported per index as DecodeFailure without aborting the batch.
    """
    items = list(conditionings)

    def run(i):
        try:
            return _decode_one(scorer, guidance, items[i], params, lm_scorer)
        except Exception as e:  # per-item isolation is the contract
            return DecodeFailure(index=i, error=f"{type(e).__name__}: {e}")

    if params.batch_size == 1 or len(items) <= 1:
        return [run(i) for i in range(len(items))]
    with ThreadPoolExecutor(max_workers=params.batch_size) as pool:
        return list(pool.map(run, range(len(items))))
