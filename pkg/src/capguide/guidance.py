"""Pure log-space fusion rules for guided decoding.

Both rules share one core, ``(lm - beta*uncond) + alpha*cond``:

* classifier-free guidance is the core at ``lm = uncond, alpha = beta = gamma``
  (algebraically ``uncond + gamma*(cond - uncond)``), which makes the
  gamma=1 identity bitwise (``uncond - uncond`` cancels exactly) and the
  LM-to-CFG reduction exact by construction;
* language-model guidance is the core itself.

Signed-infinity policy: a token impossible under both captioner heads scores
-inf regardless of the LM; a finite conditional against an impossible
unconditional may produce +inf, which is permitted (it is a forced argmax).
NaN anywhere is an error.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

NEG_INF = float("-inf")
POS_INF = float("inf")


@dataclass(frozen=True)
class CfgGuidance:
    """Fuse the conditional and unconditional heads with scale gamma."""

    gamma: float

    def __post_init__(self):
        if not math.isfinite(self.gamma):
            raise ValidationError(f"gamma must be finite, got {self.gamma!r}")


@dataclass(frozen=True)
class LmGuidance:
    """Fuse an external language model with the captioner heads.

    Negative exponents are permitted.  The prompt is pre-tokenized and must
    not contain BOS or EOS (checked against the scorer vocabulary at decode
    time).
    """

    alpha: float
    beta: float
    prompt: tuple = ()

    def __post_init__(self):
        if not math.isfinite(self.alpha) or not math.isfinite(self.beta):
            raise ValidationError("alpha and beta must be finite")
        object.__setattr__(self, "prompt", tuple(int(t) for t in self.prompt))


# GuidanceSpec: None (conditional head only), CfgGuidance, or LmGuidance.
GuidanceSpec = CfgGuidance | LmGuidance | None


def _as_logprob_array(vec, name: str) -> np.ndarray:
    arr = np.asarray(vec, dtype=np.float64)
    if arr.ndim != 1:
        raise ValidationError(f"{name} must be a vector")
    if np.isnan(arr).any():
        raise ValidationError(f"{name} contains NaN")
    if np.isposinf(arr).any():
        raise ValidationError(f"{name} contains +inf")
    return arr


def _inf_scaled(coeff: float) -> float:
    """coeff * (-inf) under the convention 0 * inf == 0."""
    if coeff > 0:
        return NEG_INF
    if coeff < 0:
        return POS_INF
    return 0.0


def _fuse_core(lm: np.ndarray, cond: np.ndarray, uncond: np.ndarray,
               alpha: float, beta: float) -> np.ndarray:
    neg_c = np.isneginf(cond)
    neg_u = np.isneginf(uncond)
    neg_l = np.isneginf(lm)

    with np.errstate(invalid="ignore"):
        term_c = np.where(neg_c, _inf_scaled(alpha), alpha * cond)
        term_u = np.where(neg_u, -_inf_scaled(beta), (-beta) * uncond)
        out = (lm + term_u) + term_c

        neg = neg_l | np.isneginf(term_c) | np.isneginf(term_u)
        pos = np.isposinf(term_c) | np.isposinf(term_u)
        out = np.where(neg, NEG_INF, out)
        out = np.where(pos, POS_INF, out)

        # lm and uncond both impossible with a possible conditional: the two
        # infinite terms cancel with weight (1 - beta), as in the CFG
        # reduction where lm and uncond are the same head.
        lmu = neg_l & neg_u & ~neg_c
        if lmu.any():
            if beta < 1:
                out = np.where(lmu, NEG_INF, out)
            elif beta > 1:
                out = np.where(lmu, POS_INF, out)
            else:
                out = np.where(lmu, alpha * cond, out)

        # Impossible under both captioner heads: -inf no matter what.
        out = np.where(neg_c & neg_u, NEG_INF, out)
    return out


def cfg_fuse(cond, uncond, gamma: float) -> np.ndarray:
    """uncond + gamma * (cond - uncond), elementwise in log space."""
    if not isinstance(gamma, (int, float)) or not math.isfinite(gamma):
        raise ValidationError(f"gamma must be finite, got {gamma!r}")
    cond = _as_logprob_array(cond, "cond")
    uncond = _as_logprob_array(uncond, "uncond")
    if cond.shape != uncond.shape:
        raise ValidationError("cond and uncond must have the same length")
    return _fuse_core(uncond, cond, uncond, float(gamma), float(gamma))


def lm_fuse(lm, cond, uncond, alpha: float, beta: float) -> np.ndarray:
    """lm + alpha * cond - beta * uncond, elementwise in log space."""
    for name, value in (("alpha", alpha), ("beta", beta)):
        if not isinstance(value, (int, float)) or not math.isfinite(value):
            raise ValidationError(f"{name} must be finite, got {value!r}")
    lm = _as_logprob_array(lm, "lm")
    cond = _as_logprob_array(cond, "cond")
    uncond = _as_logprob_array(uncond, "uncond")
    if not (lm.shape == cond.shape == uncond.shape):
        raise ValidationError("lm, cond and uncond must have the same length")
    return _fuse_core(lm, cond, uncond, float(alpha), float(beta))


def transfer_newline_to_eos(scores, eos_id: int, newline_id: int) -> np.ndarray:
    """Move the newline entry's probability mass onto EOS.

    Returns a new vector with ``out[eos] = logaddexp(scores[eos],
    scores[newline])`` and ``out[newline] = -inf``; other entries unchanged.
    """
    arr = np.asarray(scores, dtype=np.float64)
    if arr.ndim != 1:
        raise ValidationError("scores must be a vector")
    n = arr.shape[0]
    if not (0 <= eos_id < n and 0 <= newline_id < n):
        raise ValidationError("eos/newline ids out of range")
    if eos_id == newline_id:
        raise ValidationError("eos and newline ids must differ")
    if np.isnan(arr).any():
        raise ValidationError("scores contain NaN")
    out = arr.copy()
    out[eos_id] = np.logaddexp(arr[eos_id], arr[newline_id])
    out[newline_id] = NEG_INF
    return out
