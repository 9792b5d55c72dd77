"""Exact brute-force machinery over tabular worlds.

Everything here enumerates the full support and works in log space with
compensated summation for marginals, so decode and fusion code can be checked
against ground truth rather than against itself.  Objective ties are detected
with a tiny relative tolerance (exact mathematical ties round differently in
float64) and resolved by maximal PMI, then lexicographically smallest
sequence; that rule makes the guidance-scale monotonicity statements hold
verbatim even at ties.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

from .corpus import TabularWorld
from .errors import ValidationError

NEG_INF = float("-inf")
TIE_TOL = 1e-12
ENUMERATION_LIMIT = 10**6


@dataclass(frozen=True)
class SequenceEntry:
    tokens: tuple
    cond_logp: dict  # class id -> log p(x|y), -inf off support
    marginal_logp: float


@dataclass
class SequenceTable:
    entries: list
    class_ids: list

    def entry(self, tokens) -> SequenceEntry:
        tokens = tuple(tokens)
        for e in self.entries:
            if e.tokens == tokens:
                return e
        raise ValidationError(f"sequence {list(tokens)} not in the enumerated support")


def enumerate_sequences(world: TabularWorld, l_max: int | None = None,
                        limit: int = ENUMERATION_LIMIT) -> SequenceTable:
    """Every supported sequence with exact per-class and marginal log-probs."""
    support = world.support()
    if l_max is not None:
        support = [s for s in support if len(s) <= l_max]
    if len(support) > limit:
        raise ValidationError(
            f"support holds {len(support)} sequences, above the enumeration limit {limit}")
    entries = []
    for seq in support:
        cond = {}
        for c in world.class_ids:
            p = world.sequences[c].get(seq)
            cond[c] = math.log(p) if p else NEG_INF
        marginal = world.marginal_prob(seq)
        entries.append(SequenceEntry(
            tokens=seq,
            cond_logp=cond,
            marginal_logp=math.log(marginal) if marginal > 0 else NEG_INF,
        ))
    return SequenceTable(entries=entries, class_ids=list(world.class_ids))


def pmi(world: TabularWorld, tokens, class_id: int) -> float:
    """log p(x|y) - log p(x); -inf off support by convention."""
    seq = tuple(tokens)
    if class_id not in world.priors:
        raise ValidationError(f"unknown class id {class_id}")
    p_cond = world.sequences[class_id].get(seq, 0.0)
    p_marg = world.marginal_prob(seq)
    if p_cond <= 0.0 or p_marg <= 0.0:
        return NEG_INF
    return math.log(p_cond) - math.log(p_marg)


def pmi_k(world: TabularWorld, tokens, class_id: int, k: float) -> float:
    """k * log p(x,y) - log p(x) - log p(y); -inf off support."""
    seq = tuple(tokens)
    if class_id not in world.priors:
        raise ValidationError(f"unknown class id {class_id}")
    prior = world.priors[class_id]
    p_cond = world.sequences[class_id].get(seq, 0.0)
    p_marg = world.marginal_prob(seq)
    if p_cond <= 0.0 or p_marg <= 0.0 or prior <= 0.0:
        return NEG_INF
    log_joint = math.log(prior) + math.log(p_cond)
    return k * log_joint - math.log(p_marg) - math.log(prior)


def _weighted(coeff: float, logp: float) -> float:
    # 0 * (-inf) == 0 so that a zero exponent really drops the factor.
    if logp == NEG_INF:
        return NEG_INF if coeff > 0 else (0.0 if coeff == 0 else math.inf)
    return coeff * logp


def _select(scored):
    """Max objective with tie tolerance, ties by (max pmi, lexicographic)."""
    best = max(obj for obj, _, _ in scored)
    if best == NEG_INF:
        raise ValidationError("objective is -inf on the entire support")
    tol = TIE_TOL * max(1.0, abs(best))
    ties = [(p, tokens, obj) for obj, p, tokens in scored if obj >= best - tol]
    ties.sort(key=lambda e: (-e[0], e[1]))
    pmi_val, tokens, obj = ties[0]
    return tokens, obj


def brute_force_argmax_cfg(world: TabularWorld, class_id: int, gamma: float,
                           table: SequenceTable | None = None):
    """Global maximizer of log p(x) + gamma * (log p(x|y) - log p(x))."""
    if class_id not in world.priors:
        raise ValidationError(f"unknown class id {class_id}")
    if table is None:
        table = enumerate_sequences(world)
    scored = []
    for e in table.entries:
        lp_c = e.cond_logp[class_id]
        lp_x = e.marginal_logp
        p = lp_c - lp_x if lp_c != NEG_INF else NEG_INF
        obj_term = _weighted(gamma, p)
        obj = NEG_INF if (lp_x == NEG_INF or obj_term == NEG_INF) else lp_x + obj_term
        scored.append((obj, p, e.tokens))
    return _select(scored)


def brute_force_argmax_lm(world: TabularWorld, q, alpha: float, beta: float,
                          class_id: int, table: SequenceTable | None = None):
    """Global maximizer of log q(x) + alpha * log p(x|y) - beta * log p(x).

    ``q`` maps a token sequence to a log-probability and must cover the
    world's support.
    """
    if class_id not in world.priors:
        raise ValidationError(f"unknown class id {class_id}")
    if table is None:
        table = enumerate_sequences(world)
    scored = []
    for e in table.entries:
        lp_c = e.cond_logp[class_id]
        lp_x = e.marginal_logp
        lq = float(q(e.tokens))
        p = lp_c - lp_x if lp_c != NEG_INF else NEG_INF
        terms = (lq, _weighted(alpha, lp_c), -_weighted(beta, lp_x))
        if any(t == NEG_INF for t in terms):
            obj = NEG_INF
        elif any(t == math.inf for t in terms):
            obj = math.inf
        else:
            obj = (terms[0] + terms[2]) + terms[1]
        scored.append((obj, p, e.tokens))
    return _select(scored)


@dataclass(frozen=True)
class ParetoPoint:
    gamma: float
    cond_logprob: float
    pmi: float
    tokens: tuple


def pareto_curve(world: TabularWorld, class_id: int, gammas) -> list[ParetoPoint]:
    """Per gamma: the brute-force maximizer's conditional log-likelihood and
    PMI.  Gammas must be sorted ascending."""
    gammas = [float(g) for g in gammas]
    if gammas != sorted(gammas):
        raise ValidationError("gammas must be sorted ascending")
    table = enumerate_sequences(world)
    points = []
    for g in gammas:
        tokens, _ = brute_force_argmax_cfg(world, class_id, g, table=table)
        entry = table.entry(tokens)
        points.append(ParetoPoint(
            gamma=g,
            cond_logprob=entry.cond_logp[class_id],
            pmi=entry.cond_logp[class_id] - entry.marginal_logp,
            tokens=tokens,
        ))
    return points


def curve_to_json_dict(world: TabularWorld, class_id: int, points) -> dict:
    """Fixture-friendly dump of a Pareto curve and its argmax sequences."""
    return {
        "class_id": class_id,
        "points": [
            {
                "gamma": p.gamma,
                "cond_logprob": p.cond_logprob,
                "pmi": p.pmi,
                "tokens": list(p.tokens),
                "text": world.vocab.text_of(p.tokens),
            }
            for p in points
        ],
    }


def dump_curve(world: TabularWorld, class_id: int, points, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(curve_to_json_dict(world, class_id, points), f, indent=2)
        f.write("\n")
