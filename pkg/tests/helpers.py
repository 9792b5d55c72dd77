"""Shared test machinery: world generators, exact replay checks, wire stub."""
from __future__ import annotations

import json
import math
import socketserver
import threading
import time

import numpy as np

from capguide.corpus import Conditioning, TabularWorld, Vocabulary, WorldSpec, make_synthetic_world
from capguide.scorer import WIRE_PROTOCOL_VERSION, encode_logprobs

NEG_INF = float("-inf")

GAMMA_GRID = (1.0, 1.2, 1.5, 2.0, 3.0, 4.0)


def make_random_world(rng, n_classes=None, n_words=None, l_max=None, max_support=6):
    """Random small world: vocab <= 8 (3 specials + <=5 words), l_max <= 5."""
    n_classes = n_classes or rng.randint(2, 3)
    n_words = n_words or rng.randint(3, 5)
    l_max = l_max or rng.randint(2, 5)
    words = [f"w{i}" for i in range(n_words)]
    vocab = Vocabulary.from_words(words)
    word_ids = [vocab.id_of(w) for w in words]

    pool = set()
    for _ in range(200):
        if len(pool) >= max_support:
            break
        length = rng.randint(1, l_max - 1)
        pool.add(tuple(rng.choice(word_ids) for _ in range(length)) + (vocab.eos_id,))
    pool = sorted(pool)

    sequences = {}
    for c in range(n_classes):
        k = rng.randint(1, len(pool))
        chosen = rng.sample(pool, k)
        weights = [rng.random() + 0.05 for _ in chosen]
        total = sum(weights)
        sequences[c] = {seq: w / total for seq, w in zip(chosen, weights)}
    raw = [rng.random() + 0.1 for _ in range(n_classes)]
    total = sum(raw)
    priors = {c: raw[c] / total for c in range(n_classes)}
    return TabularWorld(vocab=vocab, priors=priors, sequences=sequences, l_max=l_max)


def make_dominant_path_world(rng, n_classes=None):
    """World whose sequences all start with globally distinct first tokens.

    After the first token both the conditional and marginal continuations are
    deterministic, so greedy decoding provably equals the brute-force argmax
    at every guidance scale (no fused mass is ever split after step one).
    """
    n_classes = n_classes or rng.randint(2, 3)
    n_seqs = rng.randint(2, 5)
    l_max = 5
    first_words = [f"f{i}" for i in range(n_seqs)]
    tail_words = [f"t{i}" for i in range(3)]
    vocab = Vocabulary.from_words(first_words + tail_words)
    seqs = []
    for i in range(n_seqs):
        tail_len = rng.randint(0, l_max - 2)
        tail = tuple(vocab.id_of(rng.choice(tail_words)) for _ in range(tail_len))
        seqs.append((vocab.id_of(first_words[i]),) + tail + (vocab.eos_id,))
    sequences = {}
    for c in range(n_classes):
        k = rng.randint(1, n_seqs)
        chosen = rng.sample(seqs, k)
        weights = [rng.random() + 0.05 for _ in chosen]
        total = sum(weights)
        sequences[c] = {seq: w / total for seq, w in zip(chosen, weights)}
    raw = [rng.random() + 0.1 for _ in range(n_classes)]
    total = sum(raw)
    priors = {c: raw[c] / total for c in range(n_classes)}
    return TabularWorld(vocab=vocab, priors=priors, sequences=sequences, l_max=l_max)


def generic_specific_world(n_classes=4, group_size=4, rho=0.8, seed=7, **kw):
    spec = WorldSpec(n_classes=n_classes, group_size=group_size, generic_mass=rho, **kw)
    return make_synthetic_world(spec, seed=seed)


def conditioning_for(world, class_id):
    return Conditioning.for_class(class_id, len(world.priors))


# ---------------------------------------------------------------------------
# Exact per-step replay against the world's probabilities
# ---------------------------------------------------------------------------

def _prefix_mass(table, gen):
    gen = tuple(gen)
    return math.fsum(p for seq, p in table.items() if seq[: len(gen)] == gen)


def exact_fused_scores(world, class_id, gen, gamma):
    """Fused scores recomputed from exact chain probabilities (fsum-based)."""
    marg = {seq: world.marginal_prob(seq) for seq in world.support()}
    cond_table = world.sequences[class_id]
    v = world.vocab.size
    fused = np.full(v, NEG_INF)
    m_parent = _prefix_mass(marg, gen)
    c_parent = _prefix_mass(cond_table, gen)
    for t in range(v):
        m_child = _prefix_mass(marg, list(gen) + [t])
        c_child = _prefix_mass(cond_table, list(gen) + [t])
        if m_child <= 0.0:
            continue
        u = math.log(m_child) - math.log(m_parent)
        if c_child <= 0.0:
            if gamma > 0:
                continue  # stays -inf
            c = NEG_INF
            fused[t] = u if gamma == 0 else NEG_INF
            continue
        c = math.log(c_child) - math.log(c_parent) if c_parent > 0 else NEG_INF
        fused[t] = u + gamma * (c - u)
    return fused


def assert_per_step_optimal(world, class_id, gamma, tokens, tol=1e-9):
    """Each emitted token must be within tol of the exact per-step argmax."""
    gen = []
    for t in tokens:
        fused = exact_fused_scores(world, class_id, gen, gamma)
        best = fused.max()
        assert fused[t] >= best - tol, (
            f"token {t} scores {fused[t]} but the exact per-step max is {best} "
            f"(gamma={gamma}, prefix={gen})")
        gen.append(t)


# ---------------------------------------------------------------------------
# In-process wire-protocol stub for client tests
# ---------------------------------------------------------------------------

class _StubHandler(socketserver.StreamRequestHandler):
    def handle(self):
        server = self.server
        hello = {
            "op": "hello",
            "protocol": WIRE_PROTOCOL_VERSION,
            "vocab_size": server.scorer.vocab.size,
            "bos_id": server.scorer.vocab.bos_id,
            "eos_id": server.scorer.vocab.eos_id,
            "newline_id": server.scorer.vocab.newline_id,
        }
        hello.update(server.hello_override)
        self.wfile.write(json.dumps(hello).encode() + b"\n")
        for raw in self.rfile:
            try:
                req = json.loads(raw)
            except json.JSONDecodeError:
                return
            req_id = req.get("req_id")
            if server.misbehavior == "sleep":
                time.sleep(1.0)
            if server.misbehavior == "bad_req_id":
                req_id = (req_id or 0) + 1
            if server.misbehavior == "error":
                resp = {"req_id": req_id, "error": "stub induced failure"}
            else:
                try:
                    head = req["head"]
                    prefix = req["prefix"]
                    if head == "cond":
                        cond = Conditioning(vector=tuple(req["conditioning"]))
                        vec = server.scorer.conditional_logprobs(prefix, cond)
                    elif head in ("uncond", "lm"):
                        vec = server.scorer.unconditional_logprobs(prefix)
                    else:
                        raise ValueError(f"unsupported head {head!r}")
                    resp = {"req_id": req_id, "logprobs": encode_logprobs(vec)}
                except Exception as e:
                    resp = {"req_id": req_id, "error": str(e)}
            self.wfile.write(json.dumps(resp).encode() + b"\n")
            self.wfile.flush()


class _QuietTCPServer(socketserver.ThreadingTCPServer):
    def handle_error(self, request, client_address):
        import sys
        exc = sys.exc_info()[1]
        if isinstance(exc, (BrokenPipeError, ConnectionResetError)):
            return
        super().handle_error(request, client_address)


class WireStub:
    """Threaded wire-protocol server wrapping any in-process scorer."""

    def __init__(self, scorer, hello_override=None, misbehavior=None):
        self._server = _QuietTCPServer(("127.0.0.1", 0), _StubHandler)
        self._server.daemon_threads = True
        self._server.scorer = scorer
        self._server.hello_override = hello_override or {}
        self._server.misbehavior = misbehavior
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()

    @property
    def endpoint(self) -> str:
        host, port = self._server.server_address
        return f"{host}:{port}"

    def close(self):
        self._server.shutdown()
        self._server.server_close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
