"""Next-token scorers behind a single contract.

Every backend answers the same two questions for a BOS-initial prefix:
normalized next-token log-probabilities given the conditioning, and the same
under the all-zeros (unconditional) sentinel.  Backends: exact tabular world,
its marginal view, a conditional n-gram model with masking, and a JSON-lines
wire-protocol client.

Tabular arithmetic is deliberately pinned down: prefix-trie masses accumulate
in canonical world order and each conditional is log(child) - log(parent)
via ``math.log``, so independent implementations of the same world file
reproduce these values bit for bit.
"""
from __future__ import annotations

import json
import math
import socket
import threading
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .corpus import Conditioning, TabularWorld, Vocabulary
from .errors import (
    HandshakeError,
    ProtocolError,
    ProtocolVersionError,
    RemoteTimeoutError,
    ServerSideError,
    ValidationError,
    VocabMismatchError,
)
from .metrics import tokenize_for_metrics

NEG_INF = float("-inf")
WIRE_PROTOCOL_VERSION = 1


def validate_prefix(prefix, vocab_size: int, bos_id: int, eos_id: int) -> tuple:
    prefix = tuple(int(t) for t in prefix)
    if not prefix:
        raise ValidationError("prefix must be non-empty")
    if prefix[0] != bos_id:
        raise ValidationError(f"prefix must start with BOS id {bos_id}, got {prefix[0]}")
    if eos_id in prefix:
        raise ValidationError("prefix must not contain EOS")
    if bos_id in prefix[1:]:
        raise ValidationError("prefix must not repeat BOS")
    if any(not 0 <= t < vocab_size for t in prefix):
        raise ValidationError("prefix contains out-of-range token ids")
    return prefix


class _TrieNode:
    __slots__ = ("mass", "children")

    def __init__(self):
        self.mass = 0.0
        self.children = {}


def _build_trie(rows) -> _TrieNode:
    """Prefix trie over (sequence, weight) rows, accumulated in row order."""
    root = _TrieNode()
    for seq, w in rows:
        node = root
        node.mass += w
        for t in seq:
            child = node.children.get(t)
            if child is None:
                child = node.children[t] = _TrieNode()
            child.mass += w
            node = child
    return root


def _marginal_rows(world: TabularWorld):
    for c in world.class_ids:
        prior = world.priors[c]
        for seq, p in world.sequences[c].items():
            yield seq, prior * p


def _trie_logprobs(root: _TrieNode, prefix, vocab_size: int) -> np.ndarray:
    node = root
    for t in prefix[1:]:
        node = node.children.get(t)
        if node is None:
            return np.full(vocab_size, NEG_INF)
    vec = np.full(vocab_size, NEG_INF)
    log_parent = math.log(node.mass)
    for t, child in node.children.items():
        vec[t] = math.log(child.mass) - log_parent
    return vec


class TabularScorer:
    """Exact conditional and marginal next-token distributions of a world."""

    def __init__(self, world: TabularWorld):
        self.world = world
        self.vocab = world.vocab
        self._class_tries = {
            c: _build_trie(world.sequences[c].items()) for c in world.class_ids
        }
        self._marginal_trie = _build_trie(_marginal_rows(world))

    def _resolve_class(self, conditioning: Conditioning):
        """Map conditioning to a class id, or None for the marginal head."""
        if conditioning is None or conditioning.is_unconditional():
            return None
        if conditioning.class_id is not None:
            if conditioning.class_id not in self._class_tries:
                raise ValidationError(f"unknown class id {conditioning.class_id}")
            return conditioning.class_id
        vec = conditioning.vector
        hot = [i for i, x in enumerate(vec) if x != 0.0]
        if len(hot) == 1 and vec[hot[0]] == 1.0 and hot[0] in self._class_tries:
            return hot[0]
        raise ValidationError("tabular scorer needs a class id or a one-hot class vector")

    def conditional_logprobs(self, prefix, conditioning: Conditioning) -> np.ndarray:
        prefix = validate_prefix(prefix, self.vocab.size, self.vocab.bos_id, self.vocab.eos_id)
        cls = self._resolve_class(conditioning)
        trie = self._marginal_trie if cls is None else self._class_tries[cls]
        return _trie_logprobs(trie, prefix, self.vocab.size)

    def unconditional_logprobs(self, prefix) -> np.ndarray:
        prefix = validate_prefix(prefix, self.vocab.size, self.vocab.bos_id, self.vocab.eos_id)
        return _trie_logprobs(self._marginal_trie, prefix, self.vocab.size)


class MarginalScorer:
    """The world marginal p(x) exposed as a scorer; conditioning is ignored.

    Serves as the in-process language-model head for the reduction where the
    LM equals the captioner's own prior.
    """

    def __init__(self, world: TabularWorld):
        self.world = world
        self.vocab = world.vocab
        self._trie = _build_trie(_marginal_rows(world))

    def conditional_logprobs(self, prefix, conditioning=None) -> np.ndarray:
        return self.unconditional_logprobs(prefix)

    def unconditional_logprobs(self, prefix) -> np.ndarray:
        prefix = validate_prefix(prefix, self.vocab.size, self.vocab.bos_id, self.vocab.eos_id)
        return _trie_logprobs(self._trie, prefix, self.vocab.size)


UNCOND_HEAD = None  # sentinel head key for unconditional n-gram counts


@dataclass(eq=True)
class NGramScorer:
    """Additively smoothed conditional n-gram model.

    ``counts[head][context][token]`` holds raw counts, where ``head`` is a
    class id or ``UNCOND_HEAD``.  Queries back off to shorter contexts and
    bottom out at uniform; the unconditional head first falls back to counts
    pooled across all classes at each context length, and a class head with
    no counts at any order delegates to the unconditional head (so full
    masking makes the two heads identical).
    """

    order: int
    smoothing: float
    vocab: Vocabulary
    counts: dict
    _pooled: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if self.order < 1:
            raise ValidationError(f"n-gram order must be >= 1, got {self.order}")
        if not self.smoothing > 0:
            raise ValidationError(f"smoothing must be > 0, got {self.smoothing}")
        pooled = {}
        for head, contexts in self.counts.items():
            if head is UNCOND_HEAD:
                continue
            for ctx, table in contexts.items():
                slot = pooled.setdefault(ctx, Counter())
                slot.update(table)
        self._pooled = pooled

    @property
    def class_ids(self):
        return sorted(h for h in self.counts if h is not UNCOND_HEAD)

    def _table(self, head, ctx):
        if head is UNCOND_HEAD:
            own = self.counts.get(UNCOND_HEAD, {}).get(ctx)
            if own:
                return own
            return self._pooled.get(ctx)
        return self.counts.get(head, {}).get(ctx)

    def _head_distribution(self, head, ctx) -> np.ndarray | None:
        for start in range(len(ctx) + 1):
            table = self._table(head, ctx[start:])
            if table:
                vec = np.full(self.vocab.size, self.smoothing, dtype=np.float64)
                for t, c in table.items():
                    vec[t] += c
                return np.log(vec / (sum(table.values()) + self.smoothing * self.vocab.size))
        return None

    def _resolve_head(self, conditioning: Conditioning):
        if conditioning is None or conditioning.is_unconditional():
            return UNCOND_HEAD
        if conditioning.class_id is not None:
            return conditioning.class_id
        vec = conditioning.vector
        hot = [i for i, x in enumerate(vec) if x != 0.0]
        if len(hot) == 1 and vec[hot[0]] == 1.0:
            return hot[0]
        raise ValidationError("n-gram scorer needs a class id or a one-hot class vector")

    def _context(self, prefix) -> tuple:
        padded = (self.vocab.bos_id,) * (self.order - 1) + tuple(prefix[1:])
        return padded[len(padded) - (self.order - 1):] if self.order > 1 else ()

    def conditional_logprobs(self, prefix, conditioning: Conditioning) -> np.ndarray:
        prefix = validate_prefix(prefix, self.vocab.size, self.vocab.bos_id, self.vocab.eos_id)
        head = self._resolve_head(conditioning)
        ctx = self._context(prefix)
        dist = self._head_distribution(head, ctx)
        if dist is None and head is not UNCOND_HEAD:
            dist = self._head_distribution(UNCOND_HEAD, ctx)
        if dist is None:
            dist = np.full(self.vocab.size, -math.log(self.vocab.size))
        return dist

    def unconditional_logprobs(self, prefix) -> np.ndarray:
        return self.conditional_logprobs(prefix, Conditioning())


def train_ngram(corpus, order: int, mask_prob: float = 0.5, smoothing: float = 0.1,
                seed: int = 0, vocab: Vocabulary | None = None) -> NGramScorer:
    """Count n-grams per class, masking each reference row to the
    unconditional head with probability ``mask_prob`` (deterministic per seed).
    """
    import random as _random

    if not corpus:
        raise ValidationError("cannot train an n-gram model on an empty corpus")
    if order < 1:
        raise ValidationError(f"n-gram order must be >= 1, got {order}")
    if not smoothing > 0:
        raise ValidationError(f"smoothing must be > 0, got {smoothing}")
    if not 0.0 <= mask_prob <= 1.0:
        raise ValidationError(f"mask_prob must lie in [0, 1], got {mask_prob}")

    if vocab is None:
        words = set()
        for item in corpus:
            for ref in item.references:
                words.update(tokenize_for_metrics(ref))
        vocab = Vocabulary.from_words(words)

    rng = _random.Random(seed)
    counts: dict = {}
    for item in corpus:
        cls = item.conditioning.class_id
        if cls is None and not item.conditioning.is_unconditional():
            raise ValidationError(f"item {item.id!r} has no class id for n-gram training")
        for ref in item.references:
            masked = rng.random() < mask_prob
            head = UNCOND_HEAD if (masked or cls is None) else cls
            ids = vocab.encode_words(tokenize_for_metrics(ref)) + [vocab.eos_id]
            ctx = (vocab.bos_id,) * (order - 1)
            head_counts = counts.setdefault(head, {})
            for t in ids:
                table = head_counts.setdefault(ctx, Counter())
                table[t] += 1
                if order > 1:
                    ctx = (ctx + (t,))[1:]
        if cls is not None:
            counts.setdefault(cls, {})
    return NGramScorer(order=order, smoothing=smoothing, vocab=vocab, counts=counts)


# ---------------------------------------------------------------------------
# Wire-protocol client
# ---------------------------------------------------------------------------

def encode_logprobs(values) -> list:
    """Floats with -inf replaced by the string "-inf" (JSON-safe)."""
    out = []
    for v in values:
        v = float(v)
        if v == NEG_INF:
            out.append("-inf")
        elif math.isfinite(v):
            out.append(v)
        else:
            raise ValidationError(f"cannot serialize log-probability {v!r}")
    return out


def decode_logprobs(values, expected_len: int) -> np.ndarray:
    if not isinstance(values, list) or len(values) != expected_len:
        raise ProtocolError(f"expected {expected_len} logprobs, got {values!r:.80}")
    vec = np.empty(expected_len, dtype=np.float64)
    for i, v in enumerate(values):
        if v == "-inf":
            vec[i] = NEG_INF
        elif isinstance(v, (int, float)) and math.isfinite(v):
            vec[i] = float(v)
        else:
            raise ProtocolError(f"bad logprob entry {v!r} at index {i}")
    return vec


@dataclass(frozen=True)
class RemoteVocabInfo:
    vocab_size: int
    bos_id: int
    eos_id: int
    newline_id: int


class RemoteScorer:
    """Scorer backed by a logprobs server over a stream socket.

    One request is in flight per connection; calls are serialized with a
    lock, so a worker should own its own connection.  When ``lm_head`` is
    set, unconditional queries use the server's "lm" head instead of
    "uncond", which lets a remote language model drive LM guidance.
    """

    def __init__(self, sock, info: RemoteVocabInfo, vocab: Vocabulary | None = None,
                 lm_head: bool = False):
        self._sock = sock
        self._file = sock.makefile("rwb")
        self.info = info
        self.vocab = vocab
        self.lm_head = lm_head
        self._req_id = 0
        self._lock = threading.Lock()

    @property
    def vocab_size(self) -> int:
        return self.info.vocab_size

    def close(self):
        try:
            self._file.close()
        finally:
            self._sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _request(self, head: str, prefix, conditioning_vec) -> np.ndarray:
        with self._lock:
            self._req_id += 1
            req_id = self._req_id
            msg = {
                "op": "logprobs",
                "req_id": req_id,
                "head": head,
                "prefix": [int(t) for t in prefix],
                "conditioning": conditioning_vec,
            }
            try:
                self._file.write(json.dumps(msg).encode("utf-8") + b"\n")
                self._file.flush()
                line = self._file.readline()
            except socket.timeout:
                raise RemoteTimeoutError("timed out waiting for server response") from None
            if not line:
                raise ProtocolError("server closed the connection")
            try:
                resp = json.loads(line)
            except json.JSONDecodeError:
                raise ProtocolError(f"unparseable response line {line!r:.120}") from None
            if resp.get("req_id") != req_id:
                raise ProtocolError(
                    f"response req_id {resp.get('req_id')!r} does not match request {req_id}")
            if "error" in resp:
                raise ServerSideError(resp["error"])
            return decode_logprobs(resp.get("logprobs"), self.info.vocab_size)

    def conditional_logprobs(self, prefix, conditioning: Conditioning) -> np.ndarray:
        prefix = validate_prefix(prefix, self.info.vocab_size, self.info.bos_id, self.info.eos_id)
        if conditioning is None or conditioning.is_unconditional():
            return self._request("uncond", prefix, None)
        if conditioning.vector is None:
            raise ValidationError("remote scorer requires vector-form conditioning")
        return self._request("cond", prefix, list(conditioning.vector))

    def unconditional_logprobs(self, prefix) -> np.ndarray:
        prefix = validate_prefix(prefix, self.info.vocab_size, self.info.bos_id, self.info.eos_id)
        return self._request("lm" if self.lm_head else "uncond", prefix, None)


def parse_endpoint(endpoint: str):
    host, sep, port = endpoint.rpartition(":")
    if not sep or not port.isdigit():
        raise ValidationError(f"endpoint must look like host:port, got {endpoint!r}")
    return host, int(port)


def remote_handshake(endpoint, timeout: float = 10.0, expected_vocab: Vocabulary | None = None,
                     vocab: Vocabulary | None = None, lm_head: bool = False) -> RemoteScorer:
    """Connect, read the server hello, and return a ready RemoteScorer.

    Raises errors that distinguish the cause: bad greeting, protocol-version
    mismatch, vocabulary mismatch, or timeout.
    """
    if isinstance(endpoint, str):
        endpoint = parse_endpoint(endpoint)
    try:
        sock = socket.create_connection(endpoint, timeout=timeout)
    except socket.timeout:
        raise RemoteTimeoutError(f"timed out connecting to {endpoint}") from None
    sock.settimeout(timeout)
    try:
        f = sock.makefile("rb")
        try:
            line = f.readline()
        except socket.timeout:
            raise RemoteTimeoutError("timed out waiting for server handshake") from None
        if not line:
            raise HandshakeError("server closed the connection before the handshake")
        try:
            hello = json.loads(line)
        except json.JSONDecodeError:
            raise HandshakeError(f"unparseable handshake line {line!r:.120}") from None
        if not isinstance(hello, dict) or hello.get("op") != "hello":
            raise HandshakeError(f"expected a hello message, got {hello!r:.120}")
        if hello.get("protocol") != WIRE_PROTOCOL_VERSION:
            raise ProtocolVersionError(
                f"server protocol {hello.get('protocol')!r}, client speaks {WIRE_PROTOCOL_VERSION}")
        try:
            info = RemoteVocabInfo(
                vocab_size=int(hello["vocab_size"]),
                bos_id=int(hello["bos_id"]),
                eos_id=int(hello["eos_id"]),
                newline_id=int(hello["newline_id"]),
            )
        except (KeyError, TypeError, ValueError):
            raise HandshakeError(f"handshake missing vocabulary metadata: {hello!r:.200}") from None
        check = expected_vocab or vocab
        if check is not None:
            mismatches = [
                name for name, got, want in (
                    ("vocab_size", info.vocab_size, check.size),
                    ("bos_id", info.bos_id, check.bos_id),
                    ("eos_id", info.eos_id, check.eos_id),
                    ("newline_id", info.newline_id, check.newline_id),
                ) if got != want
            ]
            if mismatches:
                raise VocabMismatchError(f"server vocabulary disagrees on {', '.join(mismatches)}")
        return RemoteScorer(sock, info, vocab=vocab, lm_head=lm_head)
    except Exception:
        sock.close()
        raise
