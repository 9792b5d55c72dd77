"""Backends answering next-token log-probability queries.

The tabular backend reproduces the decoding engine's arithmetic exactly:
classes sorted ascending, sequences sorted lexicographically, prefix-trie
masses accumulated in that order, and every conditional computed as
``math.log(child_mass) - math.log(parent_mass)``.  Given the same world file,
responses therefore match the engine's in-process scorer to full double
precision.
"""
from __future__ import annotations

import importlib
import json
import math

NEG_INF = float("-inf")


class BackendError(ValueError):
    """Request-level failure; reported to the client, connection stays open."""


class _TrieNode:
    __slots__ = ("mass", "children")

    def __init__(self):
        self.mass = 0.0
        self.children = {}


def _build_trie(rows):
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


class TabularBackend:
    """Exact conditional/marginal heads computed from a world file."""

    def __init__(self, world_path):
        with open(world_path, "r", encoding="utf-8") as f:
            obj = json.load(f)
        vocab = obj["vocab"]
        self.vocab_size = len(vocab["tokens"])
        self.bos_id = vocab["bos_id"]
        self.eos_id = vocab["eos_id"]
        self.newline_id = vocab["newline_id"]
        self.max_connections = None

        priors = {}
        for entry in obj["classes"]:
            if entry["id"] in priors:
                raise ValueError(f"duplicate class id {entry['id']} in world file")
            priors[entry["id"]] = float(entry["prior"])
        sequences = {}
        for key, rows in obj["sequences"].items():
            table = {}
            for row in rows:
                table[tuple(row["tokens"])] = float(row["p"])
            sequences[int(key)] = table
        # Canonical order is part of the protocol contract: class ids
        # ascending, sequences lexicographic.
        self._class_ids = sorted(sequences)
        self._class_tries = {}
        marginal_rows = []
        for c in self._class_ids:
            rows = sorted(sequences[c].items())
            self._class_tries[c] = _build_trie(rows)
            prior = priors[c]
            marginal_rows.extend((seq, prior * p) for seq, p in rows)
        self._marginal_trie = _build_trie(marginal_rows)
        self._n_classes = len(self._class_ids)

    def _check_prefix(self, prefix):
        if not isinstance(prefix, list) or not prefix:
            raise BackendError("prefix must be a non-empty array of token ids")
        if any(not isinstance(t, int) or not 0 <= t < self.vocab_size for t in prefix):
            raise BackendError("prefix contains out-of-range token ids")
        if prefix[0] != self.bos_id:
            raise BackendError(f"prefix must start with BOS id {self.bos_id}")
        if self.eos_id in prefix:
            raise BackendError("prefix must not contain EOS")

    def _resolve_class(self, conditioning):
        if not isinstance(conditioning, list) or not all(
                isinstance(x, (int, float)) for x in conditioning):
            raise BackendError("cond head requires a numeric conditioning vector")
        hot = [i for i, x in enumerate(conditioning) if x != 0.0]
        if not hot:
            return None  # all-zero vector: the unconditional sentinel
        if len(hot) == 1 and conditioning[hot[0]] == 1.0 and hot[0] in self._class_tries:
            return hot[0]
        raise BackendError("conditioning vector is not a known one-hot class indicator")

    def _trie_logprobs(self, root, prefix):
        node = root
        for t in prefix[1:]:
            node = node.children.get(t)
            if node is None:
                return [NEG_INF] * self.vocab_size
        vec = [NEG_INF] * self.vocab_size
        log_parent = math.log(node.mass)
        for t, child in node.children.items():
            vec[t] = math.log(child.mass) - log_parent
        return vec

    def logprobs(self, head, prefix, conditioning):
        self._check_prefix(prefix)
        if head == "cond":
            cls = self._resolve_class(conditioning)
            trie = self._marginal_trie if cls is None else self._class_tries[cls]
            return self._trie_logprobs(trie, prefix)
        if head in ("uncond", "lm"):
            if conditioning is not None:
                raise BackendError(f"{head} head takes null conditioning")
            return self._trie_logprobs(self._marginal_trie, prefix)
        raise BackendError(f"unsupported head {head!r}")


REQUIRED_ADAPTER_ATTRS = ("vocab_size", "bos_id", "eos_id", "newline_id", "logprobs")


def load_adapter(spec: str):
    """Import ``module.path:factory`` and build the backend it returns.

    The factory must return an object with vocab metadata attributes, a
    ``logprobs(head, prefix, conditioning)`` method, and optionally a
    ``max_connections`` attribute for backends that are not thread-safe.
    """
    module_name, sep, attr = spec.partition(":")
    if not sep:
        raise ValueError(f"adapter spec must look like module:factory, got {spec!r}")
    module = importlib.import_module(module_name)
    factory = getattr(module, attr)
    backend = factory()
    missing = [a for a in REQUIRED_ADAPTER_ATTRS if not hasattr(backend, a)]
    if missing:
        raise ValueError(f"adapter {spec!r} is missing {missing}")
    if not hasattr(backend, "max_connections"):
        backend.max_connections = None
    return backend
