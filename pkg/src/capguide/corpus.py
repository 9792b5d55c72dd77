"""Caption corpora, synthetic tabular caption worlds, and their file formats.

A corpus pairs conditioning signals (the image stand-in) with reference
captions.  A tabular world is a finite, exactly specified joint distribution
over (class, token sequence); it backs the exact scorers and the brute-force
oracles.  Everything here is immutable after construction and safe to share
across workers.
"""
from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field

from .errors import ParseError, ValidationError

PROB_TOL = 1e-12

SPECIAL_TOKENS = ("<bos>", "<eos>", "<newline>")

# Word pools for synthetic generic/specific worlds.  Groups share a generic
# noun ("a dog"); each class inside a group gets an (adjective, breed) pair
# ("a tan corgi").  Pools are extended deterministically when exhausted.
_GROUP_NOUNS = (
    "dog", "cat", "bird", "fish", "horse", "sheep",
    "frog", "duck", "bear", "goat", "crab", "mouse",
)
_CLASS_NOUNS = (
    "corgi", "shepherd", "husky", "beagle",
    "tabby", "siamese", "sphynx", "bengal",
    "finch", "parrot", "heron", "wren",
    "salmon", "guppy", "tetra", "trout",
    "pony", "mustang", "arabian", "shire",
    "merino", "suffolk", "dorset", "romney",
    "peeper", "toad", "newt", "treefrog",
    "mallard", "teal", "eider", "pintail",
)
_ADJECTIVES = (
    "tan", "gray", "red", "blue", "green", "brown", "black", "white",
    "small", "large", "round", "slim", "fuzzy", "shiny", "spotted", "striped",
    "golden", "silver", "ruddy", "pale", "dark", "bright", "dusty", "glossy",
    "young", "old", "swift", "calm", "bold", "shy", "plump", "lean",
)
_VARIANTS = ("resting", "running", "sitting", "standing", "walking", "sleeping")


@dataclass(frozen=True)
class Vocabulary:
    """Token strings with dense integer ids and reserved BOS/EOS/NEWLINE."""

    tokens: tuple[str, ...]
    bos_id: int
    eos_id: int
    newline_id: int

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if len(set(self.tokens)) != len(self.tokens):
            raise ValidationError("vocabulary contains duplicate token strings")
        for name in ("bos_id", "eos_id", "newline_id"):
            i = getattr(self, name)
            if not isinstance(i, int) or not 0 <= i < len(self.tokens):
                raise ValidationError(f"{name}={i!r} out of range for vocabulary of size {len(self.tokens)}")
        if len({self.bos_id, self.eos_id, self.newline_id}) != 3:
            raise ValidationError("bos/eos/newline ids must be distinct")
        object.__setattr__(self, "_ids", {t: i for i, t in enumerate(self.tokens)})

    @property
    def size(self) -> int:
        return len(self.tokens)

    @classmethod
    def from_words(cls, words) -> "Vocabulary":
        """Specials first, then the given word tokens in sorted order."""
        extra = sorted(set(words) - set(SPECIAL_TOKENS))
        return cls(tuple(SPECIAL_TOKENS) + tuple(extra), 0, 1, 2)

    def id_of(self, token: str) -> int:
        try:
            return self._ids[token]
        except KeyError:
            raise ValidationError(f"unknown token {token!r}") from None

    def token(self, token_id: int) -> str:
        if not 0 <= token_id < self.size:
            raise ValidationError(f"token id {token_id} out of range")
        return self.tokens[token_id]

    def encode_words(self, words) -> list[int]:
        return [self.id_of(w) for w in words]

    def text_of(self, token_ids) -> str:
        """Join token strings with spaces, skipping EOS."""
        return " ".join(self.tokens[t] for t in token_ids if t != self.eos_id)

    def to_json_dict(self) -> dict:
        return {
            "tokens": list(self.tokens),
            "bos_id": self.bos_id,
            "eos_id": self.eos_id,
            "newline_id": self.newline_id,
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "Vocabulary":
        try:
            return cls(tuple(obj["tokens"]), obj["bos_id"], obj["eos_id"], obj["newline_id"])
        except KeyError as e:
            raise ParseError(f"vocabulary object missing key {e}") from None


@dataclass(frozen=True)
class Conditioning:
    """Dense conditioning vector (image-embedding stand-in) and/or class label.

    The all-zeros vector is the unconditional sentinel.  Tabular corpora carry
    both the class id and its one-hot vector so that both in-process (class
    lookup) and remote (vector on the wire) scorers can consume the same item.
    """

    vector: tuple[float, ...] | None = None
    class_id: int | None = None

    def __post_init__(self):
        if self.vector is not None:
            vec = tuple(float(x) for x in self.vector)
            if any(not math.isfinite(x) for x in vec):
                raise ValidationError("conditioning vector entries must be finite")
            object.__setattr__(self, "vector", vec)
        if self.class_id is not None and (not isinstance(self.class_id, int) or self.class_id < 0):
            raise ValidationError(f"class_id must be a non-negative integer, got {self.class_id!r}")

    def is_unconditional(self) -> bool:
        if self.class_id is not None:
            return False
        return self.vector is None or all(x == 0.0 for x in self.vector)

    @classmethod
    def zeros(cls, dim: int) -> "Conditioning":
        return cls(vector=(0.0,) * dim)

    @classmethod
    def for_class(cls, class_id: int, dim: int) -> "Conditioning":
        if class_id >= dim:
            raise ValidationError(f"class {class_id} does not fit in a {dim}-dimensional one-hot vector")
        vec = [0.0] * dim
        vec[class_id] = 1.0
        return cls(vector=tuple(vec), class_id=class_id)

    def to_json_dict(self) -> dict:
        obj = {}
        if self.vector is not None:
            obj["vector"] = list(self.vector)
        if self.class_id is not None:
            obj["class"] = self.class_id
        return obj

    @classmethod
    def from_json_dict(cls, obj: dict) -> "Conditioning":
        if not isinstance(obj, dict):
            raise ParseError("conditioning must be an object")
        vector = obj.get("vector")
        if vector is not None and not isinstance(vector, list):
            raise ParseError("conditioning vector must be an array")
        class_id = obj.get("class")
        if class_id is not None and not isinstance(class_id, int):
            raise ParseError("conditioning class must be an integer")
        return cls(vector=tuple(vector) if vector is not None else None, class_id=class_id)


@dataclass(frozen=True)
class CorpusItem:
    id: str
    conditioning: Conditioning
    references: tuple[str, ...]

    def __post_init__(self):
        if not self.id:
            raise ValidationError("item id must be non-empty")
        object.__setattr__(self, "references", tuple(self.references))
        if not self.references:
            raise ValidationError(f"item {self.id!r} has no references")


Corpus = list


def parse_corpus_line(line: str, lineno: int) -> CorpusItem:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as e:
        raise ParseError(f"invalid JSON ({e.msg})", line=lineno) from None
    if not isinstance(obj, dict):
        raise ParseError("corpus line must be a JSON object", line=lineno)
    for key in ("id", "conditioning", "references"):
        if key not in obj:
            raise ParseError(f"missing key {key!r}", line=lineno)
    refs = obj["references"]
    if not isinstance(refs, list) or not refs or not all(isinstance(r, str) for r in refs):
        raise ParseError("references must be a non-empty array of strings", line=lineno)
    try:
        cond = Conditioning.from_json_dict(obj["conditioning"])
        return CorpusItem(id=str(obj["id"]), conditioning=cond, references=tuple(refs))
    except (ParseError, ValidationError) as e:
        raise ParseError(str(e), line=lineno) from None


def load_corpus(path) -> list[CorpusItem]:
    """Read a JSON-lines corpus; order preserved, blank lines skipped."""
    items: list[CorpusItem] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line:
                continue
            item = parse_corpus_line(line, lineno)
            if item.id in seen:
                raise ValidationError(f"duplicate item id {item.id!r} at line {lineno}")
            seen.add(item.id)
            items.append(item)
    return items


def save_corpus(corpus, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for item in corpus:
            obj = {
                "id": item.id,
                "conditioning": item.conditioning.to_json_dict(),
                "references": list(item.references),
            }
            f.write(json.dumps(obj) + "\n")


@dataclass
class TabularWorld:
    """Exact finite joint distribution over (class, EOS-terminated sequence).

    Sequences are BOS-free tuples of token ids ending in ``eos_id``.  On
    construction the class and sequence orders are canonicalized (class ids
    ascending, sequences lexicographic) so that file round-trips and scorer
    mass accumulation are order-stable.
    """

    vocab: Vocabulary
    priors: dict
    sequences: dict
    l_max: int
    canonical_captions: dict = field(default_factory=dict)

    def __post_init__(self):
        if set(self.sequences) != set(self.priors):
            raise ValidationError("sequence table classes do not match prior classes")
        self.priors = {c: float(self.priors[c]) for c in sorted(self.priors)}
        self.sequences = {
            c: {tuple(seq): float(p) for seq, p in sorted(self.sequences[c].items())}
            for c in sorted(self.sequences)
        }

    @property
    def class_ids(self) -> list[int]:
        return list(self.priors)

    def support(self) -> list[tuple[int, ...]]:
        """All distinct sequences across classes, lexicographic order."""
        seqs = set()
        for table in self.sequences.values():
            seqs.update(table)
        return sorted(seqs)

    def marginal_prob(self, seq) -> float:
        """p(x) = sum_y p(y) p(x|y), compensated summation."""
        seq = tuple(seq)
        return math.fsum(self.priors[c] * self.sequences[c].get(seq, 0.0) for c in self.priors)

    def to_json_dict(self) -> dict:
        classes = []
        for c in self.priors:
            entry = {"id": c, "prior": self.priors[c]}
            if c in self.canonical_captions:
                entry["canonical"] = self.canonical_captions[c]
            classes.append(entry)
        return {
            "vocab": self.vocab.to_json_dict(),
            "l_max": self.l_max,
            "classes": classes,
            "sequences": {
                str(c): [{"tokens": list(seq), "p": p} for seq, p in table.items()]
                for c, table in self.sequences.items()
            },
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "TabularWorld":
        for key in ("vocab", "l_max", "classes", "sequences"):
            if key not in obj:
                raise ParseError(f"world object missing key {key!r}")
        vocab = Vocabulary.from_json_dict(obj["vocab"])
        priors = {}
        canonical = {}
        for entry in obj["classes"]:
            cid = entry["id"]
            if cid in priors:
                raise ValidationError(f"duplicate class id {cid} in world file")
            priors[cid] = entry["prior"]
            if "canonical" in entry:
                canonical[cid] = entry["canonical"]
        sequences = {}
        for key, rows in obj["sequences"].items():
            cid = int(key)
            table = {}
            for row in rows:
                seq = tuple(row["tokens"])
                if seq in table:
                    raise ValidationError(f"class {cid}: duplicate sequence {list(seq)}")
                table[seq] = row["p"]
            sequences[cid] = table
        return cls(vocab=vocab, priors=priors, sequences=sequences,
                   l_max=obj["l_max"], canonical_captions=canonical)


def save_world(world: TabularWorld, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(world.to_json_dict(), f, indent=2)
        f.write("\n")


def load_world(path) -> TabularWorld:
    with open(path, "r", encoding="utf-8") as f:
        try:
            obj = json.load(f)
        except json.JSONDecodeError as e:
            raise ParseError(f"invalid world file {path}: {e.msg}") from None
    return TabularWorld.from_json_dict(obj)


@dataclass(frozen=True)
class WorldSpec:
    """Recipe for a generic/specific synthetic world.

    Classes are grouped; every class in a group shares the group's generic
    caption (mass ``generic_mass``) and owns ``specifics_per_class`` unique
    specific captions splitting the remaining mass uniformly.
    """

    n_classes: int
    group_size: int = 4
    generic_mass: float = 0.7
    l_max: int = 6
    conditioning_dim: int | None = None
    specifics_per_class: int = 1
    items_per_class: int = 1
    refs_per_item: int = 5
    group_nouns: tuple | None = None
    class_nouns: tuple | None = None
    adjectives: tuple | None = None

    def __post_init__(self):
        if not 0.0 < self.generic_mass < 1.0:
            raise ValidationError(f"generic_mass must lie in (0, 1), got {self.generic_mass}")
        if self.n_classes < 1 or self.group_size < 1:
            raise ValidationError("n_classes and group_size must be >= 1")
        if self.specifics_per_class < 1 or self.items_per_class < 1 or self.refs_per_item < 1:
            raise ValidationError("specifics_per_class, items_per_class, refs_per_item must be >= 1")
        if self.l_max < 4:
            raise ValidationError("l_max must be >= 4 (specific captions span 3 words plus EOS)")
        dim = self.conditioning_dim
        if dim is not None and dim < self.n_classes:
            raise ValidationError("conditioning_dim must be >= n_classes")

    @classmethod
    def from_json_dict(cls, obj: dict) -> "WorldSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(obj) - known
        if unknown:
            raise ValidationError(f"unknown world-spec keys: {sorted(unknown)}")
        for key in ("group_nouns", "class_nouns", "adjectives"):
            if obj.get(key) is not None:
                obj = dict(obj)
                obj[key] = tuple(obj[key])
        return cls(**obj)


def _pool_word(pool, index, prefix):
    if pool is not None:
        if index >= len(pool):
            raise ValidationError(f"word pool for {prefix!r} exhausted at index {index}")
        return pool[index]
    builtin = {"group": _GROUP_NOUNS, "breed": _CLASS_NOUNS, "adj": _ADJECTIVES}[prefix]
    return builtin[index] if index < len(builtin) else f"{prefix}{index}"


def make_synthetic_world(spec: WorldSpec, seed: int):
    """Deterministic world + corpus for a (spec, seed) pair.

    Structure is a pure function of the spec; the seed only drives reference
    sampling from each class conditional.
    """
    n = spec.n_classes
    captions_generic = {}
    captions_specific = {}
    words = {"a"}
    for c in range(n):
        g = c // spec.group_size
        gnoun = _pool_word(spec.group_nouns, g, "group")
        adj = _pool_word(spec.adjectives, c, "adj")
        breed = _pool_word(spec.class_nouns, c, "breed")
        captions_generic[c] = ("a", gnoun)
        specifics = [("a", adj, breed)]
        for j in range(1, spec.specifics_per_class):
            variant = _VARIANTS[j - 1] if j - 1 < len(_VARIANTS) else f"pose{j}"
            specifics.append(("a", adj, breed, variant))
        captions_specific[c] = specifics
        for cap in [captions_generic[c]] + specifics:
            if len(cap) + 1 > spec.l_max:
                raise ValidationError(f"caption {' '.join(cap)!r} exceeds l_max={spec.l_max}")
            words.update(cap)

    vocab = Vocabulary.from_words(words)
    dim = spec.conditioning_dim or n

    sequences = {}
    canonical = {}
    rho = spec.generic_mass
    for c in range(n):
        table = {}
        generic_seq = tuple(vocab.encode_words(captions_generic[c])) + (vocab.eos_id,)
        table[generic_seq] = rho
        share = (1.0 - rho) / spec.specifics_per_class
        for cap in captions_specific[c]:
            table[tuple(vocab.encode_words(cap)) + (vocab.eos_id,)] = share
        sequences[c] = table
        canonical[c] = " ".join(captions_specific[c][0])

    priors = {c: 1.0 / n for c in range(n)}
    world = TabularWorld(vocab=vocab, priors=priors, sequences=sequences,
                         l_max=spec.l_max, canonical_captions=canonical)

    rng = random.Random(seed)
    corpus = []
    for c in range(n):
        rows = list(world.sequences[c].items())  # canonical order
        cond = Conditioning.for_class(c, dim)
        for i in range(spec.items_per_class):
            refs = tuple(vocab.text_of(_sample_sequence(rows, rng)) for _ in range(spec.refs_per_item))
            corpus.append(CorpusItem(id=f"item{c:03d}-{i}", conditioning=cond, references=refs))
    return world, corpus


def _sample_sequence(rows, rng):
    u = rng.random()
    acc = 0.0
    for seq, p in rows:
        acc += p
        if u < acc:
            return seq
    return rows[-1][0]


@dataclass
class WorldCheckReport:
    violations: list

    @property
    def ok(self) -> bool:
        return not self.violations


def world_consistency_check(world: TabularWorld) -> WorldCheckReport:
    """Verify every TabularWorld invariant; violations reported, never raised."""
    v = []
    vocab = world.vocab
    prior_sum = math.fsum(world.priors.values())
    for c, p in world.priors.items():
        if p < 0:
            v.append(f"class {c}: negative prior {p!r}")
    if abs(prior_sum - 1.0) > PROB_TOL:
        v.append(f"class priors sum to {prior_sum!r}, expected 1")
    for c, table in world.sequences.items():
        if not table:
            v.append(f"class {c}: empty sequence table")
            continue
        for seq, p in table.items():
            name = list(seq)
            if p <= 0:
                v.append(f"class {c}: sequence {name} has non-positive probability {p!r}")
            if not seq or seq[-1] != vocab.eos_id:
                v.append(f"class {c}: sequence {name} does not end with EOS")
            if vocab.bos_id in seq:
                v.append(f"class {c}: sequence {name} contains BOS")
            if vocab.eos_id in seq[:-1]:
                v.append(f"class {c}: sequence {name} has an interior EOS")
            if any(not 0 <= t < vocab.size for t in seq):
                v.append(f"class {c}: sequence {name} has out-of-range token ids")
            if len(seq) > world.l_max:
                v.append(f"class {c}: sequence {name} longer than l_max={world.l_max}")
        total = math.fsum(table.values())
        if abs(total - 1.0) > PROB_TOL:
            v.append(f"class {c}: conditional probabilities sum to {total!r}, expected 1")
    marginal_total = math.fsum(
        world.priors[c] * p for c, table in world.sequences.items() for p in table.values()
    )
    if abs(marginal_total - 1.0) > PROB_TOL:
        v.append(f"marginal probabilities sum to {marginal_total!r}, expected 1")
    return WorldCheckReport(v)
