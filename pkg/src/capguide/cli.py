"""The ``capguide`` command line.

Subcommands: ``gen-world`` (synthetic world + corpus files), ``decode``
(corpus -> JSON-lines of decode results), ``build-prompt`` (token-id prompt
files for LM guidance), ``eval`` (decode output -> metric report),
``sweep`` (decode+eval over a guidance grid, long-format CSV + curve JSON),
``oracle`` (brute-force Pareto curves), and ``ping-server`` (wire-protocol
smoke check).

All randomness flows from explicit ``--seed`` flags, so every subcommand is
deterministic and re-runs are byte-identical.  Exit codes: 0 success,
1 assertion/acceptance failure, 2 usage or IO error.
"""
from __future__ import annotations

import argparse
import json
import math
import random
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .corpus import (
    Vocabulary,
    WorldSpec,
    load_corpus,
    load_world,
    make_synthetic_world,
    save_corpus,
    save_world,
    world_consistency_check,
)
from .decode import Beam, DecodeFailure, DecodeParams, Greedy, decode_batch
from .errors import DecodeError, ParseError, RemoteError, ValidationError
from .guidance import CfgGuidance, LmGuidance
from .metrics import SyntheticEmbedder, build_report, eval_csv_header, tokenize_for_metrics
from .oracle import curve_to_json_dict, pareto_curve
from .scorer import MarginalScorer, TabularScorer, remote_handshake, train_ngram

PMI_MONOTONE_TOL = 1e-9


# ---------------------------------------------------------------------------
# Shared loading helpers
# ---------------------------------------------------------------------------

def _load_json(path):
    with open(path, "r", encoding="utf-8") as f:
        try:
            return json.load(f)
        except json.JSONDecodeError as e:
            raise ParseError(f"{path}: invalid JSON ({e.msg})") from None


def load_vocab_file(path) -> Vocabulary:
    """Accept a world file or a bare vocabulary JSON object."""
    obj = _load_json(path)
    if "vocab" in obj:
        return Vocabulary.from_json_dict(obj["vocab"])
    return Vocabulary.from_json_dict(obj)


def demo_vocab() -> Vocabulary:
    """Vocabulary covering the bundled prompt assets."""
    words = set()
    for name in ("descriptive", "counting"):
        for line in _builtin_prompt_lines(name):
            words.update(tokenize_for_metrics(line))
    return Vocabulary.from_words(words)


def _builtin_prompt_lines(name: str) -> list[str]:
    ref = resources.files("capguide").joinpath(f"data/prompts/{name}.txt")
    try:
        text = ref.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ValidationError(f"no bundled prompt named {name!r}") from None
    return [line for line in text.splitlines() if line.strip()]


def load_scorer(spec: str, vocab: Vocabulary | None = None, lm_head: bool = False):
    """Instantiate a scorer from a spec string.

    tabular:WORLD.json | marginal:WORLD.json | ngram:TRAIN_SPEC.json |
    remote:HOST:PORT | remote-lm:HOST:PORT
    """
    kind, sep, rest = spec.partition(":")
    if not sep or not rest:
        raise ValidationError(f"scorer spec must look like kind:arg, got {spec!r}")
    if kind == "tabular":
        return TabularScorer(load_world(rest))
    if kind == "marginal":
        return MarginalScorer(load_world(rest))
    if kind == "ngram":
        cfg = _load_json(rest)
        unknown = set(cfg) - {"corpus", "order", "mask_prob", "smoothing", "seed", "vocab"}
        if unknown:
            raise ValidationError(f"unknown n-gram spec keys: {sorted(unknown)}")
        if "corpus" not in cfg:
            raise ValidationError(f"{rest}: n-gram spec needs a 'corpus' path")
        base = Path(rest).parent
        corpus_path = Path(cfg["corpus"])
        if not corpus_path.is_absolute():
            corpus_path = base / corpus_path
        train_vocab = None
        if cfg.get("vocab"):
            vocab_path = Path(cfg["vocab"])
            if not vocab_path.is_absolute():
                vocab_path = base / vocab_path
            train_vocab = load_vocab_file(vocab_path)
        return train_ngram(
            load_corpus(corpus_path),
            order=int(cfg.get("order", 2)),
            mask_prob=float(cfg.get("mask_prob", 0.5)),
            smoothing=float(cfg.get("smoothing", 0.1)),
            seed=int(cfg.get("seed", 0)),
            vocab=train_vocab,
        )
    if kind in ("remote", "remote-lm"):
        return remote_handshake(rest, vocab=vocab, lm_head=(kind == "remote-lm"))
    raise ValidationError(f"unknown scorer kind {kind!r}")


def build_prompt_ids(captions, n: int, seed: int, vocab: Vocabulary,
                     ordered: bool = False, rng=None) -> list[int]:
    """Sample n captions and join them with double newline tokens.

    The stream ends with the separator too, so the generated caption starts
    on a fresh line from the language model's point of view.
    """
    if n > len(captions):
        raise ValidationError(f"asked for {n} captions but only {len(captions)} available")
    if rng is None:
        rng = random.Random(seed)
    chosen = list(captions[:n]) if ordered else rng.sample(list(captions), n)
    ids: list[int] = []
    for cap in chosen:
        ids.extend(vocab.encode_words(tokenize_for_metrics(cap)))
        ids.extend([vocab.newline_id, vocab.newline_id])
    return ids


def load_prompt_file(path):
    """Return (single_prompt, per_batch_prompts, batch_size)."""
    obj = _load_json(path)
    if "tokens" in obj:
        return list(obj["tokens"]), None, None
    if "prompts" in obj:
        return None, [list(p) for p in obj["prompts"]], int(obj.get("batch_size", 4))
    raise ParseError(f"{path}: prompt file needs 'tokens' or 'prompts'")


# ---------------------------------------------------------------------------
# decode
# ---------------------------------------------------------------------------

def _result_line(item_id: str, res) -> str:
    if isinstance(res, list):  # beam: report the best hypothesis
        res = res[0]
    if isinstance(res, DecodeFailure):
        return json.dumps({"id": item_id, "error": res.error})
    return json.dumps({
        "id": item_id,
        "tokens": list(res.tokens),
        "text": res.text,
        "score": res.score,
        "terminated_by": res.terminated_by,
    })


def run_decode(corpus, scorer, guidance_mode: str, params: DecodeParams,
               gamma=None, alpha=None, beta=None, lm_scorer=None,
               prompt=None, batch_prompts=None, prompt_batch_size=4):
    """Decode every corpus item in order; per-item failures stay inline."""
    lines = []
    results = []
    if guidance_mode == "lm" and batch_prompts is not None:
        # Per-batch prompts: group items and decode each group with its prompt.
        for start in range(0, len(corpus), prompt_batch_size):
            chunk = corpus[start:start + prompt_batch_size]
            p = batch_prompts[min(start // prompt_batch_size, len(batch_prompts) - 1)]
            guidance = LmGuidance(alpha=alpha, beta=beta, prompt=tuple(p))
            out = decode_batch([it.conditioning for it in chunk], scorer, guidance,
                               params, lm_scorer=lm_scorer)
            results.extend(out)
    else:
        guidance = _make_guidance(guidance_mode, gamma, alpha, beta, prompt)
        results = decode_batch([it.conditioning for it in corpus], scorer, guidance,
                               params, lm_scorer=lm_scorer)
    for item, res in zip(corpus, results):
        lines.append(_result_line(item.id, res))
    return lines, results


def _make_guidance(mode: str, gamma, alpha, beta, prompt):
    if mode == "none":
        return None
    if mode == "cfg":
        if gamma is None:
            raise ValidationError("cfg guidance requires --gamma")
        return CfgGuidance(gamma=gamma)
    if mode == "lm":
        if alpha is None or beta is None:
            raise ValidationError("lm guidance requires --alpha and --beta")
        return LmGuidance(alpha=alpha, beta=beta, prompt=tuple(prompt or ()))
    raise ValidationError(f"unknown guidance mode {mode!r}")


def cmd_decode(args) -> int:
    corpus = load_corpus(args.corpus)
    vocab = load_vocab_file(args.vocab) if args.vocab else None
    scorer = load_scorer(args.scorer, vocab=vocab)
    if scorer.vocab is None:
        raise ValidationError("remote decoding requires --vocab for detokenization")
    lm_scorer = None
    if args.guidance == "lm":
        if not args.lm_scorer:
            raise ValidationError("lm guidance requires --lm-scorer")
        lm_scorer = load_scorer(args.lm_scorer, vocab=scorer.vocab, lm_head=True)
    prompt, batch_prompts, prompt_bs = None, None, 4
    if args.prompt_file:
        prompt, batch_prompts, prompt_bs = load_prompt_file(args.prompt_file)
    strategy = Beam(args.beam_width) if args.strategy == "beam" else Greedy()
    params = DecodeParams(max_length=args.max_length, strategy=strategy,
                          batch_size=args.batch_size)
    lines, _ = run_decode(
        corpus, scorer, args.guidance, params,
        gamma=args.gamma, alpha=args.alpha, beta=args.beta,
        lm_scorer=lm_scorer, prompt=prompt, batch_prompts=batch_prompts,
        prompt_batch_size=prompt_bs or 4,
    )
    _write_lines(args.out, lines)
    return 0


def _write_lines(out, lines):
    text = "".join(line + "\n" for line in lines)
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def load_predictions(path) -> dict:
    preds = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"invalid JSON ({e.msg})", line=lineno) from None
            if "error" in obj:
                raise ValidationError(f"prediction line {lineno} carries a decode error: {obj['error']}")
            if "id" not in obj or "text" not in obj:
                raise ParseError("prediction line needs 'id' and 'text'", line=lineno)
            preds[obj["id"]] = obj["text"]
    return preds


def _make_embedder(spec: str) -> SyntheticEmbedder:
    kind, sep, arg = spec.partition(":")
    if kind != "synthetic":
        raise ValidationError(f"unknown embedder {spec!r} (only 'synthetic[:dim]' is bundled)")
    return SyntheticEmbedder(dim=int(arg)) if sep else SyntheticEmbedder()


def image_embeddings_for(corpus, embedder, world=None):
    """Image-side embeddings: the embedded canonical specific caption of each
    item's class when a world is given, else the conditioning vector itself
    (which must already match the embedding dimension)."""
    out = []
    for item in corpus:
        if world is not None:
            cls = item.conditioning.class_id
            if cls is None or cls not in world.canonical_captions:
                raise ValidationError(f"item {item.id!r} has no class canonical caption in the world")
            out.append(embedder.embed(world.canonical_captions[cls]))
        else:
            vec = item.conditioning.vector
            if vec is None or len(vec) != embedder.dim:
                raise ValidationError(
                    f"item {item.id!r}: no world given and conditioning vector does not "
                    f"match the embedding dimension {embedder.dim}")
            arr = np.asarray(vec, dtype=np.float64)
            norm = math.sqrt(float(arr @ arr))
            if norm == 0.0:
                raise ValidationError(f"item {item.id!r}: zero conditioning vector cannot embed an image")
            out.append(arr / norm)
    return out


def run_eval(label, corpus, predictions, embedder, ks, world=None, phrases=None):
    missing = [it.id for it in corpus if it.id not in predictions]
    if missing:
        raise ValidationError(f"predictions missing ids: {missing[:5]}{'...' if len(missing) > 5 else ''}")
    extra = set(predictions) - {it.id for it in corpus}
    if extra:
        raise ValidationError(f"predictions carry unknown ids: {sorted(extra)[:5]}")
    candidates = [predictions[it.id] for it in corpus]
    refs = [list(it.references) for it in corpus]
    images = image_embeddings_for(corpus, embedder, world)
    return build_report(label, candidates, refs, images, embedder, ks=tuple(ks), phrases=phrases)


def _parse_ks(text) -> list[int]:
    try:
        return [int(k) for k in str(text).split(",") if k != ""]
    except ValueError:
        raise ValidationError(f"bad ks list {text!r}") from None


def cmd_eval(args) -> int:
    corpus = load_corpus(args.corpus)
    predictions = load_predictions(args.predictions)
    world = load_world(args.world) if args.world else None
    embedder = _make_embedder(args.embedder)
    phrases = None
    if args.phrases:
        phrases = [l.strip() for l in Path(args.phrases).read_text(encoding="utf-8").splitlines()
                   if l.strip()]
    report = run_eval(args.label, corpus, predictions, embedder, _parse_ks(args.ks),
                      world=world, phrases=phrases)
    csv_text = report.csv_header() + "\n" + report.to_csv_row() + "\n"
    if args.out_csv:
        Path(args.out_csv).write_text(csv_text, encoding="utf-8")
    if args.out_json:
        Path(args.out_json).write_text(json.dumps(report.to_json_dict(), indent=2) + "\n",
                                       encoding="utf-8")
    if not args.out_csv and not args.out_json:
        sys.stdout.write(csv_text)
    return 0


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

DEFAULT_GAMMAS = (1.0, 1.2, 1.5, 2.0, 3.0, 4.0)
DEFAULT_ALPHAS = (1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 12, 15)


def default_betas(alpha: float) -> list[float]:
    return [0.0, alpha / 4, alpha / 2, 3 * alpha / 4, float(alpha)]


@dataclass
class SweepConfig:
    """Grid description for the trade-off harness."""

    corpus: str
    scorer: str
    world: str | None = None
    lm_scorer: str | None = None
    embedder: str = "synthetic"
    modes: tuple = ("cfg",)
    gammas: tuple = DEFAULT_GAMMAS
    alphas: tuple = DEFAULT_ALPHAS
    extra_pairs: tuple = ()
    ks: tuple = (1, 5, 10)
    max_length: int = 32
    prompt_file: str | None = None
    label_prefix: str = ""
    workers: int = 1

    def __post_init__(self):
        self.modes = tuple(self.modes)
        self.gammas = tuple(float(g) for g in self.gammas)
        self.alphas = tuple(float(a) for a in self.alphas)
        self.extra_pairs = tuple((float(a), float(b)) for a, b in self.extra_pairs)
        self.ks = tuple(int(k) for k in self.ks)
        unknown_modes = set(self.modes) - {"cfg", "lm"}
        if unknown_modes:
            raise ValidationError(f"unknown sweep modes {sorted(unknown_modes)}")
        if "cfg" in self.modes and not self.gammas:
            raise ValidationError("cfg sweep requires a non-empty gamma grid")
        if self.workers < 1:
            raise ValidationError("workers must be >= 1")

    def grid(self):
        """Grid points in deterministic order: (mode, gamma, alpha, beta)."""
        points = []
        if "cfg" in self.modes:
            points.extend(("cfg", g, None, None) for g in self.gammas)
        if "lm" in self.modes:
            for a in self.alphas:
                points.extend(("lm", None, a, b) for b in default_betas(a))
            points.extend(("lm", None, a, b) for a, b in self.extra_pairs)
        return points

    @classmethod
    def from_json_dict(cls, obj: dict) -> "SweepConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise ValidationError(f"unknown sweep config keys: {sorted(unknown)}")
        if "corpus" not in obj or "scorer" not in obj:
            raise ValidationError("sweep config needs 'corpus' and 'scorer'")
        return cls(**obj)


SWEEP_PREFIX_COLUMNS = ("mode", "gamma", "alpha", "beta")


def run_sweep(config: SweepConfig):
    """Decode + eval every grid point; returns (csv_lines, curves_dict)."""
    corpus = load_corpus(config.corpus)
    world = load_world(config.world) if config.world else None
    scorer = load_scorer(config.scorer)
    embedder = _make_embedder(config.embedder)
    lm_scorer = None
    prompt = ()
    if "lm" in config.modes:
        if not config.lm_scorer:
            raise ValidationError("lm sweep requires lm_scorer")
        lm_scorer = load_scorer(config.lm_scorer, vocab=scorer.vocab, lm_head=True)
        if config.prompt_file:
            single, _, _ = load_prompt_file(config.prompt_file)
            if single is None:
                raise ValidationError("sweep prompts must be single-prompt files")
            prompt = tuple(single)
    params = DecodeParams(max_length=config.max_length)

    def run_point(point):
        mode, gamma, alpha, beta = point
        if mode == "cfg":
            guidance = CfgGuidance(gamma=gamma)
            label = f"{config.label_prefix}cfg:gamma={gamma:g}"
        else:
            guidance = LmGuidance(alpha=alpha, beta=beta, prompt=prompt)
            label = f"{config.label_prefix}lm:alpha={alpha:g},beta={beta:g}"
        results = decode_batch([it.conditioning for it in corpus], scorer, guidance,
                               params, lm_scorer=lm_scorer)
        failures = [r for r in results if isinstance(r, DecodeFailure)]
        if failures:
            raise DecodeError(f"{label}: item {failures[0].index} failed: {failures[0].error}")
        predictions = {item.id: res.text for item, res in zip(corpus, results)}
        report = run_eval(label, corpus, predictions, embedder, config.ks, world=world)
        prefix = [mode,
                  repr(gamma) if gamma is not None else "",
                  repr(alpha) if alpha is not None else "",
                  repr(beta) if beta is not None else ""]
        csv_line = ",".join(prefix) + "," + report.to_csv_row()
        out = {"gamma": gamma, "alpha": alpha, "beta": beta}
        out.update(report.to_json_dict())
        return csv_line, mode, out

    grid = config.grid()
    if config.workers == 1 or len(grid) <= 1:
        rows = [run_point(p) for p in grid]
    else:
        # Rows are buffered and emitted in grid order regardless of workers.
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            rows = list(pool.map(run_point, grid))

    header = ",".join(SWEEP_PREFIX_COLUMNS) + "," + eval_csv_header(config.ks)
    curves = {"cfg": [], "lm": []}
    for _, mode, point in rows:
        curves[mode].append(point)
    return [header] + [line for line, _, _ in rows], curves


def cmd_sweep(args) -> int:
    if args.sweep_config:
        config = SweepConfig.from_json_dict(_load_json(args.sweep_config))
    else:
        if not args.corpus or not args.scorer:
            raise ValidationError("sweep needs --sweep-config or both --corpus and --scorer")
        config = SweepConfig(
            corpus=args.corpus, scorer=args.scorer, world=args.world,
            lm_scorer=args.lm_scorer, embedder=args.embedder,
            modes=tuple(args.modes.split(",")),
            gammas=tuple(float(g) for g in args.gammas.split(",")),
            ks=tuple(_parse_ks(args.ks)),
            max_length=args.max_length,
        )
    lines, curves = run_sweep(config)
    if args.out_csv:
        Path(args.out_csv).write_text("".join(l + "\n" for l in lines), encoding="utf-8")
    else:
        sys.stdout.write("".join(l + "\n" for l in lines))
    if args.out_json:
        Path(args.out_json).write_text(json.dumps(curves, indent=2) + "\n", encoding="utf-8")
    return 0


# ---------------------------------------------------------------------------
# remaining subcommands
# ---------------------------------------------------------------------------

def cmd_gen_world(args) -> int:
    spec = WorldSpec.from_json_dict(_load_json(args.spec))
    world, corpus = make_synthetic_world(spec, seed=args.seed)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    world_path = out_dir / "world.json"
    corpus_path = out_dir / "corpus.jsonl"
    save_world(world, world_path)
    save_corpus(corpus, corpus_path)
    print(world_path)
    print(corpus_path)
    return 0


def cmd_build_prompt(args) -> int:
    if args.captions.startswith("builtin:"):
        captions = _builtin_prompt_lines(args.captions.split(":", 1)[1])
    else:
        captions = [l for l in Path(args.captions).read_text(encoding="utf-8").splitlines()
                    if l.strip()]
    vocab = demo_vocab() if args.vocab == "demo" else load_vocab_file(args.vocab)
    if args.per_batch:
        if args.num_items is None:
            raise ValidationError("per-batch mode requires --num-items")
        rng = random.Random(args.seed)
        n_batches = -(-args.num_items // args.batch_size)
        prompts = [build_prompt_ids(captions, args.n, args.seed, vocab,
                                    ordered=args.ordered, rng=rng)
                   for _ in range(n_batches)]
        obj = {"batch_size": args.batch_size, "prompts": prompts}
    else:
        obj = {"tokens": build_prompt_ids(captions, args.n, args.seed, vocab,
                                          ordered=args.ordered)}
    text = json.dumps(obj) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def cmd_oracle(args) -> int:
    world = load_world(args.world)
    check = world_consistency_check(world)
    if not check.ok:
        raise ValidationError("world fails consistency: " + "; ".join(check.violations))
    gammas = sorted(float(g) for g in args.gammas.split(","))
    points = pareto_curve(world, args.class_id, gammas)
    obj = curve_to_json_dict(world, args.class_id, points)
    text = json.dumps(obj, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    for prev, cur in zip(points, points[1:]):
        if cur.pmi < prev.pmi - PMI_MONOTONE_TOL:
            print(f"pmi decreased from gamma={prev.gamma:g} to gamma={cur.gamma:g}",
                  file=sys.stderr)
            return 1
    return 0


def cmd_ping_server(args) -> int:
    scorer = remote_handshake(args.endpoint, timeout=args.timeout)
    with scorer:
        probe = scorer.unconditional_logprobs([scorer.info.bos_id])
        print(json.dumps({
            "endpoint": args.endpoint,
            "vocab_size": scorer.info.vocab_size,
            "bos_id": scorer.info.bos_id,
            "eos_id": scorer.info.eos_id,
            "newline_id": scorer.info.newline_id,
            "probe_entries": int(probe.shape[0]),
        }))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="capguide", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-world", help="generate a synthetic world and corpus")
    p.add_argument("--spec", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_gen_world)

    p = sub.add_parser("decode", help="decode a corpus to JSON lines")
    p.add_argument("--corpus", required=True)
    p.add_argument("--scorer", required=True)
    p.add_argument("--vocab", default=None)
    p.add_argument("--guidance", choices=("none", "cfg", "lm"), default="none")
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--lm-scorer", default=None)
    p.add_argument("--prompt-file", default=None)
    p.add_argument("--max-length", type=int, default=32)
    p.add_argument("--strategy", choices=("greedy", "beam"), default="greedy")
    p.add_argument("--beam-width", type=int, default=4)
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--out", default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("build-prompt", help="build a token-id prompt file")
    p.add_argument("--captions", required=True,
                   help="captions file, or builtin:descriptive / builtin:counting")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--vocab", required=True, help="vocab/world file, or 'demo'")
    p.add_argument("--ordered", action="store_true",
                   help="take the first n captions instead of sampling")
    p.add_argument("--per-batch", action="store_true")
    p.add_argument("--num-items", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--out", default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_build_prompt)

    p = sub.add_parser("eval", help="score predictions against a corpus")
    p.add_argument("--predictions", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--world", default=None)
    p.add_argument("--embedder", default="synthetic")
    p.add_argument("--ks", default="1,5,10")
    p.add_argument("--phrases", default=None)
    p.add_argument("--label", default="eval")
    p.add_argument("--out-csv", default=None)
    p.add_argument("--out-json", default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="decode+eval over a guidance grid")
    p.add_argument("--sweep-config", default=None, help="JSON SweepConfig file")
    p.add_argument("--corpus", default=None)
    p.add_argument("--scorer", default=None)
    p.add_argument("--world", default=None)
    p.add_argument("--lm-scorer", default=None)
    p.add_argument("--embedder", default="synthetic")
    p.add_argument("--modes", default="cfg")
    p.add_argument("--gammas", default=",".join(str(g) for g in DEFAULT_GAMMAS))
    p.add_argument("--ks", default="1,5,10")
    p.add_argument("--max-length", type=int, default=32)
    p.add_argument("--out-csv", default=None)
    p.add_argument("--out-json", default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("oracle", help="brute-force Pareto curve for a class")
    p.add_argument("--world", required=True)
    p.add_argument("--class-id", type=int, required=True)
    p.add_argument("--gammas", default=",".join(str(g) for g in DEFAULT_GAMMAS))
    p.add_argument("--out", default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("ping-server", help="handshake and probe a remote scorer")
    p.add_argument("--endpoint", required=True)
    p.add_argument("--timeout", type=float, default=10.0)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_ping_server)

    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        # Config file supplies defaults; explicit flags still win.
        try:
            cfg = _load_json(args.config)
        except (OSError, ParseError) as e:
            print(f"capguide: {e}", file=sys.stderr)
            return 2
        if not isinstance(cfg, dict):
            print("capguide: --config must hold a JSON object", file=sys.stderr)
            return 2
        parser = build_parser()
        parser.set_defaults(**{k.replace("-", "_"): v for k, v in cfg.items()})
        args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, ParseError, RemoteError, OSError) as e:
        print(f"capguide: {e}", file=sys.stderr)
        return 2
    except DecodeError as e:
        print(f"capguide: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
