"""Guided decoding engine and caption-evaluation bench.

Library surface: corpora and tabular worlds (``corpus``), scorers
(``scorer``), log-space fusion rules (``guidance``), the decoding loop
(``decode``), the metric suite (``metrics``), brute-force oracles
(``oracle``), and the ``capguide`` command line (``cli``).
"""

from .corpus import (
    Conditioning,
    CorpusItem,
    TabularWorld,
    Vocabulary,
    WorldSpec,
    load_corpus,
    load_world,
    make_synthetic_world,
    save_corpus,
    save_world,
    world_consistency_check,
)
from .decode import (
    Beam,
    DecodeFailure,
    DecodeParams,
    DecodeResult,
    Greedy,
    beam_decode,
    decode_batch,
    greedy_decode,
)
from .guidance import CfgGuidance, LmGuidance, cfg_fuse, lm_fuse, transfer_newline_to_eos
from .metrics import (
    EvalReport,
    SyntheticEmbedder,
    bleu4,
    build_report,
    cider,
    embed_score,
    length_stats,
    mention_rate,
    recall_at_k,
    ref_combined_score,
    ref_only_score,
    rouge_l,
    synthetic_embed,
    tokenize_for_metrics,
)
from .oracle import (
    brute_force_argmax_cfg,
    brute_force_argmax_lm,
    enumerate_sequences,
    pareto_curve,
    pmi,
    pmi_k,
)
from .scorer import (
    MarginalScorer,
    NGramScorer,
    RemoteScorer,
    TabularScorer,
    remote_handshake,
    train_ngram,
)

__version__ = "0.1.0"
