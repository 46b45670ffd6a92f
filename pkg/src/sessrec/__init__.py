"""Session-based next-item recommendation with representation-consistent encoders."""

__version__ = "0.1.0"

from .data import (  # noqa: E402
    Batch,
    Example,
    RawEvent,
    SessionCorpus,
    batch_iter,
    build_corpus,
    expand_prefixes,
    ingest,
    load_corpus,
    make_batch,
    save_corpus,
    temporal_split,
)
from .evaluation import (  # noqa: E402
    MetricsReport,
    bayes_optimal_recall,
    consistency_report,
    evaluate,
    make_synthetic_corpus,
    rank_metrics,
    verify_lemma,
)
from .model import (  # noqa: E402
    ModelConfig,
    ModelState,
    batch_loss,
    dot_loss,
    encode,
    encode_nonlinear_baseline,
    encode_rce_ave,
    encode_rce_trm,
    init_state,
    load_checkpoint,
    rdm_loss,
    save_checkpoint,
    score_all,
)
from .tensor import Tape, Tensor, grad_check  # noqa: E402
from .trainer import TrainConfig, ablate, ablation_variants, grid_search, make_rng, train  # noqa: E402
