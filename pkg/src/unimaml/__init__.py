"""First-order MAML with permutation-sensitivity tools and unicorn-MAML."""

from .episodes import (
    ClassPool,
    Episode,
    EpisodeSpec,
    Permutation,
    apply_permutation,
    enumerate_permutations,
    fixed_point_histogram,
    generate_synthetic_pool,
    rotated_permutations,
    sample_episode,
)
from .maml import InnerLoopConfig, TrainConfig, fo_meta_grad, inner_loop, meta_train, unicorn_meta_grad
from .metatest import EvalReport, evaluate, run_strategy
from .network import OuterOptimizer, ParamSet, forward_logits, init_params

__version__ = "0.1.0"
