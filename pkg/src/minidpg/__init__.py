"""Desk-scale lab for steering an autoregressive token model toward a
compilable toy language.

A frozen base model `a` and a binary compilability scorer `b` define the
unnormalized product P(x) = a(x) b(x).  The trainable policy approximates
the normalized distribution p = P/Z either with adaptive distributional
policy gradients or with Reinforce baselines, and everything is measured
by a nine-metric evaluation suite.
"""

__version__ = "0.1.0"

from .lang import (BOS_SURFACE, EOS_SURFACE, CompileResult, ErrorKind,
                   LintReport, Node, ParseError, TokenSeq, UnknownTokenError,
                   Vocab, ast_node_count, compile_check, detokenize,
                   external_check, lint, parse, tokenize)
from .corpus import (Dataset, GenConfig, RetriesExhaustedError, build_dataset,
                     corrupt, generate_program, load_dataset, save_dataset)
from .policy import (MissingEosError, MleConfig, NeuralPolicy, TabularPolicy,
                     init_policy, load_checkpoint, save_checkpoint, train_base)
from .ebm import (Ebm, PartitionEstimate, estimate_Z, exact_Z, exact_p,
                  filter_sample, filter_sample_many, truncation_mass)
from .tuning import (Estimate, NonFiniteGradientError, TuneConfig, TuneTrace,
                     forward_kl_exact, is_forward_kl, kldpg_step,
                     reinforce_step, reverse_kl, reverse_kl_exact, tune)
from .metrics import (MetricsRecord, SampleSet, compilability_rate, distinct1,
                      error_histogram, evaluate, lint_rate, mean_ast_nodes,
                      mean_char_length, perplexity, self_bleu5,
                      token_rank_frequency)
