"""The nine-metric evaluation suite on hand-picked sample sets.

Run: python demos/05_metric_suite.py
"""

import numpy as np

import minidpg as m
from minidpg import metrics as mx

vocab = m.Vocab.default()


def sample_set(*texts):
    return mx.SampleSet(tuple(m.tokenize(vocab, t) for t in texts))


diverse = sample_set("x = 1 ;",
                     "y = 2 + z ;",
                     "z = ( x * 0 ) - 1 ;",
                     "x = 2 / y ;")
repetitive = sample_set("x = x + x ;",
                        "x = x + x ;",
                        "x = x + x ;",
                        "x = x + x + x ;")
broken = sample_set("x = 1 ;", "x = 1", "x = ( 1 ;", "x x = 2 ;")

for name, ss in (("diverse", diverse), ("repetitive", repetitive),
                 ("broken", broken)):
    print(f"== {name} set ({len(ss)} samples)")
    print("   compilability:", mx.compilability_rate(vocab, ss))
    print("   distinct-1:   ", round(mx.distinct1(vocab, ss), 4))
    print("   self-BLEU-5:  ", round(mx.self_bleu5(vocab, ss), 4))
    print("   mean chars:   ", mx.mean_char_length(vocab, ss))
    per_char, per_token = mx.lint_rate(vocab, ss)
    print("   lint/char:    ", round(per_char, 4),
          " lint/token:", round(per_token, 4))
    hist = {k: v for k, v in mx.error_histogram(vocab, ss).items() if v > 0}
    print("   errors:       ", hist or "none")
    try:
        print("   mean AST nodes:", mx.mean_ast_nodes(vocab, ss))
    except mx.NoCompilableSamplesError:
        print("   mean AST nodes: (nothing compiles)")
    print("   token rank-frequency:",
          mx.token_rank_frequency(vocab, ss)[:5])
    print()

print("perplexity of the masked-uniform model is exactly |V|-1:")
pol = m.NeuralPolicy(vocab, k=3, d=4, h=4, seed=0)
for k in pol.params:
    pol.params[k][:] = 0.0
print("  ", mx.perplexity(pol, [m.tokenize(vocab, "x = 1 ;")]))
