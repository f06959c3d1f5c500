"""Build a corpus, pretrain the base model, inspect what it learned.

A small-scale version of the desk benchmark (about a minute).

Run: python demos/02_corpus_and_base_model.py
"""

import numpy as np

import minidpg as m
from minidpg import metrics as mx
from minidpg.corpus import compilable_fraction

vocab = m.Vocab.default()

cfg = m.GenConfig(seed=11, max_stmts=2, max_depth=1, l_max=24,
                  more_terms=0.45, more_factors=0.1,
                  factor_weights=(0.45, 0.45, 0.10),
                  p_corrupt=0.05, corrupt_ops=("drop",))
dataset = m.build_dataset(vocab, cfg, n_train=2000, n_test=200)
print(f"corpus: {len(dataset.train)} train / {len(dataset.test)} test, "
      f"compilable fraction {compilable_fraction(vocab, dataset.train):.3f}")
for s in dataset.train[:4]:
    print("   ", m.detokenize(vocab, s))

mle = m.MleConfig(kind="neural", k=8, d=16, h=64, lr=1e-3,
                  batch_size=64, epochs=6, seed=5)
model, losses = m.train_base(dataset, mle, vocab)
print("\nper-epoch train NLL:", [round(l, 2) for l in losses])
print("held-out perplexity:", round(mx.perplexity(model, dataset.test), 3))

rng = np.random.default_rng(0)
samples = mx.SampleSet(tuple(model.sample_batch(rng, 500, 24)))
print("\nmodel samples:")
for s in samples.seqs[:5]:
    mark = "ok " if m.compile_check(vocab, s).ok else "ERR"
    print(f"  [{mark}]", m.detokenize(vocab, s))
print("compilability rate:", mx.compilability_rate(vocab, samples))
print("error histogram:",
      {k: round(v, 3) for k, v in mx.error_histogram(vocab, samples).items()
       if v > 0})

ckpt = "/tmp/minidpg_demo_base.ckpt"
m.save_checkpoint(model, ckpt)
back = m.load_checkpoint(ckpt)
print("\ncheckpoint round trip ok:",
      all(np.array_equal(model.params[k], back.params[k])
          for k in model.params))
