"""Tour of MiniLang: tokenization, compilability, ASTs, lint checks.

Run: python demos/01_language_tour.py
"""

import minidpg as m

vocab = m.Vocab.default()
print("vocabulary:", " ".join(vocab.tokens), f"({len(vocab)} tokens)")

print("\n-- tokenize / detokenize --")
seq = m.tokenize(vocab, "x = 1 + 2 * y ;")
print("ids:", seq.ids)
print("round trip:", repr(m.detokenize(vocab, seq)))

print("\n-- compilability scorer --")
for text in ("x = 1 + 2 ;",
             "x = ( 1 + 2 ;",
             "x = 1 + 2",
             "",
             "y = ( ( 0 ) ) ;"):
    res = m.compile_check(vocab, m.tokenize(vocab, text))
    if res.ok:
        print(f"  {text!r:26} -> compiles")
    else:
        print(f"  {text!r:26} -> {res.error_kind.value} at token "
              f"{res.error_position}")

print("\n-- ASTs --")
for text in ("x = 1 ;", "x = ( 1 ) ;", "x = 1 + 2 * y ;"):
    ast = m.parse(vocab, m.tokenize(vocab, text))
    print(f"  {text!r:20} -> {m.ast_node_count(ast)} nodes")
print("  (parentheses are grouping only: they add no node)")

print("\n-- lint rules --")
for text in ("x = ( 1 ) ;",
             "x = 1 ; x = 2 ;",
             "x = ( ( ( ( 0 ) ) ) ) ;"):
    rep = m.lint(vocab, m.tokenize(vocab, text))
    print(f"  {text!r:26} -> {list(rep.violations)}")

print("\n-- external checker (exit-status contract) --")
ok = m.external_check(["sh", "-c", "exit 0"], vocab,
                      m.tokenize(vocab, "x = 1 ;"))
bad = m.external_check(["sh", "-c", "exit 1"], vocab,
                       m.tokenize(vocab, "x = 1 ;"))
print("  exit 0 ->", ok.ok, "| exit 1 ->", bad.ok)
