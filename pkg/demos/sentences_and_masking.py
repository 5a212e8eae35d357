# Structured sentences for one target fact, then one time-masked training sample.
import numpy as np

from tempkg import kg_store
from tempkg.corpus import build_vocab, time_mask, tokenize
from tempkg.sentences import SentenceConfig, TemplateTable, build_bundle

text = """\
Iraq\tMake_statement\tIran\t2014-12-20
Iran\tHost_a_visit\tSyria\t2014-12-22
Syria\tConsult\tIraq\t2014-12-24
Iraq\tEngage_in_diplomatic_cooperation\tIran\t2014-12-29
Turkey\tConsult\tIran\t2014-12-21
"""
g = kg_store.load_tkg(text)
print(g)
print(g.stats())

templates = TemplateTable({"Engage_in_diplomatic_cooperation":
                           "On {t} , {s} engaged in diplomatic cooperation with {o} ."})
target = g.edges[3]
bundle = build_bundle(g, target, 3, templates, SentenceConfig(walks=64), np.random.default_rng(0))

# each sentence: target + path, then one history line per entity
for sent in bundle.sentences:
    for seg in sent.segments:
        print("   ", " ".join(seg))
    print("    earliest time index:", sent.earliest_time)
    print()

vocab = build_vocab(g, templates)
ts = tokenize(bundle.sentences[0], vocab)
print(len(vocab), "tokens in the vocabulary,", vocab.num_time_tokens, "of them time tokens")
print("time positions:", ts.time_positions.tolist())

rng = np.random.default_rng(1)
ms = time_mask(ts, vocab, rng)
shown = [vocab.tokens[i] for i in ms.input_ids]
print(" ".join(shown))
for p, kind in zip(ms.positions, ms.kinds):
    print(f"  position {p:3d}  {vocab.tokens[ts.ids[p]]:<30} {kind}")
