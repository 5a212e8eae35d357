# Learning a planted temporal rule end to end:
#   r1(x, y, t) and r2(y, z, t)  =>  r3(x, z, t + 1)
import numpy as np

from tempkg.evaluation import explain
from tempkg.experiments import Recipe, planted_questions, run_planted
from tempkg.scoring import BundleSource
from tempkg.synthetic import planted_rule_tkg

recipe = Recipe()
data = planted_rule_tkg(0, test_window=recipe.test_window)
g = data.context
print(g)
print(len(data.queries), "held-out rule conclusions,", data.distractors, "distractor edges")

# 50 candidates per query; random ranking would score H(50)/50
baseline = sum(1 / k for k in range(1, 51)) / 50
print(f"random-ranking MRR {baseline:.3f}")


def show(epoch, m):
    print(f"epoch {epoch:2d}  MRR {m.mrr:.3f}  hits@1 {m.hits1:.3f}  hits@3 {m.hits3:.3f}")


res = run_planted(0, recipe, data, callback=show)
print("loss per epoch:", np.round(res.loss_history, 4).tolist())

# why did the model pick its top answer for the first query?
q = planted_questions(data, 0, recipe.num_candidates)[0]
src = BundleSource(g, res.model)
ex = explain(res.model, g, q, q.truth, src)
print("query:", g.entities[q.subject], g.relations[q.relation], "?", g.time_labels[q.time.t])
print("truth:", g.entities[q.truth])
print(f"best sentence (weight {ex.weight:.3f}, p {ex.p:.3f}):")
print("  ", ex.text)
