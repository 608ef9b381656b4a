"""
Patient votes and weighted metrics
==================================
"""

import numpy as np

from mcl import inference

# Three crops say IV, one says II and one says III.
probs = np.array([[0.1, 0.1, 0.8], [0.2, 0.1, 0.7], [0.1, 0.2, 0.7], [0.8, 0.1, 0.1], [0.1, 0.8, 0.1]])
grade, votes, tie = inference.vote(probs)
print("grade index", grade, "votes", votes.tolist(), "tie", tie)

# A tie in counts goes to the class with the larger summed score, then to the higher grade.
print(inference.vote(np.array([[0.6, 0.0, 0.4], [0.5, 0.0, 0.9]])))
print(inference.vote(np.array([[0.6, 0.4, 0.0], [0.4, 0.6, 0.0]])))

# Soft voting averages probabilities instead of counting argmaxes.
soft = np.array([[0.4, 0.0, 0.6], [0.4, 0.0, 0.6], [1.0, 0.0, 0.0]])
print("hard:", inference.vote(soft)[0], "soft:", inference.vote(soft, soft=True)[0])

# %%
# A constant grade IV predictor on a 27/25/48 test set
# ----------------------------------------------------
y = [0] * 27 + [1] * 25 + [2] * 48
m = inference.metrics_from_predictions(y, [2] * 100)
for key in ("accuracy", "precision_weighted", "recall_weighted", "precision_macro", "recall_macro"):
    print(f"{key:20s} {m[key]:.4f}")
print(np.array(m["confusion"]))
