"""
The three training losses on toy matrices
=========================================

Each loss is checked against a value you can work out by hand.
"""

import math

import numpy as np
import torch

from mcl import losses

# NMC loss: when every row is the same, the positive and all N-1 negatives
# score equally, so the loss is log(N-1) whatever the temperature.
g = np.tile([1.0, -2.0, 0.5, 3.0], (4, 1))
print("nmc on identical rows:", losses.nmc_loss(g, g, tau=0.5).item(), "vs log 3 =", math.log(3))

# Positives are left out of the denominator, so well-aligned pairs push the value below zero.
pairs = np.array([[1.0, -1.0, 0.0, 0.0], [0.0, 0.0, 1.0, -1.0]])
print("nmc on two orthogonal pairs (tau=1):", losses.nmc_loss(pairs, pairs, tau=1.0).item())

# %%
# Nuclear norm and the low-rank loss
# ----------------------------------
# Two classes on orthogonal axes: each class matrix has norm sqrt(2), the
# whole batch 2*sqrt(2), so the loss sits at zero.
xa = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
y = np.array([0, 0, 1, 1])
print("nuclear norm of I3:", losses.nuclear_norm(np.eye(3)).item())
print("orthogonal classes:", losses.lowrank_loss(xa, np.zeros_like(xa), y, delta=1.0).item())

# Two classes along the same direction give 2 - sqrt(2).
shared = np.array([[1.0, 0.0], [1.0, 0.0]])
print("shared direction:", losses.lowrank_loss(shared, np.zeros_like(shared), [0, 1], delta=1.0).item(),
      "expected", 2 - math.sqrt(2))

# Autograd goes through the SVD subgradient rather than differentiating the SVD itself.
ta = torch.tensor(np.random.default_rng(0).normal(size=(6, 4)), requires_grad=True)
tb = torch.tensor(np.random.default_rng(1).normal(size=(6, 4)))
losses.lowrank_loss(ta, tb, [0, 0, 1, 1, 2, 2]).backward()
print("subgradient norm:", ta.grad.norm().item())

# %%
# Truncated Taylor cross-entropy
# ------------------------------
# With t=3 the loss is the sum over k=1..3 of (1-p)^k / k, bounded by 1 + 1/2 + 1/3.
for p in (1.0, 0.5, 0.0):
    print(f"taylor_ce(p={p}) =", round(losses.taylor_ce([p, 1 - p], 0, t=3).item(), 7))
print("-log(0.5) for comparison:", -math.log(0.5))
