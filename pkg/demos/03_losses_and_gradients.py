"""Training signals: the pairwise sigmoid loss, feature distillation, and a gradient audit.

Run: python3 demos/03_losses_and_gradients.py
"""

import math

import torch

from nativevit.gradaudit import audit_tiny, worst
from nativevit.objectives import kl_distillation_loss, lambda_schedule, sigmoid_contrastive_loss

# Each of the B*B image-text pairs is its own binary problem: matched pairs are
# positives, the rest negatives. No softmax over the batch.
x = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
y = torch.tensor([[0.0, 1.0]], dtype=torch.float64)
print("one orthogonal pair, t=1, b=0:", float(sigmoid_contrastive_loss(x, y, 1.0, 0.0)), "= ln 2")
e = torch.eye(2, dtype=torch.float64)
print("two orthonormal pairs:", float(sigmoid_contrastive_loss(e, e, 1.0, 0.0)),
      "= (2 ln(1 + 1/e) + 2 ln 2) / 2 =", (2 * math.log1p(math.exp(-1)) + 2 * math.log(2)) / 2)

# The default init t = 10, b = -10 scores every pair as a likely negative, which
# suits the B*B - B negatives; the loss starts dominated by the B positives.
print("init scale, random unit vectors:",
      float(sigmoid_contrastive_loss(*(torch.nn.functional.normalize(torch.randn(8, 16), dim=-1) for _ in "xy"),
                                     10.0, -10.0)))

# Distillation compares softmax distributions of student and teacher features.
teacher = torch.tensor([[0.0, math.log(3)]], dtype=torch.float64)
print("\nKL(teacher [1/4, 3/4] || student [1/2, 1/2]):", float(kl_distillation_loss(torch.zeros(1, 2), teacher)))
print("distillation weight over stage 1 (a step down to zero at 8000 samples):",
      [lambda_schedule(n, 8000) for n in (0, 4000, 7999, 8000, 12000)])

# Every parameter group of the tiny encoder, the alignment head and both losses,
# checked against central differences in float64.
rows = audit_tiny()
print(f"\n{'group':40} {'numel':>7} {'rel error':>10}")
for r in rows:
    print(f"{r['group']:40} {r['numel']:>7} {r['rel_error']:>10.1e}")
print("worst relative error:", f"{worst(rows):.1e}")
