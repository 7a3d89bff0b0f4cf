"""
A desk-scale search on synthetic patterns
=========================================

Four pattern classes (stripes, checkerboard, solid) with Gaussian noise. The
search alternates SGD steps on the weights and gammas with Adam steps on alpha.
The network is then discretized and scored on held-out images.
"""

import sys

from renas.config import SearchConfig
from renas.discretize import arch_to_dot, derive, derived_forward
from renas.search import evaluate, run_search

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 600
cfg = SearchConfig(
    seed=0, M=2, N=4, K=2, C0=8, classes=4, image_size=16, batch_size=32, total_steps=steps, val_size=320,
    lr_w=0.03, dataset={"kind": "synthetic", "noise_sigma": 0.3, "samples_per_class": 500},
)


def report(rec):
    if rec["step"] % 50 == 0:
        print(f"step {rec['step']:4d}  train {rec['train_loss']:.3f}  val {rec['val_loss']:.3f}  lr {rec['lr']:.4f}")


res = run_search(cfg, on_step=report)
print(f"validation loss (argmax ops): {res.initial_val_loss:.3f} -> {res.final_val_loss:.3f}")

arch = derive(res.checkpoint)
print("chosen ops:", [cfg.op_set[o] for o in arch.ops])
print(f"kept {arch.retained_fraction():.0%} of block connections")
loss, acc = evaluate(lambda x: derived_forward(arch, x), res.test)
print(f"derived network on the test split: loss {loss:.3f}, accuracy {acc:.1%}")
print(arch_to_dot(arch)[:300], "...")
