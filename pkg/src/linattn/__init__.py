"""Desk-scale laboratory for linear attention.

Feature maps (a trainable exp-MLP map, a degree-2 Taylor map, and classic
baselines), softmax/linear/recurrent attention, attention-weight
distillation, an associative-recall trainer, diagnostics, and scaling
benchmarks. Everything runs in float64 numpy with hand-written gradients
certified against finite differences.
"""

__version__ = "0.1.0"
