"""Cross-modal knowledge distillation for next-action anticipation.

A text-side teacher trained on observed action-label sequences supervises a
vision-side student that must predict the next action from frame features
alone. Includes a synthetic benchmark, a masked-token pretraining stage for
the teacher, multi-teacher ensembling, and imbalance-aware evaluation.
"""

__version__ = "0.1.0"
