"""Desk-scale contrastive fine-tuning lab for dense retrieval.

Subpackages cover the numeric primitives, a toy hash encoder with an
optional top-1 mixture-of-experts intermediate layer, contrastive losses
with an own-query penalty term, hard-negative mining, a deterministic
synthetic dataset generator, the training loop and nDCG evaluation.
"""

__version__ = "0.1.0"
