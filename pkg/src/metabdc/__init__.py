"""Few-shot meta-learning across label granularities on synthetic imagery.

Pipeline: contrastive pretraining with iterative partition-based invariance
penalties, then episodic fine-tuning of a Brownian-distance-covariance
metric head, evaluated by per-episode AUROC.
"""

__version__ = "0.1.0"
