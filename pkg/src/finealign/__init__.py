"""Fine-grained image-text alignment at desk scale.

A numpy autograd engine, toy dual encoders, region pooling, contrastive
objectives, a curation pipeline with rule-based hard negatives, a two-stage
trainer and region-level evaluation harnesses.
"""

__version__ = "0.1.0"
