"""Text-prompted volumetric segmentation on synthetic phantoms.

The package covers the full desk-scale pipeline: report curation into
organ-level captions, contrastive image-text pretraining of toy 3D encoders,
prompt-conditioned mask prediction, and generalization evaluation against
merged-organ and synonym prompts.
"""

__version__ = "0.1.0"
