"""Procedural-hierarchical pre-training pipeline for instructional-video
representations: pseudo-label mining, clip augmentation, joint clip/video
training of a small transformer encoder, analytical early stopping, and
downstream fine-tuning."""

__version__ = "0.1.0"
