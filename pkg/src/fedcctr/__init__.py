"""Federated cross-domain CTR simulator with LLM augmentation, contrastive transformers and adaptive LDP."""

__version__ = "0.1.0"
