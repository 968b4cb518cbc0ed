"""Structure-aware unpaired image synthesis with a dual-attention transformer."""

__version__ = "0.1.0"
