"""Encrypted multimodal entity resolution on a leveled approximate HE scheme."""

__version__ = "0.1.0"
