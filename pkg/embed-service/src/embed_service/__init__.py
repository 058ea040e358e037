"""Sentence-embedding microservice with a deterministic hashed encoder."""

from .app import create_app
from .encoder import DIMENSIONS, MODEL_ID, embed_batch, embed_text

__all__ = ["create_app", "embed_text", "embed_batch", "MODEL_ID", "DIMENSIONS"]
