"""Retrieval-augmented image classifier whose training samples can be
forgotten by deleting their memory entries."""

__version__ = "0.1.0"
