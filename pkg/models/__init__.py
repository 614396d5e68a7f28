"""Conformer encoder, Cleancoder frontend and CTC acoustic model."""
