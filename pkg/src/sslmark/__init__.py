"""Ownership watermarking toolkit for self-supervised image encoders."""
