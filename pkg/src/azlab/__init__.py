"""Attention-zone ablation lab: a from-scratch span-extraction encoder and its sweep tools."""

__version__ = "0.1.0"
