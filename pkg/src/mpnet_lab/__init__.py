"""Masked and permuted language-model pre-training at desk scale."""
