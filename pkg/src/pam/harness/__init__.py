"""Synthetic pose data, margin loss, training and verification."""
