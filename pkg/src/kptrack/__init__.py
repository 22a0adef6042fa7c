"""Keypoint-only multi-person pose tracking."""
