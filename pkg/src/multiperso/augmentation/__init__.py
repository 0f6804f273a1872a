"""Prompt and image augmentation for multi-subject personalization."""
