"""Multi-subject personalization from a single reference image via concept-regularized cross-attention."""
