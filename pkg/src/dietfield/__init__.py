"""Few-shot view synthesis with a semantic consistency loss."""
