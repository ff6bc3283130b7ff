"""Deep encoding pooling texture recognition and DEP-manifold embedding."""
