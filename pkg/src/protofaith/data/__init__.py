"""File formats for models, tensors, heatmaps and tables."""
