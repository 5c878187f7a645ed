"""4D spatio-temporal deep learning for fMRI classification."""
