"""Dynamic Gaussian receptive-field segmentation with test-time entropy minimization."""
