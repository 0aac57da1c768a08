"""Core numerics: autodiff helpers, the Gaussian VAE, objectives, inference, training and evaluation."""
