"""
vsmlab - a desk-scale laboratory for variational score matching.

Trains Gaussian VAEs with Fisher-divergence objectives (M1, M2, M3, joint FD)
next to the ELBO, and cross-checks the analytic identities behind them.
"""

import torch

__version__ = "0.1.0"

# Every computation in the package is float64
torch.set_default_dtype(torch.float64)
