"""Out-of-distribution-robust tabular prediction under latent-class shift.

Pipeline: estimate the latent-class posterior from a proxy variable or
source ids with a regularized encoder/decoder factorization, train a
posterior-gated mixture-of-experts, then reweight the gate at test time
using a method-of-moments estimate of the latent marginal shift.
"""

__version__ = "0.1.0"
