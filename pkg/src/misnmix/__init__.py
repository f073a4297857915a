"""Joint-species abundance estimation from spatially misaligned count data.

Fine-grid visit counts and coarse-region cull totals are combined in an
N-mixture model with multivariate CAR spatial priors, fitted by an adaptive
Metropolis-within-Gibbs sampler, with cull-rate uncertainty propagated by
pooling posterior samples across sampled cull scenarios.
"""

__version__ = "0.1.0"
