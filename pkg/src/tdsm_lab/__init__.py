"""Label-noise-robust score-based generation on closed-form Gaussian mixtures.

Modules:
    gmm_oracle        exact scores, weights and posteriors for the mixture
    label_noise       transition matrices, Bayes conversions, corruption
    nn_core           numpy reverse-mode autodiff, parameters, optimisers
    score_model       conditional score MLP
    noisy_classifier  time-dependent noisy-label classifier, volume-min T estimate
    objectives        DSM / S-weighted DSM / transition-aware DSM losses and training
    sampler           reverse SDE / ODE samplers and guidance
    cli               the ``tdsm-lab`` command
"""

__version__ = "0.1.0"
