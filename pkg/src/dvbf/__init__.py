"""Deep variational Bayes filters from pixel sequences.

Library + CLI for learning latent state-space models from image/control
sequences (pendulum and bouncing-ball simulators included), training them
with plain, beta-scaled or GECO-constrained sequential ELBOs, evaluating
the learned dynamics (correlation, n-step MSE, trajectory strips) and
driving empowerment-based control on top of the learned transition model.
"""

__version__ = "0.1.0"
