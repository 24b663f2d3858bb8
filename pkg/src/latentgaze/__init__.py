"""latentgaze: self-supervised latent-feature gaze estimation toolkit.

Pretraining with a local-global momentum-pair encoder, patch-based
fine-tuning for (pitch, yaw) gaze regression, and evaluation harnesses
(range slicing, rotational equivariance sweeps, corruption testing).
"""

__version__ = "0.1.0"
