"""Per-modality autoencoders with a joint latent score model.

Train one autoencoder per modality, model the stacked latent space with a
variance-preserving diffusion score network, and generate any subset of
modalities conditioned on any other subset, with optional energy-based or
contrastive coherence guidance and a metric harness for evaluating the
results.
"""

__version__ = "0.1.0"
