"""Native-resolution diffusion transformer, desk scale.

Variable-resolution latent tokenization, fixed-budget sequence packing,
axial 2D rotary embeddings, block-diagonal packed attention, adaLN-zero
transformer blocks with explicit backprop, and flow-matching
training/sampling. Pure numpy; CPU only.
"""

__version__ = "0.1.0"
