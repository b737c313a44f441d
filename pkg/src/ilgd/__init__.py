"""ilgd: a desk-scale conditional diffusion engine with layout control.

The package trains a small transformer denoiser on a synthetic shapes
dataset and steers sampling toward user-supplied bounding-box layouts by
injecting attention bias and following attention-map loss gradients, with
several baseline guidance schemes, deterministic samplers, an analytic
Gaussian testbed, and an oracle-based evaluation pipeline.
"""

__version__ = "0.1.0"
