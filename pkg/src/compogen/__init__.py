"""compogen: compositional transition synthesis with factor-tokenized diffusion.

A desk-scale study of zero-shot synthetic data generation for factored
manipulation tasks: a planar compositional benchmark, four diffusion denoiser
architectures behind one contract, offline-RL validation, and an iterative
bootstrapping loop that folds validated synthetic data back into training.
"""

__version__ = "0.1.0"
