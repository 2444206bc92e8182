"""flatlat: flat latent sequences for feature grids.

A register-token VAE compresses a patch-feature grid into a short 1D token
sequence; a flow-matching transformer generates in that latent space. Also
ships the representation analyses and an analytic transformer cost model.
"""

__version__ = "0.1.0"
