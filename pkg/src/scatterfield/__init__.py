"""Neural in-scattering prediction for high-albedo participating media.

Submodules:

- ``volume_grid``: density grids, the mean-pooled pyramid and ray marching
- ``phase``: isotropic / HG / multi-lobe HG phase functions and cap integrals
- ``templates``: diffuse and highlight sampling templates
- ``features``: graded transmittance fields and per-template feature tables
- ``rte``: Monte Carlo radiative-transfer reference (labels, images)
- ``nn``: small reverse-mode autodiff toolkit, attention block, Adam
- ``predictor``: the backbone network, loss, training and neural rendering
- ``cli``: the ``scatterfield`` command line
"""

__version__ = "0.1.0"
