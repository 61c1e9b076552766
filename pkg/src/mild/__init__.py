"""Multitemporal hyperspectral unmixing with latent dynamics.

Modules
-------
hsidata    cube / abundance / endmember types, simplex projection, file formats
synthgen   deterministic synthetic sequences (synth1, synth2 presets)
initbase   VCA endmember extraction and FCLS abundance estimation
diffkit    small reverse-mode autodiff engine, MLPs, Adam, parameter files
model      encoder + latent-fusion model, training and checkpoints
dyncheck   numerical consistency / convergence / stability checks
metrics    NRMSE scores, endmember alignment, abundance map export
cli        command-line front end (``mild`` / ``python -m mild``)
"""

__version__ = "0.1.0"
