"""Dictionary learning in a two-layer integrate-and-fire network.

Submodules:

``model``     weights, phase snapshots, run configuration, DLM1 checkpoints
``engine``    fixed-step spiking simulation
``coding``    sparse coding with the network
``learning``  contrastive two-phase learning loop
``oracle``    coordinate-descent lasso solver, surrogate objective, SGD baseline
``data_io``   PGM / IDX readers, patch preprocessing, noise
``metrics``   consistency, symmetry, PSNR, denoising, atlases, plot data
``cli``       command-line entry point

The package namespace itself stays empty so that importing the CLI does not
load numba before the thread count is configured.
"""

__version__ = "0.1.0"
