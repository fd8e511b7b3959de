"""Deep and wide multiscale recursive networks for affinity-graph prediction in 3D images."""

__version__ = "0.1.0"
