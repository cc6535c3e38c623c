"""Sparse signature grids for online handwriting and sparse DeepCNet training.

Submodules:
    signature   truncated path-signature algebra for piecewise-linear paths
    raster      characters -> sparse N x N grids of windowed signatures
    network     DeepCNet construction, sparse/dense evaluation, training
    data        dataset loaders (IDX images, pen-digit records, stroke JSONL)
    verify      self-check suites run by ``sigcnn verify``
    cli         command-line entry point (train / eval / inspect / verify)

The top-level package stays import-light so the CLI can pin BLAS thread
counts before numpy is loaded; import the submodules directly.
"""

__version__ = "0.1.0"

__all__ = ["signature", "raster", "network", "data", "verify", "cli"]
