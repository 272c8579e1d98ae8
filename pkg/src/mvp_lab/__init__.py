"""mvp-lab: desk-scale multiscale predictive video pretraining.

Library layout mirrors the pipeline: `synthcorpus` generates structured
activity videos, `sampling` cuts clips and observed/future pairs,
`encoder` maps clips to region feature maps, `aggregation` contextualizes
sequences and builds multiscale targets, `objective` holds the contrastive
losses, `downstream` the forecasting probes, and `harness` the
reproducible experiment driver. `autodiff`/`nn` are the numerical core.
"""

from . import aggregation, autodiff, downstream, encoder, harness, nn, objective, sampling, synthcorpus

__version__ = "0.1.0"

__all__ = [
    "aggregation", "autodiff", "downstream", "encoder", "harness", "nn",
    "objective", "sampling", "synthcorpus", "__version__",
]
