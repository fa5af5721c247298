"""Joint self-supervised representation learning and Student's-t mixture
clustering for sparse, noisy images, with a synthetic benchmark and a
clustering-metrics harness."""

__version__ = "0.1.0"
