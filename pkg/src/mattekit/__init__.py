"""Deep image matting: synthetic compositing, a two-stage network, metrics and a CLI."""

__version__ = "0.1.0"

from .estimator import DeepMattingEstimator, predict_matte  # noqa: E402

__all__ = ["DeepMattingEstimator", "predict_matte", "__version__"]
