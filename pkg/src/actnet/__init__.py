"""Cross-architecture semi-supervised video classification on a from-scratch numpy autodiff core."""

__version__ = "0.1.0"
