"""Trigger-induced CTR modeling on a small numpy autodiff kernel."""

from . import attention, data, features, model, tensor, train  # noqa: F401

__version__ = "0.1.0"
