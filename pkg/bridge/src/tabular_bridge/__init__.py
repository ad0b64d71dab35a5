"""Stdio line-protocol server exposing a pretrained tabular regressor.

One JSON document per line on stdin/stdout; ops: hello, fit_predict,
shutdown. Mock mode answers every fit_predict with the training-target
mean and has no dependencies beyond the standard library.
"""

from .server import main, serve

__version__ = "0.1.0"
