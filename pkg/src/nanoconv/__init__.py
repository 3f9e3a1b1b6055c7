"""In-silico spatially-varying nanophotonic convolution network.

Electronic reference layers, a small classifier trained with hand-written
gradients, metalens simulation and inverse design, and a CLI harness.
"""

from .errors import ConfigurationError, FormatError, InvalidArgument, NumericalFailure

__version__ = "0.1.0"
