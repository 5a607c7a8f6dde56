"""Hook a trained torch model and dump named layer activations plus
predictions to the portable layer-representation dataset format."""

from .extract import ExtractionSpec, ExtractionError, extract

__version__ = "0.1.0"
