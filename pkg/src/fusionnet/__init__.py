"""FusionNet reading comprehension and NLI models in numpy."""

__version__ = "0.1.0"
