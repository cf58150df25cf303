"""Input-space prompt adaptation of a frozen open-vocabulary detector to shifted modalities."""

__version__ = "0.1.0"
