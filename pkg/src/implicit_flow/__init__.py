"""Level-set evolution of neural implicit surfaces under explicit flow fields."""

__version__ = "0.1.0"
