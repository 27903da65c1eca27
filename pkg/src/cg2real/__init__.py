"""Two-stage synthetic-to-real image translation on disentangled albedo/shading layers."""

__version__ = "0.1.0"
