"""csrecon: invertible diffusion reconstruction for block compressed sensing."""

__version__ = "0.1.0"
