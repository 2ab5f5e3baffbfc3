"""Wave-domain signal processing with stacked and flexible intelligent metasurfaces."""

__version__ = "0.1.0"
