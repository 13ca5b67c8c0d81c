"""Cross-band (3.5 GHz -> 7 GHz) directional radio-map prediction on synthetic urban scenes."""

__version__ = "0.1.0"
