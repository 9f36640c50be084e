"""Few-shot radiance fields regularised by a low-frequency proxy: a smooth
field supplies depth (through a distilled ray field) and empty space (through
its occupancy) to a high-frequency field trained on the same views."""

__version__ = "0.1.0"
