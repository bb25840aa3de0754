"""Digital twin of an optically levitated nanoparticle array."""

__version__ = "0.1.0"
