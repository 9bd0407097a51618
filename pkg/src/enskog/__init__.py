"""Hard-sphere kinetic theory at desk scale."""
__version__ = "0.1.0"
