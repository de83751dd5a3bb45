"""camopt: learned optimizers built on compact associative memory."""

__version__ = "0.1.0"
