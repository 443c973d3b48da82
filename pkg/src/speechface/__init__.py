"""Speech-driven 3D facial animation: recurrent vertex decoder trained from scratch."""

__version__ = "0.1.0"
