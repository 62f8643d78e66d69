"""Control plane, emulator and analysis toolkit for a 135-fan wind-gust wall."""

__version__ = "0.1.0"
