"""Part-weighted vehicle re-identification pipeline on a synthetic
planted-parts benchmark."""

__version__ = "0.1.0"
