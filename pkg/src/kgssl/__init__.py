"""Knowledge-guided self-supervised inverse modeling of static entity characteristics."""

__version__ = "0.1.0"
