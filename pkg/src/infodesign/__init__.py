"""Joint likelihood-surrogate training and experimental design with contrastive MI bounds."""

__version__ = "0.1.0"
