"""Speech-driven talking-face generation: CPC audio features, distilled identity/emotion, GAN frame composer."""
__version__ = "0.1.0"
