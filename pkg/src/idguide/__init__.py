"""Identity-guided diffusion sampling on a desk-scale toy video task."""

__version__ = "0.1.0"
