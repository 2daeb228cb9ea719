"""Mirror-conditioned monocular depth on frozen transformer priors."""

__version__ = "0.1.0"
