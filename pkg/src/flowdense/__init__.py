"""flowdense - density estimation by geodesic kernel-flow diffeomorphisms."""

__version__ = "0.1.0"
