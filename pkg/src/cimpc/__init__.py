"""Contact-implicit MPC for dynamic on-palm sliding manipulation."""

__version__ = "0.1.0"
