"""Long/short-term coordinated dispatch of microgrids with battery and hydrogen storage."""

__version__ = "0.1.0"
