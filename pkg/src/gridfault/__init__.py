"""Early-stage fault classification under simulation-to-field domain shift."""
__version__ = "1.0.0"
