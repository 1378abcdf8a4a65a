"""Feature exporter: images to binary feature files plus a JSON manifest."""

__version__ = "0.1.0"
