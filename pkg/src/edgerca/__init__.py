"""Root-cause localization for microservice incidents across cloud and edge segments."""

__version__ = "0.1.0"
