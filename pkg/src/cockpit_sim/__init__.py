"""Vehicle cockpit simulator for evaluating tool-using agents."""

__version__ = "0.1.0"
