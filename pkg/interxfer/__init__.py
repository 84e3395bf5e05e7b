"""InterXfer: transfer agent-object interactions between shapes of a category."""

__version__ = "0.1.0"
__author__ = "Tammy Lau"
