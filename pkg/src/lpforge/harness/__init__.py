"""Datasets, file formats, plotting, oracle verification and the command line."""
