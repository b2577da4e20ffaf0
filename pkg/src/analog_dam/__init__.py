"""Analog Dense Associative Memory simulator."""
