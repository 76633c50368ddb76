"""Diffusion policies for stochastic wireless power control."""
