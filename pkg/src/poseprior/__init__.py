"""Diffusion pose prior with guided solvers for 3D pose inverse problems."""
