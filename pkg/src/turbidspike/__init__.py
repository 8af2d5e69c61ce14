"""Neuromorphic imaging through turbid media: scattering simulation, DVS emulation,
event preprocessing and a spiking autoencoder for reconstruction."""

__version__ = "0.1.0"
