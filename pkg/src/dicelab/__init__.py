"""Desk-scale lab: DICE attestation on a simulated microcontroller, the ROP
credential-replay attack against it, and the countermeasures that stop it."""

__version__ = "0.1.0"
