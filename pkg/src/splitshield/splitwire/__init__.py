"""Coefficient-transmitting split-inference wire protocol."""

from . import frames
from .client import MODE_BUDGET, MODE_FREE, MODE_TOPM, ClientSession, client_choose
from .server import InferenceServer

__all__ = [
    "ClientSession",
    "InferenceServer",
    "MODE_BUDGET",
    "MODE_FREE",
    "MODE_TOPM",
    "client_choose",
    "frames",
]
