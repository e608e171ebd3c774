"""Multitask face alignment, head pose and tracking network on a numpy autodiff core."""

from .config import ATPN_DESK, ATPN_SMALL, ATPN_TINY, AtpnConfig, resolve_config
from .model import AtpnNet

__all__ = ["AtpnNet", "AtpnConfig", "ATPN_SMALL", "ATPN_DESK", "ATPN_TINY", "resolve_config"]
__version__ = "0.1.0"
