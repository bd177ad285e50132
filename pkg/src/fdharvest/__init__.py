"""Energy-efficiency optimization for self-powering full-duplex cells."""

from .config import SystemConfig, dbm_to_watt, watt_to_dbm
from .channels import ChannelGenConfig, ChannelRealization, PathLossConfig, draw_channels
from .model import DesignPoint, ee, grid_power, harvested_power, rate_dl, rate_ul
from .reformulation import ExpansionPoint, SocApproxConfig, build_subproblem

__all__ = [
    "SystemConfig",
    "dbm_to_watt",
    "watt_to_dbm",
    "ChannelGenConfig",
    "ChannelRealization",
    "PathLossConfig",
    "draw_channels",
    "DesignPoint",
    "ee",
    "grid_power",
    "harvested_power",
    "rate_dl",
    "rate_ul",
    "ExpansionPoint",
    "SocApproxConfig",
    "build_subproblem",
]

__version__ = "0.1.0"
