"""MAGNet: U-Net + tile-graph GNN fusion for DRC hotspot prediction."""

__version__ = "0.1.0"
