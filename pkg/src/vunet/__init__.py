"""Variational U-Net for multi-variable satellite nowcasting."""

__version__ = "0.1.0"
