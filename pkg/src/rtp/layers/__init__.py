"""Serial reference layers and their rotated counterparts."""
from .common import Gelu
from .rotated import ReplayTape, RotatedAttention, RotatedEmbedding, RotatedLayer, RotatedLinear, RotatedMoE
from .serial import SerialAttention, SerialEmbedding, SerialLinear, SerialMoE

__all__ = [
    "Gelu",
    "ReplayTape",
    "RotatedAttention",
    "RotatedEmbedding",
    "RotatedLayer",
    "RotatedLinear",
    "RotatedMoE",
    "SerialAttention",
    "SerialEmbedding",
    "SerialLinear",
    "SerialMoE",
]
