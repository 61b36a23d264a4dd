from .config import TOKENS_PER_RX, VARIANTS, ModelConfig
from .network import (ChirpStates, DetOutput, RavenModel, SegOutput, StreamState, attention,
                      decode_detections)

__all__ = ["ModelConfig", "VARIANTS", "TOKENS_PER_RX", "RavenModel", "ChirpStates", "DetOutput",
           "SegOutput", "StreamState", "attention", "decode_detections"]
