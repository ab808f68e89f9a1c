from .errors import SteerDecError
from .models import DecodeMode, EngineConfig, ModelConfig, SteeringVariant, TrainingConfig
from .specdec import generate
from .steering import SteeringState
from .transformer import TransformerModel
