# Models module for the early-exit engine
from .errors import EngineError
from .backbone import BackboneModel, build_backbone
from .transformer import TransformerConfig, TransformerModel, KVCache
from .mamba import MambaConfig, MambaModel, SSMState
from .exits import ExitBank, ExitCellConfig, ExitPlacement, ExitPolicy, classifier_cost
from .ledger import ComputeLedger, reduction_factor
from .records import GenerationRequest, GenerationResult, PruneSpec, SweepRecord
from .engine import EarlyExitEngine

__all__ = [
    'EngineError',
    'BackboneModel',
    'build_backbone',
    'TransformerConfig',
    'TransformerModel',
    'KVCache',
    'MambaConfig',
    'MambaModel',
    'SSMState',
    'ExitBank',
    'ExitCellConfig',
    'ExitPlacement',
    'ExitPolicy',
    'classifier_cost',
    'ComputeLedger',
    'reduction_factor',
    'GenerationRequest',
    'GenerationResult',
    'PruneSpec',
    'SweepRecord',
    'EarlyExitEngine'
]
