"""The trained bundle: backbone parameters, memory bank, key encoder, config."""
from __future__ import annotations

from dataclasses import dataclass, field

from .config import TrainConfig
from .membank import ExemplarMemory, KeyEncoder
from .nncore import ParamStore


@dataclass
class MunkeyModel:
    params: ParamStore
    memory: ExemplarMemory
    encoder: KeyEncoder
    config: TrainConfig
    history: list = field(default_factory=list)

    @property
    def dims(self):
        return self.config.dims

    def copy(self) -> "MunkeyModel":
        params = ParamStore()
        for name, t in self.params.items():
            params.add(name, t.data.copy(), decay=t.decay)
        return MunkeyModel(params, self.memory.copy(), self.encoder, self.config,
                           [dict(h) for h in self.history])
