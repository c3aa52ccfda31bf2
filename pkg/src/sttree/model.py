"""The full classifier: encoder + neural tree (or a bare logits head when the
tree is ablated)."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .encoder import EncoderConfig, EncoderOutput, EncoderParams, encoder_forward
from .params import ParamStore
from .tensor import Tensor
from .tree import Traversal, init_tree, traverse


@dataclass
class ModelConfig:
    encoder: EncoderConfig
    depth: int = 3
    proto_size: int = 3
    use_tree: bool = True
    seed: int = 0

    @property
    def num_classes(self) -> int:
        return self.encoder.num_classes

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["encoder"] = EncoderConfig(**d["encoder"])
        return cls(**d)


@dataclass
class ModelOutput:
    y_hat: Tensor  # (B, M) class probabilities
    encoded: EncoderOutput
    traversal: Traversal | None = None


@dataclass
class STTreeModel:
    config: ModelConfig
    store: ParamStore = field(init=False)

    def __post_init__(self):
        cfg = self.config
        self.store = ParamStore(cfg.seed)
        self.encoder = EncoderParams.create(self.store, cfg.encoder)
        self.tree = None
        if cfg.use_tree:
            self.tree = init_tree(
                self.store, cfg.depth, cfg.num_classes, cfg.proto_size, cfg.encoder.embed_dim,
                use_attention=cfg.encoder.use_attention,
                attention_kernel=cfg.encoder.attention_kernel,
            )

    def forward(self, x: Tensor) -> ModelOutput:
        enc = encoder_forward(x, self.encoder, self.config.encoder)
        if self.tree is None:
            return ModelOutput(T.softmax(enc.logits, axis=-1), enc)
        trav = traverse(self.tree, enc.patches, enc.logits)
        return ModelOutput(trav.y_hat, enc, trav)

    __call__ = forward

    def predict_proba(self, x, batch_size: int = 64) -> np.ndarray:
        x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
        out = []
        with T.no_grad():
            for s in range(0, x.shape[0], batch_size):
                out.append(self.forward(Tensor(x[s : s + batch_size])).y_hat.data)
        return np.concatenate(out, axis=0)

    def predict(self, x, batch_size: int = 64) -> np.ndarray:
        return np.argmax(self.predict_proba(x, batch_size), axis=1)

    def parameters(self) -> list[Tensor]:
        return self.store.tensors()

    def named_parameters(self):
        return self.store.items()
