"""Full sequence model: encoder stub, decoder stack, and prediction heads.

The encoder is a trainable per-frame affine+SiLU map standing in for an
image backbone. The decoder is a stack of gated selective-state-space
layers (bidirectional by default, forward-only when configured). A final
RMS normalization feeds two heads: per-frame phase logits and a sigmoid
scalar per frame for normalized remaining time in the current phase.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import mamba_block as mb
from . import numkit as nk
from .errors import CheckpointError, DomainError, ShapeError
from .numkit import Tensor

CHECKPOINT_MAGIC = b"SRMB"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    d_in: int
    n_phases: int
    d_model: int = 512
    n_state: int = 16
    n_layers: int = 2
    expansion: int = 2
    conv_width: int = 4
    drop_path_rate: float = 0.1
    bidirectional: bool = True

    def __post_init__(self):
        for name in ("d_in", "n_phases", "d_model", "n_state", "n_layers",
                     "expansion", "conv_width"):
            if getattr(self, name) < 1:
                raise DomainError(f"{name} must be positive, got {getattr(self, name)}")
        if self.n_phases < 2:
            raise DomainError(f"n_phases must be >= 2, got {self.n_phases}")
        if not 0.0 <= self.drop_path_rate < 1.0:
            raise DomainError(f"drop_path_rate must be in [0, 1), got {self.drop_path_rate}")


@dataclass
class PredictionOutput:
    """Per-frame outputs: phase logits (T, P) and remaining-time values (T,)."""

    recognition_logits: Tensor
    anticipation: Tensor


class Model:
    """Encoder, decoder stack, and heads with flat named parameters."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        c = config
        self.w_enc = Tensor(rng.normal(0.0, c.d_in**-0.5, size=(c.d_in, c.d_model)),
                            trainable=True)
        self.b_enc = Tensor(np.zeros(c.d_model), trainable=True)
        self.layers = [
            mb.init_layer_params(rng, c.d_model, n_state=c.n_state,
                                 expand=c.expansion, conv_width=c.conv_width,
                                 bidirectional=c.bidirectional)
            for _ in range(c.n_layers)
        ]
        self.norm_out = Tensor(np.ones(c.d_model), trainable=True)
        self.w_rec = Tensor(rng.normal(0.0, c.d_model**-0.5, size=(c.d_model, c.n_phases)),
                            trainable=True)
        self.b_rec = Tensor(np.zeros(c.n_phases), trainable=True)
        self.w_ant = Tensor(rng.normal(0.0, c.d_model**-0.5, size=(c.d_model, 1)),
                            trainable=True)
        self.b_ant = Tensor(np.zeros(1), trainable=True)
        self._named = self._collect_names()

    def _collect_names(self) -> list[tuple[str, Tensor]]:
        named = [("encoder.w", self.w_enc), ("encoder.b", self.b_enc)]
        for i, layer in enumerate(self.layers):
            named += layer.named_parameters(f"layers.{i}.")
        named += [
            ("norm_out", self.norm_out),
            ("head.w_rec", self.w_rec),
            ("head.b_rec", self.b_rec),
            ("head.w_ant", self.w_ant),
            ("head.b_ant", self.b_ant),
        ]
        for name, t in named:
            t.name = name
        return named

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self._named)

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self._named]

    def encode(self, x_raw) -> Tensor:
        """Per-frame affine+SiLU embedding, (T, d_in) -> (T, d_model)."""
        x_raw = nk.as_tensor(x_raw)
        if x_raw.data.ndim != 2 or x_raw.shape[1] != self.config.d_in:
            raise ShapeError(f"expected (T, {self.config.d_in}), got {x_raw.shape}")
        return nk.silu(x_raw @ self.w_enc + self.b_enc)

    def forward(self, feats, training: bool = False,
                rng: np.random.Generator | None = None) -> PredictionOutput:
        """Decode an embedded sequence into both per-frame heads."""
        h = nk.as_tensor(feats)
        if h.data.ndim != 2 or h.shape[1] != self.config.d_model:
            raise ShapeError(f"expected (T, {self.config.d_model}), got {h.shape}")
        if h.shape[0] < 1:
            raise DomainError("forward needs at least one frame")
        step = mb.layer_forward if self.config.bidirectional else mb.vanilla_layer_forward
        for layer in self.layers:
            h = step(h, layer, drop_path_rate=self.config.drop_path_rate,
                     training=training, rng=rng)
        h = mb.normalize(h, self.norm_out)
        logits = h @ self.w_rec + self.b_rec
        ant = nk.sigmoid(h @ self.w_ant + self.b_ant)
        return PredictionOutput(recognition_logits=logits,
                                anticipation=nk.reshape(ant, (h.shape[0],)))

    def run(self, x_raw, training: bool = False,
            rng: np.random.Generator | None = None) -> PredictionOutput:
        """Encode then decode raw per-frame features."""
        return self.forward(self.encode(x_raw), training=training, rng=rng)

    # --- checkpoint serialization ---------------------------------------

    def save(self, path) -> None:
        """Binary checkpoint: magic, version, config JSON, named tensors."""
        cfg = json.dumps(asdict(self.config), sort_keys=True).encode("utf-8")
        with open(path, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(struct.pack("<I", CHECKPOINT_VERSION))
            f.write(struct.pack("<I", len(cfg)))
            f.write(cfg)
            f.write(struct.pack("<I", len(self._named)))
            for name, t in self._named:
                nb = name.encode("utf-8")
                f.write(struct.pack("<I", len(nb)))
                f.write(nb)
                f.write(struct.pack("<I", t.data.ndim))
                for dim in t.data.shape:
                    f.write(struct.pack("<I", dim))
                f.write(t.data.astype("<f8").tobytes(order="C"))

    @classmethod
    def load(cls, path) -> "Model":
        with open(path, "rb") as f:
            raw = f.read()
        off = 0

        def take(n):
            nonlocal off
            if off + n > len(raw):
                raise CheckpointError(f"truncated checkpoint at byte {off}")
            chunk = raw[off:off + n]
            off += n
            return chunk

        if take(4) != CHECKPOINT_MAGIC:
            raise CheckpointError("bad magic; not a model checkpoint")
        (version,) = struct.unpack("<I", take(4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (cfg_len,) = struct.unpack("<I", take(4))
        try:
            config = ModelConfig(**json.loads(take(cfg_len).decode("utf-8")))
        except (ValueError, TypeError) as e:
            raise CheckpointError(f"bad config block: {e}") from e
        model = cls(config, np.random.Generator(np.random.PCG64(0)))
        (count,) = struct.unpack("<I", take(4))
        if count != len(model._named):
            raise CheckpointError(
                f"checkpoint has {count} tensors, model needs {len(model._named)}")
        for name, t in model._named:
            (name_len,) = struct.unpack("<I", take(4))
            got = take(name_len).decode("utf-8")
            if got != name:
                raise CheckpointError(f"tensor order mismatch: {got} != {name}")
            (rank,) = struct.unpack("<I", take(4))
            dims = tuple(struct.unpack("<I", take(4))[0] for _ in range(rank))
            if dims != t.data.shape:
                raise CheckpointError(f"{name}: shape {dims} != {t.data.shape}")
            n_vals = int(np.prod(dims)) if dims else 1
            vals = np.frombuffer(take(8 * n_vals), dtype="<f8").reshape(dims)
            if not np.all(np.isfinite(vals)):
                raise CheckpointError(f"{name}: non-finite values")
            t.data = vals.astype(np.float64).copy()
        if off != len(raw):
            raise CheckpointError(f"{len(raw) - off} trailing bytes after tensors")
        return model


def predict_phases(output: PredictionOutput) -> np.ndarray:
    """Per-frame argmax phase ids; exact ties resolve to the lower id."""
    logits = output.recognition_logits
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return np.argmax(data, axis=1)
