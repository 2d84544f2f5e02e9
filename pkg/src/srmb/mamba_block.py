"""One gated selective-state-space decoder layer.

The layer normalizes its input, projects it into a main path and a gate
path, runs the main path through one or two directional branches (causal
depthwise convolution, SiLU, input-dependent step/input/output projections,
selective scan), sums the branches, gates by SiLU of the gate path, projects
back, and adds a residual with optional per-sequence drop path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkit as nk
from . import ssm_core as sc
from .errors import DomainError
from .numkit import Tensor

RMS_EPS = 1e-6


@dataclass
class DirectionParams:
    """Weights for one scan direction."""

    conv_w: Tensor   # (E, K) depthwise causal taps
    conv_b: Tensor   # (E,)
    w_delta: Tensor  # (E, 1) step-size projection
    b_delta: Tensor  # (1,)
    w_b: Tensor      # (E, N) input projection
    w_c: Tensor      # (E, N) output projection
    a_log: Tensor    # (E, N); state gains are -exp(a_log)

    def named_parameters(self, prefix: str) -> list[tuple[str, Tensor]]:
        return [
            (prefix + "conv_w", self.conv_w),
            (prefix + "conv_b", self.conv_b),
            (prefix + "w_delta", self.w_delta),
            (prefix + "b_delta", self.b_delta),
            (prefix + "w_b", self.w_b),
            (prefix + "w_c", self.w_c),
            (prefix + "a_log", self.a_log),
        ]


@dataclass
class MambaLayerParams:
    """Weights for one decoder layer; ``bwd`` is None for forward-only layers."""

    norm_scale: Tensor   # (D,)
    w_in_m: Tensor       # (D, E) main-path projection
    w_in_z: Tensor       # (D, E) gate-path projection
    fwd: DirectionParams
    bwd: DirectionParams | None
    w_out: Tensor        # (E, D)

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = [
            (prefix + "norm_scale", self.norm_scale),
            (prefix + "w_in_m", self.w_in_m),
            (prefix + "w_in_z", self.w_in_z),
        ]
        out += self.fwd.named_parameters(prefix + "fwd.")
        if self.bwd is not None:
            out += self.bwd.named_parameters(prefix + "bwd.")
        out.append((prefix + "w_out", self.w_out))
        return out


def _init_direction(rng: np.random.Generator, e: int, n_state: int,
                    conv_width: int) -> DirectionParams:
    # softplus bias chosen so the initial step size lands in [1e-3, 1e-1]
    dt = float(np.exp(rng.uniform(np.log(1e-3), np.log(1e-1))))
    b_delta = np.log(np.expm1(dt))
    return DirectionParams(
        conv_w=Tensor(rng.normal(0.0, conv_width**-0.5, size=(e, conv_width)),
                      trainable=True),
        conv_b=Tensor(np.zeros(e), trainable=True),
        w_delta=Tensor(rng.normal(0.0, e**-0.5, size=(e, 1)), trainable=True),
        b_delta=Tensor(np.array([b_delta]), trainable=True),
        w_b=Tensor(rng.normal(0.0, e**-0.5, size=(e, n_state)), trainable=True),
        w_c=Tensor(rng.normal(0.0, e**-0.5, size=(e, n_state)), trainable=True),
        a_log=Tensor(np.tile(np.log(np.arange(1, n_state + 1)), (e, 1)),
                     trainable=True),
    )


def init_layer_params(rng: np.random.Generator, d_model: int, n_state: int = 16,
                      expand: int = 2, conv_width: int = 4,
                      bidirectional: bool = True) -> MambaLayerParams:
    """Fresh layer weights; state gains start at -1..-N per channel."""
    e = expand * d_model
    return MambaLayerParams(
        norm_scale=Tensor(np.ones(d_model), trainable=True),
        w_in_m=Tensor(rng.normal(0.0, d_model**-0.5, size=(d_model, e)), trainable=True),
        w_in_z=Tensor(rng.normal(0.0, d_model**-0.5, size=(d_model, e)), trainable=True),
        fwd=_init_direction(rng, e, n_state, conv_width),
        bwd=_init_direction(rng, e, n_state, conv_width) if bidirectional else None,
        w_out=Tensor(rng.normal(0.0, e**-0.5, size=(e, d_model)), trainable=True),
    )


def normalize(x, scale) -> Tensor:
    """Per-timestep RMS normalization with learned gain.

    x_t <- x_t / sqrt(mean(x_t^2) + 1e-6) * scale. The epsilon sits inside
    the root so zero rows map to zero.
    """
    x, scale = nk.as_tensor(x), nk.as_tensor(scale)
    ms = nk.tmean(x * x, axis=1, keepdims=True)
    return x / nk.pow_const(ms + RMS_EPS, 0.5) * scale


def direction_pass(x, dp: DirectionParams, reverse: bool = False) -> Tensor:
    """One directional branch on the expanded main path, (T, E) -> (T, E)."""
    x = nk.as_tensor(x)
    if x.data.ndim != 2 or x.shape[0] < 1:
        raise DomainError(f"direction_pass needs (T, E) with T >= 1, got {x.shape}")
    if reverse:
        x = nk.flip_time(x)
    xc = nk.silu(nk.causal_conv1d(x, dp.conv_w, dp.conv_b))
    delta = nk.softplus(xc @ dp.w_delta + dp.b_delta)
    seq = sc.SelectiveSequence(delta=delta, b=xc @ dp.w_b, c=xc @ dp.w_c)
    a = -nk.exp(dp.a_log)
    y = sc.selective_scan(a, seq, xc)
    if reverse:
        y = nk.flip_time(y)
    return y


def _residual(x, branch, drop_path_rate: float, training: bool,
              rng: np.random.Generator | None) -> Tensor:
    if not 0.0 <= drop_path_rate < 1.0:
        raise DomainError(f"drop path rate must be in [0, 1), got {drop_path_rate}")
    if training and drop_path_rate > 0.0:
        if rng is None:
            raise DomainError("drop path during training needs a random generator")
        # per-sequence skip with survivor rescaling so expectation is unchanged
        keep = rng.random() >= drop_path_rate
        factor = 1.0 / (1.0 - drop_path_rate) if keep else 0.0
        return x + branch * factor
    return x + branch


def layer_forward(x, params: MambaLayerParams, drop_path_rate: float = 0.0,
                  training: bool = False,
                  rng: np.random.Generator | None = None) -> Tensor:
    """Bidirectional layer: both scan directions summed, then gated."""
    if params.bwd is None:
        raise DomainError("layer has no backward weights; use vanilla_layer_forward")
    x = nk.as_tensor(x)
    u = normalize(x, params.norm_scale)
    m = u @ params.w_in_m
    z = u @ params.w_in_z
    y = direction_pass(m, params.fwd, reverse=False) \
        + direction_pass(m, params.bwd, reverse=True)
    branch = (y * nk.silu(z)) @ params.w_out
    return _residual(x, branch, drop_path_rate, training, rng)


def vanilla_layer_forward(x, params: MambaLayerParams, drop_path_rate: float = 0.0,
                          training: bool = False,
                          rng: np.random.Generator | None = None) -> Tensor:
    """Forward-only layer: strictly causal in time."""
    x = nk.as_tensor(x)
    u = normalize(x, params.norm_scale)
    m = u @ params.w_in_m
    z = u @ params.w_in_z
    y = direction_pass(m, params.fwd, reverse=False)
    branch = (y * nk.silu(z)) @ params.w_out
    return _residual(x, branch, drop_path_rate, training, rng)
