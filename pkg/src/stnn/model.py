"""The spacetime neural network.

Input projection (1x1 conv) -> k spacetime modules, each an attention
block followed by a three-kernel convolution block with a residual skip
-> linear head emitting all forecast steps at once.

Tensors inside the network are channel-first: (B, C, alpha, T), i.e. the
neighbour axis comes first and time second.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor

_MASK_LOGIT = -1e30


@dataclass
class ModelConfig:
    k: int = 2
    channels: list = field(default_factory=lambda: [32, 64])
    input_proj_channels: int = 32
    f: int = 3
    leaky_slope: float = 0.2
    dropout_rate: float = 0.3
    alpha: int = 15
    T_h: int = 12
    T_r: int = 12
    F: int = 2
    head_input: str = "full"  # "full" flattens every row, "target_row" only row 0
    attention_scaling: bool = False
    mask_dummies: bool = False
    use_attention: bool = True
    use_conv: bool = True
    use_spacetime_kernel: bool = True
    use_temporal_kernel: bool = True
    use_spatial_kernel: bool = True
    dtype: str = "float64"
    seed: int = 1

    def __post_init__(self):
        self.channels = list(self.channels)
        if len(self.channels) != self.k:
            raise ValueError(f"channels {self.channels} must have length k={self.k}")
        if any(c < 1 for c in self.channels) or self.input_proj_channels < 1:
            raise ValueError("channel counts must be >= 1")
        if self.f % 2 == 0:
            raise ValueError(f"kernel size f must be odd, got {self.f}")
        if self.head_input not in ("full", "target_row"):
            raise ValueError(f"unknown head_input {self.head_input!r}")
        if self.k and not (self.use_attention or self.use_conv):
            raise ValueError("a module needs the attention block, the conv block, or both")
        if self.use_conv and not (self.use_spacetime_kernel or self.use_temporal_kernel
                                  or self.use_spatial_kernel):
            raise ValueError("the conv block needs at least one kernel")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"unsupported dtype {self.dtype!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def _uniform(rng, shape, fan_in, dtype):
    bound = np.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


class STAttnBlock:
    """Self-attention over all alpha*T events of a local spacetime."""

    def __init__(self, c_in, c_out, rng, dtype, scaling=False):
        self.W_q = _uniform(rng, (c_out, c_in), c_in, dtype)
        self.W_k = _uniform(rng, (c_out, c_in), c_in, dtype)
        self.W_v = _uniform(rng, (c_out, c_in), c_in, dtype)
        self.scaling = scaling
        self.last_map = None

    def parameters(self):
        return {"W_q": self.W_q, "W_k": self.W_k, "W_v": self.W_v}

    def forward(self, d: Tensor, mask: np.ndarray | None = None, record: bool = False) -> Tensor:
        b, c, a, t = d.shape
        if c != self.W_q.shape[1]:
            raise DimensionError(f"attention expects {self.W_q.shape[1]} channels, got {c}")
        u = a * t
        flat = d.reshape(b, c, u)
        query = self.W_q @ flat
        key = self.W_k @ flat
        value = self.W_v @ flat
        scores = query.transpose() @ key  # (b, u, u)
        if self.scaling:
            scores = scores * (1.0 / np.sqrt(self.W_q.shape[0]))
        if mask is not None:
            scores = scores + Tensor(mask.astype(scores.dtype))
        weights = ad.softmax_rows(scores)
        if record:
            self.last_map = weights.data
        out = value @ weights.transpose()
        return out.reshape(b, self.W_v.shape[0], a, t)


class STConvBlock:
    """Spacetime (f x f), temporal and spatial kernels, stacked and condensed by a 1x1 conv."""

    def __init__(self, c_in, c_out, f, rng, dtype, slope,
                 spacetime=True, temporal=True, spatial=True):
        self.slope = slope
        self.kernels = {}
        # axis order inside the network is (space, time)
        if spacetime:
            self.kernels["theta_st"] = _uniform(rng, (c_out, c_in, f, f), c_in * f * f, dtype)
        if temporal:
            self.kernels["theta_t"] = _uniform(rng, (c_out, c_in, 1, f), c_in * f, dtype)
        if spatial:
            self.kernels["theta_s"] = _uniform(rng, (c_out, c_in, f, 1), c_in * f, dtype)
        width = c_out * len(self.kernels)
        self.theta_o = _uniform(rng, (c_out, width, 1, 1), width, dtype)

    def parameters(self):
        return {**self.kernels, "theta_o": self.theta_o}

    def forward(self, d: Tensor) -> Tensor:
        branches = [ad.conv2d_same(d, k) for k in self.kernels.values()]
        h = ad.leaky_relu(ad.concat_channels(branches), self.slope)
        return ad.leaky_relu(ad.conv2d_same(h, self.theta_o), self.slope)


class STModule:
    def __init__(self, c_in, c_out, cfg: ModelConfig, rng, dtype):
        self.attn = STAttnBlock(c_in, c_out, rng, dtype, cfg.attention_scaling) if cfg.use_attention else None
        conv_in = c_out if cfg.use_attention else c_in
        self.conv = (STConvBlock(conv_in, c_out, cfg.f, rng, dtype, cfg.leaky_slope,
                                 cfg.use_spacetime_kernel, cfg.use_temporal_kernel, cfg.use_spatial_kernel)
                     if cfg.use_conv else None)
        self.residual = _uniform(rng, (c_out, c_in, 1, 1), c_in, dtype) if c_in != c_out else None

    def parameters(self):
        params = {}
        if self.attn is not None:
            params.update({f"attn.{k}": v for k, v in self.attn.parameters().items()})
        if self.conv is not None:
            params.update({f"conv.{k}": v for k, v in self.conv.parameters().items()})
        if self.residual is not None:
            params["residual"] = self.residual
        return params

    def forward(self, d, mask=None, training=False, rate=0.0, rng=None, record=False):
        h = d
        if self.attn is not None:
            h = self.attn.forward(h, mask, record)
        if self.conv is not None:
            h = self.conv.forward(h)
        skip = d if self.residual is None else ad.conv2d_same(d, self.residual)
        return ad.dropout(h + skip, rate, training, rng)


class STNNModel:
    def __init__(self, config: ModelConfig | None = None):
        self.config = cfg = config or ModelConfig()
        dtype = np.dtype(cfg.dtype).type
        self.dtype = dtype
        rng = np.random.default_rng(cfg.seed)
        self.input_proj = _uniform(rng, (cfg.input_proj_channels, cfg.F + 1, 1, 1), cfg.F + 1, dtype)
        self.modules = []
        c = cfg.input_proj_channels
        for c_out in cfg.channels:
            self.modules.append(STModule(c, c_out, cfg, rng, dtype))
            c = c_out
        rows = cfg.alpha if cfg.head_input == "full" else 1
        head_in = c * rows * cfg.T_h
        self.head_W = _uniform(rng, (cfg.T_r, head_in), head_in, dtype)
        self.head_b = _uniform(rng, (cfg.T_r,), head_in, dtype)
        self.dropout_rng = np.random.default_rng(cfg.seed + 1)

    def named_parameters(self) -> dict:
        params = {"input_proj": self.input_proj}
        for i, m in enumerate(self.modules):
            params.update({f"modules.{i}.{k}": v for k, v in m.parameters().items()})
        params["head.W"] = self.head_W
        params["head.b"] = self.head_b
        return params

    def parameters(self) -> list:
        return list(self.named_parameters().values())

    def forward(self, d, training: bool = False, record: bool = False) -> Tensor:
        """Forecast for one local spacetime (alpha, F+1, T_h) or a batch (B, alpha, F+1, T_h)."""
        cfg = self.config
        arr = d.tensor if hasattr(d, "tensor") else (d.data if isinstance(d, Tensor) else np.asarray(d))
        single = arr.ndim == 3
        if single:
            arr = arr[None]
        expected = (cfg.alpha, cfg.F + 1, cfg.T_h)
        if arr.ndim != 4 or arr.shape[1:] != expected:
            raise DimensionError(f"model expects local spacetimes of shape {expected}, got {arr.shape[-3:]}")
        b = arr.shape[0]
        x = Tensor(np.ascontiguousarray(arr.transpose(0, 2, 1, 3), dtype=self.dtype))
        mask = None
        if cfg.mask_dummies:
            dummy = ~(np.abs(arr).sum(axis=(2, 3)) > 0)  # (b, alpha)
            dummy[:, 0] = False
            mask = np.where(np.repeat(dummy, cfg.T_h, axis=1), _MASK_LOGIT, 0.0)[:, None, :]
        h = ad.conv2d_same(x, self.input_proj)
        for i, m in enumerate(self.modules):
            h = m.forward(h, mask, training, cfg.dropout_rate, self.dropout_rng, record and i == 0)
        if cfg.head_input == "target_row":
            h = h[:, :, 0, :]
        flat = h.reshape(b, -1)
        out = flat @ self.head_W.transpose() + self.head_b
        return out[0] if single else out

    __call__ = forward

    def predict(self, batch: np.ndarray, batch_size: int = 256) -> np.ndarray:
        outs = []
        with ad.no_grad():
            for i in range(0, len(batch), batch_size):
                outs.append(self.forward(batch[i:i + batch_size]).data)
        if not outs:
            return np.zeros((0, self.config.T_r))
        return np.concatenate(outs).astype(np.float64)


def param_count(model: STNNModel) -> int:
    return int(sum(p.data.size for p in model.parameters()))


def forward_flops(config: ModelConfig) -> int:
    """Multiply-accumulate count of one forward pass; depends on the config only."""
    u = config.alpha * config.T_h
    macs = (config.F + 1) * config.input_proj_channels * u
    c = config.input_proj_channels
    for c_out in config.channels:
        if config.use_attention:
            macs += 3 * c_out * c * u + 2 * u * u * c_out
        conv_in = c_out if config.use_attention else c
        if config.use_conv:
            taps = ((config.f * config.f if config.use_spacetime_kernel else 0)
                    + (config.f if config.use_temporal_kernel else 0)
                    + (config.f if config.use_spatial_kernel else 0))
            branches = sum([config.use_spacetime_kernel, config.use_temporal_kernel, config.use_spatial_kernel])
            macs += taps * conv_in * c_out * u + branches * c_out * c_out * u
        if c != c_out:
            macs += c * c_out * u
        c = c_out
    rows = config.alpha if config.head_input == "full" else 1
    macs += c * rows * config.T_h * config.T_r
    return macs


def extract_attention(model: STNNModel, d) -> np.ndarray:
    """First-module attention received by the target's events, as an (alpha, T_h) map.

    Rows of the attention matrix belonging to the target (row 0 of the local
    spacetime, every time position) are averaged.
    """
    first = model.modules[0] if model.modules else None
    if first is None or first.attn is None:
        raise ValueError("model has no attention block in its first module")
    arr = d.tensor if hasattr(d, "tensor") else np.asarray(d)
    with ad.no_grad():
        model.forward(arr, training=False, record=True)
    cfg = model.config
    weights = first.attn.last_map[0]  # (U, U), U index = row * T_h + t
    target_rows = weights[:cfg.T_h]
    return target_rows.mean(axis=0).reshape(cfg.alpha, cfg.T_h).astype(np.float64)
