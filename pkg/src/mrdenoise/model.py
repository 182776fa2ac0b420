"""Hybrid residual MLP-CNN denoiser and its two ablation variants.

A flattened patch of ``d = P*P*C`` voxels first passes through ``L`` pre-norm
residual MLP blocks, is reshaped to a single-channel 3-D volume and then runs
through a ``J``-level convolutional encoder/transposed-convolution decoder
whose mirrored levels are joined by additive skips.

The CNN sees the patch as a (1, P, P, C) volume, i.e. the spatial axes are
kept in the flattening order. With isotropic 3x3x3 kernels this is the same
network as one operating on (C, P, P), just with a permuted kernel layout.
"""
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from mrdenoise.errors import ConfigError, DimensionError
from mrdenoise.tensor import (
    BatchNormStats,
    Tensor,
    activation,
    add,
    batch_norm3d,
    conv3d,
    deconv3d,
    gelu,
    layer_norm,
    leaky_relu,
    linear,
    reshape,
)

VARIANTS = ("MLP_CNN", "MLP_MLP", "CNN_CNN")
VARIANT_LABELS = {"MLP_MLP": "MLP+MLP", "CNN_CNN": "CNN+CNN", "MLP_CNN": "MLP+CNN"}


@dataclass
class ModelConfig:
    P: int = 16
    C: int = 6
    L: int = 4
    mlp_hidden: int | None = None  # None -> 4 * d
    J: int = 4
    channels: list = field(default_factory=lambda: [32, 64, 128, 256])
    leaky_slope: float = 0.2
    variant: str = "MLP_CNN"
    final_activation: str = "relu"
    ln_eps: float = 1e-5
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.channels = [int(c) for c in self.channels]

    @classmethod
    def desk(cls, **overrides):
        """Small preset used for CPU-scale experiments."""
        base = dict(L=2, J=2, channels=[16, 32])
        base.update(overrides)
        cfg = cls(**base)
        if "mlp_hidden" not in overrides:
            cfg.mlp_hidden = 2 * cfg.d
        return cfg

    @property
    def d(self):
        return self.P * self.P * self.C

    @property
    def hidden(self):
        return self.mlp_hidden if self.mlp_hidden is not None else 4 * self.d

    def validate(self):
        if self.P < 4:
            raise ConfigError(f"P must be >= 4, got {self.P}")
        if self.C < 1:
            raise ConfigError(f"C must be >= 1, got {self.C}")
        if self.L < 1:
            raise ConfigError(f"L must be >= 1, got {self.L}")
        if self.J < 1:
            raise ConfigError(f"J must be >= 1, got {self.J}")
        if len(self.channels) != self.J:
            raise ConfigError(f"len(channels)={len(self.channels)} must equal J={self.J}")
        if any(c < 1 for c in self.channels):
            raise ConfigError("channel counts must be positive")
        if self.hidden < 1:
            raise ConfigError("mlp_hidden must be positive")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.final_activation not in ("relu", "leaky_relu"):
            raise ConfigError(f"final_activation must be relu or leaky_relu, got {self.final_activation!r}")
        if not 0 < self.leaky_slope < 1:
            raise ConfigError("leaky_slope must lie in (0, 1)")
        if self.ln_eps < 0 or self.bn_eps <= 0 or not 0 <= self.bn_momentum <= 1:
            raise ConfigError("invalid normalisation epsilon or momentum")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


class Params:
    """Named trainable tensors plus batch-norm running statistics."""

    def __init__(self, tensors=None, bn=None):
        self.tensors = dict(tensors or {})
        self.bn = dict(bn or {})

    def __getitem__(self, name):
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.items())

    def __len__(self):
        return len(self.tensors)

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def copy(self):
        tensors = {}
        for k, t in self.tensors.items():
            tensors[k] = Tensor(t.values.copy(), requires_grad=t.requires_grad, dtype=t.dtype, name=k)
        return Params(tensors, {k: s.copy() for k, s in self.bn.items()})

    def count(self):
        return sum(t.size for t in self.tensors.values())


# ---------------------------------------------------------------------------
# parameter layout


def _mlp_shapes(prefix, d, hidden):
    return [
        (f"{prefix}.ln.gain", (d,), "one"),
        (f"{prefix}.ln.shift", (d,), "zero"),
        (f"{prefix}.fc1.weight", (hidden, d), d),
        (f"{prefix}.fc1.bias", (hidden,), d),
        (f"{prefix}.fc2.weight", (d, hidden), hidden),
        (f"{prefix}.fc2.bias", (d,), hidden),
    ]


def _decoder_channels(cfg):
    """(in, out) channel pair of decoder level j = 1..J."""
    c = cfg.channels
    J = cfg.J
    return [(c[J - j], c[J - j - 1] if j < J else 1) for j in range(1, J + 1)]


def _cnn_shapes(prefix, cfg):
    shapes = []
    cin = 1
    for j, cout in enumerate(cfg.channels):
        fan = cin * 27
        shapes += [
            (f"{prefix}.enc.{j}.weight", (cout, cin, 3, 3, 3), fan),
            (f"{prefix}.enc.{j}.bias", (cout,), fan),
            (f"{prefix}.enc.{j}.bn.gain", (cout,), "one"),
            (f"{prefix}.enc.{j}.bn.shift", (cout,), "zero"),
        ]
        cin = cout
    for j, (a, b) in enumerate(_decoder_channels(cfg)):
        # each output voxel of the transposed conv sums a * 27 terms
        fan = a * 27
        shapes += [
            (f"{prefix}.dec.{j}.weight", (a, b, 3, 3, 3), fan),
            (f"{prefix}.dec.{j}.bias", (b,), fan),
        ]
        if j < cfg.J - 1:
            shapes += [
                (f"{prefix}.dec.{j}.bn.gain", (b,), "one"),
                (f"{prefix}.dec.{j}.bn.shift", (b,), "zero"),
            ]
    return shapes


def param_shapes(cfg):
    """Ordered (name, shape, init) triples; init is a fan-in or 'one'/'zero'."""
    d, hidden = cfg.d, cfg.hidden
    if cfg.variant == "MLP_CNN":
        blocks = [f"mlp.{l}" for l in range(cfg.L)]
        cnns = ["cnn"]
    elif cfg.variant == "MLP_MLP":
        blocks = [f"mlp.{l}" for l in range(2 * cfg.L)]
        cnns = []
    else:
        blocks = []
        cnns = ["cnn0", "cnn1"]
    shapes = []
    for b in blocks:
        shapes += _mlp_shapes(b, d, hidden)
    for c in cnns:
        shapes += _cnn_shapes(c, cfg)
    return shapes


def init_params(cfg, seed=None, dtype=np.float32):
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases; norm gains 1, shifts 0.

    Draws are made in float64 in the fixed order of :func:`param_shapes` and
    then cast, so float32 and float64 parameter sets agree up to rounding.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    tensors = {}
    bn = {}
    for name, shape, init in param_shapes(cfg):
        if init == "one":
            vals = np.ones(shape)
        elif init == "zero":
            vals = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(init)
            vals = rng.uniform(-bound, bound, size=shape)
        tensors[name] = Tensor(vals, requires_grad=True, dtype=dtype, name=name)
        if name.endswith(".bn.gain"):
            bn[name[: -len(".gain")]] = BatchNormStats(shape[0], dtype)
    return Params(tensors, bn)


def check_params(cfg, params):
    expected = {name: shape for name, shape, _ in param_shapes(cfg)}
    got = {name: t.shape for name, t in params}
    if expected != got:
        missing = sorted(set(expected) - set(got))
        extra = sorted(set(got) - set(expected))
        bad = sorted(k for k in set(expected) & set(got) if expected[k] != got[k])
        raise ConfigError(f"parameters do not match config: missing={missing} extra={extra} mis-shaped={bad}")


# ---------------------------------------------------------------------------
# forward pieces


def mlp_block(z, params, prefix, cfg):
    h = layer_norm(z, params[f"{prefix}.ln.gain"], params[f"{prefix}.ln.shift"], cfg.ln_eps)
    h = gelu(linear(h, params[f"{prefix}.fc1.weight"], params[f"{prefix}.fc1.bias"]))
    h = linear(h, params[f"{prefix}.fc2.weight"], params[f"{prefix}.fc2.bias"])
    return add(z, h)


def mlp_encoder_stack(z0, params, cfg, n_blocks=None):
    """``z_l = z_{l-1} + W2 gelu(W1 LN(z_{l-1}))`` for ``l = 1..n_blocks``."""
    if z0.shape[-1] != cfg.d:
        raise DimensionError(f"MLP input length {z0.shape[-1]} != P*P*C = {cfg.d}")
    n_blocks = cfg.L if n_blocks is None else n_blocks
    z = z0
    for l in range(n_blocks):
        z = mlp_block(z, params, f"mlp.{l}", cfg)
    return z


def _bn(x, params, prefix, mode, cfg):
    return batch_norm3d(x, params[f"{prefix}.gain"], params[f"{prefix}.shift"], params.bn[prefix],
                        mode, cfg.bn_momentum, cfg.bn_eps)


def cnn_encoder_decoder(x0, params, cfg, prefix="cnn", mode="train", trace=None):
    """Residual encoder-decoder on an (N, 1, P, P, C) tensor.

    Encoder: ``x_j = lrelu(BN(conv_j(x_{j-1})))``, j = 1..J.
    Decoder: ``y_0 = x_J``; ``y_j = lrelu(BN(deconv_j(y_{j-1}) + x_{J-j}))``
    for j < J; ``y_J = final(deconv_J(y_{J-1}) + x_0)``.

    When ``trace`` is a dict it receives the encoder outputs ``x{j}``, the
    decoder transposed-conv outputs ``deconv{j}`` and the pre-norm sums
    ``pre{j}``.
    """
    if x0.values.ndim != 5 or x0.shape[1] != 1:
        raise DimensionError(f"CNN input must be (N, 1, D, H, W), got {x0.shape}")
    slope = cfg.leaky_slope
    xs = [x0]
    h = x0
    for j in range(cfg.J):
        h = conv3d(h, params[f"{prefix}.enc.{j}.weight"], params[f"{prefix}.enc.{j}.bias"])
        h = leaky_relu(_bn(h, params, f"{prefix}.enc.{j}.bn", mode, cfg), slope)
        xs.append(h)
    y = xs[cfg.J]
    for j in range(1, cfg.J + 1):
        k = j - 1
        u = deconv3d(y, params[f"{prefix}.dec.{k}.weight"], params[f"{prefix}.dec.{k}.bias"])
        skip = xs[cfg.J - j]
        if u.shape != skip.shape:
            raise DimensionError(f"skip pair {j}: decoder {u.shape} vs encoder {skip.shape}")
        pre = add(u, skip)
        if trace is not None:
            trace[f"x{cfg.J - j}"] = skip
            trace[f"deconv{j}"] = u
            trace[f"pre{j}"] = pre
        if j < cfg.J:
            y = leaky_relu(_bn(pre, params, f"{prefix}.dec.{k}.bn", mode, cfg), slope)
        else:
            y = activation(cfg.final_activation, pre, slope)
    if y.shape != x0.shape:
        raise DimensionError(f"CNN changed shape {x0.shape} -> {y.shape}")
    return y


def forward(x, cfg, params, mode="train"):
    """Denoise flattened patches; ``x`` is (d,) or (N, d). Returns the same shape."""
    single = x.values.ndim == 1
    if single:
        x = reshape(x, (1, x.shape[0]))
    if x.values.ndim != 2 or x.shape[1] != cfg.d:
        raise DimensionError(f"forward expects (N, {cfg.d}) patches, got {x.shape}")
    n = x.shape[0]
    vol = (n, 1, cfg.P, cfg.P, cfg.C)
    if cfg.variant == "MLP_CNN":
        z = mlp_encoder_stack(x, params, cfg)
        out = cnn_encoder_decoder(reshape(z, vol), params, cfg, "cnn", mode)
    elif cfg.variant == "MLP_MLP":
        out = mlp_encoder_stack(x, params, cfg, 2 * cfg.L)
    elif cfg.variant == "CNN_CNN":
        h = cnn_encoder_decoder(reshape(x, vol), params, cfg, "cnn0", mode)
        out = cnn_encoder_decoder(h, params, cfg, "cnn1", mode)
    else:
        raise ConfigError(f"unknown variant {cfg.variant!r}")
    return reshape(out, (cfg.d,) if single else (n, cfg.d))


def with_variant(cfg, variant):
    return replace(cfg, variant=variant, channels=list(cfg.channels))
