"""CLAP network: separable-convolution encoder with sigmoid channel gating,
a ReLU latent, an upsampling decoder with 3x3 and 5x5 branches, and a
concatenated encoder/decoder descriptor fed to a softmax classifier.

Three variants are supported:

* ``encoder_only`` -- classifier on GAP of the pooled encoder map.
* ``decoder_i`` -- one upsampling decoder stage.
* ``full`` -- two upsampling decoder stages.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import layers as L
from .errors import InvalidConfig, InvalidLayer, ShapeMismatch
from .tensor import DTYPES, Tensor, channel_scale, concat_channels, reshape

VARIANTS = ("encoder_only", "decoder_i", "full")
DECODER_STAGES = {"encoder_only": 0, "decoder_i": 1, "full": 2}
DEFAULT_WIDTHS = (32, 64, 128, 256, 512, 1024)


@dataclass(frozen=True)
class ModelConfig:
    input_size: tuple = (224, 224, 3)
    encoder_widths: tuple = DEFAULT_WIDTHS
    encoder_kernel: int = 3
    decoder_kernel_a: int = 3
    decoder_kernel_b: int = 5
    # None means "same as the last encoder width"
    decoder_width: Optional[int] = None
    num_classes: int = 22
    variant: str = "full"
    dropout_rate: float = 0.2
    bn_order: str = "literal"
    seed: int = 0
    dtype: str = "f32"

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        object.__setattr__(self, "encoder_widths", tuple(int(v) for v in self.encoder_widths))
        if self.decoder_width is None and self.encoder_widths:
            object.__setattr__(self, "decoder_width", self.encoder_widths[-1])
        self.validate()

    def validate(self) -> None:
        h, w, c = self.input_size if len(self.input_size) == 3 else (0, 0, 0)
        if min(h, w, c) < 1:
            raise InvalidConfig(f"input_size must be (h, w, channels), got {self.input_size}")
        widths = self.encoder_widths
        if not widths:
            raise InvalidConfig("encoder_widths must be non-empty")
        if any(b <= a for a, b in zip(widths, widths[1:])) or widths[0] < 1:
            raise InvalidConfig(f"encoder_widths must be strictly increasing, got {widths}")
        for name in ("encoder_kernel", "decoder_kernel_a", "decoder_kernel_b"):
            k = getattr(self, name)
            if k < 1 or k % 2 == 0:
                raise InvalidConfig(f"{name} must be a positive odd integer, got {k}")
        if self.decoder_width is None or self.decoder_width < 1:
            raise InvalidConfig(f"decoder_width must be positive, got {self.decoder_width}")
        if self.num_classes < 2:
            raise InvalidConfig(f"num_classes must be >= 2, got {self.num_classes}")
        if self.variant not in VARIANTS:
            raise InvalidConfig(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not 0 <= self.dropout_rate < 1:
            raise InvalidConfig(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.bn_order not in ("literal", "conventional"):
            raise InvalidConfig(f"bn_order must be 'literal' or 'conventional', got {self.bn_order!r}")
        if self.dtype not in DTYPES:
            raise InvalidConfig(f"dtype must be one of {tuple(DTYPES)}, got {self.dtype!r}")
        for extent in (h, w):
            for _ in widths:
                extent = L.pool_output_size(extent, 2, 2, True)
                if extent < 1:
                    raise InvalidConfig(f"input {self.input_size[:2]} collapses below 1x1")

    @property
    def decoder_stages(self) -> int:
        return DECODER_STAGES[self.variant]

    @property
    def bottleneck_size(self) -> tuple:
        h, w = self.input_size[:2]
        for _ in self.encoder_widths:
            h = L.pool_output_size(h, 2, 2, True)
            w = L.pool_output_size(w, 2, 2, True)
        return h, w

    @property
    def fused_dim(self) -> int:
        if self.variant == "encoder_only":
            return self.encoder_widths[-1]
        return self.encoder_widths[-1] + self.decoder_width

    def replace(self, **changes) -> "ModelConfig":
        data = self.to_dict()
        if "encoder_widths" in changes and "decoder_width" not in changes:
            data["decoder_width"] = None
        data.update(changes)
        return ModelConfig.from_dict(data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        d["encoder_widths"] = list(self.encoder_widths)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = cls.__dataclass_fields__
        unknown = set(data) - set(known)
        if unknown:
            raise InvalidConfig(f"unknown ModelConfig fields: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class LayerSpec:
    """Static description of one parameterized layer, used for accounting."""

    name: str
    kind: str  # "sepconv" or "linear"
    c_in: int
    c_out: int
    k: int = 0
    spatial: tuple = (1, 1)  # spatial extent the layer runs at


def layer_specs(config: ModelConfig) -> list:
    specs = []
    h, w = config.input_size[:2]
    c = config.input_size[2]
    for i, width in enumerate(config.encoder_widths, start=1):
        specs.append(LayerSpec(f"enc{i}", "sepconv", c, width, config.encoder_kernel, (h, w)))
        c = width
        h = L.pool_output_size(h, 2, 2, True)
        w = L.pool_output_size(w, 2, 2, True)
    if config.decoder_stages:
        for j in range(1, config.decoder_stages + 1):
            h, w = 2 * h, 2 * w
            specs.append(LayerSpec(f"dec{j}", "sepconv", c, config.decoder_width,
                                   config.decoder_kernel_a, (h, w)))
            c = config.decoder_width
        specs.append(LayerSpec("dec5", "sepconv", c, config.decoder_width,
                               config.decoder_kernel_b, (h, w)))
    specs.append(LayerSpec("head", "linear", config.fused_dim, config.num_classes))
    return specs


def _he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


@dataclass
class Model:
    config: ModelConfig
    layers: dict = field(default_factory=dict)  # name -> LayerParams, in forward order

    @property
    def dtype(self):
        return DTYPES[self.config.dtype]

    @property
    def encoder_names(self) -> list:
        return [f"enc{i}" for i in range(1, len(self.config.encoder_widths) + 1)]

    @property
    def decoder_names(self) -> list:
        return [f"dec{j}" for j in range(1, self.config.decoder_stages + 1)]

    @property
    def conv_layer_names(self) -> list:
        return [name for name in self.layers if name != "head"]

    def named_parameters(self):
        for lname, lp in self.layers.items():
            for key, value in lp.weights.items():
                yield f"{lname}.{key}", value

    def named_buffers(self):
        for lname, lp in self.layers.items():
            for key, value in lp.buffers.items():
                yield f"{lname}.{key}", value

    def named_tensors(self):
        """Every tensor (trainable first per layer), with its trainable flag."""
        for lname, lp in self.layers.items():
            for key, value, trainable in lp.tensors():
                yield f"{lname}.{key}", value, trainable

    def get(self, full_name: str) -> np.ndarray:
        lname, key = full_name.rsplit(".", 1)
        lp = self.layers[lname]
        return lp.weights[key] if key in lp.weights else lp.buffers[key]


def build(config: ModelConfig, rng_seed: Optional[int] = None) -> Model:
    """Build a model with He-uniform kernels, zero biases/beta and unit gamma."""
    config.validate()
    seed = config.seed if rng_seed is None else rng_seed
    rng = np.random.default_rng(seed)
    dtype = DTYPES[config.dtype]
    model = Model(config)
    for spec in layer_specs(config):
        if spec.kind == "sepconv":
            k, cin, cout = spec.k, spec.c_in, spec.c_out
            weights = {
                "dw": _he_uniform(rng, (cin, k, k), k * k),
                "pw": _he_uniform(rng, (cin, cout), cin),
                "bias": np.zeros(cout),
                "gamma": np.ones(cout),
                "beta": np.zeros(cout),
            }
            buffers = {"running_mean": np.zeros(cout), "running_var": np.ones(cout)}
        else:
            weights = {
                "weight": _he_uniform(rng, (spec.c_in, spec.c_out), spec.c_in),
                "bias": np.zeros(spec.c_out),
            }
            buffers = {}
        model.layers[spec.name] = L.LayerParams(
            spec.name,
            {key: v.astype(dtype) for key, v in weights.items()},
            {key: v.astype(dtype) for key, v in buffers.items()},
        )
    return model


# ---------------------------------------------------------------------------
# forward stages


@dataclass
class StageContext:
    """Contexts of one stage plus the sepconv activations it produced."""

    ctxs: list = field(default_factory=list)
    activations: dict = field(default_factory=dict)


def _check_input(m: Model, x: Tensor) -> None:
    h, w, c = m.config.input_size
    if x.ndim != 4 or x.shape[1:] != (c, h, w):
        raise ShapeMismatch(f"expected input (N, {c}, {h}, {w}), got {x.shape}")


def encoder_forward(m: Model, x: Tensor, mode: str, rng=None):
    """Returns ``(pooled, gated, ctx)``; ``gated = sigmoid(GAP(pooled)) * pooled``."""
    _check_input(m, x)
    cfg = m.config
    sc = StageContext()
    h = x.astype(m.dtype, copy=False)
    for name in m.encoder_names:
        h, c_conv = L.sepconv_block(h, m.layers[name], cfg.encoder_kernel, mode, cfg.bn_order)
        sc.activations[name] = h
        h, c_pool = L.average_pool2d(h, 2, 2, ceil_mode=True)
        h, c_drop = L.dropout(h, cfg.dropout_rate, mode, rng)
        sc.ctxs.append((name, c_conv, c_pool, c_drop))
    pooled = h
    g, c_gap = L.global_average_pool(pooled)
    gate, c_sig = L.sigmoid(g)
    gated = channel_scale(pooled, gate)
    sc.ctxs.append(("gate", c_gap, c_sig, gate, pooled))
    return pooled, gated, sc


def encoder_backward(d_pooled: Tensor, d_gated: Optional[Tensor], sc: StageContext):
    grads, act_grads = {}, {}
    _, c_gap, c_sig, gate, pooled = sc.ctxs[-1]
    d = d_pooled.copy()
    if d_gated is not None:
        d += channel_scale(d_gated, gate)
        d_gate = (d_gated * pooled).sum(axis=(2, 3), keepdims=True)
        d += L.global_average_pool_backward(L.sigmoid_backward(d_gate, c_sig), c_gap)
    for name, c_conv, c_pool, c_drop in reversed(sc.ctxs[:-1]):
        d = L.dropout_backward(d, c_drop)
        d = L.average_pool2d_backward(d, c_pool)
        act_grads[name] = d
        d, g = L.sepconv_block_backward(d, c_conv)
        grads.update({f"{name}.{k}": v for k, v in g.items()})
    return d, grads, act_grads


def latent(gated: Tensor):
    """Flatten, ReLU, reshape back. Returns ``(latent, ctx)``."""
    if gated.ndim != 4:
        raise ShapeMismatch(f"latent expects (N, C, H, W), got {gated.shape}")
    flat = reshape(gated, (gated.shape[0], gated[0].size))
    act, ctx = L.relu(flat)
    return reshape(act, gated.shape), ctx


def latent_backward(d_latent: Tensor, ctx) -> Tensor:
    flat = d_latent.reshape(d_latent.shape[0], -1)
    return L.relu_backward(flat, ctx).reshape(d_latent.shape)


def decoder_forward(m: Model, lat: Tensor, mode: str, rng=None):
    """Returns ``(map3, map5, ctx)``."""
    cfg = m.config
    sc = StageContext()
    h = lat
    for name in m.decoder_names:
        h, c_up = L.nearest_upsample(h, 2)
        h, c_conv = L.sepconv_block(h, m.layers[name], cfg.decoder_kernel_a, mode, cfg.bn_order)
        sc.activations[name] = h
        h, c_drop = L.dropout(h, cfg.dropout_rate, mode, rng)
        sc.ctxs.append((name, c_up, c_conv, c_drop))
    map3 = h
    map5, c5 = L.sepconv_block(map3, m.layers["dec5"], cfg.decoder_kernel_b, mode, cfg.bn_order)
    sc.activations["dec5"] = map5
    sc.ctxs.append(("dec5", c5))
    return map3, map5, sc


def decoder_backward(d_map3: Tensor, d_map5: Tensor, sc: StageContext):
    grads, act_grads = {}, {"dec5": d_map5}
    _, c5 = sc.ctxs[-1]
    d, g = L.sepconv_block_backward(d_map5, c5)
    grads.update({f"dec5.{k}": v for k, v in g.items()})
    d = d + d_map3
    for name, c_up, c_conv, c_drop in reversed(sc.ctxs[:-1]):
        d = L.dropout_backward(d, c_drop)
        act_grads[name] = d
        d, g = L.sepconv_block_backward(d, c_conv)
        grads.update({f"{name}.{k}": v for k, v in g.items()})
        d = L.nearest_upsample_backward(d, c_up)
    return d, grads, act_grads


def fuse(pooled: Tensor, map3: Optional[Tensor], map5: Optional[Tensor]):
    """Encoder GAP concatenated with the summed GAPs of both decoder branches."""
    n = pooled.shape[0]
    enc, c_enc = L.global_average_pool(pooled)
    enc = enc.reshape(n, -1)
    if map3 is None:
        return enc, (c_enc, None, None)
    g3, c3 = L.global_average_pool(map3)
    g5, c5 = L.global_average_pool(map5)
    dec = (g3 + g5).reshape(n, -1)
    return concat_channels(enc, dec), (c_enc, c3, c5)


def fuse_and_classify(m: Model, pooled: Tensor, map3: Optional[Tensor], map5: Optional[Tensor],
                      mode: str = L.INFER):
    """Returns ``(probs, fused)``."""
    fused, _ = fuse(pooled, map3, map5)
    head = m.layers["head"].weights
    logits, _ = L.linear(fused, head["weight"], head["bias"])
    return L.softmax(logits), fused


@dataclass
class ForwardCache:
    enc: StageContext
    lat_ctx: object
    dec: Optional[StageContext]
    fuse_ctx: tuple
    head_ctx: object
    pooled: Tensor
    fused: Tensor


def forward_logits(m: Model, x: Tensor, mode: str = L.INFER, rng=None):
    """Full forward pass to class logits. Returns ``(logits, cache)``."""
    pooled, gated, enc_ctx = encoder_forward(m, x, mode, rng)
    lat_ctx = dec_ctx = None
    map3 = map5 = None
    if m.config.variant != "encoder_only":
        lat, lat_ctx = latent(gated)
        map3, map5, dec_ctx = decoder_forward(m, lat, mode, rng)
    fused, fuse_ctx = fuse(pooled, map3, map5)
    head = m.layers["head"].weights
    logits, head_ctx = L.linear(fused, head["weight"], head["bias"])
    return logits, ForwardCache(enc_ctx, lat_ctx, dec_ctx, fuse_ctx, head_ctx, pooled, fused)


def backward_logits(m: Model, cache: ForwardCache, dlogits: Tensor):
    """Backpropagate ``dlogits`` through the whole network.

    Returns ``(dx, grads, act_grads)``: input gradient, parameter gradients
    keyed ``"<layer>.<tensor>"``, and gradients w.r.t. every sepconv output.
    """
    n = dlogits.shape[0]
    dfused, dW, db = L.linear_backward(dlogits, cache.head_ctx)
    grads = {"head.weight": dW, "head.bias": db}
    c_enc, c3, c5 = cache.fuse_ctx
    c = m.config.encoder_widths[-1]
    d_enc = dfused[:, :c].reshape(n, c, 1, 1)
    d_pooled = L.global_average_pool_backward(d_enc, c_enc)
    d_gated = None
    act_grads = {}
    if c3 is not None:
        d_dec = dfused[:, c:].reshape(n, -1, 1, 1)
        d_map3 = L.global_average_pool_backward(d_dec, c3)
        d_map5 = L.global_average_pool_backward(d_dec, c5)
        d_lat, dec_grads, dec_acts = decoder_backward(d_map3, d_map5, cache.dec)
        grads.update(dec_grads)
        act_grads.update(dec_acts)
        d_gated = latent_backward(d_lat, cache.lat_ctx)
    dx, enc_grads, enc_acts = encoder_backward(d_pooled, d_gated, cache.enc)
    grads.update(enc_grads)
    act_grads.update(enc_acts)
    return dx, grads, act_grads


def forward(m: Model, x: Tensor, mode: str = L.INFER, rng=None) -> Tensor:
    logits, _ = forward_logits(m, x, mode, rng)
    return L.softmax(logits)


def loss_and_grads(m: Model, x: Tensor, labels, mode: str = L.TRAIN, rng=None):
    """Mean cross-entropy over the batch and gradients for every trainable tensor.

    Returns ``(loss, grads, probs)``.
    """
    logits, cache = forward_logits(m, x, mode, rng)
    loss, probs, ce_ctx = L.softmax_cross_entropy(logits, labels)
    dlogits = L.softmax_cross_entropy_backward(1.0, ce_ctx)
    _, grads, _ = backward_logits(m, cache, dlogits)
    ordered = {name: grads[name] for name, _ in m.named_parameters()}
    return loss, ordered, probs


# ---------------------------------------------------------------------------
# accounting


def count_params(m: Model) -> list:
    """Rows of ``(layer, trainable, non_trainable)`` from closed-form counts.

    sepconv: k*k*C_in + C_in*C_out + C_out trainable (+2*C_out BN affine),
    2*C_out non-trainable running statistics; linear: D*K + K.
    """
    rows = []
    for spec in layer_specs(m.config):
        if spec.kind == "sepconv":
            trainable = spec.k * spec.k * spec.c_in + spec.c_in * spec.c_out + spec.c_out + 2 * spec.c_out
            rows.append((spec.name, trainable, 2 * spec.c_out))
        else:
            rows.append((spec.name, spec.c_in * spec.c_out + spec.c_out, 0))
    return rows


def count_flops(m: Model, input_size: Optional[tuple] = None) -> list:
    """Rows of ``(layer, multiply_adds, flops)`` with ``flops = 2 * multiply_adds``.

    Only convolutions and the classifier are counted; normalization,
    activations and pooling are negligible by comparison.
    """
    cfg = m.config
    if input_size is not None:
        cfg = cfg.replace(input_size=tuple(input_size))
    rows = []
    for spec in layer_specs(cfg):
        h, w = spec.spatial
        if spec.kind == "sepconv":
            macs = (spec.k * spec.k * spec.c_in + spec.c_in * spec.c_out) * h * w
        else:
            macs = spec.c_in * spec.c_out
        rows.append((spec.name, macs, 2 * macs))
    return rows


def resolve_layer(m: Model, name: Optional[str]) -> str:
    if name is None:
        return m.encoder_names[-1]
    if name not in m.layers or name == "head":
        raise InvalidLayer(f"no convolutional layer named {name!r}; choose from {m.conv_layer_names}")
    return name
