"""The A2F network: head conv, stacked attentive auxiliary feature blocks, tail and skip.

Block ``i`` (1-based) sees every earlier trunk feature ``x_0 .. x_{i-1}``:

    proj = conv1x1(concat(x_0 .. x_{i-1}))
    att  = sigmoid(conv1x1(relu(conv1x1(avgpool(proj))))) * proj
    res  = conv3x3(relu(conv3x3(x_{i-1})))
    x_i  = lambda_res * res + lambda_att * att + lambda_x * x_{i-1}

and the image is ``pixel_shuffle(conv(x_L)) + pixel_shuffle(conv(I_LR))``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigurationError
from .tensor import ConvParams, GradSlot

# name -> (blocks, trunk channels)
VARIANTS = {"S": (4, 32), "SD": (8, 16), "M": (12, 32), "L": (16, 32)}
SCALES = (2, 3, 4)
RES_CHANNELS = 128
DEFAULT_RESOLUTION = (1280, 720)


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "S"
    scale: int = 2
    n_blocks: int = 4
    channels: int = 32
    res_channels: int = RES_CHANNELS
    head_kernel: int = 3
    projection: bool = True
    channel_attention: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS and self.variant != "custom":
            raise ConfigurationError(f"unknown variant {self.variant!r}")
        if self.scale not in SCALES:
            raise ConfigurationError(f"scale must be one of {SCALES}, got {self.scale}")
        if self.n_blocks < 1 or self.channels < 1 or self.res_channels < 1:
            raise ConfigurationError("block count and channel widths must be positive")
        if self.head_kernel not in T.SUPPORTED_KERNELS:
            raise ConfigurationError(f"head kernel must be one of {T.SUPPORTED_KERNELS}")
        if self.channel_attention and not self.projection:
            raise ConfigurationError("channel attention operates on projected features; enable projection")
        if self.variant in VARIANTS and (self.n_blocks, self.channels) != VARIANTS[self.variant]:
            raise ConfigurationError(
                f"variant {self.variant} fixes blocks/channels to {VARIANTS[self.variant]}; "
                "use variant 'custom' to override"
            )

    @property
    def name(self) -> str:
        base = f"A2F-{self.variant}" if self.variant != "custom" else (
            f"A2F-custom(L={self.n_blocks},C={self.channels})"
        )
        if not self.projection:
            base += "-BASELINE"
        elif not self.channel_attention:
            base += "-NOCA"
        return f"{base} x{self.scale}"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)


def variant_config(
    name: str,
    scale: int,
    *,
    n_blocks: int | None = None,
    channels: int | None = None,
    head_kernel: int = 3,
    projection: bool = True,
    channel_attention: bool = True,
    res_channels: int = RES_CHANNELS,
) -> ModelConfig:
    """Resolve a named variant (S, SD, M, L) or ``custom`` into a full config."""
    name = str(name)
    if name.upper() in VARIANTS:
        name = name.upper()
        blocks, width = VARIANTS[name]
        if n_blocks not in (None, blocks) or channels not in (None, width):
            raise ConfigurationError(f"variant {name} has fixed L={blocks}, C={width}")
    elif name.lower() == "custom":
        name = "custom"
        if n_blocks is None or channels is None:
            raise ConfigurationError("custom variant needs n_blocks and channels")
        blocks, width = n_blocks, channels
    else:
        raise ConfigurationError(f"unknown variant {name!r}; expected one of {sorted(VARIANTS)} or custom")
    return ModelConfig(
        variant=name,
        scale=int(scale),
        n_blocks=blocks,
        channels=width,
        res_channels=res_channels,
        head_kernel=head_kernel,
        projection=projection,
        channel_attention=channel_attention,
    )


class AAFBlock:
    """One attentive auxiliary feature block; ``index`` is 1-based."""

    def __init__(self, index: int, config: ModelConfig, dtype=T.DTYPE):
        c, r = config.channels, config.res_channels
        self.index = index
        self.channels = c
        self.proj = self.att1 = self.att2 = None
        self.lambda_att = None
        if config.projection:
            self.proj = ConvParams.zeros(index * c, c, 1, dtype)
            self.lambda_att = GradSlot(np.ones(1, dtype))
        if config.channel_attention:
            self.att1 = ConvParams.zeros(c, c, 1, dtype)
            self.att2 = ConvParams.zeros(c, c, 1, dtype)
        self.res1 = ConvParams.zeros(c, r, 3, dtype)
        self.res2 = ConvParams.zeros(r, c, 3, dtype)
        self.lambda_res = GradSlot(np.ones(1, dtype))
        self.lambda_x = GradSlot(np.ones(1, dtype))

    @property
    def projection(self) -> bool:
        return self.proj is not None

    @property
    def channel_attention(self) -> bool:
        return self.att1 is not None

    def convs(self) -> dict[str, ConvParams]:
        out = {}
        for name in ("proj", "att1", "att2", "res1", "res2"):
            conv = getattr(self, name)
            if conv is not None:
                out[name] = conv
        return out

    def named_parameters(self, prefix: str):
        for name, conv in self.convs().items():
            yield f"{prefix}{name}.weight", conv.weight
            yield f"{prefix}{name}.bias", conv.bias
        yield f"{prefix}lambda_res", self.lambda_res
        if self.lambda_att is not None:
            yield f"{prefix}lambda_att", self.lambda_att
        yield f"{prefix}lambda_x", self.lambda_x

    def lambdas(self) -> tuple[float, float | None, float]:
        att = None if self.lambda_att is None else float(T.scalar(self.lambda_att))
        return float(T.scalar(self.lambda_res)), att, float(T.scalar(self.lambda_x))

    def forward(self, history, cache: dict | None = None):
        if not history:
            raise ConfigurationError("block history must not be empty")
        if len(history) != self.index:
            raise ConfigurationError(
                f"block {self.index} expects {self.index} history tensors "
                f"({self.index * self.channels} channels), got {len(history)}"
            )
        x_prev = history[-1]
        keep = cache is not None

        h1, cols1 = T.conv2d(x_prev, self.res1.weight.value, self.res1.bias.value, return_cols=True)
        h1r = T.relu(h1)
        x_res = T.conv2d(h1r, self.res2.weight.value, self.res2.bias.value)

        l_res, l_att, l_x = (T.scalar(s) if s is not None else None
                             for s in (self.lambda_res, self.lambda_att, self.lambda_x))
        if self.projection:
            cat = T.channel_concat(history)
            x_proj = T.conv2d(cat, self.proj.weight.value, self.proj.bias.value)
            if self.channel_attention:
                pooled = T.global_avg_pool(x_proj)
                a1 = T.conv2d(pooled, self.att1.weight.value, self.att1.bias.value)
                a1r = T.relu(a1)
                gate = T.sigmoid(T.conv2d(a1r, self.att2.weight.value, self.att2.bias.value))
                x_att = T.channel_scale(x_proj, gate)
                if keep:
                    cache.update(pooled=pooled, a1=a1, a1r=a1r, gate=gate)
            else:
                x_att = x_proj
            out = T.weighted_sum3(x_res, x_att, x_prev, l_res, l_att, l_x)
            if keep:
                cache.update(cat=cat, x_proj=x_proj, x_att=x_att)
        else:
            dt = x_res.dtype.type
            out = T.add(dt(l_res) * x_res, dt(l_x) * x_prev)
        if keep:
            cache.update(x_prev=x_prev, h1=h1, cols1=cols1, h1r=h1r, x_res=x_res)
        return out

    def backward(self, grad_out, cache):
        """Accumulate parameter grads; return gradients w.r.t. each history tensor."""
        x_prev = cache["x_prev"]
        l_res = T.scalar(self.lambda_res)
        l_x = T.scalar(self.lambda_x)
        dt = grad_out.dtype.type
        grads = [None] * self.index

        if self.projection:
            l_att = T.scalar(self.lambda_att)
            g_res, g_att, g_prev, gl_res, gl_att, gl_x = T.weighted_sum3_backward(
                grad_out, cache["x_res"], cache["x_att"], x_prev, l_res, l_att, l_x
            )
            self.lambda_att.grad += gl_att
            if self.channel_attention:
                g_proj, g_gate = T.channel_scale_backward(g_att, cache["x_proj"], cache["gate"])
                g_a2 = T.sigmoid_backward(g_gate, cache["gate"])
                g_a1r, gw, gb = T.conv2d_backward(g_a2, cache["a1r"], self.att2.weight.value)
                self.att2.weight.grad += gw
                self.att2.bias.grad += gb
                g_a1 = T.relu_backward(g_a1r, cache["a1"])
                g_pooled, gw, gb = T.conv2d_backward(g_a1, cache["pooled"], self.att1.weight.value)
                self.att1.weight.grad += gw
                self.att1.bias.grad += gb
                g_proj = g_proj + T.global_avg_pool_backward(g_pooled, g_proj.shape)
            else:
                g_proj = g_att
            g_cat, gw, gb = T.conv2d_backward(g_proj, cache["cat"], self.proj.weight.value)
            self.proj.weight.grad += gw
            self.proj.bias.grad += gb
            grads = T.channel_split(g_cat, [self.channels] * self.index)
        else:
            g_res = dt(l_res) * grad_out
            g_prev = dt(l_x) * grad_out
            gl_res = T._dot(grad_out, cache["x_res"])
            gl_x = T._dot(grad_out, x_prev)
            grads[-1] = 0
        self.lambda_res.grad += gl_res
        self.lambda_x.grad += gl_x

        g_h1r, gw, gb = T.conv2d_backward(g_res, cache["h1r"], self.res2.weight.value)
        self.res2.weight.grad += gw
        self.res2.bias.grad += gb
        g_h1 = T.relu_backward(g_h1r, cache["h1"])
        g_x, gw, gb = T.conv2d_backward(g_h1, x_prev, self.res1.weight.value, cols=cache["cols1"])
        self.res1.weight.grad += gw
        self.res1.bias.grad += gb

        grads[-1] = grads[-1] + g_prev + g_x
        return grads


class A2FModel:
    def __init__(self, config: ModelConfig, dtype=T.DTYPE):
        self.config = config
        c, p = config.channels, config.scale
        self.head = ConvParams.zeros(3, c, config.head_kernel, dtype)
        self.blocks = [AAFBlock(i, config, dtype) for i in range(1, config.n_blocks + 1)]
        self.tail = ConvParams.zeros(c, 3 * p * p, 3, dtype)
        self.skip = ConvParams.zeros(3, 3 * p * p, 3, dtype)

    @property
    def dtype(self):
        return self.head.weight.value.dtype

    def named_parameters(self) -> list[tuple[str, GradSlot]]:
        out = [("head.weight", self.head.weight), ("head.bias", self.head.bias)]
        for i, block in enumerate(self.blocks, start=1):
            out.extend(block.named_parameters(f"blocks.{i}."))
        out += [
            ("tail.weight", self.tail.weight),
            ("tail.bias", self.tail.bias),
            ("skip.weight", self.skip.weight),
            ("skip.bias", self.skip.bias),
        ]
        return out

    def parameters(self) -> list[GradSlot]:
        return [slot for _, slot in self.named_parameters()]

    def named_convs(self) -> list[tuple[str, ConvParams]]:
        out = [("head", self.head)]
        for i, block in enumerate(self.blocks, start=1):
            out.extend((f"blocks.{i}.{name}", conv) for name, conv in block.convs().items())
        out += [("tail", self.tail), ("skip", self.skip)]
        return out

    def zero_grad(self):
        for slot in self.parameters():
            slot.zero_grad()

    def astype(self, dtype) -> "A2FModel":
        """Copy with every parameter cast to ``dtype`` (float64 for verification)."""
        other = A2FModel(self.config, dtype)
        for (_, src), (_, dst) in zip(self.named_parameters(), other.named_parameters()):
            dst.value[...] = src.value
        return other

    def copy(self) -> "A2FModel":
        return self.astype(self.dtype)

    def forward(self, lr, cache: dict | None = None):
        if lr.ndim != 4 or lr.shape[1] != 3:
            raise ConfigurationError(f"model input must be (n, 3, h, w), got shape {lr.shape}")
        lr = np.asarray(lr, dtype=self.dtype)
        p = self.config.scale
        keep = cache is not None
        x0, head_cols = T.conv2d(lr, self.head.weight.value, self.head.bias.value, return_cols=True)
        history = [x0]
        block_caches = []
        for block in self.blocks:
            bc = {} if keep else None
            history.append(block.forward(history, bc))
            block_caches.append(bc)
        x_tail = T.pixel_shuffle(T.conv2d(history[-1], self.tail.weight.value, self.tail.bias.value), p)
        x_skip = T.pixel_shuffle(T.conv2d(lr, self.skip.weight.value, self.skip.bias.value), p)
        if keep:
            cache.update(lr=lr, head_cols=head_cols, history=history, blocks=block_caches)
        return T.add(x_tail, x_skip)

    def backward(self, grad_sr, cache):
        """Accumulate gradients of all parameters given dLoss/dI_SR."""
        p = self.config.scale
        g_tail, g_skip = T.add_backward(grad_sr)
        history = cache["history"]
        lr = cache["lr"]

        _, gw, gb = T.conv2d_backward(T.pixel_shuffle_backward(g_skip, p), lr,
                                      self.skip.weight.value, need_input_grad=False)
        self.skip.weight.grad += gw
        self.skip.bias.grad += gb

        g_last, gw, gb = T.conv2d_backward(T.pixel_shuffle_backward(g_tail, p), history[-1],
                                           self.tail.weight.value)
        self.tail.weight.grad += gw
        self.tail.bias.grad += gb

        # x_i only feeds later blocks, so its gradient is complete once blocks > i are done
        grads = [np.zeros_like(h) for h in history[:-1]] + [g_last]
        for i in range(len(self.blocks), 0, -1):
            block_grads = self.blocks[i - 1].backward(grads[i], cache["blocks"][i - 1])
            for j, g in enumerate(block_grads):
                if g is not None:
                    grads[j] += g

        _, gw, gb = T.conv2d_backward(grads[0], lr, self.head.weight.value,
                                      cols=cache["head_cols"], need_input_grad=False)
        self.head.weight.grad += gw
        self.head.bias.grad += gb

    def __call__(self, lr):
        return self.forward(lr)


def build_model(config: ModelConfig, seed: int = 0, dtype=T.DTYPE) -> A2FModel:
    """Fan-in uniform weights (bound sqrt(1/(in*k*k))), zero biases, lambdas = 1."""
    model = A2FModel(config, dtype)
    rng = np.random.default_rng(seed)
    for _, conv in model.named_convs():
        w = conv.weight.value
        bound = init_bound(conv)
        w[...] = rng.uniform(-bound, bound, size=w.shape)
    return model


def init_bound(conv: ConvParams) -> float:
    return math.sqrt(1.0 / (conv.in_ch * conv.kernel ** 2))


def aaf_block_forward(block: AAFBlock, history, cache=None):
    return block.forward(history, cache)


def forward(model: A2FModel, lr):
    return model.forward(lr)


def count_params(model: A2FModel) -> int:
    return sum(slot.size for slot in model.parameters())


def count_multiadds(model: A2FModel, hr_resolution=DEFAULT_RESOLUTION) -> int:
    """Multiply-accumulates of one forward pass producing an ``hr_resolution`` image.

    Trunk convs run on the (H/p, W/p) grid, the attention convs on the pooled
    1x1 grid; pooling, activations and pixel shuffle are free.
    """
    width, height = hr_resolution
    p = model.config.scale
    if width % p or height % p:
        raise ConfigurationError(f"resolution {width}x{height} is not divisible by scale {p}")
    pixels = (width // p) * (height // p)
    total = 0
    for name, conv in model.named_convs():
        grid = 1 if ".att" in name else pixels
        total += conv.kernel ** 2 * conv.in_ch * conv.out_ch * grid
    return total


def lambda_report(model: A2FModel) -> list[tuple[float, float | None, float]]:
    """(lambda_res, lambda_att, lambda_x) per block; lambda_att is None without projection."""
    return [block.lambdas() for block in model.blocks]


def layer_table(model: A2FModel) -> list[dict]:
    rows = []
    for name, conv in model.named_convs():
        rows.append({
            "name": name,
            "kernel": conv.kernel,
            "in": conv.in_ch,
            "out": conv.out_ch,
            "params": conv.weight.size + conv.bias.size,
        })
    return rows


def summary(model: A2FModel, hr_resolution=DEFAULT_RESOLUTION) -> dict:
    cfg = model.config
    try:
        madds = count_multiadds(model, hr_resolution)
    except ConfigurationError:
        madds = None
    return {
        "model": cfg.name,
        "config": cfg.to_dict(),
        "params": count_params(model),
        "resolution": f"{hr_resolution[0]}x{hr_resolution[1]}",
        "multiadds": madds,
        "layers": layer_table(model),
        "lambdas": [
            {"block": i, "lambda_res": r, "lambda_att": a, "lambda_x": x}
            for i, (r, a, x) in enumerate(lambda_report(model), start=1)
        ],
    }

