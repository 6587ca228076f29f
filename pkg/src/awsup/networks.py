"""Micro U-Nets: the attention-gated, deeply supervised fine network and the
plain U-Net used by the coarse cascade.

Both are one :class:`UNet` class switched by :class:`UNetConfig` flags. Every
3x3 convolution is followed by a learned per-channel scale and a ReLU; the
scale stands in for batch normalization at small batch sizes.
"""

import copy
import struct
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DatasetError, DimensionError

N_HEADS = 4


@dataclass
class UNetConfig:
    in_channels: int = 2
    num_classes: int = 3
    base_width: int = 8
    depth: int = 4
    attention: bool = True
    deep_supervision: bool = True
    convs_per_block: int = 2

    def __post_init__(self):
        if self.base_width < 4:
            raise ConfigError(f"base_width must be >= 4, got {self.base_width}")
        if self.depth < 2:
            raise ConfigError(f"depth must be >= 2, got {self.depth}")
        if self.deep_supervision and self.depth != N_HEADS:
            raise ConfigError(f"deep supervision needs depth {N_HEADS}, got {self.depth}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.in_channels < 1 or self.convs_per_block < 1:
            raise ConfigError("in_channels and convs_per_block must be positive")

    @property
    def divisor(self):
        return 2 ** (self.depth - 1)

    def to_text(self):
        return "\n".join(f"{k}={int(v) if isinstance(v, bool) else v}" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text):
        kinds = {f.name: f.type for f in fields(cls)}
        kw = {}
        for line in text.strip().splitlines():
            key, _, val = line.partition("=")
            if key not in kinds:
                raise DatasetError(f"unknown config key {key!r} in checkpoint")
            kw[key] = bool(int(val)) if kinds[key] in (bool, "bool") else int(val)
        return cls(**kw)


def attention_gate(d, u, params):
    """Additive attention: mask = sigmoid(W relu(W_d d + W_u u + b1) + b2).

    Returns ``(mask, gated)`` where ``gated = mask * u`` with the single-channel
    mask broadcast over channels.
    """
    d, u = ad.as_tensor(d), ad.as_tensor(u)
    if d.shape[-2:] != u.shape[-2:] or d.data.ndim != u.data.ndim:
        raise DimensionError(f"attention_gate: skip {d.shape} and decoder {u.shape} are not aligned")
    merged = ad.add(ad.conv2d(d, params["W_d"]), ad.conv2d(u, params["W_u"], params["b1"]))
    mask = ad.sigmoid(ad.conv2d(ad.relu(merged), params["W"], params["b2"]))
    return mask, ad.mul(mask, u)


def _kaiming(rng, shape):
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class UNet:
    """Encoder-decoder with optional attention gates and four supervision heads.

    ``forward`` returns a list of full-resolution logits ordered from the
    deepest head to the shallowest; the last entry is the inference head.
    Without deep supervision the list has a single entry.
    """

    def __init__(self, cfg, seed=0):
        self.cfg = cfg
        self.params = {}
        self.mask_min = np.inf
        self.mask_max = -np.inf
        rng = np.random.default_rng(seed)
        w = [cfg.base_width * 2 ** i for i in range(cfg.depth)]
        cin = cfg.in_channels
        for lvl in range(cfg.depth):
            self._block(rng, f"enc{lvl}", cin, w[lvl])
            cin = w[lvl]
        for lvl in range(cfg.depth - 2, -1, -1):
            self._conv(rng, f"up{lvl}", w[lvl + 1], w[lvl], 1)
            if cfg.attention:
                inter = max(1, w[lvl] // 2)
                self._conv(rng, f"gate{lvl}.W_d", w[lvl], inter, 1, bias=False)
                self._conv(rng, f"gate{lvl}.W_u", w[lvl], inter, 1, bias=False)
                self.params[f"gate{lvl}.b1"] = ad.parameter(np.zeros(inter), f"gate{lvl}.b1")
                self._conv(rng, f"gate{lvl}.W", inter, 1, 1, bias=False)
                self.params[f"gate{lvl}.b2"] = ad.parameter(np.zeros(1), f"gate{lvl}.b2")
            self._block(rng, f"dec{lvl}", 2 * w[lvl], w[lvl])
        if cfg.deep_supervision:
            self._conv(rng, "head0", w[-1], cfg.num_classes, 1)
            for i, lvl in enumerate(range(cfg.depth - 2, -1, -1), start=1):
                self._conv(rng, f"head{i}", w[lvl], cfg.num_classes, 1)
        else:
            self._conv(rng, "head", w[0], cfg.num_classes, 1)

    def _conv(self, rng, name, cin, cout, k, bias=True):
        key = f"{name}.w" if bias else name
        self.params[key] = ad.parameter(_kaiming(rng, (cout, cin, k, k)), key)
        if bias:
            self.params[f"{name}.b"] = ad.parameter(np.zeros(cout), f"{name}.b")

    def _block(self, rng, name, cin, cout):
        for j in range(self.cfg.convs_per_block):
            self._conv(rng, f"{name}.c{j}", cin if j == 0 else cout, cout, 3)
            self.params[f"{name}.c{j}.s"] = ad.parameter(np.ones(cout), f"{name}.c{j}.s")

    def parameters(self):
        return list(self.params.values())

    def n_params(self):
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def clone(self):
        return copy.deepcopy(self)

    def gate_params(self, lvl):
        p = self.params
        return {k: p[f"gate{lvl}.{k}"] for k in ("W_d", "W_u", "b1", "W", "b2")}

    def _run_block(self, name, x):
        p = self.params
        bshape = (-1,) + (1,) * (x.data.ndim - 1)
        for j in range(self.cfg.convs_per_block):
            x = ad.conv2d(x, p[f"{name}.c{j}.w"], p[f"{name}.c{j}.b"])
            x = ad.relu(ad.mul(x, ad.reshape(p[f"{name}.c{j}.s"], bshape)))
        return x

    def forward(self, x):
        cfg, p = self.cfg, self.params
        x = ad.as_tensor(x)
        if x.data.ndim not in (3, 4):
            raise DimensionError(f"input must be (C,H,W) or (C,N,H,W), got {x.shape}")
        if x.shape[0] != cfg.in_channels:
            raise DimensionError(f"input has {x.shape[0]} channels, network expects {cfg.in_channels}")
        H, W = x.shape[-2:]
        if H % cfg.divisor or W % cfg.divisor:
            raise ConfigError(f"spatial size {H}x{W} not divisible by {cfg.divisor}")
        skips = []
        for lvl in range(cfg.depth):
            if lvl:
                x = ad.maxpool2(x)
            x = self._run_block(f"enc{lvl}", x)
            skips.append(x)
        feats = [x]
        for lvl in range(cfg.depth - 2, -1, -1):
            u = ad.conv2d(ad.bilinear_upsample2x(x), p[f"up{lvl}.w"], p[f"up{lvl}.b"])
            if cfg.attention:
                mask, u = attention_gate(skips[lvl], u, self.gate_params(lvl))
                self.mask_min = min(self.mask_min, float(mask.data.min()))
                self.mask_max = max(self.mask_max, float(mask.data.max()))
            x = self._run_block(f"dec{lvl}", ad.concat([skips[lvl], u], axis=0))
            feats.append(x)
        if not cfg.deep_supervision:
            return [ad.conv2d(x, p["head.w"], p["head.b"])]
        outs = []
        for i, f in enumerate(feats):
            logits = ad.conv2d(f, p[f"head{i}.w"], p[f"head{i}.b"])
            for _ in range(cfg.depth - 1 - i):
                logits = ad.bilinear_upsample2x(logits)
            outs.append(logits)
        return outs

    def predict_proba(self, x):
        """Softmax of the final head, without recording."""
        with ad.no_record():
            return ad.softmax_channel(self.forward(x)[-1]).data


def asan_forward(x, net):
    """Four full-resolution logits, deepest head first."""
    if not net.cfg.deep_supervision:
        raise ConfigError("asan_forward needs a deeply supervised network")
    return net.forward(x)


def vanilla_unet_forward(x, net):
    return net.forward(x)[-1]


def fine_config(**kw):
    return UNetConfig(**{"in_channels": 2, "num_classes": 3, **kw})


def vanilla_config(**kw):
    return UNetConfig(**{"in_channels": 3, "num_classes": 2, "attention": False,
                         "deep_supervision": False, **kw})


# ---------------------------------------------------------------------------
# Checkpoints: magic, version, length-prefixed config text, then parameter
# blocks in declaration order (name, shape, little-endian float64 data).

MAGIC = b"AWSUPNET"
VERSION = 1


def _put_str(buf, s):
    b = s.encode("utf-8")
    buf.append(struct.pack("<I", len(b)))
    buf.append(b)


def save_checkpoint(net, path, meta=None):
    buf = [MAGIC, struct.pack("<I", VERSION)]
    _put_str(buf, net.cfg.to_text())
    meta = meta or {}
    _put_str(buf, "\n".join(f"{k}={v}" for k, v in meta.items()))
    buf.append(struct.pack("<I", len(net.params)))
    for name, t in net.params.items():
        _put_str(buf, name)
        buf.append(struct.pack("<I", t.data.ndim))
        buf.append(struct.pack(f"<{t.data.ndim}I", *t.shape))
        buf.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(buf))


def load_checkpoint(path):
    """Return ``(net, meta)`` from a checkpoint file."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise DatasetError(f"cannot read checkpoint {path}: {exc}") from exc
    if not raw.startswith(MAGIC):
        raise DatasetError(f"{path} is not a checkpoint (bad magic)")
    pos = len(MAGIC)

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise DatasetError(f"{path} is truncated")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    def take_u32():
        return struct.unpack("<I", take(4))[0]

    def take_str():
        return take(take_u32()).decode("utf-8")

    version = take_u32()
    if version != VERSION:
        raise DatasetError(f"{path}: unsupported checkpoint version {version}")
    cfg = UNetConfig.from_text(take_str())
    meta_text = take_str()
    meta = dict(line.split("=", 1) for line in meta_text.splitlines() if line)
    net = UNet(cfg)
    count = take_u32()
    if count != len(net.params):
        raise DatasetError(f"{path}: {count} parameter blocks, config implies {len(net.params)}")
    for name in list(net.params):
        stored = take_str()
        if stored != name:
            raise DatasetError(f"{path}: expected block {name!r}, found {stored!r}")
        ndim = take_u32()
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        if tuple(shape) != net.params[name].shape:
            raise DatasetError(f"{path}: block {name} has shape {shape}")
        n = int(np.prod(shape))
        data = np.frombuffer(take(8 * n), dtype="<f8").reshape(shape)
        net.params[name].data = data.astype(np.float64)
    if pos != len(raw):
        raise DatasetError(f"{path}: {len(raw) - pos} trailing bytes")
    return net, meta
