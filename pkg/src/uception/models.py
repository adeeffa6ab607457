"""Whole-network assembly: the Uception encoder-decoder and a plain 3D
U-net baseline sized to matching capacity, plus the binary checkpoint
format shared by both.

Checkpoint layout (version 1, all integers little-endian):

    bytes 0..3   magic "UCPT"
    u32          format version (1)
    u32          length of the config record, then that many bytes of
                 UTF-8 "key = value" lines (kind, depth, levels, dropout,
                 in_channels, out_channels; U-net adds width and
                 bottleneck_width)
    u32          number of parameters
    per parameter, in order:
        u32      name length, then the UTF-8 name
        u32      rank, then rank x u32 extents
        raw      extent-product float32 values, little-endian, C order
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np

from . import ops
from .blocks import DeepBlock, DeepBlockCfg, ReductionBlock, ReductionBlockCfg
from .errors import CheckpointError, ShapeError
from .layers import Chain, Context, Conv3d, Sigmoid, conv_unit
from .ops import SAME, ConvSpec
from .tensor import as_tensor5

CHECKPOINT_MAGIC = b"UCPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class UceptionCfg:
    base_depth: int = 10
    levels: int = 3
    dropout_rate: float = 0.25
    input_channels: int = 1
    output_channels: int = 1

    def __post_init__(self):
        if self.levels < 1:
            raise ShapeError(f"levels must be >= 1, got {self.levels}")
        if self.base_depth < 1:
            raise ShapeError(f"base_depth must be >= 1, got {self.base_depth}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ShapeError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")


def _walk_layers(layer):
    if isinstance(layer, Chain):
        for sub in layer.layers:
            yield from _walk_layers(sub)
    elif hasattr(layer, "branches"):
        for _, branch in layer.branches:
            yield from _walk_layers(branch)
    else:
        yield layer


class _ModelBase:
    """Shared graph plumbing: naming, init, parameter access, divisibility."""

    kind = "base"

    def __init__(self, cfg, dtype):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self._stages = []  # ordered (name, layer) pairs, encoder to head

    def _register(self, name, layer):
        self._stages.append((name, layer))
        return layer

    def init_params(self, seed):
        rng = np.random.default_rng(seed)
        for _, stage in self._stages:
            for layer in _walk_layers(stage):
                if isinstance(layer, Conv3d):
                    layer.init_params(rng)
        return self

    def parameters(self):
        """Stable name -> live array mapping, in build order."""
        out = {}
        for _, stage in self._stages:
            for layer in _walk_layers(stage):
                for name, arr in layer.parameters().items():
                    if name in out:
                        raise ShapeError(f"duplicate parameter name {name}")
                    out[name] = arr
        return out

    def parameter_count(self):
        return sum(int(p.size) for p in self.parameters().values())

    def set_parameters(self, values):
        params = self.parameters()
        missing = set(params) - set(values)
        extra = set(values) - set(params)
        if missing or extra:
            raise CheckpointError(
                f"parameter names do not match model: missing={sorted(missing)[:3]} "
                f"extra={sorted(extra)[:3]}"
            )
        for name, arr in params.items():
            v = np.asarray(values[name])
            if v.shape != arr.shape:
                raise CheckpointError(
                    f"parameter {name}: shape {v.shape} does not match {arr.shape}"
                )
            arr[...] = v.astype(arr.dtype)
        return self

    def _check_input(self, x):
        if x.ndim != 5:
            raise ShapeError(f"model input must be 5-axis, got ndim={x.ndim}")
        if x.shape[1] != self.cfg.input_channels:
            raise ShapeError(
                f"model input has {x.shape[1]} channels, expected {self.cfg.input_channels}",
                axis="channel",
            )
        div = 2 ** self.cfg.levels
        for ax, ext in zip(("depth", "height", "width"), x.shape[2:]):
            if ext % div:
                raise ShapeError(
                    f"input extent {ext} on axis {ax!r} is not divisible by 2^levels={div}",
                    axis=ax,
                )


class Uception(_ModelBase):
    """Inception-style blocks inside a U-net-shaped encoder-decoder.

    Per encoder level l: a DeepBlock (branch depth D * 2^l) whose output
    feeds the skip, then a ReductionBlock. The bottleneck is a DeepBlock at
    branch depth D * 2^L. Each decoder level upsamples, concatenates the
    saved skip and applies a DeepBlock at the encoder's branch depth.
    """

    kind = "uception"

    def __init__(self, cfg: UceptionCfg, dtype=np.float32):
        super().__init__(cfg, dtype)
        d, levels, r = cfg.base_depth, cfg.levels, cfg.dropout_rate
        self.stem = self._register(
            "stem", conv_unit("stem.conv", cfg.input_channels, d, 3,
                              dropout_rate=r, dtype=dtype))
        ch = d
        self.enc_deep, self.enc_red, self.skip_channels = [], [], []
        for lv in range(levels):
            bd = d * 2 ** lv
            deep = DeepBlock(f"enc{lv}.deep", DeepBlockCfg(ch, bd, r), dtype=dtype)
            self._register(f"enc{lv}.deep", deep)
            self.enc_deep.append(deep)
            ch = deep.cfg.out_channels
            self.skip_channels.append(ch)
            red = ReductionBlock(f"enc{lv}.red", ReductionBlockCfg(ch, bd, r), dtype=dtype)
            self._register(f"enc{lv}.red", red)
            self.enc_red.append(red)
            ch = red.cfg.out_channels
        self.bottleneck = DeepBlock(
            "bottleneck.deep", DeepBlockCfg(ch, d * 2 ** levels, r), dtype=dtype)
        self._register("bottleneck.deep", self.bottleneck)
        ch = self.bottleneck.cfg.out_channels
        self.dec_deep = []
        for lv in reversed(range(levels)):
            bd = d * 2 ** lv
            deep = DeepBlock(f"dec{lv}.deep",
                             DeepBlockCfg(ch + self.skip_channels[lv], bd, r), dtype=dtype)
            self._register(f"dec{lv}.deep", deep)
            self.dec_deep.append(deep)
            ch = deep.cfg.out_channels
        head_spec = ConvSpec(ch, cfg.output_channels, (1, 1, 1), (1, 1, 1), SAME)
        self.head = self._register("head", Conv3d("head.conv", head_spec, dtype=dtype))
        self.out_sigmoid = Sigmoid()

    def forward(self, x, ctx):
        """Returns (probability volume, cache). Cache feeds backward()."""
        x = np.asarray(x, dtype=self.dtype)
        self._check_input(x)
        h, c_stem = self.stem.forward(x, ctx)
        skips, enc_caches = [], []
        for deep, red in zip(self.enc_deep, self.enc_red):
            h, c_deep = deep.forward(h, ctx)
            skips.append(h)
            h, c_red = red.forward(h, ctx)
            enc_caches.append((c_deep, c_red))
        h, c_bott = self.bottleneck.forward(h, ctx)
        dec_caches = []
        for i, deep in enumerate(self.dec_deep):
            lv = self.cfg.levels - 1 - i
            up = h.repeat(2, axis=2).repeat(2, axis=3).repeat(2, axis=4)
            h = np.concatenate([up, skips[lv]], axis=1)
            h, c_deep = deep.forward(h, ctx)
            dec_caches.append((up.shape[1], c_deep))
        z, c_head = self.head.forward(h, ctx)
        y, c_sig = self.out_sigmoid.forward(z, ctx)
        return y, (c_stem, enc_caches, c_bott, dec_caches, c_head, c_sig)

    def backward(self, grad_out, cache, grads):
        c_stem, enc_caches, c_bott, dec_caches, c_head, c_sig = cache
        g = self.out_sigmoid.backward(grad_out, c_sig, grads)
        g = self.head.backward(g, c_head, grads)
        skip_grads = [None] * self.cfg.levels
        for i in reversed(range(len(self.dec_deep))):
            lv = self.cfg.levels - 1 - i
            up_ch, c_deep = dec_caches[i]
            g = self.dec_deep[i].backward(g, c_deep, grads)
            gu, skip_grads[lv] = g[:, :up_ch], g[:, up_ch:]
            n, c, d2, h2, w2 = gu.shape
            g = gu.reshape(n, c, d2 // 2, 2, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5, 7))
        g = self.bottleneck.backward(g, c_bott, grads)
        for lv in reversed(range(self.cfg.levels)):
            c_deep, c_red = enc_caches[lv]
            g = self.enc_red[lv].backward(g, c_red, grads)
            g = g + skip_grads[lv]
            g = self.enc_deep[lv].backward(g, c_deep, grads)
        return self.stem.backward(g, c_stem, grads)


class UNet3d(_ModelBase):
    """Plain 3D U-net: two 3-cube convolutions per level, 2-cube max-pool
    down, nearest upsample plus skip concat up, 1-cube sigmoid head."""

    kind = "unet3d"

    def __init__(self, cfg: UceptionCfg, width, bottleneck_width, dtype=np.float32):
        super().__init__(cfg, dtype)
        self.width = int(width)
        self.bottleneck_width = int(bottleneck_width)
        r = cfg.dropout_rate
        ch = cfg.input_channels
        self.enc, self.skip_channels = [], []
        for lv in range(cfg.levels):
            w = self.width * 2 ** lv
            pair = Chain([
                conv_unit(f"enc{lv}.conv_a", ch, w, 3, dropout_rate=r, dtype=dtype),
                conv_unit(f"enc{lv}.conv_b", w, w, 3, dropout_rate=r, dtype=dtype),
            ])
            self._register(f"enc{lv}", pair)
            self.enc.append(pair)
            self.skip_channels.append(w)
            ch = w
        self.bottleneck = Chain([
            conv_unit("bottleneck.conv_a", ch, self.bottleneck_width, 3,
                      dropout_rate=r, dtype=dtype),
            conv_unit("bottleneck.conv_b", self.bottleneck_width, self.bottleneck_width, 3,
                      dropout_rate=r, dtype=dtype),
        ])
        self._register("bottleneck", self.bottleneck)
        ch = self.bottleneck_width
        self.dec = []
        for lv in reversed(range(cfg.levels)):
            w = self.width * 2 ** lv
            pair = Chain([
                conv_unit(f"dec{lv}.conv_a", ch + self.skip_channels[lv], w, 3,
                          dropout_rate=r, dtype=dtype),
                conv_unit(f"dec{lv}.conv_b", w, w, 3, dropout_rate=r, dtype=dtype),
            ])
            self._register(f"dec{lv}", pair)
            self.dec.append(pair)
            ch = w
        head_spec = ConvSpec(ch, cfg.output_channels, (1, 1, 1), (1, 1, 1), SAME)
        self.head = self._register("head", Conv3d("head.conv", head_spec, dtype=dtype))
        self.out_sigmoid = Sigmoid()

    def forward(self, x, ctx):
        x = np.asarray(x, dtype=self.dtype)
        self._check_input(x)
        h = x
        skips, enc_caches, pool_caches = [], [], []
        for pair in self.enc:
            h, c = pair.forward(h, ctx)
            skips.append(h)
            enc_caches.append(c)
            h, argmax = ops.maxpool3d(h)
            pool_caches.append((argmax, skips[-1].shape))
        h, c_bott = self.bottleneck.forward(h, ctx)
        dec_caches = []
        for i, pair in enumerate(self.dec):
            lv = self.cfg.levels - 1 - i
            up = h.repeat(2, axis=2).repeat(2, axis=3).repeat(2, axis=4)
            h = np.concatenate([up, skips[lv]], axis=1)
            h, c = pair.forward(h, ctx)
            dec_caches.append((up.shape[1], c))
        z, c_head = self.head.forward(h, ctx)
        y, c_sig = self.out_sigmoid.forward(z, ctx)
        return y, (enc_caches, pool_caches, c_bott, dec_caches, c_head, c_sig)

    def backward(self, grad_out, cache, grads):
        enc_caches, pool_caches, c_bott, dec_caches, c_head, c_sig = cache
        g = self.out_sigmoid.backward(grad_out, c_sig, grads)
        g = self.head.backward(g, c_head, grads)
        skip_grads = [None] * self.cfg.levels
        for i in reversed(range(len(self.dec))):
            lv = self.cfg.levels - 1 - i
            up_ch, c = dec_caches[i]
            g = self.dec[i].backward(g, c, grads)
            gu, skip_grads[lv] = g[:, :up_ch], g[:, up_ch:]
            n, c2, d2, h2, w2 = gu.shape
            g = gu.reshape(n, c2, d2 // 2, 2, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5, 7))
        g = self.bottleneck.backward(g, c_bott, grads)
        for lv in reversed(range(self.cfg.levels)):
            argmax, in_shape = pool_caches[lv]
            g = ops.maxpool3d_backward(g, argmax, in_shape)
            g = g + skip_grads[lv]
            g = self.enc[lv].backward(g, enc_caches[lv], grads)
        return g


def build_uception(cfg: UceptionCfg, seed=0, dtype=np.float32):
    """Construct and He-initialize a Uception; same seed, same bits."""
    return Uception(cfg, dtype=dtype).init_params(seed)


def _unet_conv_geometry(cfg: UceptionCfg, width, bottleneck_width):
    """(kernel, in, out) for every conv a UNet3d of these widths would own."""
    specs = []
    ch = cfg.input_channels
    for lv in range(cfg.levels):
        w = width * 2 ** lv
        specs += [(3, ch, w), (3, w, w)]
        ch = w
    specs += [(3, ch, bottleneck_width), (3, bottleneck_width, bottleneck_width)]
    ch = bottleneck_width
    for lv in reversed(range(cfg.levels)):
        w = width * 2 ** lv
        specs += [(3, ch + w, w), (3, w, w)]
        ch = w
    specs += [(1, ch, cfg.output_channels)]
    return specs


def _conv_param_count(specs):
    return sum(k ** 3 * i * o + o for k, i, o in specs)


def match_unet_widths(cfg: UceptionCfg, target_params):
    """Pick (width, bottleneck_width) whose parameter count lands nearest
    the target; the bottleneck width is the fine-tuning knob."""
    best = None
    for w in range(1, 257):
        nominal = w * 2 ** cfg.levels
        lo = max(1, nominal // 2)
        hi = max(lo + 1, nominal * 2)
        for wb in range(lo, hi + 1):
            n = _conv_param_count(_unet_conv_geometry(cfg, w, wb))
            err = abs(n - target_params)
            if best is None or err < best[0]:
                best = (err, w, wb, n)
        if best is not None and best[3] > 4 * target_params:
            break
    _, w, wb, _ = best
    return w, wb


def build_unet3d_baseline(cfg: UceptionCfg, seed=0, dtype=np.float32):
    """3D U-net with widths auto-scaled to Uception's parameter count
    (within ten percent) for the same cfg."""
    target = Uception(cfg, dtype=np.float32).parameter_count()
    w, wb = match_unet_widths(cfg, target)
    return UNet3d(cfg, w, wb, dtype=dtype).init_params(seed)


def forward(model, x, mode="infer", seed=None):
    """Run a model on a batch; train mode is deterministic given seed."""
    ctx = Context(mode=mode, rng=None if seed is None else np.random.default_rng(seed))
    y, _ = model.forward(as_tensor5(x, dtype=model.dtype), ctx)
    return y


# ---------------------------------------------------------------------------
# checkpoint serialization


def _cfg_record(model):
    lines = [
        f"kind = {model.kind}",
        f"depth = {model.cfg.base_depth}",
        f"levels = {model.cfg.levels}",
        f"dropout = {model.cfg.dropout_rate!r}",
        f"in_channels = {model.cfg.input_channels}",
        f"out_channels = {model.cfg.output_channels}",
    ]
    if model.kind == "unet3d":
        lines.append(f"width = {model.width}")
        lines.append(f"bottleneck_width = {model.bottleneck_width}")
    return ("\n".join(lines) + "\n").encode("utf-8")


def _parse_cfg_record(blob):
    fields = {}
    for line in blob.decode("utf-8").splitlines():
        if not line.strip():
            continue
        if "=" not in line:
            raise CheckpointError(f"malformed config line {line!r}")
        key, _, value = line.partition("=")
        fields[key.strip()] = value.strip()
    try:
        kind = fields["kind"]
        cfg = UceptionCfg(
            base_depth=int(fields["depth"]),
            levels=int(fields["levels"]),
            dropout_rate=float(fields["dropout"]),
            input_channels=int(fields["in_channels"]),
            output_channels=int(fields["out_channels"]),
        )
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"bad checkpoint config record: {exc}") from exc
    return kind, cfg, fields


def save_checkpoint(model, path=None):
    """Serialize parameters as little-endian float32 in the UCPT layout."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    record = _cfg_record(model)
    buf.write(struct.pack("<I", len(record)))
    buf.write(record)
    params = model.parameters()
    buf.write(struct.pack("<I", len(params)))
    for name, arr in params.items():
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<I", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    blob = buf.getvalue()
    if path is not None:
        with open(path, "wb") as fh:
            fh.write(blob)
    return blob


def load_checkpoint(source, dtype=np.float32):
    """Rebuild the model a checkpoint describes and load its parameters."""
    if isinstance(source, bytes):
        blob = source
    else:
        with open(source, "rb") as fh:
            blob = fh.read()
    view = memoryview(blob)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("checkpoint truncated")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != CHECKPOINT_MAGIC:
        raise CheckpointError("not a UCPT checkpoint (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack("<I", take(4))
    kind, cfg, fields = _parse_cfg_record(bytes(take(cfg_len)))
    if kind == "uception":
        model = Uception(cfg, dtype=dtype)
    elif kind == "unet3d":
        try:
            model = UNet3d(cfg, int(fields["width"]), int(fields["bottleneck_width"]),
                           dtype=dtype)
        except KeyError as exc:
            raise CheckpointError("unet3d checkpoint missing width fields") from exc
    else:
        raise CheckpointError(f"unknown model kind {kind!r}")
    (n_params,) = struct.unpack("<I", take(4))
    values = {}
    for _ in range(n_params):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape)
        values[name] = data
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after last parameter")
    model.set_parameters(values)
    return model
