"""Convolutional encoder-decoder mapping one x-ray image to a density volume.

All layers are implemented directly on numpy arrays with hand-written
backward passes. Activations are dense float32 (batch, height, width,
channels); channels sit last so every convolution is one BLAS matrix
product, and the output volume's depth axis is carried as the channels of
the last layer. Kernels are stored (kh, kw, in_ch, out_ch).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, TopologyError
from .projector import XRayImage
from .volume import Volume

WEIGHTS_MAGIC = b"XNNW"
WEIGHTS_VERSION = 1
CONFIG_TENSOR = "_config"   # optional self-description record inside a weights file
_MAX_TENSOR = 2**28

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
STEM_CHANNELS = 16


@dataclass
class NetworkConfig:
    input_size: int = 64
    min_resolution: int = 8
    base_channels: int = 32
    out_depth: int = 32
    blocks_per_stage: int = 3

    def __post_init__(self):
        for name in ("input_size", "min_resolution"):
            v = getattr(self, name)
            if v < 1 or (v & (v - 1)) != 0:
                raise ValueError(f"{name} must be a power of two, got {v}")
        if self.input_size <= self.min_resolution:
            raise ValueError("input_size must exceed min_resolution")
        if self.out_depth < 1 or self.base_channels < 1 or self.blocks_per_stage < 1:
            raise ValueError("out_depth, base_channels, blocks_per_stage must be >= 1")

    @property
    def n_down(self) -> int:
        return int(np.log2(self.input_size // self.min_resolution))

    @property
    def output_size(self) -> int:
        return self.input_size // 2


def _check_4d(x: np.ndarray, name: str = "input") -> None:
    if x.ndim != 4:
        raise ValueError(f"{name} must be 4D (N,H,W,C), got shape {x.shape}")
    if x.shape[0] < 1:
        raise ValueError(f"{name} batch size must be >= 1")


def _im2col(x_pad: np.ndarray, k: int, stride: int) -> np.ndarray:
    """(N,H,W,C) padded input -> (N*OH*OW, k*k*C) patch matrix."""
    n, h, w, c = x_pad.shape
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    if k == 1 and stride == 1:
        return x_pad.reshape(n * h * w, c)
    sn, sh, sw, sc = x_pad.strides
    win = np.lib.stride_tricks.as_strided(
        x_pad, (n, oh, ow, k, k, c), (sn, sh * stride, sw * stride, sh, sw, sc))
    return win.reshape(n * oh * ow, k * k * c)


class Conv2d:
    """Cross-correlation with zero 'same' padding; stride 1 or 2, odd kernel."""

    def __init__(self, in_ch: int, out_ch: int, ksize: int = 3, stride: int = 1,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        if ksize % 2 != 1:
            raise ValueError(f"kernel size must be odd, got {ksize}")
        if stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {stride}")
        self.in_ch, self.out_ch, self.ksize, self.stride = in_ch, out_ch, ksize, stride
        self.pad = ksize // 2
        rng = rng or np.random.default_rng(0)
        scale = np.sqrt(2.0 / (in_ch * ksize * ksize))
        self.kernel = (rng.standard_normal((ksize, ksize, in_ch, out_ch))
                       * scale).astype(dtype)
        self.bias = np.zeros(out_ch, dtype=dtype)
        self.g_kernel = np.zeros_like(self.kernel)
        self.g_bias = np.zeros_like(self.bias)
        self._cols = None
        self._in_shape = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        _check_4d(x)
        if x.shape[3] != self.in_ch:
            raise ValueError(f"expected {self.in_ch} input channels, got {x.shape[3]}")
        p = self.pad
        x_pad = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x
        n, hp, wp, _ = x_pad.shape
        oh = (hp - self.ksize) // self.stride + 1
        ow = (wp - self.ksize) // self.stride + 1
        cols = _im2col(x_pad, self.ksize, self.stride)
        self._cols = cols
        self._in_shape = x.shape
        y = cols @ self.kernel.reshape(-1, self.out_ch)
        y += self.bias
        return y.reshape(n, oh, ow, self.out_ch)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        n, h, w, _ = self._in_shape
        _, oh, ow, _ = dy.shape
        k, s, p = self.ksize, self.stride, self.pad
        dy2 = dy.reshape(-1, self.out_ch)
        self.g_kernel = (self._cols.T @ dy2).reshape(self.kernel.shape)
        self.g_bias = dy2.sum(axis=0)
        self._cols = None
        if k == 1 and s == 1:
            return (dy2 @ self.kernel.reshape(self.in_ch, self.out_ch).T) \
                .reshape(n, h, w, self.in_ch)
        if s == 1:
            # gradient of a stride-1 conv is a full convolution with the
            # spatially flipped kernel, channels swapped
            wb = self.kernel[::-1, ::-1].transpose(0, 1, 3, 2) \
                .reshape(-1, self.in_ch)
            dy_pad = np.pad(dy, ((0, 0), (k - 1, k - 1), (k - 1, k - 1), (0, 0)))
            dxp = _im2col(dy_pad, k, 1) @ wb
            dxp = dxp.reshape(n, h + 2 * p, w + 2 * p, self.in_ch)
            return dxp[:, p:p + h, p:p + w] if p else dxp
        # stride 2: scatter column gradients back through the patch windows
        dcols = (dy2 @ self.kernel.reshape(-1, self.out_ch).T) \
            .reshape(n, oh, ow, k, k, self.in_ch)
        dx_pad = np.zeros((n, h + 2 * p, w + 2 * p, self.in_ch), dtype=dy.dtype)
        for u in range(k):
            for v in range(k):
                dx_pad[:, u:u + s * (oh - 1) + 1:s, v:v + s * (ow - 1) + 1:s] += \
                    dcols[:, :, :, u, v]
        return dx_pad[:, p:p + h, p:p + w] if p else dx_pad

    def params(self):
        return {"kernel": self.kernel, "bias": self.bias}

    def grads(self):
        return {"kernel": self.g_kernel, "bias": self.g_bias}


class Deconv2d:
    """Transposed convolution doubling spatial size (kernel 4, stride 2, pad 1).

    Its input gradient is the matching forward convolution, making the
    pair exact adjoints.
    """

    KSIZE = 4
    STRIDE = 2
    PAD = 1

    def __init__(self, in_ch: int, out_ch: int,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        self.in_ch, self.out_ch = in_ch, out_ch
        rng = rng or np.random.default_rng(0)
        scale = np.sqrt(2.0 / (in_ch * self.KSIZE * self.KSIZE))
        self.kernel = (rng.standard_normal((self.KSIZE, self.KSIZE, in_ch, out_ch))
                       * scale).astype(dtype)
        self.bias = np.zeros(out_ch, dtype=dtype)
        self.g_kernel = np.zeros_like(self.kernel)
        self.g_bias = np.zeros_like(self.bias)
        self._x = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        _check_4d(x)
        if x.shape[3] != self.in_ch:
            raise ValueError(f"expected {self.in_ch} input channels, got {x.shape[3]}")
        self._x = x
        n, h, w, _ = x.shape
        k, s, p = self.KSIZE, self.STRIDE, self.PAD
        x2 = x.reshape(-1, self.in_ch)
        buf = np.zeros((n, s * (h - 1) + k, s * (w - 1) + k, self.out_ch),
                       dtype=x.dtype)
        for u in range(k):
            for v in range(k):
                buf[:, u:u + s * (h - 1) + 1:s, v:v + s * (w - 1) + 1:s] += \
                    (x2 @ self.kernel[u, v]).reshape(n, h, w, self.out_ch)
        out = buf[:, p:p + s * h, p:p + s * w]
        out += self.bias
        return out

    def backward(self, dy: np.ndarray) -> np.ndarray:
        x = self._x
        self._x = None
        n, h, w, _ = x.shape
        k, s, p = self.KSIZE, self.STRIDE, self.PAD
        dbuf = np.zeros((n, s * (h - 1) + k, s * (w - 1) + k, self.out_ch),
                        dtype=dy.dtype)
        dbuf[:, p:p + s * h, p:p + s * w] = dy
        x2 = x.reshape(-1, self.in_ch)
        dx2 = np.zeros((n * h * w, self.in_ch), dtype=dy.dtype)
        g_kernel = np.zeros_like(self.kernel)
        for u in range(k):
            for v in range(k):
                sl = np.ascontiguousarray(
                    dbuf[:, u:u + s * (h - 1) + 1:s, v:v + s * (w - 1) + 1:s]) \
                    .reshape(-1, self.out_ch)
                dx2 += sl @ self.kernel[u, v].T
                g_kernel[u, v] = x2.T @ sl
        self.g_kernel = g_kernel
        self.g_bias = dy.sum(axis=(0, 1, 2))
        return dx2.reshape(x.shape)

    def params(self):
        return {"kernel": self.kernel, "bias": self.bias}

    def grads(self):
        return {"kernel": self.g_kernel, "bias": self.g_bias}


class BatchNorm2d:
    """Per-channel normalization; batch statistics while training, running at inference."""

    def __init__(self, ch: int, dtype=np.float32):
        self.ch = ch
        self.scale = np.ones(ch, dtype=dtype)
        self.shift = np.zeros(ch, dtype=dtype)
        self.running_mean = np.zeros(ch, dtype=dtype)
        self.running_var = np.ones(ch, dtype=dtype)
        self.g_scale = np.zeros_like(self.scale)
        self.g_shift = np.zeros_like(self.shift)
        self._cache = None

    def forward(self, x: np.ndarray, training: bool) -> np.ndarray:
        _check_4d(x)
        if x.shape[3] != self.ch:
            raise ValueError(f"expected {self.ch} channels, got {x.shape[3]}")
        if training:
            x2 = x.reshape(-1, self.ch)
            mean = x2.mean(axis=0)
            var = x2.var(axis=0)
            self.running_mean = (BN_MOMENTUM * self.running_mean
                                 + (1.0 - BN_MOMENTUM) * mean).astype(x.dtype)
            self.running_var = (BN_MOMENTUM * self.running_var
                                + (1.0 - BN_MOMENTUM) * var).astype(x.dtype)
        else:
            mean = self.running_mean
            var = self.running_var
        inv_std = (1.0 / np.sqrt(var + BN_EPS)).astype(x.dtype)
        xhat = (x - mean) * inv_std
        self._cache = (xhat, inv_std, training)
        return self.scale * xhat + self.shift

    def backward(self, dy: np.ndarray) -> np.ndarray:
        xhat, inv_std, training = self._cache
        self._cache = None
        dy2 = dy.reshape(-1, self.ch)
        xhat2 = xhat.reshape(-1, self.ch)
        self.g_scale = (dy2 * xhat2).sum(axis=0)
        self.g_shift = dy2.sum(axis=0)
        if not training:
            return dy * (self.scale * inv_std)
        m = dy2.shape[0]
        dxhat = dy * self.scale
        s1 = dxhat.reshape(-1, self.ch).sum(axis=0)
        s2 = (dxhat.reshape(-1, self.ch) * xhat2).sum(axis=0)
        return (dxhat - s1 / m - xhat * (s2 / m)) * inv_std

    def params(self):
        return {"scale": self.scale, "shift": self.shift}

    def grads(self):
        return {"scale": self.g_scale, "shift": self.g_shift}

    def stats(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}


class ReLU:
    def __init__(self):
        self._mask = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._mask = x > 0
        return x * self._mask

    def backward(self, dy: np.ndarray) -> np.ndarray:
        mask = self._mask
        self._mask = None
        return dy * mask


class BasicBlock:
    """conv -> batch norm -> ReLU"""

    def __init__(self, in_ch, out_ch, stride=1, ksize=3, rng=None, dtype=np.float32):
        self.conv = Conv2d(in_ch, out_ch, ksize, stride, rng, dtype)
        self.bn = BatchNorm2d(out_ch, dtype)
        self.relu = ReLU()

    def forward(self, x, training):
        return self.relu.forward(self.bn.forward(self.conv.forward(x), training))

    def backward(self, dy):
        return self.conv.backward(self.bn.backward(self.relu.backward(dy)))


class Residual3Block:
    """Three basic blocks plus an identity shortcut."""

    def __init__(self, ch, rng=None, dtype=np.float32):
        self.ch = ch
        self.blocks = [BasicBlock(ch, ch, 1, 3, rng, dtype) for _ in range(3)]

    def forward(self, x, training):
        if x.shape[3] != self.ch:
            raise ValueError(
                f"residual shortcut needs {self.ch} channels, got {x.shape[3]}")
        h = x
        for b in self.blocks:
            h = b.forward(h, training)
        return h + x

    def backward(self, dy):
        dh = dy
        for b in reversed(self.blocks):
            dh = b.backward(dh)
        return dh + dy


class Net:
    """Encoder-decoder with skip concatenation.

    Stem of basic blocks at full resolution; each encoder stage halves
    resolution (strided basic block) and applies a residual block; each
    decoder stage doubles resolution (deconv), concatenates the encoder
    features of that resolution, fuses them with a 1x1 convolution and
    applies a residual block. The head is a residual block plus a linear
    1x1 convolution whose channels are the output volume's depth slices.
    """

    def __init__(self, cfg: NetworkConfig, rng: np.random.Generator | None = None,
                 dtype=np.float32):
        self.cfg = cfg
        rng = rng or np.random.default_rng(0)
        self.dtype = dtype

        ch = STEM_CHANNELS
        self.stem = [BasicBlock(1, ch, 1, 3, rng, dtype)]
        self.stem += [BasicBlock(ch, ch, 1, 3, rng, dtype)
                      for _ in range(cfg.blocks_per_stage - 1)]

        self.enc = []
        self.enc_channels = []
        for _ in range(cfg.n_down):
            nxt = min(ch * 2, cfg.base_channels)
            self.enc.append({
                "down": BasicBlock(ch, nxt, 2, 3, rng, dtype),
                "res": Residual3Block(nxt, rng, dtype),
            })
            ch = nxt
            self.enc_channels.append(ch)

        self.dec = []
        for i in range(cfg.n_down - 1):
            skip_ch = self.enc_channels[cfg.n_down - 2 - i]
            self.dec.append({
                "up": Deconv2d(ch, ch, rng, dtype),
                "fuse": Conv2d(ch + skip_ch, ch, 1, 1, rng, dtype),
                "res": Residual3Block(ch, rng, dtype),
            })

        self.head_res = Residual3Block(ch, rng, dtype)
        self.head_out = Conv2d(ch, cfg.out_depth, 1, 1, rng, dtype)
        self._skips = None

    # --- execution ---

    def forward(self, x: np.ndarray, training: bool) -> np.ndarray:
        """(N, input_size, input_size, 1) -> (N, input_size/2, input_size/2, out_depth)"""
        _check_4d(x)
        if x.shape[3] != 1 or x.shape[1] != self.cfg.input_size \
                or x.shape[2] != self.cfg.input_size:
            raise ValueError(
                f"expected (N,{self.cfg.input_size},{self.cfg.input_size},1) input, "
                f"got {x.shape}")
        h = x.astype(self.dtype, copy=False)
        for b in self.stem:
            h = b.forward(h, training)
        skips = []
        for stage in self.enc:
            h = stage["res"].forward(stage["down"].forward(h, training), training)
            skips.append(h)
        self._skips = skips
        for i, stage in enumerate(self.dec):
            h = stage["up"].forward(h)
            s = skips[self.cfg.n_down - 2 - i]
            h = np.concatenate([h, s], axis=3)
            h = stage["res"].forward(stage["fuse"].forward(h), training)
        h = self.head_res.forward(h, training)
        return self.head_out.forward(h)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        dh = self.head_res.backward(self.head_out.backward(dy))
        dskips = [None] * self.cfg.n_down
        for i in range(len(self.dec) - 1, -1, -1):
            stage = self.dec[i]
            d = stage["fuse"].backward(stage["res"].backward(dh))
            cur = stage["up"].out_ch
            level = self.cfg.n_down - 2 - i
            dskip = d[:, :, :, cur:]
            dskips[level] = dskip if dskips[level] is None else dskips[level] + dskip
            dh = stage["up"].backward(np.ascontiguousarray(d[:, :, :, :cur]))
        for level in range(self.cfg.n_down - 1, -1, -1):
            if dskips[level] is not None:
                dh = dh + dskips[level]
            stage = self.enc[level]
            dh = stage["down"].backward(stage["res"].backward(dh))
        for b in reversed(self.stem):
            dh = b.backward(dh)
        self._skips = None
        return dh

    # --- parameter plumbing ---

    def _modules(self):
        for i, b in enumerate(self.stem):
            yield f"stem.{i}", b
        for li, stage in enumerate(self.enc, start=1):
            yield f"enc{li}.down", stage["down"]
            for j, b in enumerate(stage["res"].blocks):
                yield f"enc{li}.res.{j}", b
        for li, stage in enumerate(self.dec, start=1):
            yield f"dec{li}.up", stage["up"]
            yield f"dec{li}.fuse", stage["fuse"]
            for j, b in enumerate(stage["res"].blocks):
                yield f"dec{li}.res.{j}", b
        for j, b in enumerate(self.head_res.blocks):
            yield f"head.res.{j}", b
        yield "head.out", self.head_out

    def _leaf_layers(self):
        for name, mod in self._modules():
            if isinstance(mod, BasicBlock):
                yield f"{name}.conv", mod.conv
                yield f"{name}.bn", mod.bn
            else:
                yield name, mod

    def relu_layers(self) -> list[ReLU]:
        return [mod.relu for _, mod in self._modules()
                if isinstance(mod, BasicBlock)]

    def named_params(self) -> dict[str, np.ndarray]:
        """Trainable tensors only, in topology order."""
        out = {}
        for lname, layer in self._leaf_layers():
            for pname, arr in layer.params().items():
                out[f"{lname}.{pname}"] = arr
        return out

    def named_grads(self) -> dict[str, np.ndarray]:
        out = {}
        for lname, layer in self._leaf_layers():
            for pname, arr in layer.grads().items():
                out[f"{lname}.{pname}"] = arr
        return out

    def set_param(self, name: str, value: np.ndarray) -> None:
        lname, pname = name.rsplit(".", 1)
        for ln, layer in self._leaf_layers():
            if ln == lname:
                cur = getattr(layer, pname)
                if cur.shape != value.shape:
                    raise TopologyError(
                        f"layer {name}: expected shape {cur.shape}, got {value.shape}")
                setattr(layer, pname, value.astype(cur.dtype))
                return
        raise TopologyError(f"no such layer tensor: {name}")

    def state_dict(self) -> dict[str, np.ndarray]:
        """All persistent tensors: kernels, biases, BN scale/shift/running stats."""
        out = {}
        for lname, layer in self._leaf_layers():
            for pname, arr in layer.params().items():
                out[f"{lname}.{pname}"] = arr
            if isinstance(layer, BatchNorm2d):
                for pname, arr in layer.stats().items():
                    out[f"{lname}.{pname}"] = arr
        return out

    def load_state_dict(self, weights: dict[str, np.ndarray]) -> None:
        expected = self.state_dict()
        for name in expected:
            if name not in weights:
                raise TopologyError(f"missing tensor for layer {name}")
            if tuple(weights[name].shape) != tuple(expected[name].shape):
                raise TopologyError(
                    f"layer {name}: expected shape {tuple(expected[name].shape)}, "
                    f"got {tuple(weights[name].shape)}")
        extra = [n for n in weights
                 if n not in expected and not n.startswith("_")]
        if extra:
            raise TopologyError(f"unexpected tensor {extra[0]}")
        for lname, layer in self._leaf_layers():
            for pname in layer.params():
                setattr(layer, pname,
                        weights[f"{lname}.{pname}"].astype(self.dtype).copy())
            if isinstance(layer, BatchNorm2d):
                for pname in layer.stats():
                    setattr(layer, pname,
                            weights[f"{lname}.{pname}"].astype(self.dtype).copy())


def volume_to_target(v: Volume) -> np.ndarray:
    """(nz, ny, nx) volume -> (ny, nx, nz) training target (depth as channels)."""
    return np.moveaxis(v.data, 0, -1)


def output_to_volume(out: np.ndarray, clamp: bool = True) -> Volume:
    """(H, W, out_depth) network output -> Volume, clamped to [0,1] at export."""
    data = np.moveaxis(out, -1, 0)
    if clamp:
        data = np.clip(data, 0.0, 1.0)
    return Volume(data.astype(np.float32))


def config_to_record(cfg: NetworkConfig) -> np.ndarray:
    return np.array([cfg.input_size, cfg.min_resolution, cfg.base_channels,
                     cfg.out_depth, cfg.blocks_per_stage], dtype=np.float32)


def config_from_record(rec: np.ndarray) -> NetworkConfig:
    vals = [int(round(float(v))) for v in np.asarray(rec).ravel()]
    if len(vals) != 5:
        raise TopologyError(f"config record must have 5 entries, got {len(vals)}")
    return NetworkConfig(*vals)


def save_weights(weights: dict[str, np.ndarray], path) -> None:
    """Write the .xnnw named-tensor container (bit-exact round trip)."""
    with open(path, "wb") as f:
        f.write(WEIGHTS_MAGIC)
        f.write(struct.pack("<II", WEIGHTS_VERSION, len(weights)))
        for name, arr in weights.items():
            raw = name.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise ValueError(f"tensor name too long: {name[:32]}...")
            a = np.ascontiguousarray(arr, dtype="<f4")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<B", a.ndim))
            f.write(struct.pack(f"<{a.ndim}I", *a.shape))
            f.write(a.tobytes())


def load_weights(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != WEIGHTS_MAGIC:
        raise FormatError(f"{path}: bad magic at offset 0, expected {WEIGHTS_MAGIC!r}")
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated header at offset {len(raw)}")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != WEIGHTS_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at offset 4")
    off = 12
    weights: dict[str, np.ndarray] = {}
    for _ in range(count):
        if off + 2 > len(raw):
            raise FormatError(f"{path}: truncated tensor header at offset {off}")
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        if off + nlen + 1 > len(raw):
            raise FormatError(f"{path}: truncated tensor name at offset {off}")
        name = raw[off:off + nlen].decode("utf-8")
        off += nlen
        rank = raw[off]
        off += 1
        if off + 4 * rank > len(raw):
            raise FormatError(f"{path}: truncated dims of '{name}' at offset {off}")
        dims = struct.unpack_from(f"<{rank}I", raw, off) if rank else ()
        off += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        if size > _MAX_TENSOR or min(dims, default=1) == 0:
            raise FormatError(f"{path}: bad dims {dims} of '{name}' at offset {off}")
        nbytes = 4 * size
        if off + nbytes > len(raw):
            raise FormatError(f"{path}: truncated payload of '{name}' at offset {off}")
        weights[name] = np.frombuffer(raw, "<f4", count=size, offset=off) \
            .reshape(dims).copy()
        off += nbytes
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes at offset {off}")
    return weights


def net_from_weights(weights: dict[str, np.ndarray],
                     cfg: NetworkConfig | None = None) -> Net:
    """Instantiate a network from a loaded tensor map.

    If cfg is omitted the file must carry the '_config' record written by
    training.
    """
    if cfg is None:
        if CONFIG_TENSOR not in weights:
            raise TopologyError(
                f"weights carry no '{CONFIG_TENSOR}' record; pass a NetworkConfig")
        cfg = config_from_record(weights[CONFIG_TENSOR])
    net = Net(cfg)
    net.load_state_dict(weights)
    return net


def network_forward(image: XRayImage, cfg: NetworkConfig,
                    weights: dict[str, np.ndarray] | Net,
                    mode: str = "infer") -> Volume:
    """Run the network on one image; output densities are clamped to [0,1]."""
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    if image.data.shape != (cfg.input_size, cfg.input_size):
        raise ValueError(
            f"image must be {cfg.input_size}x{cfg.input_size}, got {image.data.shape}")
    net = weights if isinstance(weights, Net) else net_from_weights(weights, cfg)
    x = image.data[None, :, :, None].astype(net.dtype)
    out = net.forward(x, training=(mode == "train"))
    return output_to_volume(out[0])


def loss_l2(prediction, target) -> float:
    """Mean squared element difference."""
    a = prediction.data if isinstance(prediction, Volume) else np.asarray(prediction)
    b = target.data if isinstance(target, Volume) else np.asarray(target)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    d = a.astype(np.float64) - b.astype(np.float64)
    return float(np.mean(d * d))


def loss_l2_grad(prediction: np.ndarray, target: np.ndarray) -> np.ndarray:
    """d(loss_l2)/d(prediction) = 2 (prediction - target) / N."""
    if prediction.shape != target.shape:
        raise ValueError(f"shape mismatch: {prediction.shape} vs {target.shape}")
    return (2.0 / prediction.size) * (prediction - target)
