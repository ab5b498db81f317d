"""Two-block volumetric encoder-decoder ("W" topology) with hand-written backward rules.

Tensors flow as plain numpy arrays shaped ``(batch, channels, z, y, x)``.
Every layer implements its own gradient rule; there is no autodiff framework
underneath, which keeps the arithmetic auditable against finite differences.

Block 1 maps the image to an initial soft segmentation. Block 2 sees the
image, that initial segmentation and the two-point attraction map as three
input channels and produces the corrected segmentation. Both blocks share
one shape recipe: ``depth`` stride-2 convolutions whose widths double per
level, then nearest-neighbor upsampling with skip concatenations back up,
and a final 1-channel convolution + sigmoid that also sees the raw block
input via the top-level skip.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import _kernels
from . import field as field_mod
from . import loss as loss_mod
from .volgrid import ScalarVolume, SoftMask, VolumeGeometry

BN_EPS = 1e-5
BN_MOMENTUM = 0.9  # fraction of the old running statistic kept per batch


@dataclass(frozen=True)
class WNetConfig:
    """Toy-scale shape knobs. input_side must be divisible by 2**depth."""

    input_side: int = 32
    base_filters: int = 8
    depth: int = 3
    block2_extra_inputs: int = 2  # initial segmentation + weight map, fixed

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.base_filters < 1:
            raise ValueError("base_filters must be >= 1")
        side = self.input_side
        if side < 2 or side % (2 ** self.depth) != 0:
            raise ValueError(
                f"input_side {side} must be divisible by 2**depth = {2 ** self.depth}"
            )
        if self.block2_extra_inputs != 2:
            raise ValueError("block 2 takes exactly image + initial segmentation + weight map")

    def level_filters(self) -> list[int]:
        return [self.base_filters * (2 ** i) for i in range(self.depth)]


class Parameter:
    """A learnable array with an accumulating gradient slot."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)

    def zero_grad(self):
        self.grad[...] = 0.0


def _he_normal(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    std = math.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(dtype)


def _pad1(x: np.ndarray) -> np.ndarray:
    return np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))


def _vol2col(xp: np.ndarray, stride: int, out_sp) -> np.ndarray:
    """Gather 3x3x3 windows of the padded input into (B, C*27, N) for one matmul."""
    b, c = xp.shape[:2]
    od, oh, ow = out_sp
    col = np.empty((b, c, 27, od, oh, ow), dtype=xp.dtype)
    if _kernels.HAVE_NUMBA:
        _kernels.vol2col(xp, stride, col)
        return col.reshape(b, c * 27, od * oh * ow)
    k = 0
    for kz in range(3):
        for ky in range(3):
            for kx in range(3):
                col[:, :, k] = xp[
                    :, :,
                    kz:kz + stride * od:stride,
                    ky:ky + stride * oh:stride,
                    kx:kx + stride * ow:stride,
                ]
                k += 1
    return col.reshape(b, c * 27, od * oh * ow)


def _col2im(dcol: np.ndarray, in_sp, stride: int, out_sp, channels: int) -> np.ndarray:
    """Adjoint of _vol2col: scatter-add window gradients back onto the padded grid."""
    b = dcol.shape[0]
    od, oh, ow = out_sp
    d6 = dcol.reshape(b, channels, 27, od, oh, ow)
    padded = np.zeros((b, channels, in_sp[0] + 2, in_sp[1] + 2, in_sp[2] + 2), dtype=dcol.dtype)
    if _kernels.HAVE_NUMBA:
        _kernels.col2im(d6, stride, padded)
        return padded[:, :, 1:-1, 1:-1, 1:-1]
    k = 0
    for kz in range(3):
        for ky in range(3):
            for kx in range(3):
                padded[
                    :, :,
                    kz:kz + stride * od:stride,
                    ky:ky + stride * oh:stride,
                    kx:kx + stride * ow:stride,
                ] += d6[:, :, k]
                k += 1
    return padded[:, :, 1:-1, 1:-1, 1:-1]


class Conv3d:
    """3x3x3 same-padding convolution, stride 1 or 2 (stride 2 halves even sides)."""

    def __init__(self, name: str, in_ch: int, out_ch: int, stride: int,
                 rng: np.random.Generator, dtype=np.float32):
        if stride not in (1, 2):
            raise ValueError("stride must be 1 or 2")
        self.name = name
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.stride = stride
        self.weight = Parameter(f"{name}.weight",
                                _he_normal(rng, (out_ch, in_ch, 3, 3, 3), in_ch * 27, dtype))
        self.bias = Parameter(f"{name}.bias", np.zeros(out_ch, dtype=dtype))
        self._cache = None

    def parameters(self):
        return [self.weight, self.bias]

    def state(self):
        return [(self.weight.name, self.weight.value), (self.bias.name, self.bias.value)]

    def out_shape(self, in_sp):
        if self.stride == 1:
            return tuple(in_sp)
        if any(s % 2 for s in in_sp):
            raise ValueError(f"stride-2 conv needs even spatial dims, got {in_sp}")
        return tuple(s // 2 for s in in_sp)

    def forward(self, x: np.ndarray, cache: bool = True) -> np.ndarray:
        if x.shape[1] != self.in_ch:
            raise ValueError(f"{self.name}: expected {self.in_ch} input channels, got {x.shape[1]}")
        if min(x.shape[2:]) < 2:
            raise ValueError(f"{self.name}: spatial dims too small for a 3x3x3 window: {x.shape[2:]}")
        in_sp = x.shape[2:]
        out_sp = self.out_shape(in_sp)
        if self.out_ch == 1:
            return self._forward_direct(x, in_sp, out_sp, cache)
        col = _vol2col(_pad1(x), self.stride, out_sp)
        w2 = self.weight.value.reshape(self.out_ch, self.in_ch * 27)
        y = np.matmul(w2, col) + self.bias.value[None, :, None]
        y = y.reshape(x.shape[0], self.out_ch, *out_sp)
        if cache:
            self._cache = ("col", col, in_sp, out_sp)
        else:
            self._cache = None
        return y

    def _tap(self, xp: np.ndarray, k: int, out_sp):
        """Strided view of the padded input seen by kernel tap k."""
        kz, ky, kx = k // 9, (k // 3) % 3, k % 3
        s = self.stride
        return xp[:, :,
                  kz:kz + s * out_sp[0]:s,
                  ky:ky + s * out_sp[1]:s,
                  kx:kx + s * out_sp[2]:s]

    def _forward_direct(self, x, in_sp, out_sp, cache):
        # single output channel: 27*C shift-multiply-accumulates beat a 27x
        # im2col blow-up (the input stays cache-resident across taps)
        xp = _pad1(x)
        b = x.shape[0]
        w = self.weight.value[0]
        y = np.empty((b, 1) + tuple(out_sp), dtype=w.dtype)
        if _kernels.HAVE_NUMBA:
            _kernels.conv1_fwd(xp, w, w.dtype.type(self.bias.value[0]),
                               self.stride, y[:, 0])
        else:
            y[...] = self.bias.value[0]
            acc = y[:, 0]
            for k in range(27):
                tap = self._tap(xp, k, out_sp)
                for c in range(self.in_ch):
                    acc += w[c, k // 9, (k // 3) % 3, k % 3] * tap[:, c]
        if cache:
            self._cache = ("direct", xp, in_sp, out_sp)
        else:
            self._cache = None
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        kind = self._cache[0]
        if kind == "direct":
            return self._backward_direct(dy)
        _, col, in_sp, out_sp = self._cache
        b = dy.shape[0]
        dyf = dy.reshape(b, self.out_ch, -1)
        self.weight.grad += np.matmul(dyf, col.transpose(0, 2, 1)).sum(axis=0).reshape(
            self.weight.value.shape
        )
        self.bias.grad += dyf.sum(axis=(0, 2))
        w2 = self.weight.value.reshape(self.out_ch, self.in_ch * 27)
        dcol = np.matmul(w2.T, dyf)
        return _col2im(dcol, in_sp, self.stride, out_sp, self.in_ch)

    def _backward_direct(self, dy: np.ndarray) -> np.ndarray:
        _, xp, in_sp, out_sp = self._cache
        d = np.ascontiguousarray(dy[:, 0])
        self.bias.grad[0] += d.sum()
        w = self.weight.value[0]
        dxp = np.zeros_like(xp)
        if _kernels.HAVE_NUMBA:
            dw = np.zeros_like(w)
            _kernels.conv1_bwd(xp, w, d, self.stride, dxp, dw)
            self.weight.grad[0] += dw
        else:
            dw = self.weight.grad[0]
            for k in range(27):
                kz, ky, kx = k // 9, (k // 3) % 3, k % 3
                tap = self._tap(xp, k, out_sp)
                dtap = self._tap(dxp, k, out_sp)
                for c in range(self.in_ch):
                    dw[c, kz, ky, kx] += np.einsum("bijk,bijk->", d, tap[:, c])
                    dtap[:, c] += w[c, kz, ky, kx] * d
        return dxp[:, :, 1:-1, 1:-1, 1:-1]


class BatchNormReLU:
    """Per-channel batch normalization followed by ReLU.

    Train mode normalizes with batch statistics over (batch, z, y, x) and
    blends them into running estimates; eval mode uses the running estimates
    and is deterministic and batch-independent.
    """

    def __init__(self, name: str, channels: int, dtype=np.float32):
        self.name = name
        self.channels = channels
        self.gamma = Parameter(f"{name}.gamma", np.ones(channels, dtype=dtype))
        self.beta = Parameter(f"{name}.beta", np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self._cache = None

    def parameters(self):
        return [self.gamma, self.beta]

    def state(self):
        return [
            (self.gamma.name, self.gamma.value),
            (self.beta.name, self.beta.value),
            (f"{self.name}.running_mean", self.running_mean),
            (f"{self.name}.running_var", self.running_var),
        ]

    def forward(self, x: np.ndarray, train: bool, cache: bool = True) -> np.ndarray:
        if x.shape[0] < 1:
            raise ValueError("batch size must be >= 1")
        if x.shape[1] != self.channels:
            raise ValueError(f"{self.name}: expected {self.channels} channels, got {x.shape[1]}")
        axes = (0, 2, 3, 4)
        if train:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            self.running_mean[...] = BN_MOMENTUM * self.running_mean + (1 - BN_MOMENTUM) * mean
            self.running_var[...] = BN_MOMENTUM * self.running_var + (1 - BN_MOMENTUM) * var
        else:
            mean = self.running_mean
            var = self.running_var
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (x - mean[None, :, None, None, None]) * inv_std[None, :, None, None, None]
        y = self.gamma.value[None, :, None, None, None] * xhat + self.beta.value[None, :, None, None, None]
        out = np.maximum(y, 0.0)
        if cache:
            self._cache = (xhat, inv_std, y > 0.0, train)
        else:
            self._cache = None
        return out

    def backward(self, dout: np.ndarray) -> np.ndarray:
        xhat, inv_std, relu_mask, train = self._cache
        dy = dout * relu_mask
        axes = (0, 2, 3, 4)
        self.gamma.grad += (dy * xhat).sum(axis=axes)
        self.beta.grad += dy.sum(axis=axes)
        g = self.gamma.value[None, :, None, None, None]
        dxhat = dy * g
        if not train:
            return dxhat * inv_std[None, :, None, None, None]
        n = dy.shape[0] * dy.shape[2] * dy.shape[3] * dy.shape[4]
        sum_dxhat = dxhat.sum(axis=axes, keepdims=True)
        sum_dxhat_xhat = (dxhat * xhat).sum(axis=axes, keepdims=True)
        return (inv_std[None, :, None, None, None] / n) * (
            n * dxhat - sum_dxhat - xhat * sum_dxhat_xhat
        )


def upsample_nn(x: np.ndarray) -> np.ndarray:
    """Replicate every voxel into a 2x2x2 block."""
    b, c, d, h, w = x.shape
    expanded = np.broadcast_to(
        x[:, :, :, None, :, None, :, None], (b, c, d, 2, h, 2, w, 2)
    )
    return expanded.reshape(b, c, 2 * d, 2 * h, 2 * w)


def upsample_nn_backward(dy: np.ndarray) -> np.ndarray:
    """Adjoint of nearest-neighbor upsampling: sum each 2x2x2 block of child gradients."""
    b, c, d, h, w = dy.shape
    return dy.reshape(b, c, d // 2, 2, h // 2, 2, w // 2, 2).sum(axis=(3, 5, 7))


def avgpool2(x: np.ndarray) -> np.ndarray:
    """Stride-2 average pooling; test-only helper that inverts upsample_nn."""
    b, c, d, h, w = x.shape
    return x.reshape(b, c, d // 2, 2, h // 2, 2, w // 2, 2).mean(axis=(3, 5, 7))


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"cannot concat {a.shape} with {b.shape}")
    return np.concatenate([a, b], axis=1)


def split_channels(d: np.ndarray, first_ch: int) -> tuple[np.ndarray, np.ndarray]:
    return d[:, :first_ch], d[:, first_ch:]


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class SigmoidHead:
    """Final 3x3x3 convolution to one channel, squashed through a sigmoid."""

    def __init__(self, name: str, in_ch: int, rng: np.random.Generator, dtype=np.float32):
        self.conv = Conv3d(name, in_ch, 1, stride=1, rng=rng, dtype=dtype)
        self._sig = None

    def parameters(self):
        return self.conv.parameters()

    def state(self):
        return self.conv.state()

    def forward(self, x: np.ndarray, cache: bool = True) -> np.ndarray:
        s = _sigmoid(self.conv.forward(x, cache=cache))
        self._sig = s if cache else None
        return s

    def backward(self, dy: np.ndarray) -> np.ndarray:
        dz = dy * self._sig * (1.0 - self._sig)
        return self.conv.backward(dz)


class WBlock:
    """One encoder-decoder block of the W."""

    def __init__(self, name: str, in_ch: int, config: WNetConfig,
                 rng: np.random.Generator, dtype=np.float32):
        self.name = name
        self.in_ch = in_ch
        self.config = config
        filters = config.level_filters()
        self.enc: list[tuple[Conv3d, BatchNormReLU]] = []
        prev = in_ch
        for i, f in enumerate(filters):
            conv = Conv3d(f"{name}.enc{i}.conv", prev, f, stride=2, rng=rng, dtype=dtype)
            bn = BatchNormReLU(f"{name}.enc{i}.bn", f, dtype=dtype)
            self.enc.append((conv, bn))
            prev = f
        self.dec: list[tuple[Conv3d, BatchNormReLU]] = []
        for i in range(config.depth - 2, -1, -1):
            conv = Conv3d(f"{name}.dec{i}.conv", filters[i + 1] + filters[i], filters[i],
                          stride=1, rng=rng, dtype=dtype)
            bn = BatchNormReLU(f"{name}.dec{i}.bn", filters[i], dtype=dtype)
            self.dec.append((conv, bn))
        self.head = SigmoidHead(f"{name}.head", filters[0] + in_ch, rng=rng, dtype=dtype)
        self._skip_grads = None

    def parameters(self):
        out = []
        for conv, bn in self.enc:
            out += conv.parameters() + bn.parameters()
        for conv, bn in self.dec:
            out += conv.parameters() + bn.parameters()
        out += self.head.parameters()
        return out

    def state(self):
        out = []
        for conv, bn in self.enc:
            out += conv.state() + bn.state()
        for conv, bn in self.dec:
            out += conv.state() + bn.state()
        out += self.head.state()
        return out

    def forward(self, x: np.ndarray, train: bool, cache: bool = True) -> np.ndarray:
        skips = []
        h = x
        for conv, bn in self.enc:
            h = bn.forward(conv.forward(h, cache=cache), train, cache=cache)
            skips.append(h)
        for (conv, bn), level in zip(self.dec, range(self.config.depth - 2, -1, -1)):
            h = concat_channels(upsample_nn(h), skips[level])
            h = bn.forward(conv.forward(h, cache=cache), train, cache=cache)
        h = concat_channels(upsample_nn(h), x)
        return self.head.forward(h, cache=cache)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        """Propagate the output gradient back to the block input; accumulates parameter grads."""
        filters = self.config.level_filters()
        dcat = self.head.backward(dy)
        dh, dx_total = split_channels(dcat, filters[0])
        dh = upsample_nn_backward(dh)
        dskips = [None] * self.config.depth
        for (conv, bn), level in zip(reversed(self.dec), range(0, self.config.depth - 1)):
            dcat = conv.backward(bn.backward(dh))
            dup, dskip = split_channels(dcat, filters[level + 1])
            dskips[level] = dskip
            dh = upsample_nn_backward(dup)
        for i in range(self.config.depth - 1, -1, -1):
            if dskips[i] is not None:
                dh = dh + dskips[i]
            conv, bn = self.enc[i]
            dh = conv.backward(bn.backward(dh))
        return dx_total + dh


class WNet:
    """The full two-block network: automatic segmentation plus point-guided correction."""

    def __init__(self, config: WNetConfig | None = None, seed: int = 0, dtype=np.float32):
        self.config = config or WNetConfig()
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.block1 = WBlock("block1", 1, self.config, rng, dtype=self.dtype)
        self.block2 = WBlock("block2", 1 + self.config.block2_extra_inputs, self.config,
                             rng, dtype=self.dtype)

    # --- parameter plumbing ---------------------------------------------

    def parameters(self, block: str | None = None):
        if block == "block1":
            return self.block1.parameters()
        if block == "block2":
            return self.block2.parameters()
        return self.block1.parameters() + self.block2.parameters()

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def parameter_count(self) -> int:
        return sum(p.value.size for p in self.parameters())

    def state(self):
        return self.block1.state() + self.block2.state()

    # --- raw batched forward/backward -------------------------------------

    def _check_side(self, x: np.ndarray):
        side = self.config.input_side
        if x.shape[2:] != (side, side, side):
            raise ValueError(f"expected spatial dims {(side,) * 3}, got {x.shape[2:]}")

    def run_block1(self, x: np.ndarray, train: bool = False, cache: bool = False) -> np.ndarray:
        self._check_side(x)
        return self.block1.forward(x.astype(self.dtype, copy=False), train, cache=cache)

    def run_block2(self, x: np.ndarray, initial: np.ndarray, weight_map: np.ndarray,
                   train: bool = False, cache: bool = False) -> np.ndarray:
        stacked = concat_channels(concat_channels(x, initial), weight_map)
        self._check_side(stacked)
        return self.block2.forward(stacked.astype(self.dtype, copy=False), train, cache=cache)

    # --- domain-level single-volume API ------------------------------------

    def _geometry_for(self, volume: ScalarVolume) -> VolumeGeometry:
        side = self.config.input_side
        if volume.geometry.dims != (side, side, side):
            raise ValueError(
                f"volume dims {volume.geometry.dims} do not match model input side {side}"
            )
        return volume.geometry

    def forward_block1(self, volume: ScalarVolume) -> SoftMask:
        """Automatic segmentation of one image volume (eval mode, deterministic)."""
        geo = self._geometry_for(volume)
        x = volume.values[None, None]
        y = self.run_block1(x, train=False, cache=False)
        return SoftMask(geo, np.clip(y[0, 0], 0.0, 1.0))

    def forward_block2(self, volume: ScalarVolume, initial_seg: SoftMask,
                       weight_map: field_mod.WeightMap) -> SoftMask:
        """Point-guided correction of an initial segmentation (eval mode)."""
        geo = self._geometry_for(volume)
        if initial_seg.geometry.dims != geo.dims or weight_map.geometry.dims != geo.dims:
            raise ValueError("volume, initial segmentation and weight map must share dims")
        y = self.run_block2(
            volume.values[None, None],
            initial_seg.values[None, None],
            weight_map.values[None, None].astype(self.dtype),
            train=False, cache=False,
        )
        return SoftMask(geo, np.clip(y[0, 0], 0.0, 1.0))


def parameter_count(config: WNetConfig) -> int:
    """Learnable parameter count as a pure function of the shape config."""

    def conv(in_ch, out_ch):
        return 27 * in_ch * out_ch + out_ch

    def bn(ch):
        return 2 * ch

    def block(in_ch):
        filters = config.level_filters()
        total = 0
        prev = in_ch
        for f in filters:
            total += conv(prev, f) + bn(f)
            prev = f
        for i in range(config.depth - 2, -1, -1):
            total += conv(filters[i + 1] + filters[i], filters[i]) + bn(filters[i])
        total += conv(filters[0] + in_ch, 1)
        return total

    return block(1) + block(3)


# --- checkpoint format --------------------------------------------------------

CKPT_VERSION = 1


def save_checkpoint(net: WNet, path) -> Path:
    """JSON manifest (config + ordered entry shapes) plus one float32 LE blob."""
    p = Path(path)
    if p.suffix in (".json", ".bin"):
        p = p.with_suffix("")
    entries = net.state()
    manifest = {
        "version": CKPT_VERSION,
        "dtype": "f32",
        "config": asdict(net.config),
        "entries": [{"name": name, "shape": list(arr.shape)} for name, arr in entries],
    }
    blob = b"".join(np.ascontiguousarray(arr, dtype="<f4").tobytes() for _, arr in entries)
    p.with_suffix(".json").write_text(json.dumps(manifest))
    p.with_suffix(".bin").write_bytes(blob)
    return p.with_suffix(".json")


def load_checkpoint(path) -> WNet:
    p = Path(path)
    if p.suffix in (".json", ".bin"):
        p = p.with_suffix("")
    manifest = json.loads(p.with_suffix(".json").read_text())
    if manifest.get("version") != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest.get('version')}")
    if manifest.get("dtype") != "f32":
        raise ValueError(f"unsupported checkpoint dtype {manifest.get('dtype')}")
    config = WNetConfig(**manifest["config"])
    net = WNet(config, seed=0, dtype=np.float32)
    blob = p.with_suffix(".bin").read_bytes()
    entries = net.state()
    names = [e["name"] for e in manifest["entries"]]
    if names != [name for name, _ in entries]:
        raise ValueError("checkpoint entry list does not match the model layout")
    total = sum(int(np.prod(e["shape"])) for e in manifest["entries"]) * 4
    if len(blob) != total:
        raise ValueError(f"checkpoint blob is {len(blob)} bytes, manifest promises {total}")
    offset = 0
    for entry, (_, arr) in zip(manifest["entries"], entries):
        shape = tuple(entry["shape"])
        if shape != arr.shape:
            raise ValueError(f"shape mismatch for {entry['name']}: {shape} vs {arr.shape}")
        n = int(np.prod(shape)) * 4
        arr[...] = np.frombuffer(blob[offset:offset + n], dtype="<f4").reshape(shape)
        offset += n
    return net


# --- gradient checking ---------------------------------------------------------

_TINY_CONFIG = WNetConfig(input_side=8, base_filters=2, depth=2)


def _layer_type(name: str) -> str:
    if ".head." in name:
        return "sigmoid_head"
    if name.endswith((".gamma", ".beta")):
        return "batchnorm_relu"
    return "conv3"


def _gradcheck_problem(config: WNetConfig, seed: int, dtype):
    rng = np.random.default_rng(seed)
    side = config.input_side
    b = 2
    x = rng.random((b, 1, side, side, side)).astype(dtype)
    targets = (rng.random((b, side, side, side)) < 0.35).astype(np.float64)
    for i in range(b):
        if not targets[i].any():
            targets[i, side // 2, side // 2, side // 2] = 1.0
    geo = VolumeGeometry((side, side, side))
    pair = field_mod.PointPair(
        (side / 2.0, side / 2.0, 1.0), (side / 2.0, side / 2.0, side - 2.0)
    )
    wmap = field_mod.attraction_map(pair, field_mod.FieldParams(), geo)
    maps = np.broadcast_to(wmap.values.astype(dtype), (b, side, side, side))
    cfg = loss_mod.LossConfig()
    return x, targets, maps, cfg


def _full_loss(net: WNet, x, targets, maps, cfg) -> float:
    y1 = net.block1.forward(x, train=True, cache=False)
    stacked = concat_channels(concat_channels(x, y1), maps[:, None].astype(net.dtype))
    y2 = net.block2.forward(stacked, train=True, cache=False)
    total = 0.0
    for i in range(x.shape[0]):
        lv = loss_mod.combined_loss(y2[i, 0], targets[i], maps[i], cfg)
        total += lv.total
    return total / x.shape[0]


def _full_backward(net: WNet, x, targets, maps, cfg) -> None:
    b = x.shape[0]
    y1 = net.block1.forward(x, train=True, cache=True)
    stacked = concat_channels(concat_channels(x, y1), maps[:, None].astype(net.dtype))
    y2 = net.block2.forward(stacked, train=True, cache=True)
    dy2 = np.empty_like(y2)
    for i in range(b):
        lv = loss_mod.combined_loss(y2[i, 0], targets[i], maps[i], cfg)
        dy2[i, 0] = lv.grad_wrt_pred / b
    dstacked = net.block2.backward(dy2)
    net.block1.backward(dstacked[:, 1:2])


def grad_check(config: WNetConfig | None = None, seed: int = 0, bits: int = 64,
               coords_per_type: int = 50) -> dict:
    """Compare every layer type's analytic parameter gradients to central differences.

    The loss is the full blended objective evaluated through both blocks, so
    gradients cross the sigmoid heads, skip concatenations, upsampling and
    batch-norm train-mode statistics. Also verifies that a stage-2-style
    backward (correction block only) leaves block-1 gradients exactly zero.

    Coordinates where analytic and finite-difference values both fall below
    the estimator's cancellation-noise floor count as matching; this covers
    the conv biases feeding batch norm, whose true gradient is exactly zero
    while the central difference only reaches the rounding noise of the loss.

    In 32-bit mode the network under test runs in float32, but the difference
    quotient itself is evaluated through a float64 twin holding identical
    parameter values: a float32 forward cannot resolve loss differences to
    the 1e-3 gate, so the oracle runs at the precision the comparison needs.

    ReLU makes the loss piecewise-smooth, and a difference window that
    straddles a kink yields a wrong quotient at isolated coordinates. The
    oracle therefore computes two estimates at different steps and, when they
    disagree beyond the rounding noise of the loss evaluation (a kink
    signature, judged without ever looking at the analytic value), retries
    with a smaller step. Reported errors are relative with an absolute floor
    of 1e-4 in the denominator, since differences below that are dominated by
    the estimator itself rather than the backward rules under test.
    """
    if bits not in (32, 64):
        raise ValueError("bits must be 32 or 64")
    dtype = np.float32 if bits == 32 else np.float64
    config = config or _TINY_CONFIG
    t0 = time.time()
    net = WNet(config, seed=seed, dtype=dtype)
    x, targets, maps, cfg = _gradcheck_problem(config, seed + 1, dtype)

    net.zero_grad()
    _full_backward(net, x, targets, maps, cfg)
    analytic = {p.name: p.grad.copy() for p in net.parameters()}

    if bits == 32:
        oracle_net = WNet(config, seed=seed, dtype=np.float64)
        for p32, p64 in zip(net.parameters(), oracle_net.parameters()):
            p64.value[...] = p32.value.astype(np.float64)
        oracle_params = {p32.name: p64 for p32, p64 in
                         zip(net.parameters(), oracle_net.parameters())}
        ox, omaps = x.astype(np.float64), maps.astype(np.float64)
    else:
        oracle_net, oracle_params, ox, omaps = net, {p.name: p for p in net.parameters()}, x, maps

    rng = np.random.default_rng(seed + 2)
    by_type: dict[str, list] = {}
    for p in net.parameters():
        by_type.setdefault(_layer_type(p.name), []).append(p)

    floor = 1e-4
    gate = 1e-3 if bits == 32 else 1e-6

    def central_diff(op: Parameter, idx, h: float) -> float:
        theta = float(op.value[idx])
        op.value[idx] = theta + h
        lp = _full_loss(oracle_net, ox, targets, omaps, cfg)
        op.value[idx] = theta - h
        lm = _full_loss(oracle_net, ox, targets, omaps, cfg)
        op.value[idx] = theta
        return (lp - lm) / (2.0 * h)

    # rounding noise of one f64 difference quotient at step h (generous bound)
    base_loss = _full_loss(oracle_net, ox, targets, omaps, cfg)
    eps_loss = 256.0 * 2.2e-16 * max(1.0, abs(base_loss))

    def oracle(op: Parameter, idx, h: float) -> float:
        fd1 = central_diff(op, idx, h)
        fd2 = central_diff(op, idx, h / 8.0)
        tol = max(0.25 * gate * (abs(fd1) + abs(fd2)), eps_loss / (h / 8.0))
        if abs(fd1 - fd2) <= tol:
            return fd1
        return central_diff(op, idx, h / 64.0)

    report = {"bits": bits, "per_type": {}, "max_rel_err": 0.0}
    for ltype, params in sorted(by_type.items()):
        worst = 0.0
        checked = 0
        sizes = np.array([p.value.size for p in params])
        probs = sizes / sizes.sum()
        while checked < coords_per_type:
            p = params[rng.choice(len(params), p=probs)]
            idx = np.unravel_index(rng.integers(p.value.size), p.value.shape)
            h = 1e-5 * max(1.0, abs(float(p.value[idx])))
            fd = oracle(oracle_params[p.name], idx, h)
            an = float(analytic[p.name][idx])
            err = abs(an - fd) / max(abs(an) + abs(fd), floor)
            worst = max(worst, err)
            checked += 1
        report["per_type"][ltype] = {"max_rel_err": worst, "n": checked}
        report["max_rel_err"] = max(report["max_rel_err"], worst)

    # freeze contract: a correction-only backward must not touch block 1
    net.zero_grad()
    y1 = net.block1.forward(x, train=False, cache=False)
    stacked = concat_channels(concat_channels(x, y1), maps[:, None].astype(net.dtype))
    y2 = net.block2.forward(stacked, train=True, cache=True)
    dy2 = np.empty_like(y2)
    for i in range(x.shape[0]):
        lv = loss_mod.combined_loss(y2[i, 0], targets[i], maps[i], cfg)
        dy2[i, 0] = lv.grad_wrt_pred / x.shape[0]
    net.block2.backward(dy2)
    report["stage2_block1_grad_abs_sum"] = float(
        sum(np.abs(p.grad).sum() for p in net.block1.parameters())
    )
    report["seconds"] = time.time() - t0
    return report
