"""Architecture files, network compilation and the auto-encoder forward passes.

An architecture file lists layers as ``K*K*M,S`` (receptive field, output
maps, stride)::

    scales: 2
    level 1 encoder: 5*5*160,2 , 5*5*128,1 , 3*3*96,2 , 3*3*96,1
    level 1 decoder: 3*3*96,1 , 3*3*128,2 , 5*5*160,1 , 5*5*3,2
    level 0 encoder: ...
    level 0 decoder: ...

Single-path convolutional auto-encoders use bare ``encoder:`` and
``decoder:`` lines.  Encoders are convolutions, decoders transposed
convolutions; every layer is conv -> BN -> ReLU except the last decoder layer,
which is linear because its whitened targets are signed.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ArchitectureError, ArchSyntaxError, ShapeError
from .tensor import (BNState, Tensor, batch_norm, concat_channels, conv2d, deconv2d,
                     mse_loss, relu, upsample_nn)

IMAGE_CHANNELS = 3
BUILTIN_ARCHS = ("lpae2", "lpae3", "lpae4", "dcae1", "dcae2", "tiny2")


# ---------------------------------------------------------------------------
# specs

@dataclass(frozen=True)
class LayerSpec:
    kernel: int
    maps: int
    stride: int

    def __str__(self):
        return f"{self.kernel}*{self.kernel}*{self.maps},{self.stride}"


@dataclass(frozen=True)
class LevelSpec:
    index: int
    encoder: tuple
    decoder: tuple


@dataclass(frozen=True)
class ArchitectureSpec:
    """Parsed architecture. ``kind`` is ``"lpae"`` or ``"dcae"``; a DCAE has one level."""

    kind: str
    levels: tuple
    name: str = field(default="", compare=False)

    @property
    def n_scales(self) -> int:
        return len(self.levels)

    def to_text(self) -> str:
        """Canonical text form; parses back to an equal spec."""
        def row(layers):
            return " , ".join(str(layer) for layer in layers)

        if self.kind == "dcae":
            lv = self.levels[0]
            return f"encoder: {row(lv.encoder)}\ndecoder: {row(lv.decoder)}\n"
        lines = [f"scales: {self.n_scales}"]
        for lv in reversed(self.levels):
            lines.append(f"level {lv.index} encoder: {row(lv.encoder)}")
            lines.append(f"level {lv.index} decoder: {row(lv.decoder)}")
        return "\n".join(lines) + "\n"

    def without_top(self) -> "ArchitectureSpec":
        """The same network minus its coarsest level."""
        if self.kind != "lpae" or self.n_scales < 3:
            raise ArchitectureError("only LPAE specs with 3 or more scales can drop a level")
        return ArchitectureSpec("lpae", self.levels[:-1], name=self.name)

    def resolutions(self, image_size: int) -> list:
        """Input resolution of each level for a square ``image_size`` input."""
        res = [image_size]
        for _ in range(self.n_scales - 1):
            res.append(-(-res[-1] // 2))
        return res


_LAYER_RE = re.compile(r"\s*(\d+)\s*\*\s*(\d+)\s*\*\s*(\d+)\s*,\s*(\d+)\s*")
_HEAD_RE = re.compile(r"\s*(?:level\s+(\d+)\s+)?(encoder|decoder)\s*:", re.IGNORECASE)
_SCALES_RE = re.compile(r"\s*scales\s*:\s*(\d+)\s*$", re.IGNORECASE)


def _parse_layers(body, lineno, col0):
    layers = []
    pos = 0
    while True:
        m = _LAYER_RE.match(body, pos)
        if not m:
            lead = len(body[pos:]) - len(body[pos:].lstrip())
            raise ArchSyntaxError("expected a layer of the form K*K*M,S", lineno, col0 + pos + lead + 1)
        kh, kw, maps, stride = (int(g) for g in m.groups())
        where = f"line {lineno}, column {col0 + pos + 1}"
        if kh != kw:
            raise ArchitectureError(f"{where}: receptive field {kh}x{kw} is not square")
        if kh not in (3, 5):
            raise ArchitectureError(f"{where}: receptive field must be 3 or 5, got {kh}")
        if stride not in (1, 2):
            raise ArchitectureError(f"{where}: stride must be 1 or 2, got {stride}")
        if maps < 1:
            raise ArchitectureError(f"{where}: a layer needs at least one feature map")
        layers.append(LayerSpec(kh, maps, stride))
        pos = m.end()
        if pos == len(body):
            return tuple(layers)
        if body[pos] not in ",|":
            raise ArchSyntaxError(f"unexpected {body[pos]!r} after a layer", lineno, col0 + pos + 1)
        pos += 1


def parse_arch(text: str, name: str = "") -> ArchitectureSpec:
    """Parse and validate architecture text."""
    scales = None
    rows = {}
    last_line = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].rstrip()
        if not line.strip():
            continue
        m = _SCALES_RE.match(line)
        if m:
            if scales is not None:
                raise ArchSyntaxError("duplicate 'scales' line", lineno, 1)
            scales = int(m.group(1))
            continue
        m = _HEAD_RE.match(line)
        if not m:
            raise ArchSyntaxError("expected 'scales:', 'level K encoder:' or 'level K decoder:'",
                                  lineno, len(line) - len(line.lstrip()) + 1)
        level = int(m.group(1)) if m.group(1) is not None else None
        part = m.group(2).lower()
        key = (level, part)
        if key in rows:
            raise ArchSyntaxError(f"duplicate {part} row", lineno, 1)
        rows[key] = _parse_layers(line[m.end():], lineno, m.end())
        last_line[key] = lineno

    if not rows:
        raise ArchSyntaxError("no layers found", 1, 1)
    bare = [k for k in rows if k[0] is None]
    if bare and len(bare) != len(rows):
        raise ArchSyntaxError("cannot mix levelled and unlevelled rows", 1, 1)

    if bare:
        if scales is not None:
            raise ArchitectureError("'scales' is only meaningful for levelled (LPAE) files")
        kind, indices = "dcae", [None]
    else:
        if scales is None:
            raise ArchitectureError("levelled architecture needs a 'scales: N' line")
        kind, indices = "lpae", list(range(scales))
        extra = sorted({k[0] for k in rows} - set(indices))
        if extra:
            raise ArchitectureError(f"levels {extra} exceed 'scales: {scales}'")
        if scales < 2:
            raise ArchitectureError("an LPAE needs at least 2 scales")

    levels = []
    for idx in indices:
        for part in ("encoder", "decoder"):
            if (idx, part) not in rows:
                label = part if idx is None else f"level {idx} {part}"
                raise ArchitectureError(f"missing {label} row")
        dec = rows[(idx, "decoder")]
        if dec[-1].maps != IMAGE_CHANNELS:
            raise ArchitectureError(
                f"line {last_line[(idx, 'decoder')]}: final decoder layer must have "
                f"{IMAGE_CHANNELS} maps, got {dec[-1].maps}")
        levels.append(LevelSpec(0 if idx is None else idx, rows[(idx, "encoder")], dec))
    return ArchitectureSpec(kind, tuple(levels), name=name)


def load_arch(name_or_path) -> ArchitectureSpec:
    """Load a shipped architecture by name (``lpae2`` ... ``dcae2``) or a file path."""
    key = str(name_or_path)
    if key.endswith(".arch") and key[:-5] in BUILTIN_ARCHS and not Path(key).exists():
        key = key[:-5]
    if key in BUILTIN_ARCHS:
        text = resources.files("lpae").joinpath("archs").joinpath(f"{key}.arch").read_text()
        return parse_arch(text, name=key)
    path = Path(key)
    return parse_arch(path.read_text(), name=path.stem)


def count_feature_maps(spec: ArchitectureSpec, levels=None) -> int:
    """Sum of encoder maps over ``levels`` (all by default)."""
    chosen = range(spec.n_scales) if levels is None else levels
    return sum(layer.maps for k in chosen for layer in spec.levels[k].encoder)


# ---------------------------------------------------------------------------
# runtime layers

class Layer:
    """One conv (or transposed conv) layer with optional BN and ReLU."""

    def __init__(self, name, spec: LayerSpec, in_channels, transpose=False,
                 linear=False, use_bn=True, dtype=np.float32):
        self.name = name
        self.spec = spec
        self.in_channels = in_channels
        self.transpose = transpose
        self.linear = linear
        k, m = spec.kernel, spec.maps
        shape = (in_channels, m, k, k) if transpose else (m, in_channels, k, k)
        self.w = Tensor(np.zeros(shape, dtype=dtype), requires_grad=True, name=f"{name}.w")
        self.b = Tensor(np.zeros(m, dtype=dtype), requires_grad=True, name=f"{name}.b")
        self.bn = BNState.create(m, dtype=dtype) if (use_bn and not linear) else None

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        op = deconv2d if self.transpose else conv2d
        y = op(x, self.w, self.b, self.spec.stride)
        if self.linear:
            return y
        if self.bn is not None:
            y = batch_norm(y, self.bn, training)
        return relu(y)

    def out_size(self, size: int) -> int:
        s = self.spec.stride
        return size * s if self.transpose else -(-size // s)

    def named_parameters(self):
        yield f"{self.name}.w", self.w
        yield f"{self.name}.b", self.b
        if self.bn is not None:
            yield f"{self.name}.bn.gamma", self.bn.gamma
            yield f"{self.name}.bn.beta", self.bn.beta


@dataclass
class LevelNet:
    index: int
    resolution: int
    encoder: list
    decoder: list
    merge_point: int | None = None  # encoder layer whose output receives upsampled h_{k+1}
    merge_channels: int = 0


class _Network:
    """Shared bookkeeping for both model families."""

    kind = ""

    def __init__(self, spec: ArchitectureSpec, image_size: int, use_bn: bool):
        self.spec = spec
        self.image_size = image_size
        self.use_bn = use_bn
        self.levels: list = []

    def layers(self):
        for lv in self.levels:
            yield from lv.encoder
            yield from lv.decoder

    def named_parameters(self) -> dict:
        out = {}
        for layer in self.layers():
            out.update(layer.named_parameters())
        return out

    def bn_layers(self):
        return [layer for layer in self.layers() if layer.bn is not None]

    def named_buffers(self) -> dict:
        out = {}
        for layer in self.bn_layers():
            out[f"{layer.name}.bn.running_mean"] = layer.bn.running_mean
            out[f"{layer.name}.bn.running_var"] = layer.bn.running_var
        return out

    def load_buffers(self, buffers: dict):
        for layer in self.bn_layers():
            layer.bn.running_mean = np.array(buffers[f"{layer.name}.bn.running_mean"])
            layer.bn.running_var = np.array(buffers[f"{layer.name}.bn.running_var"])

    def zero_grad(self):
        for t in self.named_parameters().values():
            t.grad = None

    def astype(self, dtype):
        """Cast all parameters and running statistics in place; returns self."""
        for t in self.named_parameters().values():
            t.data = t.data.astype(dtype)
            t.grad = None
        for layer in self.bn_layers():
            layer.bn.running_mean = layer.bn.running_mean.astype(dtype)
            layer.bn.running_var = layer.bn.running_var.astype(dtype)
        return self

    def describe(self) -> dict:
        return {"kind": self.kind, "arch": self.spec.to_text(),
                "image_size": self.image_size, "use_bn": self.use_bn}

    def arch_hash(self) -> bytes:
        blob = json.dumps(self.describe(), sort_keys=True).encode()
        return hashlib.sha256(blob).digest()


def _build_level(lv: LevelSpec, prefix, resolution, in_channels, use_bn, dtype,
                 merge_point=None, merge_channels=0):
    encoder, size, ch = [], resolution, in_channels
    for j, ls in enumerate(lv.encoder):
        layer = Layer(f"{prefix}enc{j}", ls, ch, use_bn=use_bn, dtype=dtype)
        encoder.append(layer)
        size = layer.out_size(size)
        ch = ls.maps + (merge_channels if j == merge_point else 0)
    decoder = []
    ch = lv.encoder[-1].maps
    for j, ls in enumerate(lv.decoder):
        final = j == len(lv.decoder) - 1
        layer = Layer(f"{prefix}dec{j}", ls, ch, transpose=True, linear=final,
                      use_bn=use_bn, dtype=dtype)
        decoder.append(layer)
        size = layer.out_size(size)
        ch = ls.maps
    if size != resolution:
        raise ArchitectureError(
            f"{prefix or 'network '}decoder produces {size}px from a {resolution}px input")
    return LevelNet(lv.index, resolution, encoder, decoder, merge_point, merge_channels)


def _encoder_sizes(lv: LevelSpec, resolution):
    sizes, size = [], resolution
    for ls in lv.encoder:
        size = -(-size // ls.stride)
        sizes.append(size)
    return sizes


def find_merge_point(spec: ArchitectureSpec, k: int, image_size: int) -> int:
    """Earliest encoder layer of level ``k`` whose output is twice the size of ``h_{k+1}``."""
    res = spec.resolutions(image_size)
    h_next = _encoder_sizes(spec.levels[k + 1], res[k + 1])[-1]
    sizes = _encoder_sizes(spec.levels[k], res[k])
    matches = [j for j, s in enumerate(sizes) if s == 2 * h_next]
    if not matches:
        raise ArchitectureError(
            f"level {k}: no encoder layer outputs {2 * h_next}px to receive level {k + 1} "
            f"(encoder sizes {sizes})")
    if matches[0] == len(sizes) - 1:
        raise ArchitectureError(f"level {k}: only the final encoder layer matches level {k + 1}")
    return matches[0]


class LPAEModel(_Network):
    """Per-level encoders/decoders joined by upsample-and-concatenate merges."""

    kind = "lpae"


class DCAEModel(_Network):
    """Single-path convolutional auto-encoder (one level, no merges)."""

    kind = "dcae"


def init_weights(model, std: float = 0.02, seed: int = 0):
    """Weights ~ N(0, std^2); biases and BN shifts 0; BN scales 1. Deterministic per seed."""
    if std <= 0:
        raise ValueError("init std must be positive")
    rng = np.random.default_rng(seed)
    for name, t in model.named_parameters().items():
        if name.endswith(".w"):
            t.data = rng.normal(0.0, std, size=t.shape).astype(t.dtype)
        elif name.endswith(".gamma"):
            t.data = np.ones(t.shape, dtype=t.dtype)
        else:
            t.data = np.zeros(t.shape, dtype=t.dtype)
        t.grad = None
    for layer in model.bn_layers():
        layer.bn.running_mean = np.zeros_like(layer.bn.running_mean)
        layer.bn.running_var = np.ones_like(layer.bn.running_var)


def build_lpae(spec: ArchitectureSpec, image_size: int = 96, seed: int = 0,
               use_bn: bool = True, init_std: float = 0.02, dtype=np.float32) -> LPAEModel:
    if spec.kind != "lpae":
        raise ArchitectureError(f"build_lpae needs an LPAE spec, got {spec.kind}")
    res = spec.resolutions(image_size)
    model = LPAEModel(spec, image_size, use_bn)
    n = spec.n_scales
    nets = [None] * n
    for k in reversed(range(n)):
        if k == n - 1:
            mp, mc = None, 0
        else:
            mp = find_merge_point(spec, k, image_size)
            mc = spec.levels[k + 1].encoder[-1].maps
        nets[k] = _build_level(spec.levels[k], f"level{k}.", res[k], IMAGE_CHANNELS,
                               use_bn, dtype, mp, mc)
    model.levels = nets
    init_weights(model, init_std, seed)
    return model


def build_dcae(spec: ArchitectureSpec, image_size: int = 96, seed: int = 0,
               use_bn: bool = True, init_std: float = 0.02, dtype=np.float32) -> DCAEModel:
    if spec.kind != "dcae":
        raise ArchitectureError(f"build_dcae needs a DCAE spec, got {spec.kind}")
    model = DCAEModel(spec, image_size, use_bn)
    model.levels = [_build_level(spec.levels[0], "", image_size, IMAGE_CHANNELS, use_bn, dtype)]
    init_weights(model, init_std, seed)
    return model


def build_model(spec: ArchitectureSpec, image_size: int = 96, **kwargs):
    builder = build_lpae if spec.kind == "lpae" else build_dcae
    return builder(spec, image_size, **kwargs)


def count_params(model) -> int:
    """Number of learnable scalars: weights, biases and BN scale/shift."""
    return int(sum(t.data.size for t in model.named_parameters().values()))


# ---------------------------------------------------------------------------
# forward passes

@dataclass
class LPAEOutput:
    h: list
    recon: list
    loss_k: list
    loss: Tensor
    activations: dict = field(default_factory=dict)


def _as_input(x, dtype):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def encode_lpae(model: LPAEModel, laplacian: list, training: bool = False):
    """Top-down encoding. Returns ``(h, activations)`` with one list of layer outputs per level."""
    n = len(model.levels)
    if len(laplacian) != n:
        raise ShapeError(f"model has {n} levels, pyramid has {len(laplacian)}")
    dtype = model.levels[0].encoder[0].w.dtype
    h = [None] * n
    acts = {}
    for k in reversed(range(n)):
        lv = model.levels[k]
        x = _as_input(laplacian[k], dtype)
        if x.shape[-1] != lv.resolution:
            raise ShapeError(f"level {k} expects {lv.resolution}px input, got {x.shape}")
        outs = []
        for j, layer in enumerate(lv.encoder):
            x = layer(x, training)
            outs.append(x)
            if j == lv.merge_point:
                up = upsample_nn(h[k + 1], 2)
                if up.shape[2:] != x.shape[2:]:
                    raise ArchitectureError(f"level {k}: merge of {up.shape} into {x.shape}")
                x = concat_channels(x, up)
        h[k] = x
        acts[k] = outs
    return h, acts


def forward_lpae(model: LPAEModel, laplacian: list, gaussian: list,
                 training: bool = True) -> LPAEOutput:
    """Encode the Laplacian levels, decode each ``h_k`` and score it against ``g_k``."""
    h, acts = encode_lpae(model, laplacian, training)
    recon, losses = [], []
    for k, lv in enumerate(model.levels):
        y = h[k]
        for layer in lv.decoder:
            y = layer(y, training)
        recon.append(y)
        losses.append(mse_loss(y, np.asarray(gaussian[k])))
    total = losses[0]
    for lk in losses[1:]:
        total = total + lk
    return LPAEOutput(h, recon, losses, total, acts)


@dataclass
class DCAEOutput:
    recon: Tensor
    loss: Tensor
    activations: dict = field(default_factory=dict)


def encode_dcae(model: DCAEModel, batch, training: bool = False):
    lv = model.levels[0]
    x = _as_input(batch, lv.encoder[0].w.dtype)
    outs = []
    for layer in lv.encoder:
        x = layer(x, training)
        outs.append(x)
    return x, {0: outs}


def forward_dcae(model: DCAEModel, batch, training: bool = True) -> DCAEOutput:
    target = np.asarray(batch.data if isinstance(batch, Tensor) else batch)
    h, acts = encode_dcae(model, batch, training)
    y = h
    for layer in model.levels[0].decoder:
        y = layer(y, training)
    if y.shape != target.shape:
        raise ShapeError(f"reconstruction {y.shape} differs from input {target.shape}")
    return DCAEOutput(y, mse_loss(y, target), acts)
