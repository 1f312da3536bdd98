"""Network specs, the binary model file format, and batch-norm folding.

Model file layout (all integers little-endian):

* bytes 0..3: magic ``EVSM``
* bytes 4..7: uint32 format version (currently 1)
* bytes 8..11: uint32 byte length of the JSON header
* JSON header: name, representation kind, window size, input dims, and the
  ordered layer table (kinds and shapes)
* payload: float32 little-endian tensors, row-major, in layer order. Conv
  layers store weights ``(k, k, c_in, c_out)`` then bias ``(c_out,)``;
  batch-norm stores gamma, beta, running mean, running variance (eps lives
  in the header); fc stores weights ``(out, in)`` then bias.

Batch-norm is not a runtime layer: loading folds each (conv, batchnorm)
pair into a single conv, so loaded specs contain only conv/maxpool/relu/fc.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from evsparse.representations import channels_for_kind
from evsparse.sparse import LayerSpec

__all__ = [
    "MODEL_MAGIC",
    "MODEL_VERSION",
    "ArchTemplate",
    "BatchNormSpec",
    "ModelFormatError",
    "NetworkSpec",
    "NetworkValidationError",
    "load_model",
    "load_model_bytes",
    "model_bytes",
    "save_model",
    "random_layers",
    "random_model",
    "random_model_file",
    "small_template",
    "vgg13_template",
]

MODEL_MAGIC = b"EVSM"
MODEL_VERSION = 1


class ModelFormatError(ValueError):
    """Unreadable or internally inconsistent model file."""


class NetworkValidationError(ValueError):
    """Layer chain violates a network invariant."""


@dataclass
class BatchNormSpec:
    """Batch-norm parameters as stored in model files; never part of a
    loaded NetworkSpec."""

    channels: int
    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = 1e-5

    kind: str = field(default="batchnorm", init=False)


@dataclass
class NetworkSpec:
    """An ordered layer chain with its input geometry and stream metadata."""

    input_width: int
    input_height: int
    input_channels: int
    layers: list[LayerSpec]
    name: str = ""
    representation: str = "histogram"
    window: int = 25_000

    def chain(self):
        """Yield (layer, in_w, in_h, in_c, out_w, out_h, out_c) along the net,
        checking consistency as it walks."""
        w, h, c = self.input_width, self.input_height, self.input_channels
        for i, layer in enumerate(self.layers):
            layer.validate()
            if layer.kind == "conv":
                if layer.in_channels != c:
                    raise NetworkValidationError(f"layer {i}: conv expects {layer.in_channels} channels, chain has {c}")
                yield layer, w, h, c, w, h, layer.out_channels
                c = layer.out_channels
            elif layer.kind == "relu":
                yield layer, w, h, c, w, h, c
            elif layer.kind == "maxpool":
                if w % layer.kernel or h % layer.kernel:
                    raise NetworkValidationError(f"layer {i}: pool kernel {layer.kernel} does not divide {w}x{h}")
                yield layer, w, h, c, w // layer.kernel, h // layer.kernel, c
                w //= layer.kernel
                h //= layer.kernel
            elif layer.kind == "fc":
                if i != len(self.layers) - 1:
                    raise NetworkValidationError(f"layer {i}: fc must be the final layer")
                if layer.in_channels != w * h * c:
                    raise NetworkValidationError(
                        f"layer {i}: fc expects {layer.in_channels} features, map flattens to {w * h * c}"
                    )
                yield layer, w, h, c, 1, 1, layer.out_channels
            else:
                raise NetworkValidationError(f"layer {i}: unknown kind {layer.kind!r}")

    def validate(self) -> None:
        if self.input_width <= 0 or self.input_height <= 0 or self.input_channels <= 0:
            raise NetworkValidationError("input dimensions must be positive")
        if not self.layers:
            raise NetworkValidationError("empty layer chain")
        if self.layers[-1].kind != "fc":
            raise NetworkValidationError("final layer must be fc")
        for _ in self.chain():
            pass

    def astype(self, dtype) -> NetworkSpec:
        """Copy with weights cast to another float dtype (64-bit test mode)."""
        layers = []
        for layer in self.layers:
            if layer.weights is not None:
                layers.append(replace(layer, weights=layer.weights.astype(dtype), bias=layer.bias.astype(dtype)))
            else:
                layers.append(replace(layer))
        return replace(self, layers=layers)


def _layer_header(layer: LayerSpec | BatchNormSpec) -> dict:
    if isinstance(layer, BatchNormSpec):
        return {"kind": "batchnorm", "channels": layer.channels, "eps": layer.eps}
    if layer.kind == "conv":
        return {"kind": "conv", "kernel": layer.kernel, "in_channels": layer.in_channels,
                "out_channels": layer.out_channels}
    if layer.kind == "maxpool":
        return {"kind": "maxpool", "kernel": layer.kernel}
    if layer.kind == "relu":
        return {"kind": "relu"}
    if layer.kind == "fc":
        return {"kind": "fc", "in_features": layer.in_channels, "out_features": layer.out_channels}
    raise ValueError(f"cannot serialize layer kind {layer.kind!r}")


def _layer_tensors(layer: LayerSpec | BatchNormSpec) -> list[np.ndarray]:
    if isinstance(layer, BatchNormSpec):
        return [layer.gamma, layer.beta, layer.mean, layer.var]
    if layer.kind in ("conv", "fc"):
        return [layer.weights, layer.bias]
    return []


def _tensor_shapes(entry: dict) -> list[tuple[int, ...]]:
    kind = entry["kind"]
    if kind == "conv":
        k, ci, co = entry["kernel"], entry["in_channels"], entry["out_channels"]
        return [(k, k, ci, co), (co,)]
    if kind == "batchnorm":
        c = entry["channels"]
        return [(c,)] * 4
    if kind == "fc":
        return [(entry["out_features"], entry["in_features"]), (entry["out_features"],)]
    return []


def model_bytes(
    input_size: tuple[int, int, int],
    layers: list[LayerSpec | BatchNormSpec],
    name: str = "",
    representation: str = "histogram",
    window: int = 25_000,
) -> bytes:
    """Serialize a model. ``layers`` may include BatchNormSpec entries;
    ``input_size`` is (width, height, channels)."""
    header = {
        "name": name,
        "representation": representation,
        "window": window,
        "input": {"width": input_size[0], "height": input_size[1], "channels": input_size[2]},
        "layers": [_layer_header(layer) for layer in layers],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    chunks = [MODEL_MAGIC, struct.pack("<II", MODEL_VERSION, len(header_bytes)), header_bytes]
    for layer in layers:
        for tensor in _layer_tensors(layer):
            chunks.append(np.ascontiguousarray(tensor, dtype="<f4").tobytes())
    return b"".join(chunks)


def save_model(
    path: str | Path,
    input_size: tuple[int, int, int],
    layers: list[LayerSpec | BatchNormSpec],
    name: str = "",
    representation: str = "histogram",
    window: int = 25_000,
) -> None:
    Path(path).write_bytes(model_bytes(input_size, layers, name, representation, window))


def fold_batchnorm(layers: list[LayerSpec | BatchNormSpec]) -> list[LayerSpec]:
    """Fold every (conv, batchnorm) pair into a single conv layer."""
    folded: list[LayerSpec] = []
    for layer in layers:
        if isinstance(layer, BatchNormSpec):
            if not folded or folded[-1].kind != "conv":
                raise ModelFormatError("batchnorm without a preceding conv layer")
            conv = folded.pop()
            if conv.out_channels != layer.channels:
                raise ModelFormatError(
                    f"batchnorm over {layer.channels} channels after conv with {conv.out_channels} outputs"
                )
            scale = layer.gamma / np.sqrt(layer.var + layer.eps)
            weights = conv.weights * scale[None, None, None, :]
            bias = (conv.bias - layer.mean) * scale + layer.beta
            folded.append(LayerSpec.conv(conv.kernel, conv.in_channels, conv.out_channels,
                                         weights.astype(np.float32), bias.astype(np.float32)))
        else:
            folded.append(layer)
    return folded


def load_model(path: str | Path) -> NetworkSpec:
    """Read and validate a model file, folding batch-norm into conv weights."""
    return load_model_bytes(Path(path).read_bytes())


def load_model_bytes(raw: bytes) -> NetworkSpec:
    if len(raw) < 12 or raw[:4] != MODEL_MAGIC:
        raise ModelFormatError("not a model file (bad magic)")
    version, header_len = struct.unpack("<II", raw[4:12])
    if version != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model format version {version}")
    if len(raw) < 12 + header_len:
        raise ModelFormatError("truncated header")
    try:
        header = json.loads(raw[12 : 12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"unreadable header: {exc}") from None

    offset = 12 + header_len
    layers: list[LayerSpec | BatchNormSpec] = []
    for entry in header.get("layers", []):
        tensors = []
        for shape in _tensor_shapes(entry):
            size = 4 * int(np.prod(shape))
            if offset + size > len(raw):
                raise ModelFormatError("truncated payload")
            tensors.append(np.frombuffer(raw[offset : offset + size], dtype="<f4").reshape(shape).copy())
            offset += size
        kind = entry["kind"]
        if kind == "conv":
            layers.append(LayerSpec.conv(entry["kernel"], entry["in_channels"], entry["out_channels"],
                                         tensors[0], tensors[1]))
        elif kind == "batchnorm":
            layers.append(BatchNormSpec(entry["channels"], *tensors, eps=float(entry.get("eps", 1e-5))))
        elif kind == "maxpool":
            layers.append(LayerSpec.maxpool(entry["kernel"]))
        elif kind == "relu":
            layers.append(LayerSpec.relu())
        elif kind == "fc":
            layers.append(LayerSpec.fc(entry["in_features"], entry["out_features"], tensors[0], tensors[1]))
        else:
            raise ModelFormatError(f"unknown layer kind {kind!r} in header")
    if offset != len(raw):
        raise ModelFormatError(f"payload has {len(raw) - offset} trailing bytes")

    inp = header.get("input", {})
    net = NetworkSpec(
        input_width=int(inp.get("width", 0)),
        input_height=int(inp.get("height", 0)),
        input_channels=int(inp.get("channels", 0)),
        layers=fold_batchnorm(layers),
        name=str(header.get("name", "")),
        representation=str(header.get("representation", "histogram")),
        window=int(header.get("window", 25_000)),
    )
    net.validate()
    return net


@dataclass(frozen=True)
class ArchTemplate:
    """Block-structured architecture: per block ``convs_per_block`` conv
    (+ optional batch-norm) + relu triples followed by a max pool, then one
    fully connected head."""

    name: str
    input_width: int
    input_height: int
    block_channels: tuple[int, ...]
    convs_per_block: int = 2
    kernel: int = 3
    pool: int = 2
    fc_out: int = 10
    representation: str = "histogram"
    window: int = 25_000
    batchnorm: bool = True


def vgg13_template(
    input_size: tuple[int, int] = (128, 96),
    representation: str = "histogram",
    fc_out: int = 10,
    window: int = 25_000,
) -> ArchTemplate:
    """VGG13-style template: 5 blocks of two 3x3 convs plus 2x2 max pooling,
    standard widths, one fully connected output layer.

    The default 128x96 input divides cleanly by all five pooling stages.
    """
    return ArchTemplate(
        name="vgg13",
        input_width=input_size[0],
        input_height=input_size[1],
        block_channels=(64, 128, 256, 512, 512),
        fc_out=fc_out,
        representation=representation,
        window=window,
    )


def small_template(
    blocks: int = 2,
    width: int = 16,
    height: int = 16,
    base_channels: int = 4,
    representation: str = "histogram",
    fc_out: int = 4,
    window: int = 25_000,
    convs_per_block: int = 2,
    batchnorm: bool = True,
) -> ArchTemplate:
    """Compact block template for tests; channel widths double per block."""
    return ArchTemplate(
        name=f"small{blocks}",
        input_width=width,
        input_height=height,
        block_channels=tuple(base_channels * (2**i) for i in range(blocks)),
        convs_per_block=convs_per_block,
        fc_out=fc_out,
        representation=representation,
        window=window,
        batchnorm=batchnorm,
    )


def random_layers(template: ArchTemplate, rng: np.random.Generator) -> list[LayerSpec | BatchNormSpec]:
    """Draw a raw (pre-folding) layer list for a template. Weights come from
    bounded symmetric uniforms scaled by fan-in."""
    layers: list[LayerSpec | BatchNormSpec] = []
    w, h = template.input_width, template.input_height
    c = channels_for_kind(template.representation)
    k = template.kernel
    for block_channels in template.block_channels:
        for _ in range(template.convs_per_block):
            bound = 1.0 / np.sqrt(k * k * c)
            weights = rng.uniform(-bound, bound, size=(k, k, c, block_channels)).astype(np.float32)
            bias = rng.uniform(-0.1, 0.1, size=block_channels).astype(np.float32)
            layers.append(LayerSpec.conv(k, c, block_channels, weights, bias))
            if template.batchnorm:
                layers.append(
                    BatchNormSpec(
                        block_channels,
                        gamma=rng.uniform(0.5, 1.5, block_channels).astype(np.float32),
                        beta=rng.uniform(-0.2, 0.2, block_channels).astype(np.float32),
                        mean=rng.uniform(-0.2, 0.2, block_channels).astype(np.float32),
                        var=rng.uniform(0.5, 1.5, block_channels).astype(np.float32),
                    )
                )
            layers.append(LayerSpec.relu())
            c = block_channels
        layers.append(LayerSpec.maxpool(template.pool))
        if w % template.pool or h % template.pool:
            raise NetworkValidationError(f"template pools {w}x{h} by {template.pool}, which does not divide")
        w //= template.pool
        h //= template.pool
    in_features = w * h * c
    bound = 1.0 / np.sqrt(in_features)
    fc_w = rng.uniform(-bound, bound, size=(template.fc_out, in_features)).astype(np.float32)
    fc_b = rng.uniform(-0.1, 0.1, size=template.fc_out).astype(np.float32)
    layers.append(LayerSpec.fc(in_features, template.fc_out, fc_w, fc_b))
    return layers


def random_model(seed: int, template: ArchTemplate) -> NetworkSpec:
    """Deterministic random network for a template; batch-norm already folded."""
    rng = np.random.default_rng(seed)
    raw = random_layers(template, rng)
    net = NetworkSpec(
        input_width=template.input_width,
        input_height=template.input_height,
        input_channels=channels_for_kind(template.representation),
        layers=fold_batchnorm(raw),
        name=template.name,
        representation=template.representation,
        window=template.window,
    )
    net.validate()
    return net


def random_model_file(seed: int, template: ArchTemplate, path: str | Path) -> None:
    """Write a random template model (with raw batch-norm layers) to disk."""
    rng = np.random.default_rng(seed)
    raw = random_layers(template, rng)
    save_model(
        path,
        (template.input_width, template.input_height, channels_for_kind(template.representation)),
        raw,
        name=template.name,
        representation=template.representation,
        window=template.window,
    )
