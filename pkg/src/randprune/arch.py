"""Architecture documents: parsing, serialization and dense accounting.

Grammar, one statement per line, ``#`` starts a comment::

    input <C> <H> <W>
    classes <K>
    conv <in>-><out> k<w>x<h> pos<P> [pad<p>] [dense] [nobias] [name=<id>]
    fc <in>-><out> [k1x1] [pos1] [dense] [nobias] [name=<id>]
    pool avg <k> | pool max <k> | pool global
    flatten

``k3`` is shorthand for ``k3x3``. Pool lines attach to the layer above them,
fc layers flatten their input, ``flatten`` is accepted as a readability
marker. Unnamed layers are called ``<kind><position>`` (``conv1``, ``fc2``).
"""

from __future__ import annotations

import re
from logging import getLogger

from pydantic import ValidationError

from randprune.exceptions import NetworkParseError
from randprune.models import LayerSpec, NetworkSpec

__all__ = (
    "parse_network",
    "serialize_network",
    "param_count",
    "dense_flops",
    "mlp_network",
    "conv_network",
)

logger = getLogger(__name__)

_NUMBER = re.compile(r"[0-9]+")
_ARROW = re.compile(r"^([0-9]+)->([0-9]+)$")
_KERNEL = re.compile(r"^k([0-9]+)(?:x([0-9]+))?$")
_POSITIONS = re.compile(r"^pos([0-9]+)$")
_PADDING = re.compile(r"^pad([0-9]+)$")
_NAME = re.compile(r"^name=([A-Za-z_][\w.-]*)$")


def _positive(value: str, what: str, where: str) -> int:
    if not _NUMBER.fullmatch(value):
        raise NetworkParseError(f"{where}: {what} must be a number, got {value!r}")
    number = int(value)
    if number <= 0:
        raise NetworkParseError(f"{where}: {what} must be positive, got {number}")
    return number


def _parse_layer(kind: str, tokens: list[str], index: int, lineno: int) -> dict:
    where = f"layer {index} ({kind}, line {lineno})"
    if not tokens or not (arrow := _ARROW.match(tokens[0])):
        raise NetworkParseError(f"{where}: expected '<fan_in>-><fan_out>'")
    fields: dict = {
        "name": f"{kind}{index}",
        "kind": kind,
        "fan_in_channels": _positive(arrow[1], "fan_in", where),
        "fan_out_channels": _positive(arrow[2], "fan_out", where),
    }
    for token in tokens[1:]:
        if match := _KERNEL.match(token):
            fields["kernel_w"] = _positive(match[1], "kernel width", where)
            fields["kernel_h"] = _positive(match[2] or match[1], "kernel height", where)
        elif match := _POSITIONS.match(token):
            fields["out_positions"] = _positive(match[1], "out_positions", where)
        elif match := _PADDING.match(token):
            fields["padding"] = int(match[1])
        elif match := _NAME.match(token):
            fields["name"] = match[1]
            where = f"layer '{match[1]}' (line {lineno})"
        elif token == "dense":
            fields["prunable"] = False
        elif token == "nobias":
            fields["has_bias"] = False
        else:
            raise NetworkParseError(f"{where}: unknown token {token!r}")
    if kind == "conv" and ("kernel_w" not in fields or "out_positions" not in fields):
        raise NetworkParseError(f"{where}: conv layers need k<w>x<h> and pos<P>")
    return fields


def _parse_pool(tokens: list[str], layer: dict | None, lineno: int) -> None:
    if layer is None:
        raise NetworkParseError(f"line {lineno}: pooling before the first layer")
    where = f"layer '{layer['name']}' (line {lineno})"
    if "pool" in layer:
        raise NetworkParseError(f"{where}: layer is already pooled")
    if tokens == ["global"]:
        layer["pool"] = "global"
    elif (
        len(tokens) == 2
        and tokens[0] in ("avg", "max")  # noqa: W503
        and _NUMBER.fullmatch(tokens[1])  # noqa: W503
    ):
        layer["pool"] = tokens[0]
        layer["pool_size"] = _positive(tokens[1], "pool size", where)
    else:
        raise NetworkParseError(
            f"{where}: expected 'pool avg <k>', 'pool max <k>' or 'pool global'"
        )


def parse_network(text: str) -> NetworkSpec:
    input_shape: tuple[int, ...] | None = None
    class_count: int | None = None
    layers: list[dict] = []

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        head, *tokens = line.split()
        if head == "input":
            if len(tokens) != 3 or not all(_NUMBER.fullmatch(tok) for tok in tokens):
                raise NetworkParseError(f"line {lineno}: expected 'input <C> <H> <W>'")
            input_shape = tuple(
                _positive(tok, "input size", f"line {lineno}") for tok in tokens
            )
        elif head == "classes":
            if len(tokens) != 1 or not _NUMBER.fullmatch(tokens[0]):
                raise NetworkParseError(f"line {lineno}: expected 'classes <K>'")
            class_count = _positive(tokens[0], "class count", f"line {lineno}")
        elif head in ("conv", "fc"):
            layers.append(_parse_layer(head, tokens, len(layers) + 1, lineno))
        elif head == "pool":
            _parse_pool(tokens, layers[-1] if layers else None, lineno)
        elif head == "flatten":
            if tokens:
                raise NetworkParseError(f"line {lineno}: 'flatten' takes no arguments")
        else:
            raise NetworkParseError(f"line {lineno}: unknown statement {head!r}")

    if input_shape is None or class_count is None:
        raise NetworkParseError("document must declare 'input' and 'classes'")

    try:
        net = NetworkSpec(
            layers=tuple(LayerSpec(**fields) for fields in layers),
            input_shape=input_shape,
            class_count=class_count,
        )
    except ValidationError as err:
        # First error is the one naming the offending layer
        raise NetworkParseError(err.errors()[0]["msg"]) from None
    logger.debug("parsed network with %d layers", len(net.layers))
    return net


def serialize_network(net: NetworkSpec) -> str:
    lines = [
        "input {} {} {}".format(*net.input_shape),
        f"classes {net.class_count}",
    ]
    for layer in net.layers:
        parts = [layer.kind, f"{layer.fan_in_channels}->{layer.fan_out_channels}"]
        if layer.kind == "conv":
            parts.append(f"k{layer.kernel_w}x{layer.kernel_h}")
            parts.append(f"pos{layer.out_positions}")
            if layer.padding:
                parts.append(f"pad{layer.padding}")
        if not layer.prunable:
            parts.append("dense")
        if not layer.has_bias:
            parts.append("nobias")
        parts.append(f"name={layer.name}")
        lines.append(" ".join(parts))
        if layer.pool == "global":
            lines.append("pool global")
        elif layer.pool != "none":
            lines.append(f"pool {layer.pool} {layer.pool_size}")
    return "\n".join(lines) + "\n"


def param_count(net: NetworkSpec) -> int:
    """Prunable weights only; biases never count."""
    return sum(layer.param_count for layer in net.prunable_layers)


def dense_flops(net: NetworkSpec) -> int:
    # One multiply-accumulate = 2 FLOPs
    return sum(
        2 * layer.param_count * layer.out_positions for layer in net.prunable_layers
    )


def mlp_network(
    input_shape: tuple[int, int, int], class_count: int, width: int, depth: int
) -> NetworkSpec:
    """``depth`` hidden fc layers of ``width`` units followed by the classifier."""
    features = input_shape[0] * input_shape[1] * input_shape[2]
    sizes = [features] + [width] * depth + [class_count]
    layers = tuple(
        LayerSpec(
            name=f"fc{i + 1}",
            kind="fc",
            fan_in_channels=fan_in,
            fan_out_channels=fan_out,
        )
        for i, (fan_in, fan_out) in enumerate(zip(sizes, sizes[1:]))
    )
    return NetworkSpec(layers=layers, input_shape=input_shape, class_count=class_count)


def conv_network(
    input_shape: tuple[int, int, int], class_count: int, width: int, depth: int
) -> NetworkSpec:
    """``depth`` same-padded 3x3 conv layers of ``width`` channels, global
    average pooling and the classifier."""
    if depth < 1:
        raise NetworkParseError("conv family needs at least one conv layer")
    channels, height, width_px = input_shape
    layers = []
    fan_in = channels
    for i in range(depth):
        layers.append(
            LayerSpec(
                name=f"conv{i + 1}",
                kind="conv",
                fan_in_channels=fan_in,
                fan_out_channels=width,
                kernel_w=3,
                kernel_h=3,
                out_positions=height * width_px,
                padding=1,
                pool="global" if i == depth - 1 else "none",
            )
        )
        fan_in = width
    layers.append(
        LayerSpec(
            name=f"fc{depth + 1}",
            kind="fc",
            fan_in_channels=width,
            fan_out_channels=class_count,
        )
    )
    return NetworkSpec(
        layers=tuple(layers), input_shape=input_shape, class_count=class_count
    )
