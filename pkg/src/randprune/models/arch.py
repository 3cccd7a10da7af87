from __future__ import annotations

import math
import typing as t

from pydantic import BaseModel, ConfigDict, PositiveInt, model_validator

__all__ = ("LayerSpec", "NetworkSpec", "LayerKind", "PoolKind")

LayerKind = t.Literal["conv", "fc"]
PoolKind = t.Literal["none", "avg", "max", "global"]


class LayerSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str
    kind: LayerKind
    fan_in_channels: PositiveInt  # n^{l-1}
    fan_out_channels: PositiveInt  # n^l
    kernel_w: PositiveInt = 1
    kernel_h: PositiveInt = 1
    out_positions: PositiveInt = 1
    prunable: bool = True
    has_bias: bool = True
    padding: int = 0
    # Applied after the activation, before the next layer
    pool: PoolKind = "none"
    pool_size: PositiveInt = 1

    @model_validator(mode="after")
    def _check_kind(self) -> LayerSpec:
        if self.kind == "fc":
            if (self.kernel_w, self.kernel_h, self.out_positions) != (1, 1, 1):
                raise ValueError(
                    f"layer '{self.name}': fc layers have a 1x1 kernel and one"
                    " output position"
                )
            if self.padding or self.pool != "none":
                raise ValueError(
                    f"layer '{self.name}': fc layers take no padding or pooling"
                )
        if self.padding < 0:
            raise ValueError(f"layer '{self.name}': padding must be >= 0")
        if self.pool in ("none", "global") and self.pool_size != 1:
            raise ValueError(
                f"layer '{self.name}': pool size only applies to avg/max pooling"
            )
        return self

    @property
    def weight_shape(self) -> tuple[int, ...]:
        if self.kind == "fc":
            return (self.fan_out_channels, self.fan_in_channels)
        return (
            self.fan_out_channels,
            self.fan_in_channels,
            self.kernel_h,
            self.kernel_w,
        )

    @property
    def param_count(self) -> int:
        return math.prod(self.weight_shape)


class NetworkSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    layers: tuple[LayerSpec, ...]
    input_shape: tuple[PositiveInt, PositiveInt, PositiveInt]  # (C, H, W)
    class_count: PositiveInt

    @model_validator(mode="after")
    def _check_dimensions(self) -> NetworkSpec:
        if not self.layers:
            raise ValueError("network has no layers")
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise ValueError("layer names must be unique")
        # Raises on the first incompatible layer
        self.layer_input_shapes()
        last = self.layers[-1]
        if last.kind != "fc" or last.fan_out_channels != self.class_count:
            raise ValueError(
                f"layer '{last.name}': last layer must be fc with"
                f" {self.class_count} outputs"
            )
        if last.pool != "none":
            raise ValueError(f"layer '{last.name}': logits cannot be pooled")
        return self

    def layer_input_shapes(self) -> list[tuple[int, int, int]]:
        """Input shape (C, H, W) seen by every layer; fc inputs are flattened
        so their shape is (features, 1, 1)."""
        shapes = []
        c, h, w = self.input_shape
        flat = False
        for layer in self.layers:
            shapes.append((c, h, w))
            if layer.kind == "conv":
                if flat:
                    raise ValueError(
                        f"layer '{layer.name}': conv cannot follow an fc layer"
                    )
                if c != layer.fan_in_channels:
                    raise ValueError(
                        f"layer '{layer.name}': expects {layer.fan_in_channels}"
                        f" input channels, previous output has {c}"
                    )
                h = h + 2 * layer.padding - layer.kernel_h + 1
                w = w + 2 * layer.padding - layer.kernel_w + 1
                if h <= 0 or w <= 0:
                    raise ValueError(
                        f"layer '{layer.name}': kernel larger than padded input"
                    )
                if h * w != layer.out_positions:
                    raise ValueError(
                        f"layer '{layer.name}': declares {layer.out_positions}"
                        f" output positions, geometry gives {h}x{w}={h * w}"
                    )
                c = layer.fan_out_channels
                if layer.pool == "global":
                    h = w = 1
                elif layer.pool in ("avg", "max"):
                    k = layer.pool_size
                    if h % k or w % k:
                        raise ValueError(
                            f"layer '{layer.name}': {h}x{w} output does not"
                            f" tile into {k}x{k} pooling windows"
                        )
                    h, w = h // k, w // k
            else:
                features = c * h * w
                if features != layer.fan_in_channels:
                    raise ValueError(
                        f"layer '{layer.name}': expects {layer.fan_in_channels}"
                        f" inputs, previous output flattens to {features}"
                    )
                c, h, w = layer.fan_out_channels, 1, 1
                flat = True
        return shapes

    @property
    def prunable_layers(self) -> tuple[LayerSpec, ...]:
        return tuple(layer for layer in self.layers if layer.prunable)
