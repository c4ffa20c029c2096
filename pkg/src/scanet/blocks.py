"""Parameter storage and the reusable conv / inverted-residual / upsample blocks."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


class ParamStore:
    """Ordered name -> tensor map of learnables plus non-learnable buffers.

    ``scope(prefix)`` returns a view whose names are prefixed with
    ``prefix + "."``; views share storage with their root.
    """

    def __init__(self, _root: "ParamStore | None" = None, _prefix: str = ""):
        if _root is None:
            self._params: "OrderedDict[str, Tensor]" = OrderedDict()
            self._buffers: "OrderedDict[str, Tensor]" = OrderedDict()
        else:
            self._params = _root._params
            self._buffers = _root._buffers
        self._prefix = _prefix

    def _key(self, name: str) -> str:
        return f"{self._prefix}{name}"

    def scope(self, prefix: str) -> "ParamStore":
        return ParamStore(self, self._key(prefix) + ".")

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        key = self._key(name)
        if key in self._params or key in self._buffers:
            raise KeyError(f"duplicate parameter name {key!r}")
        t = Tensor(value, requires_grad=True, name=key)
        self._params[key] = t
        return t

    def add_buffer(self, name: str, value: np.ndarray) -> Tensor:
        key = self._key(name)
        if key in self._params or key in self._buffers:
            raise KeyError(f"duplicate buffer name {key!r}")
        t = Tensor(value, requires_grad=False, name=key)
        self._buffers[key] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        key = self._key(name)
        if key in self._params:
            return self._params[key]
        return self._buffers[key]

    def __contains__(self, name: str) -> bool:
        key = self._key(name)
        return key in self._params or key in self._buffers

    def params(self) -> Iterator[tuple[str, Tensor]]:
        """Learnable tensors under this view, in insertion order."""
        for k, v in self._params.items():
            if k.startswith(self._prefix):
                yield k, v

    def buffers(self) -> Iterator[tuple[str, Tensor]]:
        for k, v in self._buffers.items():
            if k.startswith(self._prefix):
                yield k, v

    def state(self) -> "OrderedDict[str, np.ndarray]":
        """Parameters then buffers, as raw arrays (not copied)."""
        out: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for k, v in self.params():
            out[k] = v.data
        for k, v in self.buffers():
            out[k] = v.data
        return out

    def load_state(self, state: dict, strict: bool = True) -> None:
        names = dict(self.params())
        names.update(self.buffers())
        if strict:
            missing = set(names) - set(state)
            if missing:
                raise KeyError(f"state is missing {sorted(missing)[:5]}")
        for k, arr in state.items():
            if k not in names:
                if strict:
                    raise KeyError(f"unexpected tensor {k!r} in state")
                continue
            if names[k].data.shape != tuple(arr.shape):
                raise ShapeError(f"{k}: stored shape {tuple(arr.shape)} != model shape {names[k].shape}")
            names[k].data[...] = arr

    def zero_grad(self) -> None:
        for _, t in self.params():
            t.grad = None

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for k, v in self._params.items():
            out._params[k] = Tensor(v.data.copy(), requires_grad=True, name=k)
        for k, v in self._buffers.items():
            out._buffers[k] = Tensor(v.data.copy(), name=k)
        return out

    def __len__(self) -> int:
        return sum(1 for _ in self.params())


def param_count(params: ParamStore) -> int:
    """Number of learnable scalars (buffers excluded)."""
    return sum(t.size for _, t in params.params())


@dataclass(frozen=True)
class BlockSpec:
    in_channels: int
    out_channels: int
    stride: int = 1
    expansion_ratio: int = 1
    kernel_size: int = 3

    def __post_init__(self):
        if min(self.in_channels, self.out_channels, self.stride, self.kernel_size) < 1:
            raise ValueError(f"block fields must be positive: {self}")
        if self.expansion_ratio < 1:
            raise ValueError(f"expansion_ratio must be >= 1: {self}")

    @property
    def hidden(self) -> int:
        return self.in_channels * self.expansion_ratio

    @property
    def has_shortcut(self) -> bool:
        return self.stride == 1 and self.in_channels == self.out_channels


# ---------------------------------------------------------------------------
# initialization


def init_conv(params: ParamStore, name: str, out_c: int, in_per_group: int, k: int, rng, bias: bool = False):
    fan_in = in_per_group * k * k
    bound = 1.0 / np.sqrt(fan_in)
    params.add_param(f"{name}.weight", rng.uniform(-bound, bound, (out_c, in_per_group, k, k)))
    if bias:
        params.add_param(f"{name}.bias", rng.uniform(-bound, bound, (1, out_c, 1, 1)))


def init_bn(params: ParamStore, name: str, c: int) -> None:
    params.add_param(f"{name}.gamma", np.ones((1, c, 1, 1)))
    params.add_param(f"{name}.beta", np.zeros((1, c, 1, 1)))
    params.add_buffer(f"{name}.running_mean", np.zeros((1, c, 1, 1)))
    params.add_buffer(f"{name}.running_var", np.ones((1, c, 1, 1)))


def init_conv_bn(params: ParamStore, name: str, out_c: int, in_c: int, k: int, rng, groups: int = 1):
    init_conv(params, f"{name}.conv", out_c, in_c // groups, k, rng)
    init_bn(params, f"{name}.bn", out_c)


def init_conv_bn_relu(params: ParamStore, spec: BlockSpec, rng) -> ParamStore:
    init_conv_bn(params, "unit", spec.out_channels, spec.in_channels, spec.kernel_size, rng)
    return params


def init_inverted_residual(params: ParamStore, spec: BlockSpec, rng) -> ParamStore:
    hid = spec.hidden
    init_conv_bn(params, "expand", hid, spec.in_channels, 1, rng)
    init_conv_bn(params, "depthwise", hid, hid, spec.kernel_size, rng, groups=hid)
    init_conv_bn(params, "project", spec.out_channels, hid, 1, rng)
    return params


def inverted_residual_param_count(spec: BlockSpec) -> int:
    """Closed-form learnable count: three bias-free convs, each with bn gamma/beta."""
    hid, k = spec.hidden, spec.kernel_size
    return (
        spec.in_channels * hid + 2 * hid
        + hid * k * k + 2 * hid
        + hid * spec.out_channels + 2 * spec.out_channels
    )


# ---------------------------------------------------------------------------
# forward passes


def _check_channels(x: Tensor, expected: int, what: str) -> None:
    if x.shape[1] != expected:
        raise ShapeError(f"{what} expects {expected} input channels, got tensor {x.shape}")


def conv_bn(x: Tensor, params: ParamStore, name: str, training: bool, stride: int = 1, groups: int = 1) -> Tensor:
    w = params[f"{name}.conv.weight"]
    k = w.shape[-1]
    y = T.conv2d(x, w, None, stride=stride, padding=k // 2, groups=groups)
    return T.batch_norm(
        y,
        params[f"{name}.bn.gamma"],
        params[f"{name}.bn.beta"],
        params[f"{name}.bn.running_mean"],
        params[f"{name}.bn.running_var"],
        training,
    )


def conv_bn_relu(spec: BlockSpec, x: Tensor, params: ParamStore, training: bool) -> Tensor:
    """conv (size-preserving padding) -> batch norm -> relu."""
    _check_channels(x, spec.in_channels, "conv_bn_relu")
    return T.relu(conv_bn(x, params, "unit", training, stride=spec.stride))


def inverted_residual_branch(spec: BlockSpec, x: Tensor, params: ParamStore, training: bool) -> Tensor:
    h = T.relu6(conv_bn(x, params, "expand", training))
    h = T.relu6(conv_bn(h, params, "depthwise", training, stride=spec.stride, groups=spec.hidden))
    return conv_bn(h, params, "project", training)


def inverted_residual(spec: BlockSpec, x: Tensor, params: ParamStore, training: bool) -> Tensor:
    """Expand (1x1) -> depthwise (kxk, strided) -> linear project (1x1).

    The identity shortcut is added only when stride is 1 and the channel
    count is unchanged.
    """
    _check_channels(x, spec.in_channels, "inverted_residual")
    y = inverted_residual_branch(spec, x, params, training)
    if spec.has_shortcut:
        y = T.add(y, x)
    return y


def upsample_block(spec: BlockSpec, x: Tensor, params: ParamStore, training: bool) -> Tensor:
    if spec.stride != 1:
        raise ValueError("upsample_block runs its inverted residual at stride 1")
    return T.bilinear_upsample(inverted_residual(spec, x, params, training), 2)
