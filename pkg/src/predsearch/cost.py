"""Analytic multiply-add and parameter counts for AnyNet-style networks.

Network convention (224x224 input):

* stem: 3x3 conv, 3 -> 32 channels, stride 2
* four stages; the first block of each stage has stride 2
* block: 1x1 conv (w_in -> w_b), 3x3 group conv (w_b -> w_b, ``g`` groups,
  carries the stride), 1x1 conv (w_b -> w), residual add; a 1x1 projection
  conv (stride ``s``) on the shortcut when the shape changes
* head: global average pool + linear layer to 1000 classes

Only convolutions and the final linear layer are counted. BatchNorm,
activations, residual adds and pooling cost nothing; BatchNorm contributes
two parameters per channel.
"""
from __future__ import annotations

from .errors import MembershipError
from .space import DiscreteArch, SpaceDef, round_half_up

INPUT_RES = 224
STEM_WIDTH = 32
NUM_CLASSES = 1000


def _out_size(h, stride):
    return -(-h // stride)


def conv_flops(h, w, c_in, c_out, k, stride=1, groups=1) -> int:
    """Multiply-adds of a ``k x k`` convolution on an ``h x w`` input (same padding)."""
    if min(h, w, c_in, c_out, k, stride, groups) <= 0:
        raise ValueError("conv_flops arguments must be positive")
    if c_in % groups or c_out % groups:
        raise ValueError(f"channels {c_in}->{c_out} not divisible by {groups} groups")
    return _out_size(h, stride) * _out_size(w, stride) * k * k * (c_in // groups) * c_out


def conv_params(c_in, c_out, k, groups=1) -> int:
    return k * k * (c_in // groups) * c_out


def anynet_layers(depths, widths, ratios, groups):
    """Yield ``(h, c_in, c_out, k, stride, groups)`` for every convolution."""
    h = INPUT_RES
    yield (h, 3, STEM_WIDTH, 3, 2, 1)
    h = _out_size(h, 2)
    w_in = STEM_WIDTH
    for d, w, r, g in zip(depths, widths, ratios, groups):
        w_b = round_half_up(w * r)
        for j in range(d):
            s = 2 if j == 0 else 1
            yield (h, w_in, w_b, 1, 1, 1)
            yield (h, w_b, w_b, 3, s, g)
            yield (_out_size(h, s), w_b, w, 1, 1, 1)
            if s != 1 or w_in != w:
                yield (h, w_in, w, 1, s, 1)
            h = _out_size(h, s)
            w_in = w


def anynet_cost_values(depths, widths, ratios, groups):
    """``(flops, params)`` for per-stage lists; only structural validity is checked.

    Closed form per stage; agrees exactly with summing ``anynet_layers``.
    """
    h = _out_size(INPUT_RES, 2)
    flops = h * h * 9 * 3 * STEM_WIDTH
    params = 9 * 3 * STEM_WIDTH + 2 * STEM_WIDTH
    w_in = STEM_WIDTH
    for i, (d, w, r, g) in enumerate(zip(depths, widths, ratios, groups), 1):
        w_b = round_half_up(w * r)
        if w_b < g or w_b % g:
            raise MembershipError(f"g{i}", g, f"must divide bottleneck width {w_b}")
        if d < 1:
            continue
        h2 = _out_size(h, 2)
        conv3 = 9 * (w_b // g) * w_b
        block = w_b * w + conv3 + w_b * w  # a stride-1 block without shortcut, per pixel
        flops += h * h * w_in * w_b + h2 * h2 * (conv3 + w_b * w + w_in * w)
        flops += (d - 1) * h2 * h2 * block
        params += w_in * w_b + conv3 + w_b * w + w_in * w + 2 * (w_b + w_b + w + w)
        params += (d - 1) * (block + 2 * (w_b + w_b + w))
        h = h2
        w_in = w
    flops += w_in * NUM_CLASSES
    params += w_in * NUM_CLASSES + NUM_CLASSES
    return flops, params


def anynet_cost_layerwise(depths, widths, ratios, groups):
    """Reference implementation: sum ``conv_flops`` over ``anynet_layers``."""
    flops = 0
    params = 0
    for h, c_in, c_out, k, s, g in anynet_layers(depths, widths, ratios, groups):
        flops += conv_flops(h, h, c_in, c_out, k, s, g)
        params += conv_params(c_in, c_out, k, g) + 2 * c_out
    w_last = widths[-1] if widths else STEM_WIDTH
    flops += w_last * NUM_CLASSES
    params += w_last * NUM_CLASSES + NUM_CLASSES
    return flops, params


def split_stages(space: SpaceDef, arch: DiscreteArch):
    """Per-stage ``(depths, widths, ratios, groups)`` lists from an AnyNet arch."""
    n = len(space.params) // 4
    v = list(arch)
    return v[:n], v[n : 2 * n], v[2 * n : 3 * n], v[3 * n :]


def anynet_cost(space: SpaceDef, arch: DiscreteArch):
    space.check(arch)
    return anynet_cost_values(*split_stages(space, arch))


def in_window(flops, f, delta) -> bool:
    return abs(flops - f) <= delta


class CostCache:
    """Memoised ``anynet_cost`` keyed by architecture."""

    def __init__(self, space: SpaceDef):
        self.space = space
        self._cache: dict = {}

    def __call__(self, arch: DiscreteArch) -> int:
        hit = self._cache.get(arch)
        if hit is None:
            hit = anynet_cost_values(*split_stages(self.space, arch))[0]
            self._cache[arch] = hit
        return hit
