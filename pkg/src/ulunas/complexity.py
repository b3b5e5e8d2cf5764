"""Parameter and multiply-accumulate accounting.

Two independent routes are provided. :func:`report` derives per-layer counts
from layer hyper-parameters recorded at construction, without running the
model. :func:`instrumented_macs` runs a forward pass with hooks that count
multiply-accumulates from the tensors actually flowing through each layer.
The two must agree layer by layer.

Conventions (one MAC = one multiply plus one add, per frame, times 62.5
frames/s):

* convolutions: ``kt * kf * Cin / G * Cout * F_out``, plus one per output for
  the bias; transposed convolutions use the same formula on their output map.
* GRU: ``3h(i + h)`` for the gate matrices, ``6h`` for both bias vectors and
  ``7h`` for the gate arithmetic, per step and direction.
* linear layers: ``i * o + o`` per position.
* batch and layer norm: two per element; PReLU: one per element.
* APReLU: not counted.
* band merge and split: one dense product each.

Parameters include the fixed band merge/split matrices, reported separately.
Rep blocks are counted in their merged inference form.
"""

from dataclasses import asdict, dataclass, field

import torch
from torch import nn

from .blocks import RepBlock, inference_form
from .frontend import HOP, N_BINS, SAMPLE_RATE
from .layers import APReLU, BandProjection, CausalConv2d

FRAME_RATE = SAMPLE_RATE / HOP


@dataclass
class CountConfig:
    """Which secondary terms enter the MAC count."""

    bias: bool = True
    norm: bool = True
    activation: bool = True
    recurrent_gates: bool = True
    band_projection: bool = True


@dataclass
class LayerCost:
    name: str
    kind: str
    params: int
    fixed_params: int
    macs_per_frame: int


@dataclass
class ComplexityReport:
    """Totals plus per-layer attribution.

    ``params_total`` counts learnable and fixed (band projection) scalars;
    ``params_learnable`` only the former. ``macs_per_second`` is the per-frame
    sum times ``frame_rate``.
    """

    params_total: int
    params_learnable: int
    params_fixed: int
    macs_per_second: float
    frame_rate: float
    per_layer: list = field(default_factory=list)
    flags: dict = field(default_factory=dict)

    @property
    def macs_per_frame(self):
        return sum(layer.macs_per_frame for layer in self.per_layer)

    def as_dict(self):
        out = asdict(self)
        out["per_layer"] = [asdict(layer) for layer in self.per_layer]
        return out


COUNTED = (CausalConv2d, nn.BatchNorm2d, nn.PReLU, APReLU, nn.GRU, nn.Linear, nn.LayerNorm, BandProjection)


def _kind(module):
    for cls in COUNTED:
        if isinstance(module, cls):
            return cls.__name__
    return None


def counted_layers(model):
    """``(name, module)`` for every leaf the counters attribute costs to, in forward order."""
    out = []
    for name, module in model.named_modules():
        if _kind(module) is None:
            continue
        if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
            continue
        out.append((name, module))
    return out


def _own_params(module):
    if isinstance(module, CausalConv2d):
        return sum(p.numel() for p in module.conv.parameters())
    return sum(p.numel() for p in module.parameters(recurse=False))


def _gru_step_macs(gru, cfg):
    h = gru.hidden_size
    per_dir = 3 * h * gru.input_size + 3 * h * h
    if gru.bias and cfg.bias:
        per_dir += 6 * h
    if cfg.recurrent_gates:
        per_dir += 7 * h
    return per_dir * (2 if gru.bidirectional else 1)


def analytic_macs(module, cfg=CountConfig()):
    """MACs per frame of one counted layer from its recorded hyper-parameters."""
    if isinstance(module, CausalConv2d):
        kt, kf = module.kernel_size
        f = module.freq_out
        macs = kt * kf * module.in_channels // module.groups * module.out_channels * f
        if module.conv.bias is not None and cfg.bias:
            macs += module.out_channels * f
        return macs
    if isinstance(module, nn.BatchNorm2d):
        return 2 * module.elements if cfg.norm else 0
    if isinstance(module, nn.LayerNorm):
        return 2 * module.elements if cfg.norm else 0
    if isinstance(module, nn.PReLU):
        return module.elements if cfg.activation else 0
    if isinstance(module, APReLU):
        return 0
    if isinstance(module, nn.GRU):
        return module.positions * _gru_step_macs(module, cfg)
    if isinstance(module, nn.Linear):
        per = module.in_features * module.out_features
        if module.bias is not None and cfg.bias:
            per += module.out_features
        return module.positions * per
    if isinstance(module, BandProjection):
        return module.positions * module.matrix.numel() if cfg.band_projection else 0
    raise TypeError(f"not a counted layer: {type(module).__name__}")


def _prepare(model):
    if any(isinstance(m, RepBlock) for m in model.modules()):
        return inference_form(model)
    return model


def count_params(model, include_fixed=True):
    """Learnable scalars, plus the fixed band projection matrices unless ``include_fixed`` is False."""
    model = _prepare(model)
    learnable = sum(p.numel() for p in model.parameters())
    if not include_fixed:
        return learnable
    return learnable + sum(m.matrix.numel() for m in model.modules() if isinstance(m, BandProjection))


def count_macs(model, cfg=CountConfig()):
    """Multiply-accumulates per second of audio."""
    return report(model, cfg).macs_per_second


def report(model, cfg=CountConfig()):
    """Per-layer and total parameters and MACs from layer hyper-parameters."""
    model = _prepare(model)
    layers = []
    for name, module in counted_layers(model):
        fixed = module.matrix.numel() if isinstance(module, BandProjection) else 0
        layers.append(LayerCost(name, _kind(module), _own_params(module), fixed, analytic_macs(module, cfg)))
    learnable = sum(layer.params for layer in layers)
    if learnable != sum(p.numel() for p in model.parameters()):
        raise RuntimeError("some parameters belong to no counted layer")
    fixed = sum(layer.fixed_params for layer in layers)
    per_frame = sum(layer.macs_per_frame for layer in layers)
    return ComplexityReport(params_total=learnable + fixed, params_learnable=learnable, params_fixed=fixed,
                            macs_per_second=per_frame * FRAME_RATE, frame_rate=FRAME_RATE,
                            per_layer=layers, flags=asdict(cfg))


def instrumented_macs(model, frames=3, cfg=CountConfig(), inputs=None):
    """Per-layer MACs per frame measured by hooks during a forward pass.

    Every counted layer is hooked; the count is derived from the runtime shapes
    of its input and output tensors, then divided by batch size times frames.

    Args:
        model: A :class:`Model`, or any module when ``inputs`` is given.
        frames: Frames of random input fed to a :class:`Model`.
        cfg: Counting flags.
        inputs: Explicit ``[B, C, T, F]`` input, for blocks or single layers.

    Returns:
        Dict mapping layer name to MACs per frame.
    """
    model = _prepare(model)
    counts = {}
    if inputs is None:
        inputs = torch.randn(2, model.arch.input_channels, frames, N_BINS)
    norm = inputs.shape[0] * inputs.shape[2]

    def hook(name):
        def fn(module, inputs, output):
            x = inputs[0]
            y = output[0] if isinstance(output, tuple) else output
            counts[name] = counts.get(name, 0) + _measure(module, x, y, cfg)
        return fn

    handles = [m.register_forward_hook(hook(n)) for n, m in counted_layers(model)]
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            model(inputs)
    finally:
        for h in handles:
            h.remove()
        model.train(was_training)
    out = {}
    for name, total in counts.items():
        if total % norm:
            raise RuntimeError(f"{name}: {total} MACs not divisible by {norm} frames")
        out[name] = total // norm
    return out


def _measure(module, x, y, cfg):
    """Total multiply-accumulates of one call from runtime tensors."""
    if isinstance(module, CausalConv2d):
        w = module.conv.weight
        # kt * kf * Cin / G per output pixel, for both conv and transposed conv layouts
        macs = y.numel() * (w.numel() // y.shape[1])
        if module.conv.bias is not None and cfg.bias:
            macs += y.numel()
        return macs
    if isinstance(module, (nn.BatchNorm2d, nn.LayerNorm)):
        return 2 * x.numel() if cfg.norm else 0
    if isinstance(module, nn.PReLU):
        return y.numel() if cfg.activation else 0
    if isinstance(module, APReLU):
        return 0
    if isinstance(module, nn.GRU):
        steps = x.shape[0] * x.shape[1]
        per = module.weight_ih_l0.numel() + module.weight_hh_l0.numel()
        if module.bias and cfg.bias:
            per += module.bias_ih_l0.numel() + module.bias_hh_l0.numel()
        if cfg.recurrent_gates:
            per += 7 * module.hidden_size
        return steps * per * (2 if module.bidirectional else 1)
    if isinstance(module, nn.Linear):
        rows = x.numel() // module.in_features
        per = module.weight.numel() + (module.bias.numel() if module.bias is not None and cfg.bias else 0)
        return rows * per
    if isinstance(module, BandProjection):
        rows = x.numel() // x.shape[-1]
        return rows * module.matrix.numel() if cfg.band_projection else 0
    raise TypeError(type(module).__name__)


def format_report(rep, per_layer=False):
    """Human-readable summary."""
    lines = [
        f"params      {rep.params_total / 1e3:9.2f} k  "
        f"(learnable {rep.params_learnable / 1e3:.2f} k, fixed {rep.params_fixed / 1e3:.2f} k)",
        f"MACS        {rep.macs_per_second / 1e6:9.2f} M/s  ({rep.macs_per_frame} per frame "
        f"at {rep.frame_rate:g} frames/s)",
        "counted     " + ", ".join(k for k, v in rep.flags.items() if v),
    ]
    if per_layer:
        for layer in rep.per_layer:
            lines.append(f"  {layer.name:48s} {layer.kind:14s} {layer.params + layer.fixed_params:8d} "
                         f"{layer.macs_per_frame:10d}")
    return "\n".join(lines)
