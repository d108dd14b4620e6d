"""One-shot selection of which conv layers to decompose.

Every decomposable convolution is wrapped into a trainable mixture

    op(x) = alpha * Conv(x) + (1 - alpha) * TTConv(x),   alpha in [0, 1]

with alpha initialized to 0.5.  Each iteration trains the model for M epochs
at constant lr, then the layer with the smallest alpha is permanently replaced
by its decomposed branch when that alpha has dropped below 0.5.  After K
iterations the surviving mixtures collapse back to their plain convolutions
and the model is fine-tuned.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .ttconv import ConvSpec, factorize_kernel, lower, select_ranks


class MixedOp(nn.Layer):
    """alpha-weighted sum of a dense conv branch and its lowered TT branch."""

    def __init__(self, conv_branch: nn.Conv2d, tt_branch: nn.Sequential,
                 layer_id: int, name=""):
        super().__init__(name or f"mixed{layer_id}")
        self.conv_branch = conv_branch
        self.tt_branch = tt_branch
        self.layer_id = layer_id
        self.alpha = self.add_param(
            "alpha", np.asarray(0.5, dtype=conv_branch.weight.data.dtype),
            weight_decay=False, clamp01=True)
        self._cache = None

    def children(self):
        return [self.conv_branch, self.tt_branch]

    def forward(self, x, train=False):
        conv_out = self.conv_branch.forward(x, train=train)
        tt_out = self.tt_branch.forward(x, train=train)
        self._cache = (conv_out, tt_out)
        a = float(self.alpha.data)
        return a * conv_out + (1.0 - a) * tt_out

    def backward(self, gout):
        conv_out, tt_out = self._need_cache(self._cache)
        # d loss / d alpha = <gout, Conv(x) - TTConv(x)>
        self.alpha.grad += np.asarray((gout * (conv_out - tt_out)).sum(),
                                      dtype=self.alpha.grad.dtype)
        a = float(self.alpha.data)
        gx = self.conv_branch.backward(a * gout)
        gx = gx + self.tt_branch.backward((1.0 - a) * gout)
        return gx

    def cost_walk(self, h, w, walk):
        # Both branches execute, so both are costed.
        mc, pc, oh, ow = walk(self.conv_branch, h, w)
        mt, pt, _, _ = walk(self.tt_branch, h, w)
        return mc + mt, pc + pt + 1, oh, ow


def build_tt_branch(conv: nn.Conv2d, ranks, rng=None, from_decomposition=True):
    """Lower a conv layer's kernel into its stacked-conv TT branch."""
    spec = ConvSpec(conv.in_channels, conv.out_channels, conv.kernel,
                    stride=conv.stride, padding=conv.padding,
                    has_bias=conv.bias is not None)
    dtype = conv.weight.data.dtype
    weight = conv.weight.data.astype(np.float64)
    if not from_decomposition:
        if rng is None:
            raise ValueError("random init needs an rng")
        weight = rng.standard_normal(weight.shape) * weight.std()
    bias = conv.bias.data.astype(np.float64) if conv.bias is not None else None
    factors = factorize_kernel(weight, ranks, spec, bias=bias)
    plan = lower(factors)

    layers = []
    for i, st in enumerate(plan.stages):
        if st.shared_kernel:
            layer = nn.Conv2d(st.groups * st.weight.shape[0], st.groups,
                              st.weight.shape[1], stride=st.stride,
                              padding=st.padding, groups=st.groups,
                              shared_kernel=True, dtype=dtype,
                              name=f"{conv.name}.tt{i}")
        else:
            out_ch, in_ch, l, _ = st.weight.shape
            layer = nn.Conv2d(in_ch, out_ch, l, stride=st.stride,
                              padding=st.padding, bias=st.bias is not None,
                              dtype=dtype, name=f"{conv.name}.tt{i}")
        layer.weight.data[...] = st.weight.astype(dtype)
        if st.bias is not None:
            layer.bias.data[...] = st.bias.astype(dtype)
        layers.append(layer)
    return nn.Sequential(*layers, name=f"{conv.name}.tt")


def _replace_in_tree(root, old, new) -> bool:
    if isinstance(root, nn.Sequential):
        for i, child in enumerate(root.layers):
            if child is old:
                root.layers[i] = new
                return True
            if _replace_in_tree(child, old, new):
                return True
        return False
    if isinstance(root, nn.ResidualBlock):
        for attr in ("main", "shortcut"):
            child = getattr(root, attr)
            if child is None:
                continue
            if child is old:
                setattr(root, attr, new)
                return True
            if _replace_in_tree(child, old, new):
                return True
        return False
    if isinstance(root, MixedOp):
        return False
    return False


def _iter_convs(layer):
    if isinstance(layer, nn.Conv2d):
        yield layer
    elif isinstance(layer, nn.Sequential):
        for child in layer.layers:
            yield from _iter_convs(child)
    elif isinstance(layer, nn.ResidualBlock):
        yield from _iter_convs(layer.main)
        if layer.shortcut is not None:
            yield from _iter_convs(layer.shortcut)


def _iter_mixed(layer):
    if isinstance(layer, MixedOp):
        yield layer
    elif isinstance(layer, nn.Sequential):
        for child in layer.layers:
            yield from _iter_mixed(child)
    elif isinstance(layer, nn.ResidualBlock):
        yield from _iter_mixed(layer.main)
        if layer.shortcut is not None:
            yield from _iter_mixed(layer.shortcut)


def wrap_model(model, rng=None, from_decomposition=True):
    """Replace every decomposable conv with a MixedOp at alpha = 0.5.

    Returns the list of MixedOps in traversal order (layer_id order).
    Rejects models with no decomposable layer and models already wrapped.
    """
    if any(True for _ in _iter_mixed(model)):
        raise ValueError("model already wrapped")
    mixed = []
    for conv in list(_iter_convs(model)):
        ranks = select_ranks(ConvSpec(conv.in_channels, conv.out_channels,
                                      conv.kernel, stride=conv.stride,
                                      padding=conv.padding))
        if ranks is None:
            continue
        op = MixedOp(conv, build_tt_branch(conv, ranks, rng=rng,
                                           from_decomposition=from_decomposition),
                     layer_id=len(mixed), name=f"{conv.name}.mixed")
        if not _replace_in_tree(model, conv, op):
            raise RuntimeError(f"could not locate conv {conv.name!r} in the model")
        mixed.append(op)
    if not mixed:
        raise ValueError("model has no decomposable conv layers")
    return mixed


@dataclass
class YardConfig:
    m_epochs: int = 1            # epochs per iteration
    iterations: int = 4          # K
    fine_tune_epochs: int = 10
    train: nn.TrainConfig = field(default_factory=nn.TrainConfig)
    from_decomposition: bool = True

    def __post_init__(self):
        if self.m_epochs < 1 or self.iterations < 1:
            raise ValueError("m_epochs and iterations must be >= 1")


@dataclass
class IterationRecord:
    iteration: int
    alphas: dict           # layer_id -> alpha at decision time
    argmin_layer: int
    argmin_alpha: float
    replaced: bool


@dataclass
class YardReport:
    records: list = field(default_factory=list)
    assignment: dict = field(default_factory=dict)   # layer_id -> "conv" | "ttconv"
    baseline_macs: int = 0
    baseline_params: int = 0
    final_macs: int = 0
    final_params: int = 0

    CSV_HEADER = "iteration,layer_id,alpha,replaced"

    def replacement_sequence(self):
        return [r.argmin_layer for r in self.records if r.replaced]

    def to_csv(self) -> str:
        lines = [self.CSV_HEADER]
        for r in self.records:
            lines.append(f"{r.iteration},{r.argmin_layer},{r.argmin_alpha:.6f},"
                         f"{int(r.replaced)}")
        return "\n".join(lines) + "\n"

    def summary_json(self) -> str:
        return json.dumps({
            "assignment": {str(k): v for k, v in self.assignment.items()},
            "baseline": {"macs": self.baseline_macs, "params": self.baseline_params},
            "final": {"macs": self.final_macs, "params": self.final_params},
            "replacements": self.replacement_sequence(),
        }, indent=2)


def yard_iteration(model, mixed_ops, train_set, test_set, cfg: YardConfig,
                   iteration: int, log_rows=None) -> IterationRecord:
    """Train M epochs at constant lr, then replace the argmin-alpha layer if
    its alpha fell below 0.5.  Ties break toward the smaller layer_id."""
    remaining = [op for op in mixed_ops if _contains(model, op)]
    if not remaining:
        raise ValueError("no MixedOp remains")
    train_cfg = replace(cfg.train, epochs=cfg.m_epochs, schedule="constant",
                        warmup_epochs=0, seed=cfg.train.seed + iteration)
    nn.fit(model, train_set, test_set, train_cfg,
           alpha_params=[op.alpha for op in remaining], log_rows=log_rows)

    alphas = {op.layer_id: float(op.alpha.data) for op in remaining}
    argmin_op = min(remaining, key=lambda op: (float(op.alpha.data), op.layer_id))
    a = float(argmin_op.alpha.data)
    replaced = a < 0.5
    if replaced:
        if not _replace_in_tree(model, argmin_op, argmin_op.tt_branch):
            raise RuntimeError("failed to splice tt branch")
    return IterationRecord(iteration, alphas, argmin_op.layer_id, a, replaced)


def _contains(root, target) -> bool:
    return any(op is target for op in _iter_mixed(root))


def finalize(model, mixed_ops):
    """Collapse every remaining MixedOp to its conv branch, verbatim."""
    for op in mixed_ops:
        if _contains(model, op):
            if not _replace_in_tree(model, op, op.conv_branch):
                raise RuntimeError("failed to collapse mixed op")
    if any(True for _ in _iter_mixed(model)):
        raise RuntimeError("MixedOp left after finalize")
    return model


def run_yard(model, train_set, test_set, cfg: YardConfig, input_hw,
             rng=None, log_rows=None):
    """Full pipeline: wrap -> K iterations -> finalize -> fine-tune.

    Returns (model, YardReport, history of the fine-tune phase).
    """
    h, w = input_hw
    report = YardReport()
    report.baseline_macs, report.baseline_params = nn.model_cost(model, h, w)

    mixed = wrap_model(model, rng=rng, from_decomposition=cfg.from_decomposition)
    if cfg.iterations > len(mixed):
        raise ValueError(f"K={cfg.iterations} exceeds the {len(mixed)} "
                         "decomposable layers")
    for it in range(cfg.iterations):
        rec = yard_iteration(model, mixed, train_set, test_set, cfg, it,
                             log_rows=log_rows)
        report.records.append(rec)
        if all(not _contains(model, op) for op in mixed):
            break
    finalize(model, mixed)

    replaced_ids = set(report.replacement_sequence())
    for op in mixed:
        report.assignment[op.layer_id] = "ttconv" if op.layer_id in replaced_ids \
            else "conv"

    ft_cfg = replace(cfg.train, epochs=cfg.fine_tune_epochs,
                     seed=cfg.train.seed + 1_000_003)
    history = nn.fit(model, train_set, test_set, ft_cfg, log_rows=log_rows)

    report.final_macs, report.final_params = nn.model_cost(model, h, w)
    return model, report, history
