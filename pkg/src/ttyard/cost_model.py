"""Exact MAC and parameter accounting for dense and decomposed convolutions.

MACs count scalar multiply-accumulates of conv and linear layers only, the
convention behind the community "GFLOPs" figures for CNNs.  BatchNorm and
element-wise ops contribute parameters but no MACs.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

from .ops import conv_out_size
from .ttconv import ConvSpec, RankChoice, ThreeConvPlan, select_ranks


@dataclass(frozen=True)
class LayerCost:
    macs: int
    params: int
    out_h: int
    out_w: int

    def __post_init__(self):
        if min(self.macs, self.params, self.out_h, self.out_w) < 0:
            raise ValueError("negative cost fields")


def cost_dense(spec: ConvSpec, in_h: int, in_w: int) -> LayerCost:
    """Cost of the plain convolution: macs = OH*OW*C*S*l^2."""
    oh = conv_out_size(in_h, spec.kernel, spec.stride, spec.padding)
    ow = conv_out_size(in_w, spec.kernel, spec.stride, spec.padding)
    c, s, l = spec.in_channels, spec.out_channels, spec.kernel
    macs = oh * ow * c * s * l * l
    params = c * s * l * l + (s if spec.has_bias else 0)
    return LayerCost(macs, params, oh, ow)


def cost_ttconv(spec: ConvSpec, ranks: RankChoice, in_h: int, in_w: int) -> LayerCost:
    """Cost of the decomposed layer, summed stage by stage.

    The stride lives on the group-conv stage, so stage 1 runs at the input
    resolution; this refines the uniform H*W of the asymptotic estimate into
    an exact count.  The shared group kernel is counted once.
    """
    c, s, l = spec.in_channels, spec.out_channels, spec.kernel
    if ranks.kind == "spatial":
        r1, r2 = ranks.r1, ranks.r2
        oh = conv_out_size(in_h, l, spec.stride, spec.padding)
        ow = conv_out_size(in_w, l, spec.stride, spec.padding)
        macs = in_h * in_w * c * r1 * r2 \
            + oh * ow * r1 * r2 * l * l \
            + oh * ow * r2 * s
        params = c * r1 * r2 + r1 * l * l + r2 * s
    else:
        r = ranks.r
        oh = conv_out_size(in_h, 1, spec.stride, spec.padding)
        ow = conv_out_size(in_w, 1, spec.stride, spec.padding)
        macs = oh * ow * (c * r + r * s)
        params = c * r + r * s
    if spec.has_bias:
        params += s
    return LayerCost(macs, params, oh, ow)


def cost_plan(plan: ThreeConvPlan, in_h: int, in_w: int) -> LayerCost:
    """Cost of an already-lowered plan, stage weights taken as stored."""
    macs = 0
    params = 0
    h, w = in_h, in_w
    for st in plan.stages:
        if st.shared_kernel:
            cpg, l, _ = st.weight.shape
            out_ch = st.groups
        else:
            out_ch, cpg, l, _ = st.weight.shape
        oh = conv_out_size(h, l, st.stride, st.padding)
        ow = conv_out_size(w, l, st.stride, st.padding)
        macs += oh * ow * out_ch * cpg * l * l
        params += st.param_count
        h, w = oh, ow
    return LayerCost(macs, params, h, w)


class ModelReport:
    """Per-layer cost rows plus totals, renderable as text or CSV."""

    CSV_HEADER = "layer,kind,macs,params,out_h,out_w"

    def __init__(self, rows):
        self.rows = list(rows)

    @property
    def total_macs(self) -> int:
        return sum(r["macs"] for r in self.rows)

    @property
    def total_params(self) -> int:
        return sum(r["params"] for r in self.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(self.CSV_HEADER + "\n")
        for r in self.rows:
            buf.write(f"{r['name']},{r['kind']},{r['macs']},{r['params']},"
                      f"{r['out_h']},{r['out_w']}\n")
        return buf.getvalue()

    def to_text(self) -> str:
        lines = ["MAC convention: multiply-accumulates of conv/linear layers "
                 "(BN and element-wise ops contribute params only)",
                 f"{'layer':<28}{'kind':<10}{'macs':>14}{'params':>12}"
                 f"{'out':>10}  flags"]
        for r in self.rows:
            out = f"{r['out_h']}x{r['out_w']}"
            lines.append(f"{r['name']:<28}{r['kind']:<10}{r['macs']:>14}"
                         f"{r['params']:>12}{out:>10}  {r.get('flags', '')}")
        lines.append(f"{'TOTAL':<28}{'':<10}{self.total_macs:>14}{self.total_params:>12}")
        gmacs = self.total_macs / 1e9
        mparams = self.total_params / 1e6
        lines.append(f"= {gmacs:.3f} GMACs, {mparams:.3f} M params")
        return "\n".join(lines)


def model_report(arch, resolution: int, decomposed: bool = False) -> ModelReport:
    """Walk an architecture description and sum layer costs.

    arch is a list of dicts with a 'kind' key: conv (C, S, l, stride, padding,
    bias, optional parallel=True for branch convs that do not advance the
    spatial state), bn (C), relu, maxpool (kernel, stride, padding), gap,
    linear (in, out).  Layers whose channel widths or ranks are not divisible
    by 16 are flagged, not rejected.
    """
    h = w = resolution
    rows = []
    for i, layer in enumerate(arch):
        kind = layer["kind"]
        name = layer.get("name", f"{kind}{i}")
        if kind == "conv":
            spec = ConvSpec(layer["C"], layer["S"], layer["l"],
                            stride=layer.get("stride", 1),
                            padding=layer.get("padding", 0),
                            has_bias=layer.get("bias", False))
            ranks = select_ranks(spec) if decomposed else None
            if ranks is not None:
                cost = cost_ttconv(spec, ranks, h, w)
                row_kind = "ttconv"
                rank_list = [ranks.r] if ranks.kind == "pointwise" else [ranks.r1, ranks.r2]
                flags = "" if all(r % 16 == 0 for r in rank_list) else "rank%16"
            else:
                cost = cost_dense(spec, h, w)
                row_kind = "conv"
                flags = "" if spec.in_channels % 16 == 0 and spec.out_channels % 16 == 0 \
                    else "ch%16"
            rows.append({"name": name, "kind": row_kind, "macs": cost.macs,
                         "params": cost.params, "out_h": cost.out_h,
                         "out_w": cost.out_w, "flags": flags})
            if not layer.get("parallel", False):
                h, w = cost.out_h, cost.out_w
        elif kind == "bn":
            rows.append({"name": name, "kind": "bn", "macs": 0,
                         "params": 2 * layer["C"], "out_h": h, "out_w": w})
        elif kind == "relu":
            rows.append({"name": name, "kind": "relu", "macs": 0, "params": 0,
                         "out_h": h, "out_w": w})
        elif kind == "maxpool":
            h = conv_out_size(h, layer["kernel"], layer.get("stride", layer["kernel"]),
                              layer.get("padding", 0))
            w = conv_out_size(w, layer["kernel"], layer.get("stride", layer["kernel"]),
                              layer.get("padding", 0))
            rows.append({"name": name, "kind": "maxpool", "macs": 0, "params": 0,
                         "out_h": h, "out_w": w})
        elif kind == "gap":
            h = w = 1
            rows.append({"name": name, "kind": "gap", "macs": 0, "params": 0,
                         "out_h": 1, "out_w": 1})
        elif kind == "linear":
            fan_in, fan_out = layer["in"], layer["out"]
            rows.append({"name": name, "kind": "linear",
                         "macs": fan_in * fan_out,
                         "params": fan_in * fan_out + fan_out,
                         "out_h": 1, "out_w": 1})
        else:
            raise ValueError(f"unknown layer kind {kind!r} at position {i}")
    return ModelReport(rows)
