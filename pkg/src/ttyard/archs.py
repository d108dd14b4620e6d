"""Architecture tables for the cost model and the trainable toy network.

The ResNet tables exist solely to validate the cost model against published
baseline figures at 224x224; only the toy network is trainable here.
"""

from __future__ import annotations

# (block type, stage block counts). Bottleneck stages expand widths 4x.
_RESNET_PLANS = {
    "resnet18": ("basic", [2, 2, 2, 2]),
    "resnet34": ("basic", [3, 4, 6, 3]),
    "resnet50": ("bottleneck", [3, 4, 6, 3]),
    "resnet101": ("bottleneck", [3, 4, 23, 3]),
}
_STAGE_WIDTHS = [64, 128, 256, 512]


def _conv(name, c, s, l, stride=1, padding=0, parallel=False):
    return {"kind": "conv", "name": name, "C": c, "S": s, "l": l,
            "stride": stride, "padding": padding, "parallel": parallel}


def _bn(name, c):
    return {"kind": "bn", "name": name, "C": c}


def resnet_arch(name: str, num_classes: int = 1000):
    """Flat layer list for a classic ResNet; downsample convs are emitted
    before the block body and flagged parallel so both see the block input
    resolution."""
    if name not in _RESNET_PLANS:
        raise ValueError(f"unknown architecture {name!r}")
    block, counts = _RESNET_PLANS[name]
    expansion = 4 if block == "bottleneck" else 1

    layers = [
        _conv("stem.conv", 3, 64, 7, stride=2, padding=3),
        _bn("stem.bn", 64),
        {"kind": "relu", "name": "stem.relu"},
        {"kind": "maxpool", "name": "stem.pool", "kernel": 3, "stride": 2, "padding": 1},
    ]
    in_ch = 64
    for stage, (width, n_blocks) in enumerate(zip(_STAGE_WIDTHS, counts)):
        out_ch = width * expansion
        for b in range(n_blocks):
            stride = 2 if stage > 0 and b == 0 else 1
            prefix = f"layer{stage + 1}.{b}"
            if stride != 1 or in_ch != out_ch:
                layers.append(_conv(f"{prefix}.downsample", in_ch, out_ch, 1,
                                    stride=stride, parallel=True))
                layers.append(_bn(f"{prefix}.downsample.bn", out_ch))
            if block == "basic":
                layers += [
                    _conv(f"{prefix}.conv1", in_ch, width, 3, stride=stride, padding=1),
                    _bn(f"{prefix}.bn1", width),
                    _conv(f"{prefix}.conv2", width, width, 3, padding=1),
                    _bn(f"{prefix}.bn2", width),
                ]
            else:
                layers += [
                    _conv(f"{prefix}.conv1", in_ch, width, 1),
                    _bn(f"{prefix}.bn1", width),
                    _conv(f"{prefix}.conv2", width, width, 3, stride=stride, padding=1),
                    _bn(f"{prefix}.bn2", width),
                    _conv(f"{prefix}.conv3", width, out_ch, 1),
                    _bn(f"{prefix}.bn3", out_ch),
                ]
            in_ch = out_ch
    layers.append({"kind": "gap", "name": "gap"})
    layers.append({"kind": "linear", "name": "fc", "in": in_ch, "out": num_classes})
    return layers


# Toy network: 16x16 input, three residual stages, six decomposable convs
# (128->128, 128->256, its 1x1 downsample, and three 256->256).
TOY_PLAN = [
    # (prefix, in, out, stride)
    ("block1", 64, 128, 2),
    ("block2", 128, 256, 2),
    ("block3", 256, 256, 1),
]


def toy_arch(num_classes: int = 4):
    layers = [
        _conv("stem.conv", 3, 64, 3, padding=1),
        _bn("stem.bn", 64),
        {"kind": "relu", "name": "stem.relu"},
    ]
    for prefix, c, s, stride in TOY_PLAN:
        if stride != 1 or c != s:
            layers.append(_conv(f"{prefix}.downsample", c, s, 1, stride=stride,
                                parallel=True))
            layers.append(_bn(f"{prefix}.downsample.bn", s))
        layers += [
            _conv(f"{prefix}.conv1", c, s, 3, stride=stride, padding=1),
            _bn(f"{prefix}.bn1", s),
            _conv(f"{prefix}.conv2", s, s, 3, padding=1),
            _bn(f"{prefix}.bn2", s),
        ]
    layers.append({"kind": "gap", "name": "gap"})
    layers.append({"kind": "linear", "name": "fc", "in": 256, "out": num_classes})
    return layers


def cost_arch(name: str, num_classes: int | None = None):
    if name == "toy":
        return toy_arch(num_classes if num_classes is not None else 4)
    return resnet_arch(name, num_classes if num_classes is not None else 1000)


def build_toy_model(rng, num_classes: int = 4, dtype=None):
    """Trainable toy ResNet matching toy_arch."""
    import numpy as np

    from . import nn

    if dtype is None:
        dtype = np.float32

    def conv_bn_relu(name, c, s, l, stride=1, padding=0, relu=True):
        seq = [nn.Conv2d(c, s, l, stride=stride, padding=padding,
                         rng=rng, dtype=dtype, name=f"{name}.conv"),
               nn.BatchNorm2d(s, dtype=dtype, name=f"{name}.bn")]
        if relu:
            seq.append(nn.ReLU())
        return seq

    layers = conv_bn_relu("stem", 3, 64, 3, padding=1)
    for prefix, c, s, stride in TOY_PLAN:
        main = nn.Sequential(
            *conv_bn_relu(f"{prefix}.a", c, s, 3, stride=stride, padding=1),
            *conv_bn_relu(f"{prefix}.b", s, s, 3, padding=1, relu=False),
        )
        shortcut = None
        if stride != 1 or c != s:
            shortcut = nn.Sequential(
                nn.Conv2d(c, s, 1, stride=stride, rng=rng, dtype=dtype,
                          name=f"{prefix}.downsample.conv"),
                nn.BatchNorm2d(s, dtype=dtype, name=f"{prefix}.downsample.bn"),
            )
        layers.append(nn.ResidualBlock(main, shortcut, name=prefix))
    layers.append(nn.GlobalAvgPool())
    layers.append(nn.Linear(256, num_classes, rng=rng, dtype=dtype, name="fc"))
    return nn.Sequential(*layers)
