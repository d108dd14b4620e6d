"""Self-check battery behind the `verify` CLI subcommand.

Each check returns (ok, detail); the driver prints one line per check with
its tolerance and fails the process if any check fails.
"""

from __future__ import annotations

import os
import tempfile

import numpy as np

from . import data, nn, ops, tensor_core, ttconv
from .cost_model import cost_dense, cost_plan, cost_ttconv
from .ttconv import ConvSpec, RankChoice


def check_svd_orthonormality(seed):
    rng = np.random.default_rng(seed)
    m = rng.standard_normal((12, 7))
    u, s, v = tensor_core.svd(m)
    err = max(np.abs(u.T @ u - np.eye(u.shape[1])).max(),
              np.abs(v.T @ v - np.eye(v.shape[1])).max())
    return err <= 1e-10, f"max |U^T U - I| = {err:.2e} (tol 1e-10)"


def check_tt_roundtrip(seed):
    rng = np.random.default_rng(seed)
    t = rng.standard_normal((6, 5, 4, 3))
    tt = tensor_core.tt_svd(t, eps=1e-14)
    err = np.linalg.norm(tensor_core.tt_reconstruct(tt) - t) / np.linalg.norm(t)
    return err <= 1e-12, f"rel reconstruction error = {err:.2e} (tol 1e-12)"


def check_tt_element(seed):
    rng = np.random.default_rng(seed)
    t = rng.standard_normal((4, 5, 6))
    tt = tensor_core.tt_svd(t, eps=1e-14)
    full = tensor_core.tt_reconstruct(tt)
    worst = 0.0
    for _ in range(20):
        idx = tuple(rng.integers(0, n) for n in t.shape)
        worst = max(worst, abs(tensor_core.tt_element(tt, idx) - full[idx]))
    return worst <= 1e-13, f"max element deviation = {worst:.2e} (tol 1e-13)"


def check_pair_bijection(seed):
    rng = np.random.default_rng(seed)
    m = rng.standard_normal((4, 6))
    paired = tensor_core.pair_indices(m, (2, 2), (2, 3))
    back = tensor_core.unpair_indices(paired, (2, 2), (2, 3))
    # Summation order differs, so the sum check carries a float tolerance.
    ok = np.array_equal(back, m) and abs(paired.sum() - m.sum()) <= 1e-12
    return ok, "round-trip identity and sum preservation"


def check_lowering_equivalence(seed):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for c, s, l, stride in [(128, 128, 3, 1), (128, 256, 3, 2), (256, 256, 1, 2)]:
        spec = ConvSpec(c, s, l, stride=stride, padding=l // 2)
        ranks = ttconv.select_ranks(spec)
        w = rng.standard_normal((s, c, l, l))
        factors = ttconv.factorize_kernel(w, ranks, spec)
        plan = ttconv.lower(factors)
        x = rng.standard_normal((1, c, 8, 8))
        dense = ops.conv2d(x, ttconv.reconstruct_kernel(factors),
                           stride=stride, padding=l // 2)
        worst = max(worst, np.abs(ttconv.apply_plan(plan, x) - dense).max())
    return worst <= 1e-10, f"max |plan - dense| = {worst:.2e} (tol 1e-10)"


def check_cost_identity(seed):
    rng = np.random.default_rng(seed)
    for c, s, l, r1, r2 in [(8, 8, 3, 2, 4), (16, 8, 3, 1, 2)]:
        spec = ConvSpec(c, s, l, padding=1)
        ranks = RankChoice("spatial", r1=r1, r2=r2)
        w = rng.standard_normal((s, c, l, l))
        plan = ttconv.lower(ttconv.factorize_kernel(w, ranks, spec))
        expect = cost_ttconv(spec, ranks, 6, 6)
        got = cost_plan(plan, 6, 6)
        if (expect.macs, expect.params) != (got.macs, got.params):
            return False, f"formula {expect} != plan {got}"
    return True, "stage-sum cost equals closed form (exact)"


def check_gradients(seed):
    rng = np.random.default_rng(seed)
    model = nn.Sequential(
        nn.Conv2d(3, 6, 3, padding=1, rng=rng, dtype=np.float64, name="c1"),
        nn.BatchNorm2d(6, dtype=np.float64, name="b1"),
        nn.ReLU(),
        nn.GlobalAvgPool(),
        nn.Linear(6, 4, rng=rng, dtype=np.float64, name="fc"),
    )
    x = rng.standard_normal((3, 3, 6, 6))
    y = rng.integers(0, 4, size=3)
    report = nn.grad_check(model, x, y, rng=rng)
    worst = max(report.values())
    return worst <= 1e-4, f"max FD rel error = {worst:.2e} (tol 1e-4)"


def check_container_roundtrip(seed):
    rng = np.random.default_rng(seed)
    c = data.WeightContainer()
    c.add("a", rng.standard_normal((3, 4)).astype(np.float32))
    c.add("b", rng.standard_normal(7))
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "w.tyt")
        data.write_container(path, c)
        back = data.read_container(path)
        ok = back.names() == c.names() and all(
            np.array_equal(x, y) and x.dtype == y.dtype
            for (_, x), (_, y) in zip(c.entries, back.entries))
        # Malformed files must be rejected.
        with open(path, "rb") as f:
            blob = f.read()
        bad = os.path.join(d, "bad.tyt")
        with open(bad, "wb") as f:
            f.write(b"NOPE" + blob[4:])
        try:
            data.read_container(bad)
            return False, "bad magic accepted"
        except data.BadMagicError:
            pass
        with open(bad, "wb") as f:
            f.write(blob[:-3])
        try:
            data.read_container(bad)
            return False, "truncated file accepted"
        except data.TruncatedFileError:
            pass
    return ok, "bitwise round-trip; malformed files rejected"


def check_synthetic_determinism(seed):
    a = data.gen_synthetic(16, seed)
    b = data.gen_synthetic(16, seed)
    ok = np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    return ok, "regeneration is bitwise identical"


CHECKS = [
    ("svd orthonormality", check_svd_orthonormality),
    ("tt-svd round trip", check_tt_roundtrip),
    ("tt element vs reconstruct", check_tt_element),
    ("index pairing bijection", check_pair_bijection),
    ("lowering equivalence", check_lowering_equivalence),
    ("cost closed-form identity", check_cost_identity),
    ("gradient finite differences", check_gradients),
    ("container round trip", check_container_roundtrip),
    ("synthetic determinism", check_synthetic_determinism),
]


def run_all(seed: int = 0, out=print) -> bool:
    all_ok = True
    for name, fn in CHECKS:
        ok, detail = fn(seed)
        out(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        all_ok &= ok
    return all_ok
