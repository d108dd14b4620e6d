"""Command-line entry point.

Subcommands: decompose, cost, verify, train, yard, ablate.  Every run prints
a reproducibility header (toolkit version, seed, resolved arguments) before
doing any work.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import __version__, archs, data, nn, verify
from .cost_model import model_report
from .ttconv import ConvSpec, factorize_kernel, lower, reconstruct_kernel, select_ranks
from .yard import YardConfig, run_yard

ARCH_NAMES = ("resnet18", "resnet34", "resnet50", "resnet101", "toy")


def _header(args):
    seed = getattr(args, "seed", None)
    flags = {k: v for k, v in vars(args).items() if k != "func"}
    print(f"# ttyard {__version__} | command={args.command} | seed={seed} | {flags}")


def _load_data(source, seed, n_train=256, n_test=128):
    if source == "synthetic":
        train = data.gen_synthetic(n_train, seed)
        test = data.gen_synthetic(n_test, seed + 1)
        return (train.images, train.labels), (test.images, test.labels), 4, 16
    if source.startswith("cifar10:"):
        train, test = data.load_cifar10(source.split(":", 1)[1])
        return train, test, 10, 32
    raise SystemExit(f"unknown data source {source!r} (use synthetic or cifar10:DIR)")


def cmd_decompose(args):
    container = data.read_container(args.input)
    if not container.entries:
        raise SystemExit("error: input container is empty")
    wanted = set(args.layer or [])
    out = data.WeightContainer()
    report_lines = []
    eligible = 0
    for name, arr in container.entries:
        if not name.endswith(".weight") or arr.ndim != 4:
            out.add(name, arr)
            continue
        layer = name[:-len(".weight")]
        if wanted and layer not in wanted:
            out.add(name, arr)
            continue
        s, c, l, _ = arr.shape
        spec = ConvSpec(c, s, l, padding=l // 2)
        ranks = select_ranks(spec)
        if ranks is None:
            if layer in wanted:
                raise SystemExit(
                    f"error: layer {layer!r} has min(C,S)={min(c, s)} < 128 and "
                    "is not eligible for decomposition")
            out.add(name, arr)
            continue
        eligible += 1
        factors = factorize_kernel(arr.astype(np.float64), ranks, spec)
        plan = lower(factors)
        for i, st in enumerate(plan.stages):
            out.add(f"{layer}.stage{i + 1}.weight", st.weight.astype(arr.dtype))
            if st.bias is not None:
                out.add(f"{layer}.stage{i + 1}.bias", st.bias.astype(arr.dtype))
        rec = reconstruct_kernel(factors)
        rel = np.linalg.norm(rec - arr) / max(np.linalg.norm(arr), 1e-30)
        dense_params = arr.size
        report_lines.append(
            f"{layer}: rel reconstruction error {rel:.3e}, "
            f"params {dense_params} -> {plan.param_count} "
            f"({plan.param_count / dense_params:.2%})")
    if not eligible:
        raise SystemExit("error: no eligible conv layer (min(C,S) >= 128) found")
    data.write_container(args.output, out)
    print("\n".join(report_lines))
    print(f"wrote {args.output} ({len(out)} entries)")
    return 0


def cmd_cost(args):
    arch = archs.cost_arch(args.arch)
    report = model_report(arch, args.res, decomposed=args.decomposed)
    print(report.to_text())
    if args.csv:
        with open(args.csv, "w") as f:
            f.write(report.to_csv())
        print(f"wrote {args.csv}")
    return 0


def cmd_verify(args):
    ok = all(verify.run_all(seed) for seed in [args.seed])
    return 0 if ok else 1


def cmd_train(args):
    train_set, test_set, n_classes, res = _load_data(args.data, args.seed)
    rng = np.random.default_rng(args.seed)
    model = archs.build_toy_model(rng, num_classes=n_classes)
    cfg = nn.TrainConfig(batch_size=args.batch_size, epochs=args.epochs,
                         warmup_epochs=args.warmup_epochs, schedule=args.schedule,
                         seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    rows = []
    history = nn.fit(model, train_set, test_set, cfg, log_rows=rows)
    _write_log(os.path.join(args.out, "train_log.csv"), rows)
    _save_model(model, os.path.join(args.out, "model.tyt"))
    print(f"final eval accuracy: {history[-1]['eval_acc']:.4f}")
    return 0


def _write_log(path, rows):
    with open(path, "w") as f:
        f.write(nn.TRAIN_LOG_HEADER + "\n")
        f.write("\n".join(rows) + "\n")


def _save_model(model, path):
    container = data.WeightContainer()
    for name, arr in model.named_state():
        container.add(name, arr)
    data.write_container(path, container)


def _run_single_yard(args, m_epochs, out_dir):
    train_set, test_set, n_classes, res = _load_data(args.data, args.seed)
    rng = np.random.default_rng(args.seed)
    model = archs.build_toy_model(rng, num_classes=n_classes)
    cfg = YardConfig(
        m_epochs=m_epochs, iterations=args.K,
        fine_tune_epochs=args.epochs_finetune,
        train=nn.TrainConfig(batch_size=args.batch_size, seed=args.seed),
    )
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    model, report, history = run_yard(model, train_set, test_set, cfg,
                                      (res, res), rng=rng, log_rows=rows)
    with open(os.path.join(out_dir, "yard_report.csv"), "w") as f:
        f.write(report.to_csv())
    with open(os.path.join(out_dir, "yard_summary.json"), "w") as f:
        f.write(report.summary_json())
    _write_log(os.path.join(out_dir, "train_log.csv"), rows)
    _save_model(model, os.path.join(out_dir, "final.tyt"))
    final_acc = history[-1]["eval_acc"] if history else float("nan")
    print(f"M={m_epochs}: {len(report.replacement_sequence())} replacements, "
          f"params {report.baseline_params} -> {report.final_params}, "
          f"eval accuracy {final_acc:.4f}")
    return report, final_acc


def cmd_yard(args):
    if args.M < 1 or args.K < 1:
        raise SystemExit("error: --M and --K must be >= 1")
    _run_single_yard(args, args.M, args.out)
    return 0


ABLATE_HEADER = "M,replacements,final_params,final_macs,final_accuracy"


def cmd_ablate(args):
    try:
        m_values = sorted({int(v) for v in args.M_list.split(",") if v.strip()})
    except ValueError:
        raise SystemExit(f"error: bad --M-list {args.M_list!r}")
    if not m_values or any(m < 1 for m in m_values):
        raise SystemExit("error: --M-list needs positive integers")
    if args.K < 1:
        raise SystemExit("error: --K must be >= 1")
    os.makedirs(args.out, exist_ok=True)
    lines = [ABLATE_HEADER]
    for m in m_values:
        report, acc = _run_single_yard(args, m, os.path.join(args.out, f"M{m}"))
        lines.append(f"{m},{len(report.replacement_sequence())},"
                     f"{report.final_params},{report.final_macs},{acc:.4f}")
    path = os.path.join(args.out, "ablation.csv")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
    print(f"wrote {path}")
    return 0


def _add_yard_flags(p):
    p.add_argument("--data", default="synthetic",
                   help="synthetic or cifar10:DIR")
    p.add_argument("--K", type=int, default=4)
    p.add_argument("--epochs-finetune", dest="epochs_finetune", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", required=True)


def build_parser():
    parser = argparse.ArgumentParser(prog="ttyard")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("decompose", help="factorize conv weights in a container")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", dest="output", required=True)
    p.add_argument("--layer", action="append")
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("cost", help="MAC/parameter report for an architecture")
    p.add_argument("--arch", choices=ARCH_NAMES, required=True)
    p.add_argument("--res", type=int, default=224)
    p.add_argument("--decomposed", action="store_true")
    p.add_argument("--csv")
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("verify", help="run the self-check battery")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("train", help="train the toy model without the yard")
    p.add_argument("--data", default="synthetic")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--warmup-epochs", type=int, default=0)
    p.add_argument("--schedule", choices=("cosine", "step", "constant"),
                   default="cosine")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("yard", help="run the one-shot decomposition search")
    p.add_argument("--M", type=int, default=1)
    _add_yard_flags(p)
    p.set_defaults(func=cmd_yard)

    p = sub.add_parser("ablate", help="sweep the epochs-per-iteration parameter")
    p.add_argument("--M-list", dest="M_list", required=True)
    _add_yard_flags(p)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None):
    threads = os.environ.get("TTYARD_THREADS")
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, threads)
    args = build_parser().parse_args(argv)
    _header(args)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
