"""Command line entry point: ``edgeagree {run,sweep,report,gradcheck,gen-data}``.

Every option can also come from a ``key = value`` config file passed with
``--config``; flags given on the command line win over file values.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from typing import Dict, List, Optional

from .experiment import ExperimentConfig, records_to_csv, run_experiment
from .grid import InvalidInputError
from .loss import LossConfig
from .sweep import AXES, load_sweep, run_sweep, write_report
from .synthdata import DatasetSpec, generate_dataset, write_samples

log = logging.getLogger("edgeagree")

# option name -> (type, default); names match the long flags with dashes as underscores
OPTIONS = {
    "filter": (str, "Sobel"),
    "p": (int, 2),
    "alpha": (float, 1.0),
    "mask_size": (int, 28),
    "smooth_gt": (bool, False),
    "smooth_pred": (bool, False),
    "formulation": (str, "standard"),
    "magnitude": (bool, False),
    "seeds": (str, "0,1,2,3,4"),
    "steps": (int, 3000),
    "lr": (float, 0.01),
    "out": (str, "runs"),
    "batch_size": (int, 2),
    "eval_every": (int, 100),
    "n_train": (int, 512),
    "n_eval": (int, 128),
    "noise_std": (float, DatasetSpec.noise_std),
    "data_seed": (int, 0),
    "workers": (int, 1),
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in _TRUE:
        return True
    if t in _FALSE:
        return False
    raise InvalidInputError(f"not a boolean: {text!r}")


def _parse_alpha(text: str) -> float:
    # accepts fractions such as 1/16
    if "/" in text:
        num, den = text.split("/", 1)
        return float(num) / float(den)
    return float(text)


def convert(key: str, text: str):
    if key not in OPTIONS:
        raise InvalidInputError(f"unknown option {key!r}")
    kind = OPTIONS[key][0]
    if kind is bool:
        return _parse_bool(text)
    if key == "alpha":
        return _parse_alpha(text)
    return kind(text)


def read_config_file(path) -> Dict[str, object]:
    """Parse ``key = value`` lines; ``#`` starts a comment, dashes in keys are allowed."""
    values = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InvalidInputError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (t.strip() for t in line.split("=", 1))
            key = key.replace("-", "_")
            values[key] = convert(key, value)
    return values


def parse_seeds(text) -> List[int]:
    if isinstance(text, (list, tuple)):
        return [int(s) for s in text]
    return [int(s) for s in str(text).replace(" ", "").split(",") if s]


def resolve(args: argparse.Namespace) -> Dict[str, object]:
    opts = {k: default for k, (_, default) in OPTIONS.items()}
    if getattr(args, "config", None):
        opts.update(read_config_file(args.config))
    for k in OPTIONS:
        v = getattr(args, k, None)
        if v is not None:
            opts[k] = v
    return opts


def build_config(opts: Dict[str, object], output_dir: Optional[str] = None) -> ExperimentConfig:
    loss = LossConfig(filter_set=opts["filter"], p=opts["p"], alpha=opts["alpha"],
                      smooth_gt=opts["smooth_gt"], smooth_pred=opts["smooth_pred"],
                      formulation=opts["formulation"], include_magnitude=opts["magnitude"])
    data = DatasetSpec(n_train=opts["n_train"], n_eval=opts["n_eval"], mask_size=opts["mask_size"],
                       seed=opts["data_seed"], noise_std=opts["noise_std"])
    return ExperimentConfig(loss_config=loss, dataset_spec=data, seeds=parse_seeds(opts["seeds"]),
                            steps=opts["steps"], batch_size=opts["batch_size"],
                            learning_rate=opts["lr"], eval_every=opts["eval_every"],
                            output_dir=output_dir)


def _add_experiment_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--filter", help="Sobel, Prewitt, Kayyali, Roberts, Laplace, SobelAndLaplace or none")
    p.add_argument("--p", type=int)
    p.add_argument("--alpha", type=_parse_alpha)
    p.add_argument("--mask-size", dest="mask_size", type=int, choices=(28, 56))
    p.add_argument("--smooth-gt", dest="smooth_gt", action="store_const", const=True)
    p.add_argument("--smooth-pred", dest="smooth_pred", action="store_const", const=True)
    p.add_argument("--formulation", choices=("standard", "productpw", "expproductpw"))
    p.add_argument("--magnitude", action="store_const", const=True)
    p.add_argument("--seeds", help="comma separated model seeds")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--out", help="output directory")
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--eval-every", dest="eval_every", type=int)
    p.add_argument("--n-train", dest="n_train", type=int)
    p.add_argument("--n-eval", dest="n_eval", type=int)
    p.add_argument("--noise-std", dest="noise_std", type=float)
    p.add_argument("--data-seed", dest="data_seed", type=int)


def cmd_run(args) -> int:
    opts = resolve(args)
    cfg = build_config(opts, opts["out"])
    records = run_experiment(cfg)
    merged = os.path.join(opts["out"], f"{cfg.config_id}.csv")
    with open(merged, "w", newline="") as fh:
        fh.write(records_to_csv(records))
    finals = [r for r in records if r.step == cfg.steps and r.eval_mean_iou is not None]
    for r in finals:
        print(f"{cfg.config_id} seed {r.seed}: iou {r.eval_mean_iou:.4f} bce {r.eval_mean_bce:.5f}")
    print(f"records written to {merged}")
    return 0


def cmd_sweep(args) -> int:
    opts = resolve(args)
    out = os.path.join(opts["out"], args.axis)
    report = run_sweep(args.axis, build_config(opts, out), workers=opts["workers"])
    text, _, _ = write_report(out, report)
    print(text, end="")
    print(f"report written to {out}")
    return 0


def cmd_report(args) -> int:
    report = load_sweep(args.directory)
    text, _, _ = write_report(args.directory, report)
    print(text, end="")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_all
    ok = True
    for name, err, tol in run_all(instances=args.instances, seed=args.seed):
        status = "ok" if err < tol else "FAIL"
        ok &= err < tol
        print(f"{status:4} {name:<48} max rel err {err:.2e} (tol {tol:.0e})")
    return 0 if ok else 1


def cmd_gen_data(args) -> int:
    opts = resolve(args)
    spec = DatasetSpec(n_train=opts["n_train"], n_eval=opts["n_eval"], mask_size=opts["mask_size"],
                       seed=opts["data_seed"], noise_std=opts["noise_std"])
    train, evals = generate_dataset(spec)
    os.makedirs(opts["out"], exist_ok=True)
    for name, samples in (("train", train), ("eval", evals)):
        path = os.path.join(opts["out"], f"{name}_seed{spec.seed}.txt")
        write_samples(path, samples)
        print(f"wrote {len(samples)} samples to {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="edgeagree", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train one configuration over several seeds")
    _add_experiment_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run one ablation axis plus its baseline")
    p.add_argument("axis", choices=AXES)
    _add_experiment_flags(p)
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="rebuild the comparison report of a sweep directory")
    p.add_argument("directory")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("gradcheck", help="compare analytic gradients with finite differences")
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("gen-data", help="dump the synthetic dataset to text files")
    _add_experiment_flags(p)
    p.set_defaults(func=cmd_gen_data)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except InvalidInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
