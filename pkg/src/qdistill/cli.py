"""``qdistill`` command-line entry point.

Configuration is resolved as built-in defaults < ``--config`` JSON file <
explicit flags. Every command validates the full configuration and the data
paths before any computation starts.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from . import __version__
from .data import (
    DataFormatError,
    MetricsLog,
    Normalization,
    export_images,
    load_dataset,
    load_distilled,
    load_mnist_subset,
    save_distilled,
)
from .distill import DistillConfig, DistillationError, accuracy, distill, evaluate_distilled, train_baseline
from .models import INPUT_SPECS, VARIANTS, ModelConfig, build_model

log = logging.getLogger("qdistill")

COMMANDS = ("distill", "eval", "train-baseline", "export-images", "gradcheck")
SUBSET_SOURCE = "mlxtend-subset"

DATASET_DEFAULTS = {
    "mnist": dict(n_synthetic=10, inner_steps=1, epochs=3),
    "cifar10": dict(n_synthetic=100, inner_steps=10, epochs=3),
}


@dataclass
class RunConfig:
    command: str = "distill"
    dataset: str = "mnist"
    variant: str = "q-r-h"
    residual: bool | None = None  # overrides the variant's setting when given
    observable: str | None = None
    layers: int = 3
    activation: str = "tanh"
    n_synthetic: int | None = None
    inner_steps: int | None = None
    epochs: int | None = None
    alpha: float = 0.1
    eta_init: float = 0.01
    batch_size: int = 256
    optimizer: str = "plain_gd"
    lr: float = 0.05
    seed: int = 0
    data_dir: str | None = None
    train_limit: int | None = None
    test_limit: int | None = None
    out_dir: str = "runs"
    distilled: str | None = None
    trials: int = 100
    skip_lenet: bool = False

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise ValueError(f"unknown command {self.command!r}")
        if self.dataset not in DATASET_DEFAULTS:
            raise ValueError(f"unknown dataset {self.dataset!r}")
        for key, value in DATASET_DEFAULTS[self.dataset].items():
            # eval takes T from the distilled file unless given explicitly
            if getattr(self, key) is None and self.command != "eval":
                setattr(self, key, value)
        for key in ("train_limit", "test_limit"):
            value = getattr(self, key)
            if value is not None and value < 1:
                raise ValueError(f"{key} must be >= 1")

    def model_config(self):
        extra = {k: getattr(self, k) for k in ("residual", "observable") if getattr(self, k) is not None}
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {sorted(VARIANTS)}")
        base = {k: v for k, v in VARIANTS[self.variant].items() if k not in extra}
        return ModelConfig(**base, **extra, input_spec=INPUT_SPECS[self.dataset], n_layers=self.layers, activation=self.activation)

    def distill_config(self):
        return DistillConfig(
            n_synthetic=self.n_synthetic,
            inner_steps=self.inner_steps,
            epochs=self.epochs,
            outer_step=self.alpha,
            batch_size=self.batch_size,
            seed=self.seed,
            eta_init=self.eta_init,
            outer_optimizer=self.optimizer,
        )

    def to_dict(self):
        return asdict(self)


def _add_common(p):
    p.add_argument("--config", help="JSON file of run settings; explicit flags override it")
    p.add_argument("--dataset", choices=sorted(DATASET_DEFAULTS))
    p.add_argument("--variant", choices=list(VARIANTS))
    p.add_argument("--layers", type=int, help="entangling layers in the quantum circuit")
    p.add_argument("--activation", choices=("tanh", "relu"))
    p.add_argument("--seed", type=int)
    p.add_argument("--data-dir", help=f"directory with the dataset files, or '{SUBSET_SOURCE}' for the bundled MNIST sample")
    p.add_argument("--train-limit", type=int)
    p.add_argument("--test-limit", type=int)
    p.add_argument("--out-dir")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_distill(p):
    p.add_argument("--n-synthetic", type=int)
    p.add_argument("--inner-steps", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--alpha", type=float, help="outer step size")
    p.add_argument("--eta-init", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--optimizer", choices=("plain_gd", "adam"))


def build_parser():
    parser = argparse.ArgumentParser(prog="qdistill", description="Dataset distillation for hybrid quantum-classical LeNets.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("distill", help="distill a training set into a few synthetic images")
    _add_common(p)
    _add_distill(p)

    p = sub.add_parser("eval", help="train theta0 on a distilled file and report test accuracy")
    _add_common(p)
    p.add_argument("--distilled", required=True)
    p.add_argument("--inner-steps", type=int)

    p = sub.add_parser("train-baseline", help="train on the real training data")
    _add_common(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)

    p = sub.add_parser("export-images", help="write PGM/PPM images from a distilled file")
    _add_common(p)
    p.add_argument("--distilled", required=True)

    p = sub.add_parser("gradcheck", help="run the gradient oracle suite")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--trials", type=int, help="random circuits for the parameter-shift check")
    p.add_argument("--skip-lenet", action="store_true", default=None)
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args):
    values = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise FileNotFoundError(f"config file {path} not found")
        try:
            values = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(values, dict):
            raise ValueError(f"config file {path} must hold a JSON object")
        known = {f.name for f in fields(RunConfig)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
    for key, value in vars(args).items():
        if key in ("config", "verbose") or value is None:
            continue
        values[key] = value
    values["command"] = args.command
    if args.command == "train-baseline":
        values.setdefault("epochs", 1)
        values.setdefault("batch_size", 64)
    cfg = RunConfig(**values)
    cfg.model_config()
    if cfg.command == "distill":
        cfg.distill_config()
    return cfg


# ---------------------------------------------------------------------------
# data


def check_data_source(cfg):
    if cfg.data_dir is None:
        raise FileNotFoundError("no data source given; pass --data-dir")
    if cfg.data_dir == SUBSET_SOURCE:
        if cfg.dataset != "mnist":
            raise ValueError(f"{SUBSET_SOURCE} only provides MNIST")
        return
    if not Path(cfg.data_dir).is_dir():
        raise FileNotFoundError(f"data directory {cfg.data_dir} does not exist")


def load_data(cfg):
    if cfg.data_dir == SUBSET_SOURCE:
        return load_mnist_subset(cfg.train_limit or 4000, cfg.test_limit or 1000)
    return load_dataset(cfg.dataset, cfg.data_dir, cfg.train_limit, cfg.test_limit)


def compact_json(obj):
    """JSON without literal spaces, so it stays one token in a key=value log line."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).replace(" ", "\\u0020")


def _prepare_out_dir(cfg):
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_distill(cfg):
    model_cfg = cfg.model_config()
    dist_cfg = cfg.distill_config()
    check_data_source(cfg)
    train, test = load_data(cfg)
    out = _prepare_out_dir(cfg)
    model = build_model(model_cfg, seed=cfg.seed)
    # where the outputs go is not part of the run's identity
    run = {k: v for k, v in cfg.to_dict().items() if k not in ("out_dir", "distilled")}
    echo = dict(run, model=model_cfg.to_dict(), distill=dist_cfg.to_dict(), normalization=train.normalization.to_dict())

    def checkpoint(synth, epoch):
        save_distilled(out / "distilled.qdd.partial", synth, cfg.seed, echo)

    with MetricsLog(out / "metrics.log") as metrics:
        try:
            result = distill(model, dist_cfg, train.images, train.labels, callback=lambda r: metrics.write(dict(event="step", **r)), checkpoint=checkpoint)
        except DistillationError as exc:
            if exc.last_good is not None:
                save_distilled(out / "last_good.qdd", exc.last_good, cfg.seed, echo)
            raise
        acc = evaluate_distilled(model, result.synthetic, test.images, test.labels, dist_cfg.inner_steps)
        save_distilled(out / "distilled.qdd", result.synthetic, cfg.seed, echo)
        (out / "distilled.qdd.partial").unlink(missing_ok=True)
        export_images(result.synthetic, out / "images", train.normalization)
        summary = dict(
            event="summary",
            variant=cfg.variant,
            dataset=cfg.dataset,
            seed=cfg.seed,
            accuracy=acc,
            eta=float(result.synthetic.eta.data),
            final_loss=result.loss_history[-1],
            steps=len(result.loss_history),
            config=compact_json(echo),
        )
        metrics.write(summary)
    (out / "summary.json").write_text(json.dumps(dict(summary, config=echo), indent=2, sort_keys=True))
    print(f"post-distillation accuracy {acc:.4f} ({cfg.variant}, {cfg.dataset}, seed {cfg.seed}); outputs in {out}")
    return 0


def _load_checked(cfg):
    synth, seed, echo = load_distilled(cfg.distilled)
    if seed != cfg.seed:
        raise ValueError(f"distilled file was made from theta0 seed {seed}, but this run uses seed {cfg.seed}")
    file_variant = echo.get("variant")
    if file_variant is not None and file_variant != cfg.variant:
        raise ValueError(f"distilled file was made for variant {file_variant!r}, but this run uses {cfg.variant!r}")
    file_dataset = echo.get("dataset")
    if file_dataset is not None and file_dataset != cfg.dataset:
        raise ValueError(f"distilled file was made for dataset {file_dataset!r}, but this run uses {cfg.dataset!r}")
    return synth, echo


def cmd_eval(cfg):
    model_cfg = cfg.model_config()
    synth, echo = _load_checked(cfg)
    if tuple(synth.images.shape[1:]) != model_cfg.input_spec:
        raise ValueError(f"distilled images have shape {synth.images.shape[1:]}, model expects {model_cfg.input_spec}")
    check_data_source(cfg)
    _, test = load_data(cfg)
    model = build_model(model_cfg, seed=cfg.seed)
    inner = cfg.inner_steps if cfg.inner_steps is not None else echo.get("inner_steps", DATASET_DEFAULTS[cfg.dataset]["inner_steps"])
    acc = evaluate_distilled(model, synth, test.images, test.labels, inner)
    out = _prepare_out_dir(cfg)
    with open(out / "eval.log", "a") as fh:
        fh.write(f"event=eval distilled={cfg.distilled} variant={cfg.variant} seed={cfg.seed} inner_steps={inner} accuracy={acc!r}\n")
    print(f"accuracy {acc:.4f}")
    return 0


def cmd_train_baseline(cfg):
    model_cfg = cfg.model_config()
    check_data_source(cfg)
    train, test = load_data(cfg)
    out = _prepare_out_dir(cfg)
    model = build_model(model_cfg, seed=cfg.seed)
    start = time.perf_counter()
    with MetricsLog(out / "baseline.log") as metrics:
        theta, losses = train_baseline(
            model, train.images, train.labels, epochs=cfg.epochs, lr=cfg.lr, batch_size=cfg.batch_size, seed=cfg.seed,
        )
        acc = accuracy(model, theta, test.images, test.labels)
        metrics.write(dict(
            event="summary", variant=cfg.variant, accuracy=acc, final_loss=losses[-1],
            seconds=time.perf_counter() - start, config=compact_json(cfg.to_dict()),
        ))
    print(f"baseline test accuracy {acc:.4f} (final training loss {losses[-1]:.4f})")
    return 0


def cmd_export_images(cfg):
    synth, _, echo = load_distilled(cfg.distilled)
    norm = echo.get("normalization")
    norm = Normalization(tuple(norm["shift"]), tuple(norm["scale"])) if norm else Normalization((0.0,), (1.0,))
    paths = export_images(synth, Path(cfg.out_dir), norm)
    print(f"wrote {len(paths)} images to {cfg.out_dir}")
    return 0


def cmd_gradcheck(cfg):
    from .gradcheck import run_all

    results = run_all(trials=cfg.trials, seed=cfg.seed, lenet=not cfg.skip_lenet)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} check(s) failed: {', '.join(failed)}", file=sys.stderr)
        return 1
    print(f"all {len(results)} checks passed")
    return 0


HANDLERS = {
    "distill": cmd_distill,
    "eval": cmd_eval,
    "train-baseline": cmd_train_baseline,
    "export-images": cmd_export_images,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return HANDLERS[cfg.command](cfg)
    except (ValueError, FileNotFoundError, OSError, DataFormatError, DistillationError) as exc:
        print(f"qdistill {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
