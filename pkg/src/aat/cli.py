"""Command-line experiment runner.

    aat run experiment.json
    aat count experiment.json | --preset ast-base
    aat gradcheck [--dims L,d,h,r,P,T,F,C,dhat]
    aat identity experiment.json
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import SyntheticTaskSpec, generate_dataset
from .errors import AATError, ConfigurationError
from .gradcheck import check_model_gradients, perturb_adapters
from .peft import (
    BUDGET_ORDER,
    REFERENCE_BUDGETS,
    PeftStrategy,
    build_for_strategy,
    count_params,
    write_reports_csv,
)
from .training import evaluate, train
from .transformer import PRESETS, ModelConfig, build_model, model_forward

log = logging.getLogger("aat")

GRADCHECK_MAX_PARAMS = 5000
GRADCHECK_TOLERANCE = 1e-4
IDENTITY_TOLERANCE = 1e-10

MODEL_KEYS = (
    "depth", "embed_dim", "num_heads", "mlp_ratio", "patch_size",
    "input_time", "input_freq", "num_classes", "adapter_dim", "prompt_length",
)
TASK_KEYS = ("task_kind", "pattern_energy", "noise_sigma", "length_profile", "task_seed", "n_train", "n_test")
RUN_KEYS = ("preset", "strategies", "epochs", "lr", "seeds", "output_dir", "batch_size", "backbone_seed", "timing")


class UsageError(AATError):
    pass


@dataclass
class ExperimentConfig:
    model: ModelConfig
    task: SyntheticTaskSpec
    strategies: list[PeftStrategy]
    epochs: int = 10
    lr: float = 1e-3
    seeds: list[int] = field(default_factory=lambda: [0])
    output_dir: str = "runs"
    batch_size: int = 32
    backbone_seed: int = 0
    n_train: int = 256
    n_test: int = 128
    timing: bool = True


def _field_error(name: str, message: str) -> ConfigurationError:
    return ConfigurationError(f"config field '{name}': {message}")


def parse_config(doc: dict) -> ExperimentConfig:
    """Validate a flat JSON config document. Unknown keys are rejected."""
    if not isinstance(doc, dict):
        raise ConfigurationError("config must be a JSON object")
    unknown = sorted(set(doc) - set(MODEL_KEYS) - set(TASK_KEYS) - set(RUN_KEYS))
    if unknown:
        raise _field_error(unknown[0], "unknown key")

    preset = doc.get("preset", "tiny")
    if preset not in PRESETS:
        raise _field_error("preset", f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    base = dataclasses.asdict(PRESETS[preset])
    for key in MODEL_KEYS:
        if key in doc:
            if not isinstance(doc[key], int) or isinstance(doc[key], bool):
                raise _field_error(key, f"expected an integer, got {doc[key]!r}")
            base[key] = doc[key]
    try:
        model = ModelConfig(**base)
    except ConfigurationError as exc:
        raise ConfigurationError(f"model section: {exc}") from None

    def number(key, default, kind=float, minimum=None):
        value = doc.get(key, default)
        if isinstance(value, bool) or not isinstance(value, (int, float)) or (kind is int and not isinstance(value, int)):
            raise _field_error(key, f"expected a {kind.__name__}, got {value!r}")
        if minimum is not None and value < minimum:
            raise _field_error(key, f"must be >= {minimum}, got {value}")
        return kind(value)

    raw_strategies = doc.get("strategies", [s.value for s in BUDGET_ORDER])
    if not isinstance(raw_strategies, list) or not raw_strategies:
        raise _field_error("strategies", "expected a non-empty list")
    try:
        strategies = [PeftStrategy.parse(s) for s in raw_strategies]
        for s in strategies:
            s.validate(model)
    except ConfigurationError as exc:
        raise _field_error("strategies", str(exc)) from None

    seeds = doc.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds):
        raise _field_error("seeds", "expected a non-empty list of integers")

    profile = doc.get("length_profile", [])
    if not isinstance(profile, list) or not all(isinstance(t, int) and t > 0 for t in profile):
        raise _field_error("length_profile", "expected a list of positive integers")
    task_kind = doc.get("task_kind", "single-label")
    try:
        task = SyntheticTaskSpec(
            num_classes=model.num_classes,
            time=model.input_time,
            freq=model.input_freq,
            task_kind=task_kind,
            pattern_energy=number("pattern_energy", 3.0),
            noise_sigma=number("noise_sigma", 0.5, minimum=0),
            length_profile=tuple(profile),
            seed=number("task_seed", 0, int),
        )
        task.check_patch_size(model.patch_size)
    except ConfigurationError as exc:
        raise ConfigurationError(f"task section: {exc}") from None

    timing = doc.get("timing", "wall")
    if timing not in ("wall", "off"):
        raise _field_error("timing", "expected 'wall' or 'off'")
    output_dir = doc.get("output_dir", "runs")
    if not isinstance(output_dir, str) or not output_dir:
        raise _field_error("output_dir", "expected a non-empty string")

    return ExperimentConfig(
        model=model,
        task=task,
        strategies=strategies,
        epochs=number("epochs", 10, int, minimum=0),
        lr=number("lr", 1e-3, minimum=0),
        seeds=list(seeds),
        output_dir=os.environ.get("AAT_OUTPUT_DIR") or output_dir,
        batch_size=number("batch_size", 32, int, minimum=1),
        backbone_seed=number("backbone_seed", 0, int),
        n_train=number("n_train", 256, int, minimum=1),
        n_test=number("n_test", 128, int, minimum=1),
        timing=timing == "wall",
    )


def load_config(path) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from None
    return parse_config(doc)


# ----------------------------------------------------------------------------
# reports


def format_table(header, rows) -> str:
    cells = [list(map(str, header))] + [list(map(str, r)) for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.rjust(w) if j else c.ljust(w) for j, (c, w) in enumerate(zip(r, widths))) for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def _write_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def read_csv(path) -> list[dict[str, str]]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


SUMMARY_HEADER = ("strategy", "tuning_params", "total_params", "percentage", "metric", "metric_mean", "metric_sd", "runs")


def budget_notes(model: ModelConfig, strategies) -> list[str]:
    """Deviation of computed budgets from the reference ast-base figures."""
    if model != PRESETS["ast-base"]:
        return []
    notes = []
    for s in strategies:
        ref = REFERENCE_BUDGETS.get(s)
        if ref is None:
            continue
        report = count_params(model, s)
        dev = 100.0 * (report.tuning_params / (ref[0] * 1e6) - 1.0)
        notes.append(
            f"{s.value}: {report.tuning_params / 1e6:.3f}M ({report.percentage:.2f}%) "
            f"vs reference {ref[0]:.3f}M ({ref[1]:.2f}%), {dev:+.1f}%"
        )
    return notes


def run_experiment(config: ExperimentConfig) -> int:
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_set, test_set = generate_dataset(config.task, config.n_train, config.n_test)
    metric_name = "accuracy" if config.task.task_kind == "single-label" else "mAP"
    results: dict[tuple[PeftStrategy, int], float] = {}
    failed = 0
    for strategy in config.strategies:
        for seed in config.seeds:
            try:
                model = build_for_strategy(config.model, strategy, seed=config.backbone_seed, adapter_seed=seed)
                history = train(
                    model, strategy, train_set, test_set,
                    epochs=config.epochs, lr=config.lr, seed=seed, batch_size=config.batch_size,
                    clock=time.perf_counter if config.timing else None,
                )
            except AATError as exc:
                log.error("run %s seed %d failed: %s", strategy.value, seed, exc)
                failed += 1
                continue
            (out / f"history_{strategy.value}_seed{seed}.csv").write_text(history.to_csv())
            if history.records:
                metric = history[-1].eval_metric
            else:
                metric = evaluate(model, test_set)
            results[(strategy, seed)] = metric
            log.info("%s seed %d: %s %.4f", strategy.value, seed, metric_name, metric)

    rows, trade = [], []
    for strategy in config.strategies:
        metrics = [results[(strategy, s)] for s in config.seeds if (strategy, s) in results]
        if not metrics:
            continue
        report = count_params(config.model, strategy)
        mean = float(np.mean(metrics))
        sd = float(np.std(metrics, ddof=1)) if len(metrics) > 1 else 0.0
        rows.append([strategy.value, report.tuning_params, report.total_params, f"{report.percentage:.4f}",
                     metric_name, repr(mean), repr(sd), len(metrics)])
        trade.append([strategy.value, report.tuning_params, repr(mean)])
    _write_csv(out / "summary.csv", SUMMARY_HEADER, rows)
    _write_csv(out / "tradeoff.csv", ("strategy", "tuning_params", "metric_mean"), trade)
    (out / "counts.csv").write_text(write_reports_csv([count_params(config.model, s) for s in config.strategies]))
    text_rows = [[r[0], r[1], r[3], f"{float(r[5]):.4f} +/- {float(r[6]):.4f}", r[7]] for r in rows]
    text = format_table(("strategy", "tuning_params", "percentage", metric_name, "runs"), text_rows)
    notes = budget_notes(config.model, config.strategies)
    if notes:
        text += "\n" + "\n".join(notes) + "\n"
    (out / "summary.txt").write_text(text)
    sys.stdout.write(text)
    return 1 if failed else 0


def identity_gap(model_config: ModelConfig, backbone_seed: int = 0, n_inputs: int = 16,
                 train_steps: int = 0, input_seed: int = 1234) -> float:
    """Max |logit difference| between a vanilla and an aat-ms model sharing a backbone.

    ``train_steps`` > 0 first updates the adapters on random data; that is the
    negative control showing the comparison is live.
    """
    cfg = model_config.replace(adapter_dim=model_config.adapter_dim or max(1, model_config.embed_dim // 4))
    vanilla = build_model(cfg, seed=backbone_seed, variant="vanilla")
    adapted = build_model(cfg, seed=backbone_seed, variant="aat-ms")
    rng = np.random.default_rng(input_seed)
    x = rng.normal(size=(n_inputs, cfg.input_time, cfg.input_freq))
    if train_steps:
        from .data import SpectrogramSample

        samples = [SpectrogramSample(x[i], int(rng.integers(cfg.num_classes))) for i in range(n_inputs)]
        train(adapted, PeftStrategy.AATMS, samples, samples, epochs=train_steps, lr=1e-2,
              seed=0, batch_size=n_inputs, clock=None)
        # the head moves too; pin it back so only the adapters differ
        for name in ("norm_gamma", "norm_beta", "weight", "bias"):
            getattr(adapted.head, name).data = getattr(vanilla.head, name).data.copy()
    return float(np.max(np.abs(model_forward(x, vanilla).data - model_forward(x, adapted).data)))


# ----------------------------------------------------------------------------
# commands


def cmd_run(args) -> int:
    return run_experiment(load_config(args.config))


def cmd_count(args) -> int:
    if args.preset:
        if args.preset not in PRESETS:
            raise UsageError(f"unknown preset {args.preset!r}; choose from {sorted(PRESETS)}")
        model = PRESETS[args.preset]
        strategies = list(BUDGET_ORDER) + [PeftStrategy.JOINT]
        if args.config:
            strategies = load_config(args.config).strategies
    elif args.config:
        cfg = load_config(args.config)
        model, strategies = cfg.model, cfg.strategies
    else:
        raise UsageError("count needs a config file or --preset")
    sys.stdout.write(write_reports_csv([count_params(model, s) for s in strategies]))
    for note in budget_notes(model, strategies):
        sys.stderr.write(f"note: {note}\n")
    return 0


def parse_dims(text: str) -> ModelConfig:
    try:
        values = [int(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"--dims expects nine integers L,d,h,r,P,T,F,C,dhat, got {text!r}") from None
    if len(values) != 9:
        raise UsageError(f"--dims expects nine integers L,d,h,r,P,T,F,C,dhat, got {len(values)}")
    L, d, h, r, P, T, F, C, dhat = values
    try:
        return ModelConfig(depth=L, embed_dim=d, num_heads=h, mlp_ratio=r, patch_size=P, input_time=T,
                           input_freq=F, num_classes=C, adapter_dim=dhat, variant="aat-ms")
    except ConfigurationError as exc:
        raise UsageError(f"--dims: {exc}") from None


def cmd_gradcheck(args) -> int:
    cfg = parse_dims(args.dims) if args.dims else PRESETS["tiny"].replace(variant="aat-ms")
    total = count_params(cfg, PeftStrategy.AATMS).total_params
    if total > GRADCHECK_MAX_PARAMS:
        raise UsageError(f"model has {total} parameters; gradcheck is capped at {GRADCHECK_MAX_PARAMS}")
    model = build_model(cfg, seed=args.seed, variant="aat-ms")
    perturb_adapters(model, seed=args.seed)
    rng = np.random.default_rng(args.seed)
    x = rng.normal(size=(2, cfg.input_time, cfg.input_freq))
    labels = rng.integers(cfg.num_classes, size=2)
    errors = check_model_gradients(model, x, labels)
    worst = max(errors, key=errors.get)
    print(f"parameters checked: {total} in {len(errors)} tensors")
    print(f"max relative error: {errors[worst]:.3e} ({worst})")
    if errors[worst] >= GRADCHECK_TOLERANCE:
        bad = sorted((e, n) for n, e in errors.items() if e >= GRADCHECK_TOLERANCE)[::-1]
        print("FAILED: " + ", ".join(f"{n}={e:.3e}" for e, n in bad), file=sys.stderr)
        return 1
    return 0


def cmd_identity(args) -> int:
    cfg = load_config(args.config)
    gap = identity_gap(cfg.model, cfg.backbone_seed, train_steps=args.train_steps)
    print(f"max abs logit difference (vanilla vs aat-ms, 16 inputs): {gap:.3e}")
    return 0 if gap < IDENTITY_TOLERANCE else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aat", description="Adapter fine-tuning experiments on a desk-scale audio Transformer.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train every (strategy, seed) and write history and summary CSVs")
    p.add_argument("config")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("count", help="print tuned/total parameter counts per strategy")
    p.add_argument("config", nargs="?")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.set_defaults(func=cmd_count)

    p = sub.add_parser("gradcheck", help="finite-difference check of every parameter of a tiny aat-ms model")
    p.add_argument("--dims", help="L,d,h,r,P,T,F,C,dhat (default: the tiny preset)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("identity", help="check that zero-initialized adapters leave the logits unchanged")
    p.add_argument("config")
    p.add_argument("--train-steps", type=int, default=0, help="train adapters first (negative control)")
    p.set_defaults(func=cmd_identity)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
