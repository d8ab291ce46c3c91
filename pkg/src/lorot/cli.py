"""Command-line interface.

Subcommands:

* ``train``             train per the config file; writes checkpoints,
                        histories, and a run manifest
* ``eval``              evaluate a checkpoint: accuracy | affinity | ood |
                        adversarial | confidence
* ``repro``             run a named desk-scale recipe end to end
* ``preview``           write before/after PNG pairs of the transforms
* ``sweep``             loss-weight sweep from a config file
* ``build-imbalanced``  subsample a packed/synthetic dataset to an
                        exponential class-imbalance profile

Exit codes: 0 success; 2 configuration or validation error; 1 runtime error.
Dataset arguments accept a directory path, a packed file path, a JSON
descriptor string (``'{"synthetic": "stripes", ...}'``), or a ``.json``
descriptor file.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, RunManifest, output_lock
from .datasets import ImbalanceSpec, build_imbalanced, load_dataset, make_ood_pair, make_stripes, save_packed
from .evaluation import (
    accuracy,
    affinity,
    classwise_confidence,
    eval_adversarial,
    lambda_sweep,
    ood_evaluate,
)
from .models import load_checkpoint, save_checkpoint
from .recipes import RECIPES, run_recipe
from .reports import report_checksum, save_scores, write_csv_table, write_json_report
from .seeding import derive_rng
from .training import run_training
from .transforms import transform_sample


def _parse_data_arg(text: str):
    text = text.strip()
    if text.startswith("{"):
        return json.loads(text)
    path = Path(text)
    if path.suffix == ".json":
        if not path.exists():
            raise FileNotFoundError(f"dataset descriptor file not found: {path}")
        return json.loads(path.read_text())
    return path


def _load_data(text: str):
    return load_dataset(_parse_data_arg(text))


def _parse_seeds(text: str) -> tuple[int, ...]:
    return tuple(int(s) for s in text.split(",") if s.strip() != "")


def cmd_train(args) -> int:
    config = ExperimentConfig.from_file(args.config)
    if args.output_dir:
        config = replace(config, output_dir=args.output_dir)
    if args.seeds:
        config = replace(config, seeds=_parse_seeds(args.seeds))
    out = config.resolved_output_dir()
    config_hash = config.config_hash()
    with output_lock(out):
        started = RunManifest.now()
        train_ds = load_dataset(config.dataset)
        if config.imbalance is not None:
            spec = ImbalanceSpec(
                mu=float(config.imbalance["mu"]),
                num_classes=train_ds.num_classes,
                profile=config.imbalance.get("profile", "exp"),
            )
            train_ds = build_imbalanced(train_ds, spec, seed=config.seeds[0])
        val_ds = load_dataset(config.eval_dataset) if config.eval_dataset else None
        artifacts = {}
        summary = {}
        for seed in config.seeds:
            t_config = replace(config.training, seed=seed)
            model, history = run_training(t_config, train_ds, val_dataset=val_ds,
                                          adv_config=config.adversarial)
            ckpt = out / f"checkpoint_seed{seed}.pt"
            hist = out / f"history_seed{seed}.jsonl"
            save_checkpoint(ckpt, model, {
                "config_hash": config_hash, "seed": seed,
                "variant": t_config.variant, "strategy": t_config.strategy,
            })
            history.save(hist)
            artifacts[f"checkpoint_seed{seed}"] = str(ckpt)
            artifacts[f"history_seed{seed}"] = str(hist)
            summary[str(seed)] = {
                "final_train_accuracy": history.records[-1].train_accuracy if history.records else None,
                "final_val_accuracy": history.records[-1].val_accuracy if history.records else None,
                "history_checksum": history.checksum(),
            }
        report = {
            "kind": config.kind,
            "config_hash": config_hash,
            "seeds": list(config.seeds),
            "dataset_checksum": train_ds.checksum(),
            "per_seed": summary,
        }
        report["report_checksum"] = report_checksum(report)
        write_json_report(out / "train_report.json", report)
        RunManifest(
            config_hash=config_hash, seeds=config.seeds,
            started_at=started, finished_at=RunManifest.now(), artifacts=artifacts,
        ).save(out / "manifest.json")
    print(f"trained {len(config.seeds)} seed(s); artifacts in {out}")
    return 0


def _plot_confidence(report, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    in_means = report.in_class_means
    ax.plot(range(len(in_means)), in_means, "o--", label="in-distribution (per class)")
    if report.out_class_means is not None:
        ax.plot(range(len(report.out_class_means)), report.out_class_means, "s-",
                label="out-of-distribution (per class)")
    else:
        ax.axhline(report.out_mean, color="tab:orange", label="out-of-distribution (mean)")
    ax.set_xlabel("class index")
    ax.set_ylabel("mean max-softmax confidence")
    ax.set_ylim(0.0, 1.05)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_eval(args) -> int:
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    model, metadata = load_checkpoint(args.checkpoint)
    dataset = _load_data(args.data)
    payload = {"eval": args.what, "checkpoint": str(args.checkpoint),
               "checkpoint_metadata": metadata, "dataset": dataset.name,
               "dataset_checksum": dataset.checksum()}

    if args.what == "accuracy":
        payload["metrics"] = {"accuracy": accuracy(model, dataset)}
    elif args.what == "affinity":
        value = affinity(model, dataset, args.transform, seed=args.seed,
                         include_identity=not args.exclude_identity)
        payload["metrics"] = {"transform": args.transform, "affinity": value}
    elif args.what == "ood":
        if not args.ood_data:
            raise ValueError("eval ood requires --ood-data")
        pair = make_ood_pair(dataset, _load_data(args.ood_data), resize=args.resize)
        report = ood_evaluate(model, pair, args.score)
        save_scores(out / "scores_in.csv", report.in_scores)
        save_scores(out / "scores_out.csv", report.out_scores)
        payload["metrics"] = report.to_dict()
        payload["raw_score_files"] = {"in": str(out / "scores_in.csv"),
                                      "out": str(out / "scores_out.csv")}
    elif args.what == "confidence":
        if not args.ood_data:
            raise ValueError("eval confidence requires --ood-data")
        pair = make_ood_pair(dataset, _load_data(args.ood_data), resize=args.resize)
        report = classwise_confidence(model, pair)
        save_scores(out / "confidence_in.csv", report.in_confidences)
        save_scores(out / "confidence_out.csv", report.out_confidences)
        _plot_confidence(report, out / "confidence.png")
        payload["metrics"] = report.to_dict()
        payload["raw_score_files"] = {"in": str(out / "confidence_in.csv"),
                                      "out": str(out / "confidence_out.csv")}
    elif args.what == "adversarial":
        from .adversarial import AdversarialConfig

        adv = AdversarialConfig(epsilon=args.epsilon, eval_steps=args.steps)
        payload["metrics"] = eval_adversarial(model, dataset, adv, steps=args.steps, seed=args.seed)
    else:  # pragma: no cover - argparse restricts choices
        raise ValueError(f"unknown eval kind {args.what!r}")

    payload["report_checksum"] = report_checksum(payload)
    write_json_report(out / "report.json", payload)
    print(json.dumps(payload["metrics"], indent=2, sort_keys=True))
    return 0


# shrunk recipe sizes for --fast smoke runs
_FAST_RECIPE_KWARGS = {
    "affinity-table2-desk": dict(n_train=800, n_val=300, epochs=3),
    "classify-strategies-desk": dict(n_train=600, n_test=300, epochs=2),
    "ood-desk": dict(n_train=800, n_test=300, n_ood=300, epochs=2),
    "imbalance-mu001-desk": dict(mus=(0.05,), n_per_class=60, n_test=300, epochs=2),
    "adversarial-desk": dict(n_train=400, n_test=150, epochs=1),
    "lambda-sweep-desk": dict(n_train=600, n_test=300, epochs=2),
}


def cmd_repro(args) -> int:
    kwargs = {}
    if args.fast:
        kwargs.update(_FAST_RECIPE_KWARGS.get(args.recipe, {}))
    if args.seeds:
        seeds = _parse_seeds(args.seeds)
        if args.recipe in ("affinity-table2-desk", "adversarial-desk"):
            kwargs["seed"] = seeds[0]
        else:
            kwargs["seeds"] = seeds
    run_recipe(args.recipe, args.output, **kwargs)
    return 0


def cmd_preview(args) -> int:
    from PIL import Image

    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    if args.data:
        dataset = _load_data(args.data)
    else:
        dataset = make_stripes(max(args.count, 10), seed=args.seed)
    rng = derive_rng(args.seed, 808)
    for i in range(args.count):
        image = dataset.images[i % len(dataset)]
        sample = transform_sample(image, int(dataset.labels[i % len(dataset)]), args.variant, rng)
        before = (np.clip(image, 0, 1) * 255).round().astype(np.uint8)
        after = (np.clip(sample.image, 0, 1) * 255).round().astype(np.uint8)
        Image.fromarray(before).save(out / f"{i:03d}_before.png")
        Image.fromarray(after).save(out / f"{i:03d}_after.png")
        label = sample.pretext_label
        print(f"{i:03d}: pretext label {label.value} (rotation {90 * label.rotation} deg"
              + (f", cell {label.cell}" if label.cell is not None else "")
              + f"), patch corner ({sample.patch.top_x}, {sample.patch.top_y}) side {sample.patch.side}")
    print(f"wrote {2 * args.count} images to {out}")
    return 0


def cmd_sweep(args) -> int:
    config = ExperimentConfig.from_file(args.config)
    if args.output_dir:
        config = replace(config, output_dir=args.output_dir)
    lambdas = _parse_floats(args.lambdas) if args.lambdas else (config.lambdas or (0.1, 0.3, 0.5))
    out = config.resolved_output_dir()
    with output_lock(out):
        train_ds = load_dataset(config.dataset)
        if config.eval_dataset is None:
            raise ValueError("sweep requires eval_dataset in the config")
        eval_ds = load_dataset(config.eval_dataset)
        per_lambda = {str(lam): [] for lam in lambdas}
        for seed in config.seeds:
            base = replace(config.training, seed=seed)
            for row in lambda_sweep(base, lambdas, train_ds, eval_ds):
                per_lambda[str(row["lam"])].append(row["accuracy"])
        rows = [
            {"lam": lam, "mean_accuracy": round(float(np.mean(per_lambda[str(lam)])), 3),
             "per_seed": " ".join(f"{a:.2f}" for a in per_lambda[str(lam)])}
            for lam in lambdas
        ]
        write_csv_table(out / "lambda_sweep.csv", rows)
        payload = {
            "kind": "lambda-sweep",
            "config_hash": config.config_hash(),
            "seeds": list(config.seeds),
            "per_lambda_accuracy": per_lambda,
        }
        payload["report_checksum"] = report_checksum(payload)
        write_json_report(out / "report.json", payload)
    for row in rows:
        print(f"lam={row['lam']}: {row['mean_accuracy']}")
    return 0


def _parse_floats(text: str) -> tuple[float, ...]:
    return tuple(float(s) for s in text.split(",") if s.strip() != "")


def cmd_build_imbalanced(args) -> int:
    dataset = _load_data(args.data)
    spec = ImbalanceSpec(mu=args.mu, num_classes=dataset.num_classes, profile=args.profile)
    built = build_imbalanced(dataset, spec, seed=args.seed)
    save_packed(built, args.output)
    counts = built.class_counts().tolist()
    print(f"wrote {len(built)} samples ({counts}) to {args.output}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lorot",
        description="Localizable-rotation auxiliary self-supervision: training and evaluation toolkit.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train models from an experiment config")
    p.add_argument("--config", required=True, help="path to a JSON experiment config")
    p.add_argument("--output-dir", help="override the config's output directory")
    p.add_argument("--seeds", help="comma-separated seed override, e.g. 0,1,2")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained checkpoint")
    p.add_argument("what", choices=("accuracy", "affinity", "ood", "confidence", "adversarial"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset: path, JSON descriptor, or descriptor file")
    p.add_argument("--ood-data", help="out-of-distribution dataset (ood/confidence)")
    p.add_argument("--score", default="kl", choices=("kl", "msp"), help="OOD score kind")
    p.add_argument("--transform", default="identity",
                   choices=("identity", "rotation", "lorot-i", "lorot-e"), help="affinity transform")
    p.add_argument("--exclude-identity", action="store_true",
                   help="sample affinity labels without identity rotations")
    p.add_argument("--steps", type=int, default=20, help="PGD evaluation steps (20 or 100)")
    p.add_argument("--epsilon", type=float, default=8.0 / 255.0)
    p.add_argument("--resize", choices=("center-crop",), default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", default="eval-out", help="report directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("repro", help="run a named desk-scale recipe")
    p.add_argument("recipe", help=f"one of: {', '.join(sorted(RECIPES))}")
    p.add_argument("--output", required=True, help="output directory")
    p.add_argument("--seeds", help="comma-separated seeds")
    p.add_argument("--fast", action="store_true",
                   help="shrunk sizes for a quick smoke run (not the desk protocol)")
    p.set_defaults(func=cmd_repro)

    p = sub.add_parser("preview", help="write before/after transform image pairs")
    p.add_argument("--variant", default="lorot-i", choices=("lorot-i", "lorot-e", "rotation"))
    p.add_argument("--data", help="optional dataset to draw source images from")
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", default="preview-out")
    p.set_defaults(func=cmd_preview)

    p = sub.add_parser("sweep", help="loss-weight sweep from a config")
    p.add_argument("--config", required=True)
    p.add_argument("--lambdas", help="comma-separated weights, e.g. 0.1,0.3,0.5")
    p.add_argument("--output-dir", help="override the config's output directory")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("build-imbalanced", help="build an exponentially imbalanced packed dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--mu", type=float, required=True, help="imbalance ratio in (0, 1]")
    p.add_argument("--profile", default="exp", choices=("exp", "linear"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", required=True, help="output packed-dataset path")
    p.set_defaults(func=cmd_build_imbalanced)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
