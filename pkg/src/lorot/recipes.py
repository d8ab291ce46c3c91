"""Named desk-scale experiment recipes.

Each recipe trains on built-in synthetic data, evaluates, writes reports
under an output directory, and returns its metrics. Where a recipe echoes a
published full-scale experiment, the full-scale numbers are printed alongside
as reference only, never as a target: desk-scale synthetic runs are expected
to differ.

Defaults follow the desk-scale protocol (10k-image training subsets, the
small reference CNN, 3 seeds); every size knob is a parameter so the
acceptance suite can run tighter variants within its time budget.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .adversarial import AdversarialConfig
from .config import RunManifest, output_lock
from .datasets import (
    ImbalanceSpec,
    build_imbalanced,
    make_cue_conflict,
    make_ood_pair,
    make_stripes,
)
from .evaluation import (
    accuracy,
    affinity,
    classwise_confidence,
    eval_adversarial,
    lambda_sweep,
    ood_evaluate,
)
from .models import save_checkpoint
from .reports import report_checksum, save_scores, write_csv_table, write_json_report
from .training import TrainingConfig, run_training

# Published full-scale results these desk recipes echo. Reference only, not
# desk-scale targets.
FULL_SCALE_REFERENCE = {
    "affinity": {"rotation": 58.06, "lorot-i": 93.78, "lorot-e": 90.15},
    "strategies": {"baseline": 95.01, "rot-da": 92.76, "rot-mt": 93.38},
    "ood_auroc_lsun": {"baseline": 90.9, "lorot-i": 98.6, "lorot-e": 98.7},
    "imbalance_cifar10": {
        "baseline": {0.01: 70.36, 0.02: 78.06, 0.05: 83.42},
        "lorot-e": {0.01: 77.32, 0.02: 80.67, 0.05: 85.67},
    },
    "adversarial": {
        "baseline": {"clean": 95.3, "pgd20": 0.0, "pgd100": 0.0},
        "adv-training": {"clean": 83.4, "pgd20": 46.5, "pgd100": 46.5},
        "adv+lorot-i": {"clean": 82.1, "pgd20": 52.7, "pgd100": 52.6},
        "adv+lorot-e": {"clean": 82.6, "pgd20": 52.8, "pgd100": 52.8},
    },
    "lambda_lorot_i": {0.1: 95.92, 0.2: 96.16, 0.3: 95.72, 0.4: 95.92, 0.5: 95.84},
}

REFERENCE_MARK = "full-scale reference only, not a target"

_DESK_WIDTHS = (16, 32, 64)


def _desk_config(seed: int, epochs: int, **overrides) -> TrainingConfig:
    defaults = dict(
        strategy="mt",
        variant="lorot-i",
        lam=0.1,
        batch_size=128,
        epochs=epochs,
        optimizer="sgd",
        lr=0.05,
        momentum=0.9,
        weight_decay=5e-4,
        seed=seed,
        model_widths=_DESK_WIDTHS,
    )
    defaults.update(overrides)
    return TrainingConfig(**defaults)


def _finish(output_dir: Path, name: str, payload: dict, seeds, params: dict) -> dict:
    started_at = payload.pop("_started_at")
    payload = {"recipe": name, **payload}
    payload["config_hash"] = hashlib.sha256(
        json.dumps({"recipe": name, **params}, sort_keys=True).encode()
    ).hexdigest()
    payload["report_checksum"] = report_checksum(payload)
    manifest = RunManifest(
        config_hash=payload["config_hash"],
        seeds=tuple(seeds),
        started_at=started_at,
        finished_at=RunManifest.now(),
        artifacts={"report": str(output_dir / "report.json")},
    )
    write_json_report(output_dir / "report.json", payload)
    manifest.save(output_dir / "manifest.json")
    return payload


def run_affinity_recipe(
    output_dir: str | Path,
    seed: int = 0,
    n_train: int = 10_000,
    n_val: int = 1_500,
    epochs: int = 8,
    verbose: bool = True,
) -> dict:
    """Train on clean data, then measure the affinity of each transform.

    Desk echo of the full-scale distribution-shift comparison between global
    rotation and the two localizable variants.
    """
    with output_lock(output_dir) as out:
        started = RunManifest.now()
        train = make_stripes(n_train, seed=seed + 9000)
        val = make_stripes(n_val, seed=seed + 9001, split="val")
        config = _desk_config(seed, epochs, strategy="baseline")
        model, history = run_training(config, train)
        history.save(out / f"history_seed{seed}.jsonl")
        save_checkpoint(out / f"checkpoint_seed{seed}.pt", model, {"seed": seed})
        values = {}
        for transform in ("identity", "rotation", "lorot-i", "lorot-e"):
            values[transform] = affinity(model, val, transform, seed=seed)
        rows = [
            {
                "transform": t,
                "desk_affinity": round(values[t], 2),
                "full_scale_reference": FULL_SCALE_REFERENCE["affinity"].get(t, ""),
            }
            for t in values
        ]
        write_csv_table(out / "affinity.csv", rows)
        if verbose:
            print(f"affinity (desk scale, seed {seed}); {REFERENCE_MARK}:")
            for row in rows:
                ref = row["full_scale_reference"]
                ref_text = f"  [{ref}]" if ref != "" else ""
                print(f"  {row['transform']:<10} {row['desk_affinity']:7.2f}{ref_text}")
        return _finish(out, "affinity-table2-desk", {
            "_started_at": started,
            "seed": seed,
            "affinity": values,
            "clean_val_accuracy": accuracy(model, val),
            "reference": FULL_SCALE_REFERENCE["affinity"],
        }, [seed], dict(seed=seed, n_train=n_train, n_val=n_val, epochs=epochs))


STRATEGY_MATRIX = {
    "baseline": dict(strategy="baseline"),
    "rot-da": dict(strategy="da", variant="rotation"),
    "rot-mt": dict(strategy="mt", variant="rotation"),
    "lorot-i": dict(strategy="mt", variant="lorot-i"),
    "lorot-e": dict(strategy="mt", variant="lorot-e"),
}


def run_strategy_recipe(
    output_dir: str | Path,
    seeds: tuple[int, ...] = (0, 1, 2),
    n_train: int = 10_000,
    n_test: int = 1_500,
    epochs: int = 8,
    verbose: bool = True,
) -> dict:
    """Accuracy of each integration strategy; echoes the full-scale finding
    that global rotation hurts as DA/MT while the localizable variants do not.
    """
    with output_lock(output_dir) as out:
        started = RunManifest.now()
        train = make_stripes(n_train, seed=9100)
        test = make_stripes(n_test, seed=9102, split="test")
        per_method: dict[str, list[float]] = {}
        for method, overrides in STRATEGY_MATRIX.items():
            per_method[method] = []
            for seed in seeds:
                config = _desk_config(seed, epochs, **overrides)
                model, _ = run_training(config, train)
                per_method[method].append(accuracy(model, test))
        means = {m: float(np.mean(v)) for m, v in per_method.items()}
        rows = [
            {
                "method": m,
                "desk_mean_accuracy": round(means[m], 2),
                "full_scale_reference": FULL_SCALE_REFERENCE["strategies"].get(m, ""),
            }
            for m in per_method
        ]
        write_csv_table(out / "strategies.csv", rows)
        if verbose:
            print(f"strategy accuracies (desk scale, {len(seeds)} seeds); {REFERENCE_MARK}:")
            for row in rows:
                ref = row["full_scale_reference"]
                ref_text = f"  [{ref}]" if ref != "" else ""
                print(f"  {row['method']:<9} {row['desk_mean_accuracy']:7.2f}{ref_text}")
        return _finish(out, "classify-strategies-desk", {
            "_started_at": started,
            "seeds": list(seeds),
            "per_seed_accuracy": per_method,
            "mean_accuracy": means,
            "reference": FULL_SCALE_REFERENCE["strategies"],
        }, seeds, dict(seeds=list(seeds), n_train=n_train, n_test=n_test, epochs=epochs))


def run_ood_recipe(
    output_dir: str | Path,
    seeds: tuple[int, ...] = (0, 1, 2),
    n_train: int = 10_000,
    n_test: int = 1_000,
    n_ood: int = 1_000,
    epochs: int = 8,
    score_kind: str = "kl",
    verbose: bool = True,
) -> dict:
    """KL-to-uniform OOD detection: shortcut-marked stripes as in-distribution,
    the cue-conflict set as OOD. Echoes the full-scale AUROC gains.
    """
    with output_lock(output_dir) as out:
        started = RunManifest.now()
        train = make_stripes(n_train, seed=9200, marker=True)
        test_in = make_stripes(n_test, seed=9202, split="test", marker=True)
        ood = make_cue_conflict(n_ood, seed=9203)
        pair = make_ood_pair(test_in, ood)
        per_method: dict[str, list[float]] = {}
        for method in ("baseline", "lorot-i", "lorot-e"):
            per_method[method] = []
            for seed in seeds:
                config = _desk_config(seed, epochs, **STRATEGY_MATRIX[method])
                model, _ = run_training(config, train)
                report = ood_evaluate(model, pair, score_kind)
                per_method[method].append(100.0 * report.auroc)
                save_scores(out / f"scores_{method}_seed{seed}_in.csv", report.in_scores)
                save_scores(out / f"scores_{method}_seed{seed}_out.csv", report.out_scores)
                if seed == seeds[0]:
                    conf = classwise_confidence(model, pair)
                    write_json_report(out / f"confidence_{method}.json", conf.to_dict())
        means = {m: float(np.mean(v)) for m, v in per_method.items()}
        rows = [
            {
                "method": m,
                "desk_mean_auroc": round(means[m], 2),
                "full_scale_reference_lsun": FULL_SCALE_REFERENCE["ood_auroc_lsun"].get(m, ""),
            }
            for m in per_method
        ]
        write_csv_table(out / "ood.csv", rows)
        if verbose:
            print(f"OOD AUROC, {score_kind} scoring (desk scale); {REFERENCE_MARK}:")
            for row in rows:
                print(
                    f"  {row['method']:<9} {row['desk_mean_auroc']:7.2f}"
                    f"  [{row['full_scale_reference_lsun']}]"
                )
        return _finish(out, "ood-desk", {
            "_started_at": started,
            "seeds": list(seeds),
            "score_kind": score_kind,
            "per_seed_auroc": per_method,
            "mean_auroc": means,
            "reference_lsun": FULL_SCALE_REFERENCE["ood_auroc_lsun"],
        }, seeds, dict(seeds=list(seeds), n_train=n_train, n_test=n_test, n_ood=n_ood,
                       epochs=epochs, score_kind=score_kind))


def run_imbalance_recipe(
    output_dir: str | Path,
    seeds: tuple[int, ...] = (0, 1, 2),
    mus: tuple[float, ...] = (0.01, 0.02, 0.05),
    n_per_class: int = 1_000,
    n_test: int = 1_500,
    epochs: int = 12,
    verbose: bool = True,
) -> dict:
    """Exponentially imbalanced training at each ratio; baseline vs lorot-e.

    Test split is always the untouched balanced set.
    """
    with output_lock(output_dir) as out:
        started = RunManifest.now()
        balanced = make_stripes(n_per_class * 10, seed=9300)
        test = make_stripes(n_test, seed=9302, split="test")
        results: dict[str, dict[str, list[float]]] = {}
        counts = {}
        for mu in mus:
            spec = ImbalanceSpec(mu=mu, num_classes=10)
            imbalanced = build_imbalanced(balanced, spec, seed=9301)
            counts[str(mu)] = imbalanced.class_counts().tolist()
            results[str(mu)] = {}
            for method in ("baseline", "lorot-e"):
                accs = []
                for seed in seeds:
                    config = _desk_config(seed, epochs, **STRATEGY_MATRIX[method])
                    model, _ = run_training(config, imbalanced)
                    accs.append(accuracy(model, test))
                results[str(mu)][method] = accs
        rows = []
        for mu in mus:
            for method in ("baseline", "lorot-e"):
                rows.append({
                    "mu": mu,
                    "method": method,
                    "desk_mean_accuracy": round(float(np.mean(results[str(mu)][method])), 2),
                    "full_scale_reference": FULL_SCALE_REFERENCE["imbalance_cifar10"][method].get(mu, ""),
                })
        write_csv_table(out / "imbalance.csv", rows)
        if verbose:
            print(f"imbalanced accuracy (desk scale); {REFERENCE_MARK}:")
            for row in rows:
                ref = row["full_scale_reference"]
                ref_text = f"  [{ref}]" if ref != "" else ""
                print(f"  mu={row['mu']:<5} {row['method']:<9} {row['desk_mean_accuracy']:7.2f}{ref_text}")
        return _finish(out, "imbalance-mu001-desk", {
            "_started_at": started,
            "seeds": list(seeds),
            "class_counts": counts,
            "per_seed_accuracy": results,
            "reference": {
                k: {str(m): v for m, v in d.items()}
                for k, d in FULL_SCALE_REFERENCE["imbalance_cifar10"].items()
            },
        }, seeds, dict(seeds=list(seeds), mus=list(mus), n_per_class=n_per_class,
                       n_test=n_test, epochs=epochs))


def run_adversarial_recipe(
    output_dir: str | Path,
    seed: int = 0,
    n_train: int = 1_500,
    n_test: int = 400,
    epochs: int = 4,
    eval_steps: tuple[int, ...] = (20,),
    verbose: bool = True,
) -> dict:
    """PGD training protocol: 10-step adversaries at epsilon 8/255 during
    training, 20-/100-step evaluation. Compares standard training, plain
    adversarial training, and adversarial training with the lorot-e auxiliary.
    Uses low-amplitude stripes so the epsilon ball actually bites.
    """
    with output_lock(output_dir) as out:
        started = RunManifest.now()
        train = make_stripes(n_train, seed=9400, amplitude=0.12, noise=0.06)
        test = make_stripes(n_test, seed=9402, split="test", amplitude=0.12, noise=0.06)
        adv = AdversarialConfig()
        runs = {
            "baseline": (dict(strategy="baseline"), None),
            "adv-training": (dict(strategy="baseline"), adv),
            "adv+lorot-e": (dict(strategy="mt", variant="lorot-e"), adv),
        }
        metrics: dict[str, dict] = {}
        for method, (overrides, adv_config) in runs.items():
            config = _desk_config(seed, epochs, model_widths=(8, 16, 32), **overrides)
            model, _ = run_training(config, train, adv_config=adv_config)
            entry = {"clean": accuracy(model, test)}
            for steps in eval_steps:
                result = eval_adversarial(model, test, adv, steps=steps)
                entry[f"pgd{steps}"] = result["robust_accuracy"]
            metrics[method] = entry
        rows = [
            {"method": m, **{k: round(v, 2) for k, v in entry.items()},
             "full_scale_reference": str(FULL_SCALE_REFERENCE["adversarial"].get(m, ""))}
            for m, entry in metrics.items()
        ]
        write_csv_table(out / "adversarial.csv", rows)
        if verbose:
            print(f"adversarial robustness (desk scale); {REFERENCE_MARK}:")
            for row in rows:
                print(f"  {row['method']:<13} " + "  ".join(
                    f"{k}={row[k]}" for k in row if k not in ("method", "full_scale_reference")
                ) + f"  [{row['full_scale_reference']}]")
        return _finish(out, "adversarial-desk", {
            "_started_at": started,
            "seed": seed,
            "metrics": metrics,
            "reference": FULL_SCALE_REFERENCE["adversarial"],
        }, [seed], dict(seed=seed, n_train=n_train, n_test=n_test, epochs=epochs,
                        eval_steps=list(eval_steps)))


def run_lambda_recipe(
    output_dir: str | Path,
    lambdas: tuple[float, ...] = (0.1, 0.3, 0.5),
    seeds: tuple[int, ...] = (0, 1, 2),
    n_train: int = 10_000,
    n_test: int = 1_500,
    epochs: int = 8,
    verbose: bool = True,
) -> dict:
    """Loss-weight sweep; echoes the finding that the weight barely matters."""
    with output_lock(output_dir) as out:
        started = RunManifest.now()
        train = make_stripes(n_train, seed=9500)
        test = make_stripes(n_test, seed=9502, split="test")
        per_lambda: dict[str, list[float]] = {str(lam): [] for lam in lambdas}
        for seed in seeds:
            base = _desk_config(seed, epochs, strategy="mt", variant="lorot-i")
            for row in lambda_sweep(base, lambdas, train, test):
                per_lambda[str(row["lam"])].append(row["accuracy"])
        means = {lam: float(np.mean(v)) for lam, v in per_lambda.items()}
        spread = max(means.values()) - min(means.values())
        rows = [
            {
                "lam": lam,
                "desk_mean_accuracy": round(means[str(lam)], 2),
                "full_scale_reference": FULL_SCALE_REFERENCE["lambda_lorot_i"].get(lam, ""),
            }
            for lam in lambdas
        ]
        write_csv_table(out / "lambda_sweep.csv", rows)
        if verbose:
            print(f"lambda sweep (desk scale, lorot-i); {REFERENCE_MARK}:")
            for row in rows:
                ref = row["full_scale_reference"]
                ref_text = f"  [{ref}]" if ref != "" else ""
                print(f"  lam={row['lam']:<5} {row['desk_mean_accuracy']:7.2f}{ref_text}")
            print(f"  spread: {spread:.2f}")
        return _finish(out, "lambda-sweep-desk", {
            "_started_at": started,
            "seeds": list(seeds),
            "per_lambda_accuracy": per_lambda,
            "mean_accuracy": means,
            "spread": spread,
            "reference": {str(k): v for k, v in FULL_SCALE_REFERENCE["lambda_lorot_i"].items()},
        }, seeds, dict(lambdas=list(lambdas), seeds=list(seeds), n_train=n_train,
                       n_test=n_test, epochs=epochs))


RECIPES = {
    "affinity-table2-desk": run_affinity_recipe,
    "classify-strategies-desk": run_strategy_recipe,
    "ood-desk": run_ood_recipe,
    "imbalance-mu001-desk": run_imbalance_recipe,
    "adversarial-desk": run_adversarial_recipe,
    "lambda-sweep-desk": run_lambda_recipe,
}


def run_recipe(name: str, output_dir: str | Path, **kwargs) -> dict:
    if name not in RECIPES:
        raise ValueError(f"unknown recipe {name!r}; available: {', '.join(sorted(RECIPES))}")
    return RECIPES[name](output_dir, **kwargs)
