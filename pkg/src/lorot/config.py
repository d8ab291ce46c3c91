"""Experiment configuration files, run manifests, and output-directory locks.

Configs are JSON with a fixed key schema, validated strictly: unknown keys are
rejected with the offending path named, so typos fail loudly instead of being
ignored. The canonical serialization (sorted keys) is what gets hashed, and
the hash is embedded in every artifact a run produces.

Environment override: ``LOROT_OUTPUT_DIR``, when set, replaces the configured
output directory (output paths only; nothing else is overridable from the
environment).
"""

from __future__ import annotations

import dataclasses
import datetime
import hashlib
import json
import os
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .adversarial import AdversarialConfig
from .training import TrainingConfig
from .evaluation import SCORE_KINDS

EXPERIMENT_KINDS = ("classify", "ood", "imbalance", "adversarial", "affinity", "lambda-sweep")

_TRAINING_KEYS = {f.name for f in dataclasses.fields(TrainingConfig)}
_ADVERSARIAL_KEYS = {f.name for f in dataclasses.fields(AdversarialConfig)}
_IMBALANCE_KEYS = {"mu", "profile"}
_TOP_KEYS = {
    "kind",
    "dataset",
    "eval_dataset",
    "ood_dataset",
    "training",
    "adversarial",
    "imbalance",
    "lambdas",
    "score_kind",
    "output_dir",
    "seeds",
}


def _check_keys(data: dict, allowed: set[str], path: str) -> None:
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ValueError(f"unknown config key {path}{unknown[0]!r}")


@dataclass
class ExperimentConfig:
    kind: str
    dataset: dict
    output_dir: str
    seeds: tuple[int, ...] = (0,)
    eval_dataset: dict | None = None
    ood_dataset: dict | None = None
    training: TrainingConfig = field(default_factory=TrainingConfig)
    adversarial: AdversarialConfig | None = None
    imbalance: dict | None = None  # {"mu": float, "profile": "exp"}
    lambdas: tuple[float, ...] | None = None
    score_kind: str = "kl"

    def __post_init__(self):
        if self.kind not in EXPERIMENT_KINDS:
            raise ValueError(f"kind must be one of {EXPERIMENT_KINDS}, got {self.kind!r}")
        if not isinstance(self.dataset, dict):
            raise ValueError("dataset must be a descriptor object")
        if not self.seeds:
            raise ValueError("seeds must not be empty")
        if self.score_kind not in SCORE_KINDS:
            raise ValueError(f"score_kind must be one of {SCORE_KINDS}, got {self.score_kind!r}")
        if self.imbalance is not None:
            _check_keys(self.imbalance, _IMBALANCE_KEYS, "imbalance.")
            mu = self.imbalance.get("mu")
            if mu is None or not 0.0 < float(mu) <= 1.0:
                raise ValueError(f"imbalance.mu must be in (0, 1], got {mu}")
        if self.lambdas is not None and len(self.lambdas) == 0:
            raise ValueError("lambdas must not be empty when given")

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ValueError("config must be a JSON object")
        _check_keys(data, _TOP_KEYS, "")
        for key in ("kind", "dataset", "output_dir"):
            if key not in data:
                raise ValueError(f"missing required config key {key!r}")
        training_data = dict(data.get("training", {}))
        _check_keys(training_data, _TRAINING_KEYS, "training.")
        for tuple_key in ("lr_decay_epochs", "model_widths"):
            if tuple_key in training_data:
                training_data[tuple_key] = tuple(training_data[tuple_key])
        try:
            training = TrainingConfig(**training_data)
        except ValueError as exc:
            raise ValueError(f"training: {exc}") from exc
        adversarial = None
        if data.get("adversarial") is not None:
            adv_data = dict(data["adversarial"])
            _check_keys(adv_data, _ADVERSARIAL_KEYS, "adversarial.")
            try:
                adversarial = AdversarialConfig(**adv_data)
            except ValueError as exc:
                raise ValueError(f"adversarial: {exc}") from exc
        return cls(
            kind=data["kind"],
            dataset=dict(data["dataset"]),
            output_dir=str(data["output_dir"]),
            seeds=tuple(int(s) for s in data.get("seeds", (0,))),
            eval_dataset=dict(data["eval_dataset"]) if data.get("eval_dataset") else None,
            ood_dataset=dict(data["ood_dataset"]) if data.get("ood_dataset") else None,
            training=training,
            adversarial=adversarial,
            imbalance=dict(data["imbalance"]) if data.get("imbalance") else None,
            lambdas=tuple(float(v) for v in data["lambdas"]) if data.get("lambdas") else None,
            score_kind=data.get("score_kind", "kl"),
        )

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f"config file is not valid JSON: {path} ({exc})") from exc
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        out = {
            "kind": self.kind,
            "dataset": self.dataset,
            "output_dir": self.output_dir,
            "seeds": list(self.seeds),
            "training": dataclasses.asdict(self.training),
            "score_kind": self.score_kind,
        }
        if self.eval_dataset is not None:
            out["eval_dataset"] = self.eval_dataset
        if self.ood_dataset is not None:
            out["ood_dataset"] = self.ood_dataset
        if self.adversarial is not None:
            out["adversarial"] = dataclasses.asdict(self.adversarial)
        if self.imbalance is not None:
            out["imbalance"] = self.imbalance
        if self.lambdas is not None:
            out["lambdas"] = list(self.lambdas)
        return out

    def config_hash(self) -> str:
        """Digest of the semantic config content; output location excluded so
        reruns into different directories hash identically.
        """
        canonical = self.to_dict()
        canonical.pop("output_dir")
        return hashlib.sha256(json.dumps(canonical, sort_keys=True).encode()).hexdigest()

    def resolved_output_dir(self) -> Path:
        return Path(os.environ.get("LOROT_OUTPUT_DIR", self.output_dir))


@dataclass
class RunManifest:
    config_hash: str
    seeds: tuple[int, ...]
    started_at: str
    finished_at: str | None = None
    code_version: str = __version__
    artifacts: dict = field(default_factory=dict)

    @staticmethod
    def now() -> str:
        return datetime.datetime.now(datetime.timezone.utc).isoformat()

    def save(self, path: str | Path) -> None:
        from .reports import write_json_report

        write_json_report(path, dataclasses.asdict(self))


@contextmanager
def output_lock(output_dir: str | Path):
    """One experiment process per output directory; held via an exclusive
    lock file for the duration of a run.
    """
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    lock_path = output_dir / ".lorot-lock"
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RuntimeError(
            f"output directory {output_dir} is locked by another run "
            f"(stale? remove {lock_path})"
        ) from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield output_dir
    finally:
        if lock_path.exists():
            lock_path.unlink()
