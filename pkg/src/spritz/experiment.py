"""Experiment configuration and the train / attack / report pipeline.

An output directory holds everything one experiment produces::

    checkpoints/ensemble.spz        all four networks plus thresholds
    data/test.npz                   the held-out split the campaigns draw from
    train/accuracy.{csv,json}       clean accuracy per classifier
    train/history_<model>.csv       per-epoch training history
    scenario1/table.{csv,json}      attacks on the 2C
    scenario1/transfer.csv          the same adversarial sets shown to the 1C models and the ensemble
    scenario1/adversarial/*.npz     the persisted adversarial sets
    scenario2/table.{csv,json}      attacks on the whole ensemble

Every file except the wall-time fields is a deterministic function of the
configuration and seed.
"""
import csv
import hashlib
import json
import math
import shutil
import tempfile
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .attacks import AttackConfig, Cnn2cTarget, EnsembleTarget, attack_batch, eligible
from .dataio import Dataset, Manifest, NormStats, load_checkpoint, rows_to_dataset, save_checkpoint, synth_dataset
from .metrics import write_report_csv
from .models import H0, reconstruction_error
from .training import SplitSpec, TrainConfig, split_dataset, split_indices, train_ensemble

CHECKPOINT = Path("checkpoints") / "ensemble.spz"
TEST_SPLIT = Path("data") / "test.npz"
TRANSFER_COLUMNS = ("attack", "2C", "1C-Leg", "1C-Mal", "SPRITZ-1.5C", "n")
ACCURACY_COLUMNS = ("classifier", "accuracy", "tp", "tn", "fp", "fn", "p_md", "p_fa")

# the attack grid of the published tables; families without a stated
# setting use the library defaults
PAPER_GRID = (
    [{"family": "fgsm", "epsilon": e} for e in (0.1, 0.01, 0.001)]
    + [{"family": "ifgsm", "epsilon": e} for e in (0.1, 0.01, 0.001)]
    + [{"family": "bim"}, {"family": "pgd"}]
    + [{"family": "jsma", "theta": t} for t in (0.1, 0.01)]
    + [{"family": "lbfgs"}, {"family": "deepfool"}]
    + [{"family": "cw", "confidence": c} for c in (0, 50, 100)]
)


class ConfigError(ValueError):
    pass


class MissingArtifactError(FileNotFoundError):
    pass


def _default_attacks():
    return [dict(a) for a in PAPER_GRID]


@dataclass
class ExperimentConfig:
    dataset: dict = field(default_factory=lambda: {"kind": "synthetic", "difficulty": 0.0})
    split: dict = field(default_factory=lambda: {"train": 2000, "val": 500, "test": 500})
    train: dict = field(default_factory=dict)
    autoencoder: dict = field(default_factory=lambda: {"learning_rate": 1e-3, "patience": 2,
                                                        "min_rel_improvement": 0.05})
    percentile: float = 95.0
    attacks: list = field(default_factory=_default_attacks)
    scenario: int = 1
    limit: int = 100
    out: str = "runs/default"
    seed: int = 0

    def __post_init__(self):
        if not self.attacks:
            raise ConfigError("the attack grid is empty")
        if self.limit < 1:
            raise ConfigError("limit must be >= 1")
        if self.scenario not in (1, 2):
            raise ConfigError("scenario must be 1 or 2")
        kind = self.dataset.get("kind")
        if kind not in ("synthetic", "manifest"):
            raise ConfigError(f"unknown dataset kind {kind!r}")
        if kind == "manifest" and not self.dataset.get("path"):
            raise ConfigError("a manifest dataset needs a 'path'")
        try:
            self.split_spec
            self.train_config
            self.ae_config
            self.attack_configs
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def split_spec(self):
        return SplitSpec(**self.split)

    @property
    def train_config(self):
        return TrainConfig(**{**self.train, "seed": self.seed})

    @property
    def ae_config(self):
        return TrainConfig(**{**self.train, **self.autoencoder, "seed": self.seed})

    @property
    def attack_configs(self):
        return [AttackConfig.from_dict(a) for a in self.attacks]

    @property
    def out_dir(self):
        return Path(self.out)

    def as_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, raw):
        known = {f.name for f in fields(cls)}
        extra = set(raw) - known
        if extra:
            raise ConfigError(f"unknown experiment config keys: {sorted(extra)}")
        return cls(**raw)

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"no such config: {path}")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(raw)

    def config_hash(self):
        """SHA-256 of the canonical config; the output directory is not part of it."""
        d = self.as_dict()
        d.pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode("utf-8")).hexdigest()


# ----------------------------------------------------------------------- data


def load_splits(config):
    """Return ``(train, val, test, stats)``; ``stats`` is None for synthetic data."""
    spec = config.split_spec
    ds_cfg = config.dataset
    if ds_cfg["kind"] == "synthetic":
        n = int(ds_cfg.get("n_per_class", spec.per_class))
        ds = synth_dataset(n, float(ds_cfg.get("difficulty", 0.0)), config.seed)
        return split_dataset(ds, spec, config.seed) + (None,)
    manifest = Manifest.load(ds_cfg["path"])
    rows = manifest.rows()
    tr, va, te = split_indices([r.label for r in rows], spec, manifest.split_seed)
    stats = NormStats.fit([rows[i] for i in tr])
    parts = tuple(rows_to_dataset([rows[i] for i in idx], stats, manifest.grid_mode, prefix)
                  for idx, prefix in ((tr, "train"), (va, "val"), (te, "test")))
    return parts + (stats,)


# ---------------------------------------------------------------------- train


def _write_csv(path, columns, rows):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([r[c] for c in columns])


def _json_dump(obj, path):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def run_train(config, log=None):
    """Train the ensemble and write checkpoints plus the accuracy table.

    Outputs are staged in a scratch directory and moved into place only
    once everything succeeded, so a failed run leaves nothing behind.
    """
    say = log or (lambda msg: None)
    out = config.out_dir
    created = not out.exists()
    out.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=".staging-", dir=out))
    try:
        t0 = time.perf_counter()
        train, val, test, stats = load_splits(config)
        say(f"data: {len(train)} train / {len(val)} val / {len(test)} test")
        result = train_ensemble(train, val, test, config.train_config, config.ae_config,
                                config.percentile, log=say)
        (stage / "checkpoints").mkdir()
        (stage / "data").mkdir()
        (stage / "train").mkdir()
        save_checkpoint(result.ensemble, stage / CHECKPOINT, extra={"config_hash": config.config_hash()})
        test.save(stage / TEST_SPLIT)
        if stats is not None:
            _json_dump(stats.as_dict(), stage / "data" / "norm_stats.json")
        rows = [{"classifier": k, **v.as_dict()} for k, v in result.accuracy.items()]
        _write_csv(stage / "train" / "accuracy.csv", ACCURACY_COLUMNS, rows)
        doc = {"config_hash": config.config_hash(), "rows": rows,
               "thresholds": {"1C-Leg": result.ensemble.leg_threshold, "1C-Mal": result.ensemble.mal_threshold},
               "epochs": {k: len(h.rows) for k, h in result.histories.items()},
               "time": time.perf_counter() - t0}
        _json_dump(doc, stage / "train" / "accuracy.json")
        for name, hist in result.histories.items():
            hist.write_csv(stage / "train" / f"history_{name}.csv")
        for item in stage.iterdir():
            dest = out / item.name
            if dest.exists():
                shutil.rmtree(dest)
            shutil.move(str(item), str(dest))
        return doc
    except BaseException:
        if created:
            shutil.rmtree(out, ignore_errors=True)
        raise
    finally:
        shutil.rmtree(stage, ignore_errors=True)


def load_artifacts(config):
    out = config.out_dir
    ckpt, test = out / CHECKPOINT, out / TEST_SPLIT
    for p in (ckpt, test):
        if not p.exists():
            raise MissingArtifactError(f"missing {p}; run 'spritz train' with the same --out first")
    return load_checkpoint(ckpt), Dataset.load(test)


# ------------------------------------------------------------------ campaigns


def _slug(k, cfg):
    keep = "".join(ch if ch.isalnum() else "-" for ch in cfg.name.lower())
    return f"{k:02d}-" + "-".join(part for part in keep.split("-") if part)


def _outcome_record(example_id, o):
    p = o.psnr
    return {"id": example_id, "success": o.success, "status": o.status, "iterations": o.iterations,
            "psnr": "inf" if math.isinf(p) else p, "l1": o.l1, "max": o.max_abs, "elapsed": o.elapsed}


def _campaign(target, test, idx, configs, say, adv_dir=None):
    ids = [test.ids[i] for i in idx]
    x = test.x[idx]
    rows = []
    for k, cfg in enumerate(configs):
        outcomes, report = attack_batch(target, x, cfg)
        say(f"{cfg.name}: asr {report.asr:.3f}")
        row = report.as_dict()
        row["slug"] = _slug(k, cfg)
        row["outcomes"] = [_outcome_record(i, o) for i, o in zip(ids, outcomes)]
        rows.append(row)
        if adv_dir is not None:
            np.savez(adv_dir / f"{row['slug']}.npz", index=np.asarray(idx), original=x,
                     adversarial=np.stack([o.adversarial for o in outcomes]),
                     success=np.array([o.success for o in outcomes]))
    return rows, ids


def _predict_chunked(fn, x, size=50):
    return np.concatenate([np.asarray(fn(x[i:i + size])).reshape(-1) for i in range(0, len(x), size)])


def transfer_rates(ensemble, adversarial, success_2c=None):
    """Misclassification rates of the 1C models and the ensemble on an adversarial set.

    The denominator is every attempted example. The 1C-Leg errs when it
    accepts an example as pristine, the 1C-Mal when it rejects one as not
    malicious, and the ensemble when it outputs H0.
    """
    adversarial = np.asarray(adversarial, dtype=np.float64)
    leg_err = _predict_chunked(lambda b: reconstruction_error(ensemble.leg, b), adversarial)
    mal_err = _predict_chunked(lambda b: reconstruction_error(ensemble.mal, b), adversarial)
    labels = _predict_chunked(ensemble.predict, adversarial)
    rates = {
        "1C-Leg": float(np.mean(leg_err <= ensemble.leg_threshold)),
        "1C-Mal": float(np.mean(mal_err > ensemble.mal_threshold)),
        "SPRITZ-1.5C": float(np.mean(labels == H0)),
        "n": int(len(adversarial)),
    }
    if success_2c is not None:
        rates["2C"] = float(np.mean(success_2c))
    return rates


def _bundle(config, scenario, target_name, ids, rows):
    return {"scenario": scenario, "target": target_name, "config_hash": config.config_hash(),
            "seed": config.seed, "n_examples": len(ids), "example_ids": ids, "rows": rows,
            "distortion_mean_over": "all-attempted"}


def run_scenario1(config, log=None):
    """Attack the 2C, persist each adversarial set, then reload the sets and
    measure how often the 1C models and the ensemble are fooled by them."""
    say = log or (lambda msg: None)
    ensemble, test = load_artifacts(config)
    target = Cnn2cTarget(ensemble.cnn2c)
    idx = eligible(target, test.x, test.y)[:config.limit]
    if len(idx) == 0:
        raise ValueError("no malicious test example is classified H1 by the 2C")
    out = config.out_dir / "scenario1"
    adv_dir = out / "adversarial"
    if out.exists():
        shutil.rmtree(out)
    adv_dir.mkdir(parents=True)
    rows, ids = _campaign(target, test, idx, config.attack_configs, say, adv_dir)
    transfer = []
    for row in rows:
        with np.load(adv_dir / f"{row['slug']}.npz") as saved:
            rates = transfer_rates(ensemble, saved["adversarial"], saved["success"])
        transfer.append({"attack": row["attack"], **rates})
    bundle = _bundle(config, 1, "2C", ids, rows)
    bundle["transfer"] = transfer
    bundle["transfer_denominator"] = "all-attempted"
    emit_report(bundle, out)
    return bundle


def run_scenario2(config, log=None):
    """Attack the whole ensemble end to end."""
    say = log or (lambda msg: None)
    ensemble, test = load_artifacts(config)
    target = EnsembleTarget(ensemble)
    idx = eligible(target, test.x, test.y)[:config.limit]
    if len(idx) == 0:
        raise ValueError("no malicious test example is classified H1 by the ensemble")
    rows, ids = _campaign(target, test, idx, config.attack_configs, say)
    bundle = _bundle(config, 2, "SPRITZ-1.5C", ids, rows)
    out = config.out_dir / "scenario2"
    out.mkdir(parents=True, exist_ok=True)
    emit_report(bundle, out)
    return bundle


# --------------------------------------------------------------------- output


class _Row:
    """Adapter giving a bundle row the ``row()`` interface of a CampaignReport."""

    def __init__(self, d):
        self.d = d

    def row(self):
        if self.d["failed"]:
            cells = {k: "Fails" for k in ("psnr", "l1", "max", "asr")}
        else:
            cells = {k: _cell(self.d[k]) for k in ("psnr", "l1", "max", "asr")}
        return {"attack": self.d["attack"], "time": _cell(self.d["time"]), **cells}


def _cell(v):
    return v if isinstance(v, str) else f"{v:.6f}"


def emit_report(bundle, directory, include_time=True):
    """Write ``table.csv`` (and ``transfer.csv`` for scenario 1) plus the full ``table.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_report_csv([_Row(r) for r in bundle["rows"]], directory / "table.csv", include_time)
    if "transfer" in bundle:
        rows = [{k: (_cell(v) if isinstance(v, float) else v) for k, v in r.items()} for r in bundle["transfer"]]
        _write_csv(directory / "transfer.csv", TRANSFER_COLUMNS, rows)
    _json_dump(bundle, directory / "table.json")
    return directory


def load_bundle(path):
    return json.loads(Path(path).read_text())


def strip_times(obj):
    """Copy of a bundle without wall-time fields, for determinism comparisons."""
    if isinstance(obj, dict):
        return {k: strip_times(v) for k, v in obj.items() if k not in ("time", "elapsed")}
    if isinstance(obj, list):
        return [strip_times(v) for v in obj]
    return obj
