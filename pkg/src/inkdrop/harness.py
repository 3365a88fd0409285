"""Pipeline orchestration with content-checksum stage caching, the naive patch
baseline, multi-trial runs and comparison reports."""

from __future__ import annotations

import csv
import datetime as _dt
import hashlib
import json
import logging
import os
import shutil
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn as nn

from .attack import PerceptualNetwork, TriggerGenerator, train_attack_model
from .condense import (
    CondensedSet,
    build_mixed_dataset,
    build_trigger_set,
    condense_clean,
    condense_malicious,
)
from .core import ConfigError, LabeledDataset, RunConfig, load_dataset, split_dataset
from .metrics import EvaluationReport, evaluate, train_downstream, write_per_sample
from .pool import CandidatePool, build_candidate_pool, reference_distribution, select_source_class, write_pool_csv
from .shapes import make_shapes_dataset
from .surrogate import (
    ARCHITECTURES,
    TopConfidenceSet,
    build_reference_sets,
    load_model,
    save_model,
    top_confidence_set,
    train_surrogate,
    true_positive_set,
)

log = logging.getLogger("inkdrop")

MANIFEST_FORMAT = "inkdrop-manifest/1"
STAGES = ("surrogate", "pool", "attack", "condense", "downstream", "evaluate")
LOCK_NAME = ".lock"

_STAGE_FIELDS = {
    "data": ("seed", "dataset", "dataset_format", "n_per_class", "train_fraction"),
    "surrogate": ("arch", "net_width", "net_depth", "activation", "surrogate_epochs", "surrogate_lr",
                  "batch_size", "momentum", "weight_decay"),
    "pool": ("target_class", "kappa1", "kappa2", "lam"),
    "attack": ("lambda1", "lambda2", "lambda3", "lambda4", "temperature", "epsilon_max", "attack_epochs",
               "attack_lr", "attack_batch", "generator_width"),
    "condense-clean": ("ipc", "condense_iterations", "condense_lr", "batch_real", "augment", "arch",
                       "net_width", "net_depth", "activation"),
    "condense": ("rho", "kappa1"),
    "downstream": ("downstream_arch", "downstream_epochs", "downstream_lr", "downstream_batch", "net_width",
                   "net_depth", "activation", "augment", "momentum", "weight_decay"),
}


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage!r} failed: {message}")
        self.stage = stage


# --------------------------------------------------------------------------
# naive baseline


@dataclass(frozen=True)
class BaselineSpec:
    kind: str = "naive-patch"
    size: int = 3
    row: int | None = None
    col: int | None = None
    value: float = 1.0

    def location(self, image_size) -> tuple[int, int]:
        h, w = image_size
        row = h - self.size if self.row is None else self.row
        col = w - self.size if self.col is None else self.col
        return row, col

    def validate(self, image_size) -> None:
        if self.kind != "naive-patch":
            raise ConfigError(f"unknown baseline kind {self.kind!r}")
        if self.size < 1:
            raise ConfigError("patch size must be positive")
        if not 0.0 <= self.value <= 1.0:
            raise ConfigError("patch value must lie in [0, 1]")
        h, w = image_size
        row, col = self.location(image_size)
        if row < 0 or col < 0 or row + self.size > h or col + self.size > w:
            raise ConfigError(f"patch of size {self.size} at ({row}, {col}) is out of bounds for {h}x{w} images")


class PatchTrigger(nn.Module):
    """Stamps a constant square; exposes the generator interface (returns the perturbation)."""

    arch = "naive-patch"

    def __init__(self, channels: int, image_size, size: int = 3, row: int = 0, col: int = 0, value: float = 1.0):
        super().__init__()
        self.config = dict(channels=channels, image_size=list(image_size), size=size, row=row, col=col, value=value)
        self.size, self.row, self.col, self.value = size, row, col, value

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        stamped = x.clone()
        stamped[..., self.row:self.row + self.size, self.col:self.col + self.size] = self.value
        return stamped - x


def patch_trigger(spec: BaselineSpec, channels: int, image_size) -> PatchTrigger:
    spec.validate(image_size)
    row, col = spec.location(image_size)
    return PatchTrigger(channels, image_size, spec.size, row, col, spec.value)


TRIGGERS = {"unet": TriggerGenerator, "naive-patch": PatchTrigger}


# --------------------------------------------------------------------------
# helpers


def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _json_bytes(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode()


def dataset_digest(d: LabeledDataset) -> str:
    h = hashlib.sha256()
    for arr in (d.images, d.labels, d.ids):
        h.update(np.ascontiguousarray(arr).tobytes())
    h.update(str(d.class_count).encode())
    return h.hexdigest()


def load_experiment_data(config: RunConfig) -> LabeledDataset:
    if config.dataset_format == "synthetic":
        if config.dataset != "shapes":
            raise ConfigError(f"unknown synthetic dataset {config.dataset!r}")
        return make_shapes_dataset(config.n_per_class, config.seed)
    return load_dataset(config.dataset, config.dataset_format)


def default_out() -> Path:
    return Path(os.environ.get("INKDROP_OUT", "inkdrop-runs"))


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


# --------------------------------------------------------------------------
# pipeline


class Pipeline:
    """Runs the stages in order inside one artifact directory.

    Every stage directory holds ``stage.json`` with the stage's input key and
    the sha256 of each file it wrote. With ``resume`` a stage whose key
    matches and whose files are intact is skipped; a matching key with
    altered files is refused unless ``force``. A stage always executes when
    one of its upstream stages executed in the same run.
    """

    def __init__(self, config: RunConfig, out: str | Path, config_text: str | None = None, *,
                 resume: bool = False, force: bool = False, baseline: BaselineSpec | None = None):
        self.config = config
        self.out = Path(out)
        self.config_text = config_text if config_text is not None else config.to_ini()
        self.resume = resume
        self.force = force
        self.baseline = baseline
        self.method = baseline.kind if baseline else "inkdrop"
        self.records: dict[str, dict] = {}
        self.timings: dict[str, dict] = {}
        self.executed: list[str] = []

    # ---- locking -------------------------------------------------------

    def _acquire(self) -> None:
        self.out.mkdir(parents=True, exist_ok=True)
        lock = self.out / LOCK_NAME
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            if not self.force:
                raise StageError("lock", f"{self.out} is locked by another run; remove {lock} or pass --force")
            fd = os.open(lock, os.O_CREAT | os.O_TRUNC | os.O_WRONLY)
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)

    def _release(self) -> None:
        (self.out / LOCK_NAME).unlink(missing_ok=True)

    # ---- stage bookkeeping ----------------------------------------------

    def _key(self, name: str, fields: tuple[str, ...], inputs: dict) -> str:
        payload = {"stage": name, "config": self.config.subset(fields), "inputs": inputs}
        if name.startswith("attack") or name.startswith("patch"):
            payload["baseline"] = asdict(self.baseline) if self.baseline else None
        return _sha(json.dumps(payload, sort_keys=True).encode())

    def _cached(self, name: str, key: str, deps: tuple[str, ...]) -> dict | None:
        if not self.resume or any(d in self.executed for d in deps):
            return None
        rec_path = self.out / name / "stage.json"
        if not rec_path.is_file():
            return None
        rec = json.loads(rec_path.read_text())
        if rec.get("key") != key:
            return None
        for rel, digest in rec["files"].items():
            f = self.out / name / rel
            if not f.is_file():
                return None
            if _sha(f.read_bytes()) != digest:
                if self.force:
                    return None
                raise StageError(name, f"stale checksum for {rel}; refusing to resume (use --force to recompute)")
        return rec

    def _stage(self, name: str, fields: tuple[str, ...], inputs: dict, compute: Callable[[Path], None],
               deps: tuple[str, ...] = ()) -> dict:
        key = self._key(name, fields, inputs)
        started = _now()
        rec = self._cached(name, key, deps)
        if rec is None:
            directory = self.out / name
            if directory.exists():
                shutil.rmtree(directory)
            directory.mkdir(parents=True)
            log.info("running stage %s", name)
            try:
                compute(directory)
            except (ConfigError, StageError):
                raise
            except Exception as exc:  # surface the failing stage by name
                raise StageError(name, f"{type(exc).__name__}: {exc}") from exc
            files = {str(p.relative_to(directory)): _sha(p.read_bytes())
                     for p in sorted(directory.rglob("*")) if p.is_file()}
            rec = {"stage": name, "key": key, "inputs": inputs, "files": files,
                   "checksum": _sha(_json_bytes(files))}
            (directory / "stage.json").write_bytes(_json_bytes(rec))
            self.executed.append(name)
        else:
            log.info("stage %s up to date", name)
        self.timings[name] = {"started": started, "finished": _now(), "cached": name not in self.executed}
        self.records[name] = rec
        return rec

    # ---- stages ----------------------------------------------------------

    def run(self, until: str = "evaluate") -> dict:
        if until not in STAGES:
            raise ConfigError(f"unknown stage {until!r}")
        stop = STAGES.index(until)
        self._acquire()
        try:
            return self._run(stop)
        finally:
            self._release()

    def _run(self, stop: int) -> dict:
        cfg = self.config
        try:
            data = load_experiment_data(cfg)
            cfg.validate(class_count=data.class_count)
        except ConfigError:
            raise
        except Exception as exc:
            raise StageError("data", f"{type(exc).__name__}: {exc}") from exc
        train, test = split_dataset(data, cfg.train_fraction, cfg.seed)
        digest = dataset_digest(data)
        self.dataset = {"name": data.name if cfg.dataset_format == "synthetic" else str(cfg.dataset),
                        "format": cfg.dataset_format, "digest": digest,
                        "train_size": len(train), "test_size": len(test), "class_count": data.class_count}
        if self.baseline is not None:
            self.baseline.validate(train.image_shape[1:])
        data_inputs = {"dataset_digest": digest, **cfg.subset(_STAGE_FIELDS["data"])}

        # 1. surrogate
        def do_surrogate(d: Path):
            r = train_surrogate(train, cfg)
            save_model(r.model, d / "model", {"train_accuracy": r.train_accuracy})

        srec = self._stage("surrogate", _STAGE_FIELDS["surrogate"], data_inputs, do_surrogate)
        m = load_model(self.out / "surrogate" / "model")
        if stop == 0:
            return self._finish()

        # 2. candidate pool
        def do_pool(d: Path):
            tp = true_positive_set(m, train, cfg.target_class)
            top = top_confidence_set(tp, m, cfg.kappa2)
            o, rows = select_source_class(m, train, cfg.target_class, cfg.lam, reference_distribution(m, top))
            pool = build_candidate_pool(m, train, o, cfg.target_class, cfg.kappa1)
            write_pool_csv(d / "pool.csv", rows, pool)
            (d / "pool.json").write_bytes(_json_bytes({
                "target_class": cfg.target_class,
                "source_class": o,
                "member_ids": [int(i) for i in pool.members.ids],
                "confidences": [float(c) for c in pool.confidences],
                "top_ids": [int(i) for i in top.members.ids],
                "top_confidences": [float(c) for c in top.confidences],
                "scores": [asdict(r) for r in rows],
            }))

        prec = self._stage("pool", _STAGE_FIELDS["pool"], {"surrogate": srec["checksum"]}, do_pool,
                           deps=("surrogate",))
        pool, top = self._load_pool(train)
        source = pool.source_class
        if stop == 1:
            return self._finish()

        # 3. trigger: learned generator, or the fixed patch for the baseline
        attack_name = "attack" if self.baseline is None else "patch"

        def do_attack(d: Path):
            c, h, w = train.image_shape
            if self.baseline is not None:
                save_model(patch_trigger(self.baseline, c, (h, w)), d / "trigger")
                return
            net = PerceptualNetwork.from_surrogate(m)
            res = train_attack_model(pool, build_reference_sets(m, top), m, net, cfg)
            save_model(res.generator, d / "trigger", {"surrogate_digest": res.surrogate_digest})
            res.write_log(d / "loss_log.csv")

        arec = self._stage(attack_name, _STAGE_FIELDS["attack"] if self.baseline is None else (),
                           {"surrogate": srec["checksum"], "pool": prec["checksum"]}, do_attack,
                           deps=("surrogate", "pool"))
        g = load_model(self.out / attack_name / "trigger", TRIGGERS)
        if stop == 2:
            return self._finish()

        # 4. condensation: clean control, then the poisoned set reusing its non-target classes
        def do_clean(d: Path):
            condense_clean(train, cfg).save(d)

        crec = self._stage("condense-clean", _STAGE_FIELDS["condense-clean"], data_inputs, do_clean)
        clean = CondensedSet.load(self.out / "condense-clean")
        suffix = "" if self.baseline is None else "-" + self.baseline.kind

        def do_condense(d: Path):
            t = build_trigger_set(g, pool, len(train.class_slice(source)), cfg.kappa1)
            mixed = build_mixed_dataset(train.class_slice(cfg.target_class), t, cfg.rho, cfg.seed)
            condense_malicious(train, cfg.target_class, mixed, cfg, reuse=clean).save(d)

        mrec = self._stage("condense" + suffix, _STAGE_FIELDS["condense"],
                           {"trigger": arec["checksum"], "pool": prec["checksum"], "clean": crec["checksum"]},
                           do_condense, deps=(attack_name, "pool", "condense-clean"))
        poisoned = CondensedSet.load(self.out / ("condense" + suffix))
        if stop == 3:
            return self._finish()

        # 5. downstream models
        def trainer(s: CondensedSet):
            def do(d: Path):
                save_model(train_downstream(s, cfg.downstream_arch, cfg), d / "model")
            return do

        dcrec = self._stage("downstream-clean", _STAGE_FIELDS["downstream"], {"condensed": crec["checksum"]},
                            trainer(clean), deps=("condense-clean",))
        dprec = self._stage("downstream" + suffix, _STAGE_FIELDS["downstream"], {"condensed": mrec["checksum"]},
                            trainer(poisoned), deps=("condense" + suffix,))
        psi_clean = load_model(self.out / "downstream-clean" / "model")
        psi = load_model(self.out / ("downstream" + suffix) / "model")
        if stop == 4:
            return self._finish()

        # 6. evaluation of the poisoned model and of the clean control
        def do_evaluate(d: Path):
            report, rows = evaluate(psi, test, g, cfg.target_class, source, is_model=m)
            control, _ = evaluate(psi_clean, test, g, cfg.target_class, source, is_model=m)
            report.notes.update(method=self.method, control_cta=control.cta, control_asr=control.asr,
                                cta_gap=control.cta - report.cta)
            control.notes.update(method="clean-control")
            (d / "report.json").write_text(report.to_json())
            (d / "control.json").write_text(control.to_json())
            write_per_sample(d / "per_sample.csv", rows)

        self._stage("evaluate" + suffix, (), {
            "downstream": dprec["checksum"], "downstream_clean": dcrec["checksum"],
            "trigger": arec["checksum"], "surrogate": srec["checksum"], "pool": prec["checksum"],
        }, do_evaluate, deps=("downstream" + suffix, "downstream-clean", attack_name, "surrogate", "pool"))
        return self._finish(report=f"evaluate{suffix}/report.json", control=f"evaluate{suffix}/control.json")

    def _load_pool(self, train: LabeledDataset) -> tuple[CandidatePool, TopConfidenceSet]:
        raw = json.loads((self.out / "pool" / "pool.json").read_text())
        pos = {int(i): k for k, i in enumerate(train.ids)}
        members = train.subset([pos[i] for i in raw["member_ids"]], name="pool")
        top = TopConfidenceSet(train.subset([pos[i] for i in raw["top_ids"]], name="top"),
                               np.array(raw["top_confidences"]), self.config.kappa2)
        return CandidatePool(raw["source_class"], members, np.array(raw["confidences"])), top

    def _finish(self, report: str | None = None, control: str | None = None) -> dict:
        manifest = {
            "format": MANIFEST_FORMAT,
            "experiment": self.config.name,
            "method": self.method,
            "baseline": asdict(self.baseline) if self.baseline else None,
            "dataset": self.dataset,
            "config": self.config_text,
            "stages": {name: {"key": r["key"], "checksum": r["checksum"], "inputs": r["inputs"], "path": name}
                       for name, r in self.records.items()},
            "report": report,
            "control_report": control,
            "timings": "timings.json",
        }
        name = "manifest.json" if self.baseline is None else f"manifest-{self.baseline.kind}.json"
        (self.out / name).write_bytes(_json_bytes(manifest))
        timings_path = self.out / "timings.json"
        timings = json.loads(timings_path.read_text()) if timings_path.is_file() else {}
        timings.update(self.timings)
        timings_path.write_bytes(_json_bytes(timings))
        return manifest


def run_pipeline(config_path: str | Path, out: str | Path | None = None, *, seed: int | None = None,
                 until: str = "evaluate", resume: bool = False, force: bool = False) -> dict:
    config, text = read_config(config_path, seed)
    return Pipeline(config, out or default_out(), text, resume=resume, force=force).run(until)


def run_baseline_naive(config_path: str | Path, spec: BaselineSpec = BaselineSpec(), out: str | Path | None = None,
                       *, seed: int | None = None, resume: bool = False, force: bool = False) -> dict:
    config, text = read_config(config_path, seed)
    return Pipeline(config, out or default_out(), text, resume=resume, force=force, baseline=spec).run()


def read_config(config_path: str | Path | None, seed: int | None = None) -> tuple[RunConfig, str]:
    """Parse a config file (or the defaults) and apply a seed override; returns the config and its echo text."""
    if config_path is None:
        config = RunConfig()
    else:
        config = RunConfig.from_file(config_path)
    if seed is not None:
        config = config.replace(seed=seed)
    if config_path is None or seed is not None:
        return config, config.to_ini()
    return config, Path(config_path).read_text()


def load_report(out: str | Path, manifest: dict, which: str = "report") -> EvaluationReport:
    rel = manifest.get(which)
    if rel is None:
        raise ValueError("manifest has no evaluation report")
    return EvaluationReport.from_json((Path(out) / rel).read_text())


# --------------------------------------------------------------------------
# trials


TRIAL_METRICS = ("cta", "asr", "psnr", "ssim", "is_dagger")


def run_trials(config: RunConfig, out: str | Path, trials: int, *, resume: bool = False, force: bool = False,
               baseline: BaselineSpec | None = None) -> dict:
    """Repeat the pipeline with seeds seed, seed+1, ...; writes per-trial rows plus mean and sample std."""
    if trials < 1:
        raise ConfigError("--trials must be at least 1")
    out = Path(out)
    rows = []
    for k in range(trials):
        cfg = config.replace(seed=config.seed + k)
        trial_out = out / f"trial-{k}"
        manifest = Pipeline(cfg, trial_out, resume=resume, force=force, baseline=baseline).run()
        rep = load_report(trial_out, manifest)
        rows.append({"trial": k, "seed": cfg.seed, **{m: getattr(rep, m) for m in TRIAL_METRICS}})
    values = np.array([[r[m] for m in TRIAL_METRICS] for r in rows])
    summary = {
        "mean": dict(zip(TRIAL_METRICS, values.mean(axis=0).tolist())),
        "std": dict(zip(TRIAL_METRICS, (values.std(axis=0, ddof=1) if trials > 1
                                        else np.zeros(len(TRIAL_METRICS))).tolist())),
        "trials": trials,
    }
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "trials.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["trial", "seed", *TRIAL_METRICS])
        w.writeheader()
        for r in rows:
            w.writerow(r)
        w.writerow({"trial": "mean", "seed": "", **summary["mean"]})
        w.writerow({"trial": "std", "seed": "", **summary["std"]})
    return summary


# --------------------------------------------------------------------------
# reports


REPORT_COLUMNS = ("method", "experiment", "dataset", "CTA", "ASR", "PSNR", "SSIM", "IS_dagger")
_METRIC_FIELDS = {"CTA": "cta", "ASR": "asr", "PSNR": "psnr", "SSIM": "ssim", "IS_dagger": "is_dagger"}


def emit_report(manifest_paths: list[str | Path], out: str | Path, force: bool = False,
                include_control: bool = False) -> list[dict]:
    """Comparison table (CSV), min-max normalized table and bar plots across runs."""
    if not manifest_paths:
        raise ValueError("at least one manifest is required")
    rows = []
    datasets = set()
    for path in manifest_paths:
        path = Path(path)
        manifest = json.loads(path.read_text())
        if manifest.get("format") != MANIFEST_FORMAT:
            raise ValueError(f"{path} is not an inkdrop manifest")
        datasets.add(manifest["dataset"]["name"])
        entries = [("report", manifest["method"])]
        if include_control:
            entries.append(("control_report", "clean-control"))
        for which, method in entries:
            rep = load_report(path.parent, manifest, which)
            rows.append({"method": method, "experiment": manifest["experiment"],
                         "dataset": manifest["dataset"]["name"],
                         **{col: round(float(getattr(rep, f)), 4) for col, f in _METRIC_FIELDS.items()}})
    if len(datasets) > 1 and not force:
        raise ValueError(f"manifests mix datasets {sorted(datasets)}; pass --force to compare anyway")

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    _write_rows(out / "comparison.csv", rows)
    normalized = []
    for r in rows:
        n = dict(r)
        for col in _METRIC_FIELDS:
            vals = [x[col] for x in rows]
            lo, hi = min(vals), max(vals)
            n[col] = round((r[col] - lo) / (hi - lo), 4) if hi > lo else 0.0
        normalized.append(n)
    _write_rows(out / "normalized.csv", normalized)
    _plot(rows, out / "comparison.png")
    return rows


def _write_rows(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow(r)


def read_report_table(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (float(v) if k in _METRIC_FIELDS else v) for k, v in r.items()} for r in csv.DictReader(fh)]


def _plot(rows: list[dict], path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    labels = [f"{r['experiment']}\n{r['method']}" for r in rows]
    fig, axes = plt.subplots(1, len(_METRIC_FIELDS), figsize=(3.2 * len(_METRIC_FIELDS), 3.4))
    for ax, col in zip(axes, _METRIC_FIELDS):
        ax.bar(range(len(rows)), [r[col] for r in rows], color="0.4")
        ax.set_title(col)
        ax.set_xticks(range(len(rows)))
        ax.set_xticklabels(labels, fontsize=6, rotation=45, ha="right")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


__all__ = [
    "ARCHITECTURES", "BaselineSpec", "PatchTrigger", "Pipeline", "StageError", "emit_report", "patch_trigger",
    "read_config", "read_report_table", "run_baseline_naive", "run_pipeline", "run_trials",
]
