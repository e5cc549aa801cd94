"""Staged pipeline: ingest -> triplets -> embed -> cluster -> meta ->
sensitivity, with content-hash resumability and a run manifest.

Stages communicate exclusively through files in the output directory. Each
stage records a fingerprint of its inputs (config slice plus upstream
artifact hashes); a stage is skipped when its fingerprint matches the
previous run and its artifacts are intact. Per-stage seeds derive from the
master seed as the first 8 bytes of sha256("<master>:<stage>"), so one
configured seed determines every stage without hidden coupling.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from . import __version__
from ._util import derive_seed, read_json, sha256_file, sha256_text, write_json
from .clustering import elbow_curve, kmeans, load_clusters, save_clusters, save_elbow
from .dataset import Dataset, load_dataset, save_dataset, validate_dataset
from .embedding import TrainConfig, load_embedding, save_embedding, train
from .errors import ArtifactError, ConfigError, DataError
from .meta import save_meta, subgroup_analysis
from .oracle import GowerOracle, LlmOracle, OracleConfig
from .sensitivity import GridSpec, run_grid, save_sensitivity
from .triplets import (BudgetParams, load_triplets, save_triplets, subsample,
                       triplet_budget, generate_pool)

STAGE_ORDER = ("ingest", "triplets", "embed", "cluster", "meta", "sensitivity")

ART_STUDIES = "studies.normalized.json"
ART_POOL = "pool.jsonl"
ART_TRIPLETS = "triplets.jsonl"
ART_EMBEDDING = "embedding.json"
ART_ELBOW = "elbow.json"
ART_CLUSTERS = "clusters.json"
ART_META = "meta.json"
ART_SENSITIVITY = "sensitivity.json"

_STATE_FILE = ".stage_state.json"
_MANIFEST_FILE = "manifest.json"


@dataclass
class RunConfig:
    """Resolved configuration for one pipeline run."""

    dataset_path: str = ""
    dataset_format: str | None = None
    out_dir: str = "out"
    master_seed: int = 20

    oracle: OracleConfig = field(default_factory=OracleConfig)
    pairs_per_anchor: int = 50

    lam: int = 2
    dim: int = 2
    log_base: str = "natural"
    budget_override: int | None = None

    train_dim: int = 2
    margin: float = 1.0
    learning_rate: float = 0.01
    epochs: int = 300
    batch_size: int = 128
    init_scale: float = 0.1

    k: int = 3
    k_min: int = 1
    k_max: int = 8
    restarts: int = 10
    kmeans_max_iter: int = 300
    kmeans_tol: float = 0.0

    level: float = 0.95
    sensitivity: GridSpec | None = None

    def validate(self) -> None:
        if not self.dataset_path:
            raise ConfigError("dataset path is required (config [dataset].path or --dataset)")
        if not Path(self.dataset_path).exists():
            raise ConfigError(f"dataset file does not exist: {self.dataset_path}")
        if self.dim != self.train_dim:
            raise ConfigError(
                f"embedding dimension mismatch: budget dim={self.dim} but "
                f"train dim={self.train_dim}; they must be equal")
        if self.budget_override is not None and self.budget_override < 1:
            raise ConfigError("explicit budget must be positive")
        if not 0.0 < self.level < 1.0:
            raise ConfigError("meta level must be in (0, 1)")
        if not 1 <= self.k_min <= self.k_max:
            raise ConfigError("need 1 <= k_min <= k_max for the elbow range")
        if self.oracle.kind == "llm":
            if not self.oracle.endpoint:
                raise ConfigError("LLM oracle requires --llm-endpoint or [oracle].endpoint")
            if not self.oracle.model:
                raise ConfigError("LLM oracle requires --llm-model or [oracle].model")
        if self.oracle.prompt_template and not Path(self.oracle.prompt_template).exists():
            raise ConfigError(f"prompt template does not exist: {self.oracle.prompt_template}")

    def train_config(self) -> TrainConfig:
        return TrainConfig(margin=self.margin, learning_rate=self.learning_rate,
                           epochs=self.epochs, batch_size=self.batch_size,
                           seed=derive_seed(self.master_seed, "train"),
                           init_scale=self.init_scale)

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["oracle"] = asdict(self.oracle)
        doc["oracle"]["cache_dir"] = (str(self.oracle.cache_dir)
                                      if self.oracle.cache_dir else None)
        doc["oracle"]["prompt_template"] = (str(self.oracle.prompt_template)
                                            if self.oracle.prompt_template else None)
        if self.sensitivity is not None:
            doc["sensitivity"] = asdict(self.sensitivity)
        return doc


@dataclass
class RunManifest:
    tool_version: str
    config: dict
    stages: list[dict]
    artifacts: dict[str, str]  # relpath -> sha256


def config_from_dict(doc: dict) -> RunConfig:
    """Build a RunConfig from a parsed config file, rejecting unknown keys."""
    known_sections = {"dataset", "oracle", "budget", "train", "cluster", "meta",
                      "sensitivity", "seed", "out"}
    unknown = set(doc) - known_sections
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")

    def section(name: str, allowed: set[str]) -> dict:
        sec = doc.get(name) or {}
        if not isinstance(sec, dict):
            raise ConfigError(f"config section {name!r} must be a mapping")
        bad = set(sec) - allowed
        if bad:
            raise ConfigError(f"unknown keys in [{name}]: {sorted(bad)}")
        return sec

    cfg = RunConfig()
    ds = section("dataset", {"path", "format"})
    cfg.dataset_path = str(ds.get("path", cfg.dataset_path))
    cfg.dataset_format = ds.get("format", cfg.dataset_format)

    orc = section("oracle", {"kind", "endpoint", "model", "temperature",
                             "max_in_flight", "max_retries", "retry_base_delay",
                             "timeout", "cache_dir", "prompt_template"})
    cfg.oracle = OracleConfig(
        kind=orc.get("kind", "gower"),
        endpoint=orc.get("endpoint", ""),
        model=orc.get("model", ""),
        temperature=float(orc.get("temperature", 0.0)),
        max_in_flight=int(orc.get("max_in_flight", 4)),
        max_retries=int(orc.get("max_retries", 3)),
        retry_base_delay=float(orc.get("retry_base_delay", 1.0)),
        timeout=float(orc.get("timeout", 60.0)),
        cache_dir=orc.get("cache_dir"),
        prompt_template=orc.get("prompt_template"))

    bud = section("budget", {"lambda", "dim", "log_base", "budget", "pairs_per_anchor"})
    cfg.lam = int(bud.get("lambda", cfg.lam))
    cfg.dim = int(bud.get("dim", cfg.dim))
    cfg.log_base = str(bud.get("log_base", cfg.log_base))
    if bud.get("budget") is not None:
        cfg.budget_override = int(bud["budget"])
    cfg.pairs_per_anchor = int(bud.get("pairs_per_anchor", cfg.pairs_per_anchor))

    tr = section("train", {"dim", "margin", "learning_rate", "epochs",
                           "batch_size", "init_scale"})
    cfg.train_dim = int(tr.get("dim", cfg.dim))
    cfg.margin = float(tr.get("margin", cfg.margin))
    cfg.learning_rate = float(tr.get("learning_rate", cfg.learning_rate))
    cfg.epochs = int(tr.get("epochs", cfg.epochs))
    cfg.batch_size = int(tr.get("batch_size", cfg.batch_size))
    cfg.init_scale = float(tr.get("init_scale", cfg.init_scale))

    cl = section("cluster", {"k", "k_min", "k_max", "restarts", "max_iter", "tol"})
    cfg.k = int(cl.get("k", cfg.k))
    cfg.k_min = int(cl.get("k_min", cfg.k_min))
    cfg.k_max = int(cl.get("k_max", cfg.k_max))
    cfg.restarts = int(cl.get("restarts", cfg.restarts))
    cfg.kmeans_max_iter = int(cl.get("max_iter", cfg.kmeans_max_iter))
    cfg.kmeans_tol = float(cl.get("tol", cfg.kmeans_tol))

    me = section("meta", {"level"})
    cfg.level = float(me.get("level", cfg.level))

    se = section("sensitivity", {"enabled", "seeds", "lambdas", "dims", "ks"})
    if se.get("enabled"):
        cfg.sensitivity = GridSpec(
            seeds=[int(s) for s in se.get("seeds", [20, 50, 100])],
            lambdas=[int(x) for x in se.get("lambdas", [1, 2, 4])],
            dims=[int(x) for x in se.get("dims", [2, 5, 10])],
            ks=[int(x) for x in se.get("ks", [2, 3, 4, 5])])

    if "seed" in doc:
        cfg.master_seed = int(doc["seed"])
    if "out" in doc:
        cfg.out_dir = str(doc["out"])
    return cfg


def load_config_file(path: str | Path) -> dict:
    """Parse a YAML, JSON or (Python >= 3.11) TOML config file."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    suffix = path.suffix.lower()
    if suffix == ".json":
        try:
            return json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config parse failure: {exc}")
    if suffix == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:
            raise ConfigError(
                "TOML config files need Python >= 3.11; use YAML or JSON instead")
        import io
        return tomllib.load(io.BytesIO(text.encode("utf-8")))
    try:
        import yaml
        doc = yaml.safe_load(text)
    except Exception as exc:
        raise ConfigError(f"config parse failure: {exc}")
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError("config file must contain a mapping at the top level")
    return doc


class _Run:
    """One pipeline execution over an output directory."""

    def __init__(self, cfg: RunConfig):
        cfg.validate()
        self.cfg = cfg
        self.out = Path(cfg.out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.state = self._load_state()
        self.stage_records: list[dict] = []

    # -- state bookkeeping ---------------------------------------------------

    def _load_state(self) -> dict:
        path = self.out / _STATE_FILE
        if path.exists():
            try:
                return read_json(path)
            except (OSError, json.JSONDecodeError):
                return {}
        return {}

    def _save_state(self) -> None:
        write_json(self.out / _STATE_FILE, self.state)

    def _artifact(self, name: str) -> Path:
        return self.out / name

    def _require(self, name: str, producer: str) -> Path:
        path = self._artifact(name)
        if not path.exists():
            raise ArtifactError(
                f"missing artifact {name!r}; run the '{producer}' stage first")
        return path

    def _fingerprint(self, payload: dict) -> str:
        return sha256_text(json.dumps(payload, sort_keys=True, default=str))

    def _is_cached(self, stage: str, fingerprint: str) -> bool:
        entry = self.state.get(stage)
        if not entry or entry.get("inputs") != fingerprint:
            return False
        recorded = entry.get("artifacts", {})
        if not recorded:
            return False
        for rel, digest in recorded.items():
            path = self.out / rel
            if not path.exists() or sha256_file(path) != digest:
                return False
        return True

    def _record(self, stage: str, fingerprint: str, artifacts: list[str],
                seconds: float, skipped: bool) -> None:
        if not skipped:
            produced = {}
            for rel in artifacts:
                path = self.out / rel
                if path.is_dir():
                    for sub in sorted(path.rglob("*")):
                        if sub.is_file():
                            produced[str(sub.relative_to(self.out))] = sha256_file(sub)
                else:
                    produced[rel] = sha256_file(path)
            self.state[stage] = {"inputs": fingerprint, "artifacts": produced}
            self._save_state()
        self.stage_records.append({"name": stage, "seconds": round(seconds, 6),
                                   "skipped": skipped})

    def _run_stage(self, stage: str, fingerprint: str, artifacts: list[str],
                   action) -> None:
        if self._is_cached(stage, fingerprint):
            self.stage_records.append({"name": stage, "seconds": 0.0, "skipped": True})
            return
        start = time.perf_counter()
        action()
        self._record(stage, fingerprint, artifacts, time.perf_counter() - start,
                     skipped=False)

    # -- stages ----------------------------------------------------------------

    def stage_ingest(self) -> None:
        cfg = self.cfg
        fp = self._fingerprint({
            "dataset": sha256_file(cfg.dataset_path),
            "format": cfg.dataset_format,
        })

        def action():
            ds = load_dataset(cfg.dataset_path, cfg.dataset_format)
            report = validate_dataset(ds)
            if not report.ok:
                raise DataError("dataset validation failed: " + "; ".join(report.errors))
            save_dataset(ds, self._artifact(ART_STUDIES))

        self._run_stage("ingest", fp, [ART_STUDIES], action)

    def _budget(self, m: int) -> int:
        if self.cfg.budget_override is not None:
            return self.cfg.budget_override
        return triplet_budget(BudgetParams(m, self.cfg.dim, self.cfg.lam,
                                           self.cfg.log_base))

    def _oracle(self, ds: Dataset):
        cfg = self.cfg
        if cfg.oracle.kind == "gower":
            return GowerOracle(ds)
        oracle_cfg = OracleConfig(
            kind="llm", endpoint=cfg.oracle.endpoint, model=cfg.oracle.model,
            temperature=cfg.oracle.temperature,
            max_in_flight=cfg.oracle.max_in_flight,
            max_retries=cfg.oracle.max_retries,
            retry_base_delay=cfg.oracle.retry_base_delay,
            timeout=cfg.oracle.timeout,
            cache_dir=cfg.oracle.cache_dir or self.out / "cache",
            prompt_template=cfg.oracle.prompt_template,
            seed=derive_seed(cfg.master_seed, "oracle-order"))
        return LlmOracle(oracle_cfg)

    def stage_triplets(self) -> None:
        cfg = self.cfg
        studies = self._require(ART_STUDIES, "ingest")
        fp = self._fingerprint({
            "studies": sha256_file(studies),
            "oracle": {"kind": cfg.oracle.kind, "endpoint": cfg.oracle.endpoint,
                       "model": cfg.oracle.model, "temperature": cfg.oracle.temperature,
                       "prompt_template": str(cfg.oracle.prompt_template or "")},
            "pairs_per_anchor": cfg.pairs_per_anchor,
            "budget": {"lambda": cfg.lam, "dim": cfg.dim, "log_base": cfg.log_base,
                       "override": cfg.budget_override},
            "pool_seed": derive_seed(cfg.master_seed, "pool"),
            "subsample_seed": derive_seed(cfg.master_seed, "subsample"),
        })

        def action():
            ds = load_dataset(studies, "json")
            oracle = self._oracle(ds)
            pool = generate_pool(ds, oracle, cfg.pairs_per_anchor,
                                 seed=derive_seed(cfg.master_seed, "pool"))
            save_triplets(pool, ds, self._artifact(ART_POOL))
            budget = self._budget(ds.m)
            sub = subsample(pool, budget,
                            seed=derive_seed(cfg.master_seed, "subsample"))
            save_triplets(sub, ds, self._artifact(ART_TRIPLETS))

        artifacts = [ART_POOL, ART_TRIPLETS]
        if cfg.oracle.kind == "llm" and not cfg.oracle.cache_dir:
            artifacts.append("cache")
        self._run_stage("triplets", fp, artifacts, action)

    def stage_embed(self) -> None:
        cfg = self.cfg
        studies = self._require(ART_STUDIES, "ingest")
        triplets = self._require(ART_TRIPLETS, "triplets")
        train_cfg = cfg.train_config()
        fp = self._fingerprint({
            "studies": sha256_file(studies),
            "triplets": sha256_file(triplets),
            "train": asdict(train_cfg),
            "dim": cfg.train_dim,
        })

        def action():
            ds = load_dataset(studies, "json")
            tset = load_triplets(triplets, ds)
            history = train(tset, ds.m, cfg.train_dim, train_cfg)
            save_embedding(history, self._artifact(ART_EMBEDDING))

        self._run_stage("embed", fp, [ART_EMBEDDING], action)

    def stage_cluster(self) -> None:
        cfg = self.cfg
        embedding = self._require(ART_EMBEDDING, "embed")
        seed = derive_seed(cfg.master_seed, "cluster")
        fp = self._fingerprint({
            "embedding": sha256_file(embedding),
            "k": cfg.k, "k_min": cfg.k_min, "k_max": cfg.k_max,
            "restarts": cfg.restarts, "max_iter": cfg.kmeans_max_iter,
            "tol": cfg.kmeans_tol, "seed": seed,
        })

        def action():
            coords, _ = load_embedding(embedding)
            studies = load_dataset(self._require(ART_STUDIES, "ingest"), "json")
            k_max = min(cfg.k_max, len(coords))
            curve = elbow_curve(coords, cfg.k_min, k_max, seed=seed,
                                restarts=cfg.restarts, max_iter=cfg.kmeans_max_iter,
                                tol=cfg.kmeans_tol)
            save_elbow(curve, self._artifact(ART_ELBOW))
            ca = kmeans(coords, cfg.k, seed=seed, restarts=cfg.restarts,
                        max_iter=cfg.kmeans_max_iter, tol=cfg.kmeans_tol)
            save_clusters(ca, studies.ids, self._artifact(ART_CLUSTERS))

        self._run_stage("cluster", fp, [ART_ELBOW, ART_CLUSTERS], action)

    def stage_meta(self) -> None:
        cfg = self.cfg
        studies = self._require(ART_STUDIES, "ingest")
        clusters = self._require(ART_CLUSTERS, "cluster")
        fp = self._fingerprint({
            "studies": sha256_file(studies),
            "clusters": sha256_file(clusters),
            "level": cfg.level,
        })

        def action():
            ds = load_dataset(studies, "json")
            ca = load_clusters(clusters, ds.ids)
            report = subgroup_analysis(ds, ca, cfg.level)
            save_meta(report, self._artifact(ART_META))

        self._run_stage("meta", fp, [ART_META], action)

    def stage_sensitivity(self) -> None:
        cfg = self.cfg
        base = cfg.sensitivity if cfg.sensitivity is not None else GridSpec()
        spec = replace(base, train=cfg.train_config(), log_base=cfg.log_base,
                       cluster_seed=derive_seed(cfg.master_seed, "cluster"),
                       restarts=cfg.restarts, max_iter=cfg.kmeans_max_iter,
                       tol=cfg.kmeans_tol, level=cfg.level)

        studies = self._require(ART_STUDIES, "ingest")
        pool_path = self._require(ART_POOL, "triplets")
        fp = self._fingerprint({
            "studies": sha256_file(studies),
            "pool": sha256_file(pool_path),
            "grid": {"seeds": spec.seeds, "lambdas": spec.lambdas,
                     "dims": spec.dims, "ks": spec.ks, "log_base": spec.log_base,
                     "level": spec.level},
            "train": asdict(spec.train),
            "cluster": {"seed": spec.cluster_seed, "restarts": spec.restarts,
                        "max_iter": spec.max_iter, "tol": spec.tol},
        })

        def action():
            ds = load_dataset(studies, "json")
            pool = load_triplets(pool_path, ds)
            report = run_grid(ds, pool, spec)
            save_sensitivity(report, ds, self.out)

        self._run_stage("sensitivity", fp, [ART_SENSITIVITY, "cells"], action)

    # -- manifest ----------------------------------------------------------------

    def write_manifest(self) -> RunManifest:
        artifacts = {}
        for path in sorted(self.out.rglob("*")):
            if path.is_file() and path.name != _MANIFEST_FILE:
                artifacts[str(path.relative_to(self.out))] = sha256_file(path)
        manifest = RunManifest(tool_version=__version__,
                               config=self.cfg.to_dict(),
                               stages=self.stage_records,
                               artifacts=artifacts)
        write_json(self.out / _MANIFEST_FILE, asdict(manifest))
        return manifest


def run_pipeline(cfg: RunConfig, stages: list[str] | None = None) -> RunManifest:
    """Execute the requested stages (default: all configured) and write the manifest."""
    if stages is None:
        stages = [s for s in STAGE_ORDER
                  if s != "sensitivity" or cfg.sensitivity is not None]
    unknown = set(stages) - set(STAGE_ORDER)
    if unknown:
        raise ConfigError(f"unknown stages: {sorted(unknown)}")

    run = _Run(cfg)
    actions = {
        "ingest": run.stage_ingest,
        "triplets": run.stage_triplets,
        "embed": run.stage_embed,
        "cluster": run.stage_cluster,
        "meta": run.stage_meta,
        "sensitivity": run.stage_sensitivity,
    }
    for stage in STAGE_ORDER:
        if stage in stages:
            actions[stage]()
    return run.write_manifest()


def assemble_report(out_dir: str | Path) -> dict:
    """Collect plot-ready summaries from a completed run into report.json."""
    out = Path(out_dir)

    def need(name: str, producer: str) -> Path:
        path = out / name
        if not path.exists():
            raise ArtifactError(
                f"missing artifact {name!r}; run the '{producer}' stage first")
        return path

    ds = load_dataset(need(ART_STUDIES, "ingest"), "json")
    coords, emb_doc = load_embedding(need(ART_EMBEDDING, "embed"))
    clusters_doc = read_json(need(ART_CLUSTERS, "cluster"))
    elbow_doc = read_json(need(ART_ELBOW, "cluster"))
    meta_doc = read_json(need(ART_META, "meta"))

    scatter = [{"id": sid, "coords": [float(x) for x in coords[i]],
                "cluster": clusters_doc["labels"][sid]}
               for i, sid in enumerate(ds.ids)]
    report = {
        "embedding_scatter": scatter,
        "training_curve": emb_doc["history"],
        "best_epoch": emb_doc["best_epoch"],
        "elbow": elbow_doc,
        "forest": meta_doc["forest"],
    }
    write_json(out / "report.json", report)
    return report
