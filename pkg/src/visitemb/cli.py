"""``visitemb`` command line: generate -> split -> featurize -> train -> embed -> eval -> probe."""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import corpus, featurize, hybridnet, metrics_baseline, probe
from .corpus import REFERENCE_PREVALENCES
from .errors import ConfigError, MissingArtifactError, ValidationError

log = logging.getLogger("visitemb")

STAGES = ("generate", "split", "featurize", "train", "embed", "eval", "probe")

ARTIFACTS = {
    "dataset": ("dataset.jsonl", "generate"),
    "splits": ("splits.csv", "split"),
    "preprocessing": ("preprocessing.json", "featurize"),
    "checkpoint": ("checkpoint.bin", "train"),
    "history": ("history.csv", "train"),
    "embeddings": ("embeddings.csv", "embed"),
    "metrics_rf": ("metrics_rf.csv", "eval"),
    "metrics_deep": ("metrics_deep.csv", "eval"),
    "metrics_emb_rf": ("metrics_emb_rf.csv", "eval"),
    "metrics_table": ("metrics_table.txt", "eval"),
    "probe": ("probe.csv", "probe"),
    "probe_baseline": ("probe_baseline.json", "probe"),
}


@dataclass
class RunConfig:
    seed: int = 0
    # generator
    n_patients: int = 1575
    extra_stays_mean: float = 0.27
    label_prevalences: list = field(default_factory=lambda: list(REFERENCE_PREVALENCES))
    vocab_size: int = 500
    doc_length: int = 40
    docs_per_stay: float = 3.0
    zipf_exponent: float = 1.0
    topic_size: int = 8
    n_structured_features: int = 200
    features_per_label: int = 3
    base_event_rate: float = 0.05
    label_event_rate: float = 1.0
    signal_strength: float = 5.0
    text_weight: float = 1.0
    structured_weight: float = 1.0
    concept_pairs: list = field(default_factory=lambda: [dataclasses.asdict(corpus.ConceptPair("bact"))])
    # split
    n_val_patients: int = 200
    n_test_patients: int = 300
    min_distinct_codes: int = 5
    # featurize
    min_count: int = 5
    percentile: float = 90.0
    k_features: int = 64
    max_len: int | None = 256
    # model
    word_dim: int = 50
    channels_per_width: int = 64
    mlp_hidden: int = 256
    dropout_rate: float = 0.5
    # training
    lr: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 80
    patience: int = 3
    min_rel_improvement: float = 1e-4
    # evaluation
    n_trees: int = 100
    max_depth: int | None = None
    min_samples_leaf: int = 1
    bootstrap: bool = True
    threshold: float = 0.5
    # probe
    min_group_size: int = 25
    baseline_samples: int = 10_000

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def sub_seed(self, stage: str) -> int:
        digest = hashlib.sha256(f"{self.seed}:{stage}".encode()).digest()
        return int.from_bytes(digest[:8], "little") >> 1

    def generator(self) -> corpus.GeneratorConfig:
        names = {f.name for f in dataclasses.fields(corpus.GeneratorConfig)} - {"seed"}
        kw = {k: v for k, v in self.to_dict().items() if k in names}
        return corpus.GeneratorConfig(**kw, seed=self.sub_seed("generate"))

    def model(self, preprocessing) -> hybridnet.ModelConfig:
        return hybridnet.model_config_for(
            preprocessing,
            word_dim=self.word_dim,
            channels_per_width=self.channels_per_width,
            mlp_hidden=self.mlp_hidden,
            dropout_rate=self.dropout_rate,
            seed=self.sub_seed("init"),
        )

    def training(self) -> hybridnet.TrainConfig:
        return hybridnet.TrainConfig(
            lr=self.lr, batch_size=self.batch_size, max_epochs=self.max_epochs,
            patience=self.patience, min_rel_improvement=self.min_rel_improvement,
            seed=self.sub_seed("train"),
        )

    def forest(self) -> metrics_baseline.ForestConfig:
        return metrics_baseline.ForestConfig(
            n_trees=self.n_trees, max_depth=self.max_depth, min_samples_leaf=self.min_samples_leaf,
            bootstrap=self.bootstrap, seed=self.sub_seed("forest"),
        )


def load_config(path=None) -> RunConfig:
    if path is None:
        text = resources.files("visitemb").joinpath("configs/desk.json").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    return RunConfig.from_dict(data)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    def __init__(self, cfg: RunConfig, out: Path):
        self.cfg = cfg
        self.out = out

    def path(self, key) -> Path:
        return self.out / ARTIFACTS[key][0]

    def need(self, key) -> Path:
        p = self.path(key)
        if not p.exists():
            raise MissingArtifactError(p, ARTIFACTS[key][1])
        return p

    def manifest(self, stage, inputs, outputs, started):
        doc = {
            "stage": stage,
            "inputs": {k: {"path": ARTIFACTS[k][0], "sha256": sha256_file(self.path(k))} for k in inputs},
            "outputs": {k: {"path": ARTIFACTS[k][0], "sha256": sha256_file(self.path(k))} for k in outputs},
            "seed": self.cfg.seed,
            "config": self.cfg.to_dict(),
            "wall_time_s": round(time.time() - started, 3),
        }
        (self.out / f"{stage}.manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")

    def _splits(self):
        ds = corpus.read_dataset(self.need("dataset"))
        sp = corpus.read_splits(self.need("splits"))
        corpus.check_split_covers(sp, ds)
        return ds, sp

    def _model(self):
        pre = featurize.Preprocessing.load(self.need("preprocessing"))
        params, mcfg, pre_hash = hybridnet.load_checkpoint(self.need("checkpoint"))
        if pre_hash != sha256_file(self.path("preprocessing")):
            raise ValidationError("checkpoint was trained against a different preprocessing file; rerun `train`")
        return pre, params, mcfg

    # -- stages --

    def generate(self):
        t0 = time.time()
        ds = corpus.generate_synthetic(self.cfg.generator())
        corpus.write_dataset(ds, self.path("dataset"))
        log.info("generated %d stays", len(ds))
        self.manifest("generate", [], ["dataset"], t0)

    def split(self):
        t0 = time.time()
        ds = corpus.read_dataset(self.need("dataset"))
        sp = corpus.split_patients(ds, self.cfg.n_val_patients, self.cfg.n_test_patients,
                                   self.cfg.min_distinct_codes, self.cfg.sub_seed("split"))
        corpus.write_splits(sp, self.path("splits"))
        self.manifest("split", ["dataset"], ["splits"], t0)

    def featurize(self):
        t0 = time.time()
        ds, sp = self._splits()
        pre = featurize.fit_preprocessing(sp.stays(ds, "train"), self.cfg.k_features, self.cfg.min_count,
                                          self.cfg.percentile, self.cfg.max_len)
        pre.save(self.path("preprocessing"))
        self.manifest("featurize", ["dataset", "splits"], ["preprocessing"], t0)

    def train(self):
        t0 = time.time()
        pre_path = self.need("preprocessing")
        ds, sp = self._splits()
        pre = featurize.Preprocessing.load(pre_path)
        mcfg = self.cfg.model(pre)
        params, history = hybridnet.train(ds, sp, pre, mcfg, self.cfg.training())
        hybridnet.save_checkpoint(params, mcfg, sha256_file(pre_path), self.path("checkpoint"))
        with open(self.path("history"), "w", encoding="utf-8") as fh:
            fh.write("epoch,train_loss,val_loss\n")
            for h in history:
                val = "" if h["val_loss"] is None else repr(h["val_loss"])
                fh.write(f"{h['epoch']},{h['train_loss']!r},{val}\n")
        self.manifest("train", ["dataset", "splits", "preprocessing"], ["checkpoint", "history"], t0)

    def embed(self):
        t0 = time.time()
        ds = corpus.read_dataset(self.need("dataset"))
        pre, params, mcfg = self._model()
        vectors = hybridnet.embed_encoded(params, mcfg, pre.encode_all(ds.stays))
        hybridnet.write_embeddings_csv([s.stay_id for s in ds.stays], vectors, self.path("embeddings"))
        self.manifest("embed", ["dataset", "preprocessing", "checkpoint"], ["embeddings"], t0)

    def eval(self):
        t0 = time.time()
        ds, sp = self._splits()
        pre, params, mcfg = self._model()
        ids, vectors = hybridnet.read_embeddings_csv(self.need("embeddings"))
        reports = metrics_baseline.three_way_protocol(
            ds, sp, pre, params, mcfg, self.cfg.forest(), self.cfg.threshold,
            embeddings=dict(zip(ids, vectors)),
        )
        for key, name in (("metrics_rf", "rf"), ("metrics_deep", "deep"), ("metrics_emb_rf", "emb+rf")):
            self.path(key).write_text(reports[name].to_csv(), encoding="utf-8")
        self.path("metrics_table").write_text(metrics_baseline.format_table(reports), encoding="utf-8")
        for name, rep in reports.items():
            log.info("%-7s macro P %.3f R %.3f F1 %.3f", name, rep.macro_precision, rep.macro_recall, rep.macro_f1)
        self.manifest("eval", ["dataset", "splits", "preprocessing", "checkpoint", "embeddings"],
                      ["metrics_rf", "metrics_deep", "metrics_emb_rf", "metrics_table"], t0)

    def probe(self):
        t0 = time.time()
        ds = corpus.read_dataset(self.need("dataset"))
        ids, vectors = hybridnet.read_embeddings_csv(self.need("embeddings"))
        emb = dict(zip(ids, vectors))
        results = []
        for cp in self.cfg.generator().concept_pairs:
            entities = [f"{cp.name}:{e}" for e in cp.entities]
            try:
                results += probe.concept_scan(entities, cp.states, ds.stays, emb, self.cfg.min_group_size)
            except ValidationError as exc:
                log.warning("concept %s skipped: %s", cp.name, exc)
        results.sort(key=lambda r: (-r.cosine, r.pair))
        self.path("probe").write_text(probe.scan_csv(results), encoding="utf-8")
        dim = vectors.shape[1]
        mean, std = probe.random_cosine_baseline(dim, self.cfg.baseline_samples, self.cfg.sub_seed("probe"))
        baseline = {"dim": dim, "n_samples": self.cfg.baseline_samples, "mean": mean, "std": std,
                    "variance": std * std, "analytic_std": float(1.0 / np.sqrt(dim))}
        self.path("probe_baseline").write_text(json.dumps(baseline, indent=2, sort_keys=True) + "\n")
        self.manifest("probe", ["dataset", "embeddings"], ["probe", "probe_baseline"], t0)

    def pipeline(self):
        for stage in STAGES:
            log.info("stage %s", stage)
            getattr(self, stage)()


OVERRIDES = {
    "k_features": ("--k-features", int, "number of structured features kept by chi-square selection"),
    "max_len": ("--max-len", int, "token truncation length"),
    "max_epochs": ("--epochs", int, "maximum training epochs"),
    "lr": ("--lr", float, "Adam learning rate"),
    "batch_size": ("--batch-size", int, "training batch size"),
    "min_group_size": ("--min-group-size", int, "smallest group size used by the concept scan"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="visitemb", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES + ("pipeline",):
        p = sub.add_parser(name, help=f"run the {name} stage" if name != "pipeline" else "run every stage in order")
        p.add_argument("--config", help="JSON run configuration (default: bundled desk-scale config)")
        p.add_argument("--seed", type=int, help="global seed (unsigned 64-bit)")
        p.add_argument("--out", default="run", help="artifact directory (default: ./run)")
        p.add_argument("--threads", type=int, default=1, help="BLAS threads; 1 is the deterministic path")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
        for key, (flag, typ, help_) in OVERRIDES.items():
            p.add_argument(flag, dest=key, type=typ, help=help_)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if not 0 <= args.seed < 2**64:
                raise ConfigError("--seed must be an unsigned 64-bit integer")
            cfg.seed = args.seed
        for key in OVERRIDES:
            val = getattr(args, key)
            if val is not None:
                setattr(cfg, key, val)
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        run = Run(cfg, out)
        with threadpool_limits(limits=args.threads):
            getattr(run, args.command)()
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
