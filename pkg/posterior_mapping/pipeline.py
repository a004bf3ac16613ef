"""Pipeline stages over one output directory.

Each stage reads what earlier stages wrote, checks their checksums and
config hash, writes its own artifacts, and records their checksums in
``<stage>.checksums.yaml``. Within a stage, per-language and per-pair work
runs on a thread pool (``jobs``) and is merged in a fixed order.
"""

import logging
import shutil
from concurrent.futures import ThreadPoolExecutor
from functools import cached_property
from pathlib import Path
from typing import Callable, Iterable, Sequence, TypeVar

from . import formats
from .acoustic_model import (
    AcousticModel,
    PosteriorStream,
    build_monolingual,
    per_class_error_delta,
    pooled_name,
    posteriors,
    train_pooled_model,
)
from .config import ExperimentConfig
from .errors import ConfigHashMismatchError, MissingArtifactError
from .fusion import frame_error, fuse_stream, relative_improvement, search_weights
from .mapping_network import MappingNetwork, build_training_pairs, map_stream, probe_one_hot, top_n_posteriorgram, train_mapping
from .similarity import (
    SimilarityReport,
    attested_biphones,
    build_cross_class_map,
    entropy_matrix,
    overlap_table,
    partition_biphones,
    samc_confusions,
    similarity_matrix,
    subset_report,
)
from .synthlang import FrameCorpus, LanguageSpec, make_language_family, sample_corpus, split_corpus

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

STAGES = ("generate", "train-am", "train-map", "analyze", "fuse", "report")
SPLITS = ("train", "val", "test")


class Workspace:
    """Artifact paths under the output directory."""

    def __init__(self, root: Path):
        self.root = Path(root)

    def language(self, name: str) -> Path:
        return self.root / "languages" / f"{name}.yaml"

    def corpus(self, name: str, split: str) -> Path:
        return self.root / "corpora" / name / split

    def acoustic_model(self, name: str) -> Path:
        return self.root / "models" / "am" / name

    def mapping(self, source: str, target: str) -> Path:
        return self.root / "models" / "map" / f"{source}-to-{target}"

    def stream(self, target: str, kind: str) -> Path:
        return self.root / "streams" / "test" / target / f"{kind}.pmps"

    @property
    def analysis(self) -> Path:
        return self.root / "analysis"

    @property
    def fusion(self) -> Path:
        return self.root / "fusion"

    @property
    def report(self) -> Path:
        return self.root / "report"


class Pipeline:
    """Runs the experiment stages for one configuration."""

    def __init__(self, cfg: ExperimentConfig, verbose: bool = False, show_progress: bool = False):
        self.cfg = cfg
        self.verbose = verbose
        self.show_progress = show_progress
        self.ws = Workspace(cfg.output_dir)
        self.names = tuple(cfg.family.names)

    # ------------------------------------------------------------------
    # helpers
    # ------------------------------------------------------------------

    def _say(self, message: str):
        if self.verbose:
            print(message)

    def _banner(self, title: str):
        self._say("\n" + "=" * 80)
        self._say(title)
        self._say("=" * 80)

    def _map(self, fn: Callable[[T], R], items: Sequence[T]) -> list[R]:
        if self.cfg.jobs > 1 and len(items) > 1:
            with ThreadPoolExecutor(max_workers=self.cfg.jobs) as pool:
                return list(pool.map(fn, items))
        return [fn(item) for item in items]

    @property
    def pairs(self) -> list[tuple[str, str]]:
        """Ordered (target, source) pairs, source != target."""
        return [(t, s) for t in self.names for s in self.names if t != s]

    @property
    def bilingual_pools(self) -> list[tuple[str, str]]:
        return [(a, b) for i, a in enumerate(self.names) for b in self.names[i + 1 :]]

    def _stamp(self) -> list:
        return [self.cfg.config_hash, self.cfg.seed]

    def _table(self, path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
        """CSV with the config hash and seed appended to every row."""
        return formats.write_csv(path, [*header, "config_hash", "seed"], ([*row, *self._stamp()] for row in rows))

    def _json(self, path: Path, payload: dict) -> Path:
        return formats.write_json(path, {"config_hash": self.cfg.config_hash, "seed": self.cfg.seed, **payload})

    def _finish(self, stage: str, paths: Iterable[Path]) -> Path:
        paths = list(paths)
        record = formats.write_checksums(self.ws.root, stage, paths, self.cfg.config_hash)
        self._say(f"✓ {stage} complete: {len(paths)} file(s) written.")
        return record

    def _require(self, *stages: str):
        for stage in stages:
            record = formats.verify_checksums(self.ws.root, stage)
            if record["config_hash"] != self.cfg.config_hash:
                raise ConfigHashMismatchError(
                    formats.checksum_path(self.ws.root, stage), self.cfg.config_hash, record["config_hash"]
                )

    # ------------------------------------------------------------------
    # loaders
    # ------------------------------------------------------------------

    @cached_property
    def languages(self) -> dict[str, LanguageSpec]:
        return {name: LanguageSpec.load(self.ws.language(name)) for name in self.names}

    def corpora(self, split: str) -> dict[str, FrameCorpus]:
        return {name: FrameCorpus.load(self.ws.corpus(name, split)) for name in self.names}

    def mono_models(self) -> dict[str, AcousticModel]:
        return {name: AcousticModel.load(self.ws.acoustic_model(name)) for name in self.names}

    def pooled_model(self, names: Sequence[str]) -> AcousticModel:
        return AcousticModel.load(self.ws.acoustic_model(pooled_name(names)))

    def mapping(self, source: str, target: str) -> MappingNetwork:
        return MappingNetwork.load(self.ws.mapping(source, target))

    # ------------------------------------------------------------------
    # stages
    # ------------------------------------------------------------------

    def generate(self) -> Path:
        self._banner("GENERATE - synthetic language family and corpora")
        cfg = self.cfg
        written = [formats.write_manifest(
            self.ws.root / "config.yaml",
            {"kind": "config", "config_hash": cfg.config_hash, "config": cfg.model_dump(mode="json", exclude={"output_dir", "jobs"})},
        )]

        self._say("\n[STEP 1] Building the language family...")
        family = cfg.family.model_copy(update={"seed": cfg.seed_for("family", cfg.family.seed)})
        langs = make_language_family(family)
        for lang in langs:
            written.append(lang.save(self.ws.language(lang.name)))
        self._say(f"✓ {len(langs)} languages generated.")

        self._say("\n[STEP 2] Sampling and splitting corpora...")
        sizes = cfg.corpus

        def build(lang: LanguageSpec) -> list[Path]:
            corpus = sample_corpus(
                lang, sizes.total_frames, cfg.seed_for("corpus", lang.name), sizes.segments_per_utterance
            )
            parts = split_corpus(corpus, sizes.fractions, cfg.seed_for("split", lang.name))
            paths = []
            summary = {}
            for split, part in zip(SPLITS, parts):
                paths += part.save(self.ws.corpus(lang.name, split))
                summary[split] = {"frames": part.n_frames, "utterances": part.n_utterances, "fingerprint": part.fingerprint}
            paths.append(formats.write_manifest(
                self.ws.root / "corpora" / lang.name / "splits.yaml",
                {"kind": "splits", "language": lang.name, "source_fingerprint": corpus.fingerprint, "splits": summary},
            ))
            logger.info("corpus %s: %s", lang.name, {k: v["frames"] for k, v in summary.items()})
            return paths

        for paths in self._map(build, langs):
            written += paths
        return self._finish("generate", written)

    def train_am(self) -> Path:
        self._banner("TRAIN-AM - monolingual and pooled acoustic models")
        self._require("generate")
        cfg = self.cfg
        langs = self.languages
        train, val = self.corpora("train"), self.corpora("val")

        def am_config(*tags):
            return cfg.acoustic_model.model_copy(
                update={"train": cfg.acoustic_model.train.model_copy(update={"rng_seed": cfg.seed_for("am", *tags)})}
            )

        jobs: list[tuple[str, ...]] = [(name,) for name in self.names]
        if len(self.names) > 2:
            jobs += self.bilingual_pools
        if len(self.names) > 1:
            jobs.append(self.names)

        def fit(members: tuple[str, ...]) -> AcousticModel:
            if len(members) == 1:
                name = members[0]
                return build_monolingual(langs[name], train[name], val[name], am_config(name), self.show_progress)
            return train_pooled_model(
                [langs[n] for n in members],
                [train[n] for n in members],
                [val[n] for n in members],
                am_config(pooled_name(members)),
                self.show_progress,
            )

        self._say(f"\n[STEP 1] Training {len(jobs)} acoustic model(s)...")
        written = []
        for model in self._map(fit, jobs):
            written += model.save(self.ws.acoustic_model(model.name))
            self._say(f"  - {model.name}: {model.class_count} classes, val frame error {model.train_meta.get('val_frame_error')}")
        return self._finish("train-am", written)

    def train_map(self) -> Path:
        self._banner("TRAIN-MAP - mapping networks for every ordered language pair")
        self._require("generate", "train-am")
        cfg = self.cfg
        models = self.mono_models()
        train, val = self.corpora("train"), self.corpora("val")

        def fit(pair: tuple[str, str]) -> MappingNetwork:
            target, source = pair
            pairs = build_training_pairs(posteriors(models[source], train[target]), posteriors(models[target], train[target]))
            val_pairs = build_training_pairs(posteriors(models[source], val[target]), posteriors(models[target], val[target]))
            map_cfg = cfg.mapping.model_copy(
                update={"train": cfg.mapping.train.model_copy(update={"rng_seed": cfg.seed_for("map", source, target)})}
            )
            mapnet = train_mapping(pairs, val_pairs, map_cfg, self.show_progress)
            mapnet.train_meta["source_checksum"] = formats.file_checksum(self.ws.acoustic_model(source).with_suffix(".pmnn"))
            mapnet.train_meta["target_checksum"] = formats.file_checksum(self.ws.acoustic_model(target).with_suffix(".pmnn"))
            return mapnet

        self._say(f"\n[STEP 1] Training {len(self.pairs)} mapping network(s)...")
        written = []
        for (target, source), mapnet in zip(self.pairs, self._map(fit, self.pairs)):
            written += mapnet.save(self.ws.mapping(source, target))
            self._say(f"  - {source} -> {target}: val KL {mapnet.train_meta['final_val_kl']:.4f}")
        return self._finish("train-map", written)

    def analyze(self) -> Path:
        self._banner("ANALYZE - similarity reports, probes and degradation tables")
        self._require("generate", "train-am", "train-map")
        cfg = self.cfg
        langs = self.languages
        models = self.mono_models()
        train, test = self.corpora("train"), self.corpora("test")
        out = self.ws.analysis
        written = []

        self._say("\n[STEP 1] Computing test posterior streams...")
        targets = {}
        for name in self.names:
            targets[name] = posteriors(models[name], test[name])
            written.append(targets[name].save(self.ws.stream(name, "target")))

        self._say("\n[STEP 2] Mapping, subset reports and probes per language pair...")

        def analyze_pair(pair: tuple[str, str]):
            target, source = pair
            mapnet = self.mapping(source, target)
            source_stream = posteriors(models[source], test[target])
            mapped = map_stream(mapnet, source_stream)
            partition = partition_biphones(
                langs[target], langs[source], attested_biphones(langs[source], train[source].labels), models[target].tying
            )
            cross = build_cross_class_map(langs[target], langs[source], models[source])
            report = subset_report(targets[target], mapped, partition, test[target].labels, source_stream, cross)
            probe = probe_one_hot(mapnet)
            confusions = samc_confusions(source_stream, partition, test[target].labels, cross, cfg.analysis.confusion_top)
            return source_stream, mapped, report, probe, confusions

        results = dict(zip(self.pairs, self._map(analyze_pair, self.pairs)))
        reports: list[SimilarityReport] = []
        probes = {}
        for (target, source), (source_stream, mapped, report, probe, confusions) in results.items():
            written.append(source_stream.save(self.ws.stream(target, f"source-{source}")))
            written.append(mapped.save(self.ws.stream(target, f"mapped-{source}")))
            reports.append(report)
            probes[(target, source)] = probe

            gram = top_n_posteriorgram(
                probe, min(cfg.analysis.top_n, probe.source_dim), min(cfg.analysis.top_k, probe.target_dim)
            )
            written.append(formats.write_csv(out / "posteriorgrams" / f"{source}-to-{target}.csv", gram.csv_header(), gram.csv_rows()))
            keys = langs[target].biphones
            written.append(self._table(
                out / "confusions" / f"{source}-to-{target}.csv",
                ["biphone", "expected_class", "frames", "hit_rate", "confused_with"],
                (
                    [keys[c.biphone].key, c.expected_class, c.frames, c.hit_rate,
                     ";".join(f"{k}:{n}" for k, n in c.confusions)]
                    for c in confusions
                ),
            ))
        written.append(formats.write_json(
            out / "posteriorgrams" / "index.json",
            {"config_hash": cfg.config_hash, "seed": cfg.seed, "top_n": cfg.analysis.top_n, "top_k": cfg.analysis.top_k,
             "files": [f"{s}-to-{t}.csv" for t, s in self.pairs]},
        ))

        self._say("\n[STEP 3] Writing language tables...")
        overlaps = overlap_table([langs[n] for n in self.names])
        written.append(self._table(out / "overlap_table.csv", overlaps.csv_header(), overlaps.csv_rows()))
        written.append(self._table(out / "subset_reports.csv", SimilarityReport.HEADER, (row for r in reports for row in r.csv_rows())))
        written.append(self._json(out / "subset_reports.json", {"reports": [r.to_dict() for r in reports]}))
        matrix = similarity_matrix(reports, self.names)
        written.append(self._table(out / "similarity_matrix.csv", matrix.csv_header(), matrix.csv_rows()))
        entropies = entropy_matrix(probes, self.names, cfg.analysis.top_n)
        written.append(self._table(out / "entropy_matrix.csv", entropies.csv_header(), entropies.csv_rows()))
        written.append(self._json(
            out / "matrices.json",
            {"overlap": overlaps.to_dict(), "similarity": matrix.to_dict(), "probe_entropy": entropies.to_dict()},
        ))

        self._say("\n[STEP 4] Pooled-model errors and per-phoneme degradation...")
        written += self._pooled_tables(models, test, matrix)
        return self._finish("analyze", written)

    def _pools_of(self, target: str) -> list[tuple[str, ...]]:
        if len(self.names) < 2:
            return []
        pools = [p for p in self.bilingual_pools if target in p] if len(self.names) > 2 else []
        return pools + [self.names]

    def _pooled_tables(self, models, test, matrix) -> list[Path]:
        out = self.ws.analysis
        langs = self.languages
        written = []
        error_rows, bilingual_rows = [], []
        for target in self.names:
            mono_err = models[target].error_on(test[target])
            error_rows.append([target, target, mono_err[0], mono_err[1]])
            for pool in self._pools_of(target):
                pooled = self.pooled_model(pool)
                err = pooled.error_on(test[target])
                error_rows.append([target, pooled.name, err[0], err[1]])
                if len(pool) == 2:
                    source = pool[1] if pool[0] == target else pool[0]
                    bilingual_rows.append([target, source, matrix[(target, source)], mono_err[0], err[0]])
                others = set().union(*(langs[n].phonemes for n in pool if n != target))
                shared = sorted(set(langs[target].phonemes) & others)
                table = per_class_error_delta(models[target], pooled, test[target], langs[target], shared)
                written.append(self._table(out / "degradation" / f"{target}__{pooled.name}.csv", table.HEADER, table.csv_rows()))
                if table.excluded:
                    logger.info("%s / %s: no test frames for %s", target, pooled.name, ", ".join(table.excluded))
        written.append(self._table(out / "am_errors.csv", ["test_language", "model", "frame_error", "lenient_error"], error_rows))
        if bilingual_rows:
            written.append(self._table(
                out / "bilingual_error.csv",
                ["target", "source", "d_x", "mono_frame_error", "bilingual_frame_error"],
                bilingual_rows,
            ))
        return written

    def fuse(self) -> Path:
        self._banner("FUSE - weighted posterior fusion per target language")
        self._require("generate", "train-am", "train-map", "analyze")
        cfg = self.cfg
        models = self.mono_models()
        val, test = self.corpora("val"), self.corpora("test")
        out = self.ws.fusion

        def fuse_target(target: str) -> dict:
            sources = [s for s in self.names if s != target]
            tying = models[target].tying
            val_target = posteriors(models[target], val[target])
            val_mapped = [map_stream(self.mapping(s, target), posteriors(models[s], val[target])) for s in sources]
            search = search_weights(val_target, val_mapped, tying, cfg.fusion.grid_step)

            test_target = PosteriorStream.load(self.ws.stream(target, "target"))
            test_mapped = [PosteriorStream.load(self.ws.stream(target, f"mapped-{s}")) for s in sources]
            fused = fuse_stream(test_target, test_mapped, search.config)
            mono_val = frame_error(val_target, tying).tied
            mono_test = frame_error(test_target, tying).tied
            fused_test = frame_error(fused, tying).tied
            pooled_test = None
            if len(self.names) > 1:
                pooled_test = self.pooled_model(self.names).error_on(test[target])[0]
            weights = dict(zip([target, *sources], search.config.weights))
            return {
                "target": target,
                "sources": sources,
                "weights": weights,
                "mono_val_error": mono_val,
                "fused_val_error": search.error,
                "mono_test_error": mono_test,
                "fused_test_error": fused_test,
                "relative_improvement": relative_improvement(mono_test, fused_test),
                "pooled_test_error": pooled_test,
                "relative_improvement_over_pooled": relative_improvement(pooled_test, fused_test),
                "search": search,
            }

        self._say("\n[STEP 1] Searching fusion weights on validation data...")
        rows = self._map(fuse_target, list(self.names))
        written = []
        for row in rows:
            search = row.pop("search")
            written.append(self._table(
                out / f"trace_{row['target']}.csv", search.trace_header(row["sources"]), search.trace_rows()
            ))
            self._say(f"  - {row['target']}: mono {row['mono_test_error']:.4f} -> fused {row['fused_test_error']:.4f}")

        header = [
            "target", *(f"w_{n}" for n in self.names), "mono_val_error", "fused_val_error",
            "mono_test_error", "fused_test_error", "relative_improvement",
            "pooled_test_error", "relative_improvement_over_pooled",
        ]
        table_rows = [
            [r["target"], *(r["weights"][n] for n in self.names), r["mono_val_error"], r["fused_val_error"],
             r["mono_test_error"], r["fused_test_error"], r["relative_improvement"],
             r["pooled_test_error"], r["relative_improvement_over_pooled"]]
            for r in rows
        ]
        written.append(self._table(out / "fusion_table.csv", header, table_rows))
        written.append(self._json(out / "fusion_table.json", {"rows": rows}))
        return self._finish("fuse", written)

    def report(self) -> Path:
        self._banner("REPORT - bundling tables")
        self._require(*STAGES[:-1])
        dest = self.ws.report
        written = []
        files = {}
        for folder in (self.ws.analysis, self.ws.fusion):
            for path in sorted(folder.rglob("*")):
                if path.suffix not in (".csv", ".json"):
                    continue
                name = path.relative_to(self.ws.root).as_posix().replace("/", "__")
                target = dest / name
                target.parent.mkdir(parents=True, exist_ok=True)
                shutil.copyfile(path, target)
                written.append(target)
                files[name] = {"source": path.relative_to(self.ws.root).as_posix(), "checksum": formats.file_checksum(target)}
        written.append(self._json(dest / "index.json", {"languages": list(self.names), "files": files}))
        return self._finish("report", written)

    def verify(self) -> dict[str, int]:
        """Re-hash every recorded artifact of every stage that has run."""
        self._banner("VERIFY - artifact checksums")
        checked = {}
        for stage in STAGES:
            if not formats.checksum_path(self.ws.root, stage).is_file():
                continue
            record = formats.verify_checksums(self.ws.root, stage)
            checked[stage] = len(record["files"])
            self._say(f"  - {stage}: {checked[stage]} file(s) OK")
        if not checked:
            raise MissingArtifactError(formats.checksum_path(self.ws.root, STAGES[0]))
        self._say("✓ verify complete.")
        return checked

    def run_all(self):
        for stage in STAGES:
            self.run(stage)

    def run(self, stage: str):
        runner = {
            "generate": self.generate,
            "train-am": self.train_am,
            "train-map": self.train_map,
            "analyze": self.analyze,
            "fuse": self.fuse,
            "report": self.report,
            "verify": self.verify,
        }[stage]
        return runner()
