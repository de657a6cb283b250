"""
Experiment graph: stages, their artifacts, content-hash caching and the
`cmd_*` entry points used by the command line.
"""
import os
import json
import time
import shutil
import logging
from contextlib import contextmanager
from typing import Optional, Union
import numpy as np
import pandas as pd
import networkx as nx
from colorama import Fore, Style
import xlinfluence
from xlinfluence.analysis import (summarize_seeds, contribution_matrix, delta_matrix, specialization, similarity_matrix,
                                  layerwise_similarity, pearson, off_diagonal_pairs, epoch_trajectory,
                                  compose, head_share_counts, overlap_counts, overlap_percentages,
                                  sparsity_table, performance_table, group_by_language, ContributionMatrix)
from xlinfluence.config import ExperimentConfig, VariantSpec, save_config, with_seed
from xlinfluence.data import Corpus, generate, save_jsonl, load_jsonl, language_slice, corpus_hash
from xlinfluence.enums import (SPLIT, INIT_FROM, PRUNE_SOURCE, VARIANT_KIND, CHECKPOINTS, SIGN,
                               FILES, REPORT)
from xlinfluence.errors import (ContractViolation, DependencyError, LockedError, StaleCacheError,
                                UndefinedCorrelationError, UndefinedSimilarityError)
from xlinfluence.influence import (SketchCache, compute_influence, eligible_tests, rankings_frame,
                                   rankings_from_frame)
from xlinfluence.model import Parameters, SubnetworkMask, init_model
from xlinfluence.prune import PruneTrace, find_subnetwork, shuffle_mask
from xlinfluence.train import CheckpointStore, train_full, train_sft
from xlinfluence.utils.hashing_utils import sha256_file, sha256_text
from xlinfluence.utils.table_utils import write_table, read_table


logger = logging.getLogger("root_logger")
blank_logger = logging.getLogger("blank_logger")
GEN_DATA, ANALYZE = "gen-data", "analyze"


def train_node(run: Union[CHECKPOINTS, str]) -> str:
    return f"train --mode {CHECKPOINTS(run).value}"


def prune_node(language: str) -> str:
    return f"prune --language {language}"


def influence_node(variant: str) -> str:
    return f"influence --variant {variant}"


@contextmanager
def artifact_lock(directory: str):
    """
    Exclusive lock file guarding an artifact directory for one process.

    Raises
    -------
    LockedError:
        If another process holds the lock.
    """
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, FILES.LOCK.value)
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockedError(f"Artifact directory {directory} is locked by another run "
                          f"(remove {path} if that run is gone)", lock_path=path)
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield path
    finally:
        if os.path.exists(path):
            os.remove(path)


class Experiment:
    """
    The full experiment as a DAG of stages over one output directory.

    Every stage writes its artifacts into its own directory together with a
    `manifest.json` holding the stage's content hash (its own configuration
    slice plus the hashes of its upstream stages), the sha256 of every
    artifact, the tool version and the wall-clock time. A stage whose
    manifest matches is reused; a mismatching manifest raises
    `StaleCacheError` unless `force` is set.

    Parameters
    ----------
    cfg: ExperimentConfig
    out_dir: Optional[str]
        Defaults to `<cfg.output_dir>/<cfg.name>`.
    force: bool, default=False
        Recompute stale stages instead of raising.
    progress: bool, default=True
        Show tqdm progress bars.
    """
    def __init__(self,
                 cfg: ExperimentConfig,
                 out_dir: Optional[str] = None,
                 force: bool = False,
                 progress: bool = True
                 ) -> None:
        self.cfg = cfg
        self.root = os.path.abspath(out_dir or os.path.join(cfg.output_dir, cfg.name))
        self.force = force
        self.progress = progress
        self.languages = cfg.corpus.language_ids
        self.G = self._build_graph()
        if not nx.is_directed_acyclic_graph(self.G):
            raise ContractViolation("Experiment stage graph has a cycle.")
        self._hashes = {}

    def __repr__(self):
        return f"Experiment(name={self.cfg.name}, root={self.root}, stages={self.G.number_of_nodes()})"

    def _needs_sft_random(self) -> bool:
        return any(v.checkpoints == CHECKPOINTS.SFT_RANDOM for v in self.cfg.variants)

    def _build_graph(self) -> nx.DiGraph:
        cfg = self.cfg
        G = nx.DiGraph()
        full = train_node(CHECKPOINTS.FULL)
        G.add_node(GEN_DATA, spec={"corpus": cfg.corpus.model_dump(mode="json")},
                   directory=os.path.join(self.root, "data"))
        G.add_node(full, spec={"model": cfg.model.model_dump(mode="json"), "model_seed": cfg.model_seed,
                               "train": cfg.train_full.model_dump(mode="json")},
                   directory=os.path.join(self.root, "checkpoints", CHECKPOINTS.FULL.value))
        G.add_edge(GEN_DATA, full)
        for lang in self.languages:
            node = prune_node(lang)
            G.add_node(node, spec={"prune": cfg.prune.model_dump(mode="json"), "language": lang},
                       directory=os.path.join(self.root, "prune", lang))
            G.add_edge(full, node)
        for run in (CHECKPOINTS.SFT, CHECKPOINTS.SFT_RANDOM):
            if run == CHECKPOINTS.SFT_RANDOM and not self._needs_sft_random():
                continue
            node = train_node(run)
            G.add_node(node, spec={"train": cfg.train_sft.model_dump(mode="json"), "run": run.value,
                                   "random_seed": cfg.random_seeds[0] if cfg.random_seeds else 0},
                       directory=os.path.join(self.root, "checkpoints", run.value))
            G.add_edge(full, node)
            for lang in self.languages:
                G.add_edge(prune_node(lang), node)
        for v in cfg.variants:
            node = influence_node(v.name)
            G.add_node(node, spec={"influence": cfg.influence.model_dump(mode="json"),
                                   "variant": v.model_dump(mode="json")},
                       directory=os.path.join(self.root, "influence", v.name))
            G.add_edge(full, node)
            if v.checkpoints != CHECKPOINTS.FULL:
                G.add_edge(train_node(v.checkpoints), node)
            if v.kind != VARIANT_KIND.FULL:
                for lang in self.languages:
                    G.add_edge(prune_node(lang), node)
        G.add_node(ANALYZE, spec={"random_seeds": cfg.random_seeds},
                   directory=os.path.join(self.root, "report"))
        for lang in self.languages:
            G.add_edge(prune_node(lang), ANALYZE)
        for v in cfg.variants:
            G.add_edge(influence_node(v.name), ANALYZE)
        return G

    def stage_hash(self, node: str) -> str:
        if node not in self._hashes:
            upstream = {p: self.stage_hash(p) for p in sorted(self.G.predecessors(node))}
            payload = json.dumps({"node": node, "spec": self.G.nodes[node]["spec"], "upstream": upstream},
                                 sort_keys=True)
            self._hashes[node] = sha256_text(payload)
        return self._hashes[node]

    def directory(self, node: str) -> str:
        return self.G.nodes[node]["directory"]

    def order(self) -> list[str]:
        return list(nx.lexicographical_topological_sort(self.G))

    # -- manifests -----------------------------------------------------------------

    def _manifest_path(self, node: str) -> str:
        return os.path.join(self.directory(node), FILES.MANIFEST.value)

    def _read_manifest(self, node: str) -> Optional[dict]:
        path = self._manifest_path(node)
        if not os.path.isfile(path):
            return None
        with open(path, encoding="utf-8") as f:
            return json.load(f)

    def _artifacts_intact(self, manifest: dict, directory: str) -> bool:
        for rel, digest in manifest.get("artifacts", {}).items():
            path = os.path.join(directory, rel)
            if not os.path.isfile(path) or sha256_file(path) != digest:
                logger.warning(f"{Fore.RED}Artifact {path} does not match its manifest{Style.RESET_ALL}")
                return False
        return True

    def is_done(self, node: str) -> bool:
        manifest = self._read_manifest(node)
        return manifest is not None and manifest.get("config_hash") == self.stage_hash(node)

    def _begin(self, node: str) -> bool:
        """
        Return True when `node` can be reused as is; otherwise prepare its
        directory for a fresh run.
        """
        directory = self.directory(node)
        manifest = self._read_manifest(node)
        if manifest is not None:
            same = manifest.get("config_hash") == self.stage_hash(node)
            if same and self._artifacts_intact(manifest, directory):
                logger.info(f"Reusing cached `{node}` artifacts in {directory}")
                return True
            if not self.force:
                reason = "a different configuration" if not same else "artifacts that were modified since"
                raise StaleCacheError(f"{directory} holds `{node}` output produced from {reason}; "
                                      f"rerun with --force to recompute")
            logger.info(f"Invalidating `{node}` artifacts in {directory}")
            shutil.rmtree(directory)
        os.makedirs(directory, exist_ok=True)
        return False

    def _finish(self, node: str, t0: float, extra: Optional[dict] = None) -> dict:
        directory = self.directory(node)
        artifacts = {}
        for base, _, files in os.walk(directory):
            for f in sorted(files):
                path = os.path.join(base, f)
                rel = os.path.relpath(path, directory)
                if rel in (FILES.MANIFEST.value, FILES.LOCK.value):
                    continue
                artifacts[rel.replace(os.sep, "/")] = sha256_file(path)
        manifest = {"stage": node,
                    "config_hash": self.stage_hash(node),
                    "upstream": {p: self.stage_hash(p) for p in sorted(self.G.predecessors(node))},
                    "artifacts": dict(sorted(artifacts.items())),
                    "tool_version": xlinfluence.__version__,
                    "wall_clock_seconds": round(time.time() - t0, 3)}
        manifest.update(extra or {})
        with open(self._manifest_path(node), "w", encoding="utf-8") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
        return manifest

    def require(self, node: str) -> None:
        """
        Raises
        -------
        DependencyError:
            If an upstream stage has no manifest; names the producing command.
        StaleCacheError:
            If an upstream manifest was produced from a different configuration.
        """
        for pred in sorted(self.G.predecessors(node)):
            manifest = self._read_manifest(pred)
            if manifest is None:
                raise DependencyError(f"`{node}` needs the output of `{pred}` in {self.directory(pred)}",
                                      producer=f"xlinfluence {pred}")
            if manifest.get("config_hash") != self.stage_hash(pred):
                raise StaleCacheError(f"Upstream `{pred}` in {self.directory(pred)} was produced from a "
                                      f"different configuration; rerun `xlinfluence {pred} --force`")
        return

    # -- artifact loaders ----------------------------------------------------------

    def corpora(self) -> tuple[Corpus, Corpus, Corpus]:
        d = self.directory(GEN_DATA)
        pair = self.cfg.corpus.task.is_pair
        return tuple(load_jsonl(os.path.join(d, f"{s.value}.jsonl"), s, self.languages, pair)
                     for s in (SPLIT.TRAIN, SPLIT.DEV, SPLIT.TEST))

    def checkpoints(self, run: Union[CHECKPOINTS, str]) -> CheckpointStore:
        return CheckpointStore.load(os.path.join(self.directory(train_node(run)), "store"))

    def init_params(self) -> Parameters:
        return Parameters.load(os.path.join(self.directory(train_node(CHECKPOINTS.FULL)),
                                            f"init{FILES.PARAMS_SUFFIX.value}"))

    def masks(self) -> dict[str, SubnetworkMask]:
        return {lang: SubnetworkMask.load(os.path.join(self.directory(prune_node(lang)),
                                                       f"{lang}{FILES.MASK_SUFFIX.value}"))
                for lang in self.languages}

    def trace(self, language: str) -> PruneTrace:
        return PruneTrace.load(os.path.join(self.directory(prune_node(language)), "trace.json"))

    def random_masks(self, seed: int) -> dict[str, SubnetworkMask]:
        return {lang: shuffle_mask(m, seed) for lang, m in self.masks().items()}

    def run_masks(self, run: Union[CHECKPOINTS, str]) -> Optional[dict]:
        """Masks the checkpoints of `run` were trained (and are evaluated) with."""
        run = CHECKPOINTS(run)
        if run == CHECKPOINTS.FULL:
            return None
        if run == CHECKPOINTS.SFT:
            return self.masks()
        return self.random_masks(self.cfg.random_seeds[0] if self.cfg.random_seeds else 0)

    def variant(self, name: str) -> VariantSpec:
        for v in self.cfg.variants:
            if v.name == name:
                return v
        raise ContractViolation(f"Unknown variant '{name}'; configured: {[v.name for v in self.cfg.variants]}")

    def variant_masks(self, v: VariantSpec) -> dict:
        """
        Test language -> mask (None for the ungated model) for every test
        language the variant scores.
        """
        if v.kind == VARIANT_KIND.FULL:
            return {lang: None for lang in self.languages}
        base = self.run_masks(v.checkpoints) or self.masks()
        if v.kind == VARIANT_KIND.SUBNETWORK:
            return dict(base)
        if v.kind == VARIANT_KIND.RANDOM:
            return {lang: shuffle_mask(m, v.seed) for lang, m in base.items()}
        if v.kind == VARIANT_KIND.SUBOPTIMAL:
            return {v.target_language: base[v.source_language]}
        merged = compose(base[v.pair[0]], base[v.pair[1]], v.op)
        return {lang: merged for lang in dict.fromkeys(v.pair)}

    def load_influence(self, name: str) -> dict:
        d = self.directory(influence_node(name))
        df, meta = read_table(os.path.join(d, "rankings.csv"), index_col=None)
        tests, _ = read_table(os.path.join(d, "tests.csv"), index_col=None)
        per_epoch = {}
        for e in meta["epochs"]:
            edf, _ = read_table(os.path.join(d, f"rankings_epoch_{e}.csv"), index_col=None)
            per_epoch[int(e)] = rankings_from_frame(edf, meta["m"])
        return {"rankings": rankings_from_frame(df, meta["m"]),
                "per_epoch": per_epoch,
                "test_languages": dict(zip(tests.test_id.astype(int), tests.language.astype(str))),
                "meta": meta}

    # -- stages --------------------------------------------------------------------

    def gen_data(self) -> str:
        node, t0 = GEN_DATA, time.time()
        if self._begin(node):
            return self.directory(node)
        d = self.directory(node)
        train, dev, test = generate(self.cfg.corpus)
        hashes = {}
        for corpus in (train, dev, test):
            save_jsonl(corpus, os.path.join(d, f"{corpus.split.value}.jsonl"))
            hashes[corpus.split.value] = corpus_hash(corpus)
        save_config(self.cfg, os.path.join(d, "experiment.json"))
        self._finish(node, t0, {"corpus_hashes": hashes})
        return d

    def train(self, mode: Union[CHECKPOINTS, str]) -> str:
        run = CHECKPOINTS(mode)
        node, t0 = train_node(run), time.time()
        if node not in self.G:
            raise ContractViolation(f"No variant uses `{run.value}` checkpoints; nothing to train.")
        self.require(node)
        if self._begin(node):
            return self.directory(node)
        d = self.directory(node)
        train, dev, _ = self.corpora()
        task = self.cfg.corpus.task
        if run == CHECKPOINTS.FULL:
            params = init_model(self.cfg.model, self.cfg.model_seed)
            params.save(os.path.join(d, f"init{FILES.PARAMS_SUFFIX.value}"))
            store = train_full(params, train, self.cfg.train_full, dev, task,
                               checkpoint_dir=os.path.join(d, "store"), progress=self.progress)
        else:
            masks = self.run_masks(run)
            for lang, m in masks.items():
                m.save(os.path.join(d, f"{lang}{FILES.MASK_SUFFIX.value}"))
            if self.cfg.train_sft.init_from == INIT_FROM.FULL:
                params = self.checkpoints(CHECKPOINTS.FULL).final.params
            else:
                params = init_model(self.cfg.model, self.cfg.model_seed)
            store = train_sft(params, train, self.cfg.train_sft.with_masks(masks), dev, task,
                              checkpoint_dir=os.path.join(d, "store"), progress=self.progress)
        self._finish(node, t0, {"epochs": store.epochs,
                                "dev_accuracy": {c.epoch: c.dev_accuracy for c in store}})
        return d

    def prune(self, language: Optional[str] = None) -> list[str]:
        langs = [language] if language else self.languages
        out = []
        for lang in langs:
            if lang not in self.languages:
                raise ContractViolation(f"Language '{lang}' is not in the corpus config {self.languages}")
            node, t0 = prune_node(lang), time.time()
            self.require(node)
            out.append(self.directory(node))
            if self._begin(node):
                continue
            d = self.directory(node)
            train, dev, _ = self.corpora()
            train_slice, dev_slice = language_slice(train, lang), language_slice(dev, lang)
            if self.cfg.prune.source == PRUNE_SOURCE.MONOLINGUAL:
                mono = train_full(self.init_params(), train_slice, self.cfg.train_full, dev_slice,
                                  self.cfg.corpus.task, checkpoint_dir=os.path.join(d, "monolingual"),
                                  progress=self.progress)
                params = mono.final.params
            else:
                params = self.checkpoints(CHECKPOINTS.FULL).final.params
            mask, trace = find_subnetwork(params, train_slice, dev_slice, self.cfg.prune.threshold,
                                          self.cfg.prune.rate, workers=self.cfg.influence.workers,
                                          progress=self.progress)
            mask.save(os.path.join(d, f"{lang}{FILES.MASK_SUFFIX.value}"))
            trace.save(d, stem="trace")
            self._finish(node, t0, {"disabled_heads": mask.sparsity,
                                    "stop_reason": trace.stop_reason.value})
        return out

    def influence(self, name: str) -> str:
        v = self.variant(name)
        node, t0 = influence_node(name), time.time()
        self.require(node)
        if self._begin(node):
            return self.directory(node)
        d = self.directory(node)
        cfg = self.cfg.influence
        train, _, test = self.corpora()
        store = self.checkpoints(v.checkpoints)
        full_final = self.checkpoints(CHECKPOINTS.FULL).final.params
        masks = self.variant_masks(v)
        final = store.final.params
        tests = []
        for lang, mask in masks.items():
            group = list(language_slice(test, lang))
            ok = eligible_tests(group, [(full_final, None), (final, mask)])
            chosen = [ex for ex in group if ex.uid in ok]
            if cfg.max_tests_per_language:
                chosen = chosen[:cfg.max_tests_per_language]
            logger.info(f"[{name}] {len(chosen)} of {len(group)} '{lang}' tests are eligible")
            tests += chosen
        if not tests:
            logger.warning(f"{Fore.RED}Variant '{name}' has no eligible test examples{Style.RESET_ALL}")
        result = compute_influence([(c.epoch, c.params) for c in store], train, tests, masks, cfg,
                                   cache=SketchCache(os.path.join(self.root, "sketches"), cfg.store_dtype),
                                   corpus_hash=corpus_hash(train), progress=self.progress)
        meta = {"variant": v.model_dump(mode="json"), "m": result.m, "epochs": result.epochs,
                "normalization": cfg.normalization.value, "scheme": cfg.scheme.value,
                "sketch_dim": cfg.sketch_dim, "projector_seed": cfg.projector_seed}
        write_table(rankings_frame(result.rankings), os.path.join(d, "rankings.csv"), meta, index=False)
        for e, rankings in result.per_epoch.items():
            write_table(rankings_frame(rankings), os.path.join(d, f"rankings_epoch_{e}.csv"), index=False)
        write_table(pd.DataFrame({"test_id": [ex.uid for ex in tests],
                                  "language": [ex.language for ex in tests]}),
                    os.path.join(d, "tests.csv"), index=False)
        self._finish(node, t0, {"eligible_tests": len(tests)})
        return d

    def analyze(self) -> str:
        node, t0 = ANALYZE, time.time()
        self.require(node)
        if self._begin(node):
            return self.directory(node)
        Report(self).write(self.directory(node))
        self._finish(node, t0)
        return self.directory(node)

    def run_all(self) -> str:
        """
        Run every stage in dependency order, reusing cached stages.
        """
        for node in self.order():
            if node == GEN_DATA:
                self.gen_data()
            elif node.startswith("train"):
                self.train(node.rsplit(" ", 1)[-1])
            elif node.startswith("prune"):
                self.prune(node.rsplit(" ", 1)[-1])
            elif node.startswith("influence"):
                self.influence(node.rsplit(" ", 1)[-1])
        return self.analyze()


class Report:
    """
    Writes the report bundle: one directory of CSV tables (each with a JSON
    sidecar) per analysis.
    """
    def __init__(self, experiment: Experiment) -> None:
        self.x = experiment
        self.languages = experiment.languages
        train, _, _ = experiment.corpora()
        self.train_languages = {ex.uid: ex.language for ex in train}
        self.influence = {v.name: experiment.load_influence(v.name) for v in experiment.cfg.variants}
        self.masks = experiment.masks()
        self.variants = [v for v in experiment.cfg.variants if self.influence[v.name]["rankings"]]
        for v in experiment.cfg.variants:
            if v not in self.variants:
                logger.warning(f"{Fore.RED}Variant '{v.name}' has no rankings; left out of the "
                               f"report{Style.RESET_ALL}")

    def pick(self, kind: VARIANT_KIND, checkpoints: CHECKPOINTS) -> list[VariantSpec]:
        return [v for v in self.variants if v.kind == kind and v.checkpoints == checkpoints]

    def matrix(self, name: str, sign: SIGN = SIGN.POSITIVE) -> ContributionMatrix:
        inf = self.influence[name]
        return contribution_matrix(group_by_language(inf["rankings"], inf["test_languages"]),
                                   self.train_languages, sign, self.languages, variant=name)

    def baseline(self, sign: SIGN = SIGN.POSITIVE) -> Optional[ContributionMatrix]:
        full = self.pick(VARIANT_KIND.FULL, CHECKPOINTS.FULL)
        if not full:
            return None
        return self.matrix(full[0].name, sign)

    @staticmethod
    def _rows(cm: ContributionMatrix, rows: list) -> ContributionMatrix:
        return ContributionMatrix(table=cm.table.loc[rows], m=cm.m, sign=cm.sign, variant=cm.variant)

    def _write(self, directory: str, name: str, df: pd.DataFrame, meta: Optional[dict] = None,
               index: bool = True) -> None:
        write_table(df, os.path.join(directory, f"{name}.csv"), meta or {}, index=index)

    def _delta(self, name: str, sign: SIGN = SIGN.POSITIVE):
        cm = self.matrix(name, sign)
        base = self.baseline(sign)
        if base is None:
            return cm, None
        # test languages the baseline has no eligible tests for are dropped
        rows = [lang for lang in cm.table.index if lang in base.table.index]
        if not rows:
            return cm, None
        return cm, delta_matrix(self._rows(cm, rows), self._rows(base, rows))

    @staticmethod
    def _correlation_row(label: str, x, y) -> dict:
        try:
            res = pearson(x, y)
            return {"analysis": label, "r": res.r, "p_value": res.p_value, "count": res.count}
        except (UndefinedCorrelationError, ContractViolation) as e:
            logger.warning(f"{Fore.RED}Correlation '{label}' undefined: {e}{Style.RESET_ALL}")
            return {"analysis": label, "r": np.nan, "p_value": np.nan, "count": len(x)}

    def directional(self) -> dict:
        """
        Headline outcomes of this run used to check the expected directions
        across seeds; unavailable outcomes are NaN.
        """
        out = {"diagonal_delta": {}, "subnetwork_delta": np.nan, "random_delta": np.nan,
               "sft_specialization": np.nan, "sft_dev_accuracy": np.nan,
               "sft_random_specialization": np.nan, "sft_random_dev_accuracy": np.nan,
               "similarity_r": np.nan}
        identified = self.pick(VARIANT_KIND.SUBNETWORK, CHECKPOINTS.FULL)
        if identified:
            _, delta = self._delta(identified[0].name)
            if delta is not None:
                diag = specialization(delta)
                out["diagonal_delta"] = diag.to_dict()
                out["subnetwork_delta"] = float(diag.mean())
        random = [self._delta(v.name)[1] for v in self.pick(VARIANT_KIND.RANDOM, CHECKPOINTS.FULL)]
        random = [float(specialization(delta).mean()) for delta in random if delta is not None]
        if random:
            out["random_delta"] = float(np.mean(random))
        for run, prefix in ((CHECKPOINTS.SFT, "sft"), (CHECKPOINTS.SFT_RANDOM, "sft_random")):
            found = self.pick(VARIANT_KIND.SUBNETWORK, run)
            if not found:
                continue
            acc = self._dev_accuracy(run)
            out[f"{prefix}_specialization"] = float(specialization(self.matrix(found[0].name)).mean())
            out[f"{prefix}_dev_accuracy"] = float(np.mean(list(acc[max(acc)].values())))
        v = self._influence_source()
        if v is not None:
            try:
                pairs = off_diagonal_pairs(similarity_matrix(self.masks), self.matrix(v.name).table)
                out["similarity_r"] = pearson(pairs.similarity, pairs.influence).r
            except (UndefinedSimilarityError, UndefinedCorrelationError, ContractViolation) as e:
                logger.warning(f"{Fore.RED}Similarity correlation undefined: {e}{Style.RESET_ALL}")
        return out

    def write(self, root: str) -> None:
        os.makedirs(root, exist_ok=True)
        for fn in (self.full_baseline, self.subnetwork_delta, self.random_subnetworks, self.sft,
                   self.random_sft, self.specialization_accuracy, self.similarity_influence,
                   self.epoch_trajectories, self.composition, self.mask_overlap, self.performance):
            fn(root)
        return

    def full_baseline(self, root: str) -> None:
        d = os.path.join(root, REPORT.FULL_BASELINE.value)
        for sign in SIGN:
            cm = self.baseline(sign)
            if cm is not None:
                self._write(d, f"contribution_{sign.value}", cm.table, cm.meta())

    def subnetwork_delta(self, root: str) -> None:
        d = os.path.join(root, REPORT.SUBNETWORK_DELTA.value)
        for v in self.pick(VARIANT_KIND.SUBNETWORK, CHECKPOINTS.FULL):
            for sign in SIGN:
                cm, delta = self._delta(v.name, sign)
                self._write(d, f"{v.name}_contribution_{sign.value}", cm.table, cm.meta())
                if delta is not None:
                    self._write(d, f"{v.name}_delta_{sign.value}", delta.table, delta.meta())

    def random_subnetworks(self, root: str) -> None:
        d = os.path.join(root, REPORT.RANDOM_SUBNETWORKS.value)
        rows = []
        groups = [("subnetwork", self.pick(VARIANT_KIND.SUBNETWORK, CHECKPOINTS.FULL)),
                  ("random", self.pick(VARIANT_KIND.RANDOM, CHECKPOINTS.FULL)),
                  ("suboptimal", self.pick(VARIANT_KIND.SUBOPTIMAL, CHECKPOINTS.FULL))]
        for label, variants in groups:
            for v in variants:
                _, delta = self._delta(v.name)
                if delta is None:
                    continue
                if label != "subnetwork":
                    self._write(d, f"{v.name}_delta_positive", delta.table, delta.meta())
                # suboptimal rows: the target language's own column
                diag = specialization(delta)
                rows.append({"variant": v.name, "kind": label, "mean_in_language_delta": float(diag.mean())})
        if rows:
            self._write(d, "summary", pd.DataFrame(rows), index=False)

    def sft(self, root: str) -> None:
        for v in self.pick(VARIANT_KIND.SUBNETWORK, CHECKPOINTS.SFT):
            for sign in SIGN:
                cm, delta = self._delta(v.name, sign)
                self._write(os.path.join(root, REPORT.SFT_ABSOLUTE.value), f"{v.name}_contribution_{sign.value}",
                            cm.table, cm.meta())
                if delta is not None:
                    self._write(os.path.join(root, REPORT.SFT_DELTA.value), f"{v.name}_delta_{sign.value}",
                                delta.table, delta.meta())

    def _dev_accuracy(self, run: CHECKPOINTS) -> dict:
        return {c.epoch: c.dev_accuracy for c in self.x.checkpoints(run)}

    def random_sft(self, root: str) -> None:
        d = os.path.join(root, REPORT.RANDOM_SFT.value)
        rows = []
        for run in (CHECKPOINTS.SFT, CHECKPOINTS.SFT_RANDOM):
            for v in self.pick(VARIANT_KIND.SUBNETWORK, run):
                cm = self.matrix(v.name)
                acc = self._dev_accuracy(run)
                final = acc[max(acc)]
                if run == CHECKPOINTS.SFT_RANDOM:
                    self._write(d, f"{v.name}_contribution_positive", cm.table, cm.meta())
                rows.append({"variant": v.name, "checkpoints": run.value,
                             "mean_specialization": float(specialization(cm).mean()),
                             "mean_dev_accuracy": float(np.mean(list(final.values())))})
        if any(r["checkpoints"] == CHECKPOINTS.SFT_RANDOM.value for r in rows):
            self._write(d, "summary", pd.DataFrame(rows), index=False)

    def _trajectory(self, name: str) -> pd.DataFrame:
        inf = self.influence[name]
        return epoch_trajectory(inf["per_epoch"], inf["test_languages"], self.train_languages,
                                self.languages, inf["meta"]["epochs"])

    def specialization_accuracy(self, root: str) -> None:
        d = os.path.join(root, REPORT.SPECIALIZATION_ACCURACY.value)
        pairs = []
        for v in self.variants:
            if v.kind not in (VARIANT_KIND.FULL, VARIANT_KIND.SUBNETWORK):
                continue
            acc = self._dev_accuracy(v.checkpoints)
            traj = self._trajectory(v.name)
            for lang in traj.index:
                for e in traj.columns:
                    if lang in acc.get(int(e), {}):
                        pairs.append({"variant": v.name, "language": lang, "epoch": int(e),
                                      "specialization": float(traj.loc[lang, e]),
                                      "dev_accuracy": float(acc[int(e)][lang])})
        if not pairs:
            return
        df = pd.DataFrame(pairs)
        self._write(d, "pairs", df, index=False)
        corr = [self._correlation_row("specialization_vs_accuracy", df.specialization, df.dev_accuracy)]
        self._write(d, "correlation", pd.DataFrame(corr), index=False)

    def _influence_source(self) -> Optional[VariantSpec]:
        for run in (CHECKPOINTS.SFT, CHECKPOINTS.FULL):
            found = self.pick(VARIANT_KIND.SUBNETWORK, run)
            if found:
                return found[0]
        return None

    def similarity_influence(self, root: str) -> None:
        v = self._influence_source()
        if v is None:
            return
        try:
            sim = similarity_matrix(self.masks)
        except UndefinedSimilarityError as e:
            logger.warning(f"{Fore.RED}Mask similarity undefined: {e}{Style.RESET_ALL}")
            return
        d = os.path.join(root, REPORT.SIMILARITY_INFLUENCE.value)
        self._write(d, "mask_similarity", sim)
        corr = []
        for sign in SIGN:
            pairs = off_diagonal_pairs(sim, self.matrix(v.name, sign).table)
            self._write(d, f"pairs_{sign.value}", pairs, {"variant": v.name}, index=False)
            corr.append(self._correlation_row(f"similarity_vs_{sign.value}_influence",
                                              pairs.similarity, pairs.influence))
        self._write(d, "correlation", pd.DataFrame(corr), {"variant": v.name}, index=False)
        ld = os.path.join(root, REPORT.LAYERWISE_SIMILARITY.value)
        positive = self.matrix(v.name).table
        rows = []
        for layer, lsim in layerwise_similarity(self.masks).items():
            self._write(ld, f"layer_{layer}_similarity", lsim)
            pairs = off_diagonal_pairs(lsim, positive)
            row = self._correlation_row(f"layer_{layer}", pairs.similarity, pairs.influence)
            row["layer"] = layer
            rows.append(row)
        self._write(ld, "correlation", pd.DataFrame(rows), {"variant": v.name}, index=False)

    def epoch_trajectories(self, root: str) -> None:
        d = os.path.join(root, REPORT.EPOCH_TRAJECTORIES.value)
        for v in self.variants:
            if v.kind in (VARIANT_KIND.FULL, VARIANT_KIND.SUBNETWORK):
                self._write(d, v.name, self._trajectory(v.name), {"variant": v.name})

    def composition(self, root: str) -> None:
        d = os.path.join(root, REPORT.COMPOSITION.value)
        for v in self.variants:
            if v.kind != VARIANT_KIND.COMPOSED:
                continue
            cm, delta = self._delta(v.name)
            self._write(d, f"{v.name}_contribution_positive", cm.table, cm.meta())
            if delta is not None:
                self._write(d, f"{v.name}_delta_positive", delta.table, delta.meta())

    def mask_overlap(self, root: str) -> None:
        d = os.path.join(root, REPORT.MASK_OVERLAP.value)
        pct = overlap_percentages(self.masks)
        self._write(d, "head_share_counts", head_share_counts(self.masks))
        self._write(d, "overlap_counts", overlap_counts(self.masks))
        self._write(d, "overlap_percentages", pct)
        self._write(d, "disabled_heads", sparsity_table(self.masks).to_frame())
        v = self._influence_source()
        if v is None:
            return
        corr = []
        for sign in SIGN:
            # the similarity column carries the overlap percentage
            pairs = off_diagonal_pairs(pct, self.matrix(v.name, sign).table)
            self._write(d, f"pairs_{sign.value}", pairs, {"variant": v.name}, index=False)
            corr.append(self._correlation_row(f"overlap_vs_{sign.value}_influence",
                                              pairs.similarity, pairs.influence))
        self._write(d, "correlation", pd.DataFrame(corr), {"variant": v.name}, index=False)

    def performance(self, root: str) -> None:
        columns = {"subnetwork_full_finetuning": {lang: self.x.trace(lang).selected_accuracy
                                                  for lang in self.languages}}
        for run in (CHECKPOINTS.SFT, CHECKPOINTS.SFT_RANDOM):
            if train_node(run) in self.x.G and self.x.is_done(train_node(run)):
                acc = self._dev_accuracy(run)
                columns[f"subnetwork_{run.value}"] = acc[max(acc)]
        self._write(os.path.join(root, REPORT.PERFORMANCE.value), "accuracy",
                    performance_table(columns, self.languages))


@contextmanager
def experiment(cfg: ExperimentConfig, out: Optional[str] = None, force: bool = False,
               progress: bool = True):
    """Experiment over `out` with its root directory locked for the duration."""
    x = Experiment(cfg, out_dir=out, force=force, progress=progress)
    with artifact_lock(x.root):
        yield x


def cmd_gen_data(cfg: ExperimentConfig, out: Optional[str] = None, force: bool = False) -> str:
    with experiment(cfg, out, force) as x:
        return x.gen_data()


def cmd_train(cfg: ExperimentConfig, mode: str = "full", out: Optional[str] = None, force: bool = False) -> str:
    with experiment(cfg, out, force) as x:
        return x.train(mode)


def cmd_prune(cfg: ExperimentConfig, language: Optional[str] = None, out: Optional[str] = None,
              force: bool = False) -> list[str]:
    with experiment(cfg, out, force) as x:
        return x.prune(language)


def cmd_influence(cfg: ExperimentConfig, variant: Optional[str] = None, out: Optional[str] = None,
                  force: bool = False) -> list[str]:
    names = [variant] if variant else [v.name for v in cfg.variants]
    with experiment(cfg, out, force) as x:
        return [x.influence(n) for n in names]


def cmd_analyze(cfg: ExperimentConfig, out: Optional[str] = None, force: bool = False) -> str:
    with experiment(cfg, out, force) as x:
        return x.analyze()


def cmd_report(cfg: ExperimentConfig, out: Optional[str] = None, force: bool = False) -> str:
    """
    Run the whole graph and print the headline tables.
    """
    with experiment(cfg, out, force) as x:
        root = x.run_all()
    summary = os.path.join(root, REPORT.RANDOM_SUBNETWORKS.value, "summary.csv")
    if os.path.isfile(summary):
        blank_logger.info(pd.read_csv(summary).to_string(index=False))
    blank_logger.info(f"Report written to {root}")
    return root


def cmd_seed_summary(cfg: ExperimentConfig, seeds: list[int], out: Optional[str] = None,
                     force: bool = False) -> str:
    """
    Run the whole graph once per corpus seed under `<out>/seed_<seed>` and
    write the seed-averaged directional criteria to `<out>/seed_summary`.
    """
    base = os.path.abspath(out or os.path.join(cfg.output_dir, cfg.name))
    runs = {}
    for seed in seeds:
        seeded = with_seed(cfg, seed)
        root = os.path.join(base, f"seed_{seed}")
        cmd_report(seeded, out=root, force=force)
        runs[seed] = Report(Experiment(seeded, out_dir=root, progress=False)).directional()
    summary = summarize_seeds(runs, cfg.corpus.language_ids)
    d = os.path.join(base, REPORT.SEED_SUMMARY.value)
    meta = {"seeds": list(seeds), "config": cfg.name}
    write_table(summary.diagonal, os.path.join(d, "diagonal_delta.csv"), meta)
    write_table(summary.criteria, os.path.join(d, "criteria.csv"), meta, index=False)
    for row in summary.criteria.itertuples():
        color = "" if row.holds else Fore.RED
        blank_logger.info(f"{color}{row.criterion}: {row.value:.4f} holds={row.holds}{Style.RESET_ALL}")
    return d


def cmd_verify(cfg: ExperimentConfig, out: Optional[str] = None, force: bool = False) -> bool:
    from xlinfluence.verify import run_checks
    with experiment(cfg, out, force) as x:
        return run_checks(cfg, os.path.join(x.root, "verify"), experiment=x)
