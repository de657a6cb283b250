"""
Property suites run by `xlinfluence verify`: finite-difference gradient
checks, sketch fidelity, projection unbiasedness, self-influence bounds, mask
algebra, pruning soundness and matrix invariants.
"""
import os
import logging
from dataclasses import dataclass, asdict
from typing import Optional
import numpy as np
import pandas as pd
from tqdm import tqdm
from colorama import Fore, Style
from xlinfluence.analysis import (compose, contribution_matrix, delta_matrix, pearson,
                                  similarity_matrix, group_by_language)
from xlinfluence.config import ExperimentConfig, ModelConfig
from xlinfluence.data import generate
from xlinfluence.enums import SCHEME, SIGN, NORMALIZATION, CHECKPOINTS, TOKENS, INFLUENCE
from xlinfluence.errors import ContractViolation, UndefinedCorrelationError, UndefinedSimilarityError
from xlinfluence.influence import (SketchProjector, build_projector, compute_sketches, exact_tracin_scores,
                                   rank_top_m, tracin_scores)
from xlinfluence.model import (Example, ParameterLayout, Parameters, SubnetworkMask, gate_grad, gated_loss,
                               init_model, loss_and_grad)
from xlinfluence.prune import heads_per_step, shuffle_mask
from xlinfluence.utils.table_utils import write_table


logger = logging.getLogger("root_logger")


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """
    Norm-wise relative error: the largest coordinate difference divided by the
    largest magnitude in either vector (floored at 1e-12), not a per-coordinate
    ratio. A coordinate whose gradient is tiny next to the largest one is
    therefore held to an absolute bound of `tolerance * max|g|`.
    """
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = max(float(np.max(np.abs(analytic))), float(np.max(np.abs(numeric))), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def micro_config(seed: int) -> ModelConfig:
    """Random micro model: at most 2 layers, 4 heads, width 16."""
    rng = np.random.default_rng(seed)
    heads = int(rng.choice([1, 2, 4]))
    dim = int(rng.choice([8, 16]))
    return ModelConfig(num_layers=int(rng.integers(1, 3)), heads_per_layer=heads, model_dim=dim,
                       ffn_dim=2 * dim, vocab_size=16, max_seq_len=8, classifier_hidden_dim=8)


def micro_example(config: ModelConfig, seed: int, uid: int = 0) -> Example:
    rng = np.random.default_rng(seed)
    body = rng.integers(TOKENS.FIRST_FREE.value, config.vocab_size, size=config.max_seq_len - 3)
    tokens = (TOKENS.CLS.value, *body[:3], TOKENS.SEP.value, *body[3:])
    return Example(uid=uid, tokens=tuple(int(t) for t in tokens), label=int(rng.integers(0, 2)),
                   language="xx", latent_id=uid)


def _perturbed(config: ModelConfig, seed: int) -> Parameters:
    params = init_model(config, seed)
    noise = np.random.default_rng(seed + 1).normal(0.0, 0.02, size=params.layout.size)
    return params.replace(params.flat + noise)


def finite_difference_grad(params: Parameters,
                           example: Example,
                           mask: SubnetworkMask,
                           step: float = 1e-4,
                           coordinates: Optional[np.ndarray] = None
                           ) -> np.ndarray:
    """
    Central differences of the loss over the given parameter coordinates
    (all of them by default).
    """
    coords = np.arange(params.layout.size) if coordinates is None else np.asarray(coordinates)
    out = np.empty(coords.size)
    for i, c in enumerate(coords):
        bump = np.zeros(params.layout.size)
        bump[c] = step
        up = gated_loss(params.replace(params.flat + bump), example, mask.bits)
        down = gated_loss(params.replace(params.flat - bump), example, mask.bits)
        out[i] = (up - down) / (2 * step)
    return out


def finite_difference_gates(params: Parameters, example: Example, mask: SubnetworkMask,
                            step: float = 1e-3) -> np.ndarray:
    gates = mask.bits.astype(np.float64)
    out = np.zeros_like(gates)
    for idx in np.ndindex(gates.shape):
        bump = np.zeros_like(gates)
        bump[idx] = step
        out[idx] = (gated_loss(params, example, gates + bump) - gated_loss(params, example, gates - bump)) / (2 * step)
    return out


def gradient_checks(seeds=range(5), tolerance: float = 1e-4, max_coordinates: Optional[int] = None,
                    progress: bool = False) -> list[CheckResult]:
    """
    Analytic parameter and gate gradients against central finite differences
    on random micro models; a random mask disables some heads when possible.
    """
    results = []
    for seed in tqdm(list(seeds), desc="gradient checks", disable=not progress):
        config = micro_config(seed)
        params = _perturbed(config, seed)
        example = micro_example(config, seed)
        bits = np.ones((config.heads_per_layer, config.num_layers), dtype=np.uint8)
        if bits.size > 1:
            bits.flat[int(np.random.default_rng(seed).integers(bits.size))] = 0
        mask = SubnetworkMask(bits)
        coords = None
        if max_coordinates is not None and max_coordinates < params.layout.size:
            coords = np.sort(np.random.default_rng(seed).choice(params.layout.size, max_coordinates,
                                                                replace=False))
        analytic = loss_and_grad(params, example, mask).values
        analytic = analytic if coords is None else analytic[coords]
        err = relative_error(analytic, finite_difference_grad(params, example, mask, coordinates=coords))
        label = (f"L={config.num_layers} H={config.heads_per_layer} D={config.model_dim} "
                 f"p={params.layout.size}")
        results.append(CheckResult(f"gradient[{seed}]", err < tolerance, err, tolerance, label))
        gerr = relative_error(gate_grad(params, example, mask).values,
                              finite_difference_gates(params, example, mask))
        results.append(CheckResult(f"gate_gradient[{seed}]", gerr < tolerance, gerr, tolerance, label))
    return results


def unbiasedness_check(p: int = 500, d: int = 256, draws: int = 1000, seed: int = 0,
                       tolerance: float = 0.02) -> CheckResult:
    """
    Mean sketched dot product over many projector seeds against the true dot
    product of two fixed vectors.
    """
    rng = np.random.default_rng(seed)
    u = rng.normal(size=p)
    v = u + 0.5 * rng.normal(size=p)
    layout = ParameterLayout([("vector", (p,))])
    estimates = np.empty(draws)
    for k in range(draws):
        proj = SketchProjector(seed + 1 + k, d, layout, SCHEME.DENSE)
        estimates[k] = proj.project(u) @ proj.project(v)
    truth = float(u @ v)
    err = abs(float(estimates.mean()) - truth) / abs(truth)
    return CheckResult("projection_unbiasedness", err < tolerance, err, tolerance,
                       f"p={p} d={d} draws={draws} true={truth:.4f} mean={estimates.mean():.4f}")


def fidelity_threshold(d: int) -> float:
    if d >= 256:
        return 0.95
    if d >= 64:
        return 0.85
    return 0.0


def sketch_fidelity_check(params: Parameters,
                          train: list[Example],
                          tests: list[Example],
                          d: int,
                          seed: int = 0,
                          mask: Optional[SubnetworkMask] = None,
                          progress: bool = False
                          ) -> CheckResult:
    """
    Pearson r between sketched-cosine and exact-cosine TracIn scores over all
    (train, test) pairs of one checkpoint.
    """
    exact = exact_tracin_scores([params], train, tests, mask, NORMALIZATION.COSINE)
    projector = build_projector(seed, d, params.layout, SCHEME.DENSE)
    train_sk = compute_sketches(params, train, mask, projector, progress=progress)
    test_sk = compute_sketches(params, tests, mask, projector, progress=progress)
    sketched = tracin_scores(train_sk[None], test_sk[None], NORMALIZATION.COSINE)
    threshold = fidelity_threshold(d)
    try:
        r = pearson(exact.ravel(), sketched.ravel()).r
    except (UndefinedCorrelationError, ContractViolation) as e:
        return CheckResult(f"sketch_fidelity[d={d}]", False, float("nan"), threshold, str(e))
    return CheckResult(f"sketch_fidelity[d={d}]", r >= threshold, r, threshold,
                       f"p={params.layout.size} pairs={exact.size}")


def self_influence_check(checkpoints: list[Parameters], examples: list[Example], d: int,
                         seed: int = 0, tolerance: float = 1e-9) -> list[CheckResult]:
    """
    Cosine TracIn of every example with itself equals the checkpoint count and
    no score leaves [-E, E].
    """
    projector = build_projector(seed, d, checkpoints[0].layout, SCHEME.DENSE)
    stack = np.stack([compute_sketches(p, examples, None, projector) for p in checkpoints])
    scores = tracin_scores(stack, stack, NORMALIZATION.COSINE)
    E = len(checkpoints)
    nonzero = np.linalg.norm(stack, axis=-1).min(axis=0) > 0
    diag = np.diag(scores)[nonzero]
    self_err = float(np.max(np.abs(diag - E))) if diag.size else 0.0
    overshoot = float(max(np.max(np.abs(scores)) - E, 0.0))
    return [CheckResult("self_influence", self_err <= tolerance, self_err, tolerance, f"E={E}"),
            CheckResult("score_bounds", overshoot <= tolerance, overshoot, tolerance, f"E={E}")]


def mask_algebra_checks(heads: int, layers: int, seed: int = 0, layout: Optional[ParameterLayout] = None
                        ) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    a = SubnetworkMask(rng.integers(0, 2, size=(heads, layers)).astype(np.uint8))
    b = SubnetworkMask(rng.integers(0, 2, size=(heads, layers)).astype(np.uint8))
    union, inter = compose(a, b, "union"), compose(a, b, "intersect")
    props = {
        "union_contains_operands": a.enabled() | b.enabled() == union.enabled(),
        "intersection_within_operands": inter.enabled() == a.enabled() & b.enabled(),
        "composition_commutes": compose(b, a, "union") == union and compose(b, a, "intersect") == inter,
        "shuffle_preserves_sparsity": all(shuffle_mask(a, s).sparsity == a.sparsity for s in range(5)),
        "json_round_trip": SubnetworkMask.from_json(a.to_json()) == a,
    }
    if layout is not None:
        per_head = sum(s.stop - s.start for s in layout.head_slices(0, 0))
        props["expand_mask_freezes_head_parameters"] = (
            int(np.sum(~layout.expand_mask(a))) == a.sparsity * per_head)
    return [CheckResult(f"mask_algebra.{k}", bool(v), float(v), 1.0) for k, v in props.items()]


def matrix_invariant_checks(languages: list[str], m: int = 5, per_language: int = 10, tests: int = 4,
                            seed: int = 0, tolerance: float = 1e-9) -> list[CheckResult]:
    """
    Row sums of contribution and delta matrices from random scores, and the
    symmetry and unit diagonal of mask similarity.
    """
    rng = np.random.default_rng(seed)
    train_languages = {uid: languages[uid // per_language] for uid in range(per_language * len(languages))}
    ids = np.array(sorted(train_languages))

    def rankings():
        out, test_languages = [], {}
        for i, lang in enumerate(languages):
            for t in range(tests):
                tid = 1000 + i * tests + t
                out.append(rank_top_m(rng.normal(size=ids.size), m, ids, tid))
                test_languages[tid] = lang
        return group_by_language(out, test_languages)

    results = []
    for sign in SIGN:
        base = contribution_matrix(rankings(), train_languages, sign, languages)
        var = contribution_matrix(rankings(), train_languages, sign, languages, variant="random")
        row_err = float(np.max(np.abs(base.row_sums() - 100.0)))
        delta_err = float(np.max(np.abs(delta_matrix(var, base).row_sums())))
        results.append(CheckResult(f"contribution_rows_sum_to_100[{sign.value}]", row_err <= tolerance,
                                   row_err, tolerance))
        results.append(CheckResult(f"delta_rows_sum_to_0[{sign.value}]", delta_err <= tolerance,
                                   delta_err, tolerance))
    masks = {lang: SubnetworkMask(rng.integers(0, 2, size=(4, 3)).astype(np.uint8)) for lang in languages}
    masks = {lang: mk if mk.enabled_count else SubnetworkMask.ones(4, 3) for lang, mk in masks.items()}
    try:
        sim = similarity_matrix(masks).to_numpy()
        err = max(float(np.max(np.abs(sim - sim.T))), float(np.max(np.abs(np.diag(sim) - 1.0))))
        results.append(CheckResult("similarity_symmetric_unit_diagonal", err <= tolerance, err, tolerance))
    except UndefinedSimilarityError as e:
        results.append(CheckResult("similarity_symmetric_unit_diagonal", False, float("nan"), tolerance, str(e)))
    return results


def prune_soundness_checks(experiment) -> list[CheckResult]:
    """
    Nested trace masks, per-iteration disabled counts and the accuracy floor
    of every identified subnetwork in a finished experiment.
    """
    results = []
    for lang in experiment.languages:
        trace = experiment.trace(lang)
        k = heads_per_step(trace.masks[0].size, trace.rate) if len(trace) else 0
        nested = all(b.enabled() <= a.enabled() for a, b in zip(trace.masks, trace.masks[1:]))
        counts = all(mk.sparsity == k * (i + 1) for i, mk in enumerate(trace.masks))
        floor = trace.selected_accuracy >= trace.threshold * trace.base_accuracy
        results += [CheckResult(f"prune[{lang}].nested", nested, float(nested), 1.0),
                    CheckResult(f"prune[{lang}].step_counts", counts, float(counts), 1.0, f"k={k}"),
                    CheckResult(f"prune[{lang}].accuracy_floor", floor, trace.selected_accuracy,
                                trace.threshold * trace.base_accuracy)]
    return results


def run_checks(cfg: ExperimentConfig, out_dir: str, experiment=None,
               fidelity_pairs: tuple = INFLUENCE.FIDELITY_PAIRS.value, progress: bool = True) -> bool:
    """
    Run every suite, write `checks.csv` to `out_dir` and, when something
    fails, `failed_checks.csv` next to it.

    Returns
    -------
    bool
        True when every check passed.
    """
    results = gradient_checks(progress=progress)
    results.append(unbiasedness_check())
    full_done = experiment is not None and experiment.is_done(f"train --mode {CHECKPOINTS.FULL.value}")
    if full_done:
        store = experiment.checkpoints(CHECKPOINTS.FULL)
        checkpoints = store.params()
        train, _, test = experiment.corpora()
    else:
        checkpoints = [init_model(cfg.model, cfg.model_seed)]
        train, _, test = generate(cfg.corpus)
    n_train, n_test = fidelity_pairs
    train_rows, test_rows = list(train)[:n_train], list(test)[:n_test]
    for d in sorted({*INFLUENCE.FIDELITY_DIMS.value, cfg.influence.sketch_dim}, reverse=True):
        results.append(sketch_fidelity_check(checkpoints[-1], train_rows, test_rows, d,
                                             cfg.influence.projector_seed, progress=progress))
    results += self_influence_check(checkpoints, train_rows[:20], cfg.influence.sketch_dim,
                                    cfg.influence.projector_seed)
    results += mask_algebra_checks(cfg.model.heads_per_layer, cfg.model.num_layers,
                                   layout=checkpoints[0].layout)
    results += matrix_invariant_checks(cfg.corpus.language_ids)
    if experiment is not None and all(experiment.is_done(f"prune --language {lang}")
                                      for lang in experiment.languages):
        results += prune_soundness_checks(experiment)

    df = pd.DataFrame([asdict(r) for r in results])
    write_table(df, os.path.join(out_dir, "checks.csv"), {"config": cfg.name}, index=False)
    failed = df[~df.passed]
    for r in results:
        if r.passed:
            logger.info(f"PASS {r.name}: {r.value:.3g} (threshold {r.threshold:.3g}) {r.detail}")
        else:
            logger.error(f"{Fore.RED}FAIL {r.name}: {r.value:.3g} (threshold {r.threshold:.3g}) "
                         f"{r.detail}{Style.RESET_ALL}")
    if len(failed):
        fpath = os.path.join(out_dir, "failed_checks.csv")
        failed.to_csv(fpath, index=False)
        logger.error(f"{Fore.RED}{len(failed)} of {len(df)} checks failed; see {fpath}{Style.RESET_ALL}")
    return len(failed) == 0
