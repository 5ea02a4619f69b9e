"""The query / annotate / fine-tune loop.

Each iteration scores the unlabeled pool with the current model, sends the
most uncertain samples to the simulated oracle and the most certain
confident ones to the CRF weak labeler, folds both into the labeled set,
and fine-tunes the model on it.  The weak-labeler ensemble is greedily
fine-tuned once, at the first pseudo-labeling iteration, then frozen.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Tuple

import numpy as np

from . import segmenter, selection, weaklabeler
from .core import BinaryMask, ImageGrid, PoolState, ProbMap, Sample, binarize, dice, move_to_labeled
from .crf import CrfParams
from .segmenter import LossWeights, SegmenterParams, TrainConfig
from .selection import QuerySplit, SampleScores
from .weaklabeler import CrfEnsemble, PerturbSpec

QUERY_STRATEGIES = ("uncertainty", "random")


@dataclass(frozen=True)
class ALConfig:
    """Everything one query loop needs; fully determines the run given a split."""

    iterations: int = 8
    k_strong: int = 20
    k_weak: int = 10
    bins: int = 10
    pseudo_start_iter: int = 3
    finetune: TrainConfig = field(
        default_factory=lambda: TrainConfig(epochs=6, learning_rate=0.5, batch_size=2,
                                            loss_kind="cross_entropy", seed=0)
    )
    base_train: Optional[TrainConfig] = None  # defaults to `finetune`
    loss_weights: LossWeights = field(default_factory=LossWeights)
    crf_center: CrfParams = field(
        default_factory=lambda: CrfParams(
            gaussian_sdims=1.5,
            gaussian_compat=0.4,
            bilateral_sdims=2.5,
            bilateral_schan=0.15,
            bilateral_compat=0.6,
            steps=2,
        )
    )
    ensemble_size: int = 5
    perturb: PerturbSpec = field(default_factory=PerturbSpec)
    ensemble_rounds: int = 3
    seed: int = 0
    query_strategy: str = "uncertainty"
    # ablation switches: disable pseudo-labeling entirely, drop the
    # confidence filter, or replace the CRF-ensemble weak labeler with the
    # model's own thresholded prediction
    pseudo_labels: bool = True
    confidence_filter: bool = True
    ensemble_crf: bool = True
    target_dsc: Optional[float] = None

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("need at least one iteration")
        if self.k_strong < 0 or self.k_weak < 0:
            raise ValueError("query sizes must be nonnegative")
        if self.pseudo_start_iter < 1:
            raise ValueError("pseudo_start_iter counts from iteration 1")
        if self.query_strategy not in QUERY_STRATEGIES:
            raise ValueError(f"query_strategy must be one of {QUERY_STRATEGIES}")

    def base_train_config(self) -> TrainConfig:
        return self.base_train if self.base_train is not None else self.finetune


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    strong_ids: Tuple[str, ...]
    weak_ids: Tuple[str, ...]
    test_dsc: float
    pool_remaining: int
    labeled_total: int
    phase1_ms: float
    phase2_ms: float
    phase3_ms: float

    def __post_init__(self):
        if not 0.0 <= self.test_dsc <= 1.0:
            raise ValueError(f"test_dsc must lie in [0, 1], got {self.test_dsc}")


@dataclass(frozen=True)
class RunResult:
    """Records plus the artifacts the harness reports on."""

    records: Tuple[IterationRecord, ...]
    params: SegmenterParams
    ensemble: Optional[CrfEnsemble]
    base_test_dsc: float
    score_rows: Tuple[Tuple[int, SampleScores, str], ...]
    correlation_pairs: Tuple[Tuple[int, str, float, float], ...]  # (iter, id, mean_dsc, r_dsc)
    final_pool: PoolState


def oracle_label(sample: Sample) -> BinaryMask:
    """Simulated expert annotation: the stored ground truth, unmodified."""
    return sample.require_ground_truth()


def evaluate(params: SegmenterParams, samples: Sequence[Sample]) -> float:
    """Mean Dice of the binarized final head against ground truth."""
    if len(samples) == 0:
        raise ValueError("evaluation set is empty")
    scores = []
    for s in samples:
        pred = segmenter.predict(params, s.image)
        scores.append(dice(binarize(pred.final, 0.5), s.require_ground_truth()))
    return float(np.mean(scores))


def _score_pool(params: SegmenterParams, pool: Sequence[Sample]) -> list[SampleScores]:
    return [selection.score_sample(segmenter.predict(params, s.image), s.id) for s in pool]


def _labeled_pairs(state: PoolState) -> list[tuple[ImageGrid, BinaryMask]]:
    return [(entry.sample.image, entry.mask) for entry in state.labeled]


def _random_split(state: PoolState, cfg: ALConfig) -> QuerySplit:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, state.iteration + 1]))
    ids = sorted(s.id for s in state.unlabeled)
    k = min(cfg.k_strong, len(ids))
    chosen = rng.choice(len(ids), size=k, replace=False)
    return QuerySplit(tuple(ids[i] for i in sorted(chosen)), (), float("inf"))


def run_iteration(
    state: PoolState,
    params: SegmenterParams,
    cfg: ALConfig,
    ensemble: Optional[CrfEnsemble],
    test_set: Sequence[Sample],
) -> Tuple[PoolState, SegmenterParams, IterationRecord, list[Tuple[int, SampleScores, str]]]:
    """One full query round; returns the new pool, fine-tuned params, the
    iteration record, and the per-sample score rows for the CSV export."""
    if len(state.unlabeled) == 0:
        raise ValueError("unlabeled pool is empty; the loop is complete")
    t = state.iteration + 1
    pseudo_enabled = cfg.pseudo_labels and t >= cfg.pseudo_start_iter

    # phase 1: query selection
    t0 = time.perf_counter()
    score_rows: list[Tuple[int, SampleScores, str]] = []
    if cfg.query_strategy == "random":
        split = _random_split(state, cfg)
    else:
        scores = _score_pool(params, state.unlabeled)
        split = selection.select_queries(
            scores,
            cfg.k_strong,
            cfg.k_weak,
            cfg.bins,
            pseudo_enabled,
            confidence_filter=cfg.confidence_filter,
        )
        marks = {sid: "strong" for sid in split.strong_ids}
        marks.update({sid: "weak" for sid in split.weak_ids})
        for s in sorted(scores, key=lambda s: s.sample_id):
            score_rows.append((t, s, marks.get(s.sample_id, "none")))
    phase1 = time.perf_counter() - t0

    # phase 2: sample annotation
    t0 = time.perf_counter()
    by_id = {s.id: s for s in state.unlabeled}
    strong_masks = [oracle_label(by_id[sid]) for sid in split.strong_ids]
    weak_masks = []
    for sid in split.weak_ids:
        sample = by_id[sid]
        prob = segmenter.predict(params, sample.image).final
        if cfg.ensemble_crf:
            if ensemble is None:
                raise ValueError("pseudo-labeling requested but no ensemble was provided")
            weak_masks.append(weaklabeler.refine(ensemble, sample.image, prob))
        else:
            weak_masks.append(binarize(prob, 0.5))
    phase2 = time.perf_counter() - t0

    # phase 3: update pool and fine-tune
    t0 = time.perf_counter()
    new_state = move_to_labeled(state, split.strong_ids, strong_masks, "oracle")
    new_state = move_to_labeled(new_state, split.weak_ids, weak_masks, "pseudo")
    new_state = new_state.advance_iteration()
    new_params = segmenter.train(params, _labeled_pairs(new_state), cfg.finetune, cfg.loss_weights)
    phase3 = time.perf_counter() - t0

    record = IterationRecord(
        iteration=t,
        strong_ids=split.strong_ids,
        weak_ids=split.weak_ids,
        test_dsc=evaluate(new_params, test_set),
        pool_remaining=len(new_state.unlabeled),
        labeled_total=len(new_state.labeled),
        phase1_ms=phase1 * 1000.0,
        phase2_ms=phase2 * 1000.0,
        phase3_ms=phase3 * 1000.0,
    )
    return new_state, new_params, record, score_rows


@dataclass(frozen=True)
class DatasetSplit:
    """Initial labeled set, query pool, and held-out test samples."""

    initial: Tuple[Sample, ...]
    pool: Tuple[Sample, ...]
    test: Tuple[Sample, ...]

    def __post_init__(self):
        ids = [s.id for group in (self.initial, self.pool, self.test) for s in group]
        if len(set(ids)) != len(ids):
            raise ValueError("split groups must be disjoint by sample id")
        if len(self.initial) == 0 or len(self.test) == 0:
            raise ValueError("initial labeled set and test set must be nonempty")
        for s in list(self.initial) + list(self.test):
            if s.ground_truth is None:
                raise ValueError(f"sample {s.id!r} needs ground truth for this split")


def _correlation_rows(
    iteration: int, params: SegmenterParams, held_out: Sequence[Sample]
) -> list[Tuple[int, str, float, float]]:
    rows = []
    for s in held_out:
        pred = segmenter.predict(params, s.image)
        sc = selection.score_sample(pred, s.id)
        r_dsc = dice(binarize(pred.final, 0.5), s.require_ground_truth())
        rows.append((iteration, s.id, sc.mean_dsc, r_dsc))
    return rows


def run(split: DatasetSplit, cfg: ALConfig) -> list[IterationRecord]:
    """Algorithm view of the loop: just the per-iteration records."""
    return list(run_detailed(split, cfg).records)


def run_detailed(split: DatasetSplit, cfg: ALConfig) -> RunResult:
    """Base-train on the initial labels, then iterate until the configured
    number of rounds, pool exhaustion, or the optional target Dice."""
    initial_masks = [oracle_label(s) for s in split.initial]
    state = PoolState(labeled=(), unlabeled=tuple(split.initial) + tuple(split.pool), iteration=0)
    state = move_to_labeled(state, [s.id for s in split.initial], initial_masks, "initial")

    params = segmenter.init_params(cfg.seed)
    params = segmenter.train(params, _labeled_pairs(state), cfg.base_train_config(), cfg.loss_weights)
    base_dsc = evaluate(params, split.test)

    ensemble: Optional[CrfEnsemble] = None
    records: list[IterationRecord] = []
    score_rows: list[Tuple[int, SampleScores, str]] = []
    correlation: list[Tuple[int, str, float, float]] = []
    correlation.extend(_correlation_rows(0, params, split.test))

    for t in range(1, cfg.iterations + 1):
        if len(state.unlabeled) == 0:
            break
        needs_pseudo = (
            cfg.pseudo_labels
            and cfg.ensemble_crf
            and cfg.query_strategy == "uncertainty"
            and t >= cfg.pseudo_start_iter
        )
        if needs_pseudo and ensemble is None:
            ensemble = _prepare_ensemble(state, params, cfg)
        state, params, record, rows = run_iteration(state, params, cfg, ensemble, split.test)
        records.append(record)
        score_rows.extend(rows)
        correlation.extend(_correlation_rows(t, params, split.test))
        if cfg.target_dsc is not None and record.test_dsc >= cfg.target_dsc:
            break

    return RunResult(
        records=tuple(records),
        params=params,
        ensemble=ensemble,
        base_test_dsc=base_dsc,
        score_rows=tuple(score_rows),
        correlation_pairs=tuple(correlation),
        final_pool=state,
    )


ENSEMBLE_VALIDATION_CAP = 16


def _prepare_ensemble(state: PoolState, params: SegmenterParams, cfg: ALConfig) -> CrfEnsemble:
    """Build the weak-labeler ensemble and greedily fine-tune it against the
    current labeled set (model predictions as inputs, stored labels as truth).

    The validation set is capped at an evenly spaced subset of the labeled
    entries to keep fine-tuning cheap at desk scale.
    """
    ensemble = weaklabeler.build_ensemble(cfg.crf_center, cfg.ensemble_size, cfg.perturb, cfg.seed)
    entries = state.labeled
    if len(entries) > ENSEMBLE_VALIDATION_CAP:
        idx = np.linspace(0, len(entries) - 1, ENSEMBLE_VALIDATION_CAP).astype(int)
        entries = tuple(entries[i] for i in idx)
    validation = [
        (entry.sample.image, segmenter.predict(params, entry.sample.image).final, entry.mask)
        for entry in entries
    ]
    return weaklabeler.greedy_finetune(
        ensemble, validation, cfg.ensemble_rounds, cfg.perturb, cfg.seed
    )
