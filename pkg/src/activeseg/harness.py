"""Experiment harness: synthetic corpora, config files, presets, reports.

The default desk-scale experiment mirrors the full protocol shrunk to
32x32 rasters: 40 initial labels, a 200-sample pool, 100 test samples,
20 oracle + 10 pseudo queries per iteration over 8 iterations with
pseudo-labeling active from iteration 3.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from . import alloop, selection
from .alloop import ALConfig, DatasetSplit, RunResult
from .core import BinaryMask, ImageGrid, Sample, load_dataset, save_dataset
from .crf import CrfParams
from .segmenter import LossWeights, TrainConfig
from .selection import fmt, rank_correlation, write_scores_csv
from .weaklabeler import PerturbSpec

SHAPE_KINDS = ("ellipse", "blob", "rectangle")
FOREGROUND_INTENSITY = 0.8
BACKGROUND_INTENSITY = 0.2
# occluded regions compress contrast toward 0.5 but never cross it, so
# masks stay exactly recoverable from noiseless images by thresholding
OCCLUSION_CONTRAST_RANGE = (0.1, 0.55)
FG_FRACTION_RANGE = (0.05, 0.6)


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the generated corpus."""

    n_samples: int
    image_size: int = 32
    shape: str = "blob"
    noise_level: float = 0.15
    occlusion_prob: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("need at least one sample")
        if self.image_size < 8 or self.image_size % 4 != 0:
            raise ValueError("image_size must be a multiple of 4 and at least 8")
        if self.shape not in SHAPE_KINDS:
            raise ValueError(f"shape must be one of {SHAPE_KINDS}")
        if self.noise_level < 0:
            raise ValueError("noise_level must be nonnegative")
        if not 0.0 <= self.occlusion_prob <= 1.0:
            raise ValueError("occlusion_prob must lie in [0, 1]")


def _draw_mask(rng: np.random.Generator, size: int, shape: str) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if shape == "ellipse":
        cy, cx = rng.uniform(0.3 * size, 0.7 * size, size=2)
        a = rng.uniform(0.1 * size, 0.38 * size)
        b = rng.uniform(0.1 * size, 0.38 * size)
        theta = rng.uniform(0.0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = -dx * np.sin(theta) + dy * np.cos(theta)
        return ((u / a) ** 2 + (v / b) ** 2 <= 1.0).astype(np.uint8)
    if shape == "rectangle":
        h = rng.uniform(0.15 * size, 0.6 * size)
        w = rng.uniform(0.15 * size, 0.6 * size)
        r0 = rng.uniform(0.0, size - h)
        c0 = rng.uniform(0.0, size - w)
        return ((yy >= r0) & (yy < r0 + h) & (xx >= c0) & (xx < c0 + w)).astype(np.uint8)
    # blob: thresholded sum of a few anisotropic bumps
    bumps = np.zeros((size, size))
    for _ in range(3):
        cy, cx = rng.uniform(0.2 * size, 0.8 * size, size=2)
        sy = rng.uniform(0.08 * size, 0.2 * size)
        sx = rng.uniform(0.08 * size, 0.2 * size)
        bumps += np.exp(-(((yy - cy) / sy) ** 2 + ((xx - cx) / sx) ** 2) / 2.0)
    return (bumps >= 0.5 * bumps.max()).astype(np.uint8)


def _render(rng: np.random.Generator, mask: np.ndarray, spec: SyntheticSpec) -> np.ndarray:
    size = spec.image_size
    img = np.where(mask == 1, FOREGROUND_INTENSITY, BACKGROUND_INTENSITY)
    if rng.uniform() < spec.occlusion_prob:
        yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
        cy, cx = rng.uniform(0.0, size, size=2)
        radius = rng.uniform(0.25 * size, 0.55 * size)
        contrast = rng.uniform(*OCCLUSION_CONTRAST_RANGE)
        region = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2
        faded = np.where(mask == 1, 0.5 + 0.3 * contrast, 0.5 - 0.3 * contrast)
        img = np.where(region, faded, img)
    if spec.noise_level > 0:
        img = img + rng.normal(0.0, spec.noise_level, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_synthetic(spec: SyntheticSpec) -> list[Sample]:
    """Deterministic corpus of noisy single-shape images with clean masks."""
    rng = np.random.default_rng(spec.seed)
    samples = []
    lo, hi = FG_FRACTION_RANGE
    for i in range(spec.n_samples):
        for _ in range(200):
            mask = _draw_mask(rng, spec.image_size, spec.shape)
            frac = mask.mean()
            if lo <= frac <= hi:
                break
        else:
            raise RuntimeError("could not draw a shape with admissible foreground fraction")
        img = _render(rng, mask, spec)
        samples.append(
            Sample(
                id=f"synth-{spec.seed:06d}-{i:05d}",
                image=ImageGrid(img),
                ground_truth=BinaryMask(mask),
            )
        )
    return samples


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment: dataset, split, loop settings, ablations, outputs."""

    dataset: Union[SyntheticSpec, str]  # synthetic spec or a dataset directory
    n_initial: int = 40
    n_pool: int = 200
    n_test: int = 100
    al: ALConfig = field(default_factory=ALConfig)
    with_baseline: bool = False
    output_dir: str = "out"

    def __post_init__(self):
        for name in ("n_initial", "n_pool", "n_test"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


def default_experiment(output_dir: str = "out", seed: int = 0) -> ExperimentConfig:
    """The desk-scale preset (see module docstring)."""
    finetune = TrainConfig(epochs=6, learning_rate=0.5, batch_size=2,
                           loss_kind="cross_entropy", seed=seed)
    return ExperimentConfig(
        dataset=SyntheticSpec(n_samples=340, image_size=32, shape="blob",
                              noise_level=0.15, occlusion_prob=0.9, seed=seed),
        n_initial=40,
        n_pool=200,
        n_test=100,
        al=ALConfig(seed=seed, finetune=finetune, base_train=replace(finetune, epochs=12)),
        output_dir=output_dir,
    )


def load_samples(cfg: ExperimentConfig) -> list[Sample]:
    if isinstance(cfg.dataset, SyntheticSpec):
        return generate_synthetic(cfg.dataset)
    return load_dataset(cfg.dataset)


def make_split(samples: Sequence[Sample], cfg: ExperimentConfig) -> DatasetSplit:
    """Seeded shuffle then slice; identical for paired method/baseline runs."""
    need = cfg.n_initial + cfg.n_pool + cfg.n_test
    if len(samples) < need:
        raise ValueError(f"dataset has {len(samples)} samples but the split needs {need}")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.al.seed, 0xA11]))
    order = rng.permutation(len(samples))
    picked = [samples[i] for i in order[:need]]
    return DatasetSplit(
        initial=tuple(picked[: cfg.n_initial]),
        pool=tuple(picked[cfg.n_initial : cfg.n_initial + cfg.n_pool]),
        test=tuple(picked[cfg.n_initial + cfg.n_pool :]),
    )


# ---------------------------------------------------------------------------
# config files: flat key=value lines with dotted section prefixes
# ---------------------------------------------------------------------------


def _parse_scalar(value: str):
    v = value.strip()
    if v.lower() in ("true", "false"):
        return v.lower() == "true"
    try:
        return int(v)
    except ValueError:
        pass
    try:
        return float(v)
    except ValueError:
        return v


def parse_config_text(text: str) -> ExperimentConfig:
    kv = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        kv[key.strip()] = _parse_scalar(value)

    def take(key, default):
        return kv.pop(key, default)

    seed = take("seed", 0)
    if take("dataset.kind", "synthetic") == "synthetic":
        dataset: Union[SyntheticSpec, str] = SyntheticSpec(
            n_samples=take("dataset.n_samples", 340),
            image_size=take("dataset.image_size", 32),
            shape=take("dataset.shape", "blob"),
            noise_level=float(take("dataset.noise_level", 0.15)),
            occlusion_prob=float(take("dataset.occlusion_prob", 0.9)),
            seed=take("dataset.seed", 0),
        )
    else:
        dataset = str(take("dataset.dir", "."))

    finetune = TrainConfig(
        epochs=take("train.finetune_epochs", 6),
        learning_rate=float(take("train.learning_rate", 0.5)),
        batch_size=take("train.batch_size", 2),
        loss_kind=take("train.loss", "cross_entropy"),
        seed=seed,
    )
    base_train = replace(finetune, epochs=take("train.base_epochs", 12))
    crf_center = CrfParams(
        gaussian_sdims=float(take("crf.gaussian.sdims", 1.5)),
        gaussian_compat=float(take("crf.gaussian.compat", 0.4)),
        bilateral_sdims=float(take("crf.bilateral.sdims", 2.5)),
        bilateral_schan=float(take("crf.bilateral.schan", 0.15)),
        bilateral_compat=float(take("crf.bilateral.compat", 0.6)),
        steps=take("crf.steps", 2),
    )
    target = take("al.target_dsc", "")
    al = ALConfig(
        iterations=take("al.iterations", 8),
        k_strong=take("al.k_strong", 20),
        k_weak=take("al.k_weak", 10),
        bins=take("al.bins", 10),
        pseudo_start_iter=take("al.pseudo_start_iter", 3),
        finetune=finetune,
        base_train=base_train,
        loss_weights=LossWeights(
            alpha_l=float(take("loss.alpha_l", 0.1)),
            alpha_m=float(take("loss.alpha_m", 0.3)),
            alpha_f=float(take("loss.alpha_f", 0.6)),
        ),
        crf_center=crf_center,
        ensemble_size=take("ensemble.members", 5),
        perturb=PerturbSpec(
            relative_sigma=float(take("ensemble.relative_sigma", 0.05)),
            floor=float(take("ensemble.floor", 1e-3)),
            perturb_steps=take("ensemble.perturb_steps", False),
        ),
        ensemble_rounds=take("ensemble.rounds", 3),
        seed=seed,
        query_strategy=take("al.strategy", "uncertainty"),
        pseudo_labels=take("ablation.pseudo_labels", True),
        confidence_filter=take("ablation.confidence_filter", True),
        ensemble_crf=take("ablation.ensemble_crf", True),
        target_dsc=float(target) if target != "" else None,
    )
    cfg = ExperimentConfig(
        dataset=dataset,
        n_initial=take("split.initial", 40),
        n_pool=take("split.pool", 200),
        n_test=take("split.test", 100),
        al=al,
        with_baseline=take("baseline.random", False),
        output_dir=str(take("output.dir", "out")),
    )
    if kv:
        raise ValueError(f"unknown config keys: {sorted(kv)}")
    return cfg


def parse_config(path: str) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def echo_config(cfg: ExperimentConfig) -> str:
    """Canonical key=value dump; feeding it back reproduces the experiment."""
    lines = []
    if isinstance(cfg.dataset, SyntheticSpec):
        d = cfg.dataset
        lines += [
            "dataset.kind=synthetic",
            f"dataset.n_samples={d.n_samples}",
            f"dataset.image_size={d.image_size}",
            f"dataset.shape={d.shape}",
            f"dataset.noise_level={d.noise_level!r}",
            f"dataset.occlusion_prob={d.occlusion_prob!r}",
            f"dataset.seed={d.seed}",
        ]
    else:
        lines += ["dataset.kind=directory", f"dataset.dir={cfg.dataset}"]
    al = cfg.al
    ft = al.finetune
    bt = al.base_train_config()
    c = al.crf_center
    lines += [
        f"split.initial={cfg.n_initial}",
        f"split.pool={cfg.n_pool}",
        f"split.test={cfg.n_test}",
        f"al.iterations={al.iterations}",
        f"al.k_strong={al.k_strong}",
        f"al.k_weak={al.k_weak}",
        f"al.bins={al.bins}",
        f"al.pseudo_start_iter={al.pseudo_start_iter}",
        f"al.strategy={al.query_strategy}",
        f"train.base_epochs={bt.epochs}",
        f"train.finetune_epochs={ft.epochs}",
        f"train.learning_rate={ft.learning_rate!r}",
        f"train.batch_size={ft.batch_size}",
        f"train.loss={ft.loss_kind}",
        f"loss.alpha_l={al.loss_weights.alpha_l!r}",
        f"loss.alpha_m={al.loss_weights.alpha_m!r}",
        f"loss.alpha_f={al.loss_weights.alpha_f!r}",
        f"crf.gaussian.sdims={c.gaussian_sdims!r}",
        f"crf.gaussian.compat={c.gaussian_compat!r}",
        f"crf.bilateral.sdims={c.bilateral_sdims!r}",
        f"crf.bilateral.schan={c.bilateral_schan!r}",
        f"crf.bilateral.compat={c.bilateral_compat!r}",
        f"crf.steps={c.steps}",
        f"ensemble.members={al.ensemble_size}",
        f"ensemble.relative_sigma={al.perturb.relative_sigma!r}",
        f"ensemble.floor={al.perturb.floor!r}",
        f"ensemble.perturb_steps={al.perturb.perturb_steps}",
        f"ensemble.rounds={al.ensemble_rounds}",
        f"ablation.pseudo_labels={al.pseudo_labels}",
        f"ablation.confidence_filter={al.confidence_filter}",
        f"ablation.ensemble_crf={al.ensemble_crf}",
        f"baseline.random={cfg.with_baseline}",
        f"seed={al.seed}",
        f"output.dir={cfg.output_dir}",
    ]
    if al.target_dsc is not None:
        lines.insert(lines.index(f"al.strategy={al.query_strategy}") + 1,
                     f"al.target_dsc={al.target_dsc!r}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

RUN_LOG_HEADER = "t,n_strong,n_weak,pool_remaining,labeled_total,test_dsc"
CORRELATION_HEADER = "iteration,sample_id,mean_dsc,r_dsc"


def write_run_log(path: str, result: RunResult) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(RUN_LOG_HEADER + "\n")
        for r in result.records:
            fh.write(
                f"{r.iteration},{len(r.strong_ids)},{len(r.weak_ids)},"
                f"{r.pool_remaining},{r.labeled_total},{fmt(r.test_dsc)}\n"
            )


def write_timings(path: str, result: RunResult) -> None:
    """Wall-clock phase durations; kept out of the CSVs so those stay
    byte-reproducible across runs."""
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("t phase1_ms phase2_ms phase3_ms\n")
        for r in result.records:
            fh.write(f"{r.iteration} {r.phase1_ms:.3f} {r.phase2_ms:.3f} {r.phase3_ms:.3f}\n")


def write_correlation_pairs(path: str, result: RunResult) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(CORRELATION_HEADER + "\n")
        for iteration, sid, mean_dsc, r_dsc in result.correlation_pairs:
            fh.write(f"{iteration},{sid},{fmt(mean_dsc)},{fmt(r_dsc)}\n")


def report_correlation(pairs: Sequence[Tuple[float, float]], out_path: Optional[str] = None) -> float:
    """Rank-regression coefficient between quality proxy and real Dice.

    Optionally writes the scatter CSV: raw pair plus both descending ranks
    per row.  Needs at least 10 pairs.
    """
    if len(pairs) < 10:
        raise ValueError(f"need at least 10 pairs for a correlation report, got {len(pairs)}")
    mean_dscs = [a for a, _ in pairs]
    r_dscs = [b for _, b in pairs]
    if out_path is not None:
        ranks_a = selection._descending_ranks(mean_dscs)
        ranks_b = selection._descending_ranks(r_dscs)
        with open(out_path, "w", encoding="ascii", newline="\n") as fh:
            fh.write("mean_dsc,r_dsc,mean_dsc_rank,r_dsc_rank\n")
            for (a, b), ra, rb in zip(pairs, ranks_a, ranks_b):
                fh.write(f"{fmt(a)},{fmt(b)},{fmt(ra)},{fmt(rb)}\n")
    return rank_correlation(mean_dscs, r_dscs)


def run_experiment(cfg: ExperimentConfig) -> dict[str, RunResult]:
    """Run the configured experiment (plus the paired random baseline when
    requested) and write all report files under cfg.output_dir."""
    os.makedirs(cfg.output_dir, exist_ok=True)
    if not os.access(cfg.output_dir, os.W_OK):
        raise ValueError(f"output directory {cfg.output_dir!r} is not writable")
    samples = load_samples(cfg)
    split = make_split(samples, cfg)

    with open(os.path.join(cfg.output_dir, "config_echo.txt"), "w", encoding="ascii", newline="\n") as fh:
        fh.write(echo_config(cfg))

    arms = {"method": cfg.al}
    if cfg.with_baseline:
        arms["random"] = replace(cfg.al, query_strategy="random")

    results: dict[str, RunResult] = {}
    for name, al_cfg in arms.items():
        out = cfg.output_dir if name == "method" else os.path.join(cfg.output_dir, name)
        os.makedirs(out, exist_ok=True)
        result = alloop.run_detailed(split, al_cfg)
        results[name] = result
        write_run_log(os.path.join(out, "run_log.csv"), result)
        write_timings(os.path.join(out, "timings.txt"), result)
        write_correlation_pairs(os.path.join(out, "correlation.csv"), result)
        if al_cfg.query_strategy == "uncertainty":
            with open(os.path.join(out, "scores.csv"), "w", encoding="ascii", newline="\n") as fh:
                write_scores_csv(fh, result.score_rows)
        pairs = [(m, r) for _, _, m, r in result.correlation_pairs]
        try:
            coeff = report_correlation(pairs, os.path.join(out, "correlation_ranks.csv"))
        except ValueError:  # all-tied degenerate run; rank regression undefined
            coeff = float("nan")
        with open(os.path.join(out, "correlation_summary.csv"), "w", encoding="ascii", newline="\n") as fh:
            fh.write("n_pairs,coefficient\n")
            fh.write(f"{len(pairs)},{fmt(coeff)}\n")
    return results
