"""CRF ensemble weak labeler: perturbed copies of a reference CRF vote on
each pseudo mask, and a greedy procedure re-centers the ensemble on its
best member when the vote underperforms.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from .core import BinaryMask, ImageGrid, ProbMap, dice
from .crf import CrfParams, infer

_CONTINUOUS_FIELDS = (
    "gaussian_sdims",
    "gaussian_compat",
    "bilateral_sdims",
    "bilateral_schan",
    "bilateral_compat",
)


@dataclass(frozen=True)
class PerturbSpec:
    """How far ensemble members may wander from the reference parameters."""

    relative_sigma: float = 0.05
    floor: float = 1e-3
    perturb_steps: bool = False

    def __post_init__(self):
        if not 0.0 <= self.relative_sigma < 0.5:
            raise ValueError("relative_sigma must lie in [0, 0.5) to stay sharp")
        if self.floor <= 0:
            raise ValueError("floor must be positive")


@dataclass(frozen=True)
class CrfEnsemble:
    """An odd number of CRF configurations plus the center they were drawn around."""

    members: Tuple[CrfParams, ...]
    center: CrfParams
    rng_seed: int

    def __post_init__(self):
        m = len(self.members)
        if m < 1 or m % 2 == 0:
            raise ValueError(f"ensemble size must be odd and >= 1, got {m}")


def perturb(center: CrfParams, spec: PerturbSpec, rng: np.random.Generator) -> CrfParams:
    """One member: every continuous hyperparameter drawn from a sharp normal
    around its center value and floored to stay positive."""
    fields = {}
    for name in _CONTINUOUS_FIELDS:
        c = getattr(center, name)
        fields[name] = max(spec.floor, float(rng.normal(c, spec.relative_sigma * c)))
    steps = center.steps
    if spec.perturb_steps:
        steps = max(1, int(round(rng.normal(center.steps, spec.relative_sigma * center.steps))))
    return CrfParams(steps=steps, **fields)


def build_ensemble(center: CrfParams, m: int, spec: PerturbSpec, seed: int) -> CrfEnsemble:
    """M independent perturbations, one deterministic substream per member."""
    if m < 1 or m % 2 == 0:
        raise ValueError(f"ensemble size must be odd and >= 1, got {m}")
    streams = np.random.SeedSequence(seed).spawn(m)
    members = tuple(perturb(center, spec, np.random.default_rng(s)) for s in streams)
    return CrfEnsemble(members=members, center=center, rng_seed=seed)


def majority_vote(masks: Sequence[BinaryMask]) -> BinaryMask:
    """Per-pixel label held by more than half of an odd number of masks."""
    if len(masks) % 2 == 0 or len(masks) == 0:
        raise ValueError(f"majority voting needs an odd number of masks, got {len(masks)}")
    shapes = {m.values.shape for m in masks}
    if len(shapes) != 1:
        raise ValueError(f"masks disagree in shape: {shapes}")
    counts = np.zeros(masks[0].values.shape, dtype=np.int64)
    for m in masks:
        counts += m.values
    return BinaryMask((2 * counts > len(masks)).astype(np.uint8))


def refine(ensemble: CrfEnsemble, image: ImageGrid, p: ProbMap, method: str = "windowed") -> BinaryMask:
    """Majority vote over every member's mean-field decoding of (image, p)."""
    return majority_vote([infer(image, p, member, method=method) for member in ensemble.members])


def _mean_dice(masks: Sequence[BinaryMask], truths: Sequence[BinaryMask]) -> float:
    return float(np.mean([dice(m, t) for m, t in zip(masks, truths)]))


def greedy_finetune(
    ensemble: CrfEnsemble,
    validation: Sequence[Tuple[ImageGrid, ProbMap, BinaryMask]],
    rounds: int,
    spec: PerturbSpec,
    seed: int,
    method: str = "windowed",
) -> CrfEnsemble:
    """Re-center the ensemble on its best member until the vote beats the
    mean member Dice on the validation set, for at most `rounds` rounds.

    Keep-best semantics: of all candidate ensembles evaluated, the one with
    the highest validation vote Dice is returned, so the procedure never
    regresses below the input ensemble.
    """
    if len(validation) == 0:
        raise ValueError("greedy fine-tuning needs a nonempty validation set")
    if rounds < 0:
        raise ValueError("rounds must be nonnegative")
    if rounds == 0:
        return ensemble

    truths = [gt for _, _, gt in validation]
    candidate = ensemble
    best = ensemble
    best_dice = -1.0
    for r in range(rounds):
        member_masks = [
            [infer(img, p, member, method=method) for img, p, _ in validation]
            for member in candidate.members
        ]
        member_dices = [_mean_dice(masks, truths) for masks in member_masks]
        vote_masks = [
            majority_vote([member_masks[k][i] for k in range(len(candidate.members))])
            for i in range(len(validation))
        ]
        vote_dice = _mean_dice(vote_masks, truths)
        if vote_dice > best_dice:
            best, best_dice = candidate, vote_dice
        if vote_dice >= float(np.mean(member_dices)):
            break
        new_center = candidate.members[int(np.argmax(member_dices))]
        regen_seed = int(np.random.SeedSequence([seed, r + 1]).generate_state(1)[0])
        candidate = build_ensemble(new_center, len(candidate.members), spec, regen_seed)
    return best


# ---------------------------------------------------------------------------
# snapshot format: enough to reproduce refine bit-exactly
# ---------------------------------------------------------------------------

_SNAPSHOT_MAGIC = "crf-ensemble v1"


def save_ensemble(path: str, ensemble: CrfEnsemble, spec: PerturbSpec) -> None:
    lines = [
        _SNAPSHOT_MAGIC,
        f"seed={ensemble.rng_seed}",
        f"members={len(ensemble.members)}",
        "[perturb]",
        f"relative_sigma={spec.relative_sigma!r}",
        f"floor={spec.floor!r}",
        f"perturb_steps={spec.perturb_steps}",
        "[center]",
        ensemble.center.to_text().rstrip("\n"),
    ]
    for k, member in enumerate(ensemble.members):
        lines.append(f"[member {k}]")
        lines.append(member.to_text().rstrip("\n"))
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def load_ensemble(path: str) -> Tuple[CrfEnsemble, PerturbSpec]:
    with open(path, "r", encoding="ascii") as fh:
        text = fh.read()
    lines = text.splitlines()
    if not lines or lines[0] != _SNAPSHOT_MAGIC:
        raise ValueError(f"{path}: not an ensemble snapshot")
    sections: dict[str, list[str]] = {"": []}
    current = ""
    for line in lines[1:]:
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            sections[current] = []
        else:
            sections[current].append(line)
    head = dict(l.split("=", 1) for l in sections[""] if l.strip())
    seed = int(head["seed"])
    m = int(head["members"])
    pert = dict(l.split("=", 1) for l in sections["perturb"] if l.strip())
    spec = PerturbSpec(
        relative_sigma=float(pert["relative_sigma"]),
        floor=float(pert["floor"]),
        perturb_steps=pert["perturb_steps"] == "True",
    )
    center = CrfParams.from_text("\n".join(sections["center"]))
    members = tuple(CrfParams.from_text("\n".join(sections[f"member {k}"])) for k in range(m))
    return CrfEnsemble(members=members, center=center, rng_seed=seed), spec
