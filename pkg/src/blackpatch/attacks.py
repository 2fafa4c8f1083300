"""Attack orchestration: RL-searched and MH-searched patch attacks.

Six variants share one protocol: render candidate patches, batch-query
the victim, score with the log-probability reward minus an optional
area penalty, and stop on the first misclassifying candidate, budget
exhaustion, flat rewards, or an iteration cap. Failed attacks still
report their best candidate so area and query statistics stay
computable across a whole evaluation run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from . import geometry
from .errors import BudgetExceeded
from .geometry import (
    Region,
    SearchSpaceSpec,
    actions_to_colors,
    actions_to_placements,
    actions_to_regions,
    describe_monochrome,
    describe_placements,
    mono_space,
    patch_side_for_area,
    placements_region,
    region_area,
    rgb_space,
    texture_space,
)
from .rl import (
    MetropolisHastings,
    PolicyAgent,
    reinforce_update,
    sample_episode,
    should_stop_early,
)
from .victim import MeteredVictim, QueryLedger, VictimHandle

RL_GRAY = "rl_gray"
RL_RGB = "rl_rgb"
RL_TEXTURE = "rl_texture"
MH_GRAY = "mh_gray"
MH_RGB = "mh_rgb"
MH_TEXTURE = "mh_texture"
VARIANTS = (RL_GRAY, RL_RGB, RL_TEXTURE, MH_GRAY, MH_RGB, MH_TEXTURE)

TARGETED = "targeted"
NON_TARGETED = "non-targeted"


@dataclass
class RLConfig:
    rollouts_per_iter: int = 16
    learning_rate: float = 0.03
    max_iters: int = 0  # 0: bounded only by budget and early stopping
    early_stop_window: int = 3
    early_stop_tol: float = 1e-4
    sigma: float = 0.1
    score_floor: float = 1e-12
    embed_dim: int = 32
    hidden_size: int = 128


@dataclass
class MHConfig:
    temperature: float = 0.1
    step_fraction: float = 0.1


@dataclass
class AttackSpec:
    """Which attack to run and with what knobs.

    num_patches is the fixed rectangle count of the gray/RGB variants;
    max_patches bounds the sequential texture attack (and sizes the MH
    texture space). budget defaults to 10000 for non-targeted runs and
    50000 for targeted ones when left unset.
    """

    variant: str
    mode: str = NON_TARGETED
    num_patches: int = 3
    max_patches: int = 10
    patch_area_pct: float = 10.0
    budget: Optional[int] = None
    rl: RLConfig = field(default_factory=RLConfig)
    mh: MHConfig = field(default_factory=MHConfig)

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.mode not in (TARGETED, NON_TARGETED):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.num_patches < 1 or self.max_patches < 1:
            raise ValueError("patch counts must be positive")
        if not 0 < self.patch_area_pct <= 100:
            raise ValueError("patch_area_pct must be in (0, 100]")

    @property
    def is_texture(self) -> bool:
        return self.variant in (RL_TEXTURE, MH_TEXTURE)

    def resolved_budget(self) -> int:
        if self.budget is not None:
            return self.budget
        return 50000 if self.mode == TARGETED else 10000


@dataclass
class AttackTask:
    """One image to attack, with its ground truth and optional target."""

    image_id: str
    image: np.ndarray  # float32 HWC in [0, 1]
    true_label: int
    target_label: Optional[int] = None

    @property
    def targeted(self) -> bool:
        return self.target_label is not None


def compute_reward(
    scores: np.ndarray,
    task: AttackTask,
    area_fraction: float,
    cfg: RLConfig,
    penalize_area: bool,
) -> float:
    """Log-probability objective with an optional occlusion penalty.

    Targeted: ln(score[target]); non-targeted: ln(1 - score[true]).
    Both are floored at cfg.score_floor so saturated victims cannot
    produce -inf. The penalty is area_fraction / sigma^2 when enabled.
    """
    if task.targeted:
        gain = math.log(max(float(scores[task.target_label]), cfg.score_floor))
    else:
        gain = math.log(max(1.0 - float(scores[task.true_label]), cfg.score_floor))
    penalty = area_fraction / (cfg.sigma ** 2) if penalize_area else 0.0
    return gain - penalty


def is_success(scores: np.ndarray, task: AttackTask) -> bool:
    top = int(np.argmax(scores))
    if task.targeted:
        return top == task.target_label
    return top != task.true_label


@dataclass
class Candidate:
    """One rendered and scored patch configuration."""

    reward: float
    actions: list[int]
    image: np.ndarray
    scores: np.ndarray
    area_fraction: float
    patches: list[dict]


@dataclass
class AttackOutcome:
    success: bool
    adversarial_image: np.ndarray
    queries_used: int
    area_fraction: float
    patches: list[dict]
    final_scores: np.ndarray
    reward_trace: list[float]
    best_reward: float
    stop_reason: str
    seed: int = 0


Renderer = Callable[[Sequence[int]], tuple[np.ndarray, float, list[dict]]]


def _rl_search(
    task: AttackTask,
    victim: MeteredVictim,
    cfg: RLConfig,
    space: SearchSpaceSpec,
    render: Renderer,
    penalize_area: bool,
    generator: torch.Generator,
):
    """Train one policy on one space until something ends the search.

    Returns (best candidate, successful candidate or None, stop reason,
    per-iteration mean rewards, episodes of the best iteration). The
    best candidate is tracked over every query ever made, so it is
    meaningful even when the search ends on a budget error.
    """
    agent = PolicyAgent(
        space.cardinalities,
        cfg.embed_dim,
        cfg.hidden_size,
        generator=generator,
        learning_rate=cfg.learning_rate,
    )
    trace: list[float] = []
    best: Optional[Candidate] = None
    iters = 0
    while True:
        episodes = []
        images = []
        metas = []
        for _ in range(cfg.rollouts_per_iter):
            ep = sample_episode(agent, generator)
            image, frac, patches = render(ep.actions)
            episodes.append(ep)
            images.append(image)
            metas.append((frac, patches))
        try:
            scores = victim.scores(np.stack(images))
        except BudgetExceeded:
            return best, None, "budget", trace
        winners = []
        for i, ep in enumerate(episodes):
            frac, patches = metas[i]
            ep.reward = compute_reward(scores[i], task, frac, cfg, penalize_area)
            cand = Candidate(
                ep.reward, list(ep.actions), images[i], scores[i], frac, patches
            )
            if best is None or ep.reward > best.reward:
                best = cand
            if is_success(scores[i], task):
                winners.append(cand)
        trace.append(sum(e.reward for e in episodes) / len(episodes))
        if winners:
            hit = max(winners, key=lambda c: c.reward)
            return best, hit, "success", trace
        iters += 1
        if cfg.max_iters and iters >= cfg.max_iters:
            return best, None, "max_iters", trace
        if should_stop_early(trace, cfg.early_stop_window, cfg.early_stop_tol):
            return best, None, "early_stop", trace
        reinforce_update(agent, episodes)


def _outcome(
    success: bool,
    cand: Candidate,
    ledger: QueryLedger,
    trace: list[float],
    best_reward: float,
    reason: str,
) -> AttackOutcome:
    return AttackOutcome(
        success=success,
        adversarial_image=cand.image,
        queries_used=ledger.used,
        area_fraction=cand.area_fraction,
        patches=cand.patches,
        final_scores=cand.scores,
        reward_trace=trace,
        best_reward=best_reward,
        stop_reason=reason,
    )


def _never_scored(task: AttackTask, victim: MeteredVictim) -> Candidate:
    """Stand-in when the budget dies before a single query ran.

    The clean image with no patches; scores are NaN because the victim
    was never consulted about anything.
    """
    return Candidate(
        -math.inf,
        [],
        task.image,
        np.full(victim.num_classes, np.nan, dtype=np.float32),
        0.0,
        [],
    )


def _rect_renderer(
    task: AttackTask, space: SearchSpaceSpec, fill: Optional[np.ndarray]
) -> Renderer:
    """Monochrome rectangles: fixed gray fill, or per-patch RGB colors."""

    def render(actions):
        region = actions_to_regions(actions, space)
        if fill is not None:
            image = geometry.apply_monochrome(task.image, region, fill)
            colors = fill
        else:
            colors = actions_to_colors(actions, space)
            image = task.image
            for rect, color in zip(region.rects, colors):
                one = Region(space.height, space.width, (rect,))
                image = geometry.apply_monochrome(image, one, color)
        _, frac = region_area(region)
        return image, frac, describe_monochrome(region, colors)

    return render


def _texture_categories(task: AttackTask, dictionary) -> tuple[Optional[int], tuple]:
    """Targeted runs paste target-class textures; non-targeted ones pick
    from every category except the true label."""
    if task.targeted:
        return int(task.target_label), ()
    pool = tuple(c for c in dictionary.categories() if c != task.true_label)
    if not pool:
        raise ValueError("dictionary holds no category other than the true label")
    return None, pool


def _texture_space_for(
    task: AttackTask, spec: AttackSpec, dictionary, num_patches: int
) -> SearchSpaceSpec:
    h, w = task.image.shape[:2]
    side = patch_side_for_area(spec.patch_area_pct, h, w)
    fixed, pool = _texture_categories(task, dictionary)
    counts = {dictionary.size(c) for c in (pool if pool else (fixed,))}
    if len(counts) != 1:
        raise ValueError(f"uneven texture counts per category: {sorted(counts)}")
    return texture_space(
        h,
        w,
        side,
        dictionary.resolution,
        num_patches=num_patches,
        texture_count=counts.pop(),
        fixed_category=fixed,
        category_pool=pool,
    )


def _run_rl_rects(task, victim, spec, ledger, generator) -> AttackOutcome:
    h, w = task.image.shape[:2]
    if spec.variant == RL_GRAY:
        space = mono_space(spec.num_patches, h, w)
        fill = np.asarray(victim.handle.mean, dtype=np.float32)
    else:
        space = rgb_space(spec.num_patches, h, w)
        fill = None
    render = _rect_renderer(task, space, fill)
    best, hit, reason, trace = _rl_search(
        task, victim, spec.rl, space, render, penalize_area=True,
        generator=generator,
    )
    if hit is not None:
        return _outcome(True, hit, ledger, trace, best.reward, reason)
    if best is None:
        best = _never_scored(task, victim)
    return _outcome(False, best, ledger, trace, best.reward, reason)


def _run_rl_texture(task, victim, spec, ledger, generator, dictionary) -> AttackOutcome:
    h, w = task.image.shape[:2]
    space = _texture_space_for(task, spec, dictionary, num_patches=1)
    committed: list = []
    base = task.image
    overall_best: Optional[Candidate] = None
    trace: list[float] = []
    reason = "max_patches"
    for _ in range(spec.max_patches):
        base_for_agent = base

        def render(actions, _base=base_for_agent):
            new = actions_to_placements(actions, space)
            image = geometry.apply_texture(_base, new, dictionary)
            region = placements_region(committed + new, h, w)
            _, frac = region_area(region)
            return image, frac, describe_placements(committed + new)

        best, hit, agent_reason, agent_trace = _rl_search(
            task, victim, spec.rl, space, render, penalize_area=False,
            generator=generator,
        )
        trace.extend(agent_trace)
        if best is not None and (
            overall_best is None or best.reward > overall_best.reward
        ):
            overall_best = best
        if hit is not None:
            return _outcome(True, hit, ledger, trace, overall_best.reward, "success")
        if agent_reason == "budget":
            reason = "budget"
            break
        # commit this agent's best placement and search for one more
        new = actions_to_placements(best.actions, space)
        committed.extend(new)
        base = geometry.apply_texture(base, new, dictionary)
    if overall_best is None:
        overall_best = _never_scored(task, victim)
    return _outcome(False, overall_best, ledger, trace, overall_best.reward, reason)


class _SearchDone(Exception):
    pass


def _run_mh(task, victim, spec, ledger, rng, dictionary) -> AttackOutcome:
    if spec.variant == MH_TEXTURE:
        return _run_mh_texture(task, victim, spec, ledger, rng, dictionary)
    h, w = task.image.shape[:2]
    if spec.variant == MH_GRAY:
        space = mono_space(spec.num_patches, h, w)
        render = _rect_renderer(task, space, np.asarray(victim.handle.mean,
                                                        dtype=np.float32))
    else:
        space = rgb_space(spec.num_patches, h, w)
        render = _rect_renderer(task, space, None)

    sampler = MetropolisHastings(
        space.cardinalities, rng, spec.mh.temperature, spec.mh.step_fraction
    )
    best: Optional[Candidate] = None
    hit: Optional[Candidate] = None
    trace: list[float] = []

    def evaluate(actions):
        nonlocal best, hit
        image, frac, patches = render(actions)
        scores = victim.scores(image)[0]
        r = compute_reward(scores, task, frac, spec.rl, penalize_area=True)
        trace.append(r)
        cand = Candidate(r, list(actions), image, scores, frac, patches)
        if best is None or r > best.reward:
            best = cand
        if is_success(scores, task):
            hit = cand
            raise _SearchDone
        return r

    reason = "budget"
    while True:
        try:
            sampler.step(evaluate)
        except BudgetExceeded:
            break
        except _SearchDone:
            reason = "success"
            break
    if hit is not None:
        return _outcome(True, hit, ledger, trace, best.reward, reason)
    if best is None:
        best = _never_scored(task, victim)
    return _outcome(False, best, ledger, trace, best.reward, reason)


def _run_mh_texture(task, victim, spec, ledger, rng, dictionary) -> AttackOutcome:
    """Chain-per-patch sampling in the textured-square space.

    The query budget is split evenly across the max_patches patch
    slots. Each slot runs one chain over a single patch on top of
    everything committed so far, commits its best placement when its
    slice is spent, and hands over to the next slot. A single joint
    chain over all N patches would occlude far more area per sample
    than the sequential process this baseline is compared against.
    """
    h, w = task.image.shape[:2]
    space = _texture_space_for(task, spec, dictionary, num_patches=1)
    slice_budget = max(1, spec.resolved_budget() // spec.max_patches)
    committed: list = []
    base = task.image
    overall: Optional[Candidate] = None
    hit: Optional[Candidate] = None
    trace: list[float] = []
    reason = "max_patches"

    for _ in range(spec.max_patches):
        spent = 0
        base_now = base

        def evaluate(actions, _base=base_now):
            nonlocal spent, overall, hit
            new = actions_to_placements(actions, space)
            image = geometry.apply_texture(_base, new, dictionary)
            _, frac = region_area(placements_region(committed + new, h, w))
            patches = describe_placements(committed + new)
            scores = victim.scores(image)[0]
            spent += 1
            r = compute_reward(scores, task, frac, spec.rl, penalize_area=False)
            trace.append(r)
            cand = Candidate(r, list(actions), image, scores, frac, patches)
            if overall is None or r > overall.reward:
                overall = cand
            if is_success(scores, task):
                hit = cand
                raise _SearchDone
            return r

        sampler = MetropolisHastings(
            space.cardinalities, rng, spec.mh.temperature, spec.mh.step_fraction
        )
        done = False
        while not done and spent < slice_budget:
            try:
                sampler.step(evaluate)
            except BudgetExceeded:
                reason = "budget"
                done = True
            except _SearchDone:
                reason = "success"
                done = True
        if done:
            break
        new = actions_to_placements(sampler.best, space)
        committed.extend(new)
        base = geometry.apply_texture(base, new, dictionary)

    if hit is not None:
        return _outcome(True, hit, ledger, trace, overall.reward, reason)
    if overall is None:
        overall = _never_scored(task, victim)
    return _outcome(False, overall, ledger, trace, overall.reward, reason)


def run_attack(
    spec: AttackSpec,
    task: AttackTask,
    handle: VictimHandle,
    dictionary=None,
    seed: int = 0,
) -> AttackOutcome:
    """Run one attack on one image under a fresh query budget.

    All randomness (policy init, sampling, MH proposals) derives from
    `seed`, so rerunning with the same inputs reproduces the outcome
    bit for bit on the same software stack.
    """
    spec.validate()
    if spec.mode == TARGETED and not task.targeted:
        raise ValueError("targeted mode requires task.target_label")
    if spec.mode == NON_TARGETED and task.targeted:
        raise ValueError("non-targeted mode forbids task.target_label")
    if spec.is_texture and dictionary is None:
        raise ValueError(f"{spec.variant} needs a texture dictionary")
    if task.image.shape[:2] != handle.input_size or task.image.shape[2] != 3:
        raise ValueError(
            f"task image {task.image.shape} does not fit victim "
            f"{handle.input_size}"
        )
    ledger = QueryLedger(spec.resolved_budget())
    victim = MeteredVictim(handle, ledger)
    state = np.random.SeedSequence(seed).generate_state(2)
    generator = torch.Generator()
    generator.manual_seed(int(state[0]))
    rng = np.random.default_rng(int(state[1]))

    if spec.variant in (RL_GRAY, RL_RGB):
        outcome = _run_rl_rects(task, victim, spec, ledger, generator)
    elif spec.variant == RL_TEXTURE:
        outcome = _run_rl_texture(task, victim, spec, ledger, generator, dictionary)
    else:
        outcome = _run_mh(task, victim, spec, ledger, rng, dictionary)
    outcome.seed = seed
    return outcome
