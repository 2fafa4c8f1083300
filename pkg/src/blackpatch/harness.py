"""Experiment harness: many tasks, one attack configuration, metrics out.

Each image gets its own rng seed derived from the experiment seed and
the image id, and its own fresh query budget, so tasks are independent
and any single task can be reproduced in isolation. Results stream to
JSON-lines; summaries aggregate both over all images and over the
successful subset, since either denominator can be the interesting one.
"""

from __future__ import annotations

import json
import logging
import os
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np

from .attacks import (
    NON_TARGETED,
    TARGETED,
    AttackOutcome,
    AttackSpec,
    AttackTask,
    MHConfig,
    RLConfig,
    run_attack,
)
from .victim import VictimHandle, build_victim

log = logging.getLogger(__name__)


def task_seed(experiment_seed: int, image_id: str) -> int:
    """Stable per-image seed: experiment seed crossed with the image id."""
    crc = zlib.crc32(image_id.encode("utf-8"))
    return int(np.random.SeedSequence([experiment_seed, crc]).generate_state(1)[0])


def choose_target(
    rule: Union[str, int],
    true_label: int,
    num_classes: int,
    experiment_seed: int,
    image_id: str,
) -> Optional[int]:
    """Pick the target class for one task.

    "random" draws uniformly from the other classes with a per-task rng;
    an integer pins the target, and tasks whose true label equals the
    pinned target return None (caller skips them, a targeted attack on
    the true class would succeed vacuously).
    """
    if rule == "random":
        crc = zlib.crc32(image_id.encode("utf-8"))
        rng = np.random.default_rng(
            np.random.SeedSequence([experiment_seed, crc, 1])
        )
        offset = int(rng.integers(1, num_classes))
        return (true_label + offset) % num_classes
    target = int(rule)
    if target == true_label:
        return None
    return target


@dataclass
class ExperimentConfig:
    attack: AttackSpec
    seed: int = 0
    count: int = 100
    split: str = "test"
    start: int = 0
    target_rule: Union[str, int] = "random"
    results_path: Optional[str] = None


def _record(task: AttackTask, spec: AttackSpec, outcome: AttackOutcome) -> dict:
    return {
        "image_id": task.image_id,
        "variant": spec.variant,
        "mode": spec.mode,
        "success": bool(outcome.success),
        "queries": int(outcome.queries_used),
        "area_fraction": float(outcome.area_fraction),
        "patches": outcome.patches,
        "seed": int(outcome.seed),
    }


def _mean(values) -> Optional[float]:
    values = list(values)
    if not values:
        return None
    return float(np.mean(values))


def summarize(records: list[dict]) -> dict:
    """Aggregate metrics over result records of one experiment.

    Area and query averages come in two flavors: over all attacked
    images and over only the successful ones.
    """
    n = len(records)
    wins = [r for r in records if r["success"]]
    mode = records[0]["mode"] if records else None
    success_rate = len(wins) / n if n else 0.0
    summary = {
        "variant": records[0]["variant"] if records else None,
        "mode": mode,
        "count": n,
        "successes": len(wins),
        "success_rate": success_rate,
        "avg_area_all": _mean(r["area_fraction"] for r in records),
        "avg_area_success": _mean(r["area_fraction"] for r in wins),
        "avg_queries_all": _mean(r["queries"] for r in records),
        "avg_queries_success": _mean(r["queries"] for r in wins),
    }
    if mode == TARGETED:
        summary["targeted_success_pct"] = 100.0 * success_rate
    else:
        # unsuccessful non-targeted attacks leave the top-1 on the true label
        summary["post_attack_accuracy_pct"] = 100.0 * (1.0 - success_rate)
    return summary


def run_experiment(
    config: ExperimentConfig,
    handle: VictimHandle,
    dataset,
    dictionary=None,
    on_task: Optional[Callable[[AttackTask, AttackOutcome], None]] = None,
) -> tuple[dict, list[dict]]:
    """Attack `config.count` images and aggregate the outcomes.

    Returns (summary, records) and, when configured, appends each
    record to the JSON-lines results file as it completes. `on_task`
    sees every (task, outcome) pair right after it finishes, which is
    how callers audit query accounting or collect adversarial images
    without a second run.
    """
    spec = config.attack
    spec.validate()
    records: list[dict] = []
    skipped = 0
    sink = None
    if config.results_path:
        Path(config.results_path).parent.mkdir(parents=True, exist_ok=True)
        sink = open(config.results_path, "w")
    try:
        for image_id, image, label in dataset.tasks(
            config.split, config.count, config.start
        ):
            target = None
            if spec.mode == TARGETED:
                target = choose_target(
                    config.target_rule, int(label), handle.num_classes,
                    config.seed, image_id,
                )
                if target is None:
                    skipped += 1
                    log.info("skip %s: true label equals pinned target", image_id)
                    continue
            task = AttackTask(image_id, image, int(label), target)
            outcome = run_attack(
                spec, task, handle, dictionary=dictionary,
                seed=task_seed(config.seed, image_id),
            )
            rec = _record(task, spec, outcome)
            records.append(rec)
            if sink is not None:
                sink.write(json.dumps(rec) + "\n")
                sink.flush()
            if on_task is not None:
                on_task(task, outcome)
            log.info(
                "%s: success=%s queries=%d area=%.4f",
                image_id, outcome.success, outcome.queries_used,
                outcome.area_fraction,
            )
    finally:
        if sink is not None:
            sink.close()
    summary = summarize(records)
    summary["skipped"] = skipped
    summary["seed"] = config.seed
    return summary, records


def load_records(path) -> list[dict]:
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def render_table(rows: list[dict], columns: list[str]) -> str:
    """Plain fixed-width table; None renders as a dash."""

    def fmt(v):
        if v is None:
            return "-"
        if isinstance(v, float):
            return f"{v:.2f}"
        return str(v)

    cells = [[fmt(row.get(c)) for c in columns] for row in rows]
    widths = [
        max(len(col), *(len(r[i]) for r in cells)) if cells else len(col)
        for i, col in enumerate(columns)
    ]
    lines = [
        "  ".join(col.ljust(w) for col, w in zip(columns, widths)),
        "  ".join("-" * w for w in widths),
    ]
    for r in cells:
        lines.append("  ".join(v.ljust(w) for v, w in zip(r, widths)))
    return "\n".join(lines)


def report(records: list[dict]) -> str:
    """Group records by (variant, mode) and render the metrics table."""
    groups: dict[tuple, list[dict]] = {}
    for r in records:
        groups.setdefault((r["variant"], r["mode"]), []).append(r)
    rows = []
    for key in sorted(groups):
        s = summarize(groups[key])
        rows.append(
            {
                "variant": s["variant"],
                "mode": s["mode"],
                "images": s["count"],
                "success_%": 100.0 * s["success_rate"],
                "avg_area_%": None
                if s["avg_area_all"] is None
                else 100.0 * s["avg_area_all"],
                "avg_queries": s["avg_queries_all"],
                "avg_queries_success": s["avg_queries_success"],
            }
        )
    return render_table(
        rows,
        ["variant", "mode", "images", "success_%", "avg_area_%",
         "avg_queries", "avg_queries_success"],
    )


def _build_dataset(cfg: dict):
    kind = cfg.get("kind", "synthetic")
    if kind == "synthetic":
        from .data import SyntheticObjects

        return SyntheticObjects(
            num_classes=cfg.get("num_classes", 10),
            size=cfg.get("size", 32),
            seed=cfg.get("seed", 0),
        )
    if kind == "folder":
        from .data import ImageFolder

        root = os.environ.get("BLACKPATCH_DATA_ROOT") or cfg["root"]
        return ImageFolder(root, resolution=cfg.get("resolution"))
    raise ValueError(f"unknown dataset kind {kind!r}")


def _build_attack_spec(cfg: dict) -> AttackSpec:
    rl = RLConfig(**cfg.get("rl", {}))
    mh = MHConfig(**cfg.get("mh", {}))
    return AttackSpec(
        variant=cfg["variant"],
        mode=cfg.get("mode", NON_TARGETED),
        num_patches=cfg.get("num_patches", 3),
        max_patches=cfg.get("max_patches", 10),
        patch_area_pct=cfg.get("patch_area_pct", 10.0),
        budget=cfg.get("budget"),
        rl=rl,
        mh=mh,
    )


def experiment_from_config(cfg: dict):
    """Materialize (config, victim, dataset, dictionary) from plain dicts.

    This is the declarative entry the CLI uses; tests call it directly
    with parsed config mappings.
    """
    dataset = _build_dataset(cfg.get("dataset", {}))
    victim_cfg = dict(cfg.get("victim", {"adapter": "synthetic_small_cnn"}))
    adapter = victim_cfg.pop("adapter")
    handle = build_victim(adapter, **victim_cfg)
    dictionary = None
    if cfg.get("dictionary"):
        from .textures import TextureDictionary

        dictionary = TextureDictionary.load(cfg["dictionary"])
    eval_cfg = cfg.get("eval", {})
    config = ExperimentConfig(
        attack=_build_attack_spec(cfg["attack"]),
        seed=cfg.get("seed", 0),
        count=eval_cfg.get("count", 100),
        split=eval_cfg.get("split", "test"),
        start=eval_cfg.get("start", 0),
        target_rule=eval_cfg.get("target_rule", "random"),
        results_path=cfg.get("results"),
    )
    return config, handle, dataset, dictionary
