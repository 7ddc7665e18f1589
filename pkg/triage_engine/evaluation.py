#!/usr/bin/env python
# -*- coding:utf-8 -*-
"""Few-shot evaluation runs and their reports."""
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import pandas as pd

import triage_engine.iotasks as iotasks
from triage_engine.dataset import BASE, NOVEL, build_graph_set, load_dataset, split_dataset
from triage_engine.embedder import EmbedderParams
from triage_engine.meta_model import meta_test
from triage_engine.params import ParamHandler

log = logging.getLogger('triage_engine')

GRID_WAYS = (2, 5)
GRID_SHOTS = (1, 5)


@dataclass
class EvalReport:
    way: int
    shot: int
    query: int
    episodes: int
    mean_accuracy: float
    ci95: float
    seed: int
    config_hash: str
    degenerate_ci: bool = False
    classifier: str = 'memory'
    tau: float = 0.5
    query_blend: str = 'class'
    excluded_classes: list = field(default_factory=list)
    split: dict = field(default_factory=dict)

    def reprJSON(self) -> dict:
        return asdict(self)

    def summary(self) -> str:
        out = (f"{self.way}-way {self.shot}-shot: {100 * self.mean_accuracy:.1f} "
               f"+- {100 * self.ci95:.1f}% ({self.episodes} episodes)")
        if self.degenerate_ci:
            out += ' [single episode, no interval]'
        return out


def load_splits(root: str or Path, ph: ParamHandler) -> tuple:
    """Dataset, base GraphSet and novel GraphSet of a class tree, each split
    augmented up to AUGMENT_MIN and normalized."""
    ds = split_dataset(load_dataset(root), split_seed=ph.SPLIT_SEED)
    kwargs = dict(l=ph.SEGMENT_LEN, size=ph.GRAPH_SIZE, mean=ph.GRAPH_MEAN, std=ph.GRAPH_STD,
                  augment_min=ph.AUGMENT_MIN, seed=ph.SEED)
    base_set = build_graph_set(ds.split(BASE), **kwargs)
    novel_set = build_graph_set(ds.split(NOVEL), **kwargs) if ds.split(NOVEL) else None
    log.info(f"Split: {base_set.n_classes} base classes ({len(base_set)} graphs), "
             f"{novel_set.n_classes if novel_set else 0} novel classes")
    return ds, base_set, novel_set


def run_evaluation(params: EmbedderParams, novel_set, way: int, shot: int, episodes: int,
                   seed: int, ph: ParamHandler = None, base_set=None,
                   split: dict = None) -> EvalReport:
    """Meta-test one (way, shot) cell. base_set is only used when
    MEMORY_SEED is 'base'."""
    ph = ph or ParamHandler()
    if novel_set is None or len(novel_set) == 0:
        raise ValueError("Evaluation needs a non-empty novel split")
    t0 = time.time()
    result = meta_test(
        params, novel_set, way, shot, episodes, seed, query=ph.query_count(shot), tau=ph.TAU,
        classifier=ph.CLASSIFIER, inner_steps=ph.INNER_STEPS, task_rate=ph.TASK_RATE,
        base_set=base_set if ph.MEMORY_SEED == 'base' else None, workers=ph.WORKERS,
        float32=ph.INFERENCE_FLOAT32, query_blend=ph.QUERY_BLEND)
    report = EvalReport(
        way=way, shot=shot, query=result.query, episodes=result.episodes,
        mean_accuracy=result.mean, ci95=result.ci95, seed=seed, config_hash=ph.config_hash(),
        degenerate_ci=result.degenerate, classifier=ph.CLASSIFIER, tau=ph.TAU,
        query_blend=ph.QUERY_BLEND, excluded_classes=result.excluded, split=split or {})
    if report.degenerate_ci:
        log.warning(f"{way}-way {shot}-shot ran a single episode, its interval is degenerate")
    log.info(f"{report.summary()} in {time.time() - t0:.1f}s")
    return report


def run_grid(params: EmbedderParams, novel_set, episodes: int, seed: int,
             ph: ParamHandler = None, base_set=None, ways=GRID_WAYS, shots=GRID_SHOTS,
             split: dict = None) -> pd.DataFrame:
    """Every (way, shot) cell with its own episode count; cells asking for
    more classes than the novel split holds are skipped."""
    rows = []
    for way in ways:
        if way > novel_set.n_classes:
            log.warning(f"Skipping {way}-way cells: only {novel_set.n_classes} novel classes")
            continue
        for shot in shots:
            report = run_evaluation(params, novel_set, way, shot, episodes, seed, ph=ph,
                                    base_set=base_set, split=split)
            rows.append(report.reprJSON())
    return pd.DataFrame(rows)


def save_report(report: EvalReport or pd.DataFrame, fpath: str or Path) -> Path:
    """A single report as JSON, a grid as line-delimited JSON."""
    if isinstance(report, pd.DataFrame):
        return iotasks.write_jsonable(report.to_dict(orient='records'), fpath)
    return iotasks.write_json(report, fpath)
