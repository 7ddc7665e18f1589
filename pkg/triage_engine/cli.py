#!/usr/bin/env python
# -*- coding:utf-8 -*-
"""triage-engine command line.

    triage-engine synth --out corpus/ --classes 10 --samples 40
    triage-engine pretrain --data corpus/ --out model.embd
    triage-engine meta-train --model model.embd --data corpus/ --episodes 500
    triage-engine eval --model model.embd --data corpus/ --way 5 --shot 1 --episodes 1000
    triage-engine index --model model.embd --data refs/ --out refs.idx
    triage-engine triage --model model.embd --index refs.idx --input sample.bin
    triage-engine sweep --model model.embd --index refs.idx --data test/
"""
import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd

import triage_engine.logging_ as logging_
import triage_engine.iotasks as iotasks
from triage_engine import __version__
from triage_engine.dataset import (SynthSpec, build_graph_set, extract_tree, load_dataset,
                                   load_graph, synth_dataset)
from triage_engine.embedder import embed_batch
from triage_engine.entropy_features import normalize_graph
from triage_engine.evaluation import load_splits, run_evaluation, run_grid, save_report
from triage_engine.meta_model import TrainConfig, episodic_train, init_embedder, pretrain_base
from triage_engine.params import ParamHandler
from triage_engine.triage import (index_from_graphs, load_index, plot_sweep, save_index,
                                  threshold_sweep, triage_sample)

log = logging.getLogger('triage_engine')

EXIT_OK = 0
EXIT_INVALID = 2
# argparse dest -> parameter name
OVERRIDES = {
    'seed': 'SEED', 'segment_len': 'SEGMENT_LEN', 'augment_min': 'AUGMENT_MIN',
    'epochs': 'EPOCHS', 'episodes': 'EPISODES', 'lr': 'LEARNING_RATE', 'tau': 'TAU',
    'way': 'WAY', 'shot': 'SHOT', 'memory_seed': 'MEMORY_SEED', 'classifier': 'CLASSIFIER',
    'inner_steps': 'INNER_STEPS', 'query_blend': 'QUERY_BLEND', 'split_seed': 'SPLIT_SEED',
    'workers': 'WORKERS',
    'k': 'TRIAGE_K', 'threshold': 'TRIAGE_THRESHOLD', 'ratio_source': 'RATIO_SOURCE',
    'lime_lambda': 'LIME_LAMBDA', 'thresholds': 'SWEEP_THRESHOLDS',
}


def float_list(raw: str) -> list:
    return [float(x) for x in raw.split(',') if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='key=value parameter file', default=None)
    common.add_argument('--seed', type=int, default=None, help='Global seed')
    common.add_argument('--verbose', '-v', action='store_true', help='Debug logging')

    parser = argparse.ArgumentParser(prog='triage-engine',
                                     description='Few-shot malware triage on entropy graphs')
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    sub = parser.add_subparsers(dest='action', required=True)

    p = sub.add_parser('extract', parents=[common], help='Binaries to entropy graphs')
    p.add_argument('--input', required=True, help='File, flat folder or class tree')
    p.add_argument('--out', required=True, help='Output folder of .entg graphs')
    p.add_argument('--segment-len', type=int, default=None)
    p.add_argument('--augment-min', type=int, default=None)

    p = sub.add_parser('synth', parents=[common], help='Write a synthetic corpus')
    p.add_argument('--out', required=True)
    p.add_argument('--classes', type=int, default=10)
    p.add_argument('--samples', type=int, default=40)
    p.add_argument('--segment-len', type=int, default=None)

    p = sub.add_parser('pretrain', parents=[common], help='Train the embedder on base classes')
    p.add_argument('--data', required=True, help='Class tree root')
    p.add_argument('--out', required=True, help='Checkpoint to write')
    p.add_argument('--epochs', type=int, default=None)
    p.add_argument('--lr', type=float, default=None)
    p.add_argument('--split-seed', type=int, default=None)
    p.add_argument('--losses', default=None, help='CSV of per-epoch losses')

    p = sub.add_parser('meta-train', parents=[common], help='Episodic training of the last block')
    p.add_argument('--model', required=True)
    p.add_argument('--data', required=True)
    p.add_argument('--out', default=None, help='Checkpoint to write (default: --model)')
    p.add_argument('--episodes', type=int, default=None)
    p.add_argument('--way', type=int, default=None)
    p.add_argument('--shot', type=int, default=None)
    p.add_argument('--tau', type=float, default=None)
    p.add_argument('--query-blend', choices=['class', 'readout'], default=None)
    p.add_argument('--split-seed', type=int, default=None)

    p = sub.add_parser('eval', parents=[common], help='Few-shot accuracy on novel classes')
    p.add_argument('--model', required=True)
    p.add_argument('--data', required=True)
    p.add_argument('--way', type=int, default=None)
    p.add_argument('--shot', type=int, default=None)
    p.add_argument('--episodes', type=int, default=None)
    p.add_argument('--tau', type=float, default=None)
    p.add_argument('--query-blend', choices=['class', 'readout'], default=None)
    p.add_argument('--memory-seed', choices=['episode', 'base'], default=None)
    p.add_argument('--classifier', choices=['memory', 'head'], default=None)
    p.add_argument('--inner-steps', type=int, default=None)
    p.add_argument('--split-seed', type=int, default=None)
    p.add_argument('--workers', type=int, default=None)
    p.add_argument('--grid', action='store_true', help='All of 2/5-way x 1/5-shot')
    p.add_argument('--report', default=None)
    p.add_argument('--dump-embeddings', default=None, help='CSV of novel embeddings')

    p = sub.add_parser('index', parents=[common], help='Build the reference index')
    p.add_argument('--model', required=True)
    p.add_argument('--data', required=True, help='Class tree of labelled references')
    p.add_argument('--out', required=True)
    p.add_argument('--dump-embeddings', default=None)

    p = sub.add_parser('triage', parents=[common], help='Verdicts for new samples')
    p.add_argument('--model', required=True)
    p.add_argument('--index', required=True)
    p.add_argument('--input', required=True, help='File or folder of samples')
    p.add_argument('--k', type=int, default=None)
    p.add_argument('--threshold', type=float, default=None)
    p.add_argument('--ratio-source', choices=['rank', 'lime'], default=None)
    p.add_argument('--lime-lambda', type=float, default=None)
    p.add_argument('--report', default=None, help='Line-delimited JSON verdicts')

    p = sub.add_parser('sweep', parents=[common], help='Classified / risk-pool trade-off')
    p.add_argument('--model', required=True)
    p.add_argument('--index', required=True)
    p.add_argument('--data', required=True, help='Labelled test tree')
    p.add_argument('--k', type=int, default=None)
    p.add_argument('--thresholds', type=float_list, default=None)
    p.add_argument('--ratio-source', choices=['rank', 'lime'], default=None)
    p.add_argument('--report', default=None, help='CSV table')
    p.add_argument('--plot', default=None, help='PNG figure')
    return parser


def make_params(args) -> ParamHandler:
    overrides = {key: getattr(args, dest, None) for dest, key in OVERRIDES.items()}
    return ParamHandler(config_file=args.config, overrides=overrides)


def graph_files(path: Path) -> list:
    if path.is_file():
        return [path]
    if not path.is_dir():
        raise FileNotFoundError(f"Input not found: {path}")
    return sorted(p for p in path.rglob('*') if p.is_file() and not p.name.startswith('.'))


def normalized_graph(fpath: Path, ph: ParamHandler):
    graph = load_graph(fpath, l=ph.SEGMENT_LEN, size=ph.GRAPH_SIZE)
    return graph if graph.normalized else normalize_graph(graph, ph.GRAPH_MEAN, ph.GRAPH_STD)


def cmd_extract(args, ph: ParamHandler) -> None:
    augment_min = ph.AUGMENT_MIN if args.augment_min is not None else 0
    n = extract_tree(args.input, args.out, l=ph.SEGMENT_LEN, size=ph.GRAPH_SIZE,
                     augment_min=augment_min, seed=ph.SEED)
    log.info(f"Extracted {n} graphs to {args.out}")


def cmd_synth(args, ph: ParamHandler) -> None:
    spec = SynthSpec(n_classes=args.classes, samples_per_class=args.samples,
                     segment_len=ph.SEGMENT_LEN, seed=ph.SEED)
    synth_dataset(spec, args.out)


def cmd_pretrain(args, ph: ParamHandler) -> None:
    _, base_set, _ = load_splits(args.data, ph)
    config = TrainConfig.from_params(ph)
    params = init_embedder(config, n_classes=base_set.n_classes)
    params, losses = pretrain_base(params, base_set, config)
    iotasks.save_checkpoint(params, args.out)
    if args.losses:
        pd.DataFrame({'epoch': np.arange(1, len(losses) + 1), 'loss': losses}).to_csv(
            args.losses, index=False)


def cmd_meta_train(args, ph: ParamHandler) -> None:
    params = iotasks.load_checkpoint(args.model)
    _, base_set, _ = load_splits(args.data, ph)
    params, _ = episodic_train(params, base_set, TrainConfig.from_params(ph))
    iotasks.save_checkpoint(params, args.out or args.model)


def cmd_eval(args, ph: ParamHandler) -> None:
    params = iotasks.load_checkpoint(args.model)
    ds, base_set, novel_set = load_splits(args.data, ph)
    if novel_set is None:
        raise ValueError(f"{args.data} has no novel classes to evaluate on")
    split = ds.reprJSON()['splits']
    if args.grid:
        report = run_grid(params, novel_set, ph.EPISODES, ph.SEED, ph=ph, base_set=base_set,
                          split=split)
        log.info('\n' + report[['way', 'shot', 'mean_accuracy', 'ci95']].to_string(index=False))
    else:
        report = run_evaluation(params, novel_set, ph.WAY, ph.SHOT, ph.EPISODES, ph.SEED,
                                ph=ph, base_set=base_set, split=split)
    if args.report:
        save_report(report, args.report)
    if args.dump_embeddings:
        iotasks.dump_embeddings(novel_set.sample_ids, novel_set.y,
                                embed_batch(params, novel_set.X), args.dump_embeddings)


def cmd_index(args, ph: ParamHandler) -> None:
    params = iotasks.load_checkpoint(args.model)
    ds = load_dataset(args.data)
    refs = build_graph_set(ds.classes, l=ph.SEGMENT_LEN, size=ph.GRAPH_SIZE,
                           mean=ph.GRAPH_MEAN, std=ph.GRAPH_STD)
    index = index_from_graphs(params, refs, float32=ph.INFERENCE_FLOAT32)
    save_index(index, args.out)
    if args.dump_embeddings:
        iotasks.dump_embeddings(refs.sample_ids, refs.y, embed_batch(params, refs.X),
                                args.dump_embeddings)


def cmd_triage(args, ph: ParamHandler) -> None:
    params = iotasks.load_checkpoint(args.model)
    index = load_index(args.index)
    decisions = []
    for fpath in graph_files(Path(args.input)):
        dec = triage_sample(params, index, normalized_graph(fpath, ph), k=ph.TRIAGE_K,
                            threshold=ph.TRIAGE_THRESHOLD, ratio_source=ph.RATIO_SOURCE,
                            lam=ph.LIME_LAMBDA, printed_sign=ph.LIME_PRINTED_SIGN,
                            float32=ph.INFERENCE_FLOAT32)
        best = max(dec.ratios.values()) if dec.ratios else 0
        log.info(f"{fpath.name}: {dec.verdict_name} (best ratio {float(best):.3f})")
        decisions.append(dec)
    if args.report:
        iotasks.write_jsonable(decisions, args.report)


def cmd_sweep(args, ph: ParamHandler) -> None:
    params = iotasks.load_checkpoint(args.model)
    index = load_index(args.index)
    ds = load_dataset(args.data)
    test_set = build_graph_set(ds.classes, l=ph.SEGMENT_LEN, size=ph.GRAPH_SIZE,
                               mean=ph.GRAPH_MEAN, std=ph.GRAPH_STD)
    df = threshold_sweep(params, index, test_set, thresholds=ph.SWEEP_THRESHOLDS,
                         k=ph.TRIAGE_K, ratio_source=ph.RATIO_SOURCE, lam=ph.LIME_LAMBDA,
                         float32=ph.INFERENCE_FLOAT32)
    df['config_hash'] = ph.config_hash()
    if args.report:
        df.to_csv(args.report, index=False)
    if args.plot:
        import matplotlib
        matplotlib.use('Agg')
        ax = plot_sweep(df)
        ax.figure.savefig(args.plot)


COMMANDS = {
    'extract': cmd_extract,
    'synth': cmd_synth,
    'pretrain': cmd_pretrain,
    'meta-train': cmd_meta_train,
    'eval': cmd_eval,
    'index': cmd_index,
    'triage': cmd_triage,
    'sweep': cmd_sweep,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging_.set_level(logging.DEBUG if args.verbose else logging.INFO)
    try:
        ph = make_params(args)
        ph.display_logs()
        COMMANDS[args.action](args, ph)
    except (ValueError, RuntimeError, OSError) as e:
        log.error(f"##########\n{args.action} failed: {e}\n##########")
        return EXIT_INVALID
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
