"""Command line entry point: ``spsg <command> [--config PATH] [--seed N] [--out DIR]``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .adversarial import AttackSpec, transfer_asr
from .config import ExperimentConfig, format_config, load_config
from .datasets import load_dataset
from .estimators import train_victim
from .experiment import MetricsWriter, StageError, _steal_config, resolve_dataset, run_experiment
from .nn import backward_input, load_network, save_network
from .oracle import VictimOracle
from .prada import PradaMonitor, replay_query_set
from .proxy import predict_batched, steal, write_history_csv
from .sgmap import render, sg_map
from .spgq import build_query_set, load_query_set, save_query_set


def _config(args) -> ExperimentConfig:
    config = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        config = config.replace(seed=args.seed)
    return config


def _root(args) -> Path:
    return Path(args.config).resolve().parent if args.config and args.relative_to_config else Path.cwd()


def _splits(config, root):
    data = load_dataset(resolve_dataset(config.dataset, root))
    return {name: data.subset(*config.split(name), name) for name in ("victim", "attack", "test")}


def _victim(args, config, root):
    path = args.victim or (str(root / config.victim_checkpoint) if config.victim_checkpoint else None)
    if path is None:
        raise SystemExit("a victim checkpoint is required (--victim or victim_checkpoint in the config)")
    return load_network(path)


def cmd_train_victim(args, config, root, out):
    s = _splits(config, root)
    net = train_victim(config.victim_arch, s["victim"].images, s["victim"].labels, config.victim_epochs,
                       config.victim_learning_rate, config.victim_momentum, config.victim_batch_size,
                       config.seed)
    save_network(net, out / "victim.spsgnet")
    acc = float(np.mean(predict_batched(net, s["test"].images) == s["test"].labels))
    MetricsWriter(out / "metrics.csv").add("victim", "test_accuracy", acc)
    print(f"victim test accuracy {acc:.4f} -> {out / 'victim.spsgnet'}")


def cmd_build_queryset(args, config, root, out):
    victim = _victim(args, config, root)
    monitor = PradaMonitor(config.prada_delta, config.prada_warmup, config.prada_threshold_factor) \
        if config.prada else None
    oracle = VictimOracle(victim, config.query_mode, monitor, config.round_decimals)
    images = _splits(config, root)["attack"].images
    qs = build_query_set(oracle, images, config.segmentation, config.seg_params(), config.epsilon,
                         config.gradient_fraction, config.seed, flip_policy=config.flip_policy)
    save_query_set(qs, out / "queryset.spsgqs")
    if monitor is not None:
        monitor.report().write(out / "prada")
    print(f"{len(qs)} records, {qs.ledger['total_queries']} queries -> {out / 'queryset.spsgqs'}")


def cmd_steal(args, config, root, out):
    qs = load_query_set(args.query_set or out / "queryset.spsgqs")
    test = _splits(config, root)["test"]
    victim_labels = predict_batched(_victim(args, config, root), test.images) if (
        args.victim or config.victim_checkpoint) else None
    arms = [("spsg", True)] + ([("baseline", False)] if config.baseline else [])
    for name, use_gradients in arms:
        proxy, history = steal(qs, config.proxy_arch, _steal_config(config, use_gradients),
                               (test.images, test.labels, victim_labels))
        save_network(proxy, out / f"proxy_{name}.spsgnet")
        write_history_csv(history, out / f"history_{name}.csv")
        print(f"{name}: final train loss {history[-1]['train_loss']:.4f}" if history else f"{name}: no epochs")


def cmd_evaluate(args, config, root, out):
    victim = _victim(args, config, root)
    proxy = load_network(args.proxy)
    test = _splits(config, root)["test"]
    oracle = VictimOracle(victim, config.query_mode, None, config.round_decimals)
    victim_pred = predict_batched(victim, test.images)
    pred = predict_batched(proxy, test.images)
    metrics = MetricsWriter(out / "evaluation.csv")
    metrics.add("proxy", "test_accuracy", np.mean(pred == test.labels))
    metrics.add("proxy", "agreement", np.mean(pred == victim_pred))
    for method in filter(None, config.attacks.split(",")):
        spec = AttackSpec(method.strip(), config.attack_epsilon, config.attack_alpha,
                          config.attack_steps, config.attack_random_start)
        res = transfer_asr(proxy, oracle, test.images, test.labels, spec, seed=config.seed)
        metrics.add("proxy", f"asr_{spec.method}", res.asr)
    print((out / "evaluation.csv").read_text(), end="")


def cmd_sgmap(args, config, root, out):
    model = load_network(args.model)
    images = _splits(config, root)["attack"].images
    for i in args.index:
        label = int(model.predict(images[i][None])[0])
        path = render(sg_map(backward_input(model, images[i], label), config.sgmap_pool, str(i)),
                      out / f"sgmap_{i}.{'ppm' if args.color else 'pgm'}", color=args.color)
        print(path)


def cmd_prada_report(args, config, root, out):
    qs = load_query_set(args.query_set or out / "queryset.spsgqs")
    monitor = replay_query_set(PradaMonitor(config.prada_delta, config.prada_warmup,
                                            config.prada_threshold_factor), qs)
    monitor.report().write(out / "prada")
    print(f"observations {monitor.n_observed}, first flag {monitor.first_flag()}, "
          f"post-warmup flag rate {monitor.flag_rate():.4f}")


def cmd_run(args, config, root, out):
    run_experiment(config, out, root)
    print((out / "metrics.csv").read_text(), end="")


COMMANDS = {
    "train-victim": cmd_train_victim,
    "build-queryset": cmd_build_queryset,
    "steal": cmd_steal,
    "evaluate": cmd_evaluate,
    "sgmap": cmd_sgmap,
    "prada-report": cmd_prada_report,
    "run": cmd_run,
}


HELP = {
    "train-victim": "train the victim and report its test accuracy",
    "build-queryset": "query the victim for superpixel gradients",
    "steal": "train a proxy from a query set",
    "evaluate": "agreement and transfer attack success of a proxy",
    "sgmap": "render gradient heatmaps for attack images",
    "prada-report": "replay a query set through the detector",
    "run": "the whole pipeline, one stage after another",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", default="runs/default", help="output directory")
    common.add_argument("--relative-to-config", action="store_true",
                        help="resolve relative paths against the config file's directory")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="spsg", description="superpixel gradient model stealing")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common], help=HELP[name])
        if name in ("build-queryset", "steal", "evaluate"):
            p.add_argument("--victim", help="victim checkpoint (SPSGNET1)")
        if name in ("steal", "prada-report"):
            p.add_argument("--query-set", help="query set file (SPSGQS1)")
        if name == "evaluate":
            p.add_argument("--proxy", required=True, help="proxy checkpoint")
        if name == "sgmap":
            p.add_argument("--model", required=True, help="network checkpoint")
            p.add_argument("--index", type=int, nargs="+", default=[0], help="attack-split image indices")
            p.add_argument("--color", action="store_true", help="write a colour PPM")
    sub.add_parser("print-config", parents=[common], help="show the effective config")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)  # keeps float reductions reproducible run to run
    config = _config(args)
    if args.command == "print-config":
        print(format_config(config), end="")
        return 0
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        COMMANDS[args.command](args, config, _root(args), out)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
