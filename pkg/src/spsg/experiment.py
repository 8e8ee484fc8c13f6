"""End-to-end pipeline: victim, query set, proxies, evaluation, reports."""
from __future__ import annotations

import csv
import hashlib
import logging
import subprocess
from contextlib import contextmanager
from importlib import metadata
from pathlib import Path

import numpy as np

from .adversarial import AttackSpec, transfer_asr
from .config import ExperimentConfig, format_config
from .datasets import load_dataset
from .estimators import train_victim
from .nn import Network, backward_input, load_network, save_network
from .oracle import QueryMode, VictimOracle
from .prada import PradaMonitor
from .proxy import StealConfig, predict_batched, steal, write_history_csv
from .sgmap import render, sg_map
from .spgq import build_query_set, load_query_set, save_query_set

log = logging.getLogger(__name__)

METRIC_FIELDS = ("model", "metric", "value", "detail")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage


@contextmanager
def _stage(name: str):
    log.info("stage %s", name)
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


def agreement(a: Network, b: Network, images) -> float:
    """Fraction of images on which both networks predict the same class."""
    images = np.asarray(images, dtype=np.float64)
    if len(images) == 0:
        raise ValueError("agreement is undefined on an empty test set")
    if a.num_classes != b.num_classes:
        raise ValueError("networks disagree on the number of classes")
    return float(np.mean(predict_batched(a, images) == predict_batched(b, images)))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def version_string() -> str:
    try:
        version = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        version = "unknown"
    try:
        described = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True,
                                   text=True, cwd=Path(__file__).parent, timeout=10).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        described = ""
    return f"{version}+{described}" if described else version


def _dataset_files(descriptor: str, root: Path) -> list[Path]:
    _, _, rest = descriptor.partition(":")
    out = []
    for part in filter(None, rest.split(",")):
        p = root / part
        out.extend(sorted(p.iterdir()) if p.is_dir() else [p])
    return out


def resolve_dataset(descriptor: str, root: Path) -> str:
    kind, _, rest = descriptor.partition(":")
    return kind + ":" + ",".join(str(root / p) for p in rest.split(",") if p)


class MetricsWriter:
    def __init__(self, path):
        self.path = Path(path)
        with open(self.path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(METRIC_FIELDS)

    def add(self, model: str, metric: str, value, detail: str = ""):
        text = "" if value is None else (str(value) if isinstance(value, (int, np.integer)) else f"{float(value):.10g}")
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow([model, metric, text, detail])


def _steal_config(config: ExperimentConfig, use_gradients: bool) -> StealConfig:
    return StealConfig(
        beta=config.beta, epsilon=config.epsilon, epochs=config.steal_epochs,
        batch_size=config.steal_batch_size, learning_rate=config.steal_learning_rate,
        momentum=config.steal_momentum, decay_factor=config.steal_decay_factor,
        decay_period=config.steal_decay_period, mode=QueryMode(config.query_mode),
        grad1_superpixel_sample=config.grad1_superpixel_sample,
        prob_loss_variant=config.prob_loss_variant, grad2_mode=config.grad2_mode,
        proxy_gradient_view=config.proxy_gradient_view, use_gradients=use_gradients, seed=config.seed)


def run_experiment(config: ExperimentConfig, out_dir, root=".") -> Path:
    """Run every stage and write the report directory; returns its path.

    Relative paths in ``config`` resolve against ``root``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    root = Path(root)
    (out / "config.txt").write_text(format_config(config))
    metrics = MetricsWriter(out / "metrics.csv")
    manifest = {"version": version_string()}
    inputs = {}

    with _stage("data"):
        data = load_dataset(resolve_dataset(config.dataset, root))
        for f in _dataset_files(config.dataset, root):
            inputs[str(f.relative_to(root) if f.is_relative_to(root) else f)] = sha256_file(f)
        train = data.subset(*config.split("victim"), "train")
        attack_set = data.subset(*config.split("attack"), "attack")
        test = data.subset(*config.split("test"), "test")

    with _stage("victim"):
        if config.victim_checkpoint:
            path = root / config.victim_checkpoint
            victim = load_network(path)
            inputs[config.victim_checkpoint] = sha256_file(path)
        else:
            victim = train_victim(config.victim_arch, train.images, train.labels, config.victim_epochs,
                                  config.victim_learning_rate, config.victim_momentum,
                                  config.victim_batch_size, config.seed)
        save_network(victim, out / "victim.spsgnet")
        victim_test = predict_batched(victim, test.images)
        metrics.add("victim", "test_accuracy", np.mean(victim_test == test.labels))

    monitor = PradaMonitor(config.prada_delta, config.prada_warmup,
                           config.prada_threshold_factor) if config.prada else None
    oracle = VictimOracle(victim, config.query_mode, monitor, config.round_decimals)

    with _stage("query-set"):
        if config.query_set:
            qs = load_query_set(root / config.query_set)
            inputs[config.query_set] = sha256_file(root / config.query_set)
        else:
            qs = build_query_set(oracle, attack_set.images, config.segmentation, config.seg_params(),
                                 config.epsilon, config.gradient_fraction, config.seed,
                                 flip_policy=config.flip_policy)
        save_query_set(qs, out / "queryset.spsgqs")
        metrics.add("attack", "queries", qs.ledger.get("total_queries", 0))
        metrics.add("attack", "gradient_images", qs.ledger.get("gradient_images", 0))

    proxies = {}
    if config.steal_epochs > 0:
        with _stage("steal"):
            arms = [("spsg", True)] + ([("baseline", False)] if config.baseline else [])
            for name, use_gradients in arms:
                proxy, history = steal(qs, config.proxy_arch, _steal_config(config, use_gradients),
                                       (test.images, test.labels, victim_test))
                write_history_csv(history, out / f"history_{name}.csv")
                save_network(proxy, out / f"proxy_{name}.spsgnet")
                proxies[name] = proxy

        with _stage("evaluate"):
            # evaluation queries use a separate, unmonitored oracle
            eval_oracle = VictimOracle(victim, config.query_mode, None, config.round_decimals)
            for name, proxy in proxies.items():
                pred = predict_batched(proxy, test.images)
                metrics.add(name, "test_accuracy", np.mean(pred == test.labels))
                metrics.add(name, "agreement", np.mean(pred == victim_test))
                for method in filter(None, config.attacks.split(",")):
                    spec = AttackSpec(method.strip(), config.attack_epsilon, config.attack_alpha,
                                      config.attack_steps, config.attack_random_start)
                    res = transfer_asr(proxy, eval_oracle, test.images, test.labels, spec, seed=config.seed)
                    detail = (f"method={spec.method};epsilon={spec.epsilon:.10g};alpha={spec.alpha:.10g};"
                              f"steps={spec.steps};random_start={int(spec.random_start)}")
                    metrics.add(name, f"asr_{spec.method}", res.asr, detail)
                    metrics.add(name, f"max_linf_{spec.method}", res.max_linf, detail)
                    metrics.add(name, f"linf_violations_{spec.method}", res.linf_violations, detail)
            manifest["evaluation_queries"] = eval_oracle.ledger.total_queries

    if monitor is not None:
        with _stage("prada"):
            monitor.report().write(out / "prada")
            metrics.add("prada", "flag_rate", monitor.flag_rate())
            metrics.add("prada", "first_flag", monitor.first_flag())

    with _stage("sgmap"):
        sg_dir = out / "sgmaps"
        sg_dir.mkdir(exist_ok=True)
        for i in range(min(config.sgmap_count, len(attack_set))):
            image = attack_set.images[i]
            label = int(victim.predict(image[None])[0])
            models = {"victim": victim, **proxies}
            for name, model in models.items():
                hm = sg_map(backward_input(model, image, label), config.sgmap_pool, str(i))
                render(hm, sg_dir / f"attack{i}_{name}.pgm")

    manifest["attack_queries"] = oracle.ledger.total_queries
    manifest["victim_fingerprint"] = victim.fingerprint()
    lines = [f"{k} = {v}" for k, v in manifest.items()]
    lines += [f"sha256 {name} = {digest}" for name, digest in sorted(inputs.items())]
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
    return out
