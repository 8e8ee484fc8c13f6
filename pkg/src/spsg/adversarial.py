"""Untargeted L-inf attacks (FGSM, BIM, PGD) and transfer success rate."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Network, input_gradients
from .oracle import VictimOracle

METHODS = ("fgsm", "bim", "pgd")


@dataclass
class AttackSpec:
    method: str = "pgd"
    epsilon: float = 10 / 255
    alpha: float = 2 / 255
    steps: int = 10
    random_start: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown attack {self.method!r}")
        if self.method == "fgsm":
            self.steps = 1
            self.alpha = self.epsilon
        if self.epsilon < 0 or self.alpha < 0:
            raise ValueError("epsilon and alpha must be >= 0")
        if self.alpha > self.epsilon and self.epsilon > 0:
            raise ValueError("alpha must not exceed epsilon")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")


class AttackRejected(ValueError):
    pass


def _project(x_adv, x, eps):
    out = np.clip(np.clip(x_adv, x - eps, x + eps), 0.0, 1.0)
    # x ± eps rounds, so |out - x| can exceed eps by an ulp; step back inside
    over = np.abs(out - x) > eps
    while over.any():
        out[over] = np.nextafter(out[over], x[over])
        over = np.abs(out - x) > eps
    return out


def attack_batch(model: Network, images, labels, spec: AttackSpec, seed: int = 0) -> np.ndarray:
    """Adversarial images for a batch; no correctness precondition."""
    x = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    x_adv = x.copy()
    if spec.method == "pgd" and spec.random_start:
        rng = np.random.default_rng(seed)
        x_adv = _project(x + rng.uniform(-spec.epsilon, spec.epsilon, size=x.shape), x, spec.epsilon)
    for _ in range(spec.steps):
        grad, _ = input_gradients(model, x_adv, labels)
        # np.sign maps exact zeros to 0, so flat regions stay put
        x_adv = _project(x_adv + spec.alpha * np.sign(grad.numpy()), x, spec.epsilon)
    return x_adv


def attack(model: Network, image, true_label: int, spec: AttackSpec, seed: int = 0) -> np.ndarray:
    """Attack one image the model classifies correctly."""
    image = np.asarray(image, dtype=np.float64)
    pred = int(model.predict(image[None])[0])
    if pred != int(true_label):
        raise AttackRejected(f"model predicts {pred}, not the true label {true_label}")
    return attack_batch(model, image[None], [true_label], spec, seed)[0]


@dataclass
class TransferResult:
    asr: float | None
    eligible: int
    flipped: int
    max_linf: float
    linf_violations: int = 0  # images with |x' - x|_inf > epsilon


def transfer_asr(proxy: Network, victim: VictimOracle, test_images, labels, spec: AttackSpec,
                 seed: int = 0, batch_size: int = 500) -> TransferResult:
    """Share of victim-correct images whose proxy-crafted versions fool the victim.

    ``asr`` is ``None`` when the victim gets no test image right.
    """
    test_images = np.asarray(test_images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    correct = victim.predict(test_images) == labels
    eligible = np.flatnonzero(correct)
    flipped, max_linf, violations = 0, 0.0, 0
    for start in range(0, len(eligible), batch_size):
        idx = eligible[start:start + batch_size]
        adv = attack_batch(proxy, test_images[idx], labels[idx], spec, seed + start)
        linf = np.abs(adv - test_images[idx]).reshape(len(idx), -1).max(axis=1)
        max_linf = max(max_linf, float(linf.max()))
        violations += int(np.sum(linf > spec.epsilon))
        flipped += int(np.sum(victim.predict(adv) != labels[idx]))
    asr = flipped / len(eligible) if len(eligible) else None
    return TransferResult(asr, int(len(eligible)), flipped, max_linf, violations)
