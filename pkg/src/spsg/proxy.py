"""Offline proxy training from a query set.

Per record the loss is ``L_prob + L_grad1 + L_grad2``:

* ``L_prob`` matches the proxy output on the clean image to the victim answer;
* ``L_grad1`` matches proxy outputs on a sample of cached superpixel
  perturbations to the victim answers for those perturbations;
* ``L_grad2`` is ``1 - cos`` between the purified victim superpixel gradient
  and the proxy's simulated superpixel gradient ``Q'`` (the proxy pixel
  gradient of ``-log y_p`` averaged over each victim superpixel).

``L_grad2`` depends on an input gradient, so its parameter gradient needs a
second backward pass.  ``grad2_mode="exact"`` builds it with a double
backward; ``"stopped"`` evaluates the term but detaches it.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, fields

import numpy as np
import torch

from .nn import LOG_PROB_FLOOR, PROB_FLOOR, Network, OptimizerState, apply_gradients, input_gradients
from .oracle import QueryMode, QueryResponse
from .sgp import PurifiedGradient, purify, survivors
from .spgq import QuerySet, SuperpixelGradientRecord

PROB_LOSS_VARIANTS = ("standard_kd", "literal_eq7")
GRAD2_MODES = ("exact", "stopped")
PROXY_GRADIENT_VIEWS = ("masked", "purified", "raw")
HISTORY_FIELDS = ("epoch", "L_prob", "L_grad1", "L_grad2", "train_loss", "val_accuracy", "val_agreement")


@dataclass
class StealConfig:
    beta: float = 0.5
    epsilon: float = 1e-5
    epochs: int = 200
    batch_size: int = 64
    learning_rate: float = 0.01
    momentum: float = 0.5
    decay_factor: float = 0.1
    decay_period: int = 60
    mode: QueryMode = QueryMode.PROBABILITY
    grad1_superpixel_sample: int = 8
    prob_loss_variant: str = "standard_kd"
    grad2_mode: str = "exact"
    proxy_gradient_view: str = "masked"
    use_gradients: bool = True
    seed: int = 0

    def __post_init__(self):
        self.mode = QueryMode(self.mode)
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 < self.beta < 1.0:
            raise ValueError("beta must lie in (0, 1)")
        for name, allowed in (("prob_loss_variant", PROB_LOSS_VARIANTS), ("grad2_mode", GRAD2_MODES),
                              ("proxy_gradient_view", PROXY_GRADIENT_VIEWS)):
            if getattr(self, name) not in allowed:
                raise ValueError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["mode"] = self.mode.value
        return out


@dataclass
class SimulatedSuperpixelGradient:
    values: np.ndarray  # image-shaped, constant within each (j, c)
    reduced: np.ndarray  # J×C


def _superpixel_mean(q: torch.Tensor, labels: torch.Tensor, n_segments: int) -> torch.Tensor:
    """(C, H, W) -> (J, C) means over the label map, differentiable in ``q``."""
    c = q.shape[0]
    flat = q.reshape(c, -1)
    idx = labels.reshape(1, -1).expand(c, -1)
    sums = torch.zeros(c, n_segments, dtype=q.dtype).scatter_add(1, idx, flat)
    counts = torch.bincount(labels.reshape(-1), minlength=n_segments).to(q.dtype)
    return (sums / counts).T


def simulated_superpixel_gradient(proxy: Network, image, seg, p: int) -> SimulatedSuperpixelGradient:
    image = np.asarray(image, dtype=np.float64)
    q, _ = input_gradients(proxy, image[None], [int(p)])
    labels = torch.as_tensor(seg.labels, dtype=torch.long)
    reduced = _superpixel_mean(q[0].detach(), labels, seg.n_segments).numpy()
    values = reduced.T[:, seg.labels]
    return SimulatedSuperpixelGradient(values, reduced)


# ---------------------------------------------------------------- loss terms

def _prob_loss(log_y: torch.Tensor, targets: dict, variant: str) -> torch.Tensor:
    """Batched per-sample L_prob.  ``targets`` holds victim answers as tensors."""
    if "probs" in targets:
        if variant == "standard_kd":
            return -(targets["probs"] * torch.clamp(log_y, min=LOG_PROB_FLOOR)).sum(dim=1)
        log_v = torch.log(torch.clamp(targets["probs"], min=PROB_FLOOR))
        return -(torch.exp(log_y) * log_v).sum(dim=1)
    label = targets["label"].reshape(-1, 1)
    log_yp = torch.clamp(log_y.gather(1, label)[:, 0], min=LOG_PROB_FLOOR)
    y_hat = targets["top_prob"]
    if variant == "standard_kd":
        return -y_hat * log_yp
    return -torch.exp(log_yp) * torch.log(torch.clamp(y_hat, min=PROB_FLOOR)) - log_yp


def _response_targets(responses) -> dict:
    if responses[0].mode is QueryMode.PROBABILITY:
        return {"probs": torch.as_tensor(np.stack([r.probs for r in responses]))}
    return {"label": torch.as_tensor([r.top_label for r in responses], dtype=torch.long),
            "top_prob": torch.as_tensor([r.top_prob for r in responses], dtype=torch.float64)}


def loss_prob(y, resp: QueryResponse, variant: str = "standard_kd") -> float:
    """L_prob for one proxy probability vector ``y`` against one victim answer."""
    if variant not in PROB_LOSS_VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    log_y = torch.log(torch.clamp(torch.as_tensor(y, dtype=torch.float64), min=PROB_FLOOR))[None]
    return float(_prob_loss(log_y, _response_targets([resp]), variant)[0])


def cosine_loss(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """``1 - cos(a, b)``; 0 when either vector has zero norm."""
    a, b = a.reshape(-1), b.reshape(-1)
    na, nb = torch.linalg.norm(a), torch.linalg.norm(b)
    if float(na.detach()) == 0.0 or float(nb.detach()) == 0.0:
        return torch.zeros((), dtype=torch.float64)
    # rounding can push |cos| an ulp past 1
    return 1.0 - torch.clamp(torch.dot(a, b) / (na * nb), -1.0, 1.0)


def purify_torch(g: torch.Tensor, beta: float, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Differentiable counterpart of :func:`spsg.sgp.purify` on a J×C tensor.

    With ``mask`` only masked entries take part (others are treated as zero).
    """
    if mask is not None:
        g = torch.where(mask, g, torch.zeros_like(g))
    zero = torch.zeros_like(g)
    g_pos = torch.where(g >= 0, g, zero).max(dim=0).values
    g_neg = torch.where(g < 0, g, zero).min(dim=0).values
    keep_pos = (g > beta * g_pos) & (g_pos > 0)
    keep_neg = (g < beta * g_neg) & (g_neg < 0)
    safe_pos = torch.where(g_pos > 0, g_pos, torch.ones_like(g_pos))
    safe_neg = torch.where(g_neg < 0, -g_neg, torch.ones_like(g_neg))
    return torch.where(keep_pos, g / safe_pos, torch.where(keep_neg, g / safe_neg, zero))


def proxy_gradient_view(qp: torch.Tensor, purified: PurifiedGradient, beta: float, view: str) -> torch.Tensor:
    mask = torch.as_tensor(purified.mask)
    if view == "purified":
        return purify_torch(qp, beta, mask)
    if view == "masked":
        return torch.where(mask, qp, torch.zeros_like(qp))
    return qp


def loss_grad2(G_pur: PurifiedGradient, Qp_reduced, beta: float = 0.5, view: str = "purified") -> float:
    """``1 - cos`` between purified victim and (viewed) proxy superpixel gradients."""
    qp = torch.as_tensor(np.asarray(Qp_reduced, dtype=np.float64))
    if qp.shape != G_pur.values.shape:
        raise ValueError(f"shape mismatch {tuple(qp.shape)} vs {G_pur.values.shape}")
    return float(cosine_loss(torch.as_tensor(G_pur.values), proxy_gradient_view(qp, G_pur, beta, view)))


@dataclass
class PreparedRecord:
    """A record with its purification and survivor list cached."""
    record: SuperpixelGradientRecord
    purified: PurifiedGradient | None = None
    survivors: list = field(default_factory=list)
    labels: torch.Tensor | None = None

    @property
    def image_id(self) -> str:
        return self.record.image_id


def prepare_record(record: SuperpixelGradientRecord, beta: float) -> PreparedRecord:
    if not record.has_gradient:
        return PreparedRecord(record)
    pur = purify(record.g, beta)
    return PreparedRecord(record, pur, survivors(pur),
                          torch.as_tensor(record.segmentation.labels, dtype=torch.long))


def _sample_survivors(prep: PreparedRecord, count: int, rng) -> list:
    surv = prep.survivors
    if count >= len(surv) or rng is None:
        return surv[:count] if rng is None else list(surv)
    pick = np.sort(rng.choice(len(surv), count, replace=False))
    return [surv[i] for i in pick]


def loss_grad1(proxy: Network, prep: PreparedRecord, sample_count: int = 8, rng=None,
               variant: str = "standard_kd") -> torch.Tensor:
    """Mean L_prob over sampled surviving perturbations (0 with no survivors)."""
    if prep.purified is None or not prep.survivors or sample_count <= 0:
        return torch.zeros((), dtype=torch.float64)
    chosen = _sample_survivors(prep, sample_count, rng)
    rec = prep.record
    batch = np.stack([rec.perturbation(j, c) for j, c in chosen])
    log_y = proxy.log_probs(batch)
    return _prob_loss(log_y, _response_targets([rec.perturbed[j, c] for j, c in chosen]), variant).mean()


def _batched_grad1(proxy: Network, preps, config: StealConfig, rng) -> torch.Tensor:
    """Sum over records of :func:`loss_grad1`, with one proxy forward."""
    images, responses, owner = [], [], []
    for k, prep in enumerate(preps):
        if not prep.survivors or config.grad1_superpixel_sample <= 0:
            continue
        for j, c in _sample_survivors(prep, config.grad1_superpixel_sample, rng):
            images.append(prep.record.perturbation(j, c))
            responses.append(prep.record.perturbed[j, c])
            owner.append(k)
    if not images:
        return torch.zeros((), dtype=torch.float64)
    per_sample = _prob_loss(proxy.log_probs(np.stack(images)), _response_targets(responses),
                            config.prob_loss_variant)
    owner = torch.as_tensor(owner)
    sums = torch.zeros(len(preps), dtype=torch.float64).index_add(0, owner, per_sample)
    counts = torch.bincount(owner, minlength=len(preps)).to(torch.float64)
    return (sums[counts > 0] / counts[counts > 0]).sum()


@dataclass
class LossTerms:
    total: torch.Tensor
    prob: float
    grad1: float
    grad2: float


def total_loss(proxy: Network, prep, config: StealConfig, rng=None) -> LossTerms:
    """Per-record loss; ``total`` carries parameter gradients."""
    if isinstance(prep, SuperpixelGradientRecord):
        prep = prepare_record(prep, config.beta)
    return batch_loss(proxy, [prep], config, rng)


def batch_loss(proxy: Network, preps, config: StealConfig, rng=None) -> LossTerms:
    """Mean of per-record losses over a batch, evaluated with shared forwards."""
    n = len(preps)
    images = np.stack([p.record.image for p in preps])
    base_targets = _response_targets([p.record.base for p in preps])
    grad_idx = [i for i, p in enumerate(preps) if config.use_gradients and p.purified is not None]
    x = torch.as_tensor(images).clone().requires_grad_(bool(grad_idx))
    log_y = proxy.log_probs(x)
    l_prob = _prob_loss(log_y, base_targets, config.prob_loss_variant).sum()
    l_grad1 = torch.zeros((), dtype=torch.float64)
    l_grad2 = torch.zeros((), dtype=torch.float64)
    if grad_idx:
        # Q: proxy pixel gradient of -log y_p at the victim base label
        labels = torch.as_tensor([preps[i].record.base_label for i in grad_idx], dtype=torch.long)
        nll = -torch.clamp(log_y[grad_idx].gather(1, labels[:, None])[:, 0], min=LOG_PROB_FLOOR)
        (q,) = torch.autograd.grad(nll.sum(), x, create_graph=config.grad2_mode == "exact",
                                   retain_graph=True)
        if config.grad2_mode == "stopped":
            q = q.detach()
        for i in grad_idx:
            prep = preps[i]
            qp = _superpixel_mean(q[i], prep.labels, prep.purified.values.shape[0])
            view = proxy_gradient_view(qp, prep.purified, config.beta, config.proxy_gradient_view)
            term = cosine_loss(torch.as_tensor(prep.purified.values), view)
            l_grad2 = l_grad2 + (term.detach() if config.grad2_mode == "stopped" else term)
        l_grad1 = _batched_grad1(proxy, [preps[i] for i in grad_idx], config, rng)
    total = (l_prob + l_grad1 + l_grad2) / n
    return LossTerms(total, float(l_prob.detach()) / n, float(l_grad1.detach()) / n, float(l_grad2.detach()) / n)


def agreement_rate(proxy: Network, images, victim_labels) -> float:
    return float(np.mean(predict_batched(proxy, images) == np.asarray(victim_labels)))


def predict_batched(net: Network, images, batch_size: int = 1000) -> np.ndarray:
    return np.concatenate([net.predict(images[i:i + batch_size]) for i in range(0, len(images), batch_size)])


def steal(qs: QuerySet, proxy_arch, config: StealConfig, validation=None):
    """Train a proxy on a query set.

    ``validation`` is an optional ``(images, labels, victim_labels)`` triple;
    either label array may be ``None``.  Returns ``(proxy, history)``.
    """
    if qs.mode is not config.mode:
        raise ValueError(f"query set mode {qs.mode.value} does not match config mode {config.mode.value}")
    if not qs.records:
        raise ValueError("query set has no records")
    input_shape = qs.records[0].image.shape
    proxy = Network(proxy_arch, input_shape, seed=config.seed)
    preps = [prepare_record(r, config.beta) for r in qs.records]
    rng = np.random.default_rng(config.seed)
    opt = OptimizerState(config.learning_rate, config.momentum, config.decay_factor, config.decay_period)
    history = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(preps))
        sums = np.zeros(4)
        for start in range(0, len(order), config.batch_size):
            batch = [preps[i] for i in order[start:start + config.batch_size]]
            terms = batch_loss(proxy, batch, config, rng)
            try:
                apply_gradients(proxy, terms.total, opt)
            except FloatingPointError as exc:
                ids = ",".join(p.image_id for p in batch)
                raise FloatingPointError(f"{exc} in batch with records [{ids}]") from exc
            sums += len(batch) * np.array([terms.prob, terms.grad1, terms.grad2, float(terms.total.detach())])
        opt.end_epoch()
        sums /= len(preps)
        row = {"epoch": epoch, "L_prob": sums[0], "L_grad1": sums[1], "L_grad2": sums[2],
               "train_loss": sums[3], "val_accuracy": None, "val_agreement": None}
        if validation is not None:
            images, labels, victim_labels = validation
            pred = predict_batched(proxy, np.asarray(images, dtype=np.float64))
            if labels is not None:
                row["val_accuracy"] = float(np.mean(pred == np.asarray(labels)))
            if victim_labels is not None:
                row["val_agreement"] = float(np.mean(pred == np.asarray(victim_labels)))
        history.append(row)
    return proxy, history


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.10g}"


def write_history_csv(history, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HISTORY_FIELDS)
        for row in history:
            writer.writerow([_fmt(row.get(k)) for k in HISTORY_FIELDS])
