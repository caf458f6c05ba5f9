"""Losses, Adam, the mini-batch training loop, metrics and grid search."""

from __future__ import annotations

import itertools
import logging
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import nn, vp
from .data_io import LabeledDataset
from .errors import ConfigError, DivergenceError
from .hermite import SampleGrid, VpParams, adaptive_hermite, feasible_region_check

log = logging.getLogger(__name__)

PROB_CLIP = 1e-12
DEFAULT_LEARNING_RATES = (1e-4, 3e-4, 1e-3, 3e-3, 1e-2)
EVAL_CHUNK = 4096


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    vp_penalty_alpha: float = 0.1
    batch_size: int = 512
    epochs: int = 100
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if not self.vp_penalty_alpha >= 0:
            raise ConfigError("vp_penalty_alpha must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ConfigError("invalid Adam constants")


# -- losses -----------------------------------------------------------------------


def loss_mse(pred, target) -> float:
    pred, target = np.atleast_2d(pred), np.atleast_2d(target)
    if pred.shape != target.shape:
        raise ValueError("prediction and target shapes differ")
    return float(np.mean(np.sum((target - pred) ** 2, axis=1)))


def loss_bce(pred, target) -> float:
    pred, target = np.asarray(pred, dtype=float), np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ValueError("prediction and target shapes differ")
    p = np.clip(pred, PROB_CLIP, 1 - PROB_CLIP)
    return float(-np.mean(target * np.log(p) + (1 - target) * np.log(1 - p)))


def _check_labels(probs, labels):
    probs = np.atleast_2d(np.asarray(probs, dtype=float))
    labels = np.atleast_1d(np.asarray(labels))
    if labels.shape != (probs.shape[0],):
        raise ValueError("need one label per prediction row")
    if labels.size and (labels.min() < 0 or labels.max() >= probs.shape[1]):
        raise ValueError("label out of range")
    return probs, labels.astype(np.int64)


def loss_ce(pred_probs, labels) -> float:
    probs, labels = _check_labels(pred_probs, labels)
    p = np.clip(probs[np.arange(labels.size), labels], PROB_CLIP, 1 - PROB_CLIP)
    return float(-np.mean(np.log(p)))


def vp_penalty(x_batch, vp_layer: nn.VPLayer, alpha: float):
    """``alpha / N * sum r2(x_i) / ||x_i||^2`` and its gradient w.r.t. (tau, lam).

    Zero-energy samples contribute nothing (with a warning).
    """
    if alpha == 0:
        return 0.0, np.zeros(2)
    values, grads, valid = vp_layer.penalty(x_batch)
    if not np.all(valid):
        warnings.warn(f"{np.count_nonzero(~valid)} zero-energy samples skipped in VP penalty", RuntimeWarning)
    n = values.shape[0]
    return alpha / n * float(np.sum(values)), alpha / n * grads.sum(axis=0)


def loss_vp(pred_probs, labels, x_batch, vp_layer: nn.VPLayer, alpha: float) -> float:
    ce = loss_ce(pred_probs, labels)
    if alpha == 0:
        return ce
    return ce + vp_penalty(x_batch, vp_layer, alpha)[0]


# -- optimizer -------------------------------------------------------------------------


def adam_step(params, grads, moments, t: int, config: TrainConfig):
    """One bias-corrected Adam update; returns (new params, (m, v))."""
    if t < 1:
        raise ValueError("Adam step counter starts at 1")
    grads = np.asarray(grads, dtype=float)
    if not np.all(np.isfinite(grads)):
        raise DivergenceError(f"non-finite gradient at Adam step {t}", iteration=t)
    m, v = moments
    m = config.beta1 * m + (1 - config.beta1) * grads
    v = config.beta2 * v + (1 - config.beta2) * grads * grads
    m_hat = m / (1 - config.beta1 ** t)
    v_hat = v / (1 - config.beta2 ** t)
    return params - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.eps), (m, v)


# -- metrics -------------------------------------------------------------------------------


@dataclass(frozen=True)
class ConfusionCounts:
    tp: tuple[int, ...]
    fp: tuple[int, ...]
    fn: tuple[int, ...]
    tn: tuple[int, ...]

    @classmethod
    def from_predictions(cls, predicted, labels, class_count: int) -> "ConfusionCounts":
        predicted, labels = np.asarray(predicted), np.asarray(labels)
        tp, fp, fn, tn = [], [], [], []
        for k in range(class_count):
            p, t = predicted == k, labels == k
            tp.append(int(np.sum(p & t)))
            fp.append(int(np.sum(p & ~t)))
            fn.append(int(np.sum(~p & t)))
            tn.append(int(np.sum(~p & ~t)))
        return cls(tuple(tp), tuple(fp), tuple(fn), tuple(tn))

    @property
    def class_count(self) -> int:
        return len(self.tp)

    def sensitivity(self, k: int, exact: bool = False):
        """TP / (TP + FN); nan (or None when exact) if the class never occurs."""
        return _ratio(self.tp[k], self.tp[k] + self.fn[k], exact)

    def positive_predictivity(self, k: int, exact: bool = False):
        """TP / (TP + FP); nan (or None when exact) if the class is never predicted."""
        return _ratio(self.tp[k], self.tp[k] + self.fp[k], exact)


def _ratio(num: int, den: int, exact: bool):
    if den == 0:
        return None if exact else math.nan
    return Fraction(num, den) if exact else num / den


@dataclass(frozen=True)
class EvalResult:
    accuracy: float
    sensitivity: tuple[float, ...]
    positive_predictivity: tuple[float, ...]
    counts: ConfusionCounts


def predict_proba(network: nn.Network, signals) -> np.ndarray:
    signals = np.asarray(signals, dtype=float)
    return np.concatenate(
        [network.forward(signals[i : i + EVAL_CHUNK]) for i in range(0, signals.shape[0], EVAL_CHUNK)]
    )


def metrics_from_predictions(predicted, labels, class_count: int) -> EvalResult:
    counts = ConfusionCounts.from_predictions(predicted, labels, class_count)
    acc = sum(counts.tp) / len(labels)
    se = tuple(counts.sensitivity(k) for k in range(class_count))
    ppv = tuple(counts.positive_predictivity(k) for k in range(class_count))
    return EvalResult(acc, se, ppv, counts)


def evaluate(network: nn.Network, dataset: LabeledDataset) -> EvalResult:
    """Accuracy and per-class Se / +P of the argmax prediction (ties go to the lowest class)."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    predicted = np.argmax(predict_proba(network, dataset.signals), axis=1)
    return metrics_from_predictions(predicted, dataset.labels, dataset.class_count)


# -- training loop ---------------------------------------------------------------------------


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    train_acc: list[float] = field(default_factory=list)
    test_acc: list[float] = field(default_factory=list)
    initial_loss: float = math.nan
    initial_train_acc: float = math.nan
    diverged: bool = False
    final: EvalResult | None = None
    epoch_seconds: list[float] = field(default_factory=list, compare=False)

    @property
    def epochs_run(self) -> int:
        return len(self.train_loss)

    def epochs_to_accuracy(self, threshold: float) -> int | None:
        """First 1-based epoch whose training accuracy reaches ``threshold``."""
        for i, acc in enumerate(self.train_acc, start=1):
            if acc >= threshold:
                return i
        return None

    def csv_rows(self):
        yield ("epoch", "train_loss", "train_acc", "test_acc")
        for i, row in enumerate(zip(self.train_loss, self.train_acc, self.test_acc), start=1):
            yield (i,) + tuple(format(v, ".17g") for v in row)

    def summary(self) -> str:
        lines = [
            f"epochs_run = {self.epochs_run}",
            f"diverged = {str(self.diverged).lower()}",
            f"initial_loss = {self.initial_loss:.17g}",
        ]
        if self.train_loss:
            lines += [
                f"final_train_loss = {self.train_loss[-1]:.17g}",
                f"final_train_acc = {self.train_acc[-1]:.17g}",
                f"final_test_acc = {self.test_acc[-1]:.17g}",
                f"best_test_acc = {max(self.test_acc):.17g}",
            ]
        if self.final is not None:
            for k in range(len(self.final.sensitivity)):
                lines.append(f"class_{k}_se = {self.final.sensitivity[k]:.17g}")
                lines.append(f"class_{k}_ppv = {self.final.positive_predictivity[k]:.17g}")
        return "\n".join(lines) + "\n"


def objective(network: nn.Network, dataset: LabeledDataset, alpha: float) -> tuple[float, float]:
    """Full-pass (loss, accuracy); loss is cross entropy plus the VP penalty when present."""
    x, y = dataset.signals, dataset.labels
    probs = predict_proba(network, x)
    loss = loss_ce(probs, y)
    layer = network.vp_layer
    if alpha > 0 and layer is not None:
        total = 0.0
        for i in range(0, x.shape[0], EVAL_CHUNK):
            chunk = x[i : i + EVAL_CHUNK]
            layer.forward(chunk)
            total += vp_penalty(chunk, layer, alpha)[0] * chunk.shape[0]
        loss += total / x.shape[0]
    acc = float(np.mean(np.argmax(probs, axis=1) == y))
    return loss, acc


def batch_gradient(network: nn.Network, xb, yb, alpha: float) -> tuple[float, np.ndarray]:
    """Mini-batch loss (cross entropy plus VP penalty) and its flat parameter gradient.

    The softmax and cross-entropy derivatives are fused into ``(p - onehot) / B``.
    """
    probs = network.forward(xb)
    classes = probs.shape[1]
    loss = loss_ce(probs, yb)
    grads = network.backward((probs - np.eye(classes)[yb]) / xb.shape[0], from_logits=True)
    layer = network.vp_layer
    if layer is not None and alpha > 0:
        value, g = vp_penalty(xb, layer, alpha)
        loss += value
        idx = network.layers.index(layer)
        grads[idx].d_params = grads[idx].d_params + g
    return loss, network.flat_grad(grads)


def train(
    network: nn.Network,
    train_set: LabeledDataset,
    test_set: LabeledDataset | None,
    config: TrainConfig,
) -> TrainReport:
    """Mini-batch Adam on cross entropy (+ VP penalty for a VP feature layer).

    Each epoch visits the training set in a permutation seeded by
    ``seed ^ epoch``.  After every update VP dilations are clamped into the
    layer's admissible range.  A non-finite loss or gradient stops training
    and flags the report as diverged.
    """
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    classes = network.specs[-1].out_shape[0]
    if classes != train_set.class_count:
        raise ValueError(f"network has {classes} outputs but data has {train_set.class_count} classes")
    x_all, y_all = train_set.signals, train_set.labels
    n = x_all.shape[0]
    alpha = config.vp_penalty_alpha

    report = TrainReport()
    report.initial_loss, report.initial_train_acc = objective(network, train_set, alpha)
    params = network.get_params()
    moments = (np.zeros_like(params), np.zeros_like(params))
    step = 0
    for epoch in range(config.epochs):
        start = time.perf_counter()
        perm = np.random.default_rng(config.seed ^ epoch).permutation(n)
        try:
            for lo in range(0, n, config.batch_size):
                idx = perm[lo : lo + config.batch_size]
                _, grad = batch_gradient(network, x_all[idx], y_all[idx], alpha)
                step += 1
                params, moments = adam_step(params, grad, moments, step, config)
                network.set_params(params)
                network.clamp()
                params = network.get_params()
        except DivergenceError as exc:
            log.warning("training diverged in epoch %d: %s", epoch + 1, exc)
            report.diverged = True
            break
        loss, acc = objective(network, train_set, alpha)
        test_acc = evaluate(network, test_set).accuracy if test_set is not None else math.nan
        report.train_loss.append(loss)
        report.train_acc.append(acc)
        report.test_acc.append(test_acc)
        report.epoch_seconds.append(time.perf_counter() - start)
        log.debug("epoch %d loss %.6f train %.4f test %.4f", epoch + 1, loss, acc, test_acc)
        if not math.isfinite(loss):
            report.diverged = True
            break
    if not report.diverged:
        report.final = evaluate(network, test_set if test_set is not None else train_set)
    return report


# -- VP initialization and model construction ---------------------------------------------------


def vp_grid_objective(x, n: int, grid: SampleGrid, params: VpParams) -> float:
    basis = adaptive_hermite(grid, n, params, normalize=True)
    return float(np.nanmean(vp.relative_r2(x, vp.pseudoinverse(basis.phi))))


def init_vp_params(x, n: int, interval, strategy: str = "grid", sample: int = 512) -> VpParams:
    """Initial (tau, lam) for a VP layer.

    ``center``: middle of the interval, ``lam = 12 / L``.  ``grid``: the best
    feasible point of a 21 x 12 (tau, lam) mesh by mean relative residual on
    the first ``sample`` signals.  ``pretrain``: ``grid`` refined by
    :func:`vpnet.vp.vp_fit`.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))[:sample]
    a, b = float(interval[0]), float(interval[1])
    length = b - a
    if strategy == "center":
        return VpParams((a + b) / 2.0, 12.0 / length)
    if strategy not in ("grid", "pretrain"):
        raise ValueError(f"unknown VP init strategy {strategy!r}")
    grid = SampleGrid.uniform(x.shape[1], a, b)
    x = x[np.sum(x * x, axis=1) > 0]
    best, best_val = VpParams((a + b) / 2.0, 12.0 / length), math.inf
    for lam in np.geomspace(6.0 / length, 60.0 / length, 12):
        for tau in np.linspace(a, b, 21):
            p = VpParams(float(tau), float(lam))
            if not feasible_region_check(p, (a, b)):
                continue
            val = vp_grid_objective(x, n, grid, p)
            if val < best_val:
                best, best_val = p, val
    if strategy == "pretrain":
        best = vp.vp_fit(x, lambda p: adaptive_hermite(grid, n, p, normalize=True), best, interval=(a, b))
    return best


ARCHITECTURES = ("vpnet", "fcnn", "cnn")


def build_specs(arch: str, m: int, classes: int, options: dict, signals=None) -> list[nn.LayerSpec]:
    """Layer specs for one architecture; VPNet needs ``signals`` unless tau/lam are given."""
    o = dict(options)
    if arch == "vpnet":
        interval = (0.0, float(m - 1))
        if "tau" in o and "lam" in o:
            theta = VpParams(float(o["tau"]), float(o["lam"]))
        else:
            theta = init_vp_params(signals, o.get("n", 7), interval, o.get("init", "grid"))
        return nn.vpnet_specs(m, o.get("n", 7), o.get("hidden", 8), classes, theta.tau, theta.lam, interval)
    if arch == "fcnn":
        return nn.fcnn_specs(m, o.get("hidden", 8), classes, o.get("first"))
    if arch == "cnn":
        return nn.cnn_specs(
            m, o.get("channels", 1), o.get("kernel", 5), o.get("pool", 10), o.get("hidden", 8), classes,
            o.get("pool_mode", "max"),
        )
    raise ValueError(f"unknown architecture {arch!r}")


def build_network(arch: str, m: int, classes: int, options: dict, seed: int = 0, signals=None) -> nn.Network:
    specs = build_specs(arch, m, classes, options, signals)
    return nn.Network(specs, rng=np.random.default_rng(seed))


# -- grid search ----------------------------------------------------------------------------------


@dataclass(frozen=True)
class Candidate:
    arch: str
    options: tuple

    @property
    def label(self) -> str:
        return self.arch + "(" + ",".join(f"{k}={v}" for k, v in self.options) + ")"


def expand_space(arch: str, **lists) -> list[Candidate]:
    """Cartesian product of option lists, e.g. ``expand_space("vpnet", n=[5, 7], hidden=[4, 8])``."""
    keys = list(lists)
    return [Candidate(arch, tuple(zip(keys, combo))) for combo in itertools.product(*(lists[k] for k in keys))]


@dataclass
class GridResult:
    index: int
    arch: str
    label: str
    learning_rate: float
    n_params: int
    test_accuracy: float
    best_test_accuracy: float
    train_accuracy: float
    diverged: bool
    rank: int = 0
    report: TrainReport | None = field(default=None, repr=False, compare=False)


def _run_one(job):
    index, cand, lr, train_set, test_set, config = job
    cfg = TrainConfig(**{**config.__dict__, "learning_rate": lr})
    net = build_network(cand.arch, train_set.m, train_set.class_count, dict(cand.options), cfg.seed, train_set.signals)
    alpha = cfg.vp_penalty_alpha if cand.arch == "vpnet" else 0.0
    cfg = TrainConfig(**{**cfg.__dict__, "vp_penalty_alpha": alpha})
    report = train(net, train_set, test_set, cfg)
    last_test = report.test_acc[-1] if report.test_acc else math.nan
    return GridResult(
        index, cand.arch, cand.label, lr, net.n_params,
        last_test if not report.diverged else math.nan,
        max(report.test_acc) if report.test_acc else math.nan,
        report.train_acc[-1] if report.train_acc else math.nan,
        report.diverged, report=report,
    )


def rank_results(results: list[GridResult]) -> list[GridResult]:
    """Sort by final test accuracy (desc), then fewer parameters, then lower learning rate."""

    def key(r):
        acc = r.test_accuracy if not math.isnan(r.test_accuracy) else -1.0
        return (-acc, r.n_params, r.learning_rate, r.index)

    ranked = sorted(results, key=key)
    for i, r in enumerate(ranked, start=1):
        r.rank = i
    return ranked


def grid_search(
    candidates: list[Candidate],
    learning_rates,
    train_set: LabeledDataset,
    test_set: LabeledDataset,
    config: TrainConfig,
    jobs: int = 1,
) -> list[GridResult]:
    """Train every (candidate, learning rate) pair and return the ranked table."""
    if not candidates or not list(learning_rates):
        raise ValueError("search space is empty")
    work = [
        (i, cand, float(lr), train_set, test_set, config)
        for i, (cand, lr) in enumerate(itertools.product(candidates, learning_rates))
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_one, work))
    else:
        results = [_run_one(job) for job in work]
    return rank_results(results)


def best_by_arch(results: list[GridResult], min_accuracy: float = 0.0) -> dict[str, GridResult]:
    """Smallest-parameter configuration per architecture whose test accuracy reaches ``min_accuracy``."""
    out = {}
    for r in results:
        if r.diverged or math.isnan(r.test_accuracy) or r.test_accuracy < min_accuracy:
            continue
        cur = out.get(r.arch)
        if cur is None or (r.n_params, -r.test_accuracy) < (cur.n_params, -cur.test_accuracy):
            out[r.arch] = r
    return out
