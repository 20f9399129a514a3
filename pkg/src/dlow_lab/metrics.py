"""Diversity and accuracy metrics for sample sets of future motions.

A sample set ``X`` is a ``(K, T, V)`` array. Distances are Euclidean norms of
flattened (time-major) motions or, for the final-pose metrics, of the last
frame.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np
import torch

from .data import DatasetSplit, MultiModalGroundTruth

log = logging.getLogger(__name__)

METRIC_NAMES = ("apd", "ade", "fde", "mmade", "mmfde")


def apd(X) -> float:
    """Average pairwise distance; 0 for a single sample."""
    X = np.asarray(X, dtype=np.float64)
    K = X.shape[0]
    if K < 2:
        log.debug("apd: K=%d, returning 0 by convention", K)
        return 0.0
    F = X.reshape(K, -1)
    d = np.sqrt(np.sum((F[:, None] - F[None]) ** 2, axis=-1))
    return float(d.sum() / (K * (K - 1)))


def ade(X, x_hat) -> float:
    X = np.asarray(X, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    T = x_hat.shape[0]
    d = np.sqrt(np.sum((X - x_hat).reshape(X.shape[0], -1) ** 2, axis=-1))
    return float(d.min() / T)


def fde(X, x_hat) -> float:
    X = np.asarray(X, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    return float(np.sqrt(np.sum((X[:, -1] - x_hat[-1]) ** 2, axis=-1)).min())


def mmade(X, group) -> float:
    """Mean ADE over every future in the multi-modal ground-truth group."""
    return float(np.mean([ade(X, g) for g in group]))


def mmfde(X, group) -> float:
    return float(np.mean([fde(X, g) for g in group]))


class ModeOracle:
    """Assigns a motion to a ground-truth mode by its end-pose displacement.

    The displacement is the final pose minus the last context pose. Mode
    centres are class means of a labelled split; a motion belongs to the
    nearest centre if it lies within ``radius`` (half the smallest centre
    separation by default), otherwise to no mode (label -1).
    """

    def __init__(self, centers, radius=None):
        self.centers = np.asarray(centers, dtype=np.float64)
        if radius is None:
            d = np.sqrt(((self.centers[:, None] - self.centers[None]) ** 2).sum(-1))
            d[np.diag_indices_from(d)] = np.inf
            radius = 0.5 * d.min()
        self.radius = float(radius)

    @classmethod
    def from_split(cls, split: DatasetSplit, radius=None) -> "ModeOracle":
        if split.modes is None:
            raise ValueError("split carries no mode labels")
        disp = split.futures[:, -1] - split.contexts[:, -1]
        labels = np.unique(split.modes)
        centers = np.stack([disp[split.modes == m].mean(0) for m in labels])
        return cls(centers, radius)

    def labels(self, X, context) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        disp = X[..., -1, :] - np.asarray(context)[-1]
        d = np.sqrt(((disp[:, None, :] - self.centers[None]) ** 2).sum(-1))
        lab = d.argmin(-1)
        return np.where(d.min(-1) <= self.radius, lab, -1)


def mode_coverage(X, context, oracle: ModeOracle) -> int:
    """Number of distinct ground-truth modes hit by at least one sample's end pose."""
    lab = oracle.labels(X, context)
    return int(len(set(lab[lab >= 0].tolist())))


@dataclass
class MetricsReport:
    apd: float
    ade: float
    fde: float
    mmade: float
    mmfde: float
    K: int
    coverage: Optional[float] = None
    per_item: list = field(default_factory=list, repr=False)

    def to_dict(self, per_item=True) -> dict:
        d = asdict(self)
        if not per_item:
            d.pop("per_item")
        return d

    def row(self) -> dict:
        return {k: getattr(self, k) for k in METRIC_NAMES + ("coverage",)}


def format_table(rows: dict, columns=METRIC_NAMES + ("coverage",), title: str = "") -> str:
    """Fixed-width plain-text table; ``rows`` maps a label to a dict of values."""
    label_w = max([len("method")] + [len(str(k)) for k in rows])
    widths = [max(10, len(c) + 2) for c in columns]
    header = "method".ljust(label_w) + "".join(f"{c.upper():>{w}}" for c, w in zip(columns, widths))
    lines = [title] if title else []
    lines += [header, "-" * len(header)]
    for name, vals in rows.items():
        cells = []
        for c, w in zip(columns, widths):
            v = vals.get(c)
            if v is None:
                cells.append(f"{'-':>{w}}")
            elif isinstance(v, (int, np.integer)):
                cells.append(f"{v:>{w}d}")
            else:
                cells.append(f"{v:>{w}.4f}")
        lines.append(str(name).ljust(label_w) + "".join(cells))
    return "\n".join(lines)


def dump_json(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


Sampler = Callable[[torch.Tensor, int, torch.Generator], torch.Tensor]


def _item_metrics(X, x_hat, group, context, oracle):
    rec = {
        "apd": apd(X),
        "ade": ade(X, x_hat),
        "fde": fde(X, x_hat),
        "mmade": mmade(X, group),
        "mmfde": mmfde(X, group),
    }
    if oracle is not None:
        rec["coverage"] = mode_coverage(X, context, oracle)
    return rec


def evaluate_curve(
    sampler: Sampler,
    split: DatasetSplit,
    mm_gt: MultiModalGroundTruth,
    K_list,
    num_eval_eps: int = 1,
    seed: int = 0,
    oracle: Optional[ModeOracle] = None,
    batch_size: int = 256,
) -> dict:
    """Metrics at several set sizes from one draw of ``max(K_list)`` samples.

    Each smaller set is a prefix of the largest one, so the accuracy metrics
    can only improve as K grows. Returns ``{K: MetricsReport}``.
    """
    K_list = sorted(set(int(k) for k in K_list))
    K_max = K_list[-1]
    gen = torch.Generator().manual_seed(seed)
    ctx = torch.as_tensor(split.contexts, dtype=torch.float32)
    keys = METRIC_NAMES + (("coverage",) if oracle is not None else ())
    per_item = {K: [dict.fromkeys(keys, 0.0) for _ in range(len(split))] for K in K_list}
    for _ in range(num_eval_eps):
        for start in range(0, len(split), batch_size):
            X_batch = sampler(ctx[start : start + batch_size], K_max, gen)
            X_batch = np.asarray(torch.as_tensor(X_batch).detach().cpu().double())
            for off, X in enumerate(X_batch):
                i = start + off
                group = mm_gt.futures(split, i)
                for K in K_list:
                    rec = _item_metrics(X[:K], split.futures[i], group, split.contexts[i], oracle)
                    acc = per_item[K][i]
                    for k, v in rec.items():
                        acc[k] += v
    reports = {}
    for K in K_list:
        items = per_item[K]
        for rec in items:
            for k in rec:
                rec[k] /= num_eval_eps
        means = {k: float(np.mean([r[k] for r in items])) for k in keys}
        reports[K] = MetricsReport(
            apd=means["apd"],
            ade=means["ade"],
            fde=means["fde"],
            mmade=means["mmade"],
            mmfde=means["mmfde"],
            K=K,
            coverage=means.get("coverage"),
            per_item=items,
        )
    return reports


def evaluate(
    sampler: Sampler,
    split: DatasetSplit,
    mm_gt: MultiModalGroundTruth,
    K: int,
    num_eval_eps: int = 1,
    seed: int = 0,
    oracle: Optional[ModeOracle] = None,
    batch_size: int = 256,
) -> MetricsReport:
    """Average every metric over test items and ``num_eval_eps`` independent draws.

    ``sampler(contexts, K, generator)`` returns ``(B, K, T, V)`` samples.
    """
    return evaluate_curve(sampler, split, mm_gt, [K], num_eval_eps, seed, oracle, batch_size)[K]


def random_sampler(cvae) -> Sampler:
    from .cvae import sample_random

    def sampler(contexts, K, generator):
        return sample_random(contexts, cvae, K, generator)

    return sampler


def dlow_sampler(model) -> Sampler:
    """Sampler for a trained DLow model.

    Asking for more samples than the model's K concatenates the sets of
    independent ``eps`` draws and keeps the first ``K``, so smaller sets are
    prefixes of larger ones under the same generator state.
    """

    def sampler(contexts, K, generator):
        draws = math.ceil(K / model.K)
        eps = model.draw_eps(contexts.shape[0] * draws, generator, contexts.dtype)
        eps = eps.view(draws, contexts.shape[0], -1)
        sets = [model.sample(contexts, eps[r]) for r in range(draws)]
        return torch.cat(sets, dim=1)[:, :K]

    return sampler
