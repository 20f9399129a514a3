"""Experiment pipeline behind the ``dlow-lab`` commands.

Trained artifacts live in a content-addressed cache under ``<out>/cache``:
a directory name carries the hash of everything that determines its
contents (stage settings, seed and upstream checksums), so a command reuses
what an earlier command already produced and never reuses a stale result.
Each command also writes ``<out>/<command>/`` holding ``report.txt``,
``report.json``, any figures, and ``manifest.json``.
"""

import hashlib
import json
import logging
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import __version__, plotting
from .config import ExperimentConfig
from .cvae import load_cvae, sample_random, save_cvae, state_checksum, train_cvae
from .data import build_multimodal_gt, generate_from_spec, load_split, save_split
from .dlow import affine_kl, load_dlow, save_dlow, train_dlow
from .errors import ConfigError
from .metrics import (
    METRIC_NAMES,
    ModeOracle,
    apd,
    dlow_sampler,
    dump_json,
    evaluate_curve,
    format_table,
    random_sampler,
)

log = logging.getLogger(__name__)

ABLATIONS = {
    "E_d & E_r": {},
    "E_d only": {"lambda_r": 0.0},
    "E_r only": {"lambda_d": 0.0},
    "neither": {"lambda_d": 0.0, "lambda_r": 0.0},
}


def _sha(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=list).encode()).hexdigest()


def file_checksum(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(directory, stage: str, cfg: ExperimentConfig, key: str, inputs: dict, extra=None):
    """Merge stage provenance into ``manifest.json`` (checkpoint fields are kept)."""
    directory = Path(directory)
    path = directory / "manifest.json"
    manifest = json.loads(path.read_text()) if path.exists() else {}
    outputs = {
        p.name: file_checksum(p)
        for p in sorted(directory.iterdir())
        if p.is_file() and p.name != "manifest.json"
    }
    manifest.update(
        {
            "stage": stage,
            "stage_key": key,
            "config_hash": cfg.hash(),
            "experiment_config": cfg.to_dict(),
            "config_source": cfg.source,
            "seed": cfg.seed,
            "inputs": inputs,
            "outputs": outputs,
            "version": __version__,
        }
    )
    if extra:
        manifest.update(extra)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=list) + "\n")
    return path


def _cached(directory: Path, key: str) -> bool:
    path = directory / "manifest.json"
    if not path.exists():
        return False
    try:
        return json.loads(path.read_text()).get("stage_key") == key
    except ValueError:
        return False


class Pipeline:
    """Lazily builds and caches data, CVAE and DLow models for one config."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.root = Path(cfg.out)
        self.cache = self.root / "cache"
        self._memo = {}

    # -- stages ---------------------------------------------------------------

    def data(self, control: bool = False):
        memo = ("data", control)
        if memo in self._memo:
            return self._memo[memo]
        spec = self.cfg.data_spec(control)
        key = _sha({"spec": asdict(spec)})
        d = self.cache / f"data-{key[:12]}"
        if _cached(d, key):
            train, test = load_split(d / "train.txt"), load_split(d / "test.txt")
        else:
            log.info("generating %s data", "control" if control else "benchmark")
            train, test = generate_from_spec(spec)
            d.mkdir(parents=True, exist_ok=True)
            save_split(train, d / "train.txt")
            save_split(test, d / "test.txt")
            write_manifest(d, "gen-data", self.cfg, key, {}, {"spec": asdict(spec)})
        self._memo[memo] = (train, test)
        return train, test

    def cvae(self, control: bool = False):
        memo = ("cvae", control)
        if memo in self._memo:
            return self._memo[memo]
        train, _ = self.data(control)
        arch = self.cfg.cvae_arch(control)
        fp = train.fingerprint()
        key = _sha({"arch": asdict(arch), "train": asdict(self.cfg.cvae_train), "seed": self.cfg.seed, "data": fp})
        d = self.cache / f"cvae-{key[:12]}"
        if _cached(d, key):
            model = load_cvae(d)
        else:
            log.info("training CVAE (%d epochs)", self.cfg.cvae_train.epochs)
            model = train_cvae(train, arch, self.cfg.cvae_train, seed=self.cfg.seed)
            save_cvae(model, d, self.cfg.seed, fp)
            write_manifest(d, "train-cvae", self.cfg, key, {"train_data": fp})
        self._memo[memo] = model
        return model

    def dlow(self, control: bool = False, **overrides):
        dcfg = self.cfg.dlow_config(control, **overrides)
        memo = ("dlow", control, _sha(asdict(dcfg)))
        if memo in self._memo:
            return self._memo[memo]
        train, _ = self.data(control)
        cvae = self.cvae(control)
        key = _sha({"dlow": asdict(dcfg), "seed": self.cfg.seed, "cvae": cvae.frozen_checksum, "data": train.fingerprint()})
        d = self.cache / f"dlow-{key[:12]}"
        if _cached(d, key):
            model = load_dlow(d, cvae)
        else:
            log.info("training DLow %s", overrides or "")
            model = train_dlow(train, cvae, dcfg, seed=self.cfg.seed)
            save_dlow(model, d, self.cfg.seed)
            write_manifest(
                d, "train-dlow", self.cfg, key, {"cvae": cvae.frozen_checksum, "train_data": train.fingerprint()}
            )
        self._memo[memo] = model
        return model

    # -- helpers --------------------------------------------------------------

    def stage_dir(self, name: str) -> Path:
        d = self.root / name
        d.mkdir(parents=True, exist_ok=True)
        return d

    def evaluation_inputs(self, control: bool = False):
        train, test = self.data(control)
        mm = build_multimodal_gt(test, self.cfg.tau_mm(control))
        return test, mm, ModeOracle.from_split(train)

    def curves(self, samplers: dict, K_list):
        test, mm, oracle = self.evaluation_inputs()
        ev = self.cfg.eval
        return {
            name: evaluate_curve(s, test, mm, K_list, ev.num_eval_eps, self.cfg.seed + 1, oracle)
            for name, s in samplers.items()
        }

    def inputs(self, control: bool = False, *models) -> dict:
        train, test = self.data(control)
        out = {"train_data": train.fingerprint(), "test_data": test.fingerprint()}
        for m in models:
            if hasattr(m, "mapping"):
                out["dlow"] = state_checksum(m.mapping.state_dict())
            else:
                out["cvae"] = m.frozen_checksum
        return out

    def finish(self, stage: str, text: str, payload: dict, inputs: dict) -> Path:
        d = self.stage_dir(stage)
        (d / "report.txt").write_text(text + "\n")
        dump_json(payload, d / "report.json")
        write_manifest(d, stage, self.cfg, self.cfg.hash(), inputs)
        return d


def _fan_context(p: Pipeline, control=False):
    _, test = p.data(control)
    i = p.cfg.eval.context_index
    if not 0 <= i < len(test):
        raise ConfigError(f"[eval] context_index {i} outside the test split (size {len(test)})")
    return i, torch.as_tensor(test.contexts[i], dtype=torch.float32), test.futures[i]


# -- commands -------------------------------------------------------------------


def cmd_gen_data(p: Pipeline):
    train, test = p.data()
    rows = {}
    for split in (train, test):
        counts = np.bincount(split.modes, minlength=p.cfg.data.num_modes)
        rows[split.name] = {f"mode {m}": int(c) for m, c in enumerate(counts)}
    cols = tuple(f"mode {m}" for m in range(p.cfg.data.num_modes))
    text = format_table(rows, cols, "items per mode")
    payload = {
        "train": {"items": len(train), "fingerprint": train.fingerprint()},
        "test": {"items": len(test), "fingerprint": test.fingerprint()},
        "counts": rows,
    }
    return p.finish("gen-data", text, payload, p.inputs())


def cmd_train_cvae(p: Pipeline):
    model = p.cvae()
    last = model.train_log[-1]
    rows = {"cvae": {k: float(last[k]) for k in ("loss", "recon", "kl")}}
    text = format_table(rows, ("loss", "recon", "kl"), f"CVAE after {len(model.train_log)} epochs")
    payload = {"checksum": model.frozen_checksum, "train_log": model.train_log}
    return p.finish("train-cvae", text, payload, p.inputs(False, model))


def cmd_train_dlow(p: Pipeline):
    model = p.dlow()
    last = model.train_log[-1]
    cols = ("total", "kl", "e_d", "e_r", "e_s")
    rows = {"dlow": {k: float(last[k]) for k in cols}}
    text = format_table(rows, cols, f"DLow after {len(model.train_log)} epochs (sigma_d = {model.config.sigma_d:.6g})")
    payload = {"config": asdict(model.config), "train_log": model.train_log}
    return p.finish("train-dlow", text, payload, p.inputs(False, p.cvae(), model))


def cmd_eval(p: Pipeline, ks=None):
    ks = sorted(set(ks or [p.cfg.eval.k]))
    cvae, model = p.cvae(), p.dlow()
    curves = p.curves({"random": random_sampler(cvae), "dlow": dlow_sampler(model)}, ks)
    rows, payload = {}, {}
    for K in ks:
        for name in ("random", "dlow"):
            rows[f"{name} K={K}"] = curves[name][K].row()
            payload[f"{name} K={K}"] = curves[name][K].to_dict(per_item=False)
    text = format_table(rows, title="DLow vs. random CVAE sampling")
    _sample_figures(p, cvae, model, p.stage_dir("eval"), max(ks))
    return p.finish("eval", text, payload, p.inputs(False, cvae, model))


def _sample_figures(p: Pipeline, cvae, model, d: Path, K: int):
    _, test = p.data()
    i, c, truth = _fan_context(p)
    gen = torch.Generator().manual_seed(p.cfg.seed + 2)
    sets = {
        "random": sample_random(c, cvae, K, gen).numpy(),
        "dlow": dlow_sampler(model)(c.unsqueeze(0), K, gen)[0].numpy(),
    }
    plotting.plot_sample_fans(test.contexts[i], sets, d / "fans.png", truth)
    n = min(len(test), 30)
    ctx = torch.as_tensor(test.contexts[:n], dtype=torch.float32)
    pooled = {
        "random": sample_random(ctx, cvae, K, gen).numpy(),
        "dlow": dlow_sampler(model)(ctx, K, gen).numpy(),
    }
    for j in range(test.V // 2):
        plotting.plot_end_poses(test.contexts[:n], pooled, d / f"end_poses_joint{j}.png", joint=j)


def cmd_ablate(p: Pipeline):
    K = p.cfg.eval.k
    samplers = {name: dlow_sampler(p.dlow(**ov)) for name, ov in ABLATIONS.items()}
    curves = p.curves(samplers, [K])
    rows = {name: {m: getattr(curves[name][K], m) for m in METRIC_NAMES} for name in ABLATIONS}
    text = format_table(rows, METRIC_NAMES, f"ablation, K={K}")
    payload = {
        name: {"metrics": curves[name][K].to_dict(per_item=False), "overrides": ov}
        for name, ov in ABLATIONS.items()
    }
    return p.finish("ablate", text, payload, p.inputs(False, p.cvae()))


def sigma_kl(model, contexts) -> float:
    """Mean over contexts of the summed per-map KL (slot 1 excluded with identity_first)."""
    with torch.no_grad():
        A, b = model.mapping(torch.as_tensor(contexts, dtype=torch.float32))
        kl = affine_kl(A.double(), b.double(), model.mapping.diagonal)
    if model.config.identity_first:
        kl = kl[:, 1:]
    return float(kl.sum(-1).mean())


def cmd_sweep_beta(p: Pipeline):
    K = p.cfg.eval.k
    _, test = p.data()
    models = {beta: p.dlow(beta=beta) for beta in p.cfg.eval.betas}
    curves = p.curves({b: dlow_sampler(m) for b, m in models.items()}, [K])
    rows, payload = {}, {}
    for beta, m in models.items():
        r = curves[beta][K]
        vals = {"apd": r.apd, "ade": r.ade, "sum_kl": sigma_kl(m, test.contexts)}
        rows[f"beta={beta:g}"] = vals
        payload[f"{beta:g}"] = dict(vals, beta=beta, metrics=r.to_dict(per_item=False))
    text = format_table(rows, ("apd", "ade", "sum_kl"), f"beta sweep, K={K}")
    i, c, _ = _fan_context(p)
    gen = torch.Generator().manual_seed(p.cfg.seed + 2)
    eps = models[next(iter(models))].draw_eps(1, gen)[0]
    fans = {beta: m.sample(c, eps).numpy() for beta, m in models.items()}
    plotting.plot_beta_fans(test.contexts[i], fans, p.stage_dir("sweep-beta") / "beta_fans.png")
    return p.finish("sweep-beta", text, payload, p.inputs(False, p.cvae()))


def slot_stability(draws, context, oracle: ModeOracle) -> dict:
    """How much each slot moves as eps varies, relative to the spread across slots.

    ``draws`` is ``(R, K, T, V)``. ``within`` is the mean distance of a slot's
    end poses to that slot's mean end pose; ``between`` the mean distance
    between different slots' mean end poses; ``consistency`` the share of
    draws that land in the slot's most frequent mode.
    """
    ends = np.asarray(draws)[:, :, -1]
    R, K = ends.shape[:2]
    centers = ends.mean(0)
    within = np.linalg.norm(ends - centers[None], axis=-1).mean(0)
    pair = np.linalg.norm(centers[:, None] - centers[None], axis=-1)
    between = pair[~np.eye(K, dtype=bool)].mean()
    consistency = []
    for k in range(K):
        lab = oracle.labels(np.asarray(draws)[:, k], context)
        counts = np.bincount(lab[lab >= 0], minlength=1)
        consistency.append(counts.max() / R if len(lab) else 0.0)
    return {
        "within": [float(v) for v in within],
        "between": float(between),
        "ratio": float(within.mean() / between) if between > 0 else float("inf"),
        "consistency": [float(v) for v in consistency],
    }


def cmd_vary_eps(p: Pipeline):
    model = p.dlow()
    train, test = p.data()
    i, c, _ = _fan_context(p)
    gen = torch.Generator().manual_seed(p.cfg.seed + 3)
    eps = model.draw_eps(p.cfg.eval.num_eps, gen)
    draws = model.sample(c.expand(len(eps), -1, -1), eps).numpy()
    stats = slot_stability(draws, test.contexts[i], ModeOracle.from_split(train))
    rows = {
        f"slot {k + 1}": {"within": stats["within"][k], "consistency": stats["consistency"][k]}
        for k in range(model.K)
    }
    rows["all"] = {"within": float(np.mean(stats["within"])), "consistency": float(np.mean(stats["consistency"]))}
    title = (
        f"{p.cfg.eval.num_eps} eps draws, context {i}: between-slot spread {stats['between']:.4f}, "
        f"within/between {stats['ratio']:.4f}"
    )
    text = format_table(rows, ("within", "consistency"), title)
    plotting.plot_eps_variation(test.contexts[i], draws, p.stage_dir("vary-eps") / "eps_variation.png")
    return p.finish("vary-eps", text, {"context_index": i, **stats}, p.inputs(False, p.cvae(), model))


def control_stats(X, x_ref, J_s, J_d, skip: int = 0):
    """Mean L2 distance of the ``J_s`` features to the reference, and ``J_d``-subspace APD.

    The first ``skip`` samples are left out of the distance (the reference slot).
    """
    X = np.asarray(X, dtype=np.float64)
    diff = (X[skip:, :, list(J_s)] - np.asarray(x_ref)[None, :, list(J_s)]).reshape(len(X) - skip, -1)
    return float(np.linalg.norm(diff, axis=1).mean()), apd(X[:, :, list(J_d)])


def cmd_control(p: Pipeline):
    dcfg = p.cfg.dlow_config(control=True)
    _, test = p.data(control=True)
    cvae, model = p.cvae(control=True), p.dlow(control=True)
    gen = torch.Generator().manual_seed(p.cfg.seed + 1)
    ctx = torch.as_tensor(test.contexts, dtype=torch.float32)
    ref = torch.as_tensor(test.futures, dtype=torch.float32)
    rand = sample_random(ctx, cvae, dcfg.K, gen).numpy()
    res = {"random": [], "dlow": []}
    for i in range(len(test)):
        res["random"].append(control_stats(rand[i], test.futures[i], dcfg.J_s, dcfg.J_d))
        X, _, _ = model.sample_with_reference(ctx[i], ref[i])
        res["dlow"].append(control_stats(X.numpy(), test.futures[i], dcfg.J_s, dcfg.J_d, skip=1))
    rows = {
        name: {"js_dist": float(np.mean([r[0] for r in v])), "jd_apd": float(np.mean([r[1] for r in v]))}
        for name, v in res.items()
    }
    text = format_table(rows, ("js_dist", "jd_apd"), f"controllable prediction, J_s={list(dcfg.J_s)} J_d={list(dcfg.J_d)}")
    payload = dict(rows, J_s=list(dcfg.J_s), J_d=list(dcfg.J_d), K=dcfg.K)
    i = p.cfg.eval.context_index % len(test)
    X, _, _ = model.sample_with_reference(ctx[i], ref[i])
    d = p.stage_dir("control")
    plotting.plot_control(test.contexts[i], test.futures[i], X.numpy(), d / "control.png", dcfg.J_s, dcfg.J_d)
    return p.finish("control", text, payload, p.inputs(True, cvae, model))


def cmd_curve_k(p: Pipeline):
    ks = sorted(set(p.cfg.eval.k_list))
    cvae, model = p.cvae(), p.dlow()
    curves = p.curves({"random": random_sampler(cvae), "dlow": dlow_sampler(model)}, ks)
    rows, payload = {}, {}
    for name, curve in curves.items():
        payload[name] = {str(K): curve[K].to_dict(per_item=False) for K in ks}
        for K in ks:
            rows[f"{name} K={K}"] = curve[K].row()
    text = format_table(rows, title="metrics vs. K")
    plot_data = {name: {K: curve[K].row() for K in ks} for name, curve in curves.items()}
    plotting.plot_metrics_vs_k(plot_data, p.stage_dir("curve-k") / "metrics_vs_k.png")
    return p.finish("curve-k", text, payload, p.inputs(False, cvae, model))


def cmd_plot(p: Pipeline):
    cvae, model = p.cvae(), p.dlow()
    d = p.stage_dir("plot")
    _sample_figures(p, cvae, model, d, p.cfg.eval.k)
    names = sorted(f.name for f in d.glob("*.png"))
    text = "figures\n" + "\n".join(f"  {n}" for n in names)
    return p.finish("plot", text, {"figures": names}, p.inputs(False, cvae, model))


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-cvae": cmd_train_cvae,
    "train-dlow": cmd_train_dlow,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "sweep-beta": cmd_sweep_beta,
    "vary-eps": cmd_vary_eps,
    "control": cmd_control,
    "curve-k": cmd_curve_k,
    "plot": cmd_plot,
}


def run(command: str, cfg: ExperimentConfig, ks=None) -> Path:
    """Run one command; returns its stage directory."""
    p = Pipeline(cfg)
    if command == "eval":
        return cmd_eval(p, ks)
    return COMMANDS[command](p)
