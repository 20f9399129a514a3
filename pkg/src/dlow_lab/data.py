"""Synthetic multimodal motion data, motion file I/O and multi-modal ground truth.

Poses are V-dimensional vectors read as V/2 planar joints ``(x, y)``. A split
stores contexts ``(N, H, V)`` and futures ``(N, T, V)`` as dense arrays; every
future continues from the last pose of its context and is root-relative (no
global translation).
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, ParseError

__all__ = [
    "MotionSequence",
    "DatasetSplit",
    "MultiModalGroundTruth",
    "SyntheticSpec",
    "generate_synthetic",
    "mode_displacements",
    "build_multimodal_gt",
    "default_tau",
    "save_split",
    "load_split",
]


@dataclass(frozen=True)
class MotionSequence:
    """A ``(num_steps, V)`` array of poses sampled at ``frame_rate``."""

    frames: np.ndarray
    frame_rate: float = 25.0

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[0] < 1 or frames.shape[1] < 2:
            raise ConfigError(f"motion must be (num_steps>=1, V>=2), got {frames.shape}")
        if not np.all(np.isfinite(frames)):
            raise ConfigError("motion contains non-finite entries")
        if not self.frame_rate > 0:
            raise ConfigError("frame_rate must be positive")
        object.__setattr__(self, "frames", frames)

    @property
    def num_steps(self) -> int:
        return self.frames.shape[0]

    @property
    def V(self) -> int:
        return self.frames.shape[1]


@dataclass
class DatasetSplit:
    contexts: np.ndarray
    futures: np.ndarray
    modes: Optional[np.ndarray] = None
    frame_rate: float = 25.0
    name: str = "train"

    def __post_init__(self):
        self.contexts = np.ascontiguousarray(self.contexts, dtype=np.float64)
        self.futures = np.ascontiguousarray(self.futures, dtype=np.float64)
        if self.contexts.ndim != 3 or self.futures.ndim != 3:
            raise ConfigError("contexts and futures must be (N, steps, V) arrays")
        if self.contexts.shape[0] != self.futures.shape[0]:
            raise ConfigError("contexts and futures differ in item count")
        if self.contexts.shape[2] != self.futures.shape[2]:
            raise ConfigError("contexts and futures differ in pose dimension")
        if self.modes is not None:
            self.modes = np.asarray(self.modes, dtype=np.int64)
            if self.modes.shape != (len(self),):
                raise ConfigError("modes must hold one label per item")

    def __len__(self) -> int:
        return self.contexts.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, DatasetSplit):
            return NotImplemented
        same_modes = (self.modes is None and other.modes is None) or (
            self.modes is not None
            and other.modes is not None
            and np.array_equal(self.modes, other.modes)
        )
        return (
            self.name == other.name
            and self.frame_rate == other.frame_rate
            and np.array_equal(self.contexts, other.contexts)
            and np.array_equal(self.futures, other.futures)
            and same_modes
        )

    @property
    def H(self) -> int:
        return self.contexts.shape[1]

    @property
    def T(self) -> int:
        return self.futures.shape[1]

    @property
    def V(self) -> int:
        return self.contexts.shape[2]

    def item(self, i: int) -> tuple[MotionSequence, MotionSequence]:
        return (
            MotionSequence(self.contexts[i], self.frame_rate),
            MotionSequence(self.futures[i], self.frame_rate),
        )

    def subset(self, index) -> "DatasetSplit":
        index = np.asarray(index)
        return DatasetSplit(
            self.contexts[index],
            self.futures[index],
            None if self.modes is None else self.modes[index],
            self.frame_rate,
            self.name,
        )

    def fingerprint(self) -> str:
        """SHA-256 over shapes and raw array bytes."""
        h = hashlib.sha256()
        h.update(repr((self.contexts.shape, self.futures.shape, self.frame_rate)).encode())
        h.update(self.contexts.tobytes())
        h.update(self.futures.tobytes())
        if self.modes is not None:
            h.update(self.modes.tobytes())
        return h.hexdigest()


@dataclass
class MultiModalGroundTruth:
    """Per test item, the indices of items whose contexts lie within ``tau``.

    ``groups[i]`` always contains ``i`` itself.
    """

    groups: list
    tau: float

    def futures(self, split: DatasetSplit, i: int) -> np.ndarray:
        return split.futures[self.groups[i]]


@dataclass(frozen=True)
class SyntheticSpec:
    """Everything the generator needs to reproduce a benchmark.

    ``mode_weights`` sets the share of each continuation mode (rolled by one
    position per context prototype, so the dominant mode depends on the
    context). ``lead_joint_modes`` limits the first joint to that many
    distinct motions shared across modes, which leaves the remaining joints
    free to vary while the first joint agrees.
    """

    num_modes: int = 5
    items_per_mode: int = 200
    H: int = 5
    T: int = 20
    V: int = 4
    noise_scale: float = 0.05
    seed: int = 0
    num_prototypes: int = 3
    mode_weights: Optional[tuple] = None
    lead_joint_modes: Optional[int] = None
    mode_radius: float = 1.0
    test_fraction: float = 0.2
    frame_rate: float = 25.0


def validate_spec(spec: SyntheticSpec):
    if spec.num_modes < 2:
        raise ConfigError("num_modes must be >= 2")
    if spec.items_per_mode < 1:
        raise ConfigError("items_per_mode must be >= 1")
    if spec.H < 1 or spec.T < 1:
        raise ConfigError("H and T must be >= 1")
    if spec.V < 2 or spec.V % 2:
        raise ConfigError("V must be even and >= 2 (planar joints)")
    if spec.noise_scale < 0 or not math.isfinite(spec.noise_scale):
        raise ConfigError("noise_scale must be a finite non-negative number")
    if spec.num_prototypes < 1:
        raise ConfigError("num_prototypes must be >= 1")
    if spec.mode_weights is not None:
        w = np.asarray(spec.mode_weights, dtype=float)
        if w.shape != (spec.num_modes,) or np.any(w < 0) or w.sum() <= 0:
            raise ConfigError("mode_weights must be num_modes non-negative numbers")
    if spec.lead_joint_modes is not None and not 1 <= spec.lead_joint_modes <= spec.num_modes:
        raise ConfigError("lead_joint_modes must lie in [1, num_modes]")
    if not 0 < spec.test_fraction <= 1:
        raise ConfigError("test_fraction must lie in (0, 1]")


def _apportion(total: int, weights: np.ndarray) -> np.ndarray:
    # largest-remainder rounding
    quota = total * weights / weights.sum()
    counts = np.floor(quota).astype(int)
    order = np.argsort(-(quota - counts), kind="stable")
    counts[order[: total - counts.sum()]] += 1
    return counts


def mode_displacements(spec: SyntheticSpec) -> np.ndarray:
    """End-pose displacement of every mode relative to the last context pose, ``(M, V)``."""
    J = spec.V // 2
    M = spec.num_modes
    out = np.zeros((M, spec.V))
    for m in range(M):
        for j in range(J):
            if j == 0 and spec.lead_joint_modes is not None:
                n, idx = spec.lead_joint_modes, m % spec.lead_joint_modes
            else:
                n, idx = M, m
            angle = 2 * math.pi * idx / n + j * math.pi / M
            out[m, 2 * j] = spec.mode_radius * math.cos(angle)
            out[m, 2 * j + 1] = spec.mode_radius * math.sin(angle)
    return out


def _context_prototypes(spec: SyntheticSpec) -> np.ndarray:
    J = spec.V // 2
    t = np.arange(spec.H) / spec.frame_rate
    protos = np.zeros((spec.num_prototypes, spec.H, spec.V))
    for p in range(spec.num_prototypes):
        rot = 2 * math.pi * p / spec.num_prototypes
        for j in range(J):
            radius = 0.5 * (j + 1)
            phase = rot + j * 0.7
            freq = 2.0 + p
            protos[p, :, 2 * j] = radius * np.cos(phase) + 0.2 * np.sin(2 * math.pi * freq * t + p)
            protos[p, :, 2 * j + 1] = radius * np.sin(phase) + 0.2 * np.cos(2 * math.pi * freq * t + p)
    return protos


def _progress(T: int) -> np.ndarray:
    u = np.arange(1, T + 1) / T
    return 3 * u**2 - 2 * u**3


def _truncated_noise(rng: np.random.Generator, shape) -> np.ndarray:
    return np.clip(rng.standard_normal(shape), -3.0, 3.0)


def _make_split(spec, rng, total, name) -> DatasetSplit:
    protos = _context_prototypes(spec)
    disp = mode_displacements(spec)
    s = _progress(spec.T)[:, None]
    base_w = (
        np.ones(spec.num_modes)
        if spec.mode_weights is None
        else np.asarray(spec.mode_weights, dtype=float)
    )
    per_proto = _apportion(total, np.ones(spec.num_prototypes))
    proto_idx, mode_idx = [], []
    for p, n_p in enumerate(per_proto):
        counts = _apportion(int(n_p), np.roll(base_w, p))
        for m, n_m in enumerate(counts):
            proto_idx += [p] * int(n_m)
            mode_idx += [m] * int(n_m)
    order = rng.permutation(len(proto_idx))
    proto_idx = np.asarray(proto_idx, dtype=np.int64)[order]
    mode_idx = np.asarray(mode_idx, dtype=np.int64)[order]

    n = len(proto_idx)
    ns = spec.noise_scale
    ctx_noise = _truncated_noise(rng, (n, spec.H, spec.V))
    end_noise = _truncated_noise(rng, (n, spec.V))
    contexts = protos[proto_idx] + ns * ctx_noise
    last_clean = protos[proto_idx, -1]
    clean_future = last_clean[:, None, :] + s[None] * disp[mode_idx][:, None, :]
    # deviation is a convex blend of the context's last-frame noise and an
    # end-pose perturbation, so it never exceeds 3 * noise_scale
    fut_noise = (1 - s[None]) * ctx_noise[:, -1:, :] + s[None] * end_noise[:, None, :]
    futures = clean_future + ns * fut_noise
    return DatasetSplit(contexts, futures, mode_idx, spec.frame_rate, name)


def generate_synthetic(
    num_modes: int = 5,
    items_per_mode: int = 200,
    H: int = 5,
    T: int = 20,
    V: int = 4,
    noise_scale: float = 0.05,
    seed: int = 0,
    **options,
) -> tuple[DatasetSplit, DatasetSplit]:
    """Build train/test splits whose conditional future distribution is multimodal.

    Each context is one of a few shared prototypes plus noise; each prototype
    continues into ``num_modes`` distinct smooth motions with separated end
    poses. The train split has ``num_modes * items_per_mode`` items, the test
    split ``test_fraction`` of that. Keyword ``options`` are the remaining
    :class:`SyntheticSpec` fields.
    """
    spec = SyntheticSpec(num_modes, items_per_mode, H, T, V, noise_scale, seed, **options)
    return generate_from_spec(spec)


def generate_from_spec(spec: SyntheticSpec) -> tuple[DatasetSplit, DatasetSplit]:
    validate_spec(spec)
    rng = np.random.default_rng(spec.seed)
    n_train = spec.num_modes * spec.items_per_mode
    n_test = max(spec.num_modes, int(round(spec.test_fraction * n_train)))
    train = _make_split(spec, rng, n_train, "train")
    test = _make_split(spec, rng, n_test, "test")
    return train, test


def _pairwise_context_distance(split: DatasetSplit) -> np.ndarray:
    flat = split.contexts.reshape(len(split), -1)
    diff = flat[:, None, :] - flat[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def default_tau(split: DatasetSplit) -> float:
    """0.1 times the RMS norm of the flattened contexts."""
    flat = split.contexts.reshape(len(split), -1)
    return 0.1 * float(np.sqrt(np.mean(np.sum(flat**2, axis=1))))


def build_multimodal_gt(split: DatasetSplit, tau: float) -> MultiModalGroundTruth:
    if not tau >= 0:
        raise ConfigError("tau must be non-negative")
    dist = _pairwise_context_distance(split)
    groups = [np.flatnonzero(row <= tau) for row in dist]
    return MultiModalGroundTruth(groups, float(tau))


# -- motion text files ------------------------------------------------------


def _fmt(values) -> str:
    return " ".join(repr(float(v)) for v in np.ravel(values))


def save_split(split: DatasetSplit, path) -> Path:
    """Write ``split`` in the plain-text motion format.

    Header ``H T V frame_rate count``, then per item a ``context:`` line and a
    ``future:`` line of row-major (time-major) floats and, when labels are
    present, a ``mode:`` line.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{split.H} {split.T} {split.V} {split.frame_rate!r} {len(split)}"]
    for i in range(len(split)):
        lines.append("context: " + _fmt(split.contexts[i]))
        lines.append("future: " + _fmt(split.futures[i]))
        if split.modes is not None:
            lines.append(f"mode: {int(split.modes[i])}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _parse_floats(path, lineno, text, expected, field_name):
    try:
        vals = [float(tok) for tok in text.split()]
    except ValueError as exc:
        raise ParseError(f"{path}:{lineno}: field '{field_name}': {exc}") from None
    if len(vals) != expected:
        raise ParseError(
            f"{path}:{lineno}: field '{field_name}' has {len(vals)} values, expected {expected}"
        )
    return vals


def load_split(path, name: Optional[str] = None) -> DatasetSplit:
    """Read a split written by :func:`save_split`. ``name`` defaults to the file stem."""
    path = Path(path)
    raw = path.read_text(encoding="utf-8").splitlines()
    if not raw:
        raise ParseError(f"{path}:1: empty file, expected header 'H T V frame_rate count'")
    head = raw[0].split()
    if len(head) != 5:
        raise ParseError(f"{path}:1: header must be 'H T V frame_rate count'")
    try:
        H, T, V, count = int(head[0]), int(head[1]), int(head[2]), int(head[4])
        frame_rate = float(head[3])
    except ValueError:
        raise ParseError(f"{path}:1: header must be 'H T V frame_rate count'") from None

    contexts, futures, modes = [], [], []
    expect = "context"
    for lineno, line in enumerate(raw[1:], start=2):
        if not line.strip():
            continue
        key, sep, rest = line.partition(":")
        key = key.strip()
        if not sep:
            raise ParseError(f"{path}:{lineno}: expected '<field>: values'")
        if key == "mode":
            if expect != "context" or len(modes) != len(contexts) - 1:
                raise ParseError(f"{path}:{lineno}: field 'mode' out of place")
            try:
                modes.append(int(rest))
            except ValueError:
                raise ParseError(f"{path}:{lineno}: field 'mode' is not an integer") from None
        elif key != expect:
            raise ParseError(f"{path}:{lineno}: expected field '{expect}', found '{key}'")
        elif key == "context":
            contexts.append(_parse_floats(path, lineno, rest, H * V, key))
            expect = "future"
        else:
            futures.append(_parse_floats(path, lineno, rest, T * V, key))
            expect = "context"
    if expect != "context":
        raise ParseError(f"{path}:{len(raw)}: last item has no 'future' line")
    if len(contexts) != count:
        raise ParseError(f"{path}:1: header count {count} but {len(contexts)} items found")
    if modes and len(modes) != count:
        raise ParseError(f"{path}: 'mode' lines present for only {len(modes)} of {count} items")
    return DatasetSplit(
        np.asarray(contexts, dtype=np.float64).reshape(count, H, V),
        np.asarray(futures, dtype=np.float64).reshape(count, T, V),
        np.asarray(modes, dtype=np.int64) if modes else None,
        frame_rate,
        name if name is not None else path.stem,
    )
