"""Synthetic spectrogram tasks, deterministic splits, and the ``.aat`` tensor container."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np

from .errors import ConfigurationError, ContractError, FormatError

MAGIC = b"AATT"
VERSION = 1


@dataclass
class SpectrogramSample:
    spectrogram: np.ndarray  # [T, F]
    label: int | np.ndarray  # class index, or binary vector [C] for multi-label


@dataclass(frozen=True)
class SyntheticTaskSpec:
    num_classes: int = 4
    time: int = 64
    freq: int = 64
    task_kind: Literal["single-label", "multi-label"] = "single-label"
    pattern_energy: float = 3.0
    noise_sigma: float = 0.5
    length_profile: tuple[int, ...] = ()
    seed: int = 0
    cells: tuple[int, int] = (4, 4)

    def __post_init__(self):
        if self.num_classes <= 0 or self.time <= 0 or self.freq <= 0:
            raise ConfigurationError("num_classes, time and freq must be positive")
        if self.task_kind not in ("single-label", "multi-label"):
            raise ConfigurationError(f"unknown task_kind {self.task_kind!r}")
        if self.pattern_energy <= 0:
            raise ConfigurationError("pattern_energy must be positive")
        if self.noise_sigma < 0:
            raise ConfigurationError("noise_sigma must be nonnegative")
        if any(t <= 0 for t in self.length_profile):
            raise ConfigurationError("length_profile entries must be positive")

    @property
    def lengths(self) -> tuple[int, ...]:
        return tuple(self.length_profile) or (self.time,)

    def check_patch_size(self, patch_size: int) -> None:
        bad = [t for t in self.lengths + (self.time,) if t % patch_size]
        if bad or self.freq % patch_size:
            raise ConfigurationError(
                f"task lengths {self.lengths} x freq {self.freq} are not all divisible by patch size {patch_size}"
            )


def class_rectangles(spec: SyntheticTaskSpec) -> list[tuple[float, float, float, float]]:
    """One time-frequency rectangle per class as fractions ``(t0, t1, f0, f1)``.

    The plane is cut into ``cells`` and each class gets its own cell, so
    rectangles never overlap. Inside the cell the rectangle's extent and
    offset are random (at least half the cell each way).
    """
    ct, cf = spec.cells
    capacity = ct * cf
    if spec.num_classes > capacity:
        raise ConfigurationError(
            f"cannot place {spec.num_classes} disjoint class patterns in a {ct}x{cf} cell grid"
        )
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0]))
    cells = rng.permutation(capacity)[: spec.num_classes]
    rects = []
    for cell in cells:
        row, col = divmod(int(cell), cf)
        height = rng.uniform(0.5, 1.0)
        width = rng.uniform(0.5, 1.0)
        t0 = (row + rng.uniform(0.0, 1.0 - height)) / ct
        f0 = (col + rng.uniform(0.0, 1.0 - width)) / cf
        rects.append((t0, t0 + height / ct, f0, f0 + width / cf))
    return rects


def _pattern(rect, time: int, freq: int) -> np.ndarray:
    t0, t1, f0, f1 = rect
    lo_t, hi_t = int(round(t0 * time)), max(int(round(t1 * time)), int(round(t0 * time)) + 1)
    lo_f, hi_f = int(round(f0 * freq)), max(int(round(f1 * freq)), int(round(f0 * freq)) + 1)
    mask = np.zeros((time, freq))
    mask[lo_t:hi_t, lo_f:hi_f] = 1.0
    return mask


def class_templates(spec: SyntheticTaskSpec, time: int | None = None) -> np.ndarray:
    """Noise-free ``[C, T, F]`` patterns at unit energy."""
    time = spec.time if time is None else time
    return np.stack([_pattern(r, time, spec.freq) for r in class_rectangles(spec)])


def _make_samples(spec: SyntheticTaskSpec, n: int, stream: int) -> list[SpectrogramSample]:
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, stream]))
    lengths = spec.lengths
    templates = {t: class_templates(spec, t) for t in lengths}
    c = spec.num_classes
    samples = []
    for i in range(n):
        # lengths cycle once per full round of classes so class and length stay independent
        time = lengths[(i // c) % len(lengths)]
        noise = rng.normal(0.0, spec.noise_sigma, size=(time, spec.freq)) if spec.noise_sigma > 0 else np.zeros((time, spec.freq))
        if spec.task_kind == "single-label":
            label = i % c
            active = np.zeros(c)
            active[label] = 1.0
        else:
            active = (rng.random(c) < 0.3).astype(np.float64)
            if not active.any():
                active[rng.integers(c)] = 1.0
            label = active
        pattern = np.tensordot(active, templates[time], axes=1)
        samples.append(SpectrogramSample(noise + spec.pattern_energy * pattern, label))
    return samples


def generate_dataset(spec: SyntheticTaskSpec, n_train: int, n_test: int):
    """Deterministic (train, test) lists of :class:`SpectrogramSample`."""
    if n_train < 1 or n_test < 1:
        raise ContractError("n_train and n_test must be at least 1")
    class_rectangles(spec)  # fail early on impossible layouts
    return _make_samples(spec, n_train, 1), _make_samples(spec, n_test, 2)


def split(dataset, fraction: float, seed: int):
    if not 0 < fraction < 1:
        raise ContractError(f"fraction must lie in (0, 1), got {fraction}")
    n = len(dataset)
    cut = int(round(fraction * n))
    if cut == 0 or cut == n:
        raise ContractError(f"fraction {fraction} of {n} samples leaves an empty part")
    order = np.random.default_rng(seed).permutation(n)
    return [dataset[i] for i in order[:cut]], [dataset[i] for i in order[cut:]]


# ----------------------------------------------------------------------------
# tensor container
#
# little-endian: "AATT", u32 version, u32 count, then per entry
# u32 name length, utf-8 name, u32 rank, u64 dims, f64 payload


def encode_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, value in tensors.items():
        if not name:
            raise ContractError("tensor names must be non-empty")
        arr = np.asarray(value, dtype="<f8", order="C")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_tensors(buf: bytes) -> dict[str, np.ndarray]:
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated file: wanted {n} bytes, {len(buf) - pos} left", pos)
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise FormatError("bad magic, not an .aat tensor file", 0)
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        start = pos
        (name_len,) = struct.unpack("<I", take(4))
        try:
            name = take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("tensor name is not valid UTF-8", start + 4) from exc
        if not name:
            raise FormatError("empty tensor name", start)
        if name in out:
            raise FormatError(f"duplicate tensor name {name!r}", start)
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        payload = take(8 * int(np.prod(dims, dtype=np.int64)))
        out[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after last entry", pos)
    return out


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_tensors(tensors))


def load_tensors(path) -> dict[str, np.ndarray]:
    return decode_tensors(Path(path).read_bytes())


def dataset_to_tensors(samples) -> dict[str, np.ndarray]:
    tensors = {}
    for i, s in enumerate(samples):
        tensors[f"spectrogram/{i}"] = s.spectrogram
        tensors[f"label/{i}"] = np.asarray(s.label, dtype=np.float64)
    return tensors


def tensors_to_dataset(tensors: dict[str, np.ndarray]) -> list[SpectrogramSample]:
    n = sum(1 for k in tensors if k.startswith("spectrogram/"))
    samples = []
    for i in range(n):
        try:
            spec, label = tensors[f"spectrogram/{i}"], tensors[f"label/{i}"]
        except KeyError as exc:
            raise ContractError(f"dataset file is missing entry {exc.args[0]!r}") from None
        samples.append(SpectrogramSample(spec, int(label) if label.ndim == 0 else label))
    return samples


def save_dataset(path, samples) -> None:
    save_tensors(path, dataset_to_tensors(samples))


def load_dataset(path) -> list[SpectrogramSample]:
    return tensors_to_dataset(load_tensors(path))
