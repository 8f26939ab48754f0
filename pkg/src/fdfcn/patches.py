"""Class-balanced patch sampling and minibatch assembly."""

from __future__ import annotations

import queue
import threading
from dataclasses import dataclass, field
from typing import Iterable, Iterator, NamedTuple

import numpy as np

from .blocks import extract_block
from .volume_io import CLASS_NAMES

INTENSITY_SCALE = 255.0


@dataclass(frozen=True)
class SamplerConfig:
    cap: int = 500
    doubled: tuple = ("CT", "WM")
    seed: int = 0
    classes: int = 12

    def __post_init__(self):
        if self.cap < 1:
            raise ValueError("cap must be at least 1")
        object.__setattr__(self, "doubled", tuple(self.doubled))

    def cap_for(self, cls: int) -> int:
        name = CLASS_NAMES[cls] if cls < len(CLASS_NAMES) else str(cls)
        return 2 * self.cap if name in self.doubled else self.cap


@dataclass
class PatchSample:
    center: tuple
    input: np.ndarray        # (1, E, E, E) intensities in [0, 1]
    coords: np.ndarray       # (6, e, e, e)
    target: np.ndarray       # (e, e, e) class labels
    subject: str = ""


def sample_centers(labels: np.ndarray, config: SamplerConfig) -> list:
    """Up to cap (or 2*cap for doubled classes) distinct centers per structure.

    Returns ``[(center, class), ...]`` grouped by class in ascending order.
    """
    rng = np.random.default_rng(config.seed)
    flat = np.asarray(labels).ravel()
    out = []
    for cls in range(1, config.classes):
        idx = np.flatnonzero(flat == cls)
        if idx.size == 0:
            continue
        take = min(config.cap_for(cls), idx.size)
        chosen = np.sort(rng.choice(idx, size=take, replace=False))
        for c in np.column_stack(np.unravel_index(chosen, labels.shape)):
            out.append((tuple(int(v) for v in c), cls))
    return out


def normalize_intensity(volume: np.ndarray) -> np.ndarray:
    return np.asarray(volume, dtype=np.float32) / INTENSITY_SCALE


def extract_sample(intensity: np.ndarray, labels: np.ndarray | None, coords: np.ndarray, center,
                   input_edge: int = 27, output_edge: int = 9, subject: str = "",
                   normalized: bool = False) -> PatchSample:
    """Input, coordinate and target blocks sharing one center; zero outside the volume."""
    vol = intensity if normalized else normalize_intensity(intensity)
    inp = extract_block(vol, center, input_edge)[None]
    crd = extract_block(coords, center, output_edge)
    tgt = (extract_block(labels, center, output_edge) if labels is not None
           else np.zeros((output_edge,) * 3, np.uint8))
    return PatchSample(tuple(center), inp.astype(np.float32), crd.astype(np.float32), tgt, subject)


class Batch(NamedTuple):
    inputs: np.ndarray     # (n, 1, E, E, E)
    coords: np.ndarray     # (n, 6, e, e, e)
    targets: np.ndarray    # (n, e, e, e)


def stack(samples) -> Batch:
    return Batch(np.stack([s.input for s in samples]),
                 np.stack([s.coords for s in samples]),
                 np.stack([s.target for s in samples]).astype(np.int64))


def epoch_order(count: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(count)


def make_minibatches(samples, batch: int = 60, seed: int = 0, epoch: int = 0) -> Iterator[Batch]:
    """Shuffle once per epoch (seeded by ``(seed, epoch)``) and stack; the last batch may be short."""
    order = epoch_order(len(samples), seed, epoch)
    for start in range(0, len(order), batch):
        yield stack([samples[i] for i in order[start:start + batch]])


_DONE = object()


def prefetch(batches: Iterable, capacity: int = 2) -> Iterator:
    """Produce items on a worker thread through a bounded queue."""
    q: queue.Queue = queue.Queue(maxsize=max(2, capacity))
    stop = threading.Event()
    errors = []

    def put(item):
        while not stop.is_set():
            try:
                q.put(item, timeout=0.05)
                return True
            except queue.Full:
                continue
        return False

    def work():
        try:
            for item in batches:
                if not put(item):
                    return
        except BaseException as exc:  # surfaced in the consumer
            errors.append(exc)
        put(_DONE)

    thread = threading.Thread(target=work, daemon=True)
    thread.start()
    try:
        while True:
            item = q.get()
            if item is _DONE:
                break
            yield item
    finally:
        stop.set()
        thread.join()
    if errors:
        raise errors[0]


@dataclass
class SubjectData:
    """One subject's volumes, ready for sampling."""
    subject: str
    intensity: np.ndarray           # normalized to [0, 1]
    labels: np.ndarray              # class indices
    coords: np.ndarray              # (6, d, h, w)
    mask: np.ndarray | None = field(default=None, repr=False)


def build_samples(subjects, config: SamplerConfig, input_edge: int = 27,
                  output_edge: int = 9) -> list:
    """Draw centers once per subject and extract every patch."""
    samples = []
    for i, subj in enumerate(subjects):
        cfg = SamplerConfig(config.cap, config.doubled, config.seed + i, config.classes)
        for center, _ in sample_centers(subj.labels, cfg):
            samples.append(extract_sample(subj.intensity, subj.labels, subj.coords, center,
                                          input_edge, output_edge, subj.subject, normalized=True))
    return samples
