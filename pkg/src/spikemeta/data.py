"""Event-stream ingestion, episode sampling, and the synthetic task family.

Real recordings arrive as event streams (timestamp, x, y, polarity) and are
binned into binary frame tensors of shape (channels, 32, 32, steps) at 1 ms
per step, saturating multiple events per cell to one.  Because the full
event datasets are not redistributable, a seeded synthetic family of
spatiotemporal classes stands in at desk scale: each class is a smooth
random firing-probability map with a temporal rate envelope, and samples
are independent Bernoulli draws under per-sample spatial and temporal
jitter.  Meta splits partition classes disjointly into train/val/test.

Both sources implement the same interface (`split`, `sample_count`,
`sample`), so episode construction and the KNN baseline are source
agnostic.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .quantize import RandomSource

__all__ = [
    "EventStream",
    "BinnedSample",
    "Episode",
    "MetaSplit",
    "SyntheticTaskFamily",
    "ManifestDataset",
    "ManifestError",
    "bin_events",
    "events_from_binned",
    "build_episode",
    "generate_synthetic_family",
    "knn_predict",
    "knn_episode_accuracy",
    "write_event_file",
    "read_event_file",
    "read_manifest",
    "read_split_file",
]

EVENT_MAGIC = b"SPKEVT01"


class ManifestError(ValueError):
    """Dataset manifest missing or malformed."""


@dataclass
class EventStream:
    """Raw sensor events: microsecond timestamps, coordinates, polarity bit."""

    t: np.ndarray  # uint32 microseconds, non-decreasing
    x: np.ndarray
    y: np.ndarray
    polarity: np.ndarray
    dims: tuple[int, int]  # (width, height)

    def __post_init__(self) -> None:
        n = len(self.t)
        if not (len(self.x) == len(self.y) == len(self.polarity) == n):
            raise ValueError("event field lengths differ")
        if n and np.any(np.diff(self.t.astype(np.int64)) < 0):
            raise ValueError("timestamps must be non-decreasing")
        if n and (self.x.max(initial=0) >= self.dims[0] or self.y.max(initial=0) >= self.dims[1]):
            raise ValueError("event coordinates outside sensor dims")


@dataclass
class BinnedSample:
    """Binary frames (channels, height, width, steps) plus the class id."""

    frames: np.ndarray
    label: int

    @property
    def flat(self) -> np.ndarray:
        """(steps, channels*height*width) view for feeding the network."""
        c, h, w, steps = self.frames.shape
        return np.moveaxis(self.frames, -1, 0).reshape(steps, c * h * w)


def bin_events(
    stream: EventStream,
    target: tuple[int, int] = (32, 32),
    dt_us: int = 1000,
    duration_us: int = 100_000,
    channels: int = 2,
    label: int = -1,
) -> BinnedSample:
    """Downscale and bin an event stream into binary frames.

    Coordinates are sum-pooled onto the target grid with saturation (any
    event in a cell and step sets it to 1); events at or beyond the duration
    are dropped.  With channels=2 polarity selects the channel, with
    channels=1 polarities merge.
    """
    if channels not in (1, 2):
        raise ValueError("channels must be 1 or 2")
    tw, th = target
    steps = duration_us // dt_us
    frames = np.zeros((channels, th, tw, steps), dtype=np.uint8)
    keep = stream.t < duration_us
    if keep.any():
        xs = (stream.x[keep].astype(np.int64) * tw) // stream.dims[0]
        ys = (stream.y[keep].astype(np.int64) * th) // stream.dims[1]
        ts = stream.t[keep].astype(np.int64) // dt_us
        cs = stream.polarity[keep].astype(np.int64) if channels == 2 else np.zeros(keep.sum(), dtype=np.int64)
        frames[cs, ys, xs, ts] = 1
    return BinnedSample(frames=frames, label=label)


def events_from_binned(sample: BinnedSample, dt_us: int = 1000) -> EventStream:
    """Re-express a binned sample as one event per active cell and step."""
    c, y, x, t = np.nonzero(sample.frames)
    order = np.argsort(t, kind="stable")
    return EventStream(
        t=(t[order] * dt_us).astype(np.uint32),
        x=x[order].astype(np.uint16),
        y=y[order].astype(np.uint16),
        polarity=c[order].astype(np.uint8),
        dims=(sample.frames.shape[2], sample.frames.shape[1]),
    )


@dataclass(frozen=True)
class MetaSplit:
    """Disjoint class partitions for meta-train / meta-validation / meta-test."""

    train: tuple[int, ...]
    val: tuple[int, ...]
    test: tuple[int, ...]

    def __post_init__(self) -> None:
        parts = [set(self.train), set(self.val), set(self.test)]
        total = sum(len(p) for p in parts)
        if len(set().union(*parts)) != total:
            raise ValueError("meta split partitions must be pairwise disjoint")

    def part(self, name: str) -> tuple[int, ...]:
        return {"train": self.train, "val": self.val, "test": self.test}[name]


@dataclass
class Episode:
    """One N-way K-shot task with disjoint train and query samples."""

    way: int
    shot: int
    classes: tuple[int, ...]  # class id per output index, in sampled order
    train_frames: np.ndarray  # (way*shot, steps, input)
    train_outputs: np.ndarray  # (way*shot,) labeled output index per shot
    test_frames: np.ndarray  # (way*queries, steps, input)
    test_outputs: np.ndarray  # (way*queries,)


@dataclass
class SyntheticTaskFamily:
    """Seeded generator of spatiotemporal Bernoulli classes.

    A class is a smooth random firing-probability map (sums of Gaussian
    bumps) plus a temporal schedule: the grid is divided into fixed quadrant
    regions, the sample duration into equal slots, and each region fires
    during a class-specific subset of slots (`active_slots` of `slots`,
    gated by `temporal_depth`).  Every class activates each region for the
    same number of slots, so time-integrated pixel counts carry only the
    spatial cue; the slot structure is visible only to readouts with
    temporal dynamics.

    Per sample, the map is shifted by a real-valued offset drawn uniformly
    from [-jitter, jitter]^2 (bilinear interpolation), the schedule is
    rolled by up to `temporal_jitter` steps, and spikes are independent
    Bernoulli draws per cell and step.  Identical seeds give byte-identical
    datasets.
    """

    seed: int
    classes: int = 100
    samples_per_class: int = 30
    height: int = 12
    width: int = 12
    channels: int = 1
    steps: int = 100
    rate: float = 0.25
    background: float = 0.02
    blobs: int = 3
    blob_sigma: float = 1.6
    slots: int = 4
    active_slots: int = 2
    temporal_depth: float = 1.0
    jitter: float = 1.0
    temporal_jitter: float = 2.0
    rate_jitter: float = 0.15  # rate wobble amplitude per jitter unit
    split_ratio: tuple[int, int, int] = (64, 16, 20)
    _protos: dict = field(default_factory=dict, repr=False)
    _split: MetaSplit | None = field(default=None, repr=False)

    @property
    def rng(self) -> RandomSource:
        return RandomSource(self.seed)

    @property
    def input_dim(self) -> int:
        return self.channels * self.height * self.width

    @property
    def split(self) -> MetaSplit:
        if self._split is None:
            order = self.rng.stream("split").permutation(self.classes)
            n_trn = (self.classes * self.split_ratio[0]) // sum(self.split_ratio)
            n_val = (self.classes * self.split_ratio[1]) // sum(self.split_ratio)
            self._split = MetaSplit(
                train=tuple(int(c) for c in order[:n_trn]),
                val=tuple(int(c) for c in order[n_trn : n_trn + n_val]),
                test=tuple(int(c) for c in order[n_trn + n_val :]),
            )
        return self._split

    def sample_count(self, class_id: int) -> int:
        return self.samples_per_class

    @property
    def region_ids(self) -> np.ndarray:
        """Fixed quadrant id per grid cell, shared by all classes."""
        yy, xx = np.mgrid[0 : self.height, 0 : self.width]
        return ((yy >= self.height // 2).astype(int) * 2 + (xx >= self.width // 2)).reshape(-1)

    def _prototype(self, class_id: int) -> tuple[np.ndarray, np.ndarray]:
        """(probability map (H, W), schedule (regions, slots) of 0/1 gates)."""
        if class_id not in self._protos:
            gen = self.rng.stream(f"proto/{class_id}")
            yy, xx = np.mgrid[0 : self.height, 0 : self.width]
            mp = np.zeros((self.height, self.width))
            for _ in range(self.blobs):
                cy = gen.uniform(1, self.height - 1)
                cx = gen.uniform(1, self.width - 1)
                amp = gen.uniform(0.5, 1.0)
                mp += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * self.blob_sigma**2))
            mp = mp / mp.max()
            mp = self.background + (self.rate - self.background) * mp
            schedule = np.zeros((4, self.slots))
            for r in range(4):
                on = gen.choice(self.slots, size=self.active_slots, replace=False)
                schedule[r, on] = 1.0
            self._protos[class_id] = (mp, schedule)
        return self._protos[class_id]

    def sample(self, class_id: int, index: int) -> np.ndarray:
        """One (steps, input) binary sample, deterministic in (seed, class, index)."""
        if not (0 <= class_id < self.classes):
            raise ValueError(f"class {class_id} out of range")
        if not (0 <= index < self.samples_per_class):
            raise ValueError(f"sample index {index} out of range")
        mp, schedule = self._prototype(class_id)
        gen = self.rng.stream(f"sample/{class_id}/{index}")
        if self.jitter > 0:
            dy, dx = gen.uniform(-self.jitter, self.jitter, size=2)
            shifted = _shift2d_frac(mp, float(dy), float(dx), fill=self.background)
        else:
            shifted = mp
        # Region gating over time: active slots pass the map rate, inactive
        # ones attenuate by temporal_depth; the schedule rolls by the drawn
        # phase so absolute timing is not a cue.
        roll = int(np.rint(gen.uniform(-self.temporal_jitter, self.temporal_jitter)))
        slot_of_step = ((np.arange(self.steps) - roll) % self.steps) * self.slots // self.steps
        gate_rt = 1.0 - self.temporal_depth * (1.0 - schedule)  # (regions, slots)
        gates = gate_rt[:, slot_of_step]  # (regions, steps)
        flat = shifted.reshape(-1)
        prob = self.background + (flat[None, :] - self.background) * gates[self.region_ids, :].T
        wobble = self.rate_jitter * self.jitter
        if wobble > 0:
            prob = prob * max(0.1, 1.0 + float(gen.uniform(-wobble, wobble)))
        prob = np.clip(prob, 0.0, 0.95)
        if self.channels != 1:
            prob = np.tile(prob, (1, self.channels))
        draws = gen.random(size=prob.shape)
        return (draws < prob).astype(np.uint8)

    def with_jitter(self, jitter: float, temporal_jitter: float | None = None) -> "SyntheticTaskFamily":
        """Same family with a different difficulty level (fresh caches)."""
        return SyntheticTaskFamily(
            seed=self.seed,
            classes=self.classes,
            samples_per_class=self.samples_per_class,
            height=self.height,
            width=self.width,
            channels=self.channels,
            steps=self.steps,
            rate=self.rate,
            background=self.background,
            blobs=self.blobs,
            blob_sigma=self.blob_sigma,
            slots=self.slots,
            active_slots=self.active_slots,
            temporal_depth=self.temporal_depth,
            jitter=jitter,
            temporal_jitter=self.temporal_jitter if temporal_jitter is None else temporal_jitter,
            rate_jitter=self.rate_jitter,
            split_ratio=self.split_ratio,
        )


def _shift2d(mp: np.ndarray, dy: int, dx: int, fill: float) -> np.ndarray:
    out = np.full_like(mp, fill)
    h, w = mp.shape
    ys = slice(max(dy, 0), min(h + dy, h))
    xs = slice(max(dx, 0), min(w + dx, w))
    ys_src = slice(max(-dy, 0), min(h - dy, h))
    xs_src = slice(max(-dx, 0), min(w - dx, w))
    out[ys, xs] = mp[ys_src, xs_src]
    return out


def _shift2d_frac(mp: np.ndarray, dy: float, dx: float, fill: float) -> np.ndarray:
    """Bilinear shift by a real-valued offset, padding with the fill rate."""
    iy, fy = int(np.floor(dy)), dy - np.floor(dy)
    ix, fx = int(np.floor(dx)), dx - np.floor(dx)
    a = _shift2d(mp, iy, ix, fill)
    b = _shift2d(mp, iy, ix + 1, fill)
    c = _shift2d(mp, iy + 1, ix, fill)
    d = _shift2d(mp, iy + 1, ix + 1, fill)
    return (1 - fy) * ((1 - fx) * a + fx * b) + fy * ((1 - fx) * c + fx * d)


def generate_synthetic_family(
    seed: int,
    classes: int = 100,
    samples_per_class: int = 30,
    rate: float = 0.25,
    jitter: float = 1.0,
    **kwargs,
) -> SyntheticTaskFamily:
    """Convenience constructor matching the documented defaults."""
    return SyntheticTaskFamily(
        seed=seed,
        classes=classes,
        samples_per_class=samples_per_class,
        rate=rate,
        jitter=jitter,
        **kwargs,
    )


def build_episode(
    source,
    part: str,
    way: int,
    shot: int,
    queries: int,
    gen: np.random.Generator,
) -> Episode:
    """Sample an N-way K-shot episode from one split partition.

    Classes are drawn uniformly without replacement; per class, shot + query
    samples are drawn without overlap.  The class-to-output map is the
    sampled order.
    """
    classes = source.split.part(part)
    if len(classes) < way:
        raise ValueError(f"partition {part!r} has {len(classes)} classes, need {way}")
    chosen = [classes[i] for i in gen.choice(len(classes), size=way, replace=False)]
    train_frames, train_outputs, test_frames, test_outputs = [], [], [], []
    for out_idx, cls in enumerate(chosen):
        avail = source.sample_count(cls)
        if avail < shot + queries:
            raise ValueError(f"class {cls} has {avail} samples, need {shot + queries}")
        picks = gen.choice(avail, size=shot + queries, replace=False)
        for k in picks[:shot]:
            train_frames.append(source.sample(cls, int(k)))
            train_outputs.append(out_idx)
        for k in picks[shot:]:
            test_frames.append(source.sample(cls, int(k)))
            test_outputs.append(out_idx)
    return Episode(
        way=way,
        shot=shot,
        classes=tuple(chosen),
        train_frames=np.stack(train_frames),
        train_outputs=np.array(train_outputs, dtype=np.int64),
        test_frames=np.stack(test_frames),
        test_outputs=np.array(test_outputs, dtype=np.int64),
    )


def knn_predict(
    train_vectors: np.ndarray,
    train_labels: np.ndarray,
    query: np.ndarray,
    k: int,
) -> int:
    """Majority label of the k nearest neighbors by Euclidean distance.

    Ties are broken by the smallest summed distance, then the lowest label.
    """
    train_vectors = np.asarray(train_vectors, dtype=np.float64)
    if train_vectors.ndim != 2 or len(train_vectors) == 0:
        raise ValueError("training set must be a nonempty (n, d) array")
    if k > len(train_vectors):
        raise ValueError(f"k={k} exceeds training set size {len(train_vectors)}")
    d = np.linalg.norm(train_vectors - np.asarray(query, dtype=np.float64), axis=1)
    nearest = np.argsort(d, kind="stable")[:k]
    labels = np.asarray(train_labels)[nearest]
    candidates = {}
    for lab, dist in zip(labels, d[nearest]):
        votes, total = candidates.get(int(lab), (0, 0.0))
        candidates[int(lab)] = (votes + 1, total + float(dist))
    best = sorted(candidates.items(), key=lambda kv: (-kv[1][0], kv[1][1], kv[0]))
    return best[0][0]


def knn_episode_accuracy(episode: Episode, k: int = 1) -> float:
    """KNN baseline on per-pixel spike-count vectors of one episode."""
    train_vecs = episode.train_frames.sum(axis=1).astype(np.float64)
    test_vecs = episode.test_frames.sum(axis=1).astype(np.float64)
    correct = 0
    for vec, out in zip(test_vecs, episode.test_outputs):
        if knn_predict(train_vecs, episode.train_outputs, vec, k) == int(out):
            correct += 1
    return correct / len(test_vecs)


# Plain binary event files: magic, dims, count, then little-endian records
# (u32 t_us, u16 x, u16 y, u8 polarity).

def write_event_file(path: str, stream: EventStream) -> None:
    with open(path, "wb") as fh:
        fh.write(EVENT_MAGIC)
        fh.write(struct.pack("<HHI", stream.dims[0], stream.dims[1], len(stream.t)))
        rec = np.zeros(
            len(stream.t),
            dtype=np.dtype([("t", "<u4"), ("x", "<u2"), ("y", "<u2"), ("p", "u1")]),
        )
        rec["t"], rec["x"], rec["y"], rec["p"] = stream.t, stream.x, stream.y, stream.polarity
        fh.write(rec.tobytes())


def read_event_file(path: str) -> EventStream:
    with open(path, "rb") as fh:
        if fh.read(8) != EVENT_MAGIC:
            raise ManifestError(f"{path}: not an event file")
        w, h, n = struct.unpack("<HHI", fh.read(8))
        rec = np.frombuffer(
            fh.read(9 * n),
            dtype=np.dtype([("t", "<u4"), ("x", "<u2"), ("y", "<u2"), ("p", "u1")]),
            count=n,
        )
    return EventStream(
        t=rec["t"].copy(), x=rec["x"].copy(), y=rec["y"].copy(),
        polarity=rec["p"].copy(), dims=(w, h),
    )


def read_manifest(path: str) -> dict[int, list[str]]:
    """Manifest lines are `class_id<TAB>event_file_path`, paths relative to it."""
    if not os.path.exists(path):
        raise ManifestError(f"dataset manifest not found: {path}")
    base = os.path.dirname(os.path.abspath(path))
    mapping: dict[int, list[str]] = {}
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                cls_str, rel = line.split("\t")
                cls = int(cls_str)
            except ValueError:
                raise ManifestError(f"{path}:{ln}: expected `class<TAB>path`")
            mapping.setdefault(cls, []).append(os.path.join(base, rel))
    if not mapping:
        raise ManifestError(f"{path}: empty manifest")
    return mapping


def read_split_file(path: str) -> MetaSplit:
    """Split files list `train:`, `val:`, `test:` class ids."""
    parts = {"train": (), "val": (), "test": ()}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            name, _, rest = line.partition(":")
            name = name.strip()
            if name not in parts:
                raise ManifestError(f"{path}: unknown split partition {name!r}")
            parts[name] = tuple(int(tok) for tok in rest.split())
    return MetaSplit(train=parts["train"], val=parts["val"], test=parts["test"])


@dataclass
class ManifestDataset:
    """Episode source backed by event files listed in a manifest.

    Samples are binned on first access and cached.  A split file may pin the
    partitions; otherwise classes are split by ratio with the given seed.
    """

    manifest_path: str
    seed: int = 0
    split_path: str | None = None
    split_ratio: tuple[int, int, int] = (64, 16, 20)
    target: tuple[int, int] = (32, 32)
    channels: int = 2
    steps: int = 100

    def __post_init__(self) -> None:
        self.files = read_manifest(self.manifest_path)
        self._cache: dict[tuple[int, int], np.ndarray] = {}
        if self.split_path:
            self._split = read_split_file(self.split_path)
        else:
            ids = sorted(self.files)
            order = RandomSource(self.seed).stream("manifest-split").permutation(len(ids))
            total = sum(self.split_ratio)
            n_trn = (len(ids) * self.split_ratio[0]) // total
            n_val = (len(ids) * self.split_ratio[1]) // total
            shuffled = [ids[i] for i in order]
            self._split = MetaSplit(
                train=tuple(shuffled[:n_trn]),
                val=tuple(shuffled[n_trn : n_trn + n_val]),
                test=tuple(shuffled[n_trn + n_val :]),
            )

    @property
    def split(self) -> MetaSplit:
        return self._split

    @property
    def input_dim(self) -> int:
        return self.channels * self.target[0] * self.target[1]

    def sample_count(self, class_id: int) -> int:
        return len(self.files[class_id])

    def sample(self, class_id: int, index: int) -> np.ndarray:
        key = (class_id, index)
        if key not in self._cache:
            stream = read_event_file(self.files[class_id][index])
            binned = bin_events(
                stream,
                target=self.target,
                duration_us=self.steps * 1000,
                channels=self.channels,
                label=class_id,
            )
            self._cache[key] = binned.flat
        return self._cache[key]
