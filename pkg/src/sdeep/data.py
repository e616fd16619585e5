"""Pixel time-series ingestion, preprocessing, object-aware splitting and synthetic corpora."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import re
import warnings
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

logger = logging.getLogger(__name__)

UNLABELED = -1
BANDS = ("B2", "B3", "B4", "B8")
INDEX_CHANNELS = ("NDVI", "NDWI")


class DataError(ValueError):
    """Malformed data or specification."""


class SplitWarning(UserWarning):
    """A split constraint could not be met; the split is still returned."""


# ---------------------------------------------------------------------------
# containers
# ---------------------------------------------------------------------------


@dataclass
class SITSample:
    pixel_id: int
    object_id: int
    label: int
    series: np.ndarray  # (T, B)
    cloud_mask: np.ndarray  # (T, B), True = invalid observation

    def __post_init__(self):
        self.series = np.asarray(self.series, dtype=np.float64)
        if self.cloud_mask is None:
            self.cloud_mask = np.zeros(self.series.shape, dtype=bool)
        self.cloud_mask = np.asarray(self.cloud_mask, dtype=bool)
        if self.series.ndim != 2 or self.cloud_mask.shape != self.series.shape:
            raise DataError(f"series {self.series.shape} and mask {self.cloud_mask.shape} must be equal 2-d shapes")


@dataclass
class SITSDataset:
    """Column-oriented store of pixel samples; series is (N, T, B)."""

    pixel_id: np.ndarray
    object_id: np.ndarray
    label: np.ndarray
    series: np.ndarray
    mask: np.ndarray
    channel_names: List[str] = field(default_factory=list)
    class_names: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.pixel_id = np.asarray(self.pixel_id, dtype=np.int64)
        self.object_id = np.asarray(self.object_id, dtype=np.int64)
        self.label = np.asarray(self.label, dtype=np.int64)
        self.series = np.asarray(self.series, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.series.ndim != 3 or self.mask.shape != self.series.shape:
            raise DataError(f"series {self.series.shape} / mask {self.mask.shape} must be equal (N, T, B)")
        n = self.series.shape[0]
        if not (len(self.pixel_id) == len(self.object_id) == len(self.label) == n):
            raise DataError("id, label and series lengths differ")
        if not self.channel_names:
            self.channel_names = [f"c{i}" for i in range(self.num_channels)]
        if len(self.channel_names) != self.num_channels:
            raise DataError(f"{len(self.channel_names)} channel names for {self.num_channels} channels")

    def __len__(self) -> int:
        return self.series.shape[0]

    @property
    def num_timesteps(self) -> int:
        return self.series.shape[1]

    @property
    def num_channels(self) -> int:
        return self.series.shape[2]

    def __getitem__(self, i: int) -> SITSample:
        return SITSample(int(self.pixel_id[i]), int(self.object_id[i]), int(self.label[i]),
                         self.series[i].copy(), self.mask[i].copy())

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def subset(self, idx) -> "SITSDataset":
        idx = np.asarray(idx)
        return dataclasses.replace(
            self,
            pixel_id=self.pixel_id[idx],
            object_id=self.object_id[idx],
            label=self.label[idx],
            series=self.series[idx],
            mask=self.mask[idx],
            channel_names=list(self.channel_names),
            class_names=list(self.class_names),
        )

    def with_series(self, series: np.ndarray, mask: Optional[np.ndarray] = None,
                    channel_names: Optional[List[str]] = None) -> "SITSDataset":
        return dataclasses.replace(
            self,
            series=series,
            mask=np.zeros(series.shape, dtype=bool) if mask is None else mask,
            channel_names=list(channel_names if channel_names is not None else self.channel_names),
            class_names=list(self.class_names),
        )

    @classmethod
    def from_samples(cls, samples: Sequence[SITSample], channel_names: Optional[List[str]] = None) -> "SITSDataset":
        if not samples:
            raise DataError("no samples")
        return cls(
            pixel_id=[s.pixel_id for s in samples],
            object_id=[s.object_id for s in samples],
            label=[s.label for s in samples],
            series=np.stack([s.series for s in samples]),
            mask=np.stack([s.cloud_mask for s in samples]),
            channel_names=list(channel_names or []),
        )

    def equals(self, other: "SITSDataset") -> bool:
        return (
            np.array_equal(self.pixel_id, other.pixel_id)
            and np.array_equal(self.object_id, other.object_id)
            and np.array_equal(self.label, other.label)
            and np.array_equal(self.mask, other.mask)
            and np.array_equal(np.where(self.mask, 0.0, self.series), np.where(other.mask, 0.0, other.series))
        )


# ---------------------------------------------------------------------------
# spectral indexes
# ---------------------------------------------------------------------------


def spectral_index(x, y):
    """Normalised difference (x - y) / (x + y) of strictly positive inputs."""
    xa = np.asarray(x, dtype=np.float64)
    ya = np.asarray(y, dtype=np.float64)
    if np.any(~(xa > 0)) or np.any(~(ya > 0)):
        raise DataError("spectral_index: inputs must be strictly positive")
    out = (xa - ya) / (xa + ya)
    return float(out) if out.ndim == 0 else out


def add_spectral_indexes(ds: SITSDataset, bands: Sequence[str] = BANDS) -> SITSDataset:
    """Append NDVI = f(B8, B4) and NDWI = f(B3, B8), computed on raw values.

    The first four channels are taken as ``bands`` in order.  An index is
    masked wherever either of its inputs is.
    """
    if ds.num_channels != len(bands):
        raise DataError(f"index derivation expects {len(bands)} band channels, got {ds.num_channels}")
    pos = {name: i for i, name in enumerate(bands)}
    out = [ds.series]
    masks = [ds.mask]
    for a, b in (("B8", "B4"), ("B3", "B8")):
        m = ds.mask[..., pos[a]] | ds.mask[..., pos[b]]
        xa = np.where(m, 1.0, ds.series[..., pos[a]])
        xb = np.where(m, 1.0, ds.series[..., pos[b]])
        idx = spectral_index(xa, xb)
        out.append(np.where(m, np.nan, idx)[..., None])
        masks.append(m[..., None])
    names = list(bands) + list(INDEX_CHANNELS)
    return ds.with_series(np.concatenate(out, axis=-1), np.concatenate(masks, axis=-1), names)


# ---------------------------------------------------------------------------
# cloud interpolation
# ---------------------------------------------------------------------------


def _interp_series(series: np.ndarray, mask: np.ndarray, where: str) -> np.ndarray:
    out = series.copy()
    t = np.arange(series.shape[0], dtype=np.float64)
    for c in range(series.shape[1]):
        bad = mask[:, c]
        if not bad.any():
            continue
        if bad.all():
            raise DataError(f"{where}: channel {c} is masked at every timestep")
        good = ~bad
        out[bad, c] = np.interp(t[bad], t[good], series[good, c])
    return out


def interpolate_clouds(sample: SITSample) -> SITSample:
    """Fill masked observations by linear interpolation in time.

    Leading/trailing gaps take the nearest valid value; valid entries are
    returned untouched.
    """
    filled = _interp_series(sample.series, sample.cloud_mask, f"pixel {sample.pixel_id}")
    return SITSample(sample.pixel_id, sample.object_id, sample.label, filled,
                     np.zeros(sample.series.shape, dtype=bool))


def interpolate_dataset(ds: SITSDataset) -> SITSDataset:
    series = ds.series.copy()
    for i in np.flatnonzero(ds.mask.any(axis=(1, 2))):
        series[i] = _interp_series(ds.series[i], ds.mask[i], f"pixel {ds.pixel_id[i]}")
    return ds.with_series(series)


# ---------------------------------------------------------------------------
# scaling
# ---------------------------------------------------------------------------


@dataclass
class ChannelScaling:
    mins: List[float]
    maxs: List[float]

    def to_dict(self) -> dict:
        return {"mins": [float(v) for v in self.mins], "maxs": [float(v) for v in self.maxs]}


def fit_scaling(ds: SITSDataset) -> ChannelScaling:
    """Per-channel min and max over all valid training observations."""
    vals = np.where(ds.mask, np.nan, ds.series).reshape(-1, ds.num_channels)
    mins = np.nanmin(vals, axis=0)
    maxs = np.nanmax(vals, axis=0)
    const = np.flatnonzero(~(maxs > mins))
    if const.size:
        names = ", ".join(ds.channel_names[i] for i in const)
        raise DataError(f"cannot scale constant channel(s): {names}")
    return ChannelScaling(mins.tolist(), maxs.tolist())


def apply_scaling(ds: SITSDataset, scaling: ChannelScaling) -> SITSDataset:
    """Map each channel to [0, 1] with the fitted range, clamping out-of-range values."""
    lo = np.asarray(scaling.mins)
    hi = np.asarray(scaling.maxs)
    if lo.shape != (ds.num_channels,):
        raise DataError(f"scaling fitted on {lo.size} channels, data has {ds.num_channels}")
    scaled = np.clip((ds.series - lo) / (hi - lo), 0.0, 1.0)
    return ds.with_series(np.where(ds.mask, np.nan, scaled), ds.mask.copy())


# ---------------------------------------------------------------------------
# channel grouping
# ---------------------------------------------------------------------------


def correlation_matrix(ds: SITSDataset) -> np.ndarray:
    """Pearson correlation between channels over pooled (pixel, timestep) observations."""
    if len(ds) < 2:
        raise DataError("correlation needs at least 2 samples")
    obs = ds.series.reshape(-1, ds.num_channels)
    valid = ~ds.mask.reshape(-1, ds.num_channels).any(axis=1)
    obs = obs[valid]
    std = obs.std(axis=0)
    if np.any(std == 0):
        names = ", ".join(ds.channel_names[i] for i in np.flatnonzero(std == 0))
        raise DataError(f"zero-variance channel(s): {names}")
    return np.corrcoef(obs, rowvar=False)


def correlation_groups(ds: SITSDataset, threshold: float = 0.6) -> List[List[int]]:
    """Connected components of the graph linking channels with |corr| >= threshold."""
    corr = correlation_matrix(ds)
    adj = csr_matrix(np.abs(corr) >= threshold)
    _, labels = connected_components(adj, directed=False)
    groups: Dict[int, List[int]] = {}
    for ch, lab in enumerate(labels):
        groups.setdefault(int(lab), []).append(ch)
    return sorted(groups.values(), key=min)


# ---------------------------------------------------------------------------
# object-aware splitting
# ---------------------------------------------------------------------------


@dataclass
class SplitSpec:
    ratios: Tuple[float, float, float] = (0.6, 0.2, 0.2)
    seed: int = 0
    class_ratio_tolerance: float = 0.02

    def __post_init__(self):
        self.ratios = tuple(float(r) for r in self.ratios)
        if len(self.ratios) != 3 or any(r < 0 for r in self.ratios) or abs(sum(self.ratios) - 1.0) > 1e-9:
            raise DataError(f"split ratios must be three non-negative numbers summing to 1, got {self.ratios}")


def split_assignment(ds: SITSDataset, spec: SplitSpec) -> np.ndarray:
    """Split index (0 train, 1 val, 2 test) per pixel; see :func:`split_object_aware`."""
    if np.any(ds.label == UNLABELED):
        raise DataError("every sample must be labeled before splitting")
    objects, first, inverse, sizes = np.unique(ds.object_id, return_index=True, return_inverse=True,
                                               return_counts=True)
    obj_label = ds.label[first]
    mixed = np.flatnonzero(np.bincount(inverse, weights=(ds.label != obj_label[inverse])) > 0)
    if mixed.size:
        raise DataError(f"object {int(objects[mixed[0]])} contains pixels with different labels")

    rng = np.random.default_rng(spec.seed)
    target = np.asarray(spec.ratios)
    obj_split = np.zeros(len(objects), dtype=np.int64)
    for cls in np.unique(obj_label):
        members = np.flatnonzero(obj_label == cls)
        total = sizes[members].sum()
        if len(members) == 1:
            warnings.warn(f"class {int(cls)} has a single object; placed in train", SplitWarning)
            continue
        # shuffle, then largest objects first so no split is overfilled by a late big object
        members = rng.permutation(members)
        members = members[np.argsort(-sizes[members], kind="stable")]
        filled = np.zeros(3)
        for o in members:
            deficit = target * total - filled
            s = int(np.argmax(deficit))
            obj_split[o] = s
            filled[s] += sizes[o]
        achieved = filled / total
        if np.any(np.abs(achieved - target) > spec.class_ratio_tolerance):
            warnings.warn(
                f"class {int(cls)}: split ratios {np.round(achieved, 4).tolist()} miss target "
                f"{list(spec.ratios)} by more than {spec.class_ratio_tolerance}",
                SplitWarning,
            )
    return obj_split[inverse]


def split_object_aware(ds: SITSDataset, spec: SplitSpec = SplitSpec()) -> Tuple[SITSDataset, SITSDataset, SITSDataset]:
    """Partition into train/val/test so that no object spans two splits.

    Objects are shuffled by seed and assigned greedily per class to whichever
    split is furthest below its pixel target.
    """
    assign = split_assignment(ds, spec)
    return tuple(ds.subset(np.flatnonzero(assign == s)) for s in range(3))  # type: ignore[return-value]


# ---------------------------------------------------------------------------
# preprocessing pipeline
# ---------------------------------------------------------------------------


@dataclass
class Preprocessed:
    train: SITSDataset
    val: SITSDataset
    test: SITSDataset
    scaling: ChannelScaling
    groups: List[List[int]]
    channel_names: List[str]


def transform(ds: SITSDataset, scaling: Optional[ChannelScaling], derive_indexes: bool = False) -> SITSDataset:
    """Index derivation, cloud filling and (optionally) scaling with fitted statistics."""
    if derive_indexes:
        ds = add_spectral_indexes(ds)
    ds = interpolate_dataset(ds)
    return apply_scaling(ds, scaling) if scaling is not None else ds


def preprocess(ds: SITSDataset, split: SplitSpec = SplitSpec(), derive_indexes: bool = False,
               correlation_threshold: float = 0.6) -> Preprocessed:
    """indexes -> interpolation -> split -> scaling fit on train -> grouping on train."""
    ds = transform(ds, None, derive_indexes)
    train, val, test = split_object_aware(ds, split)
    if len(train) == 0 or len(val) == 0 or len(test) == 0:
        raise DataError(f"empty split (train={len(train)}, val={len(val)}, test={len(test)})")
    scaling = fit_scaling(train)
    train, val, test = (apply_scaling(d, scaling) for d in (train, val, test))
    groups = correlation_groups(train, correlation_threshold)
    return Preprocessed(train, val, test, scaling, groups, list(ds.channel_names))


# ---------------------------------------------------------------------------
# synthetic corpora
# ---------------------------------------------------------------------------


_PROTOTYPE_PARAMS = {
    "constant": ("value",),
    "sinusoid": ("offset", "amplitude", "period", "phase"),
    "step": ("before", "after", "at"),
}


def _jittered(proto: dict, rng: Optional[np.random.Generator]) -> dict:
    """Copy of ``proto`` with each parameter in its ``jitter`` map perturbed by N(0, sigma)."""
    jitter = proto.get("jitter") or {}
    bad = sorted(set(jitter) - set(_PROTOTYPE_PARAMS.get(proto.get("kind"), ())))
    if bad:
        raise DataError(f"jitter: parameter(s) {', '.join(bad)} do not belong to a {proto.get('kind')!r} prototype")
    if rng is None or not jitter:
        return proto
    out = dict(proto)
    for key in sorted(jitter):
        base = float(proto.get(key, 0.0))
        out[key] = base + rng.normal(0.0, float(jitter[key]))
    return out


def _prototype(proto: dict, t: np.ndarray, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Evaluate a prototype; with ``rng`` its jitter (per-object variation) is sampled."""
    proto = _jittered(proto, rng)
    kind = proto.get("kind")
    if kind == "constant":
        return np.full(t.shape, float(proto["value"]))
    if kind == "sinusoid":
        period = float(proto.get("period", len(t)))
        return float(proto["offset"]) + float(proto["amplitude"]) * np.sin(
            2.0 * np.pi * t / period + float(proto.get("phase", 0.0))
        )
    if kind == "step":
        return np.where(t < float(proto["at"]), float(proto["before"]), float(proto["after"]))
    raise DataError(f"unknown prototype kind {kind!r}")


@dataclass
class SynthClass:
    name: str
    prototypes: List[dict]
    noise_sigma: float = 0.005


@dataclass
class SynthSpec:
    classes: List[SynthClass]
    num_timesteps: int = 21
    bands: List[str] = field(default_factory=lambda: list(BANDS))
    derive_indexes: bool = True
    pixels_per_object: int = 10
    objects_per_class: int = 200
    object_sigma: float = 0.005
    cloud_rate: float = 0.05
    min_value: float = 1e-3
    designated_class: Optional[int] = None

    @classmethod
    def from_dict(cls, data: dict) -> "SynthSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise DataError(f"unknown synthetic-spec field(s): {', '.join(unknown)}")
        if "classes" not in data:
            raise DataError("synthetic spec field 'classes' is required")
        data = dict(data)
        classes = []
        for i, c in enumerate(data.pop("classes")):
            if not isinstance(c, dict) or "prototypes" not in c:
                raise DataError(f"classes[{i}]: each class needs a 'prototypes' list")
            classes.append(SynthClass(name=str(c.get("name", f"class{i}")), prototypes=list(c["prototypes"]),
                                      noise_sigma=float(c.get("noise_sigma", 0.005))))
        return cls(classes=classes, **data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def channel_names(self) -> List[str]:
        return list(self.bands) + (list(INDEX_CHANNELS) if self.derive_indexes else [])

    def prototypes(self) -> np.ndarray:
        """Noise-free class prototypes on output channels, (classes, T, B)."""
        t = np.arange(self.num_timesteps, dtype=np.float64)
        raw = np.stack([np.stack([_prototype(p, t) for p in c.prototypes], axis=-1) for c in self.classes])
        raw = np.maximum(raw, self.min_value)
        if self.derive_indexes:
            ds = SITSDataset(np.arange(len(raw)), np.arange(len(raw)), np.zeros(len(raw)), raw,
                             np.zeros(raw.shape, dtype=bool), list(self.bands))
            raw = add_spectral_indexes(ds, self.bands).series
        return raw

    def validate(self) -> "SynthSpec":
        if not self.classes:
            raise DataError("classes: synthetic spec needs at least one class")
        if self.num_timesteps < 2:
            raise DataError("num_timesteps: need at least 2 timesteps")
        for i, c in enumerate(self.classes):
            if len(c.prototypes) != len(self.bands):
                raise DataError(f"classes[{i}].prototypes: {len(c.prototypes)} prototypes for {len(self.bands)} bands")
            if c.noise_sigma < 0:
                raise DataError(f"classes[{i}].noise_sigma must be >= 0")
        if self.derive_indexes and list(self.bands) != list(BANDS):
            raise DataError(f"bands: index derivation needs bands {list(BANDS)}")
        if self.pixels_per_object < 1 or self.objects_per_class < 1:
            raise DataError("pixels_per_object and objects_per_class must be positive")
        if not 0.0 <= self.cloud_rate < 1.0:
            raise DataError("cloud_rate must lie in [0, 1)")
        protos = self.prototypes()
        flat = protos.reshape(len(protos), -1)
        for a in range(len(protos)):
            for b in range(a + 1, len(protos)):
                if np.array_equal(flat[a], flat[b]):
                    raise DataError(f"classes: {self.classes[a].name!r} and {self.classes[b].name!r} "
                                    "have identical prototypes (zero between-class variance)")
        if len(protos) > 1 and not any(len(ch) == 1 for ch in _differing_channels(protos).values()):
            raise DataError("classes: at least one pair of classes must differ in exactly one channel")
        return self


def _differing_channels(protos: np.ndarray) -> Dict[Tuple[int, int], List[int]]:
    out = {}
    for a in range(len(protos)):
        for b in range(a + 1, len(protos)):
            diff = np.abs(protos[a] - protos[b]).max(axis=0)
            out[(a, b)] = [int(c) for c in np.flatnonzero(diff > 1e-12)]
    return out


def channel_relevance(spec: SynthSpec) -> Dict[int, List[int]]:
    """Per class, the channels where its prototype differs from the nearest other class."""
    protos = spec.prototypes()
    rel: Dict[int, List[int]] = {}
    for a in range(len(protos)):
        others = [b for b in range(len(protos)) if b != a]
        if not others:
            rel[a] = []
            continue
        dist = [np.linalg.norm(protos[a] - protos[b]) for b in others]
        nearest = others[int(np.argmin(dist))]
        diff = np.abs(protos[a] - protos[nearest]).max(axis=0)
        rel[a] = [int(c) for c in np.flatnonzero(diff > 1e-12)]
    return rel


def synth_generate(spec: SynthSpec, seed: int = 0) -> Tuple[SITSDataset, Dict[int, List[int]]]:
    """Sample a labeled corpus: prototype + object offset + pixel noise, clipped positive.

    Prototype parameters listed in a prototype's ``jitter`` map are redrawn
    per object; relevance is computed on the un-jittered prototypes.

    Returns the dataset and the per-class ground-truth channel relevance.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    t = np.arange(spec.num_timesteps, dtype=np.float64)
    n_bands = len(spec.bands)
    series, labels, objects = [], [], []
    obj = 0
    for ci, c in enumerate(spec.classes):
        jittered = any(p.get("jitter") for p in c.prototypes)
        proto = np.stack([_prototype(p, t) for p in c.prototypes], axis=-1)  # (T, bands)
        for _ in range(spec.objects_per_class):
            if jittered:
                proto = np.stack([_prototype(p, t, rng) for p in c.prototypes], axis=-1)
            offset = rng.normal(0.0, spec.object_sigma, size=n_bands) if spec.object_sigma > 0 else np.zeros(n_bands)
            noise = rng.normal(0.0, c.noise_sigma, size=(spec.pixels_per_object, spec.num_timesteps, n_bands)) \
                if c.noise_sigma > 0 else np.zeros((spec.pixels_per_object, spec.num_timesteps, n_bands))
            series.append(np.maximum(proto + offset + noise, spec.min_value))
            labels += [ci] * spec.pixels_per_object
            objects += [obj] * spec.pixels_per_object
            obj += 1
    raw = np.concatenate(series)
    n = raw.shape[0]
    ds = SITSDataset(np.arange(n), objects, labels, raw, np.zeros(raw.shape, dtype=bool), list(spec.bands),
                     [c.name for c in spec.classes])
    if spec.derive_indexes:
        ds = add_spectral_indexes(ds, spec.bands)
    if spec.cloud_rate > 0:
        mask = rng.random(ds.series.shape) < spec.cloud_rate
        full = mask.all(axis=1)  # (N, B): channel masked at every timestep
        for i, c in zip(*np.nonzero(full)):
            mask[i, rng.integers(spec.num_timesteps), c] = False
        ds = ds.with_series(np.where(mask, np.nan, ds.series), mask)
    return ds, channel_relevance(spec)


def default_synth_spec() -> SynthSpec:
    """Four classes over B2, B3, B4, B8 (+ NDVI, NDWI) sharing one baseline.

    B2 is flat; B3, B4 and B8 follow a season whose phase and amplitude vary
    per object.  Each non-reference class alters a single band: ``blue-step``
    only B2 (the designated class), ``low-nir`` B8 and ``bright-red`` B4, the
    last two propagating into the indexes.  Pixel and object noise are 0.005.
    """
    def season(offset, amplitude):
        return {"kind": "sinusoid", "offset": offset, "amplitude": amplitude, "period": 21,
                "jitter": {"phase": 0.8, "amplitude": 0.3 * abs(amplitude)}}

    baseline = [{"kind": "constant", "value": 0.05}, season(0.08, 0.02), season(0.06, -0.03), season(0.30, 0.12)]
    blue_step = [{"kind": "step", "before": 0.05, "after": 0.11, "at": 10}] + baseline[1:]
    low_nir = baseline[:3] + [season(0.10, 0.02)]
    bright_red = baseline[:2] + [{"kind": "constant", "value": 0.12}] + baseline[3:]
    return SynthSpec(
        classes=[
            SynthClass("reference", baseline),
            SynthClass("blue-step", blue_step),
            SynthClass("low-nir", low_nir),
            SynthClass("bright-red", bright_red),
        ],
        designated_class=1,
    )


# ---------------------------------------------------------------------------
# SITS-CSV
# ---------------------------------------------------------------------------

_VALUE_COL = re.compile(r"^c(\d+)_t(\d+)$")
FIXED_COLUMNS = ("pixel_id", "object_id", "label")


def sits_header(num_channels: int, num_timesteps: int) -> List[str]:
    return list(FIXED_COLUMNS) + [f"c{c}_t{t}" for c in range(num_channels) for t in range(num_timesteps)]


def write_sits_csv(ds: SITSDataset, path) -> None:
    n, t, b = ds.series.shape
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(sits_header(b, t))
        for i in range(n):
            vals = ds.series[i].T.reshape(-1)  # channel-major
            mask = ds.mask[i].T.reshape(-1)
            label = "" if ds.label[i] == UNLABELED else str(int(ds.label[i]))
            writer.writerow(
                [str(int(ds.pixel_id[i])), str(int(ds.object_id[i])), label]
                + ["" if m else format(float(v), ".17g") for v, m in zip(vals, mask)]
            )


def _parse_header(header: List[str], path) -> Tuple[int, int]:
    if tuple(header[:3]) != FIXED_COLUMNS:
        raise DataError(f"{path}: line 1: header must start with {','.join(FIXED_COLUMNS)}")
    cells = []
    for name in header[3:]:
        m = _VALUE_COL.match(name)
        if not m:
            raise DataError(f"{path}: line 1: bad value column {name!r}")
        cells.append((int(m.group(1)), int(m.group(2))))
    if not cells:
        raise DataError(f"{path}: line 1: no value columns")
    num_channels = cells[-1][0] + 1
    if len(cells) % num_channels:
        raise DataError(f"{path}: line 1: value columns do not form a channel x timestep grid")
    num_timesteps = len(cells) // num_channels
    expected = [(c, t) for c in range(num_channels) for t in range(num_timesteps)]
    if cells != expected:
        bad = next(i for i, (a, b) in enumerate(zip(cells, expected)) if a != b)
        raise DataError(
            f"{path}: line 1: column {header[3 + bad]!r} out of order (timestep labels must be "
            "monotone within each channel, channels in order)"
        )
    return num_channels, num_timesteps


def load_sits_csv(path, channel_names: Optional[List[str]] = None,
                  class_names: Optional[List[str]] = None) -> SITSDataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        b, t = _parse_header(header, path)
        ncol = len(header)
        ids, objs, labels, rows, masks = [], [], [], [], []
        seen = set()
        for lineno, row in enumerate(reader, start=2):
            if len(row) != ncol:
                raise DataError(f"{path}: line {lineno}: expected {ncol} fields, got {len(row)}")
            try:
                pid, oid = int(row[0]), int(row[1])
                label = UNLABELED if row[2] == "" else int(row[2])
                mask = [v == "" for v in row[3:]]
                vals = [float("nan") if m else float(v) for v, m in zip(row[3:], mask)]
            except ValueError as exc:
                raise DataError(f"{path}: line {lineno}: {exc}") from None
            if pid in seen:
                raise DataError(f"{path}: line {lineno}: duplicate pixel_id {pid}")
            seen.add(pid)
            ids.append(pid)
            objs.append(oid)
            labels.append(label)
            rows.append(vals)
            masks.append(mask)
    if not rows:
        raise DataError(f"{path}: no data rows")
    series = np.asarray(rows, dtype=np.float64).reshape(-1, b, t).transpose(0, 2, 1)
    mask = np.asarray(masks, dtype=bool).reshape(-1, b, t).transpose(0, 2, 1)
    return SITSDataset(ids, objs, labels, np.ascontiguousarray(series), np.ascontiguousarray(mask),
                       list(channel_names or []), list(class_names or []))


def sidecar_path(csv_path) -> str:
    p = str(csv_path)
    return (p[:-4] if p.endswith(".csv") else p) + ".meta.json"


def write_sidecar(path, channel_names: Iterable[str], class_names: Iterable[str],
                  relevance: Optional[Dict[int, List[int]]] = None, designated_class: Optional[int] = None) -> None:
    meta = {
        "channel_names": list(channel_names),
        "class_names": list(class_names),
        "relevance": {str(k): v for k, v in (relevance or {}).items()},
        "designated_class": designated_class,
    }
    with open(path, "w") as fh:
        fh.write(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_sidecar(path) -> dict:
    with open(path) as fh:
        return json.load(fh)
