"""Synthetic multi-sensor event worlds with known ground truth.

A world is a small set of event classes observed by a fixed set of sensors.
Each (class, sensor) pair that the coverage matrix allows gets a fragment of
a unit-norm class signature; rendering sums active signatures per frame and
adds isotropic Gaussian noise. Background sensors observe nothing but noise,
and redundant sensor pairs share identical signatures, so the informational
role of every sensor is known by construction.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class GenerationError(RuntimeError):
    """World constraints could not be satisfied while sampling."""


class DatasetError(ValueError):
    """A dataset directory is missing, malformed, corrupt, or unsupported."""


DATASET_MAGIC = b"DMSEA"
DATASET_VERSION = b"1"


@dataclass(frozen=True)
class WorldSpec:
    """Full description of a sensor world; generation is a pure function of it."""

    num_classes: int
    num_sensors: int
    sensor_groups: dict[str, tuple[int, ...]]
    frames_per_clip: int
    feature_dim_raw: int
    coverage: tuple[tuple[int, ...], ...]          # (C, S) binary, class x sensor
    redundancy_pairs: tuple[tuple[int, int], ...]  # sensors forced to share content
    background_sensors: tuple[int, ...]            # all-zero coverage columns
    noise_sigma: float
    event_rate: float
    min_events: int          # per-clip floor on event instances, >= 1
    max_concurrent: int      # per-frame cap on simultaneously active classes
    event_len_range: tuple[int, int] = (4, 16)
    event_amp_range: tuple[float, float] = (0.7, 1.3)
    fragment_keep: float = 0.5
    rendering: str = "linear"    # linear | energy
    sign_flip_prob: float = 0.0  # chance an event renders with inverted phase
    # per-(class, sensor) amplitude multipliers; None means 1.0 wherever
    # coverage is 1. Values below 1 make a sensor a faint secondary carrier.
    coverage_gain: tuple[tuple[float, ...], ...] | None = None
    # (donor_class, receiver_class, sensors): the receiver reuses the donor's
    # signature fragments on the listed sensors, so the two classes can only
    # be told apart on their remaining carriers.
    signature_share: tuple[tuple[int, int, tuple[int, ...]], ...] = ()
    seed: int = 0

    def __post_init__(self):
        C, S = self.num_classes, self.num_sensors
        if C < 1 or S < 1:
            raise ValueError("WorldSpec: need at least one class and one sensor")
        if self.frames_per_clip < 1 or self.feature_dim_raw < 1:
            raise ValueError("WorldSpec: frames_per_clip and feature_dim_raw must be >= 1")
        cov = np.asarray(self.coverage)
        if cov.shape != (C, S):
            raise ValueError(f"WorldSpec: coverage must be {C}x{S}, got {cov.shape}")
        if not np.isin(cov, (0, 1)).all():
            raise ValueError("WorldSpec: coverage entries must be 0 or 1")
        if (cov.sum(axis=1) == 0).any():
            bad = np.flatnonzero(cov.sum(axis=1) == 0).tolist()
            raise ValueError(f"WorldSpec: classes {bad} not covered by any sensor")
        seen: set[int] = set()
        if not self.sensor_groups:
            raise ValueError("WorldSpec: sensor_groups must be non-empty")
        for name, members in self.sensor_groups.items():
            if len(members) == 0:
                raise ValueError(f"WorldSpec: sensor group '{name}' is empty")
            for s in members:
                if not 0 <= s < S:
                    raise ValueError(f"WorldSpec: group '{name}' references sensor {s}")
                if s in seen:
                    raise ValueError(f"WorldSpec: sensor {s} appears in two groups")
                seen.add(s)
        if seen != set(range(S)):
            raise ValueError("WorldSpec: sensor_groups must partition all sensors")
        for s in self.background_sensors:
            if not 0 <= s < S:
                raise ValueError(f"WorldSpec: background sensor {s} out of range")
            if cov[:, s].any():
                raise ValueError(f"WorldSpec: background sensor {s} has non-zero coverage")
        gain = self.gain_matrix()
        if gain.shape != (C, S):
            raise ValueError(f"WorldSpec: coverage_gain must be {C}x{S}, got {gain.shape}")
        if ((gain > 0) != (cov > 0)).any():
            raise ValueError("WorldSpec: coverage_gain must be positive exactly where coverage is 1")
        for u, v in self.redundancy_pairs:
            if not (0 <= u < S and 0 <= v < S) or u == v:
                raise ValueError(f"WorldSpec: bad redundancy pair ({u}, {v})")
            if not np.array_equal(cov[:, u], cov[:, v]):
                raise ValueError(f"WorldSpec: redundant pair ({u}, {v}) must share coverage")
            if not np.array_equal(gain[:, u], gain[:, v]):
                raise ValueError(f"WorldSpec: redundant pair ({u}, {v}) must share coverage_gain")
        donors = {u for u, _, _ in self.signature_share}
        receivers: set[int] = set()
        twin_of = {u: v for u, v in self.redundancy_pairs}
        twin_of.update({v: u for u, v in self.redundancy_pairs})
        for u, v, shared in self.signature_share:
            if not (0 <= u < C and 0 <= v < C) or u == v:
                raise ValueError(f"WorldSpec: bad signature_share pair ({u}, {v})")
            if v in donors or v in receivers:
                raise ValueError(f"WorldSpec: class {v} cannot receive shared signatures twice or donate them")
            receivers.add(v)
            if len(shared) == 0:
                raise ValueError(f"WorldSpec: signature_share ({u}, {v}) lists no sensors")
            for s in shared:
                if not 0 <= s < S:
                    raise ValueError(f"WorldSpec: signature_share sensor {s} out of range")
                if not (cov[u, s] and cov[v, s]):
                    raise ValueError(f"WorldSpec: signature_share sensor {s} must be covered by classes {u} and {v}")
                if s in twin_of and twin_of[s] not in shared:
                    raise ValueError(f"WorldSpec: signature_share on sensor {s} must include its redundant twin")
            private = [s for s in range(S) if cov[v, s] and s not in shared]
            if not private:
                raise ValueError(f"WorldSpec: class {v} has no private sensor left to distinguish it from {u}")
        if not 0.0 <= self.event_rate <= 1.0:
            raise ValueError("WorldSpec: event_rate must be in [0, 1]")
        if not 1 <= self.min_events <= C:
            raise ValueError("WorldSpec: min_events must be in [1, num_classes]")
        if not 1 <= self.max_concurrent <= C:
            raise ValueError("WorldSpec: max_concurrent must be in [1, num_classes]")
        lo, hi = self.event_len_range
        if not 1 <= lo <= hi <= self.frames_per_clip:
            raise ValueError("WorldSpec: event_len_range must satisfy 1 <= lo <= hi <= frames_per_clip")
        alo, ahi = self.event_amp_range
        if not 0 < alo <= ahi:
            raise ValueError("WorldSpec: event_amp_range must satisfy 0 < lo <= hi")
        if not 0.0 < self.fragment_keep <= 1.0:
            raise ValueError("WorldSpec: fragment_keep must be in (0, 1]")
        if self.rendering not in ("linear", "energy"):
            raise ValueError(f"WorldSpec: unknown rendering '{self.rendering}'")
        if not 0.0 <= self.sign_flip_prob <= 1.0:
            raise ValueError("WorldSpec: sign_flip_prob must be in [0, 1]")
        if self.noise_sigma < 0.0:
            raise ValueError("WorldSpec: noise_sigma must be >= 0")

    def gain_matrix(self) -> np.ndarray:
        if self.coverage_gain is None:
            return np.asarray(self.coverage, dtype=np.float64)
        return np.asarray(self.coverage_gain, dtype=np.float64)


@dataclass
class ClipSample:
    clip_id: str
    features: np.ndarray       # (S, T, F) float64
    strong_labels: np.ndarray  # (T, C) int8
    weak_label: np.ndarray     # (C,) int8


@dataclass
class DatasetSplit:
    train: list[ClipSample]
    val: list[ClipSample]
    test: list[ClipSample]
    class_counts: np.ndarray   # (C,) event instances per class in train
    spec: WorldSpec


def default_world_spec(seed: int = 11) -> WorldSpec:
    """Desk-scale world: 6 classes, 8 sensors in two groups, 2 background
    sensors, 2 redundant pairs.

    Classes come in look-alike pairs that share their broad carriers and
    differ only on one full-strength sensor, with a faint echo of that
    difference in the other group. Hiding the distinguishing sensor leaves
    the pair separable in principle, but only through the faint echo.
    """
    f = 0.45  # faint-echo amplitude relative to a full carrier
    coverage = (
        # sensors:  0  1  2  3  4  5  6  7
        (1, 1, 1, 0, 0, 0, 1, 0),   # class 0: broad on cam twins, split on 2
        (1, 1, 1, 0, 0, 0, 1, 0),   # class 1: look-alike of 0
        (0, 0, 1, 0, 1, 1, 1, 0),   # class 2: broad on mic twins, split on 6
        (0, 0, 1, 0, 1, 1, 1, 0),   # class 3: look-alike of 2
        (0, 0, 1, 0, 1, 1, 1, 0),   # class 4: broad on mic twins, split on 2
        (0, 0, 1, 0, 1, 1, 1, 0),   # class 5: look-alike of 4
    )
    coverage_gain = (
        # sensors:  0  1  2  3  4  5  6  7
        (1, 1, 1, 0, 0, 0, f, 0),   # class 0
        (1, 1, 1, 0, 0, 0, f, 0),   # class 1
        (0, 0, f, 0, 1, 1, 1, 0),   # class 2
        (0, 0, f, 0, 1, 1, 1, 0),   # class 3
        (0, 0, 1, 0, 1, 1, f, 0),   # class 4
        (0, 0, 1, 0, 1, 1, f, 0),   # class 5
    )
    return WorldSpec(
        num_classes=6,
        num_sensors=8,
        sensor_groups={"cam": (0, 1, 2, 3), "mic": (4, 5, 6, 7)},
        frames_per_clip=32,
        feature_dim_raw=16,
        coverage=coverage,
        redundancy_pairs=((0, 1), (4, 5)),
        background_sensors=(3, 7),
        noise_sigma=0.1,
        event_rate=0.5,
        min_events=2,
        max_concurrent=4,
        rendering="linear",
        sign_flip_prob=0.35,
        coverage_gain=coverage_gain,
        signature_share=((0, 1, (0, 1)), (2, 3, (4, 5)), (4, 5, (4, 5))),
        seed=seed,
    )


def build_signatures(spec: WorldSpec) -> np.ndarray:
    """Per-(class, sensor) unit-norm signature fragments, fixed by spec.seed.

    Each covering sensor keeps a random coordinate subset of the full class
    signature (never all coordinates, so no sensor carries the whole thing);
    redundant pairs end up with identical fragments.
    """
    rng = np.random.default_rng(spec.seed)
    C, S, F = spec.num_classes, spec.num_sensors, spec.feature_dim_raw
    full = rng.normal(size=(C, F))
    sig = np.zeros((C, S, F))
    for c in range(C):
        for s in range(S):
            keep = rng.random(F) < spec.fragment_keep
            if not keep.any():
                keep[int(rng.integers(F))] = True
            if keep.all() and F > 1:
                keep[int(rng.integers(F))] = False
            if not spec.coverage[c][s]:
                continue
            vec = full[c] * keep
            sig[c, s] = vec / np.linalg.norm(vec)
    for u, v in spec.redundancy_pairs:
        sig[:, v, :] = sig[:, u, :]
    for u, v, shared in spec.signature_share:
        for s in shared:
            sig[v, s] = sig[u, s]
    return sig


def sample_event_script(spec: WorldSpec, rng: np.random.Generator) -> np.ndarray:
    """(T, C) binary activity; one contiguous interval per active class."""
    C, T = spec.num_classes, spec.frames_per_clip
    lo, hi = spec.event_len_range
    for _ in range(100):
        active = rng.random(C) < spec.event_rate
        deficit = spec.min_events - int(active.sum())
        if deficit > 0:
            pool = np.flatnonzero(~active)
            picks = rng.choice(pool, size=deficit, replace=False)
            active[picks] = True
        script = np.zeros((T, C), dtype=np.int8)
        for c in np.flatnonzero(active):
            length = int(rng.integers(lo, hi + 1))
            start = int(rng.integers(0, T - length + 1))
            script[start:start + length, c] = 1
        if int(script.sum(axis=1).max()) <= spec.max_concurrent:
            return script
    raise GenerationError(
        "sample_event_script: could not satisfy the max_concurrent constraint in 100 attempts")


def render_features(spec: WorldSpec, script: np.ndarray,
                    rng: np.random.Generator,
                    signatures: np.ndarray | None = None) -> np.ndarray:
    """(S, T, F) observed features.

    The clean mixture sums the active class signatures per sensor. Linear
    rendering observes the mixture directly; energy rendering observes its
    signed square x*|x|, so concurrent events interfere and single-sensor
    readings stop being linearly decodable. N(0, sigma^2) noise either way.
    """
    sig = build_signatures(spec) if signatures is None else signatures
    amps = rng.uniform(*spec.event_amp_range, size=spec.num_classes)
    flips = rng.random(spec.num_classes) < spec.sign_flip_prob
    amps = np.where(flips, -amps, amps)
    gain = spec.gain_matrix()
    x = np.einsum("tc,cs,csf->stf", script.astype(np.float64), gain * amps[:, None], sig)
    if spec.rendering == "energy":
        x = x * np.abs(x)
    x += rng.normal(0.0, spec.noise_sigma, size=x.shape)
    return x


def make_weak_label(strong: np.ndarray) -> np.ndarray:
    """Clip-level multi-hot: class present iff active in any frame."""
    return strong.any(axis=0).astype(np.int8)


def count_event_instances(clips: list[ClipSample], num_classes: int) -> np.ndarray:
    """One instance per contiguous active interval per class."""
    counts = np.zeros(num_classes, dtype=np.int64)
    for clip in clips:
        s = clip.strong_labels
        rises = (s[1:] == 1) & (s[:-1] == 0)
        counts += rises.sum(axis=0) + s[0]
    return counts


def generate_dataset(spec: WorldSpec, sizes: tuple[int, int, int] = (80, 10, 10)) -> DatasetSplit:
    """Deterministic dataset: per-clip rng streams spawn from spec.seed."""
    n_train, n_val, n_test = (int(n) for n in sizes)
    if n_train < 1 or n_val < 1 or n_test < 1:
        raise ValueError("generate_dataset: every split needs at least one clip")
    children = np.random.SeedSequence(spec.seed).spawn(n_train + n_val + n_test)
    signatures = build_signatures(spec)

    def make_clips(prefix, offset, count):
        out = []
        for i in range(count):
            rng = np.random.default_rng(children[offset + i])
            script = sample_event_script(spec, rng)
            feats = render_features(spec, script, rng, signatures=signatures)
            out.append(ClipSample(
                clip_id=f"{prefix}-{i:04d}",
                features=feats,
                strong_labels=script,
                weak_label=make_weak_label(script),
            ))
        return out

    train = make_clips("train", 0, n_train)
    val = make_clips("val", n_train, n_val)
    test = make_clips("test", n_train + n_val, n_test)
    counts = count_event_instances(train, spec.num_classes)
    if (counts == 0).any():
        missing = np.flatnonzero(counts == 0).tolist()
        raise GenerationError(
            f"generate_dataset: classes {missing} never occur in the train split; "
            f"increase the split size or event_rate")
    return DatasetSplit(train=train, val=val, test=test, class_counts=counts, spec=spec)


# ---------------------------------------------------------------------------
# world spec <-> JSON


def world_spec_to_dict(spec: WorldSpec) -> dict:
    return {
        "num_classes": spec.num_classes,
        "num_sensors": spec.num_sensors,
        "sensor_groups": {name: list(m) for name, m in spec.sensor_groups.items()},
        "frames_per_clip": spec.frames_per_clip,
        "feature_dim_raw": spec.feature_dim_raw,
        "coverage": [list(row) for row in spec.coverage],
        "redundancy_pairs": [list(p) for p in spec.redundancy_pairs],
        "background_sensors": list(spec.background_sensors),
        "noise_sigma": spec.noise_sigma,
        "event_rate": spec.event_rate,
        "min_events": spec.min_events,
        "max_concurrent": spec.max_concurrent,
        "event_len_range": list(spec.event_len_range),
        "event_amp_range": list(spec.event_amp_range),
        "fragment_keep": spec.fragment_keep,
        "rendering": spec.rendering,
        "sign_flip_prob": spec.sign_flip_prob,
        "coverage_gain": (None if spec.coverage_gain is None
                          else [list(row) for row in spec.coverage_gain]),
        "signature_share": [[u, v, list(shared)] for u, v, shared in spec.signature_share],
        "seed": spec.seed,
    }


def world_spec_from_dict(d: dict) -> WorldSpec:
    try:
        return WorldSpec(
            num_classes=int(d["num_classes"]),
            num_sensors=int(d["num_sensors"]),
            sensor_groups={str(k): tuple(int(s) for s in v)
                           for k, v in d["sensor_groups"].items()},
            frames_per_clip=int(d["frames_per_clip"]),
            feature_dim_raw=int(d["feature_dim_raw"]),
            coverage=tuple(tuple(int(x) for x in row) for row in d["coverage"]),
            redundancy_pairs=tuple((int(u), int(v)) for u, v in d["redundancy_pairs"]),
            background_sensors=tuple(int(s) for s in d["background_sensors"]),
            noise_sigma=float(d["noise_sigma"]),
            event_rate=float(d["event_rate"]),
            min_events=int(d["min_events"]),
            max_concurrent=int(d["max_concurrent"]),
            event_len_range=tuple(int(x) for x in d.get("event_len_range", (4, 16))),
            event_amp_range=tuple(float(x) for x in d.get("event_amp_range", (0.7, 1.3))),
            fragment_keep=float(d.get("fragment_keep", 0.5)),
            rendering=str(d.get("rendering", "linear")),
            sign_flip_prob=float(d.get("sign_flip_prob", 0.0)),
            coverage_gain=(None if d.get("coverage_gain") is None else
                           tuple(tuple(float(x) for x in row)
                                 for row in d["coverage_gain"])),
            signature_share=tuple((int(u), int(v), tuple(int(s) for s in shared))
                                  for u, v, shared in d.get("signature_share", ())),
            seed=int(d["seed"]),
        )
    except KeyError as e:
        raise DatasetError(f"world spec: missing field {e}") from None


# ---------------------------------------------------------------------------
# on-disk dataset format


def _crc_hex(data: bytes) -> str:
    return format(zlib.crc32(data) & 0xFFFFFFFF, "08x")


def save_dataset(split: DatasetSplit, out_dir) -> None:
    """Write spec.json, clips.bin, and checksums.txt into a directory."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec = split.spec
    spec_bytes = json.dumps(world_spec_to_dict(spec), indent=2, sort_keys=True).encode("utf-8")

    parts = [DATASET_MAGIC + DATASET_VERSION]
    parts.append(struct.pack(
        "<7I", len(split.train), len(split.val), len(split.test),
        spec.num_sensors, spec.frames_per_clip, spec.num_classes, spec.feature_dim_raw))
    for clip in split.train + split.val + split.test:
        cid = clip.clip_id.encode("utf-8")
        parts.append(struct.pack("<I", len(cid)))
        parts.append(cid)
        parts.append(np.ascontiguousarray(clip.features, dtype="<f8").tobytes())
        bits = np.packbits(clip.strong_labels.astype(np.uint8).reshape(-1))
        parts.append(bits.tobytes())
    clips_bytes = b"".join(parts)

    (out / "spec.json").write_bytes(spec_bytes)
    (out / "clips.bin").write_bytes(clips_bytes)
    checks = (f"{_crc_hex(spec_bytes)}  spec.json\n"
              f"{_crc_hex(clips_bytes)}  clips.bin\n")
    (out / "checksums.txt").write_bytes(checks.encode("utf-8"))


def load_dataset(path) -> DatasetSplit:
    """Read a dataset directory, validating checksums, magic, and version."""
    root = Path(path)
    for fname in ("spec.json", "clips.bin", "checksums.txt"):
        if not (root / fname).exists():
            raise DatasetError(f"{root}: missing {fname}")
    expected = {}
    for line in (root / "checksums.txt").read_text("utf-8").splitlines():
        if line.strip():
            crc, name = line.split(None, 1)
            expected[name.strip()] = crc
    blobs = {}
    for fname in ("spec.json", "clips.bin"):
        blob = (root / fname).read_bytes()
        if fname not in expected:
            raise DatasetError(f"{root}: checksums.txt has no entry for {fname}")
        if _crc_hex(blob) != expected[fname]:
            raise DatasetError(f"{root}: checksum mismatch for {fname}")
        blobs[fname] = blob

    spec = world_spec_from_dict(json.loads(blobs["spec.json"].decode("utf-8")))
    raw = blobs["clips.bin"]
    if raw[:5] != DATASET_MAGIC:
        raise DatasetError(f"{root}: clips.bin is not a dataset file")
    if raw[5:6] != DATASET_VERSION:
        raise DatasetError(f"{root}: unsupported dataset version {raw[5:6]!r}")
    off = 6
    n_train, n_val, n_test, S, T, C, F = struct.unpack_from("<7I", raw, off)
    off += struct.calcsize("<7I")
    if (S, T, C, F) != (spec.num_sensors, spec.frames_per_clip,
                        spec.num_classes, spec.feature_dim_raw):
        raise DatasetError(f"{root}: clips.bin dimensions disagree with spec.json")

    feat_bytes = S * T * F * 8
    label_bytes = (T * C + 7) // 8

    def read_clips(count):
        nonlocal off
        out = []
        for _ in range(count):
            if off + 4 > len(raw):
                raise DatasetError(f"{root}: clips.bin truncated")
            (id_len,) = struct.unpack_from("<I", raw, off)
            off += 4
            end = off + id_len + feat_bytes + label_bytes
            if end > len(raw):
                raise DatasetError(f"{root}: clips.bin truncated")
            cid = raw[off:off + id_len].decode("utf-8")
            off += id_len
            feats = np.frombuffer(raw, dtype="<f8", count=S * T * F,
                                  offset=off).reshape(S, T, F).copy()
            off += feat_bytes
            bits = np.frombuffer(raw, dtype=np.uint8, count=label_bytes, offset=off)
            off += label_bytes
            strong = np.unpackbits(bits, count=T * C).reshape(T, C).astype(np.int8)
            out.append(ClipSample(cid, feats, strong, make_weak_label(strong)))
        return out

    train = read_clips(n_train)
    val = read_clips(n_val)
    test = read_clips(n_test)
    if off != len(raw):
        raise DatasetError(f"{root}: clips.bin has {len(raw) - off} trailing bytes")
    counts = count_event_instances(train, C)
    return DatasetSplit(train=train, val=val, test=test, class_counts=counts, spec=spec)


# ---------------------------------------------------------------------------
# label access tracking


@dataclass
class LabelAccessLog:
    strong_reads: int = 0
    weak_reads: int = 0

    @property
    def total(self) -> int:
        return self.strong_reads + self.weak_reads


class TrackedClip:
    """ClipSample stand-in that counts every label read."""

    __slots__ = ("_clip", "_log")

    def __init__(self, clip: ClipSample, log: LabelAccessLog):
        self._clip = clip
        self._log = log

    @property
    def clip_id(self):
        return self._clip.clip_id

    @property
    def features(self):
        return self._clip.features

    @property
    def strong_labels(self):
        self._log.strong_reads += 1
        return self._clip.strong_labels

    @property
    def weak_label(self):
        self._log.weak_reads += 1
        return self._clip.weak_label


def track_labels(clips) -> tuple[list[TrackedClip], LabelAccessLog]:
    log = LabelAccessLog()
    return [TrackedClip(c, log) for c in clips], log
