"""Deterministic synthetic volumetric cases with coupled masks, labels and reports.

Each case is a ``D x H x W`` float32 grid holding axis-aligned ellipsoid
"organs" placed in shuffled slots of a D x H grid, with small spherical
"lesions" placed strictly inside their host organ. Lesion classes are the
multi-label classification targets; organs are always present.

Randomness comes from numpy's Philox4x64 counter-based bit generator keyed by
the case seed. Only its raw 64-bit outputs are consumed; uniforms are
``(raw >> 11) * 2**-53`` and Gaussian-like noise is an Irwin-Hall sum of four
uniforms, so every float is produced by IEEE-exact arithmetic and outputs are
identical across platforms.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy import ndimage

from .vocab import BOS, EOS, Vocab, lesion_word

logger = logging.getLogger(__name__)

GRANULARITIES = ("C", "C+L", "F+L")


class GenerationError(ValueError):
    pass


@dataclass(frozen=True)
class OrganSpec:
    name: str
    intensity: tuple[float, float]
    # semi-axis length as a fraction of the slot half-extent, per axis
    extent: tuple[float, float] = (0.75, 0.95)


@dataclass(frozen=True)
class LesionSpec:
    class_index: int
    host: int
    radius: tuple[int, int]
    intensity: tuple[float, float]
    probability: float = 0.5


@dataclass(frozen=True)
class CaseSpec:
    shape: tuple[int, int, int]
    organs: tuple[OrganSpec, ...]
    lesions: tuple[LesionSpec, ...]
    granularity: str = "coarse"  # or "fine"
    lesion_labels: bool = True
    background: tuple[float, float] = (0.0, 0.1)
    noise_sigma: float = 0.05
    shuffle_slots: bool = True

    def __post_init__(self):
        if self.granularity not in ("coarse", "fine"):
            raise ValueError(f"granularity must be 'coarse' or 'fine', got {self.granularity!r}")
        if len(self.shape) != 3 or min(self.shape) < 4:
            raise ValueError(f"bad grid shape {self.shape}")
        classes = sorted(l.class_index for l in self.lesions)
        if classes != list(range(len(self.lesions))):
            raise ValueError("lesion class indices must form exactly [0, n_classes)")
        for l in self.lesions:
            if not 0 <= l.host < len(self.organs):
                raise ValueError(f"lesion-{l.class_index} names unknown host organ {l.host}")
        if len(self.organs) + len(self.lesions) + len(self.organs) >= 256:
            raise ValueError("too many labels for an 8-bit mask")

    @property
    def n_classes(self) -> int:
        return len(self.lesions)

    @property
    def n_organ_labels(self) -> int:
        return len(self.organs) * (2 if self.granularity == "fine" else 1)

    @property
    def n_seg_classes(self) -> int:
        return 1 + self.n_organ_labels + (self.n_classes if self.lesion_labels else 0)

    def lesion_label(self, k: int) -> int:
        return 1 + self.n_organ_labels + k

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CaseSpec":
        d = dict(d)
        d["shape"] = tuple(d["shape"])
        d["organs"] = tuple(
            OrganSpec(o["name"], tuple(o["intensity"]), tuple(o["extent"])) for o in d["organs"]
        )
        d["lesions"] = tuple(
            LesionSpec(l["class_index"], l["host"], tuple(l["radius"]), tuple(l["intensity"]), l["probability"])
            for l in d["lesions"]
        )
        d["background"] = tuple(d["background"])
        return cls(**d)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def default_case_spec(
    shape=(32, 32, 16),
    n_classes: int = 3,
    granularity: str = "C+L",
    lesion_probability: float = 0.5,
    lesion_radius=(3, 3),
) -> CaseSpec:
    """Organ/lesion catalogue used throughout the package.

    Up to three organs split the 0.4-0.6 intensity range into bands; lesion
    class ``k`` lives in organ ``k mod n_organs``. Classes sharing a host are
    told apart by disjoint sub-bands of 0.8-1.0.
    """
    n_organs = max(1, min(n_classes, 3))
    bands = _split_band(0.4, 0.6, n_organs)
    organs = tuple(OrganSpec(f"organ-{o}", bands[o]) for o in range(n_organs))
    per_host = math.ceil(n_classes / n_organs)
    lesion_bands = _split_band(0.8, 1.0, per_host)
    lesions = tuple(
        LesionSpec(k, k % n_organs, tuple(lesion_radius), lesion_bands[k // n_organs], lesion_probability)
        for k in range(n_classes)
    )
    spec = CaseSpec(tuple(shape), organs, lesions)
    return with_granularity(spec, granularity)


def _split_band(lo, hi, n):
    width = (hi - lo) / n
    gap = 0.1 * width if n > 1 else 0.0
    return [(round(lo + i * width + (gap if i else 0.0), 6), round(lo + (i + 1) * width, 6)) for i in range(n)]


def with_granularity(spec: CaseSpec, preset: str) -> CaseSpec:
    """Map the Seg(C) / Seg(C+L) / Seg(F+L) presets onto mask annotation flags."""
    if preset not in GRANULARITIES:
        raise ValueError(f"granularity preset must be one of {GRANULARITIES}, got {preset!r}")
    return dataclasses.replace(
        spec,
        granularity="fine" if preset == "F+L" else "coarse",
        lesion_labels=preset != "C",
    )


class CaseRNG:
    """Thin wrapper over Philox4x64 exposing only integer-derived draws."""

    def __init__(self, seed: int):
        self._bg = np.random.Philox(key=int(seed) & (2**64 - 1))

    def raw(self, n: int) -> np.ndarray:
        return np.asarray(self._bg.random_raw(n), dtype=np.uint64).reshape(-1)

    def uniform(self, n: int = 1, lo=0.0, hi=1.0) -> np.ndarray:
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return lo + (hi - lo) * u

    def integer(self, n: int) -> int:
        if n <= 0:
            raise ValueError("integer range must be positive")
        return int(self.raw(1)[0] % np.uint64(n))

    def permutation(self, n: int) -> list[int]:
        items = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.integer(i + 1)
            items[i], items[j] = items[j], items[i]
        return items

    def noise(self, shape, sigma: float) -> np.ndarray:
        size = int(np.prod(shape))
        u = self.uniform(4 * size).reshape(4, size)
        z = (u[0] + u[1] + u[2] + u[3] - 2.0) * math.sqrt(3.0)
        return (sigma * z).reshape(shape)


@dataclass(frozen=True)
class Report:
    tokens: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        if len(self.tokens) < 2 or self.tokens[0] != BOS or self.tokens[-1] != EOS:
            raise ValueError("a report must begin with BOS and end with EOS")

    def __len__(self):
        return len(self.tokens)


class Case(NamedTuple):
    volume: np.ndarray  # float32 (D, H, W) in [0, 1]
    mask: np.ndarray  # uint8 (D, H, W)
    labels: np.ndarray  # uint8 (n_classes,)
    report: Report


def _ball(radius: int) -> np.ndarray:
    r = np.arange(-radius, radius + 1)
    zz, yy, xx = np.meshgrid(r, r, r, indexing="ij")
    return zz**2 + yy**2 + xx**2 <= radius * radius


def _slot_layout(n_organs: int):
    n_h = math.ceil(math.sqrt(n_organs))
    n_d = math.ceil(n_organs / n_h)
    return n_d, n_h


def generate_case(seed: int, spec: CaseSpec) -> Case:
    rng = CaseRNG(seed)
    D, H, W = spec.shape
    n_org = len(spec.organs)
    n_d, n_h = _slot_layout(n_org)
    slots = rng.permutation(n_d * n_h) if spec.shuffle_slots else list(range(n_d * n_h))
    coords = np.indices(spec.shape, dtype=np.float64)

    organ_id = np.full(spec.shape, -1, dtype=np.int64)
    half = np.zeros(spec.shape, dtype=np.int64)
    level = np.full(spec.shape, rng.uniform(1, *spec.background)[0])
    for o, organ in enumerate(spec.organs):
        sd, sh = divmod(slots[o], n_h)
        lo = np.array([sd * D / n_d, sh * H / n_h, 0.0])
        hi = np.array([(sd + 1) * D / n_d, (sh + 1) * H / n_h, float(W)])
        half_extent = (hi - lo) / 2.0 - 1.0
        radii = half_extent * rng.uniform(3, *organ.extent)
        jitter = (half_extent - radii) * (2.0 * rng.uniform(3) - 1.0)
        center = (lo + hi) / 2.0 - 0.5 + jitter
        inside = sum(((coords[a] - center[a]) / radii[a]) ** 2 for a in range(3)) <= 1.0
        organ_id[inside] = o
        level[inside] = rng.uniform(1, *organ.intensity)[0]
        axis = int(np.argmax(radii))
        half[inside] = (coords[axis][inside] > center[axis]).astype(np.int64)

    lesion_id = np.full(spec.shape, -1, dtype=np.int64)
    labels = np.zeros(spec.n_classes, dtype=np.uint8)
    for lesion in sorted(spec.lesions, key=lambda l: l.class_index):
        draw = rng.uniform(1)[0]
        radius = spec_radius = lesion.radius[0] + rng.integer(lesion.radius[1] - lesion.radius[0] + 1)
        intensity = rng.uniform(1, *lesion.intensity)[0]
        pick = int(rng.raw(1)[0] >> np.uint64(1))
        if draw >= lesion.probability:
            continue
        host = organ_id == lesion.host
        # one-voxel ring of host tissue around the lesion, and no contact with other lesions
        allowed = ndimage.binary_erosion(host, structure=_ball(radius + 1), border_value=0)
        allowed &= ~ndimage.binary_dilation(lesion_id >= 0, structure=_ball(radius + 1))
        candidates = np.flatnonzero(allowed)
        if candidates.size == 0:
            raise GenerationError(
                f"lesion-{lesion.class_index} (radius {spec_radius}) cannot fit inside host organ {lesion.host}"
            )
        c = np.unravel_index(candidates[pick % candidates.size], spec.shape)
        ball = sum((coords[a] - c[a]) ** 2 for a in range(3)) <= radius * radius
        lesion_id[ball] = lesion.class_index
        level[ball] = intensity
        labels[lesion.class_index] = 1

    noise = rng.noise(spec.shape, spec.noise_sigma)
    volume = np.clip(level + noise, 0.0, 1.0).astype(np.float32)
    mask = _assemble_mask(spec, organ_id, half, lesion_id)
    return Case(volume, mask, labels, render_report(labels))


def _assemble_mask(spec: CaseSpec, organ_id, half, lesion_id) -> np.ndarray:
    mask = np.zeros(spec.shape, dtype=np.uint8)
    is_organ = organ_id >= 0
    if spec.granularity == "fine":
        mask[is_organ] = 1 + 2 * organ_id[is_organ] + half[is_organ]
    else:
        mask[is_organ] = 1 + organ_id[is_organ]
    if spec.lesion_labels:
        is_lesion = lesion_id >= 0
        mask[is_lesion] = spec.lesion_label(0) + lesion_id[is_lesion]
    return mask


def fine_to_coarse(n_organs: int, n_classes: int) -> np.ndarray:
    """Lookup table mapping fine (F+L) labels to coarse (C+L) labels."""
    table = [0]
    for o in range(n_organs):
        table += [1 + o, 1 + o]
    table += [1 + n_organs + k for k in range(n_classes)]
    return np.asarray(table, dtype=np.uint8)


def report_text(y: Sequence[int]) -> str:
    sentences = []
    for k, v in enumerate(y):
        w = lesion_word(k)
        sentences.append(f"{w} is present ." if int(v) else f"no {w} is seen .")
    return " ".join(sentences)


def render_report(y: Sequence[int], vocab: Vocab | None = None) -> Report:
    vocab = vocab or Vocab.for_classes(len(y))
    return Report(vocab.encode(report_text(y)))


def extract_labels(
    report, n_classes: int | None = None, vocab: Vocab | None = None, stats: Counter | None = None
) -> np.ndarray:
    """Recover the label vector from a report (a :class:`Report`, id sequence or text).

    Class ``k`` is positive iff "lesion-k is present" occurs and "no lesion-k
    is seen" does not. Non-empty text that matches no sentence at all is
    counted under ``stats["unparseable"]``.
    """
    if n_classes is None:
        if vocab is None:
            raise ValueError("need n_classes or a vocabulary")
        n_classes = vocab.n_classes
    if isinstance(report, str):
        text = report
    else:
        vocab = vocab or Vocab.for_classes(n_classes)
        tokens = report.tokens if isinstance(report, Report) else report
        text = vocab.decode(tokens)
    words = text.split()
    pos, neg = set(), set()
    for i, w in enumerate(words):
        if not w.startswith("lesion-"):
            continue
        if words[i + 1 : i + 3] == ["is", "present"]:
            pos.add(w)
        if i > 0 and words[i - 1] == "no" and words[i + 1 : i + 3] == ["is", "seen"]:
            neg.add(w)
    y = np.zeros(n_classes, dtype=np.uint8)
    for k in range(n_classes):
        w = lesion_word(k)
        y[k] = w in pos and w not in neg
    if words and not (pos or neg):
        logger.warning("report matched no label sentence: %r", text[:80])
        if stats is not None:
            stats["unparseable"] += 1
    return y


def patch_offset(shape, patch_shape, seed: int) -> tuple[int, int, int]:
    if any(p > s for p, s in zip(patch_shape, shape)):
        raise ValueError(f"patch {tuple(patch_shape)} larger than volume {tuple(shape)}")
    rng = CaseRNG(seed)
    return tuple(rng.integer(s - p + 1) for s, p in zip(shape, patch_shape))


def sample_patch(volume: np.ndarray, mask: np.ndarray, patch_shape, seed: int):
    """Random crop with the same offset applied to ``volume`` and ``mask``."""
    if volume.shape != mask.shape:
        raise ValueError("volume and mask shapes differ")
    off = patch_offset(volume.shape, patch_shape, seed)
    sl = tuple(slice(o, o + p) for o, p in zip(off, patch_shape))
    return volume[sl], mask[sl]


def check_divisible(shape, n_stages: int) -> None:
    f = 2 ** (n_stages - 1)
    for axis, s in zip("DHW", shape):
        if s % f:
            raise ValueError(f"axis {axis}={s} is not divisible by 2^{n_stages - 1}={f}")


@dataclass
class Dataset:
    """Stacked cases plus their train/test assignment."""

    spec: CaseSpec
    seeds: np.ndarray
    volumes: np.ndarray
    masks: np.ndarray
    labels: np.ndarray
    reports: list[Report]
    split: np.ndarray = field(default=None)

    def __len__(self):
        return len(self.seeds)

    @property
    def vocab(self) -> Vocab:
        return Vocab.for_classes(self.spec.n_classes)

    def subset(self, which: str) -> "Dataset":
        idx = np.flatnonzero(self.split == which)
        return self.take(idx)

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(
            self.spec,
            self.seeds[idx],
            self.volumes[idx],
            self.masks[idx],
            self.labels[idx],
            [self.reports[i] for i in idx],
            self.split[idx],
        )


def case_seed(base_seed: int, index: int) -> int:
    return (int(base_seed) << 32) | int(index)


def make_dataset(spec: CaseSpec, n_train: int, n_test: int, seed: int = 0) -> Dataset:
    n = n_train + n_test
    seeds = np.array([case_seed(seed, i) for i in range(n)], dtype=np.uint64)
    cases = [generate_case(int(s), spec) for s in seeds]
    return Dataset(
        spec,
        seeds,
        np.stack([c.volume for c in cases]),
        np.stack([c.mask for c in cases]),
        np.stack([c.labels for c in cases]),
        [c.report for c in cases],
        np.array(["train"] * n_train + ["test"] * n_test),
    )


def export_dataset(ds: Dataset, out_dir) -> Path:
    """Write ``case_<id>/{volume.raw,mask.raw,labels.txt,report.txt}`` and ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vocab = ds.vocab
    entries = []
    for i in range(len(ds)):
        d = out / f"case_{i:05d}"
        d.mkdir(exist_ok=True)
        (d / "volume.raw").write_bytes(ds.volumes[i].astype("<f4").tobytes(order="C"))
        (d / "mask.raw").write_bytes(ds.masks[i].astype(np.uint8).tobytes(order="C"))
        (d / "labels.txt").write_text("".join(f"{int(v)}\n" for v in ds.labels[i]))
        (d / "report.txt").write_text(vocab.decode(ds.reports[i].tokens) + "\n", encoding="utf-8")
        entries.append({"id": f"case_{i:05d}", "seed": int(ds.seeds[i]), "split": str(ds.split[i])})
    manifest = {
        "format": 1,
        "shape": list(ds.spec.shape),
        "n_classes": ds.spec.n_classes,
        "n_seg_classes": ds.spec.n_seg_classes,
        "spec_hash": ds.spec.hash(),
        "spec": ds.spec.to_dict(),
        "cases": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return out / "manifest.json"


def load_dataset(path) -> Dataset:
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    spec = CaseSpec.from_dict(manifest["spec"])
    vocab = Vocab.for_classes(spec.n_classes)
    vols, masks, labels, reports = [], [], [], []
    for e in manifest["cases"]:
        d = root / e["id"]
        vols.append(np.frombuffer((d / "volume.raw").read_bytes(), dtype="<f4").reshape(spec.shape))
        masks.append(np.frombuffer((d / "mask.raw").read_bytes(), dtype=np.uint8).reshape(spec.shape))
        labels.append(np.array([int(x) for x in (d / "labels.txt").read_text().split()], dtype=np.uint8))
        reports.append(Report(vocab.encode((d / "report.txt").read_text(encoding="utf-8").strip())))
    return Dataset(
        spec,
        np.array([e["seed"] for e in manifest["cases"]], dtype=np.uint64),
        np.stack(vols).astype(np.float32),
        np.stack(masks),
        np.stack(labels),
        reports,
        np.array([e["split"] for e in manifest["cases"]]),
    )
