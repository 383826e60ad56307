"""Synthetic slice-sequence studies: HU volumes, lesion intervals, reports.

A phantom study is a stack of axial HU slices showing a drifting ellipse
"body" with a rotating, shrinking low-density inner region (so axial
position is decodable from appearance), plus bright lesion disks that are
active only inside their slice intervals. Every study carries slice-level
lesion labels and a template report rendered from a small finding
vocabulary.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .errors import ReportParseError, ValidationError

HU_MIN = -1024
HU_MAX = 3071

# Display windows (level, width) applied as RGB channels.
LUNG_WINDOW = (-600.0, 1500.0)
SOFT_TISSUE_WINDOW = (40.0, 400.0)
BONE_WINDOW = (400.0, 1500.0)

# Token vocabulary: 0..3 specials, 4..7 prompt, 8..55 finding phrases.
VOCAB_SIZE = 64
PAD_TOKEN = 0
BOS_TOKEN = 1
EOS_TOKEN = 2
PROMPT_TOKENS = (4, 5, 6, 7)
_PHRASE_BASE = 8
N_FINDINGS = 16
NONTARGET_FINDINGS = tuple(range(8))
TARGET_FINDINGS = tuple(range(8, 16))


@dataclass(frozen=True)
class WindowSpec:
    """CT display window: level (center) and width, both in HU."""

    level: float
    width: float

    def __post_init__(self):
        if not self.width > 0:
            raise ValidationError(f"window width must be > 0, got {self.width}")


@dataclass(frozen=True)
class LesionAnnotation:
    """One lesion: inclusive slice interval plus disk geometry.

    ``center`` is a (row, col) fraction pair and ``radius`` a fraction of
    the slice width; ``intensity`` scales the HU bump in (0, 1].
    """

    start_slice: int
    end_slice: int
    intensity: float
    center: tuple[float, float]
    radius: float

    def __post_init__(self):
        if self.start_slice < 0 or self.end_slice < self.start_slice:
            raise ValidationError(
                f"bad lesion interval [{self.start_slice}, {self.end_slice}]")
        if not (0 < self.intensity <= 1):
            raise ValidationError(f"intensity must be in (0, 1], got {self.intensity}")
        if not self.radius > 0:
            raise ValidationError("lesion radius must be > 0")


@dataclass
class HuVolume:
    """Ordered axial HU slices of one study, stored as int16 (T, H, W)."""

    slices: np.ndarray
    spacing_tag: str
    study_id: str

    def __post_init__(self):
        self.slices = np.asarray(self.slices)
        if self.slices.ndim != 3 or self.slices.shape[0] < 1:
            raise ValidationError("volume must be (T, H, W) with T >= 1")
        if self.slices.dtype != np.int16:
            raise ValidationError(f"volume dtype must be int16, got {self.slices.dtype}")
        if self.slices.min() < HU_MIN or self.slices.max() > HU_MAX:
            raise ValidationError(f"HU values outside [{HU_MIN}, {HU_MAX}]")

    @property
    def num_slices(self) -> int:
        return self.slices.shape[0]


@dataclass(frozen=True)
class TemplateReport:
    """Token-rendered report plus the finding set it encodes."""

    tokens: tuple[int, ...]
    findings: tuple[int, ...]

    @property
    def target_findings(self) -> frozenset[int]:
        return frozenset(f for f in self.findings if f in TARGET_FINDINGS)

    @property
    def nontarget_findings(self) -> frozenset[int]:
        return frozenset(f for f in self.findings if f in NONTARGET_FINDINGS)


@dataclass
class PhantomStudy:
    """One synthetic study: volume, annotations, labels, report."""

    volume: HuVolume
    annotations: tuple[LesionAnnotation, ...]
    labels: np.ndarray
    report: TemplateReport
    split: str = "train"

    @property
    def study_id(self) -> str:
        return self.volume.study_id

    @property
    def lesion_positive(self) -> bool:
        return len(self.annotations) > 0


@dataclass
class GeneratorConfig:
    """Settings for phantom generation; see README for the file schema."""

    n_train: int = 2000
    n_test: int = 200
    t_min: int = 12
    t_max: int = 24
    hu_side: int = 64
    lesion_rate: float = 0.15
    negative_fraction: float = 0.30
    run_len_min: int = 3
    run_len_max: int = 6
    noise_hu: float = 15.0
    drift_speed: float = 1.0
    walk_step: float = 0.008

    def validate(self):
        if self.t_min < 1 or self.t_max < self.t_min:
            raise ValidationError(f"bad T range [{self.t_min}, {self.t_max}]")
        if self.hu_side < 8:
            raise ValidationError("hu_side must be >= 8")
        if not (0 <= self.lesion_rate <= 1) or not (0 <= self.negative_fraction < 1):
            raise ValidationError("lesion_rate in [0,1], negative_fraction in [0,1)")
        if self.run_len_min < 1 or self.run_len_max < self.run_len_min:
            raise ValidationError("bad lesion run-length range")
        if self.run_len_min > self.t_min:
            raise ValidationError(
                f"minimum lesion run {self.run_len_min} longer than shortest study {self.t_min}")
        if self.noise_hu < 0:
            raise ValidationError("noise_hu must be >= 0")


# ---------------------------------------------------------------------------
# Windowing
# ---------------------------------------------------------------------------


def hu_window_to_channel(slice_hu: np.ndarray, window: WindowSpec) -> np.ndarray:
    """Map one HU slice to uint8 via clip + linear scale + round-half-up."""
    arr = np.asarray(slice_hu, dtype=np.float64)
    if arr.ndim != 2:
        raise ValidationError(f"expected a 2-D slice, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValidationError("non-finite HU values")
    lo = window.level - window.width / 2.0
    return kernels.window_u8(arr, lo, window.width)


def hu_to_rgb(slice_hu: np.ndarray, side: int = 32) -> np.ndarray:
    """Three-window uint8 image: lung, soft tissue, bone; area-resized."""
    channels = []
    for level, width in (LUNG_WINDOW, SOFT_TISSUE_WINDOW, BONE_WINDOW):
        ch = hu_window_to_channel(slice_hu, WindowSpec(level, width))
        channels.append(kernels.area_resize_u8(ch, side))
    return np.stack(channels, axis=-1)


def volume_to_rgb(volume: HuVolume, side: int = 32) -> np.ndarray:
    """Stack hu_to_rgb over all slices: (T, side, side, 3) uint8."""
    return np.stack([hu_to_rgb(s, side) for s in volume.slices], axis=0)


# ---------------------------------------------------------------------------
# Labels
# ---------------------------------------------------------------------------


def assign_slice_labels(num_slices: int, annotations) -> np.ndarray:
    """Binary per-slice labels: 1 iff the slice lies in any lesion interval."""
    if num_slices < 1:
        raise ValidationError("num_slices must be >= 1")
    m = np.zeros(num_slices, dtype=np.int8)
    for ann in annotations:
        if ann.end_slice >= num_slices:
            raise ValidationError(
                f"interval [{ann.start_slice}, {ann.end_slice}] out of range for T={num_slices}")
        m[ann.start_slice:ann.end_slice + 1] = 1
    return m


# ---------------------------------------------------------------------------
# Report templates
# ---------------------------------------------------------------------------


def finding_phrase(finding: int) -> tuple[int, int, int]:
    """Fixed 3-token phrase for a finding id."""
    if not (0 <= finding < N_FINDINGS):
        raise ValidationError(f"unknown finding id {finding}")
    base = _PHRASE_BASE + 3 * finding
    return (base, base + 1, base + 2)


def render_report_tokens(findings) -> tuple[int, ...]:
    """BOS, then finding phrases in ascending id order, then EOS."""
    tokens = [BOS_TOKEN]
    for f in sorted(set(findings)):
        tokens.extend(finding_phrase(f))
    tokens.append(EOS_TOKEN)
    return tuple(tokens)


def extract_findings(tokens) -> frozenset[int]:
    """Parse a token sequence back into its finding set.

    Raises ReportParseError when the sequence is not BOS + whole phrases +
    EOS; intervention metrics count such records as extractor failures.
    """
    toks = list(tokens)
    if not toks or toks[0] != BOS_TOKEN:
        raise ReportParseError("missing BOS")
    if EOS_TOKEN not in toks:
        raise ReportParseError("missing EOS")
    body = toks[1:toks.index(EOS_TOKEN)]
    if len(body) % 3 != 0:
        raise ReportParseError("phrase stream not a multiple of 3 tokens")
    found = set()
    for i in range(0, len(body), 3):
        triple = tuple(body[i:i + 3])
        first = triple[0] - _PHRASE_BASE
        if first < 0 or first % 3 != 0 or first // 3 >= N_FINDINGS:
            raise ReportParseError(f"unknown phrase start token {triple[0]}")
        f = first // 3
        if triple != finding_phrase(f):
            raise ReportParseError(f"broken phrase {triple}")
        found.add(f)
    return frozenset(found)


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------


def _sample_lesion_runs(rng, T, cfg):
    """Non-overlapping lesion runs whose total slice count is Binomial(T, r).

    The per-study run total is binomial in T so the long-run lesion-slice
    rate matches the configured rate exactly (conditioned on positives);
    run lengths are uniform in the configured range and runs are placed by a
    uniform composition of the free slack (adjacent runs may touch).
    """
    rate_pos = min(0.95, cfg.lesion_rate / (1.0 - cfg.negative_fraction))
    total = int(rng.binomial(T, rate_pos))
    if total == 0:
        return []
    lengths = []
    remaining = total
    while remaining > 0:
        length = int(rng.integers(cfg.run_len_min, cfg.run_len_max + 1))
        length = min(length, remaining)
        lengths.append(length)
        remaining -= length
    free = T - total
    m = len(lengths)
    # Uniform composition of `free` into m+1 gaps via sorted distinct cuts.
    if free > 0:
        cuts = np.sort(rng.choice(free + m, size=m, replace=False))
        gaps = [int(cuts[0])]
        gaps += [int(cuts[i + 1] - cuts[i] - 1) for i in range(m - 1)]
    else:
        gaps = [0] * m
    runs = []
    pos = 0
    for g, length in zip(gaps, lengths):
        pos += g
        runs.append((pos, pos + length - 1))
        pos += length
    return runs


def _target_finding_id(radius: float, intensity: float, col: float) -> int:
    return 8 + 4 * int(radius >= 0.10) + 2 * int(intensity >= 0.625) + int(col >= 0.5)


def generate_phantom_study(seed: int, config: GeneratorConfig,
                           study_id: str = "study", split: str = "train") -> PhantomStudy:
    """Deterministically build one study from a seed and generator settings."""
    config.validate()
    rng = np.random.default_rng(seed)

    T = int(rng.integers(config.t_min, config.t_max + 1))

    # Study-level anatomy; binary attributes drive the non-target findings.
    body_ry = float(rng.uniform(0.36, 0.46))
    body_rx = float(rng.uniform(0.38, 0.48))
    bone_frac = float(rng.uniform(0.05, 0.11))
    rot_dir = 1.0 if rng.uniform() < 0.5 else -1.0
    rot_span = float(rng.uniform(0.8, 1.6)) * config.drift_speed
    phi0 = float(rng.uniform(0.0, 2.0 * math.pi))
    lung_r0 = float(rng.uniform(0.10, 0.16))
    orbit = float(rng.uniform(0.08, 0.13))
    grad_gy = float(rng.uniform(-40.0, 40.0))
    grad_gx = float(rng.uniform(-40.0, 40.0))

    # Lesions.
    annotations = []
    if rng.uniform() >= config.negative_fraction:
        for start, end in _sample_lesion_runs(rng, T, config):
            annotations.append(LesionAnnotation(
                start_slice=start,
                end_slice=end,
                intensity=float(rng.uniform(0.25, 1.0)),
                center=(float(rng.uniform(0.32, 0.68)), float(rng.uniform(0.28, 0.72))),
                radius=float(rng.uniform(0.06, 0.14)),
            ))
    annotations = tuple(annotations)
    labels = assign_slice_labels(T, annotations)

    # Slow random walk of the inner-region center on top of the rotation.
    walk = np.clip(np.cumsum(rng.normal(0.0, config.walk_step, size=(T, 2)), axis=0),
                   -0.03, 0.03)

    side = config.hu_side
    slices = np.empty((T, side, side), dtype=np.int16)
    for t in range(T):
        tau = t / max(T - 1, 1)
        phi = phi0 + rot_dir * rot_span * tau
        lung_r = lung_r0 * (1.0 - 0.45 * tau)
        lung_cy = 0.5 + (orbit * math.sin(phi) + walk[t, 0]) * 0.8
        lung_cx = 0.5 + orbit * math.cos(phi) + walk[t, 1]
        active = [
            (ann.center[0], ann.center[1], ann.radius, ann.intensity)
            for ann in annotations if ann.start_slice <= t <= ann.end_slice
        ]
        les = np.array(active, dtype=np.float64).reshape(-1, 4)
        hu = kernels.render_hu_slice(side, side, body_ry, body_rx, bone_frac,
                                     lung_cy, lung_cx, lung_r, grad_gy, grad_gx, les)
        if config.noise_hu > 0:
            hu = hu + rng.normal(0.0, config.noise_hu, size=hu.shape)
        slices[t] = np.clip(np.floor(hu + 0.5), HU_MIN, HU_MAX).astype(np.int16)

    findings = {
        0 + int(rot_dir > 0),
        2 + int(body_rx >= 0.43),
        4 + int(lung_r0 >= 0.13),
        6 + int(bone_frac >= 0.08),
    }
    for ann in annotations:
        findings.add(_target_finding_id(ann.radius, ann.intensity, ann.center[1]))
    findings = tuple(sorted(findings))

    volume = HuVolume(slices=slices, spacing_tag="phantom-1.0mm", study_id=study_id)
    report = TemplateReport(tokens=render_report_tokens(findings), findings=findings)
    return PhantomStudy(volume=volume, annotations=annotations, labels=labels,
                        report=report, split=split)


def study_seed(base_seed: int, index: int) -> int:
    """Stable per-study child seed derived from the dataset seed."""
    ss = np.random.SeedSequence([int(base_seed), int(index)])
    return int(ss.generate_state(1, np.uint64)[0])


def generate_dataset(config: GeneratorConfig, seed: int):
    """Yield train then test studies, deterministically from the seed."""
    config.validate()
    total = config.n_train + config.n_test
    for i in range(total):
        split = "train" if i < config.n_train else "test"
        sid = f"study_{i:05d}"
        yield generate_phantom_study(study_seed(seed, i), config, study_id=sid, split=split)


# ---------------------------------------------------------------------------
# Dataset directory IO
# ---------------------------------------------------------------------------

_META_NAME = "meta.json"
_FORMAT_VERSION = 1


def save_dataset(directory, studies, config: GeneratorConfig, seed: int) -> dict:
    """Write one `<id>.hu` int16-LE file per study plus a global meta.json."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": _FORMAT_VERSION,
        "seed": int(seed),
        "generator": vars(config).copy(),
        "studies": {},
    }
    for study in studies:
        sid = study.study_id
        study.volume.slices.astype("<i2").tofile(directory / f"{sid}.hu")
        meta["studies"][sid] = {
            "shape": list(study.volume.slices.shape),
            "spacing_tag": study.volume.spacing_tag,
            "split": study.split,
            "labels": [int(v) for v in study.labels],
            "annotations": [
                {
                    "start_slice": a.start_slice,
                    "end_slice": a.end_slice,
                    "intensity": a.intensity,
                    "center": list(a.center),
                    "radius": a.radius,
                }
                for a in study.annotations
            ],
            "findings": list(study.report.findings),
            "report_tokens": list(study.report.tokens),
        }
    with open(directory / _META_NAME, "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return meta


def load_dataset(directory, split: str | None = None) -> list[PhantomStudy]:
    """Read studies back in ascending study-id order."""
    directory = Path(directory)
    with open(directory / _META_NAME) as fh:
        meta = json.load(fh)
    if meta.get("format_version") != _FORMAT_VERSION:
        raise ValidationError(f"unsupported dataset format {meta.get('format_version')}")
    studies = []
    for sid in sorted(meta["studies"]):
        rec = meta["studies"][sid]
        if split is not None and rec["split"] != split:
            continue
        shape = tuple(rec["shape"])
        raw = np.fromfile(directory / f"{sid}.hu", dtype="<i2")
        volume = HuVolume(slices=raw.reshape(shape).astype(np.int16),
                          spacing_tag=rec["spacing_tag"], study_id=sid)
        annotations = tuple(
            LesionAnnotation(start_slice=a["start_slice"], end_slice=a["end_slice"],
                             intensity=a["intensity"], center=tuple(a["center"]),
                             radius=a["radius"])
            for a in rec["annotations"]
        )
        report = TemplateReport(tokens=tuple(rec["report_tokens"]),
                                findings=tuple(rec["findings"]))
        studies.append(PhantomStudy(
            volume=volume, annotations=annotations,
            labels=np.asarray(rec["labels"], dtype=np.int8),
            report=report, split=rec["split"]))
    return studies


def load_hu_raw(bin_path, sidecar_path=None) -> HuVolume:
    """Read a raw little-endian int16 HU volume with a JSON shape sidecar.

    The sidecar must hold ``shape`` ([T, H, W]); ``study_id`` and
    ``spacing_tag`` are optional. This is the entry point for real HU data.
    """
    bin_path = Path(bin_path)
    sidecar = Path(sidecar_path) if sidecar_path else bin_path.with_suffix(".json")
    with open(sidecar) as fh:
        info = json.load(fh)
    shape = tuple(info["shape"])
    if len(shape) != 3:
        raise ValidationError(f"sidecar shape must be [T, H, W], got {shape}")
    raw = np.fromfile(bin_path, dtype="<i2")
    if raw.size != int(np.prod(shape)):
        raise ValidationError(
            f"file holds {raw.size} values, shape {shape} needs {int(np.prod(shape))}")
    return HuVolume(slices=raw.reshape(shape).astype(np.int16),
                    spacing_tag=info.get("spacing_tag", "unknown"),
                    study_id=info.get("study_id", bin_path.stem))
