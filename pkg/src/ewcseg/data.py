"""Synthetic two-domain volumetric dataset: generation, normalization, patch
sampling, splits, and the EWCV volume container.

The source domain emulates a BraTS-like cohort (larger, contrast-enhancing,
high-contrast tumors); the target domain emulates non-enhancing low-grade
glioma (three times smaller mean tumor volume, fainter contrast, slight
blur). Channels stand for pre-contrast T1, post-contrast T1, T2, FLAIR.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import distance_transform_edt, gaussian_filter

from .binio import FormatError, check_header, read_array, read_str, write_array, write_header, write_str
from .tensor import Tensor

MAGIC = b"EWCV"
VERSION = 1

# additive offset on the post-contrast T1 channel (index 1) of enhancing tumors
ENHANCEMENT_OFFSET = 0.6
ENHANCEMENT_CHANNEL = 1

# intensity fades over ~this many voxels at the tumor boundary (partial
# volume), and per-subject appearance varies by +-CONTRAST_JITTER; both keep
# the segmentation task from saturating, so late-training gradients (and the
# Fisher diagonal) stay meaningful
TUMOR_EDGE_SIGMA = 1.4
CONTRAST_JITTER = 0.35

TEST_FRACTION = 0.2


class DataError(Exception):
    pass


@dataclass(frozen=True)
class DomainSpec:
    name: str
    n_subjects: int
    volume_extent: int = 64
    mean_tumor_volume: float = 1800.0
    tumor_volume_spread: float = 1.5
    channel_contrasts: tuple[float, float, float, float] = (0.30, 0.10, 0.50, 0.60)
    enhancement: bool = True
    noise_sigma: float = 0.08
    quality_degradation: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_subjects < 1:
            raise DataError(f"n_subjects must be >= 1, got {self.n_subjects}")
        if self.mean_tumor_volume < 1:
            raise DataError(f"mean_tumor_volume must be >= 1, got {self.mean_tumor_volume}")
        if self.noise_sigma < 0:
            raise DataError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if len(self.channel_contrasts) != 4:
            raise DataError("channel_contrasts must have exactly 4 entries")
        if self.volume_extent < 24:
            raise DataError(f"volume_extent must be >= 24, got {self.volume_extent}")


def desk_specs(n_source: int = 40, n_target: int = 16, seed: int = 2024) -> dict[str, DomainSpec]:
    """Desk-scale defaults: 40/16 subjects, 64^3 volumes."""
    return {
        "source": DomainSpec(
            name="source", n_subjects=n_source, mean_tumor_volume=1800.0,
            channel_contrasts=(0.30, 0.10, 0.50, 0.60), enhancement=True,
            quality_degradation=0.0, seed=_stable_seed(seed, "source"),
        ),
        "target": DomainSpec(
            name="target", n_subjects=n_target, mean_tumor_volume=600.0,
            channel_contrasts=(0.15, 0.05, 0.25, 0.30), enhancement=False,
            quality_degradation=0.7, seed=_stable_seed(seed, "target"),
        ),
    }


def paper_scale_specs(seed: int = 2024) -> dict[str, DomainSpec]:
    """285/98 subject counts as in the full-scale setup; not CI-runnable."""
    specs = desk_specs(n_source=285, n_target=98, seed=seed)
    return specs


def _stable_seed(seed: int, tag: str) -> int:
    digest = hashlib.sha256(f"{seed}:{tag}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass
class VolumeSample:
    """One subject: 4-channel image, binary tumor mask, binary brain mask."""

    subject_id: str
    domain: str
    image: Tensor
    mask: Tensor
    brain_mask: Tensor
    _tumor_coords: np.ndarray | None = field(default=None, init=False, repr=False, compare=False)
    _brain_coords: np.ndarray | None = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.image.data.ndim != 4 or self.image.shape[0] != 4:
            raise DataError(f"image must be [4,D,H,W], got {self.image.shape}")
        if self.mask.shape != (1,) + self.image.shape[1:] or self.brain_mask.shape != self.mask.shape:
            raise DataError("mask and brain_mask must be [1,D,H,W] matching the image")
        if np.any(self.mask.data > self.brain_mask.data):
            raise DataError(f"subject {self.subject_id}: tumor mask outside brain mask")
        if self.mask.data.sum() < 1:
            raise DataError(f"subject {self.subject_id}: empty tumor mask")

    def tumor_coords(self) -> np.ndarray:
        if self._tumor_coords is None:
            self._tumor_coords = np.argwhere(self.mask.data[0] > 0.5)
        return self._tumor_coords

    def brain_coords(self) -> np.ndarray:
        if self._brain_coords is None:
            self._brain_coords = np.argwhere(self.brain_mask.data[0] > 0.5)
        return self._brain_coords


# ---------------------------------------------------------------------------
# generation


def _blob_union(centers, radii, scale, within: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rasterize a union of spheres, clipped to `within`, inside its bounding
    box; returns (box mask, box origin)."""
    centers = np.asarray(centers, dtype=np.float64)
    radii = np.asarray(radii, dtype=np.float64) * scale
    lo = np.maximum(np.floor(centers - radii[:, None]).min(axis=0).astype(int) - 1, 0)
    hi = np.minimum(np.ceil(centers + radii[:, None]).max(axis=0).astype(int) + 2, within.shape)
    zz, yy, xx = np.ogrid[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    m = np.zeros(tuple(hi - lo), dtype=bool)
    for c, r in zip(centers, radii):
        m |= (zz - c[0]) ** 2 + (yy - c[1]) ** 2 + (xx - c[2]) ** 2 <= r * r
    m &= within[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    return m, lo


def _calibrated_blob(centers, radii, target_volume, within: np.ndarray):
    """Bisect a global radius scale so the in-brain union hits the drawn
    volume within ~5% (voxel quantization permitting)."""
    lo_s, hi_s = 0.35, 2.6
    best = None
    for _ in range(30):
        s = 0.5 * (lo_s + hi_s)
        m, org = _blob_union(centers, radii, s, within)
        count = int(m.sum())
        if best is None or abs(count - target_volume) < abs(best[0] - target_volume):
            best = (count, m, org)
        if abs(count - target_volume) <= 0.05 * target_volume:
            break
        if count < target_volume:
            lo_s = s
        else:
            hi_s = s
    return best[1], best[2]


def _generate_subject(spec: DomainSpec, index: int) -> VolumeSample:
    rng = np.random.default_rng([spec.seed, index])
    e = spec.volume_extent
    shape = (e, e, e)

    center = e / 2.0 + rng.uniform(-2.0, 2.0, size=3)
    radii = 0.40 * e * (1.0 + rng.uniform(-0.08, 0.08, size=3))
    zz, yy, xx = np.ogrid[0:e, 0:e, 0:e]
    brain = (
        ((zz - center[0]) / radii[0]) ** 2
        + ((yy - center[1]) / radii[1]) ** 2
        + ((xx - center[2]) / radii[2]) ** 2
    ) <= 1.0

    texture = gaussian_filter(rng.standard_normal(shape), sigma=3.0)
    texture *= 0.15 / max(texture.std(), 1e-12)
    tissue = 1.0 + texture

    boundary_dist = distance_transform_edt(brain)
    # lognormal with mean == mean_tumor_volume (hence the -sigma^2/2 shift)
    sigma_log = np.log(spec.tumor_volume_spread)
    target_total = spec.mean_tumor_volume * np.exp(rng.normal(-0.5 * sigma_log**2, sigma_log))
    tumor = None
    for attempt in range(100):
        tumor = np.zeros(shape, dtype=bool)
        n_blobs = int(rng.integers(1, 4))
        budgets = rng.dirichlet(np.full(n_blobs, 2.0)) * target_total
        placed = True
        for budget in budgets:
            budget = max(budget, 7.0)
            r0 = (3.0 * budget / (4.0 * np.pi)) ** (1.0 / 3.0)
            eligible = np.argwhere(boundary_dist > r0 * 1.3 + 1.0)
            if len(eligible) == 0:
                placed = False
                break
            c0 = eligible[int(rng.integers(len(eligible)))].astype(np.float64)
            n_spheres = int(rng.integers(2, 5))
            centers = [c0]
            sphere_radii = [r0 * 0.8]
            for _ in range(n_spheres - 1):
                centers.append(c0 + rng.normal(0.0, r0 * 0.45, size=3))
                sphere_radii.append(r0 * rng.uniform(0.5, 0.8))
            m, org = _calibrated_blob(centers, sphere_radii, budget, brain)
            tumor[org[0]:org[0] + m.shape[0], org[1]:org[1] + m.shape[1], org[2]:org[2] + m.shape[2]] |= m
        if placed and tumor.sum() >= 1:
            break
        target_total *= 0.7
    else:
        raise DataError(f"subject {index} of domain {spec.name}: tumor does not fit after 100 attempts")

    tumor_soft = gaussian_filter(tumor.astype(np.float64), sigma=TUMOR_EDGE_SIGMA)
    subject_gain = rng.uniform(1.0 - CONTRAST_JITTER, 1.0 + CONTRAST_JITTER)
    image = np.empty((4, e, e, e), dtype=np.float64)
    for c in range(4):
        contrast = spec.channel_contrasts[c]
        if spec.enhancement and c == ENHANCEMENT_CHANNEL:
            contrast += ENHANCEMENT_OFFSET
        chan = tissue + subject_gain * contrast * tumor_soft + rng.normal(0.0, spec.noise_sigma, size=shape)
        if spec.quality_degradation > 0:
            chan = gaussian_filter(chan, sigma=spec.quality_degradation)
        image[c] = chan * brain

    return VolumeSample(
        subject_id=f"{spec.name}_{index:03d}",
        domain=spec.name,
        image=Tensor(image.astype(np.float32)),
        mask=Tensor(tumor[None].astype(np.float32)),
        brain_mask=Tensor(brain[None].astype(np.float32)),
    )


def generate_domain(spec: DomainSpec) -> list[VolumeSample]:
    """Deterministic cohort for one domain spec."""
    return [_generate_subject(spec, i) for i in range(spec.n_subjects)]


def normalize_volume(sample: VolumeSample) -> VolumeSample:
    """Per-channel zero mean / unit std over brain voxels; outside brain -> 0."""
    brain = sample.brain_mask.data[0] > 0.5
    if not brain.any():
        raise DataError(f"subject {sample.subject_id}: empty brain mask")
    image = sample.image.data.astype(np.float64)
    out = np.zeros_like(image)
    for c in range(image.shape[0]):
        vox = image[c][brain]
        mu = vox.mean()
        sigma = vox.std()
        if sigma < 1e-8:
            raise DataError(f"subject {sample.subject_id}: zero variance in channel {c}")
        out[c][brain] = (vox - mu) / sigma
    return VolumeSample(
        subject_id=sample.subject_id,
        domain=sample.domain,
        image=Tensor(out.astype(np.float32)),
        mask=sample.mask,
        brain_mask=sample.brain_mask,
    )


# ---------------------------------------------------------------------------
# patch sampling


@dataclass(frozen=True)
class PatchSpec:
    """Geometry of one training draw: input window extent, output (label)
    window extent, and the probability of centering on a tumor voxel."""

    in_extent: int
    out_extent: int
    fg_bias: float = 0.5

    def __post_init__(self):
        if self.out_extent < 1 or self.in_extent <= self.out_extent:
            raise DataError(f"need in_extent > out_extent >= 1, got {self.in_extent}/{self.out_extent}")
        if (self.in_extent - self.out_extent) % 2 != 0:
            raise DataError(
                f"in_extent - out_extent must equal the (even) context margin, "
                f"got {self.in_extent} - {self.out_extent}"
            )
        if not 0.0 <= self.fg_bias <= 1.0:
            raise DataError(f"fg_bias must be in [0,1], got {self.fg_bias}")

    @property
    def margin(self) -> int:
        return self.in_extent - self.out_extent


def _reflect_indices(start: int, length: int, extent: int) -> np.ndarray:
    idx = np.arange(start, start + length)
    if idx[0] < -(extent - 1) or idx[-1] > 2 * (extent - 1):
        raise DataError(
            f"window [{start}, {start + length}) needs more than one mirror reflection "
            f"of extent {extent}"
        )
    idx = np.abs(idx)
    over = idx > extent - 1
    idx[over] = 2 * (extent - 1) - idx[over]
    return idx


def draw_patch_center(sample: VolumeSample, spec: PatchSpec, rng: np.random.Generator) -> tuple[int, int, int]:
    """Tumor voxel with probability fg_bias, otherwise a brain voxel."""
    coords = sample.tumor_coords() if rng.random() < spec.fg_bias else sample.brain_coords()
    c = coords[int(rng.integers(len(coords)))]
    return int(c[0]), int(c[1]), int(c[2])


def extract_patch(sample: VolumeSample, spec: PatchSpec, center: tuple[int, int, int]) -> tuple[Tensor, Tensor]:
    extents = sample.image.shape[1:]
    if spec.in_extent > min(extents) + spec.margin:
        raise DataError(
            f"in_extent {spec.in_extent} exceeds volume extent {min(extents)} + margin {spec.margin}"
        )
    half = spec.margin // 2
    out_idx, in_idx = [], []
    for axis in range(3):
        ostart = center[axis] - spec.out_extent // 2
        out_idx.append(_reflect_indices(ostart, spec.out_extent, extents[axis]))
        in_idx.append(_reflect_indices(ostart - half, spec.in_extent, extents[axis]))
    image = sample.image.data[:, in_idx[0][:, None, None], in_idx[1][None, :, None], in_idx[2][None, None, :]]
    target = sample.mask.data[:, out_idx[0][:, None, None], out_idx[1][None, :, None], out_idx[2][None, None, :]]
    return Tensor(np.ascontiguousarray(image)), Tensor(np.ascontiguousarray(target))


def sample_patch(sample: VolumeSample, spec: PatchSpec, rng: np.random.Generator) -> tuple[Tensor, Tensor]:
    """One (input, label) pair; windows beyond the volume are mirror-padded."""
    return extract_patch(sample, spec, draw_patch_center(sample, spec, rng))


# ---------------------------------------------------------------------------
# splits


@dataclass(frozen=True)
class SplitAssignment:
    split_id: int
    seed: int
    train: dict[str, list[str]]
    test: dict[str, list[str]]


def make_splits(ids_by_domain: dict[str, list[str]], split_id: int, seed: int) -> SplitAssignment:
    """Per-domain shuffle; first 20% (rounded to nearest, at least 1) is test."""
    train: dict[str, list[str]] = {}
    test: dict[str, list[str]] = {}
    for domain, ids in ids_by_domain.items():
        if len(ids) < 5:
            raise DataError(f"domain {domain!r} needs at least 5 subjects, got {len(ids)}")
        rng = np.random.default_rng([seed, split_id, _stable_seed(0, domain)])
        perm = list(rng.permutation(len(ids)))
        n_test = max(1, int(np.floor(len(ids) * TEST_FRACTION + 0.5)))
        test[domain] = sorted(ids[i] for i in perm[:n_test])
        train[domain] = sorted(ids[i] for i in perm[n_test:])
    return SplitAssignment(split_id=split_id, seed=seed, train=train, test=test)


# ---------------------------------------------------------------------------
# persistence


def save_volume(path, sample: VolumeSample) -> None:
    for name, t in (("mask", sample.mask), ("brain_mask", sample.brain_mask)):
        if not np.all((t.data == 0) | (t.data == 1)):
            raise DataError(f"{name} must be binary to persist")
    with open(path, "wb") as f:
        write_header(f, MAGIC, VERSION)
        write_str(f, sample.subject_id)
        write_str(f, sample.domain)
        write_array(f, sample.image.data)
        write_array(f, sample.mask.data.astype(np.uint8))
        write_array(f, sample.brain_mask.data.astype(np.uint8))


def load_volume(path) -> VolumeSample:
    with open(path, "rb") as f:
        check_header(f, MAGIC, VERSION, "volume")
        subject_id = read_str(f, "subject id")
        domain = read_str(f, "domain tag")
        image = read_array(f, "image")
        mask = read_array(f, "mask").astype(np.float32)
        brain = read_array(f, "brain mask").astype(np.float32)
    return VolumeSample(subject_id=subject_id, domain=domain,
                        image=Tensor(image), mask=Tensor(mask), brain_mask=Tensor(brain))


def spec_hash(spec: DomainSpec) -> str:
    return hashlib.sha256(json.dumps(dataclasses.asdict(spec), sort_keys=True).encode()).hexdigest()[:16]


def write_dataset(out_dir, specs: dict[str, DomainSpec], seed: int,
                  normalize: bool = True) -> dict:
    """Generate, optionally normalize, and persist both domains plus a JSON
    manifest. Returns the manifest dict."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {"format": 1, "generator_seed": seed, "normalized": normalize, "domains": {}}
    for domain, spec in specs.items():
        subjects = []
        for sample in generate_domain(spec):
            if normalize:
                sample = normalize_volume(sample)
            fname = f"{sample.subject_id}.ewcv"
            save_volume(out_dir / fname, sample)
            subjects.append({"id": sample.subject_id, "file": fname})
        manifest["domains"][domain] = {
            "spec": dataclasses.asdict(spec),
            "spec_hash": spec_hash(spec),
            "subjects": subjects,
        }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_dataset(data_dir) -> dict[str, list[VolumeSample]]:
    data_dir = Path(data_dir)
    manifest_path = data_dir / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"no dataset manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    return {
        domain: [load_volume(data_dir / s["file"]) for s in entry["subjects"]]
        for domain, entry in manifest["domains"].items()
    }


def dataset_manifest_hash(data_dir) -> str:
    raw = (Path(data_dir) / "manifest.json").read_bytes()
    return hashlib.sha256(raw).hexdigest()[:16]
