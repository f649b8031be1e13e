"""Synthetic brain-like phantoms with controllable acquisition artifacts.

Each phantom is an ellipsoid of smoothed noise texture over a dark background,
degraded by Rician noise. Five artifact injectors (signal dropout, ghosting,
interslice instability, herringbone, chemical shift) produce labeled corrupted
volumes for training and evaluation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import volume_io
from .volume_io import ARTIFACT, NORMAL, Manifest, Scan4D, Volume3D, VolumeRecord

DROPOUT = "dropout"
GHOSTING = "ghosting"
INTERSLICE = "interslice_instability"
HERRINGBONE = "herringbone"
CHEMICAL_SHIFT = "chemical_shift"
KINDS = (DROPOUT, GHOSTING, INTERSLICE, HERRINGBONE, CHEMICAL_SHIFT)


class InvalidConfig(ValueError):
    pass


class RegionOutOfBounds(ValueError):
    pass


@dataclass(frozen=True)
class PhantomConfig:
    dims: tuple = (32, 32, 24)
    semi_axes: tuple = (12.0, 12.0, 9.0)
    texture_sigma: float = 1.5
    noise_level: float = 0.05
    seed: int = 0
    spacing: tuple = (2.0, 2.0, 2.0)

    def __post_init__(self):
        if len(self.dims) != 3 or any(int(d) < 4 for d in self.dims):
            raise InvalidConfig(f"dims must be three ints >= 4, got {self.dims}")
        for ax, d in zip(self.semi_axes, self.dims):
            if not 0 < ax <= (d - 1) / 2:
                raise InvalidConfig(
                    f"semi-axis {ax} does not fit inside dimension {d}"
                )
        if self.texture_sigma < 0:
            raise InvalidConfig("texture_sigma must be >= 0")
        if self.noise_level < 0:
            raise InvalidConfig("noise_level must be >= 0")


@dataclass(frozen=True)
class ArtifactSpec:
    """Parameters for one injector; only the fields of `kind` are read.

    Slice ranges and boxes are half-open. Axial slices index the z axis.
    """

    kind: str
    slice_start: int = 0          # dropout
    slice_stop: int = 0
    attenuation: float = 0.0
    axis: int = 1                 # ghosting / chemical shift
    shift_fraction: float = 0.25  # ghosting
    alpha: float = 0.0
    depth: float = 0.0            # interslice instability
    parity: int = 0
    freq: tuple = (0.0, 0.0, 0.0)  # herringbone, radians per voxel
    amplitude: float = 0.0
    box: tuple | None = None      # chemical shift: ((x0,x1),(y0,y1),(z0,z1))
    shift_voxels: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidConfig(f"unknown artifact kind {self.kind!r}")


def generate_phantom(config: PhantomConfig) -> Volume3D:
    """Deterministic ellipsoidal phantom: textured tissue in [0.3, 1.0], Rician noise."""
    nx, ny, nz = (int(d) for d in config.dims)
    rng = np.random.default_rng(config.seed)

    centers = [(n - 1) / 2.0 for n in (nx, ny, nz)]
    grids = np.ogrid[0:nx, 0:ny, 0:nz]
    dist = sum(
        ((g - c) / a) ** 2 for g, c, a in zip(grids, centers, config.semi_axes)
    )
    mask = dist <= 1.0

    texture = gaussian_filter(rng.standard_normal((nx, ny, nz)), config.texture_sigma)
    inside = texture[mask]
    lo, hi = float(inside.min()), float(inside.max())
    voxels = np.zeros((nx, ny, nz), dtype=np.float64)
    if hi > lo:
        voxels[mask] = 0.3 + 0.7 * (inside - lo) / (hi - lo)
    else:
        voxels[mask] = 0.65

    if config.noise_level > 0:
        sigma = config.noise_level  # fraction of unit tissue intensity
        re = voxels + sigma * rng.standard_normal(voxels.shape)
        im = sigma * rng.standard_normal(voxels.shape)
        voxels = np.sqrt(re * re + im * im)

    return Volume3D(voxels.astype(np.float32), spacing=config.spacing)


def _shifted_zero_fill(voxels: np.ndarray, axis: int, shift: int) -> np.ndarray:
    out = np.zeros_like(voxels)
    if shift == 0:
        return voxels.copy()
    src = [slice(None)] * 3
    dst = [slice(None)] * 3
    if shift > 0:
        src[axis] = slice(0, voxels.shape[axis] - shift)
        dst[axis] = slice(shift, None)
    else:
        src[axis] = slice(-shift, None)
        dst[axis] = slice(0, voxels.shape[axis] + shift)
    out[tuple(dst)] = voxels[tuple(src)]
    return out


def inject_artifact(v: Volume3D, spec: ArtifactSpec) -> Volume3D:
    """Return a corrupted copy of `v`; the input volume is left untouched."""
    vox = v.voxels.astype(np.float32).copy()
    nx, ny, nz = vox.shape

    if spec.kind == DROPOUT:
        if not 0.0 <= spec.attenuation <= 1.0:
            raise InvalidConfig(f"attenuation must lie in [0, 1], got {spec.attenuation}")
        if not 0 <= spec.slice_start < spec.slice_stop <= nz:
            raise RegionOutOfBounds(
                f"slice range [{spec.slice_start}, {spec.slice_stop}) outside 0..{nz}"
            )
        vox[:, :, spec.slice_start : spec.slice_stop] *= spec.attenuation

    elif spec.kind == GHOSTING:
        if spec.axis not in (0, 1, 2):
            raise InvalidConfig(f"axis must be 0, 1 or 2, got {spec.axis}")
        if not 0.0 <= spec.shift_fraction <= 1.0 or spec.alpha < 0:
            raise InvalidConfig("need shift_fraction in [0, 1] and alpha >= 0")
        shift = int(round(spec.shift_fraction * vox.shape[spec.axis]))
        vox = vox + spec.alpha * _shifted_zero_fill(vox, spec.axis, shift)

    elif spec.kind == INTERSLICE:
        if not 0.0 <= spec.depth < 1.0 or spec.parity not in (0, 1):
            raise InvalidConfig("need depth in [0, 1) and parity in {0, 1}")
        sel = np.arange(nz) % 2 == spec.parity
        vox[:, :, sel] *= 1.0 + spec.depth
        vox[:, :, ~sel] *= 1.0 - spec.depth

    elif spec.kind == HERRINGBONE:
        if spec.amplitude < 0:
            raise InvalidConfig("amplitude must be >= 0")
        f, g, h = spec.freq
        gx, gy, gz = np.ogrid[0:nx, 0:ny, 0:nz]
        vox = vox + spec.amplitude * np.sin(f * gx + g * gy + h * gz).astype(np.float32)

    elif spec.kind == CHEMICAL_SHIFT:
        if spec.box is None or spec.axis not in (0, 1, 2):
            raise InvalidConfig("chemical shift needs a box and an axis in {0, 1, 2}")
        box = tuple((int(a), int(b)) for a, b in spec.box)
        for (a, b), n in zip(box, vox.shape):
            if not 0 <= a < b <= n:
                raise RegionOutOfBounds(f"box {box} outside volume {vox.shape}")
        a, b = box[spec.axis]
        if not (0 <= a + spec.shift_voxels and b + spec.shift_voxels <= vox.shape[spec.axis]):
            raise RegionOutOfBounds(
                f"shift {spec.shift_voxels} pushes box {box} outside volume {vox.shape}"
            )
        src = tuple(slice(lo, hi) for lo, hi in box)
        dst = list(src)
        dst[spec.axis] = slice(a + spec.shift_voxels, b + spec.shift_voxels)
        moved = vox[src].copy()
        vox[src] = 0.0
        vox[tuple(dst)] = moved

    vox = np.maximum(vox, 0.0, dtype=np.float32)
    return Volume3D(vox, spacing=v.spacing)


@dataclass(frozen=True)
class SeverityProfile:
    """Per-kind parameter ranges sampled by the dataset generator.

    Ranges are (low, high); slice counts and shift voxels are inclusive
    integer ranges, the rest uniform floats.
    """

    name: str = "strong"
    dropout_attenuation: tuple = (0.0, 0.3)
    dropout_slices: tuple = (3, 8)
    ghost_alpha: tuple = (0.25, 0.5)
    ghost_shift: tuple = (0.2, 0.45)
    interslice_depth: tuple = (0.15, 0.4)
    herringbone_amplitude: tuple = (0.15, 0.35)
    herringbone_freq: tuple = (0.8, 2.5)
    chemical_shift_voxels: tuple = (2, 4)


STRONG = SeverityProfile()
SUBTLE = SeverityProfile(
    name="subtle",
    dropout_attenuation=(0.5, 0.75),
    dropout_slices=(2, 4),
    ghost_alpha=(0.1, 0.2),
    ghost_shift=(0.1, 0.3),
    interslice_depth=(0.05, 0.12),
    herringbone_amplitude=(0.05, 0.12),
    chemical_shift_voxels=(1, 2),
)


def _draw_artifact(kind: str, dims, severity: SeverityProfile, rng) -> ArtifactSpec:
    nx, ny, nz = dims
    if kind == DROPOUT:
        lo, hi = severity.dropout_slices
        count = min(int(rng.integers(lo, hi + 1)), nz)
        start = int(rng.integers(0, nz - count + 1))
        return ArtifactSpec(
            kind=DROPOUT,
            slice_start=start,
            slice_stop=start + count,
            attenuation=float(rng.uniform(*severity.dropout_attenuation)),
        )
    if kind == GHOSTING:
        return ArtifactSpec(
            kind=GHOSTING,
            axis=1,  # phase-encode
            shift_fraction=float(rng.uniform(*severity.ghost_shift)),
            alpha=float(rng.uniform(*severity.ghost_alpha)),
        )
    if kind == INTERSLICE:
        return ArtifactSpec(
            kind=INTERSLICE,
            depth=float(rng.uniform(*severity.interslice_depth)),
            parity=int(rng.integers(2)),
        )
    if kind == HERRINGBONE:
        mags = rng.uniform(*severity.herringbone_freq, size=3)
        signs = np.where(rng.random(3) < 0.5, -1.0, 1.0)
        return ArtifactSpec(
            kind=HERRINGBONE,
            freq=tuple(float(x) for x in mags * signs),
            amplitude=float(rng.uniform(*severity.herringbone_amplitude)),
        )
    if kind == CHEMICAL_SHIFT:
        box = tuple((n // 4, n - n // 4) for n in (nx, ny, nz))
        lo, hi = severity.chemical_shift_voxels
        shift = int(rng.integers(lo, hi + 1))
        if rng.random() < 0.5:
            shift = -shift
        return ArtifactSpec(
            kind=CHEMICAL_SHIFT,
            box=box,
            shift_voxels=shift,
            axis=int(rng.integers(2)),
        )
    raise InvalidConfig(f"unknown artifact kind {kind!r}")


def generate_dataset(
    n_subjects: int,
    volumes_per_subject: int,
    artifact_rate: float,
    kind_mix,
    seed: int,
    out_dir,
    *,
    dims=(32, 32, 24),
    spacing=(2.0, 2.0, 2.0),
    texture_sigma: float = 1.5,
    noise_level: float = 0.05,
    intensity_scale: float = 1.0,
    severity: SeverityProfile = STRONG,
    normal_subject_fraction: float = 0.3,
) -> Manifest:
    """Write a labeled synthetic corpus (NIfTI scans + JSONL manifest) to out_dir.

    kind_mix maps artifact kind to a sampling weight; None means uniform over
    all five kinds. texture_sigma, noise_level and intensity_scale act as
    distribution-shift knobs for fine-tuning experiments.

    Artifacts are drawn hierarchically: normal_subject_fraction of subjects
    are artifact-free and the per-volume rate for the rest is raised so the
    overall expected artifact rate still equals artifact_rate. This keeps both
    subject classes populated, which subject-stratified splitting requires.
    Volume RNG streams derive from (seed, 0, global volume index) and subject
    streams from (seed, 1, subject index), so generation order does not affect
    the output.
    """
    if not 0.0 <= artifact_rate <= 1.0:
        raise InvalidConfig(f"artifact_rate must lie in [0, 1], got {artifact_rate}")
    if not 0.0 <= normal_subject_fraction < 1.0:
        raise InvalidConfig(
            f"normal_subject_fraction must lie in [0, 1), got {normal_subject_fraction}"
        )
    if n_subjects < 1 or volumes_per_subject < 1:
        raise InvalidConfig("need at least one subject and one volume per subject")
    if kind_mix is None:
        kind_mix = {k: 1.0 for k in KINDS}
    unknown = set(kind_mix) - set(KINDS)
    if unknown:
        raise InvalidConfig(f"unknown artifact kinds in mix: {sorted(unknown)}")
    kinds = [k for k in KINDS if kind_mix.get(k, 0.0) > 0]
    weights = np.array([kind_mix[k] for k in kinds], dtype=np.float64)
    if not kinds or weights.sum() <= 0:
        if artifact_rate > 0:
            raise InvalidConfig("artifact_rate > 0 but kind mix has no positive weight")
    else:
        weights = weights / weights.sum()

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    semi_axes = tuple(0.75 * (d - 1) / 2 for d in dims)

    clean_frac = min(normal_subject_fraction, 1.0 - artifact_rate)
    volume_rate = artifact_rate / (1.0 - clean_frac) if clean_frac < 1.0 else 0.0
    volume_rate = min(volume_rate, 1.0)

    records = []
    for si in range(n_subjects):
        subject = f"sub-{si:03d}"
        scan_name = f"{subject}.nii"
        srng = np.random.default_rng((seed, 1, si))
        subject_clean = srng.random() < clean_frac
        volumes = []
        for vi in range(volumes_per_subject):
            gidx = si * volumes_per_subject + vi
            vrng = np.random.default_rng((seed, 0, gidx))
            phantom_seed = int(vrng.integers(2**63))
            vol = generate_phantom(
                PhantomConfig(
                    dims=tuple(dims),
                    semi_axes=semi_axes,
                    texture_sigma=texture_sigma,
                    noise_level=noise_level,
                    seed=phantom_seed,
                    spacing=tuple(spacing),
                )
            )
            label = NORMAL
            if not subject_clean and vrng.random() < volume_rate:
                kind = kinds[int(vrng.choice(len(kinds), p=weights))]
                vol = inject_artifact(vol, _draw_artifact(kind, dims, severity, vrng))
                label = ARTIFACT
            if intensity_scale != 1.0:
                vol = Volume3D(
                    (vol.voxels * np.float32(intensity_scale)).astype(np.float32),
                    spacing=vol.spacing,
                )
            volumes.append(vol)
            records.append(
                VolumeRecord(
                    id=f"{subject}_v{vi:03d}",
                    subject_id=subject,
                    scan_path=scan_name,
                    volume_index=vi,
                    label=label,
                )
            )
        b_values = [0.0] + [1000.0] * (volumes_per_subject - 1)
        scan = Scan4D(volumes=volumes, subject_id=subject, b_values=b_values)
        volume_io.write_nifti(scan, out_dir / scan_name)

    manifest = Manifest(
        records,
        source_description=(
            f"synthetic phantom corpus: {n_subjects} subjects x "
            f"{volumes_per_subject} volumes, artifact rate {artifact_rate:g}, seed {seed}"
        ),
        base_dir=out_dir,
    )
    volume_io.save_manifest(manifest, out_dir / "manifest.jsonl")

    config = {
        "n_subjects": n_subjects,
        "volumes_per_subject": volumes_per_subject,
        "artifact_rate": artifact_rate,
        "kind_mix": {k: kind_mix.get(k, 0.0) for k in KINDS},
        "seed": seed,
        "dims": list(dims),
        "spacing": list(spacing),
        "texture_sigma": texture_sigma,
        "noise_level": noise_level,
        "intensity_scale": intensity_scale,
        "normal_subject_fraction": normal_subject_fraction,
        "severity": {
            "name": severity.name,
            "dropout_attenuation": list(severity.dropout_attenuation),
            "dropout_slices": list(severity.dropout_slices),
            "ghost_alpha": list(severity.ghost_alpha),
            "ghost_shift": list(severity.ghost_shift),
            "interslice_depth": list(severity.interslice_depth),
            "herringbone_amplitude": list(severity.herringbone_amplitude),
            "herringbone_freq": list(severity.herringbone_freq),
            "chemical_shift_voxels": list(severity.chemical_shift_voxels),
        },
    }
    (out_dir / "generator.json").write_text(json.dumps(config, indent=2) + "\n")
    return manifest
