"""Synthetic deformable-object corpus with hidden ground-truth landmarks.

Every image is rendered from an analytic template: a smooth noisy background,
a face-like ellipse, one small stroke motif per landmark and a few distractor
motifs.  Mirrored landmark pairs carry mirrored motifs, so horizontal flipping
maps the object onto itself up to the template's symmetry permutation.

Coordinates
-----------
* normalized: ``[0, 1]^2``, x to the right, y down.
* pixel: ``x_px = x_norm * W - 0.5`` so that pixel centres sit on integers.
  The same convention is used for the (coarser) output grid of the model.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

__all__ = [
    "ObjectTemplate",
    "GeometricTransform",
    "ImageSample",
    "EYE_INDICES",
    "N_LANDMARKS",
    "make_templates",
    "generate_corpus",
    "render_sample",
    "apply_transform",
    "transform_points",
    "compose",
    "to_pixels",
    "to_normalized",
    "flip_sample",
    "save_corpus",
    "load_corpus",
    "write_raster",
    "read_raster",
    "manifest_hash",
]

RASTER_MAGIC = b"LDR1"

# Face-like layout, 15 landmarks: 6 mirrored pairs and 3 on the midline.
_BASE_LAYOUT = np.array(
    [
        [0.30, 0.38], [0.70, 0.38],  # outer eye corners
        [0.42, 0.40], [0.58, 0.40],  # inner eye corners
        [0.33, 0.26], [0.67, 0.26],  # brows
        [0.50, 0.55],                # nose tip
        [0.42, 0.62], [0.58, 0.62],  # nostrils
        [0.37, 0.74], [0.63, 0.74],  # mouth corners
        [0.50, 0.70],                # upper lip
        [0.50, 0.86],                # chin
        [0.21, 0.60], [0.79, 0.60],  # jaw
    ]
)
_BASE_SYMMETRY = (1, 0, 3, 2, 5, 4, 6, 8, 7, 10, 9, 11, 12, 14, 13)
N_LANDMARKS = len(_BASE_LAYOUT)
EYE_INDICES = (0, 1)

# Motif strokes in local units (one unit = _MOTIF_SCALE normalized units).
# Entries are (segments, polarity); segments as (x0, y0, x1, y1).
_SHAPES = {
    "corner_dn": ([(0, 0, 1, 0), (0, 0, 0, 1)], 1.0),
    "diag": ([(-1, -1, 1, 1)], -1.0),
    "corner_up": ([(0, 0, 1, 0), (0, 0, 0, -1)], -1.0),
    "bar_dot": ([(-1, 0, 0.3, 0), (1, -1, 1, -1)], 1.0),
    "seven": ([(-1, -1, 1, -1), (1, -1, -0.5, 1)], 1.0),
    "shallow": ([(-1, -0.4, 1, 0.4)], 1.0),
    "blob": ([(0, 0, 0, 0)], 1.0),
    "hbar": ([(-1, 0, 1, 0)], -1.0),
    "tee": ([(-1, 0, 1, 0), (0, 0, 0, 1)], 1.0),
}
# Left member of each pair gets the shape, the right member its mirror.
_LANDMARK_SHAPES = [
    "corner_dn", "corner_dn", "diag", "diag", "shallow", "shallow",
    "blob", "bar_dot", "bar_dot", "seven", "seven", "hbar", "tee",
    "corner_up", "corner_up",
]
_MIRRORED = {1, 3, 5, 8, 10, 14}
_DISTRACTOR_SHAPES = [
    [(-1, 0, 1, 0), (0, -1, 0, 1)],  # plus
    [(-1, -1, 1, 1), (-1, 1, 1, -1)],  # cross
    [(-1, -1, 1, -1), (1, -1, 1, 1), (1, 1, -1, 1), (-1, 1, -1, -1)],  # square
]
_MOTIF_SCALE = 0.035
_STROKE_WIDTH = 0.013
_MOTIF_AMPLITUDE = 0.38


@dataclass(frozen=True)
class ObjectTemplate:
    template_id: int
    canonical_landmarks: np.ndarray  # (K, 2) normalized
    symmetry_map: tuple
    appearance_seed: int
    eye_indices: tuple = EYE_INDICES

    def __post_init__(self):
        sym = np.asarray(self.symmetry_map)
        if not np.array_equal(sym[sym], np.arange(len(sym))):
            raise ValueError("symmetry_map must be an involution")
        pts = np.asarray(self.canonical_landmarks, dtype=float)
        d = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
        d[np.diag_indices_from(d)] = np.inf
        if d.min() < 0.02:
            raise ValueError("canonical landmarks closer than 0.02")


@dataclass(frozen=True)
class GeometricTransform:
    """Invertible map of the normalized image domain onto itself.

    The affine part acts about the image centre: ``A (p - c) + c + t`` with
    ``A = R(rotation) @ [[1, shear], [0, 1]] @ diag(scale)``.  The
    ``piecewise`` kind first displaces points by a smooth sinusoidal field;
    ``flip`` mirrors x last.
    """

    kind: str = "affine"
    rotation: float = 0.0
    scale: tuple = (1.0, 1.0)
    translation: tuple = (0.0, 0.0)
    shear: float = 0.0
    flip: bool = False
    warp_amplitude: float = 0.0
    warp_frequency: float = 1.5
    warp_phase: tuple = (0.0, 0.0)

    def __post_init__(self):
        if self.kind not in ("affine", "piecewise"):
            raise ValueError(f"unknown transform kind {self.kind!r}")
        vals = [self.rotation, *self.scale, *self.translation, self.shear,
                self.warp_amplitude, self.warp_frequency, *self.warp_phase]
        if not np.all(np.isfinite(vals)):
            raise ValueError("transform parameters must be finite")
        if min(self.scale) <= 0:
            raise ValueError("scale must be positive (non-invertible otherwise)")
        # displacement field must be a contraction for the inverse to exist
        if self.kind == "piecewise" and abs(self.warp_amplitude) * 2 * np.pi * self.warp_frequency >= 0.5:
            raise ValueError("warp amplitude too large: piecewise warp not invertible")

    @property
    def linear(self) -> np.ndarray:
        c, s = np.cos(self.rotation), np.sin(self.rotation)
        rot = np.array([[c, -s], [s, c]])
        sh = np.array([[1.0, self.shear], [0.0, 1.0]])
        return rot @ sh @ np.diag(self.scale)

    def matrix(self) -> np.ndarray:
        """Homogeneous 3x3 matrix of the affine part (flip included)."""
        a = self.linear
        ctr = np.array([0.5, 0.5])
        m = np.eye(3)
        m[:2, :2] = a
        m[:2, 2] = ctr + np.asarray(self.translation) - a @ ctr
        if self.flip:
            m = np.array([[-1.0, 0, 1], [0, 1, 0], [0, 0, 1]]) @ m
        return m

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "GeometricTransform":
        m = np.asarray(m, dtype=float)
        lin, b = m[:2, :2], m[:2, 2]
        flip = np.linalg.det(lin) < 0
        if flip:
            lin = np.diag([-1.0, 1.0]) @ lin
            b = np.diag([-1.0, 1.0]) @ (b - np.array([1.0, 0.0]))
        q, r = np.linalg.qr(lin)
        signs = np.sign(np.diag(r))
        q, r = q * signs, (r.T * signs).T
        rotation = float(np.arctan2(q[1, 0], q[0, 0]))
        sx, sy = r[0, 0], r[1, 1]
        ctr = np.array([0.5, 0.5])
        t = b - ctr + lin @ ctr
        return cls(rotation=rotation, scale=(float(sx), float(sy)),
                   translation=(float(t[0]), float(t[1])), shear=float(r[0, 1] / sy),
                   flip=bool(flip))

    def is_identity(self) -> bool:
        return (self.rotation == 0 and tuple(self.scale) == (1.0, 1.0)
                and tuple(self.translation) == (0.0, 0.0) and self.shear == 0
                and not self.flip and (self.kind == "affine" or self.warp_amplitude == 0))

    def is_pure_flip(self) -> bool:
        return self.flip and replace(self, flip=False).is_identity()

    def _displace(self, pts):
        px, py = self.warp_phase
        f = 2 * np.pi * self.warp_frequency
        d = np.stack([np.sin(f * pts[..., 1] + px), np.sin(f * pts[..., 0] + py)], axis=-1)
        return self.warp_amplitude * d

    def forward(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        if self.kind == "piecewise":
            pts = pts + self._displace(pts)
        m = self.matrix()
        return pts @ m[:2, :2].T + m[:2, 2]

    def inverse(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        m = np.linalg.inv(self.matrix())
        q = pts @ m[:2, :2].T + m[:2, 2]
        if self.kind == "piecewise" and self.warp_amplitude != 0:
            p = q.copy()
            for _ in range(100):
                nxt = q - self._displace(p)
                if np.max(np.abs(nxt - p), initial=0.0) < 1e-15:
                    p = nxt
                    break
                p = nxt
            q = p
        return q

    def to_dict(self) -> dict:
        return {
            "kind": self.kind, "rotation": self.rotation, "scale": list(self.scale),
            "translation": list(self.translation), "shear": self.shear, "flip": self.flip,
            "warp_amplitude": self.warp_amplitude, "warp_frequency": self.warp_frequency,
            "warp_phase": list(self.warp_phase),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GeometricTransform":
        d = dict(d)
        for key in ("scale", "translation", "warp_phase"):
            if key in d:
                d[key] = tuple(float(v) for v in d[key])
        return cls(**d)


IDENTITY = GeometricTransform()


@dataclass
class ImageSample:
    sample_id: int
    raster: np.ndarray  # (H, W) float32 in [0, 1]
    gt_landmarks: np.ndarray  # (K, 2) pixel coordinates
    applied_transform: GeometricTransform
    template_id: int
    symmetry_map: tuple = tuple(_BASE_SYMMETRY)
    visible: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.visible is None:
            self.visible = np.ones(len(self.gt_landmarks), dtype=bool)

    @property
    def shape(self) -> tuple:
        return self.raster.shape


def compose(g2: GeometricTransform, g1: GeometricTransform) -> GeometricTransform:
    """Affine transform equal to applying ``g1`` then ``g2``."""
    if g1.kind != "affine" or g2.kind != "affine":
        raise ValueError("only affine transforms compose in closed form")
    return GeometricTransform.from_matrix(g2.matrix() @ g1.matrix())


def to_normalized(points, size) -> np.ndarray:
    h, w = size
    pts = np.asarray(points, dtype=float)
    return (pts + 0.5) / np.array([w, h])


def to_pixels(points, size) -> np.ndarray:
    h, w = size
    pts = np.asarray(points, dtype=float)
    return pts * np.array([w, h]) - 0.5


def transform_points(points, g: GeometricTransform, size=None) -> np.ndarray:
    """Map points through ``g``.

    Points are normalized coordinates unless ``size=(H, W)`` is given, in
    which case they are pixel coordinates of a grid of that size.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if size is None:
        return g.forward(pts)
    return to_pixels(g.forward(to_normalized(pts, size)), size)


def _snap(x: np.ndarray) -> np.ndarray:
    # dyadic grid keeps mirror arithmetic exact (double flip is bit-exact)
    return np.round(np.asarray(x, dtype=float) * 2.0 ** 20) / 2.0 ** 20


def _in_bounds(pts, size) -> np.ndarray:
    h, w = size
    return ((pts[:, 0] >= -0.5) & (pts[:, 0] <= w - 0.5)
            & (pts[:, 1] >= -0.5) & (pts[:, 1] <= h - 0.5))


def apply_transform(sample: ImageSample, g: GeometricTransform) -> ImageSample:
    """Warp a sample's raster and landmarks by ``g``.

    Under a flip, landmark identities follow the symmetry map so that index
    ``i`` of the result is the mirror image of landmark ``symmetry_map[i]``.
    """
    size = sample.raster.shape
    h, w = size
    sym = np.asarray(sample.symmetry_map)
    if g.is_identity():
        return replace(sample, raster=sample.raster.copy(), gt_landmarks=sample.gt_landmarks.copy(),
                       visible=sample.visible.copy(), applied_transform=g)
    if g.is_pure_flip():
        raster = np.ascontiguousarray(sample.raster[:, ::-1])
        pts = sample.gt_landmarks.copy()
        pts[:, 0] = (w - 1) - pts[:, 0]
        return replace(sample, raster=raster, gt_landmarks=pts[sym], visible=sample.visible[sym].copy(),
                       applied_transform=g)
    yy, xx = np.mgrid[0:h, 0:w]
    grid = np.stack([xx.ravel(), yy.ravel()], axis=1).astype(float)
    src = to_pixels(g.inverse(to_normalized(grid, size)), size)
    raster = ndimage.map_coordinates(sample.raster.astype(float), [src[:, 1], src[:, 0]],
                                     order=1, mode="nearest").reshape(h, w)
    pts = _snap(transform_points(sample.gt_landmarks, g, size))
    visible = sample.visible & _in_bounds(pts, size)
    if g.flip:
        pts, visible = pts[sym], visible[sym]
    return replace(sample, raster=np.clip(raster, 0, 1).astype(np.float32), gt_landmarks=pts,
                   visible=visible, applied_transform=g)


def flip_sample(sample: ImageSample) -> ImageSample:
    return apply_transform(sample, GeometricTransform(flip=True))


def _symmetric_offsets(rng, amount, sym) -> np.ndarray:
    offs = rng.uniform(-amount, amount, size=(len(sym), 2))
    for i, j in enumerate(sym):
        if i == j:
            offs[i, 0] = 0.0
        elif i > j:
            offs[i] = offs[j] * np.array([-1.0, 1.0])
    return offs


def make_templates(template_pool: int, seed: int) -> list[ObjectTemplate]:
    """Template 0 is the base layout; others are symmetric perturbations of it."""
    templates = []
    for tid in range(template_pool):
        rng = np.random.default_rng([seed, 7919, tid])
        pts = _BASE_LAYOUT.copy()
        if tid > 0:
            pts = pts + _symmetric_offsets(rng, 0.015, _BASE_SYMMETRY)
        templates.append(ObjectTemplate(tid, pts, tuple(_BASE_SYMMETRY), int(rng.integers(2**31))))
    return templates


def _segments_field(px, py, center, segments, polarity):
    """Max-of-strokes intensity for one motif evaluated at normalized coords."""
    out = np.zeros_like(px)
    for x0, y0, x1, y1 in segments:
        a = np.array([x0, y0]) * _MOTIF_SCALE + center
        b = np.array([x1, y1]) * _MOTIF_SCALE + center
        ab = b - a
        denom = float(ab @ ab)
        dx, dy = px - a[0], py - a[1]
        if denom == 0:
            t = 0.0
        else:
            t = np.clip((dx * ab[0] + dy * ab[1]) / denom, 0, 1)
        ex, ey = dx - t * ab[0], dy - t * ab[1]
        out = np.maximum(out, np.exp(-(ex * ex + ey * ey) / (2 * _STROKE_WIDTH**2)))
    return polarity * _MOTIF_AMPLITUDE * out


def _landmark_motif(i):
    segs, pol = _SHAPES[_LANDMARK_SHAPES[i]]
    if i in _MIRRORED:
        segs = [(-x0, y0, -x1, y1) for x0, y0, x1, y1 in segs]
    return segs, pol


def _canonical_field(px, py, template: ObjectTemplate, rng: np.random.Generator,
                     distractor_fraction: float):
    """Intensity of the canonical (undeformed) object at normalized coords."""
    noise = rng.normal(0.0, 0.07, size=(8, 8))
    bg = 0.45 + ndimage.map_coordinates(noise, [py * 7, px * 7], order=3, mode="nearest")
    tone = np.random.default_rng(template.appearance_seed).uniform(0.08, 0.16)
    r = np.sqrt(((px - 0.5) / 0.36) ** 2 + ((py - 0.56) / 0.40) ** 2)
    val = bg + tone / (1 + np.exp(-(1 - r) / 0.03))
    for i, ctr in enumerate(template.canonical_landmarks):
        segs, pol = _landmark_motif(i)
        val = val + _segments_field(px, py, ctr, segs, pol)
    n_distract = int(round(distractor_fraction * len(template.canonical_landmarks)))
    for _ in range(n_distract):
        ctr = rng.uniform(0.06, 0.94, size=2)
        shape = _DISTRACTOR_SHAPES[int(rng.integers(len(_DISTRACTOR_SHAPES)))]
        pol = 1.0 if rng.random() < 0.5 else -1.0
        val = val + 0.8 * _segments_field(px, py, ctr, shape, pol)
    return np.clip(val, 0.0, 1.0)


def render_sample(sample_id: int, template: ObjectTemplate, g: GeometricTransform,
                  image_size: int, rng: np.random.Generator,
                  distractor_fraction: float = 0.2) -> ImageSample:
    size = (image_size, image_size)
    yy, xx = np.mgrid[0:image_size, 0:image_size]
    grid = np.stack([xx.ravel(), yy.ravel()], axis=1).astype(float)
    src = g.inverse(to_normalized(grid, size))
    raster = _canonical_field(src[:, 0], src[:, 1], template, rng, distractor_fraction)
    pts = g.forward(np.asarray(template.canonical_landmarks, dtype=float))
    pts = _snap(to_pixels(pts, size))
    sym = np.asarray(template.symmetry_map)
    visible = _in_bounds(pts, size)
    if g.flip:
        # mirrored motif of landmark sym[i] now looks like landmark i
        pts, visible = pts[sym], visible[sym]
    return ImageSample(sample_id, raster.reshape(size).astype(np.float32), pts, g,
                       template.template_id, tuple(template.symmetry_map), visible)


def random_transform(rng: np.random.Generator, strength: float, *, max_rotation=np.pi / 6,
                     flip_prob=0.0, kind="affine") -> GeometricTransform:
    if strength == 0 and flip_prob == 0:
        return IDENTITY
    u = lambda: float(rng.uniform(-1, 1))  # noqa: E731
    sx = float(np.exp(0.12 * strength * u()))
    sy = sx * float(np.exp(0.05 * strength * u()))
    params = dict(
        rotation=strength * max_rotation * u(), scale=(sx, sy),
        translation=(0.07 * strength * u(), 0.07 * strength * u()),
        shear=0.08 * strength * u(), flip=bool(rng.random() < flip_prob),
    )
    if kind == "piecewise":
        params.update(kind="piecewise", warp_amplitude=0.012 * strength,
                      warp_phase=(float(rng.uniform(0, 2 * np.pi)), float(rng.uniform(0, 2 * np.pi))))
    return GeometricTransform(**params)


def generate_corpus(n_images: int, template_pool: int = 3, image_size: int = 64,
                    deform_strength: float = 0.5, seed: int = 0, *, max_rotation: float = np.pi / 6,
                    flip_prob: float = 0.0, kind: str = "affine",
                    distractor_fraction: float = 0.2, shape_jitter: float = 0.006) -> list[ImageSample]:
    """Render ``n_images`` samples; a pure function of its arguments.

    Each instance moves its template landmarks by a mirror-symmetric uniform
    offset of at most ``shape_jitter`` (normalized units), so that shapes
    are not an exact low-rank family of the templates.
    """
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    if image_size < 32:
        raise ValueError("image_size must be >= 32: landmark motifs are unresolvable below that")
    if not 0.0 <= deform_strength <= 1.0:
        raise ValueError("deform_strength must lie in [0, 1]")
    if template_pool < 1:
        raise ValueError("template_pool must be >= 1")
    if not 0.0 <= shape_jitter <= 0.01:
        raise ValueError("shape_jitter must lie in [0, 0.01]")
    templates = make_templates(template_pool, seed)
    samples = []
    for sid in range(n_images):
        rng = np.random.default_rng([seed, sid])
        tpl = templates[int(rng.integers(template_pool))]
        g = random_transform(rng, deform_strength, max_rotation=max_rotation,
                             flip_prob=flip_prob, kind=kind)
        if shape_jitter > 0:
            offs = _symmetric_offsets(rng, shape_jitter, tpl.symmetry_map)
            tpl = replace(tpl, canonical_landmarks=tpl.canonical_landmarks + offs)
        samples.append(render_sample(sid, tpl, g, image_size, rng, distractor_fraction))
    return samples


# --------------------------------------------------------------------------- I/O

def write_raster(path, raster: np.ndarray) -> None:
    arr = np.ascontiguousarray(raster, dtype="<f4")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(RASTER_MAGIC + struct.pack("<II", h, w) + arr.tobytes())


def read_raster(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != RASTER_MAGIC:
        raise ValueError(f"{path}: bad raster magic {data[:4]!r}")
    h, w = struct.unpack("<II", data[4:12])
    if len(data) != 12 + 4 * h * w:
        raise ValueError(f"{path}: truncated raster")
    return np.frombuffer(data, dtype="<f4", offset=12).reshape(h, w).astype(np.float32)


def _manifest(samples: list[ImageSample], extra: dict | None = None) -> dict:
    entries = []
    for s in samples:
        entries.append({
            "sample_id": int(s.sample_id),
            "template_id": int(s.template_id),
            "raster": f"rasters/{s.sample_id:06d}.ldr",
            "height": int(s.raster.shape[0]),
            "width": int(s.raster.shape[1]),
            "transform": s.applied_transform.to_dict(),
            "gt_landmarks": s.gt_landmarks.tolist(),
            "visible": s.visible.astype(bool).tolist(),
            "symmetry_map": list(map(int, s.symmetry_map)),
        })
    out = {"format": "ktl-corpus", "version": 1, "eye_indices": list(EYE_INDICES), "samples": entries}
    if extra:
        out["generator"] = extra
    return out


def manifest_hash(samples: list[ImageSample]) -> str:
    h = hashlib.sha256(json.dumps(_manifest(samples), sort_keys=True).encode())
    for s in samples:
        h.update(np.ascontiguousarray(s.raster, dtype="<f4").tobytes())
    return h.hexdigest()


def save_corpus(samples: list[ImageSample], directory, generator: dict | None = None) -> Path:
    directory = Path(directory)
    (directory / "rasters").mkdir(parents=True, exist_ok=True)
    for s in samples:
        write_raster(directory / "rasters" / f"{s.sample_id:06d}.ldr", s.raster)
    manifest = _manifest(samples, generator)
    (directory / "corpus.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return directory


def load_corpus(directory) -> list[ImageSample]:
    directory = Path(directory)
    manifest = json.loads((directory / "corpus.json").read_text())
    samples = []
    for e in manifest["samples"]:
        samples.append(ImageSample(
            sample_id=e["sample_id"],
            raster=read_raster(directory / e["raster"]),
            gt_landmarks=np.asarray(e["gt_landmarks"], dtype=float).reshape(-1, 2),
            applied_transform=GeometricTransform.from_dict(e["transform"]),
            template_id=e["template_id"],
            symmetry_map=tuple(e["symmetry_map"]),
            visible=np.asarray(e["visible"], dtype=bool),
        ))
    return samples
