"""Synthetic shapes dataset: scenes, token sequences, rasters, and masks.

A scene is up to three flat-colored shapes (circle, square, triangle in red,
green, or blue) on a plain or grid background, rendered at 32x32.  Its
conditioning sequence is [background, color_1, shape_1, color_2, ...] padded
to a fixed length; each shape token is the layout target for its box.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

IMAGE_SIZE = 32
TOKENS_PER_SCENE = 8  # background + up to 3 (color, shape) pairs, padded
MAX_OBJECTS = 3

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue")
BACKGROUNDS = ("plain", "grid")

# Rendering palette.  Object colors are saturated and near the RGB axes so a
# color-distance detector separates them from the grey backgrounds.
COLOR_VALUES = {
    "red": np.array([0.90, 0.10, 0.10]),
    "green": np.array([0.10, 0.80, 0.10]),
    "blue": np.array([0.10, 0.10, 0.90]),
}
BACKGROUND_GREY = 0.85
GRID_LINE_GREY = 0.60
GRID_PITCH = 8

# Seeds below HOLDOUT_BASE feed training; held-out layouts live above it.
HOLDOUT_BASE = 2**31


class Vocabulary:
    """Fixed token table with reserved padding and null ids."""

    def __init__(self):
        self.tokens = ["<pad>", "<null>", *BACKGROUNDS, *COLORS, *SHAPES]
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        self.pad_id = self.index["<pad>"]
        self.null_id = self.index["<null>"]

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, token: str) -> int:
        return self.index[token]

    def decode(self, idx: int) -> str:
        return self.tokens[idx]


VOCAB = Vocabulary()


@dataclass(frozen=True)
class SceneObject:
    color: str
    shape: str
    box: tuple[float, float, float, float]  # (x_min, y_min, x_max, y_max), px


@dataclass(frozen=True)
class SceneSpec:
    background: str
    objects: tuple[SceneObject, ...]
    size: int = IMAGE_SIZE
    seed: int | None = None

    def tokens(self, k: int = TOKENS_PER_SCENE) -> np.ndarray:
        """Conditioning sequence [background, (color, shape)...], padded."""
        seq = [VOCAB.encode(self.background)]
        for obj in self.objects:
            seq.append(VOCAB.encode(obj.color))
            seq.append(VOCAB.encode(obj.shape))
        if len(seq) > k:
            raise ValueError(f"scene needs {len(seq)} tokens, limit is {k}")
        seq.extend([VOCAB.pad_id] * (k - len(seq)))
        return np.asarray(seq, dtype=np.int64)

    def shape_token_indices(self) -> list[int]:
        """Positions of the shape tokens (one per object) in the sequence."""
        return [2 + 2 * i for i in range(len(self.objects))]


def null_tokens(k: int = TOKENS_PER_SCENE) -> np.ndarray:
    """The unconditional sequence: every slot holds the null token."""
    return np.full(k, VOCAB.null_id, dtype=np.int64)


# Size ranges shrink with object count so that disjoint placement with a
# one-pixel gap stays feasible on the 32x32 canvas.
_SIZE_RANGE_BY_COUNT = {1: (10, 18), 2: (10, 16), 3: (8, 12)}


def _separated(a, b, gap: float = 1.0) -> bool:
    """True when two boxes are disjoint with at least ``gap`` pixels between.

    Separation guarantees rendered objects never share 8-connected pixels,
    so a component-based detector sees one component per object.
    """
    return (a[2] + gap <= b[0] or b[2] + gap <= a[0]
            or a[3] + gap <= b[1] or b[3] + gap <= a[1])


def generate_scene(seed: int, n_objects: int | None = None,
                   max_objects: int = MAX_OBJECTS,
                   max_iou: float = 0.1,
                   size: int = IMAGE_SIZE) -> SceneSpec:
    """Draw a random scene, rejecting layouts whose boxes crowd each other.

    Boxes are kept pairwise disjoint with a one-pixel gap (which also
    satisfies the pairwise IOU <= ``max_iou`` bound, trivially).
    Deterministic in ``seed``.  Raises RuntimeError when 100 whole-scene
    attempts fail the separation constraint.
    """
    from .evaluation import iou  # deferred: evaluation imports this module

    rng = np.random.default_rng([seed, 1001])
    background = BACKGROUNDS[rng.integers(len(BACKGROUNDS))]
    n = int(n_objects) if n_objects is not None \
        else int(rng.integers(1, max_objects + 1))
    if not 1 <= n <= max_objects:
        raise ValueError(f"generate_scene: n_objects={n} out of range")
    min_size, max_size = _SIZE_RANGE_BY_COUNT[min(n, 3)]

    for _ in range(100):
        objects = []
        for _ in range(n):
            shape = SHAPES[rng.integers(len(SHAPES))]
            color = COLORS[rng.integers(len(COLORS))]
            w = int(rng.integers(min_size, max_size + 1))
            h = w if shape == "circle" else int(
                rng.integers(min_size, max_size + 1))
            x0 = int(rng.integers(0, size - w + 1))
            y0 = int(rng.integers(0, size - h + 1))
            objects.append(SceneObject(color, shape,
                                       (x0, y0, x0 + w, y0 + h)))
        boxes = [o.box for o in objects]
        separated = all(_separated(boxes[i], boxes[j])
                        for i in range(n) for j in range(i + 1, n))
        if separated and all(iou(boxes[i], boxes[j]) <= max_iou
                             for i in range(n) for j in range(i + 1, n)):
            return SceneSpec(background, tuple(objects), size=size, seed=seed)
    raise RuntimeError(
        f"generate_scene: no well-separated layout in 100 attempts (seed={seed})")


def _shape_membership(shape: str, box, xs: np.ndarray, ys: np.ndarray
                      ) -> np.ndarray:
    """Pixel-center membership test for one shape inside its box."""
    x_min, y_min, x_max, y_max = box
    in_box = (xs >= x_min) & (xs < x_max) & (ys >= y_min) & (ys < y_max)
    if shape == "square":
        return in_box
    if shape == "circle":
        cx, cy = (x_min + x_max) / 2, (y_min + y_max) / 2
        rx, ry = (x_max - x_min) / 2, (y_max - y_min) / 2
        return ((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2 <= 1.0
    if shape == "triangle":
        # Upward isoceles: apex at top-center, base along the bottom edge.
        # Each pixel row r takes exactly max(1, rint(w * (r+0.5)/h)) pixels
        # centered on the axis (a half-open interval of integer length always
        # holds that many pixel centers), so the rasterized area tracks w*h/2
        # and the apex row is never empty.  A naive half-plane test rounds
        # outward on every row, inflating small triangles well past half fill.
        cx = (x_min + x_max) / 2
        width = x_max - x_min
        height = y_max - y_min
        row_width = np.maximum(1.0, np.rint(width * (ys - y_min) / height))
        # Full-width base row keeps the tight bounding box of the rasterized
        # pixels equal to the requested box even when rounding shaves a pixel.
        row_width = np.where(ys > y_max - 1, width, row_width)
        return (in_box & (xs >= cx - row_width / 2)
                & (xs < cx + row_width / 2))
    raise ValueError(f"unknown shape {shape!r}")


def render_scene(scene: SceneSpec) -> np.ndarray:
    """Rasterize a scene to (size, size, 3) float64 in [0, 1]."""
    size = scene.size
    img = np.full((size, size, 3), BACKGROUND_GREY, dtype=np.float64)
    if scene.background == "grid":
        img[::GRID_PITCH, :, :] = GRID_LINE_GREY
        img[:, ::GRID_PITCH, :] = GRID_LINE_GREY
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    for obj in scene.objects:
        inside = _shape_membership(obj.shape, obj.box, xs, ys)
        img[inside] = COLOR_VALUES[obj.color]
    return img


def rasterize_mask(box, grid_hw: tuple[int, int],
                   image_size: int = IMAGE_SIZE) -> np.ndarray:
    """Binary mask of grid cells whose centers fall inside a pixel-space box.

    Returns a flat (grid_h * grid_w,) float64 array.  Raises if the box
    covers no cell center (degenerate after downscaling).
    """
    gh, gw = grid_hw
    sy, sx = image_size / gh, image_size / gw
    cy = (np.arange(gh) + 0.5) * sy
    cx = (np.arange(gw) + 0.5) * sx
    ys, xs = np.meshgrid(cy, cx, indexing="ij")
    x_min, y_min, x_max, y_max = box
    mask = ((xs >= x_min) & (xs < x_max)
            & (ys >= y_min) & (ys < y_max)).astype(np.float64)
    if mask.sum() == 0:
        raise ValueError(
            f"rasterize_mask: box {box} covers no cell at grid {grid_hw}")
    return mask.reshape(gh * gw)


@dataclass
class LayoutSpec:
    """A conditioning sequence with box targets for some of its tokens.

    Attributes:
        tokens: (k,) int64 conditioning sequence.
        target_indices: positions in ``tokens`` that carry a box each.
        boxes: (len(target_indices), 4) pixel-space boxes.
        mask: (grid_h*grid_w, k) binary; column j is the box raster for
            target token j, zero for non-target columns.
        mask_bar: complement of ``mask`` on target columns, zero elsewhere.
        pixel_masks: (n_targets, size, size) binary masks at pixel resolution
            (used by fusion-style guidance).
    """

    tokens: np.ndarray
    target_indices: list[int]
    boxes: np.ndarray
    grid_hw: tuple[int, int]
    image_size: int
    mask: np.ndarray = field(init=False)
    mask_bar: np.ndarray = field(init=False)
    pixel_masks: np.ndarray = field(init=False)

    def __post_init__(self):
        k = self.tokens.shape[0]
        gh, gw = self.grid_hw
        n = gh * gw
        if len(self.target_indices) != self.boxes.shape[0]:
            raise ValueError("LayoutSpec: one box per target index required")
        for j in self.target_indices:
            if self.tokens[j] == VOCAB.pad_id:
                raise ValueError(
                    f"LayoutSpec: target index {j} points at a padding token")
        mask = np.zeros((n, k), dtype=np.float64)
        mask_bar = np.zeros((n, k), dtype=np.float64)
        pixel = np.zeros((self.boxes.shape[0], self.image_size,
                          self.image_size), dtype=np.float64)
        for col, (j, box) in enumerate(zip(self.target_indices, self.boxes)):
            m = rasterize_mask(box, self.grid_hw, self.image_size)
            mask[:, j] = m
            mask_bar[:, j] = 1.0 - m
            pixel[col] = rasterize_mask(
                box, (self.image_size, self.image_size),
                self.image_size).reshape(self.image_size, self.image_size)
        self.mask = mask
        self.mask_bar = mask_bar
        self.pixel_masks = pixel

    @classmethod
    def from_scene(cls, scene: SceneSpec, grid_hw: tuple[int, int] = (16, 16),
                   k: int = TOKENS_PER_SCENE) -> "LayoutSpec":
        boxes = np.asarray([o.box for o in scene.objects], dtype=np.float64)
        return cls(tokens=scene.tokens(k),
                   target_indices=scene.shape_token_indices(),
                   boxes=boxes, grid_hw=grid_hw, image_size=scene.size)

    def target_descriptions(self) -> list[tuple[str, str]]:
        """(color, shape) string pairs for each target, for reports."""
        out = []
        for j in self.target_indices:
            shape = VOCAB.decode(int(self.tokens[j]))
            color = VOCAB.decode(int(self.tokens[j - 1])) if j >= 1 else "?"
            out.append((color, shape))
        return out
