"""Attack-template search spaces: patch, blend, warp, and bounded noise.

Each template defines how a candidate trigger is applied to an image, how a
random starting trigger is drawn, and how a single-move random neighbor is
produced for the annealer. Triggers are immutable values; neighbor
generation never mutates its input.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigInvalid, ShapeMismatch
from .tensors import ImageTensor, RandomSource

PATTERN_STEP = 0.2      # patch/blend per-move pixel perturbation half-range
WARP_GRID_STEP = 0.1    # warp per-move grid perturbation half-range
WARP_STRENGTH_STEP = 0.05
MASK_ACTIVITY_EPS = 0.05  # |alpha| / displacement counted as trigger area
WARP_KS = (3, 4, 5, 6)
WARP_STRENGTH_RANGE = (0.25, 0.75)


@dataclass(frozen=True)
class PatchTrigger:
    """A contiguous pixel patch stamped over the image at a fixed origin."""

    pattern: np.ndarray     # (C, h, w) in [0, 1]
    origin: tuple[int, int]  # (row, col)
    shape_mask: np.ndarray  # (h, w) bool, active cells of the bounding box

    @property
    def height(self) -> int:
        return self.pattern.shape[1]

    @property
    def width(self) -> int:
        return self.pattern.shape[2]

    @property
    def box_area(self) -> int:
        return self.height * self.width


@dataclass(frozen=True)
class BlendTrigger:
    """A full-image pattern mixed in with per-pixel signed blend weights."""

    pattern: np.ndarray  # (C, H, W) in [0, 1]
    alpha: np.ndarray    # (H, W) in [-1, 1]


@dataclass(frozen=True)
class WarpTrigger:
    """A smooth warping field parameterized by a small control grid."""

    grid: np.ndarray  # (k, k, 2) in [-1, 1]
    strength: float   # in [0.25, 0.75]

    @property
    def k(self) -> int:
        return self.grid.shape[0]


@dataclass(frozen=True)
class NoiseTrigger:
    """A fixed additive perturbation with a max-abs bound."""

    pattern: np.ndarray  # (C, H, W)
    bound: float


Trigger = PatchTrigger | BlendTrigger | WarpTrigger | NoiseTrigger

TEMPLATE_KINDS = ("patch", "blend", "warp", "noise")


@dataclass(frozen=True)
class SearchSpaceConfig:
    """Bounds and move distribution for one attack template."""

    kind: str
    image_shape: tuple[int, int, int] | None = None  # (C, H, W); set per scan
    delta_s: int = 9          # max patch bounding-box area, pixels
    alpha_max: float = 1.0    # blend weight bound
    noise_bound: float = 0.1  # additive perturbation max-abs bound
    # patch move mix: pattern pixel, translate, shape toggle, box resize
    patch_move_probs: tuple[float, float, float, float] = (0.70, 0.10, 0.10, 0.10)
    # warp move mix: grid perturb, strength nudge, redraw k
    warp_move_probs: tuple[float, float, float] = (0.80, 0.10, 0.10)

    def __post_init__(self):
        if self.kind not in TEMPLATE_KINDS:
            raise ConfigInvalid(f"unknown template kind {self.kind!r}")
        if self.delta_s <= 0 or self.alpha_max <= 0 or self.noise_bound <= 0:
            raise ConfigInvalid("search-space bounds must be strictly positive")
        for probs in (self.patch_move_probs, self.warp_move_probs):
            if any(p < 0 for p in probs) or abs(sum(probs) - 1.0) > 1e-9:
                raise ConfigInvalid(f"move probabilities must sum to 1, got {probs}")

    def require_shape(self) -> tuple[int, int, int]:
        if self.image_shape is None:
            raise ConfigInvalid("search space has no image shape bound to it")
        return self.image_shape

    def for_shape(self, image_shape: tuple[int, int, int]) -> "SearchSpaceConfig":
        return replace(self, image_shape=tuple(int(v) for v in image_shape))


# --- validation ---------------------------------------------------------------


def _mask_connected(mask: np.ndarray) -> bool:
    """True when the active cells form one 4-connected region."""
    active = np.argwhere(mask)
    if len(active) == 0:
        return False
    seen = np.zeros(mask.shape, dtype=bool)
    stack = [tuple(active[0])]
    seen[tuple(active[0])] = True
    count = 1
    h, w = mask.shape
    while stack:
        r, c = stack.pop()
        for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            rr, cc = r + dr, c + dc
            if 0 <= rr < h and 0 <= cc < w and mask[rr, cc] and not seen[rr, cc]:
                seen[rr, cc] = True
                count += 1
                stack.append((rr, cc))
    return count == len(active)


def validate_trigger(trig: Trigger, space: SearchSpaceConfig | None = None) -> None:
    """Raise when a trigger violates its template invariants."""
    if isinstance(trig, PatchTrigger):
        c, h, w = trig.pattern.shape
        if trig.shape_mask.shape != (h, w):
            raise ShapeMismatch("shape_mask does not match the pattern box")
        if trig.pattern.min() < 0 or trig.pattern.max() > 1:
            raise ValueError("patch pattern outside [0,1]")
        if not trig.shape_mask.any():
            raise ValueError("shape_mask has no active cell")
        if not _mask_connected(trig.shape_mask):
            raise ValueError("shape_mask active cells are not 4-connected")
        if trig.origin[0] < 0 or trig.origin[1] < 0:
            raise ValueError("patch origin outside the image")
        if space is not None:
            _, ih, iw = space.require_shape()
            if trig.origin[0] + h > ih or trig.origin[1] + w > iw:
                raise ValueError("patch bounding box leaves the image")
            if trig.box_area > space.delta_s:
                raise ValueError(f"patch box area {trig.box_area} > delta_s {space.delta_s}")
    elif isinstance(trig, BlendTrigger):
        c, h, w = trig.pattern.shape
        if trig.alpha.shape != (h, w):
            raise ShapeMismatch("alpha grid does not match the pattern")
        if trig.pattern.min() < 0 or trig.pattern.max() > 1:
            raise ValueError("blend pattern outside [0,1]")
        bound = 1.0 if space is None else min(1.0, space.alpha_max)
        if np.abs(trig.alpha).max() > bound + 1e-7:
            raise ValueError(f"blend weights exceed bound {bound}")
    elif isinstance(trig, WarpTrigger):
        if trig.k not in WARP_KS:
            raise ValueError(f"warp grid size {trig.k} not in {WARP_KS}")
        if trig.grid.shape != (trig.k, trig.k, 2):
            raise ShapeMismatch("warp grid must be (k, k, 2)")
        if np.abs(trig.grid).max() > 1:
            raise ValueError("warp grid values outside [-1,1]")
        lo, hi = WARP_STRENGTH_RANGE
        if not lo <= trig.strength <= hi:
            raise ValueError(f"warp strength {trig.strength} outside [{lo}, {hi}]")
    elif isinstance(trig, NoiseTrigger):
        if np.abs(trig.pattern).max() > trig.bound + 1e-7:
            raise ValueError("noise pattern exceeds its bound")
        if space is not None and trig.bound > space.noise_bound + 1e-7:
            raise ValueError("noise bound exceeds the configured limit")
    else:
        raise ConfigInvalid(f"unknown trigger type {type(trig).__name__}")


# --- application --------------------------------------------------------------


def upsample_warp_field(grid: np.ndarray, strength: float, out_h: int, out_w: int) -> np.ndarray:
    """Dense (H, W, 2) pixel-displacement field from a control grid.

    The grid is normalized to unit mean absolute value, bilinearly upsampled
    with the control points anchored at the image corners, scaled by the
    warping strength, and finally clipped so every sampling coordinate
    (i + dy, j + dx) stays inside the image.
    """
    grid = np.asarray(grid, dtype=np.float32)
    k = grid.shape[0]
    if k < 2:
        raise ConfigInvalid("control grid must be at least 2x2")
    mean_abs = float(np.mean(np.abs(grid)))
    if mean_abs > 0:
        normalized = grid / mean_abs
    else:
        normalized = np.zeros_like(grid)

    def axis_pos(n_out: int) -> np.ndarray:
        if n_out == 1:
            return np.zeros(1, dtype=np.float64)
        return np.linspace(0.0, k - 1, n_out)

    ys = axis_pos(out_h)
    xs = axis_pos(out_w)
    y0 = np.minimum(ys.astype(np.intp), k - 2)
    x0 = np.minimum(xs.astype(np.intp), k - 2)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    g00 = normalized[y0][:, x0]
    g01 = normalized[y0][:, x0 + 1]
    g10 = normalized[y0 + 1][:, x0]
    g11 = normalized[y0 + 1][:, x0 + 1]
    dense = ((1 - wy) * (1 - wx) * g00 + (1 - wy) * wx * g01
             + wy * (1 - wx) * g10 + wy * wx * g11)
    dense = (dense * float(strength)).astype(np.float32)

    rows = np.arange(out_h, dtype=np.float32)[:, None]
    cols = np.arange(out_w, dtype=np.float32)[None, :]
    np.clip(dense[:, :, 0], -rows, (out_h - 1) - rows, out=dense[:, :, 0])
    np.clip(dense[:, :, 1], -cols, (out_w - 1) - cols, out=dense[:, :, 1])
    return dense


def _warp_sampler(field: np.ndarray, h: int, w: int):
    """Precompute bilinear gather indices and weights for one warp field."""
    rows = np.arange(h, dtype=np.float64)[:, None] + field[:, :, 0]
    cols = np.arange(w, dtype=np.float64)[None, :] + field[:, :, 1]
    rows = np.clip(rows, 0.0, h - 1)
    cols = np.clip(cols, 0.0, w - 1)
    r0 = np.minimum(rows.astype(np.intp), h - 2 if h > 1 else 0)
    c0 = np.minimum(cols.astype(np.intp), w - 2 if w > 1 else 0)
    fr = (rows - r0).astype(np.float32).ravel()
    fc = (cols - c0).astype(np.float32).ravel()
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    i00 = (r0 * w + c0).ravel()
    i01 = (r0 * w + c1).ravel()
    i10 = (r1 * w + c0).ravel()
    i11 = (r1 * w + c1).ravel()
    w00 = (1 - fr) * (1 - fc)
    w01 = (1 - fr) * fc
    w10 = fr * (1 - fc)
    w11 = fr * fc
    return (i00, i01, i10, i11), (w00, w01, w10, w11)


def apply_to_stack(trig: Trigger, stack: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
    """Apply one trigger to a (B, C, H, W) batch; the input is not mutated."""
    b, c, h, w = stack.shape
    if out is None:
        out = np.empty_like(stack)
    if isinstance(trig, PatchTrigger):
        ph, pw = trig.height, trig.width
        r0, c0 = trig.origin
        if r0 + ph > h or c0 + pw > w or trig.pattern.shape[0] != c:
            raise ShapeMismatch("patch does not fit the image")
        np.copyto(out, stack)
        region = out[:, :, r0:r0 + ph, c0:c0 + pw]
        mask = trig.shape_mask
        region[:, :, mask] = trig.pattern[:, mask]
        return out
    if isinstance(trig, BlendTrigger):
        if trig.pattern.shape != (c, h, w):
            raise ShapeMismatch("blend pattern does not match the image shape")
        m = trig.alpha[None, None]
        np.multiply(stack, 1.0 - m, out=out)
        out += m * trig.pattern[None]
        np.clip(out, 0.0, 1.0, out=out)
        return out
    if isinstance(trig, NoiseTrigger):
        if trig.pattern.shape != (c, h, w):
            raise ShapeMismatch("noise pattern does not match the image shape")
        np.add(stack, trig.pattern[None], out=out)
        np.clip(out, 0.0, 1.0, out=out)
        return out
    if isinstance(trig, WarpTrigger):
        fieldv = upsample_warp_field(trig.grid, trig.strength, h, w)
        idxs, wts = _warp_sampler(fieldv, h, w)
        flat = stack.reshape(b, c, h * w)
        acc = flat[:, :, idxs[0]] * wts[0]
        for i in range(1, 4):
            acc += flat[:, :, idxs[i]] * wts[i]
        np.clip(acc, 0.0, 1.0, out=acc.reshape(b, c, h * w))
        np.copyto(out, acc.reshape(b, c, h, w))
        return out
    raise ConfigInvalid(f"unknown trigger type {type(trig).__name__}")


def apply_trigger(trig: Trigger, img: ImageTensor) -> ImageTensor:
    """Apply a trigger to one image; output is clamped into [0, 1]."""
    result = apply_to_stack(trig, img.data[None])[0]
    return ImageTensor(result)


# --- random initialization ----------------------------------------------------


def _initial_box(delta_s: int, ih: int, iw: int) -> tuple[int, int]:
    """Largest box with sides <= 3 whose area fits delta_s and the image."""
    for hh, ww in ((3, 3), (3, 2), (2, 2), (2, 1), (1, 1)):
        if hh * ww <= delta_s and hh <= ih and ww <= iw:
            return hh, ww
    return 1, 1


def random_trigger(space: SearchSpaceConfig, rng: RandomSource) -> Trigger:
    """Draw a fresh trigger uniformly over the template's parameter space."""
    c, ih, iw = space.require_shape()
    if space.kind == "patch":
        ph, pw = _initial_box(space.delta_s, ih, iw)
        pattern = rng.random((c, ph, pw), dtype=np.float32)
        r0 = int(rng.integers(0, ih - ph + 1))
        c0 = int(rng.integers(0, iw - pw + 1))
        return PatchTrigger(pattern, (r0, c0), np.ones((ph, pw), dtype=bool))
    if space.kind == "blend":
        pattern = rng.random((c, ih, iw), dtype=np.float32)
        amax = min(1.0, space.alpha_max)
        alpha = rng.uniform(-amax, amax, size=(ih, iw)).astype(np.float32)
        return BlendTrigger(pattern, alpha)
    if space.kind == "warp":
        k = int(rng.choice(WARP_KS))
        grid = rng.uniform(-1.0, 1.0, size=(k, k, 2)).astype(np.float32)
        strength = float(rng.uniform(*WARP_STRENGTH_RANGE))
        return WarpTrigger(grid, strength)
    if space.kind == "noise":
        eps = space.noise_bound
        pattern = rng.uniform(-eps, eps, size=(c, ih, iw)).astype(np.float32)
        return NoiseTrigger(pattern, eps)
    raise ConfigInvalid(f"unknown template kind {space.kind}")


# --- neighbor moves -----------------------------------------------------------


def _perturb_patch_pixel(trig: PatchTrigger, rng: RandomSource) -> PatchTrigger:
    pattern = trig.pattern.copy()
    c, h, w = pattern.shape
    ci = int(rng.integers(0, c))
    ri = int(rng.integers(0, h))
    wi = int(rng.integers(0, w))
    pattern[ci, ri, wi] = np.clip(
        pattern[ci, ri, wi] + rng.uniform(-PATTERN_STEP, PATTERN_STEP), 0.0, 1.0)
    return replace(trig, pattern=pattern)


def _translate_patch(trig: PatchTrigger, space: SearchSpaceConfig, rng: RandomSource) -> PatchTrigger | None:
    _, ih, iw = space.require_shape()
    r0, c0 = trig.origin
    options = []
    if r0 > 0:
        options.append((-1, 0))
    if r0 + trig.height < ih:
        options.append((1, 0))
    if c0 > 0:
        options.append((0, -1))
    if c0 + trig.width < iw:
        options.append((0, 1))
    if not options:
        return None
    dr, dc = options[int(rng.integers(0, len(options)))]
    return replace(trig, origin=(r0 + dr, c0 + dc))


def _toggle_mask_cell(trig: PatchTrigger, rng: RandomSource) -> PatchTrigger | None:
    mask = trig.shape_mask
    h, w = mask.shape
    candidates = []
    for r in range(h):
        for c in range(w):
            if mask[r, c]:
                if mask.sum() > 1:
                    trial = mask.copy()
                    trial[r, c] = False
                    if _mask_connected(trial):
                        candidates.append((r, c))
            else:
                adjacent = any(
                    0 <= r + dr < h and 0 <= c + dc < w and mask[r + dr, c + dc]
                    for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)))
                if adjacent:
                    candidates.append((r, c))
    if not candidates:
        return None
    r, c = candidates[int(rng.integers(0, len(candidates)))]
    new_mask = mask.copy()
    new_mask[r, c] = not new_mask[r, c]
    return replace(trig, shape_mask=new_mask)


def _resize_patch_box(trig: PatchTrigger, space: SearchSpaceConfig, rng: RandomSource) -> PatchTrigger | None:
    c, ih, iw = space.require_shape()
    h, w = trig.height, trig.width
    r0, c0 = trig.origin
    moves = []  # (side, grow?)
    for side in ("top", "bottom", "left", "right"):
        moves.append((side, True))
        moves.append((side, False))
    order = rng.permutation(len(moves))
    for mi in order:
        side, grow = moves[int(mi)]
        cand = _try_resize(trig, side, grow, space, rng)
        if cand is not None:
            return cand
    return None


def _try_resize(trig: PatchTrigger, side: str, grow: bool,
                space: SearchSpaceConfig, rng: RandomSource) -> PatchTrigger | None:
    c, ih, iw = space.require_shape()
    pattern, mask = trig.pattern, trig.shape_mask
    h, w = trig.height, trig.width
    r0, c0 = trig.origin
    if grow:
        nh = h + (side in ("top", "bottom"))
        nw = w + (side in ("left", "right"))
        if nh * nw > space.delta_s:
            return None
        if side == "top" and r0 == 0:
            return None
        if side == "bottom" and r0 + h >= ih:
            return None
        if side == "left" and c0 == 0:
            return None
        if side == "right" and c0 + w >= iw:
            return None
        if side in ("top", "bottom"):
            fresh = rng.random((pattern.shape[0], 1, w), dtype=np.float32)
            edge = mask[0:1, :] if side == "top" else mask[-1:, :]
            if side == "top":
                new_pattern = np.concatenate([fresh, pattern], axis=1)
                new_mask = np.concatenate([edge, mask], axis=0)
                new_origin = (r0 - 1, c0)
            else:
                new_pattern = np.concatenate([pattern, fresh], axis=1)
                new_mask = np.concatenate([mask, edge], axis=0)
                new_origin = (r0, c0)
        else:
            fresh = rng.random((pattern.shape[0], h, 1), dtype=np.float32)
            edge = mask[:, 0:1] if side == "left" else mask[:, -1:]
            if side == "left":
                new_pattern = np.concatenate([fresh, pattern], axis=2)
                new_mask = np.concatenate([edge, mask], axis=1)
                new_origin = (r0, c0 - 1)
            else:
                new_pattern = np.concatenate([pattern, fresh], axis=2)
                new_mask = np.concatenate([mask, edge], axis=1)
                new_origin = (r0, c0)
    else:
        if side in ("top", "bottom") and h == 1:
            return None
        if side in ("left", "right") and w == 1:
            return None
        sl = {"top": (slice(1, None), slice(None)),
              "bottom": (slice(None, -1), slice(None)),
              "left": (slice(None), slice(1, None)),
              "right": (slice(None), slice(None, -1))}[side]
        new_mask = mask[sl]
        if not new_mask.any() or not _mask_connected(new_mask):
            return None
        new_pattern = pattern[:, sl[0], sl[1]]
        new_origin = {"top": (r0 + 1, c0), "bottom": (r0, c0),
                      "left": (r0, c0 + 1), "right": (r0, c0)}[side]
    return PatchTrigger(np.ascontiguousarray(new_pattern), new_origin,
                        np.ascontiguousarray(new_mask))


def _patch_neighbor(trig: PatchTrigger, space: SearchSpaceConfig, rng: RandomSource):
    probs = space.patch_move_probs
    for _ in range(16):
        u = rng.random()
        if u < probs[0]:
            return _perturb_patch_pixel(trig, rng), "pattern"
        if u < probs[0] + probs[1]:
            cand = _translate_patch(trig, space, rng)
            if cand is not None:
                return cand, "translate"
        elif u < probs[0] + probs[1] + probs[2]:
            cand = _toggle_mask_cell(trig, rng)
            if cand is not None:
                return cand, "shape"
        else:
            cand = _resize_patch_box(trig, space, rng)
            if cand is not None:
                return cand, "resize"
    return _perturb_patch_pixel(trig, rng), "pattern"


def _blend_neighbor(trig: BlendTrigger, space: SearchSpaceConfig, rng: RandomSource):
    c, h, w = trig.pattern.shape
    amax = min(1.0, space.alpha_max)
    if rng.random() < 0.5:
        alpha = trig.alpha.copy()
        ri, ci = int(rng.integers(0, h)), int(rng.integers(0, w))
        alpha[ri, ci] = np.clip(
            alpha[ri, ci] + rng.uniform(-PATTERN_STEP, PATTERN_STEP), -amax, amax)
        return replace(trig, alpha=alpha), "alpha"
    pattern = trig.pattern.copy()
    cc = int(rng.integers(0, c))
    ri, ci = int(rng.integers(0, h)), int(rng.integers(0, w))
    pattern[cc, ri, ci] = np.clip(
        pattern[cc, ri, ci] + rng.uniform(-PATTERN_STEP, PATTERN_STEP), 0.0, 1.0)
    return replace(trig, pattern=pattern), "pattern"


def _warp_neighbor(trig: WarpTrigger, space: SearchSpaceConfig, rng: RandomSource):
    p_grid, p_strength, _ = space.warp_move_probs
    u = rng.random()
    if u < p_grid:
        grid = trig.grid.copy()
        k = trig.k
        ri, ci = int(rng.integers(0, k)), int(rng.integers(0, k))
        ax = int(rng.integers(0, 2))
        grid[ri, ci, ax] = np.clip(
            grid[ri, ci, ax] + rng.uniform(-WARP_GRID_STEP, WARP_GRID_STEP), -1.0, 1.0)
        return replace(trig, grid=grid), "grid"
    if u < p_grid + p_strength:
        delta = WARP_STRENGTH_STEP if rng.random() < 0.5 else -WARP_STRENGTH_STEP
        lo, hi = WARP_STRENGTH_RANGE
        return replace(trig, strength=float(np.clip(trig.strength + delta, lo, hi))), "strength"
    k = int(rng.choice(WARP_KS))
    grid = rng.uniform(-1.0, 1.0, size=(k, k, 2)).astype(np.float32)
    return replace(trig, grid=grid), "redraw-k"


def _noise_neighbor(trig: NoiseTrigger, space: SearchSpaceConfig, rng: RandomSource):
    pattern = trig.pattern.copy()
    c, h, w = pattern.shape
    cc = int(rng.integers(0, c))
    ri, ci = int(rng.integers(0, h)), int(rng.integers(0, w))
    step = trig.bound / 2.0
    pattern[cc, ri, ci] = np.clip(
        pattern[cc, ri, ci] + rng.uniform(-step, step), -trig.bound, trig.bound)
    return replace(trig, pattern=pattern), "pattern"


def random_neighbor_with_move(trig: Trigger, space: SearchSpaceConfig,
                              rng: RandomSource) -> tuple[Trigger, str]:
    """One-move neighbor plus the name of the move kind that produced it."""
    if isinstance(trig, PatchTrigger):
        return _patch_neighbor(trig, space, rng)
    if isinstance(trig, BlendTrigger):
        return _blend_neighbor(trig, space, rng)
    if isinstance(trig, WarpTrigger):
        return _warp_neighbor(trig, space, rng)
    if isinstance(trig, NoiseTrigger):
        return _noise_neighbor(trig, space, rng)
    raise ConfigInvalid(f"unknown trigger type {type(trig).__name__}")


def random_neighbor(trig: Trigger, space: SearchSpaceConfig, rng: RandomSource) -> Trigger:
    """Return a new valid trigger differing from `trig` by exactly one move."""
    return random_neighbor_with_move(trig, space, rng)[0]


# --- mask + serialization -----------------------------------------------------


def trigger_mask(trig: Trigger, image_shape: tuple[int, int, int]) -> np.ndarray:
    """H x W boolean map of where the trigger meaningfully acts."""
    _, h, w = image_shape
    if isinstance(trig, PatchTrigger):
        mask = np.zeros((h, w), dtype=bool)
        r0, c0 = trig.origin
        mask[r0:r0 + trig.height, c0:c0 + trig.width] = trig.shape_mask
        return mask
    if isinstance(trig, BlendTrigger):
        return np.abs(trig.alpha) > MASK_ACTIVITY_EPS
    if isinstance(trig, NoiseTrigger):
        return np.abs(trig.pattern).max(axis=0) > MASK_ACTIVITY_EPS
    if isinstance(trig, WarpTrigger):
        fieldv = upsample_warp_field(trig.grid, trig.strength, h, w)
        return np.hypot(fieldv[:, :, 0], fieldv[:, :, 1]) > MASK_ACTIVITY_EPS
    raise ConfigInvalid(f"unknown trigger type {type(trig).__name__}")


def _b64(arr: np.ndarray, dtype) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype=dtype).tobytes()).decode("ascii")


def _unb64(text: str, dtype, shape) -> np.ndarray:
    return np.frombuffer(base64.b64decode(text), dtype=dtype).reshape(shape).copy()


def trigger_to_json(trig: Trigger) -> str:
    """Lossless JSON encoding with a "kind" discriminator."""
    if isinstance(trig, PatchTrigger):
        doc = {"kind": "patch", "origin": list(trig.origin),
               "shape": list(trig.pattern.shape),
               "pattern": _b64(trig.pattern, "<f4"),
               "mask": _b64(trig.shape_mask, "u1")}
    elif isinstance(trig, BlendTrigger):
        doc = {"kind": "blend", "shape": list(trig.pattern.shape),
               "pattern": _b64(trig.pattern, "<f4"),
               "alpha": _b64(trig.alpha, "<f4")}
    elif isinstance(trig, WarpTrigger):
        doc = {"kind": "warp", "k": trig.k, "strength": trig.strength,
               "grid": _b64(trig.grid, "<f4")}
    elif isinstance(trig, NoiseTrigger):
        doc = {"kind": "noise", "bound": trig.bound,
               "shape": list(trig.pattern.shape),
               "pattern": _b64(trig.pattern, "<f4")}
    else:
        raise ConfigInvalid(f"unknown trigger type {type(trig).__name__}")
    return json.dumps(doc)


def trigger_from_json(text: str) -> Trigger:
    doc = json.loads(text)
    kind = doc.get("kind")
    if kind == "patch":
        shape = tuple(doc["shape"])
        return PatchTrigger(_unb64(doc["pattern"], "<f4", shape),
                            tuple(doc["origin"]),
                            _unb64(doc["mask"], "u1", shape[1:]).astype(bool))
    if kind == "blend":
        shape = tuple(doc["shape"])
        return BlendTrigger(_unb64(doc["pattern"], "<f4", shape),
                            _unb64(doc["alpha"], "<f4", shape[1:]))
    if kind == "warp":
        k = int(doc["k"])
        return WarpTrigger(_unb64(doc["grid"], "<f4", (k, k, 2)), float(doc["strength"]))
    if kind == "noise":
        shape = tuple(doc["shape"])
        return NoiseTrigger(_unb64(doc["pattern"], "<f4", shape), float(doc["bound"]))
    raise ConfigInvalid(f"unknown trigger kind {kind!r}")
