"""Analytic 2D point-scene semantics.

A prompt's meaning is a small structured record (object, optional second
object, action, style) extracted by folding confusables and parsing the
slot grammar. Each distinct record maps to a closed-form mixture of
isotropic Gaussians whose components trace a shape skeleton:

  object noun   -> shape (ring / two-moons / grid / spiral / cross)
  action        -> spatial relation of the two shapes: 'pointing' puts
                   them far apart (center gap 2.4 >= 2.0); interaction
                   verbs nest the second shape inside the first
                   (center gap 0 <= 0.3)
  style         -> a transform of the component centers: reflection
                   about the line x = 0.5, shear, or coordinate
                   quantization; no style means identity

Because two interaction verbs induce the same distribution, scenes are
classified up to a scene key (object, object2, relation, style); the
oracle classifier scores every key by exact mean log-likelihood.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, GrammarError
from .rng import Rng
from .text import Prompt, SlotCatalog, Vocabulary

RELATION_OF = {
    "pointing": "separated",
    "holding": "interaction",
    "touching": "interaction",
    "kissing": "interaction",
}
SEPARATED = "separated"
INTERACTION = "interaction"

# a measured two-cluster centroid gap at or below this is 'interaction'
INTERACTION_GAP_MAX = 0.6

SceneKey = tuple[str, str | None, str | None, str | None]


@dataclass(frozen=True)
class SceneSemantics:
    obj: str
    obj2: str | None = None
    action: str | None = None
    style: str | None = None

    def __post_init__(self):
        if (self.obj2 is None) != (self.action is None):
            raise GrammarError("obj2 and action must appear together")

    def relation(self) -> str | None:
        if self.action is None:
            return None
        try:
            return RELATION_OF[self.action]
        except KeyError:
            raise GrammarError(f"verb {self.action!r} has no spatial relation") from None

    def scene_key(self) -> SceneKey:
        """Identity of the induced distribution: verbs collapse to their
        relation, everything else passes through."""
        return (self.obj, self.obj2, self.relation(), self.style)


def semantics_of(p: Prompt, vocab: Vocabulary, catalog: SlotCatalog) -> SceneSemantics:
    """Fold confusables, then parse the slot grammar. Raises GrammarError
    for anything that does not match a known template."""
    words = [vocab.fold(w) for w in p.words]
    if not words:
        raise GrammarError("empty prompt has no semantics")

    style = None
    if len(words) >= 3 and words[-1] == "style":
        in_positions = [i for i, w in enumerate(words[:-1]) if w == "in"]
        if not in_positions:
            raise GrammarError(f"dangling 'style' in prompt: {p.raw!r}")
        i = in_positions[-1]
        style = " ".join(words[i + 1:-1])
        if style not in catalog.styles:
            raise GrammarError(f"unknown style {style!r} in prompt: {p.raw!r}")
        words = words[:i]

    verbs = set(catalog.verbs) | set(catalog.target_verbs)

    def obj_or_raise(w: str) -> str:
        if w not in catalog.objects:
            raise GrammarError(f"unknown object {w!r} in prompt: {p.raw!r}")
        return w

    if len(words) == 5 and words[0] == "a" and words[2] == "on" and words[3] == "the":
        if words[4] not in catalog.places:
            raise GrammarError(f"unknown place {words[4]!r} in prompt: {p.raw!r}")
        return SceneSemantics(obj=obj_or_raise(words[1]), style=style)
    if len(words) == 4 and words[1] == "on" and words[2] == "the":
        if words[3] not in catalog.places:
            raise GrammarError(f"unknown place {words[3]!r} in prompt: {p.raw!r}")
        return SceneSemantics(obj=obj_or_raise(words[0]), style=style)
    if len(words) == 5 and words[0] == "a" and words[3] == "a":
        if words[2] not in verbs:
            raise GrammarError(f"unknown verb {words[2]!r} in prompt: {p.raw!r}")
        return SceneSemantics(obj=obj_or_raise(words[1]), obj2=obj_or_raise(words[4]),
                              action=words[2], style=style)
    raise GrammarError(f"prompt does not match any template: {p.raw!r}")


# -- shape skeletons -----------------------------------------------------------

def _ring() -> np.ndarray:
    t = 2.0 * np.pi * np.arange(24) / 24.0
    return np.stack([np.cos(t), np.sin(t)], axis=1)


def _two_moons() -> np.ndarray:
    t = np.pi * np.arange(12) / 11.0
    upper = np.stack([np.cos(t), np.sin(t)], axis=1)
    lower = np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1)
    return np.vstack([upper, lower])


def _grid() -> np.ndarray:
    axis = np.linspace(-1.0, 1.0, 4)
    gx, gy = np.meshgrid(axis, axis)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def _spiral() -> np.ndarray:
    t = np.arange(24) / 23.0
    r = 0.3 + 0.7 * t
    th = 3.5 * np.pi * t
    return np.stack([r * np.cos(th), r * np.sin(th)], axis=1)


def _cross() -> np.ndarray:
    arm = np.arange(1, 7) / 6.0
    pts = [np.stack([s * arm, np.zeros(6)], axis=1) for s in (1.0, -1.0)]
    pts += [np.stack([np.zeros(6), s * arm], axis=1) for s in (1.0, -1.0)]
    return np.vstack(pts)


def _normalized(pts: np.ndarray) -> np.ndarray:
    pts = pts - pts.mean(axis=0)
    return pts / np.abs(np.linalg.norm(pts, axis=1)).max()


SHAPE_BUILDERS = ("ring", "two_moons", "grid", "spiral", "cross")


def shape_skeleton(name: str) -> np.ndarray:
    """Unit-scale component centers: centroid at the origin, max radius 1."""
    fn = {"ring": _ring, "two_moons": _two_moons, "grid": _grid,
          "spiral": _spiral, "cross": _cross}[name]
    return _normalized(fn())


# -- scene distributions -------------------------------------------------------

@dataclass(frozen=True)
class SceneGeometry:
    sigma_single: float = 0.07
    sigma_pair: float = 0.05
    pair_scale: float = 0.35      # shape size in two-object scenes
    inner_ratio: float = 0.5      # second shape shrinks by this when nested
    separated_gap: float = 2.4    # center distance for 'pointing'
    reflect_line: float = 0.5     # style 0 reflects about x = reflect_line
    shear: float = 0.6            # style 1: (x, y) -> (x + shear*y, y)
    quantum: float = 0.25         # style 2 snaps centers to this lattice
    pixel_sigma_scale: float = 0.6   # style 2 also sharpens the dots


class SceneFamily:
    """All scene distributions reachable from a slot catalog."""

    def __init__(self, catalog: SlotCatalog, geometry: SceneGeometry = SceneGeometry()):
        if len(catalog.objects) > len(SHAPE_BUILDERS):
            raise ConfigError(
                f"at most {len(SHAPE_BUILDERS)} object nouns supported, "
                f"got {len(catalog.objects)}")
        if len(catalog.styles) > 3:
            raise ConfigError(f"at most 3 styles supported, got {len(catalog.styles)}")
        self.catalog = catalog
        self.geometry = geometry
        self._shape_of = {obj: shape_skeleton(SHAPE_BUILDERS[i])
                          for i, obj in enumerate(catalog.objects)}

    def _style_transform(self, style: str | None, pts: np.ndarray) -> np.ndarray:
        if style is None:
            return pts
        g = self.geometry
        idx = self.catalog.styles.index(style)
        if idx == 0:   # reflection about a vertical line off the shape center
            out = pts.copy()
            out[:, 0] = 2.0 * g.reflect_line - out[:, 0]
            return out
        if idx == 1:   # shear
            out = pts.copy()
            out[:, 0] = out[:, 0] + g.shear * out[:, 1]
            return out
        return np.round(pts / g.quantum) * g.quantum   # quantization

    def components(self, key: SceneKey) -> tuple[np.ndarray, float]:
        """Mixture component centers and the shared isotropic sigma.

        Styles transform each shape in its own normalized frame before it
        is scaled and placed, so a coarse transform (the lattice snap)
        stays resolvable on the small shapes of two-object scenes.
        """
        obj, obj2, relation, style = key
        g = self.geometry
        if style is not None and style not in self.catalog.styles:
            raise GrammarError(f"unknown style {style!r} in scene key")
        if obj not in self._shape_of:
            raise GrammarError(f"no shape for object {obj!r}")

        def styled(o: str) -> np.ndarray:
            return self._style_transform(style, self._shape_of[o].copy())

        def sharpen(sigma: float) -> float:
            if style is not None and self.catalog.styles.index(style) == 2:
                return sigma * g.pixel_sigma_scale
            return sigma

        if obj2 is None:
            return styled(obj), sharpen(g.sigma_single)
        if obj2 not in self._shape_of:
            raise GrammarError(f"no shape for object {obj2!r}")
        if relation == SEPARATED:
            half = 0.5 * g.separated_gap
            first = styled(obj) * g.pair_scale + np.array([-half, 0.0])
            second = styled(obj2) * g.pair_scale + np.array([half, 0.0])
        elif relation == INTERACTION:
            first = styled(obj) * g.pair_scale
            second = styled(obj2) * (g.pair_scale * g.inner_ratio)
        else:
            raise GrammarError(f"bad relation {relation!r} in scene key")
        return np.vstack([first, second]), sharpen(g.sigma_pair)

    def all_keys(self) -> list[SceneKey]:
        cat = self.catalog
        styles: list[str | None] = [None] + list(cat.styles)
        keys: list[SceneKey] = []
        for s in styles:
            for o in cat.objects:
                keys.append((o, None, None, s))
        for s in styles:
            for rel in (SEPARATED, INTERACTION):
                for o in cat.objects:
                    for o2 in cat.objects:
                        keys.append((o, o2, rel, s))
        return keys

    def representative(self, key: SceneKey) -> SceneSemantics:
        """One semantics record inducing this key (canonical verb choice)."""
        obj, obj2, relation, style = key
        if obj2 is None:
            return SceneSemantics(obj=obj, style=style)
        verb = "pointing" if relation == SEPARATED else "holding"
        return SceneSemantics(obj=obj, obj2=obj2, action=verb, style=style)

    def sample(self, key: SceneKey, n: int, rng: Rng) -> np.ndarray:
        """n exact draws from the scene's mixture."""
        centers, sigma = self.components(key)
        which = rng.integers(0, len(centers), size=n)
        return centers[which] + rng.normal((n, 2), std=sigma)

    def loglik(self, points: np.ndarray, key: SceneKey) -> float:
        """Mean per-point log density under the scene's mixture."""
        centers, sigma = self.components(key)
        return float(_mixture_loglik(points, centers, sigma).mean())


def _mixture_loglik(points: np.ndarray, centers: np.ndarray, sigma: float) -> np.ndarray:
    """Per-point log density of a uniform isotropic Gaussian mixture."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 2:
        raise ConfigError(f"points must be (n, 2), got {points.shape}")
    d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    ll = -d2 / (2.0 * sigma * sigma) - math.log(2.0 * math.pi * sigma * sigma)
    m = ll.max(axis=1, keepdims=True)
    return (m[:, 0] + np.log(np.exp(ll - m).sum(axis=1))) - math.log(len(centers))


class OracleClassifier:
    """Exact max-likelihood classification of a point cloud over every
    scene key the family can express."""

    def __init__(self, family: SceneFamily):
        self.family = family
        self.keys = family.all_keys()
        mus, inv2s, lognorms, slices = [], [], [], []
        offset = 0
        for key in self.keys:
            centers, sigma = family.components(key)
            k = len(centers)
            mus.append(centers)
            inv2s.append(np.full(k, 1.0 / (2.0 * sigma * sigma)))
            lognorms.append(np.full(k, -math.log(2.0 * math.pi * sigma * sigma)))
            slices.append((offset, offset + k, math.log(k)))
            offset += k
        self._mu = np.vstack(mus)                 # (C, 2)
        self._inv2 = np.concatenate(inv2s)        # (C,)
        self._lognorm = np.concatenate(lognorms)  # (C,)
        self._slices = slices

    def logliks(self, points: np.ndarray) -> dict[SceneKey, float]:
        points = np.asarray(points, dtype=np.float64)
        d2 = ((points[:, None, :] - self._mu[None, :, :]) ** 2).sum(axis=2)
        comp = -d2 * self._inv2 + self._lognorm   # (n, C)
        out: dict[SceneKey, float] = {}
        for key, (i0, i1, logk) in zip(self.keys, self._slices):
            block = comp[:, i0:i1]
            m = block.max(axis=1)
            ll = m + np.log(np.exp(block - m[:, None]).sum(axis=1)) - logk
            out[key] = float(ll.mean())
        return out

    def classify(self, points: np.ndarray) -> tuple[SceneKey, dict[SceneKey, float]]:
        """The max-likelihood scene key; ties resolve to the first key in
        the family's fixed enumeration order."""
        scores = self.logliks(points)
        best = self.keys[int(np.argmax([scores[k] for k in self.keys]))]
        return best, scores


def centroid_gap(points: np.ndarray) -> float:
    """Distance between the two cluster centroids under the best
    two-cluster split along x (exact 1D two-means via a sorted sweep)."""
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) < 2:
        return 0.0
    order = np.argsort(pts[:, 0], kind="stable")
    x = pts[order, 0]
    csum = np.cumsum(x)
    csq = np.cumsum(x * x)
    n = len(x)
    total_sum, total_sq = csum[-1], csq[-1]
    best_k, best_cost = 1, np.inf
    for k in range(1, n):
        left = csq[k - 1] - csum[k - 1] ** 2 / k
        right = (total_sq - csq[k - 1]) - (total_sum - csum[k - 1]) ** 2 / (n - k)
        cost = left + right
        if cost < best_cost:
            best_cost, best_k = cost, k
    left_c = pts[order[:best_k]].mean(axis=0)
    right_c = pts[order[best_k:]].mean(axis=0)
    return float(np.linalg.norm(left_c - right_c))
