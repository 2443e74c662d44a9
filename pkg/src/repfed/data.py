"""Synthetic paired image/text world, splits, and Dirichlet non-IID shards.

Each item draws a class label, a latent ``class_mean + N(0, 0.25 I)``, and
two views ``mix_img @ latent + noise`` and ``mix_txt @ latent + noise``.
Class structure gives uni-modal clients a classification task; the shared
latent gives the pairs a retrieval signal.
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigurationError

LATENT_STD = 0.5  # latent covariance 0.25 I around the class mean


@dataclass(frozen=True)
class SplitSizes:
    n_public: int = 256
    n_test: int = 200
    n_private_img: int = 2000
    n_private_txt: int = 2000
    n_private_mm: int = 2000

    @property
    def total(self):
        return self.n_public + self.n_test + self.n_private_img + self.n_private_txt + self.n_private_mm


@dataclass(frozen=True)
class WorldSpec:
    latent_dim: int = 8
    img_dim: int = 32
    txt_dim: int = 24
    num_classes: int = 10
    noise_std: float = 0.1
    sizes: SplitSizes = field(default_factory=SplitSizes)
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be at least 2")
        for name in ("latent_dim", "img_dim", "txt_dim"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.noise_std < 0:
            raise ConfigurationError("noise_std must be non-negative")
        for name, value in asdict(self.sizes).items():
            if value < 0:
                raise ConfigurationError(f"sizes.{name} must be non-negative")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class Item:
    id: int
    latent: np.ndarray
    img_view: np.ndarray
    txt_view: np.ndarray
    label: int


@dataclass(frozen=True)
class World:
    """Column-stored items: row ``i`` of every array is the item with id ``ids[i]``."""

    class_means: np.ndarray
    mix_img: np.ndarray
    mix_txt: np.ndarray
    ids: np.ndarray
    latents: np.ndarray
    img: np.ndarray
    txt: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return self.ids.shape[0]

    def item(self, i):
        return Item(int(self.ids[i]), self.latents[i], self.img[i], self.txt[i], int(self.labels[i]))

    @property
    def items(self):
        return [self.item(i) for i in range(len(self))]

    def content_hash(self):
        h = hashlib.sha256()
        for name in ("class_means", "mix_img", "mix_txt", "ids", "latents", "img", "txt", "labels"):
            arr = np.ascontiguousarray(getattr(self, name))
            h.update(name.encode())
            h.update(str(arr.dtype).encode())
            h.update(str(arr.shape).encode())
            h.update(arr.tobytes())
        return h.hexdigest()


def _stream(seed, tag):
    # one independent stream per generator role, so adding a role never shifts another
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**63 - 1), tag]))


def render_views(latents, mix_img, mix_txt, noise_std, rng):
    """Both views of each latent row, with independent Gaussian noise per view."""
    n = latents.shape[0]
    img = latents @ mix_img.T + noise_std * rng.standard_normal((n, mix_img.shape[0]))
    txt = latents @ mix_txt.T + noise_std * rng.standard_normal((n, mix_txt.shape[0]))
    return img, txt


def generate_world(spec, mix_override=None):
    """Build the world for ``spec``; ``mix_override=(mix_img, mix_txt)`` replaces the mixing matrices."""
    n = spec.sizes.total
    rng_means = _stream(spec.seed, 1)
    means = rng_means.standard_normal((spec.num_classes, spec.latent_dim))
    means /= np.linalg.norm(means, axis=1, keepdims=True)

    rng_mix = _stream(spec.seed, 2)
    mix_img = rng_mix.standard_normal((spec.img_dim, spec.latent_dim)) / np.sqrt(spec.latent_dim)
    mix_txt = rng_mix.standard_normal((spec.txt_dim, spec.latent_dim)) / np.sqrt(spec.latent_dim)
    if mix_override is not None:
        mix_img = np.asarray(mix_override[0], dtype=np.float64)
        mix_txt = np.asarray(mix_override[1], dtype=np.float64)
        if mix_img.shape != (spec.img_dim, spec.latent_dim) or mix_txt.shape != (spec.txt_dim, spec.latent_dim):
            raise ConfigurationError("mixing override has the wrong shape")

    rng_items = _stream(spec.seed, 3)
    labels = rng_items.integers(0, spec.num_classes, size=n)
    latents = means[labels] + LATENT_STD * rng_items.standard_normal((n, spec.latent_dim))

    img, txt = render_views(latents, mix_img, mix_txt, spec.noise_std, _stream(spec.seed, 4))
    return World(means, mix_img, mix_txt, np.arange(n, dtype=np.int64), latents, img, txt,
                 labels.astype(np.int64))


@dataclass(frozen=True)
class ImagePool:
    ids: np.ndarray
    img: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return self.ids.shape[0]

    def subset(self, idx):
        return ImagePool(self.ids[idx], self.img[idx], self.labels[idx])


@dataclass(frozen=True)
class TextPool:
    ids: np.ndarray
    txt: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return self.ids.shape[0]

    def subset(self, idx):
        return TextPool(self.ids[idx], self.txt[idx], self.labels[idx])


@dataclass(frozen=True)
class PairPool:
    """Image/text pairs. Labels are carried only to drive the non-IID partition."""

    ids: np.ndarray
    img: np.ndarray
    txt: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return self.ids.shape[0]

    def subset(self, idx):
        return PairPool(self.ids[idx], self.img[idx], self.txt[idx], self.labels[idx])


@dataclass(frozen=True)
class Splits:
    public: PairPool
    test: PairPool
    private_img: ImagePool
    private_txt: TextPool
    private_mm: PairPool


SPLIT_ORDER = ("public", "test", "private_img", "private_txt", "private_mm")


def split_permutation(n_items, seed):
    """The shuffle that assigns world rows to splits."""
    return _stream(seed, 5).permutation(n_items)


def make_splits(world, spec):
    """Disjoint splits by id, taken in ``SPLIT_ORDER`` from one seeded shuffle."""
    sizes = spec.sizes
    needed = sizes.total
    if needed > len(world):
        raise ConfigurationError(f"splits need {needed} items but the world has {len(world)}")
    perm = split_permutation(len(world), spec.seed)
    counts = [sizes.n_public, sizes.n_test, sizes.n_private_img, sizes.n_private_txt, sizes.n_private_mm]
    bounds = np.cumsum([0] + counts)
    rows = [perm[a:b] for a, b in zip(bounds[:-1], bounds[1:])]
    w = world

    def pairs(r):
        return PairPool(w.ids[r], w.img[r], w.txt[r], w.labels[r])

    return Splits(
        public=pairs(rows[0]),
        test=pairs(rows[1]),
        private_img=ImagePool(w.ids[rows[2]], w.img[rows[2]], w.labels[rows[2]]),
        private_txt=TextPool(w.ids[rows[3]], w.txt[rows[3]], w.labels[rows[3]]),
        private_mm=pairs(rows[4]),
    )


@dataclass(frozen=True)
class Shard:
    client_id: int
    item_ids: list


def _largest_remainder(total, proportions):
    raw = proportions * total
    counts = np.floor(raw).astype(np.int64)
    short = total - counts.sum()
    if short > 0:
        # ties resolved by lower client index (stable sort)
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def dirichlet_partition(labels, num_clients, alpha, seed, ids=None):
    """Split item positions (or ``ids``) across clients, class by class.

    Each class draws ``p ~ Dir(alpha * 1)`` and hands its items out in
    those proportions, using largest-remainder rounding so every item is
    assigned exactly once. Within a class, items are shuffled first.
    """
    if num_clients < 1:
        raise ConfigurationError("dirichlet_partition needs at least one client")
    if not alpha > 0:
        raise ConfigurationError("dirichlet alpha must be positive")
    labels = np.asarray(labels, dtype=np.int64)
    ids = np.arange(labels.shape[0]) if ids is None else np.asarray(ids)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & (2**63 - 1), 6]))
    buckets = [[] for _ in range(num_clients)]
    for cls in np.unique(labels):
        members = ids[labels == cls]
        members = members[rng.permutation(members.shape[0])]
        props = rng.dirichlet(np.full(num_clients, float(alpha)))
        counts = _largest_remainder(members.shape[0], props)
        start = 0
        for c, k in enumerate(counts):
            buckets[c].extend(int(x) for x in members[start:start + k])
            start += k
    return [Shard(c, sorted(b)) for c, b in enumerate(buckets)]


def world_to_json(world, spec, path):
    payload = {
        "spec": spec.to_dict(),
        "hash": world.content_hash(),
        "arrays": {name: getattr(world, name).tolist() for name in
                   ("class_means", "mix_img", "mix_txt", "ids", "latents", "img", "txt", "labels")},
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def world_from_json(path):
    with open(path) as fh:
        payload = json.load(fh)
    a = payload["arrays"]
    world = World(
        np.array(a["class_means"]), np.array(a["mix_img"]), np.array(a["mix_txt"]),
        np.array(a["ids"], dtype=np.int64), np.array(a["latents"]), np.array(a["img"]),
        np.array(a["txt"]), np.array(a["labels"], dtype=np.int64),
    )
    if world.content_hash() != payload["hash"]:
        raise ConfigurationError(f"world file {path} does not match its stored hash")
    return world
