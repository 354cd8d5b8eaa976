"""Synthetic mini scene dataset: sequential object additions on a grid.

Each episode starts from a flat background and adds one object per turn,
paired with a templated instruction whose positional references ("behind the
red cube", "... it") are guaranteed true in the cumulative scene graph.
Shapes are 2-D glyphs (square / disc / rounded column) in a fixed 8-color
palette; front/behind map to the vertical image axis with lower rows closer
to the viewer.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

SHAPES = ("cube", "sphere", "cylinder")
COLORS = ("gray", "red", "blue", "green", "brown", "purple", "cyan", "yellow")
N_CLASSES = len(SHAPES) * len(COLORS)

# CLEVR palette, 8-bit RGB.
PALETTE = {
    "gray": (87, 87, 87),
    "red": (173, 35, 35),
    "blue": (42, 75, 215),
    "green": (29, 105, 20),
    "brown": (129, 74, 25),
    "purple": (129, 38, 192),
    "cyan": (41, 208, 208),
    "yellow": (255, 238, 51),
}
BACKGROUND_RGB = (200, 200, 200)

RELATIONS = ("left-of", "right-of", "front-of", "behind")
REL_PHRASES = {
    "left-of": "to the left of",
    "right-of": "to the right of",
    "front-of": "in front of",
    "behind": "behind",
}

MAGIC = b"MICV"
FORMAT_VERSION = 1


class DatasetFormatError(ValueError):
    """Malformed or truncated dataset file."""


def class_id(shape, color):
    return SHAPES.index(shape) * len(COLORS) + COLORS.index(color)


def class_category(cid):
    return SHAPES[cid // len(COLORS)], COLORS[cid % len(COLORS)]


@dataclass(frozen=True)
class ObjectSpec:
    shape: str
    color: str
    row: int
    col: int

    @property
    def category(self):
        return (self.shape, self.color)

    @property
    def cell(self):
        return (self.row, self.col)


@dataclass
class Turn:
    instruction: str
    image: np.ndarray  # [3, S, S] float32 in (-1, 1)
    added: ObjectSpec
    objects: tuple  # cumulative ObjectSpec tuple


@dataclass
class Episode:
    background: np.ndarray
    turns: list

    def __eq__(self, other):
        if not isinstance(other, Episode):
            return NotImplemented
        if len(self.turns) != len(other.turns):
            return False
        if not np.array_equal(self.background, other.background):
            return False
        for a, b in zip(self.turns, other.turns):
            if a.instruction != b.instruction or a.added != b.added or a.objects != b.objects:
                return False
            if not np.array_equal(a.image, b.image):
                return False
        return True


def relations_between(cell_a, cell_b):
    """Directed relations of cell_a w.r.t. cell_b; lower rows are in front."""
    rels = []
    if cell_a[1] < cell_b[1]:
        rels.append("left-of")
    elif cell_a[1] > cell_b[1]:
        rels.append("right-of")
    if cell_a[0] > cell_b[0]:
        rels.append("front-of")
    elif cell_a[0] < cell_b[0]:
        rels.append("behind")
    return rels


def category_edges(objects):
    """All directed relation edges keyed by object category."""
    edges = set()
    for a in objects:
        for b in objects:
            if a is b:
                continue
            for rel in relations_between(a.cell, b.cell):
                edges.add((a.category, b.category, rel))
    return edges


# -- rendering ----------------------------------------------------------------


def _norm_rgb(rgb):
    return (np.asarray(rgb, dtype=np.float32) - 127.5) / 128.0


def cell_geometry(grid_size, image_size):
    """Uniform cell pixel size and the top-left offset centering the grid."""
    k = image_size // grid_size
    if k < 3:
        raise ValueError(f"image_size {image_size} too small for grid {grid_size}")
    offset = (image_size - grid_size * k) // 2
    return k, offset


def glyph_mask(shape, k):
    """Boolean [k, k] footprint of a shape inside its cell."""
    ii, jj = np.mgrid[0:k, 0:k].astype(np.float64)
    c = (k - 1) / 2.0
    if shape == "cube":
        return np.ones((k, k), dtype=bool)
    if shape == "sphere":
        r = k / 2.0 - 0.2
        return (ii - c) ** 2 + (jj - c) ** 2 <= r * r
    if shape == "cylinder":
        hw = k / 4.0
        body = (np.abs(jj - c) <= hw) & (ii >= k / 4.0)
        cap = (ii - k / 4.0) ** 2 + (jj - c) ** 2 <= hw * hw
        return body | cap
    raise ValueError(f"unknown shape {shape!r}")


def render(objects, grid_size, image_size):
    """Rasterize objects onto the flat background; [3, S, S] in (-1, 1)."""
    cells = [o.cell for o in objects]
    if len(set(cells)) != len(cells):
        raise ValueError("render: overlapping cells")
    k, off = cell_geometry(grid_size, image_size)
    img = np.empty((3, image_size, image_size), dtype=np.float32)
    img[:] = _norm_rgb(BACKGROUND_RGB)[:, None, None]
    for obj in objects:
        if not (0 <= obj.row < grid_size and 0 <= obj.col < grid_size):
            raise ValueError(f"render: cell {obj.cell} outside {grid_size}x{grid_size} grid")
        mask = glyph_mask(obj.shape, k)
        color = _norm_rgb(PALETTE[obj.color])
        r0 = off + obj.row * k
        c0 = off + obj.col * k
        patch = img[:, r0:r0 + k, c0:c0 + k]
        patch[:, mask] = color[:, None]
    return img


# -- episode generation --------------------------------------------------------


def _episode_rng(master_seed, index):
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), int(index)]))


def _instruction_for(new_obj, anchor, use_it, rels, rng):
    chosen = list(rels)
    if len(chosen) == 2:
        if rng.random() < 0.5:
            chosen = [chosen[int(rng.integers(2))]]
    phrase = " and ".join(REL_PHRASES[r] for r in chosen)
    target = "it" if use_it else f"the {anchor.color} {anchor.shape}"
    return f"add a {new_obj.color} {new_obj.shape} {phrase} {target}", chosen


def generate_episode(master_seed, index, grid_size=5, n_turns=5, image_size=32, p_it=0.3):
    """One deterministic episode; the RNG stream is derived from (seed, index)."""
    if grid_size < 3 or grid_size % 2 == 0:
        raise ValueError("grid_size must be odd and >= 3 so a center cell exists")
    if n_turns > grid_size * grid_size:
        raise ValueError("more turns than grid cells")
    rng = _episode_rng(master_seed, index)
    for _ in range(100):
        episode = _try_generate(rng, grid_size, n_turns, image_size, p_it)
        if episode is not None:
            return episode
    raise RuntimeError(f"no consistent placement after 100 attempts (seed {master_seed}, index {index})")


def _try_generate(rng, grid_size, n_turns, image_size, p_it):
    center = ((grid_size - 1) // 2, (grid_size - 1) // 2)
    all_cells = [(r, c) for r in range(grid_size) for c in range(grid_size)]
    free_cells = [c for c in all_cells if c != center]
    cats = [(s, c) for s in SHAPES for c in COLORS]
    cat_order = rng.permutation(len(cats))
    background = render([], grid_size, image_size)

    objects = []
    turns = []
    for t in range(n_turns):
        shape, color = cats[cat_order[t]]
        if t == 0:
            cell = center
            instruction = f"add a {color} {shape} at the center"
        else:
            pick = int(rng.integers(len(free_cells)))
            cell = free_cells.pop(pick)
            use_it = rng.random() < p_it
            anchor = objects[-1] if use_it else objects[int(rng.integers(len(objects)))]
            rels = relations_between(cell, anchor.cell)
            if not rels:
                return None  # duplicate cell; cannot happen, kept for the retry contract
            new_obj = ObjectSpec(shape, color, *cell)
            instruction, _ = _instruction_for(new_obj, anchor, use_it, rels, rng)
        obj = ObjectSpec(shape, color, *cell)
        objects.append(obj)
        turns.append(
            Turn(
                instruction=instruction,
                image=render(objects, grid_size, image_size),
                added=obj,
                objects=tuple(objects),
            )
        )
    return Episode(background=background, turns=turns)


def generate_dataset(master_seed, n_episodes, grid_size=5, n_turns=5, image_size=32, p_it=0.3, index_offset=0):
    return [
        generate_episode(master_seed, index_offset + i, grid_size, n_turns, image_size, p_it)
        for i in range(n_episodes)
    ]


# -- serialization --------------------------------------------------------------


def _write_image(f, img):
    f.write(img.astype("<f4").tobytes())


def _read_exact(f, n, what):
    buf = f.read(n)
    if len(buf) != n:
        raise DatasetFormatError(f"truncated file while reading {what}")
    return buf


def save_dataset(episodes, path, image_size=None, grid_size=None):
    if episodes:
        s = episodes[0].turns[0].image.shape[-1] if episodes[0].turns else episodes[0].background.shape[-1]
        image_size = image_size or s
    if image_size is None or grid_size is None:
        raise ValueError("image_size and grid_size required (cannot infer from empty episode list)")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<III", FORMAT_VERSION, image_size, grid_size))
        f.write(struct.pack("<Q", len(episodes)))
        for ep in episodes:
            _write_image(f, ep.background)
            f.write(struct.pack("<I", len(ep.turns)))
            for turn in ep.turns:
                enc = turn.instruction.encode("utf-8")
                f.write(struct.pack("<I", len(enc)))
                f.write(enc)
                _write_image(f, turn.image)
                f.write(struct.pack("<I", class_id(turn.added.shape, turn.added.color)))
                f.write(struct.pack("<B", len(turn.objects)))
                for obj in turn.objects:
                    f.write(
                        struct.pack(
                            "<BBBB", SHAPES.index(obj.shape), COLORS.index(obj.color), obj.row, obj.col
                        )
                    )


def load_dataset(path):
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != MAGIC:
            raise DatasetFormatError(f"bad magic {magic!r}; expected {MAGIC!r}")
        version, image_size, grid_size = struct.unpack("<III", _read_exact(f, 12, "header"))
        if version != FORMAT_VERSION:
            raise DatasetFormatError(f"unsupported format version {version}; expected {FORMAT_VERSION}")
        (n_episodes,) = struct.unpack("<Q", _read_exact(f, 8, "episode count"))
        img_bytes = 3 * image_size * image_size * 4

        def read_image():
            raw = _read_exact(f, img_bytes, "image payload")
            return np.frombuffer(raw, dtype="<f4").reshape(3, image_size, image_size).copy()

        episodes = []
        for _ in range(n_episodes):
            background = read_image()
            (n_turns,) = struct.unpack("<I", _read_exact(f, 4, "turn count"))
            turns = []
            for _ in range(n_turns):
                (ilen,) = struct.unpack("<I", _read_exact(f, 4, "instruction length"))
                instruction = _read_exact(f, ilen, "instruction").decode("utf-8")
                image = read_image()
                (cid,) = struct.unpack("<I", _read_exact(f, 4, "class id"))
                (n_obj,) = struct.unpack("<B", _read_exact(f, 1, "object count"))
                objs = []
                for _ in range(n_obj):
                    s_i, c_i, row, col = struct.unpack("<BBBB", _read_exact(f, 4, "object record"))
                    objs.append(ObjectSpec(SHAPES[s_i], COLORS[c_i], row, col))
                shape, color = class_category(cid)
                added = next(o for o in objs if o.shape == shape and o.color == color)
                turns.append(Turn(instruction=instruction, image=image, added=added, objects=tuple(objs)))
            episodes.append(Episode(background=background, turns=turns))
        trailing = f.read(1)
        if trailing:
            raise DatasetFormatError("trailing bytes after final episode")
    return episodes, {"image_size": image_size, "grid_size": grid_size}


def write_manifest(path, master_seed, splits, image_size, grid_size):
    with open(path, "w") as f:
        json.dump(
            {
                "master_seed": int(master_seed),
                "splits": {k: int(v) for k, v in splits.items()},
                "image_size": int(image_size),
                "grid_size": int(grid_size),
            },
            f,
            indent=2,
            sort_keys=True,
        )
        f.write("\n")
