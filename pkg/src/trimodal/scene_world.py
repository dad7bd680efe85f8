"""Procedural scene world: coloured glyphs on a grid, with captions and QA.

Scenes are the only image source. Every scene is derivable from its seed, so
datasets can reference scenes by id and re-render pixels on demand.
"""

from __future__ import annotations

import json
import os
import random
from dataclasses import dataclass

import numpy as np

GRID = 4
CELL_PX = 8
IMAGE_PX = GRID * CELL_PX

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue", "yellow")
_RGB = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
}

MIN_OBJECTS = 1
MAX_OBJECTS = 4


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    cell: tuple[int, int]


@dataclass(frozen=True)
class SceneSpec:
    objects: tuple[SceneObject, ...]
    seed: int
    grid: tuple[int, int] = (GRID, GRID)

    def __post_init__(self):
        if not MIN_OBJECTS <= len(self.objects) <= MAX_OBJECTS:
            raise ValueError(f"scene must hold {MIN_OBJECTS}..{MAX_OBJECTS} objects")
        cells = [o.cell for o in self.objects]
        if len(set(cells)) != len(cells):
            raise ValueError("objects share a grid cell")
        rows, cols = self.grid
        for o in self.objects:
            if o.shape not in SHAPES:
                raise ValueError(f"unknown shape {o.shape!r}")
            if o.color not in COLORS:
                raise ValueError(f"unknown color {o.color!r}")
            r, c = o.cell
            if not (0 <= r < rows and 0 <= c < cols):
                raise ValueError(f"cell {o.cell} outside the {rows}x{cols} grid")


def sample_scene(seed: int) -> SceneSpec:
    rng = random.Random(seed)
    n = rng.randint(MIN_OBJECTS, MAX_OBJECTS)
    flat_cells = rng.sample(range(GRID * GRID), n)
    objects = tuple(
        SceneObject(
            shape=rng.choice(SHAPES),
            color=rng.choice(COLORS),
            cell=divmod(flat, GRID),
        )
        for flat in flat_cells
    )
    return SceneSpec(objects=objects, seed=seed)


def _glyph_mask(shape: str) -> np.ndarray:
    y, x = np.mgrid[0:CELL_PX, 0:CELL_PX]
    if shape == "square":
        return (y >= 1) & (y <= 6) & (x >= 1) & (x <= 6)
    if shape == "circle":
        return (y - 3.5) ** 2 + (x - 3.5) ** 2 <= 9.5
    if shape == "triangle":
        return (y >= 1) & (y <= 6) & (np.abs(x - 3.5) <= 0.5 * y)
    raise ValueError(f"unknown shape {shape!r}")


def render(spec: SceneSpec) -> np.ndarray:
    """White background, one filled glyph per occupied cell. float32 in [0, 1]."""
    img = np.ones((IMAGE_PX, IMAGE_PX, 3), dtype=np.float32)
    for obj in spec.objects:
        r, c = obj.cell
        mask = _glyph_mask(obj.shape)
        cell = img[r * CELL_PX : (r + 1) * CELL_PX, c * CELL_PX : (c + 1) * CELL_PX]
        cell[mask] = np.array(_RGB[obj.color], dtype=np.float32)
    return img


def row_major(spec: SceneSpec) -> list[SceneObject]:
    return sorted(spec.objects, key=lambda o: o.cell)


def caption(spec: SceneSpec) -> str:
    return " and ".join(f"a {o.color} {o.shape}" for o in row_major(spec))


def ground_truth(spec: SceneSpec) -> dict:
    """Captions plus QA pairs: counting, color-of-unique-shape, existence."""
    qa: list[tuple[str, str]] = []
    qa.append(("how many objects are there?", str(len(spec.objects))))

    by_shape: dict[str, list[SceneObject]] = {}
    for o in spec.objects:
        by_shape.setdefault(o.shape, []).append(o)
    for shape in SHAPES:
        # Color questions only make sense when the referent is unambiguous.
        if len(by_shape.get(shape, [])) == 1:
            qa.append((f"what color is the {shape}?", by_shape[shape][0].color))

    present = {(o.color, o.shape) for o in spec.objects}
    for color in COLORS:
        for shape in SHAPES:
            ans = "yes" if (color, shape) in present else "no"
            qa.append((f"is there a {color} {shape}?", ans))

    return {"captions": [caption(spec)], "qa": qa}


def closed_answers() -> set[str]:
    return set(COLORS) | {str(n) for n in range(MIN_OBJECTS, MAX_OBJECTS + 1)} | {"yes", "no"}


def queried_cell(spec: SceneSpec, question: str) -> tuple[int, int] | None:
    """Grid cell of the object a color question asks about, if unambiguous."""
    for shape in SHAPES:
        if question == f"what color is the {shape}?":
            matches = [o for o in spec.objects if o.shape == shape]
            if len(matches) == 1:
                return matches[0].cell
    return None


def spec_to_dict(spec: SceneSpec) -> dict:
    return {
        "seed": spec.seed,
        "grid": list(spec.grid),
        "objects": [
            {"shape": o.shape, "color": o.color, "cell": list(o.cell)} for o in spec.objects
        ],
    }


def spec_from_dict(d: dict) -> SceneSpec:
    return SceneSpec(
        objects=tuple(
            SceneObject(shape=o["shape"], color=o["color"], cell=tuple(o["cell"]))
            for o in d["objects"]
        ),
        seed=d["seed"],
        grid=tuple(d["grid"]),
    )


def save_scene_store(specs: list[SceneSpec], out_dir: str) -> None:
    """JSON specs plus one flat binary pixel file, row order matching."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "scenes.jsonl"), "w", encoding="utf-8") as f:
        for i, spec in enumerate(specs):
            row = {"id": i}
            row.update(spec_to_dict(spec))
            f.write(json.dumps(row, sort_keys=True) + "\n")
    pixels = np.stack([render(s) for s in specs]) if specs else np.zeros((0, IMAGE_PX, IMAGE_PX, 3), np.float32)
    pixels.astype(np.float32).tofile(os.path.join(out_dir, "scenes.f32"))


def load_scene_store(out_dir: str) -> tuple[list[SceneSpec], np.ndarray]:
    specs = []
    with open(os.path.join(out_dir, "scenes.jsonl"), encoding="utf-8") as f:
        for line in f:
            if line.strip():
                specs.append(spec_from_dict(json.loads(line)))
    pixels = np.fromfile(os.path.join(out_dir, "scenes.f32"), dtype=np.float32)
    pixels = pixels.reshape(len(specs), IMAGE_PX, IMAGE_PX, 3)
    return specs, pixels
