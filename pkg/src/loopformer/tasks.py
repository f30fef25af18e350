"""Desk-scale reasoning tasks: mini sudoku and synthetic grid families, with
tokenization, augmentation, JSONL persistence, and pass@n evaluation.

Every generator is paired with an exact oracle: sudoku instances are verified
unique-solution by exhaustive backtracking, and each grid family's rule
function both produces the target and re-checks emitted instances.
"""

from __future__ import annotations

import json
import os
from collections import deque
from dataclasses import dataclass, field

import numpy as np

# token layout: colors 0-9, then row separator, end-of-grid, padding
NUM_COLORS = 10
SEP_TOKEN = 10
END_TOKEN = 11
PAD_TOKEN = 12
VOCAB_SIZE = 13

BORDER_COLOR = 4
FILL_COLOR = 9

GRID_FAMILIES = ("recolor-map", "mirror", "gravity", "largest-shape-fill", "border-draw")
SUDOKU_FAMILIES = ("sudoku4", "sudoku6")

# fixed color relabeling used by the recolor-map family (a 10-cycle derangement)
DEFAULT_RECOLOR = (3, 7, 0, 9, 1, 8, 2, 5, 6, 4)


class TokenizationError(ValueError):
    pass


class GenerationError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# tokenization


class Tokenizer:
    """Row-major cells with a separator after each row (end token after the
    last) and padding out to a fixed budget. Encoding is invertible."""

    def __init__(self, max_len: int):
        self.max_len = max_len

    @staticmethod
    def encoded_length(rows: int, cols: int) -> int:
        return rows * cols + rows

    def encode(self, grid: np.ndarray) -> np.ndarray:
        grid = np.asarray(grid)
        rows, cols = grid.shape
        need = self.encoded_length(rows, cols)
        if need > self.max_len:
            raise TokenizationError(f"grid {rows}x{cols} needs {need} tokens, budget {self.max_len}")
        if grid.min() < 0 or grid.max() >= NUM_COLORS:
            raise TokenizationError(f"cell values outside [0, {NUM_COLORS})")
        out = np.full(self.max_len, PAD_TOKEN, dtype=np.int64)
        i = 0
        for r in range(rows):
            out[i:i + cols] = grid[r]
            i += cols
            out[i] = END_TOKEN if r == rows - 1 else SEP_TOKEN
            i += 1
        return out

    def decode(self, tokens: np.ndarray) -> np.ndarray:
        tokens = np.asarray(tokens)
        rows, row = [], []
        for t in tokens:
            if t == PAD_TOKEN:
                break
            if t in (SEP_TOKEN, END_TOKEN):
                rows.append(row)
                row = []
                if t == END_TOKEN:
                    break
            else:
                row.append(int(t))
        if not rows or row or any(len(r) != len(rows[0]) for r in rows) or not rows[0]:
            raise TokenizationError("token stream is not a rectangular grid")
        return np.array(rows, dtype=np.int64)

    def cell_positions(self, shape) -> np.ndarray:
        """Indices of the cell slots for a grid of `shape` in the encoding."""
        rows, cols = shape
        return np.array([r * (cols + 1) + c for r in range(rows) for c in range(cols)])

    def decode_with_shape(self, tokens: np.ndarray, shape) -> np.ndarray:
        """Read cell slots for a known shape; non-color tokens become -1."""
        cells = np.asarray(tokens)[self.cell_positions(shape)]
        cells = np.where((cells >= 0) & (cells < NUM_COLORS), cells, -1)
        return cells.reshape(shape)


# ---------------------------------------------------------------------------
# instances


@dataclass
class PuzzleInstance:
    family: str
    family_id: int
    instance_id: int
    input_grid: np.ndarray
    target_grid: np.ndarray

    def puzzle_id(self, mode: str, vocab: int) -> int:
        if mode == "none":
            return 0
        if mode == "family":
            return self.family_id % vocab
        return self.instance_id % vocab

    def to_json(self) -> dict:
        return {
            "family": self.family,
            "family_id": self.family_id,
            "instance_id": self.instance_id,
            "input": self.input_grid.tolist(),
            "target": self.target_grid.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "PuzzleInstance":
        return cls(family=d["family"], family_id=d["family_id"], instance_id=d["instance_id"],
                   input_grid=np.array(d["input"], dtype=np.int64),
                   target_grid=np.array(d["target"], dtype=np.int64))


# ---------------------------------------------------------------------------
# mini sudoku


def _box_dims(side: int) -> tuple[int, int]:
    if side == 4:
        return 2, 2
    if side == 6:
        return 2, 3
    raise ValueError(f"unsupported sudoku side {side} (want 4 or 6)")


def _candidates_ok(grid, r, c, v, side, br, bc) -> bool:
    if v in grid[r] or v in grid[:, c]:
        return False
    r0, c0 = (r // br) * br, (c // bc) * bc
    return v not in grid[r0:r0 + br, c0:c0 + bc]


def _fill_grid(grid, side, br, bc, rng) -> bool:
    empties = np.argwhere(grid == 0)
    if len(empties) == 0:
        return True
    r, c = empties[0]
    values = rng.permutation(np.arange(1, side + 1))
    for v in values:
        if _candidates_ok(grid, r, c, int(v), side, br, bc):
            grid[r, c] = int(v)
            if _fill_grid(grid, side, br, bc, rng):
                return True
            grid[r, c] = 0
    return False


def count_sudoku_solutions(puzzle: np.ndarray, limit: int = 2) -> int:
    """Exhaustive backtracking solution counter (early exit at `limit`)."""
    side = puzzle.shape[0]
    br, bc = _box_dims(side)
    grid = puzzle.copy()

    def walk() -> int:
        empties = np.argwhere(grid == 0)
        if len(empties) == 0:
            return 1
        r, c = empties[0]
        found = 0
        for v in range(1, side + 1):
            if _candidates_ok(grid, r, c, v, side, br, bc):
                grid[r, c] = v
                found += walk()
                grid[r, c] = 0
                if found >= limit:
                    break
        return found

    return walk()


def solve_sudoku(puzzle: np.ndarray) -> np.ndarray | None:
    side = puzzle.shape[0]
    br, bc = _box_dims(side)
    grid = puzzle.copy()

    def walk() -> bool:
        empties = np.argwhere(grid == 0)
        if len(empties) == 0:
            return True
        r, c = empties[0]
        for v in range(1, side + 1):
            if _candidates_ok(grid, r, c, v, side, br, bc):
                grid[r, c] = v
                if walk():
                    return True
                grid[r, c] = 0
        return False

    return grid if walk() else None


def gen_mini_sudoku(side: int, holes: int, rng: np.random.Generator):
    """Sample a full grid, then blank cells while the puzzle stays uniquely
    solvable. Returns (puzzle, solution, achieved_holes); achieved_holes may
    fall short of the request when uniqueness cannot be kept."""
    br, bc = _box_dims(side)
    solution = np.zeros((side, side), dtype=np.int64)
    if not _fill_grid(solution, side, br, bc, rng):
        raise GenerationError("failed to fill sudoku grid")
    puzzle = solution.copy()
    achieved = 0
    order = rng.permutation(side * side)
    for flat in order:
        if achieved >= holes:
            break
        r, c = divmod(int(flat), side)
        saved = puzzle[r, c]
        puzzle[r, c] = 0
        if count_sudoku_solutions(puzzle, limit=2) == 1:
            achieved += 1
        else:
            puzzle[r, c] = saved
    return puzzle, solution, achieved


# ---------------------------------------------------------------------------
# synthetic grid families (the rule function is the oracle)


def rule_recolor_map(grid: np.ndarray, mapping=DEFAULT_RECOLOR) -> np.ndarray:
    return np.asarray(mapping, dtype=np.int64)[grid]


def rule_mirror(grid: np.ndarray) -> np.ndarray:
    return np.fliplr(grid).copy()


def rule_gravity(grid: np.ndarray) -> np.ndarray:
    """Nonzero cells fall to the bottom of each column, order preserved."""
    out = np.zeros_like(grid)
    for c in range(grid.shape[1]):
        stack = grid[:, c][grid[:, c] != 0]
        if len(stack):
            out[-len(stack):, c] = stack
    return out


def _components(grid: np.ndarray):
    """4-connected components of same-colored nonzero cells."""
    seen = np.zeros(grid.shape, dtype=bool)
    comps = []
    for r in range(grid.shape[0]):
        for c in range(grid.shape[1]):
            if grid[r, c] == 0 or seen[r, c]:
                continue
            color = grid[r, c]
            cells = []
            queue = deque([(r, c)])
            seen[r, c] = True
            while queue:
                y, x = queue.popleft()
                cells.append((y, x))
                for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                    ny, nx = y + dy, x + dx
                    if (0 <= ny < grid.shape[0] and 0 <= nx < grid.shape[1]
                            and not seen[ny, nx] and grid[ny, nx] == color):
                        seen[ny, nx] = True
                        queue.append((ny, nx))
            comps.append(cells)
    return comps


def rule_largest_shape_fill(grid: np.ndarray) -> np.ndarray:
    """Recolor the largest connected shape (ties: first in scan order)."""
    comps = _components(grid)
    out = grid.copy()
    if not comps:
        return out
    best = max(comps, key=lambda cells: (len(cells), (-cells[0][0], -cells[0][1])))
    for r, c in best:
        out[r, c] = FILL_COLOR
    return out


def rule_border_draw(grid: np.ndarray) -> np.ndarray:
    out = grid.copy()
    out[0, :] = BORDER_COLOR
    out[-1, :] = BORDER_COLOR
    out[:, 0] = BORDER_COLOR
    out[:, -1] = BORDER_COLOR
    return out


GRID_RULES = {
    "recolor-map": rule_recolor_map,
    "mirror": rule_mirror,
    "gravity": rule_gravity,
    "largest-shape-fill": rule_largest_shape_fill,
    "border-draw": rule_border_draw,
}


def gen_grid_task(family: str, size: int, rng: np.random.Generator):
    """Random input grid and its rule-computed target."""
    if family not in GRID_RULES:
        raise ValueError(f"unknown grid family {family!r} (want one of {GRID_FAMILIES})")
    if size > 10:
        raise ValueError("grid tasks support sizes up to 10")
    while True:
        grid = np.where(rng.random((size, size)) < 0.55, 0,
                        rng.integers(1, 9, size=(size, size))).astype(np.int64)
        if family != "largest-shape-fill" or (grid != 0).any():
            break
    return grid, GRID_RULES[family](grid)


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class Augmentation:
    """Dihedral element (0-3 rotations; 4-7 flip then rotations), color
    permutation, and an optional zero-margin translation. Exactly invertible."""

    dihedral: int = 0
    color_perm: tuple = tuple(range(NUM_COLORS))
    translate: tuple = (0, 0)

    def __post_init__(self):
        if sorted(self.color_perm) != list(range(NUM_COLORS)):
            raise ValueError("color_perm must be a permutation of 0..9")
        if not 0 <= self.dihedral < 8:
            raise ValueError("dihedral element must lie in 0..7")

    def _dihedral_apply(self, grid: np.ndarray, element: int) -> np.ndarray:
        g = np.fliplr(grid) if element >= 4 else grid
        return np.rot90(g, k=element % 4).copy()

    def _dihedral_invert(self, grid: np.ndarray, element: int) -> np.ndarray:
        g = np.rot90(grid, k=-(element % 4))
        return (np.fliplr(g) if element >= 4 else g).copy()

    def apply(self, grid: np.ndarray) -> np.ndarray:
        g = self._dihedral_apply(np.asarray(grid), self.dihedral)
        g = np.asarray(self.color_perm, dtype=np.int64)[g]
        dr, dc = self.translate
        if dr or dc:
            g = _shift(g, dr, dc)
        return g

    def invert(self, grid: np.ndarray) -> np.ndarray:
        g = np.asarray(grid)
        dr, dc = self.translate
        if dr or dc:
            g = _shift(g, -dr, -dc)
        inv_perm = np.argsort(np.asarray(self.color_perm))
        g = inv_perm[g]
        return self._dihedral_invert(g, self.dihedral)

    def shape_preserving(self, shape) -> bool:
        return shape[0] == shape[1] or self.dihedral % 2 == 0


def _shift(grid: np.ndarray, dr: int, dc: int) -> np.ndarray:
    """Translate content by (dr, dc); the cells shifted out must be zero."""
    out = np.zeros_like(grid)
    rows, cols = grid.shape
    src = grid[max(0, -dr):rows - max(0, dr), max(0, -dc):cols - max(0, dc)]
    out[max(0, dr):rows - max(0, -dr), max(0, dc):cols - max(0, -dc)] = src
    lost = grid.sum() - out.sum()
    if lost != 0:
        raise ValueError(f"translation ({dr},{dc}) pushes nonzero content off the grid")
    return out


def augment_instance(inst: PuzzleInstance, aug: Augmentation) -> PuzzleInstance:
    """Apply the same transform to input and target."""
    return PuzzleInstance(family=inst.family, family_id=inst.family_id,
                          instance_id=inst.instance_id,
                          input_grid=aug.apply(inst.input_grid),
                          target_grid=aug.apply(inst.target_grid))


def color_permutations(values, count: int, rng: np.random.Generator):
    """Permutations that shuffle `values` among themselves and fix the rest."""
    values = sorted(int(v) for v in values)
    perms = []
    for _ in range(count):
        shuffled = rng.permutation(values)
        perm = list(range(NUM_COLORS))
        for a, b in zip(values, shuffled):
            perm[a] = int(b)
        perms.append(tuple(perm))
    return perms


# ---------------------------------------------------------------------------
# dataset generation / persistence


@dataclass
class DataSpec:
    task: str = "sudoku4"
    train_count: int = 256
    eval_count: int = 64
    size: int = 6          # grid families only
    holes: int = 6         # sudoku only
    seed: int = 0

    def to_dict(self) -> dict:
        return {"task": self.task, "train_count": self.train_count,
                "eval_count": self.eval_count, "size": self.size,
                "holes": self.holes, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "DataSpec":
        known = {"task", "train_count", "eval_count", "size", "holes", "seed"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown data spec keys: {sorted(unknown)}")
        return cls(**d)


def _gen_instance(spec: DataSpec, instance_id: int, rng: np.random.Generator) -> PuzzleInstance:
    if spec.task in SUDOKU_FAMILIES:
        side = 4 if spec.task == "sudoku4" else 6
        puzzle, solution, achieved = gen_mini_sudoku(side, spec.holes, rng)
        if count_sudoku_solutions(puzzle, limit=2) != 1:
            raise GenerationError("generated sudoku is not uniquely solvable")
        if not np.array_equal(solve_sudoku(puzzle), solution):
            raise GenerationError("generated sudoku solution mismatch")
        return PuzzleInstance(family=spec.task, family_id=0, instance_id=instance_id,
                              input_grid=puzzle, target_grid=solution)
    grid, target = gen_grid_task(spec.task, spec.size, rng)
    if not np.array_equal(GRID_RULES[spec.task](grid), target):
        raise GenerationError("grid rule oracle mismatch")
    return PuzzleInstance(family=spec.task, family_id=0, instance_id=instance_id,
                          input_grid=grid, target_grid=target)


def generate_dataset(spec: DataSpec):
    """Deterministic (spec, seed) -> (train, eval) with disjoint instance ids."""
    rng = np.random.default_rng(spec.seed)
    train = [_gen_instance(spec, i, rng) for i in range(spec.train_count)]
    evals = [_gen_instance(spec, spec.train_count + i, rng) for i in range(spec.eval_count)]
    return train, evals


def write_dataset(out_dir: str, spec: DataSpec) -> dict:
    train, evals = generate_dataset(spec)
    os.makedirs(out_dir, exist_ok=True)
    for name, rows in (("train", train), ("eval", evals)):
        with open(os.path.join(out_dir, f"{name}.jsonl"), "w") as fh:
            for inst in rows:
                fh.write(json.dumps(inst.to_json(), sort_keys=True, separators=(",", ":")))
                fh.write("\n")
    manifest = {
        "format_version": 1,
        "spec": spec.to_dict(),
        "train_count": len(train),
        "eval_count": len(evals),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def load_dataset(path: str):
    def read(name):
        rows = []
        with open(os.path.join(path, f"{name}.jsonl")) as fh:
            for line in fh:
                rows.append(PuzzleInstance.from_json(json.loads(line)))
        return rows

    with open(os.path.join(path, "manifest.json")) as fh:
        manifest = json.load(fh)
    return read("train"), read("eval"), manifest


# ---------------------------------------------------------------------------
# evaluation


def evaluate_pass_n(model, instances, n: int, tokenizer: Tokenizer | None = None) -> dict:
    """Exact-match pass@1..n, cell accuracy of the top candidate, and mean
    halting steps. `model` must expose cfg and predict()."""
    tokenizer = tokenizer or Tokenizer(model.cfg.max_seq_len)
    hits = np.zeros(n, dtype=np.int64)
    cell_correct = cell_total = 0
    act_steps = []
    for inst in instances:
        pred = model.predict(inst, n, tokenizer=tokenizer)
        match = [np.array_equal(g, inst.target_grid) for g in pred.grids[:n]]
        for k in range(n):
            if any(match[:k + 1]):
                hits[k] += 1
        top = pred.grids[0]
        cell_correct += int((top == inst.target_grid).sum())
        cell_total += inst.target_grid.size
        act_steps.append(float(pred.steps_used.mean()))
    count = max(1, len(instances))
    return {
        "count": len(instances),
        **{f"pass@{k + 1}": float(hits[k] / count) for k in range(n)},
        "cell_accuracy": float(cell_correct / max(1, cell_total)),
        "mean_act_steps": float(np.mean(act_steps)) if act_steps else 0.0,
    }
