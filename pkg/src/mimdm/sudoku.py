"""Sudoku boards: generation, hole punching, validation and line format.

Boards are flat row-major integer vectors of length ``b**4`` with digits
``1..b*b`` and ``0`` for an empty cell.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np


class PuzzleFormatError(ValueError):
    def __init__(self, message: str, line_no: int | None = None):
        self.line_no = line_no
        prefix = f"line {line_no}: " if line_no is not None else ""
        super().__init__(prefix + message)


@dataclass(frozen=True)
class Board:
    box_size: int
    cells: np.ndarray

    def __post_init__(self):
        cells = np.asarray(self.cells, dtype=np.int64).reshape(-1)
        b = self.box_size
        if b not in (2, 3):
            raise ValueError(f"box size must be 2 or 3, got {b}")
        if cells.size != b**4:
            raise ValueError(f"board needs {b**4} cells, got {cells.size}")
        if cells.min() < 0 or cells.max() > b * b:
            raise ValueError("cell digit out of range")
        cells.setflags(write=False)
        object.__setattr__(self, "cells", cells)

    @property
    def side(self) -> int:
        return self.box_size**2

    @property
    def n_cells(self) -> int:
        return self.box_size**4

    def grid(self) -> np.ndarray:
        return self.cells.reshape(self.side, self.side)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Board)
            and self.box_size == other.box_size
            and np.array_equal(self.cells, other.cells)
        )

    def __hash__(self) -> int:
        return hash((self.box_size, self.cells.tobytes()))


@dataclass(frozen=True)
class PuzzleRecord:
    clues: Board
    solution: Board

    @property
    def box_size(self) -> int:
        return self.solution.box_size

    @property
    def holes(self) -> np.ndarray:
        return np.flatnonzero(self.clues.cells == 0)

    def content_hash(self) -> str:
        return hashlib.sha256(format_puzzle_line(self).encode()).hexdigest()


def unit_groups(box_size: int) -> list[np.ndarray]:
    """Cell index arrays for every row, column and box."""
    b = box_size
    s = b * b
    idx = np.arange(s * s).reshape(s, s)
    groups = [idx[r] for r in range(s)] + [idx[:, c] for c in range(s)]
    for br in range(b):
        for bc in range(b):
            groups.append(idx[br * b:(br + 1) * b, bc * b:(bc + 1) * b].reshape(-1))
    return groups


def peers(box_size: int) -> list[set[int]]:
    """For each cell, the set of other cells sharing a row, column or box."""
    out: list[set[int]] = [set() for _ in range(box_size**4)]
    for g in unit_groups(box_size):
        for i in g:
            out[int(i)].update(int(j) for j in g if j != i)
    return out


def generate_complete_grid(box_size: int, seed: int) -> Board:
    """Random valid complete grid via randomized backtracking."""
    if box_size not in (2, 3):
        raise ValueError(f"box size must be 2 or 3, got {box_size}")
    rng = np.random.default_rng(seed)
    s = box_size**2
    n = s * s
    nbrs = [sorted(p) for p in peers(box_size)]
    cells = np.zeros(n, dtype=np.int64)
    options: list[list[int]] = [[] for _ in range(n)]
    pos = 0
    fresh = True
    while pos < n:
        if fresh:
            used = {int(cells[j]) for j in nbrs[pos]}
            opts = [d for d in range(1, s + 1) if d not in used]
            rng.shuffle(opts)
            options[pos] = opts
        if options[pos]:
            cells[pos] = options[pos].pop()
            pos += 1
            fresh = True
        else:
            cells[pos] = 0
            pos -= 1
            fresh = False
    return Board(box_size, cells)


def punch_holes(board: Board, n_holes: int, seed: int) -> PuzzleRecord:
    """Zero ``n_holes`` cells chosen uniformly without replacement."""
    n = board.n_cells
    if not 0 <= n_holes <= n:
        raise ValueError(f"n_holes must be in [0, {n}], got {n_holes}")
    rng = np.random.default_rng(seed)
    holes = rng.choice(n, size=n_holes, replace=False)
    clues = board.cells.copy()
    clues[holes] = 0
    return PuzzleRecord(Board(board.box_size, clues), board)


def is_valid_complete(board: Board) -> bool:
    cells = board.cells
    if np.any(cells == 0):
        return False
    want = np.arange(1, board.side + 1)
    return all(np.array_equal(np.sort(cells[g]), want) for g in unit_groups(board.box_size))


def check_solution(puzzle: PuzzleRecord, candidate: Board) -> bool:
    """True iff ``candidate`` is a complete valid grid agreeing with every clue."""
    if candidate.box_size != puzzle.box_size:
        raise ValueError("candidate and puzzle box sizes differ")
    given = puzzle.clues.cells != 0
    if not np.array_equal(candidate.cells[given], puzzle.clues.cells[given]):
        return False
    return is_valid_complete(candidate)


_BOX_FOR_LEN = {16: 2, 81: 3}


def format_puzzle_line(record: PuzzleRecord) -> str:
    return "".join(map(str, record.clues.cells)) + "," + "".join(map(str, record.solution.cells))


def parse_puzzle_line(text: str, line_no: int | None = None) -> PuzzleRecord:
    parts = text.strip().split(",")
    if len(parts) != 2:
        raise PuzzleFormatError("expected '<clues>,<solution>'", line_no)
    clue_s, sol_s = parts
    if len(clue_s) != len(sol_s) or len(clue_s) not in _BOX_FOR_LEN:
        raise PuzzleFormatError(
            f"bad lengths {len(clue_s)}/{len(sol_s)}; need 16 or 81 characters each", line_no
        )
    b = _BOX_FOR_LEN[len(clue_s)]
    top = b * b
    try:
        clues = np.array([int(c) for c in clue_s])
        sol = np.array([int(c) for c in sol_s])
    except ValueError:
        raise PuzzleFormatError("non-digit character", line_no) from None
    if clues.max() > top or sol.max() > top:
        raise PuzzleFormatError(f"digit above {top}", line_no)
    if sol.min() < 1:
        raise PuzzleFormatError("solution contains an empty cell", line_no)
    given = clues != 0
    if not np.array_equal(clues[given], sol[given]):
        raise PuzzleFormatError("clue disagrees with solution", line_no)
    return PuzzleRecord(Board(b, clues), Board(b, sol))


def iter_puzzle_lines(lines: Iterable[str]) -> Iterator[PuzzleRecord]:
    for no, line in enumerate(lines, start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        yield parse_puzzle_line(s, no)


def read_puzzles(path) -> list[PuzzleRecord]:
    with open(path, encoding="utf-8") as fh:
        return list(iter_puzzle_lines(fh))


def write_puzzles(path, records: Iterable[PuzzleRecord], header: str | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if header:
            for line in header.splitlines():
                fh.write(f"# {line}\n")
        for r in records:
            fh.write(format_puzzle_line(r) + "\n")
