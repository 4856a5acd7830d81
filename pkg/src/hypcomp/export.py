"""Design output files.

A design is stored as one JSON document with sorted keys and shortest
round-trip float formatting, so loading and re-exporting a file
reproduces it byte for byte.  The spatial gains are additionally exported
as CSV tables (one row per grid node).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import Grid
from .simulator import Gains

__all__ = ["FORMAT", "DesignOutput", "DesignFileError", "write_gain_csv"]

FORMAT = "hypcomp-design/1"


class DesignFileError(ValueError):
    """Unreadable or inconsistent design output file."""


def _clean(obj):
    """Convert numpy containers and non-finite floats to JSON-safe values."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


@dataclass
class DesignOutput:
    """Serializable design result.

    Attributes
    ----------
    N : int
        Grid cell count the gains are sampled on.
    gains : dict
        ``K``, ``K_xi``, ``K_x`` (N+1, p, n), ``L_xi``, ``L`` (N+1, n, p)
        and ``Gamma0`` (the matrix ``E1^T Gamma(0)``), all as arrays.
    diagnostics : dict
        Residuals, condition numbers and eigenvalue reports.
    provenance : dict
        Configuration hash, grid size, tolerances and seed.
    """

    N: int
    gains: dict
    diagnostics: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    _KEYS = ("K", "K_xi", "K_x", "L_xi", "L", "Gamma0")

    @classmethod
    def from_design(cls, design, config_hash: str = "") -> "DesignOutput":
        g = design.gains
        params = design.params
        gains = {k: np.array(getattr(g, k), dtype=float) for k in cls._KEYS}
        prov = {
            "config_hash": config_hash,
            "N": design.grid.N,
            "tol": params.tol,
            "max_iter": params.max_iter,
            "seed": design.diagnostics.get("seed", params.seed),
        }
        return cls(design.grid.N, gains, _clean(design.diagnostics), _clean(prov))

    @property
    def grid(self) -> Grid:
        return Grid(self.N)

    def to_json(self) -> str:
        doc = {
            "format": FORMAT,
            "N": self.N,
            "gains": _clean(self.gains),
            "diagnostics": _clean(self.diagnostics),
            "provenance": _clean(self.provenance),
        }
        return json.dumps(doc, sort_keys=True, indent=1, allow_nan=False) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DesignOutput":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise DesignFileError(f"not a design file: {exc}") from exc
        if not isinstance(doc, dict) or doc.get("format") != FORMAT:
            raise DesignFileError(f"unknown design format (expected {FORMAT!r})")
        try:
            N = int(doc["N"])
            gains = {k: np.array(doc["gains"][k], dtype=float) for k in cls._KEYS}
        except (KeyError, TypeError, ValueError) as exc:
            raise DesignFileError(f"incomplete design file: {exc}") from exc
        for k in ("K_x", "L"):
            if gains[k].ndim != 3 or gains[k].shape[0] != N + 1:
                raise DesignFileError(f"gain {k} does not match N = {N}")
        return cls(N, gains, doc.get("diagnostics", {}), doc.get("provenance", {}))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "DesignOutput":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise DesignFileError(f"cannot read {path}: {exc}") from exc
        return cls.from_json(text)

    def simulation_gains(self) -> Gains:
        g = self.gains
        return Gains(self.grid, g["K_xi"], g["K_x"], g["L_xi"], g["L"])

    def write_csvs(self, directory) -> list:
        """Write ``K_x.csv`` and ``L.csv`` into ``directory``; returns the paths."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        out = []
        for name in ("K_x", "L"):
            path = d / f"{name}.csv"
            write_gain_csv(path, self.grid, self.gains[name], name)
            out.append(path)
        return out


def write_gain_csv(path, grid: Grid, values, name: str) -> None:
    """Table with a ``z`` column and one column ``name[i,j]`` per entry (1-based)."""
    values = np.asarray(values)
    rows, cols = values.shape[1:]
    header = ["z"] + [f"{name}[{i + 1},{j + 1}]" for i in range(rows) for j in range(cols)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for z, v in zip(grid.z, values):
            w.writerow([repr(float(z))] + [repr(float(x)) for x in v.ravel()])
