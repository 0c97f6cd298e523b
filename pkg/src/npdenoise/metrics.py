"""MSE and Chamfer distance, and dataset-level evaluation reports."""

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import spatial
from .errors import UsageError
from .geom import as_cloud

COLUMNS = ("mse_noisy", "mse_denoised", "cd_noisy", "cd_denoised")


def mse(a, b):
    a, b = as_cloud(a, "a"), as_cloud(b, "b")
    if a.shape != b.shape:
        raise UsageError(f"mse: clouds have {a.shape[0]} and {b.shape[0]} points")
    d = a - b
    return float((d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2]).mean())


def _nn_sqdist(src, dst, backend=None):
    index = spatial.build_grid(dst)
    _, d2 = spatial.knn_query(index, src, 1, backend=backend)
    return d2[:, 0]


def _combine(d_ab, d_ba, n):
    return float((np.sum(d_ab) + np.sum(d_ba)) / n)


def chamfer(a, b, backend=None):
    """Symmetric squared-distance Chamfer, both sums divided by ``len(a)``."""
    a, b = as_cloud(a, "a"), as_cloud(b, "b")
    return _combine(_nn_sqdist(a, b, backend), _nn_sqdist(b, a, backend), a.shape[0])


def chamfer_bruteforce(a, b):
    """All-pairs reference for :func:`chamfer`, same arithmetic."""
    a, b = as_cloud(a, "a"), as_cloud(b, "b")
    dx = a[:, None, 0] - b[None, :, 0]
    dy = a[:, None, 1] - b[None, :, 1]
    dz = a[:, None, 2] - b[None, :, 2]
    d2 = dx * dx + dy * dy + dz * dz
    return _combine(d2.min(axis=1), d2.min(axis=0), a.shape[0])


@dataclass
class EvalRow:
    id: str
    mse_noisy: float
    mse_denoised: float
    cd_noisy: float
    cd_denoised: float
    degenerate: int = 0


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    @property
    def aggregates(self):
        out = {}
        for col in COLUMNS:
            vals = np.array([getattr(r, col) for r in self.rows], dtype=np.float64)
            out[col] = {
                "mean": float(vals.mean()) if vals.size else float("nan"),
                "std": float(vals.std()) if vals.size else float("nan"),
            }
        return out

    def to_dict(self):
        return {"rows": [asdict(r) for r in self.rows], "aggregates": self.aggregates, "metadata": self.metadata}

    def write_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("id",) + COLUMNS)
            for r in self.rows:
                w.writerow([r.id] + [repr(getattr(r, c)) for c in COLUMNS])


def evaluate_clouds(items, params, config, metadata=None):
    """Denoise and score ``(id, clean, noisy)`` triples in the given order."""
    from .net import denoise_with_mask

    report = EvalReport(metadata=dict(metadata or {}))
    for cid, clean, noisy in items:
        den, _, bad = denoise_with_mask(noisy, params, config)
        report.rows.append(EvalRow(
            id=str(cid),
            mse_noisy=mse(noisy, clean),
            mse_denoised=mse(den, clean),
            cd_noisy=chamfer(noisy, clean),
            cd_denoised=chamfer(den, clean),
            degenerate=int(bad.sum()),
        ))
    return report


def evaluate(manifest, checkpoint, split="test"):
    """Score a checkpoint on a dataset manifest.

    ``manifest`` and ``checkpoint`` may be paths or loaded objects. Entries
    of ``split`` are used when the manifest has any, otherwise all entries.
    """
    from .data import DatasetManifest
    from .net import load_checkpoint_with_meta

    if not isinstance(manifest, DatasetManifest):
        manifest = DatasetManifest.load(manifest)
    if isinstance(checkpoint, (str, Path)):
        params, config, meta = load_checkpoint_with_meta(checkpoint)
        ckpt_id = meta.get("id", str(checkpoint))
    else:
        params, config = checkpoint
        ckpt_id = "<memory>"
    manifest.validate()
    items = [(e.id, manifest.load_clean(e), manifest.load_noisy(e)) for e in manifest.select(split)]
    return evaluate_clouds(items, params, config, {"checkpoint": ckpt_id, "dataset": manifest.dataset_id})
