"""On-disk explanation bundles: one directory per explained input.

Layout::

    original.pgm, cf_00.pgm, ...   8-bit previews, [-1, 1] mapped to [0, 255]
    arrays.npz                      exact float arrays (original, x_tilde, eps, masks, z)
    trajectory.csv                  one row per (step, explanation)
    summary.json                    validity flags, final losses, run settings
"""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .engine import PerturbationSet

IMG = 32
TRAJECTORY_FIELDS = ("kind", "step", "explanation_id", "f_value", "cf", "prox", "div", "total")


def to_bytes_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=float).reshape(IMG, IMG)
    return np.clip(np.rint((img + 1.0) * 127.5), 0, 255).astype(np.uint8)


def write_pgm(path: str | Path, img: np.ndarray) -> None:
    pixels = to_bytes_image(img)
    Path(path).write_bytes(f"P5\n{IMG} {IMG}\n255\n".encode("ascii") + pixels.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    """Pixel values mapped back to [-1, 1]."""
    blob = Path(path).read_bytes()
    parts = blob.split(maxsplit=4)
    if parts[0] != b"P5" or len(parts) < 5:
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    pixels = np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)
    return pixels.astype(float) / (maxval / 2.0) - 1.0


def _fmt(v: float) -> str:
    return repr(float(v))


def trajectory_rows(ps: PerturbationSet) -> list[list[str]]:
    rows = []
    for st in ps.trajectory:
        for i in range(len(st.f)):
            rows.append(["step", str(st.step), str(i), _fmt(st.f[i]), _fmt(st.terms["cf"][i]),
                         _fmt(st.terms["prox"][i]), _fmt(st.terms["div"]), _fmt(st.terms["total"])])
    for q, res in sorted(ps.interpolated.items()):
        for i, f in enumerate(res["f"]):
            rows.append([f"target={q!r}", "", str(i), _fmt(f), "", "", "", ""])
    return rows


def write_bundle(directory: str | Path, x: np.ndarray, ps: PerturbationSet, info: dict) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_pgm(d / "original.pgm", x)
    for i, img in enumerate(ps.x_tilde):
        write_pgm(d / f"cf_{i:02d}.pgm", img)
    with open(d / "arrays.npz", "wb") as fh:
        np.savez(fh, original=np.asarray(x, dtype=float).reshape(-1), x_tilde=ps.x_tilde, eps=ps.eps,
                 masks=ps.masks, z=ps.z)
    with open(d / "trajectory.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRAJECTORY_FIELDS)
        w.writerows(trajectory_rows(ps))
    last = ps.trajectory[-1]
    summary = {
        **info,
        "method": ps.method,
        "f_x": ps.f_x,
        "target": ps.target,
        "converged": ps.converged,
        "steps": last.step,
        "valid": [bool(v) for v in ps.valid],
        "final_f": [float(f) for f in last.f],
        "final_losses": {"cf": [float(v) for v in last.terms["cf"]], "prox": [float(v) for v in last.terms["prox"]],
                         "div": float(last.terms["div"]), "total": float(last.terms["total"])},
        "interpolated": {repr(q): [float(f) for f in res["f"]] for q, res in sorted(ps.interpolated.items())},
    }
    (d / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return d


def read_bundle(directory: str | Path) -> dict:
    d = Path(directory)
    with np.load(d / "arrays.npz") as z:
        arrays = {k: z[k] for k in z.files}
    return {"summary": json.loads((d / "summary.json").read_text()), **arrays}


def list_bundles(root: str | Path) -> list[Path]:
    return sorted(p.parent for p in Path(root).rglob("summary.json"))
