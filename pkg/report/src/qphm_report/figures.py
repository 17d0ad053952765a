"""Render sweep and benchmark outputs into static figures.

Consumes the CSV/JSON files the solver CLI writes (summary, storage,
residual histories, far-field grids, assembly records) and emits PNGs:
storage scaling with fitted slopes, per-level storage, residual curves,
iteration and time histograms, and far-field maps with a principal cut.

Schema problems are reported per file and the affected figure is skipped;
a partial bundle yields a partial figure set.
"""

import argparse
import csv
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt   # noqa: E402
import numpy as np                # noqa: E402

SUMMARY_HEADER = ["codebook_id", "n_active", "iters", "relres", "converged",
                  "assemble_ms", "factorize_ms", "solve_ms", "peak_bytes"]
STORAGE_HEADER = ["level", "classical_blocks", "distinct_patterns", "reuses",
                  "lowrank_scalars", "dense_scalars", "max_rank",
                  "first_walk_reuses"]
RESIDUAL_HEADER = ["iter", "relres"]
FARFIELD_HEADER = ["az", "el", "re", "im", "dB"]

FIG_DPI = 110


class SchemaError(ValueError):
    pass


def read_csv(path, header):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != header:
        raise SchemaError(f"{path}: expected header {','.join(header)}")
    return rows[1:]


@dataclass
class ReportBundle:
    summary: Path = None
    storage: Path = None
    scaling: Path = None
    residuals: list = field(default_factory=list)
    farfields: list = field(default_factory=list)
    solve_summaries: list = field(default_factory=list)
    assemblies: list = field(default_factory=list)

    @classmethod
    def discover(cls, root):
        """Build from a bundle directory, honoring bundle.json when present."""
        root = Path(root)
        manifest = root / "bundle.json"
        if manifest.exists():
            doc = json.loads(manifest.read_text())
            bundle = cls(
                summary=_opt(doc.get("summary")),
                storage=_opt(doc.get("storage")),
                residuals=[Path(p) for p in doc.get("residuals", [])],
                farfields=[Path(p) for p in doc.get("farfields", [])],
                solve_summaries=[Path(p) for p in doc.get("solve_summaries", [])],
                assemblies=[Path(p) for p in doc.get("assemblies", [])],
            )
        else:
            bundle = cls(
                summary=_opt(root / "summary.csv"),
                storage=_opt(root / "storage.csv"),
                residuals=sorted(root.glob("solves/*/residuals.csv")),
                farfields=sorted(root.glob("solves/*/farfield.csv")),
                solve_summaries=sorted(root.glob("solves/*/summary.json")),
                assemblies=sorted(root.glob("**/assembly.json")),
            )
        scaling = root / "storage_scaling.csv"
        bundle.scaling = scaling if scaling.exists() else None
        return bundle


def _opt(path):
    if path is None:
        return None
    path = Path(path)
    return path if path.exists() else None


def _save(fig, path):
    fig.savefig(path, dpi=FIG_DPI, metadata={"Software": None})
    plt.close(fig)
    return path


def fitted_slope(ns, ys):
    return float(np.polyfit(np.log(ns), np.log(ys), 1)[0])


def scaling_points(bundle, errors):
    """(N, virtual, classical) triples from the scaling CSV or assembly records."""
    points = []
    if bundle.scaling is not None:
        try:
            for row in read_csv(bundle.scaling, ["N", "virtual_scalars",
                                                 "classical_scalars"]):
                points.append((float(row[0]), float(row[1]), float(row[2])))
        except SchemaError as exc:
            errors.append(str(exc))
    else:
        for path in bundle.assemblies:
            try:
                tot = json.loads(Path(path).read_text())["totals"]
                points.append((tot["N"],
                               tot["lowrank_scalars"] + tot["dense_scalars"],
                               tot["classical_lowrank_scalars"]
                               + tot["classical_dense_scalars"]))
            except (KeyError, json.JSONDecodeError) as exc:
                errors.append(f"{path}: {exc}")
    return sorted(set(points))


def fig_scaling(points, out_dir):
    ns = np.array([p[0] for p in points])
    virt = np.array([p[1] for p in points])
    clas = np.array([p[2] for p in points])
    sv, sc = fitted_slope(ns, virt), fitted_slope(ns, clas)
    fig, ax = plt.subplots(figsize=(5.0, 3.8))
    ax.loglog(ns, clas, "s-", label=f"separate blocks (slope {sc:.2f})")
    ax.loglog(ns, virt, "o-", label=f"shared patterns (slope {sv:.2f})")
    ax.set_xlabel("unknowns N")
    ax.set_ylabel("stored scalars")
    ax.set_title("assembly storage vs problem size")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    return _save(fig, out_dir / "storage_scaling.png"), {"virtual_slope": sv,
                                                         "classical_slope": sc}


def fig_storage_levels(storage_path, out_dir, errors):
    try:
        rows = read_csv(storage_path, STORAGE_HEADER)
    except SchemaError as exc:
        errors.append(str(exc))
        return None
    levels = [int(r[0]) for r in rows]
    shared = [int(r[4]) + int(r[5]) for r in rows]
    separate = [int(r[1]) / max(int(r[2]), 1) * s
                for r, s in zip(rows, shared)]
    fig, ax = plt.subplots(figsize=(5.0, 3.8))
    ax.semilogy(levels, separate, "s-", label="all blocks priced separately")
    ax.semilogy(levels, shared, "o-", label="stored once per pattern")
    ax.set_xlabel("block-tree level")
    ax.set_ylabel("scalars")
    ax.set_title("per-level storage")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    return _save(fig, out_dir / "storage_levels.png")


def fig_residuals(residual_paths, out_dir, errors):
    curves = []
    for path in residual_paths:
        try:
            rows = read_csv(path, RESIDUAL_HEADER)
        except SchemaError as exc:
            errors.append(str(exc))
            continue
        if not rows:
            errors.append(f"{path}: empty residual history, skipped")
            continue
        curves.append((Path(path).parent.name,
                       [int(r[0]) for r in rows], [float(r[1]) for r in rows]))
    if not curves:
        return None
    fig, ax = plt.subplots(figsize=(5.0, 3.8))
    for name, its, res in curves:
        ax.semilogy(its, res, lw=1.0, label=name if len(curves) <= 8 else None)
    ax.set_xlabel("iteration")
    ax.set_ylabel("relative residual")
    ax.set_title("iterative convergence")
    ax.grid(True, which="both", alpha=0.3)
    if len(curves) <= 8:
        ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, out_dir / "residuals.png")


def fig_histograms(summary_path, out_dir, errors):
    try:
        rows = read_csv(summary_path, SUMMARY_HEADER)
    except SchemaError as exc:
        errors.append(str(exc))
        return []
    if not rows:
        errors.append(f"{summary_path}: no solve rows")
        return []
    iters = [int(r[2]) for r in rows]
    solve_ms = [float(r[7]) for r in rows]
    written = []
    for values, label, fname in ((iters, "iterations to tolerance",
                                  "iterations_hist.png"),
                                 (solve_ms, "solve time [ms]",
                                  "time_hist.png")):
        fig, ax = plt.subplots(figsize=(5.0, 3.8))
        ax.hist(values, bins=min(15, max(3, len(set(values)))),
                edgecolor="black", alpha=0.8)
        ax.set_xlabel(label)
        ax.set_ylabel("codebooks")
        ax.set_title(f"distribution over {len(values)} codebooks")
        ax.grid(True, axis="y", alpha=0.3)
        fig.tight_layout()
        written.append(_save(fig, out_dir / fname))
    return written


def load_farfield(path):
    rows = read_csv(path, FARFIELD_HEADER)
    az = sorted({float(r[0]) for r in rows})
    el = sorted({float(r[1]) for r in rows})
    db = np.full((len(az), len(el)), np.nan)
    ai = {v: k for k, v in enumerate(az)}
    ei = {v: k for k, v in enumerate(el)}
    for r in rows:
        db[ai[float(r[0])], ei[float(r[1])]] = float(r[4])
    if np.any(np.isnan(db)):
        raise SchemaError(f"{path}: incomplete az/el grid")
    return np.array(az), np.array(el), db


def fig_farfield(path, main_lobe, out_dir, errors):
    try:
        az, el, db = load_farfield(path)
    except SchemaError as exc:
        errors.append(str(exc))
        return None, None
    name = Path(path).parent.name
    fig, (ax_map, ax_cut) = plt.subplots(1, 2, figsize=(9.0, 3.6))
    mesh = ax_map.pcolormesh(az, el, db.T, shading="nearest", cmap="viridis")
    fig.colorbar(mesh, ax=ax_map, label="dB")
    ax_map.set_xlabel("azimuth [deg]")
    ax_map.set_ylabel("elevation [deg]")
    ax_map.set_title(f"{name}: radiated field")

    cut_el = 0.0
    if main_lobe is not None:
        cut_el = float(main_lobe["elevation"])
    e_idx = int(np.argmin(np.abs(el - cut_el)))
    cut = db[:, e_idx]
    ax_cut.plot(az, cut, lw=1.2)
    peak_az = float(az[int(np.argmax(cut))])
    label = f"peak {peak_az:.0f} deg"
    crosscheck = None
    if main_lobe is not None:
        ax_cut.axvline(main_lobe["azimuth"], color="crimson", ls="--", lw=1.0,
                       label=f"recorded lobe {main_lobe['azimuth']:.0f} deg")
        crosscheck = {"cut_peak_az": peak_az,
                      "recorded_az": float(main_lobe["azimuth"]),
                      "agrees": abs(peak_az - main_lobe["azimuth"]) < 1e-9}
        if not crosscheck["agrees"]:
            errors.append(f"{path}: cut peak {peak_az} deg differs from "
                          f"recorded lobe {main_lobe['azimuth']} deg")
    ax_cut.set_xlabel("azimuth [deg]")
    ax_cut.set_ylabel("dB")
    ax_cut.set_title(f"cut at el = {el[e_idx]:.0f} deg ({label})")
    ax_cut.grid(True, alpha=0.3)
    ax_cut.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, out_dir / f"farfield_{name}.png"), crosscheck


def make_figures(bundle, out_dir):
    """Render every figure the bundle supports; returns the manifest dict."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    errors = []
    written = []
    slopes = None

    points = scaling_points(bundle, errors)
    if len(points) >= 2:
        path, slopes = fig_scaling(points, out_dir)
        written.append(path)
    elif bundle.scaling or bundle.assemblies:
        errors.append("storage scaling needs at least two problem sizes; skipped")

    if bundle.storage is not None:
        path = fig_storage_levels(bundle.storage, out_dir, errors)
        if path:
            written.append(path)

    if bundle.residuals:
        path = fig_residuals(bundle.residuals, out_dir, errors)
        if path:
            written.append(path)

    if bundle.summary is not None:
        written.extend(fig_histograms(bundle.summary, out_dir, errors))

    lobes = {}
    for spath in bundle.solve_summaries:
        try:
            doc = json.loads(Path(spath).read_text())
            lobes[Path(spath).parent.name] = doc.get("main_lobe")
        except json.JSONDecodeError as exc:
            errors.append(f"{spath}: {exc}")
    crosschecks = {}
    for fpath in bundle.farfields:
        name = Path(fpath).parent.name
        path, check = fig_farfield(fpath, lobes.get(name), out_dir, errors)
        if path:
            written.append(path)
        if check is not None:
            crosschecks[name] = check

    manifest = {
        "figures": [str(p) for p in written],
        "errors": errors,
        "slopes": slopes,
        "farfield_crosschecks": crosschecks,
    }
    (out_dir / "figures.json").write_text(json.dumps(manifest, indent=1))
    return manifest


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="qphm-report",
        description="Render solver sweep outputs into static figures")
    parser.add_argument("--bundle", required=True, help="sweep output directory")
    parser.add_argument("--out", required=True, help="figure output directory")
    args = parser.parse_args(argv)
    bundle = ReportBundle.discover(args.bundle)
    manifest = make_figures(bundle, args.out)
    for err in manifest["errors"]:
        print(f"warning: {err}", file=sys.stderr)
    print(f"wrote {len(manifest['figures'])} figures to {args.out}")
    if not manifest["figures"]:
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
