"""Batch front door: generate codebooks, assemble once, solve many, report.

The workflow is assembly-once by construction: `assemble` builds the shared
matrix and caches it; `solve` and `sweep` only load the cache, mask it per
codebook and iterate.  A sweep over any number of codebooks therefore
evaluates the kernel exactly as often as a single assembly.

Exit codes: 0 ok, 2 solver did not converge, 3 configuration error,
4 cache missing or mismatched.
"""

import argparse
import configparser
import hashlib
import json
import resource
import struct
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .clustering import HParams
from .geometry import (ArrayLayout, Codebook, InvalidParameterError,
                       MacroUnitTemplate, build_depth_coded_template,
                       build_split_grid_template, build_mask,
                       instantiate_array)
from .kernels import KernelSpec, default_self_term
from .krylov import bicgstab
from .masking import masked_operator, masked_rhs, plane_wave_rhs
from .patterns import assemble_virtual, rebuild_virtual
from .precond import extract_near_field, factorize
from .synthesis import BeamTarget, far_field, main_lobe, phase_gradient_codebook

EXIT_OK = 0
EXIT_NONCONVERGENCE = 2
EXIT_CONFIG = 3
EXIT_CACHE = 4

SUMMARY_HEADER = ("codebook_id,n_active,iters,relres,converged,"
                  "assemble_ms,factorize_ms,solve_ms,peak_bytes")

CACHE_MAGIC = b"QPHM"
CACHE_VERSION = 1


class ConfigError(Exception):
    pass


class CacheMismatchError(Exception):
    pass


class NonConvergence(Exception):
    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


@dataclass
class RunConfig:
    template: MacroUnitTemplate
    layout: ArrayLayout
    spec: KernelSpec
    params: HParams
    tol: float
    max_iter: int
    seed: int
    precond: str
    incident: BeamTarget
    polarization: complex
    target_azimuths: list
    target_elevations: list
    az_step: float
    el_step: float
    out_dir: Path
    codebook_dir: Path = None

    def __post_init__(self):
        if self.codebook_dir is None:
            self.codebook_dir = self.out_dir / "codebooks"

    def params_hash(self):
        doc = {
            "template": self.template.to_json_dict(),
            "layout": [self.layout.m, self.layout.n],
            "kernel": [self.spec.kind, self.spec.kappa,
                       self.spec.self_term.real, self.spec.self_term.imag],
            "hmatrix": [self.params.leafsize, self.params.eta,
                        self.params.aca_eps, self.params.aca_max_rank],
        }
        blob = json.dumps(doc, sort_keys=True).encode()
        return hashlib.sha256(blob).digest()


def _get(cp, section, key, default=None, required=False):
    if cp.has_option(section, key):
        val = cp.get(section, key).strip()
        if val:
            return val
    if required:
        raise ConfigError(f"missing config key [{section}] {key}")
    return default


def load_config(path, overrides=()):
    cp = configparser.ConfigParser()
    read = cp.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path}")
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        target, value = item.split("=", 1)
        section, key = target.split(".", 1)
        if not cp.has_section(section):
            cp.add_section(section)
        cp.set(section.strip(), key.strip(), value.strip())

    try:
        pitch = (float(_get(cp, "template", "pitch_x", "1.0")),
                 float(_get(cp, "template", "pitch_y", "1.0")))
        kind = _get(cp, "template", "kind", "split-grid")
        if kind == "file":
            tpl_path = Path(_get(cp, "template", "file", required=True))
            if not tpl_path.exists():
                raise ConfigError(f"template file {tpl_path} does not exist")
            template = MacroUnitTemplate.load(tpl_path)
        elif kind == "split-grid":
            template = build_split_grid_template(
                int(_get(cp, "template", "g", "4")), pitch,
                float(_get(cp, "template", "height", "0.0")))
        elif kind == "depth-coded":
            depths = []
            for c in range(64):
                raw = _get(cp, "template", f"depths{c}")
                if raw is None:
                    break
                depths.append(tuple(float(v) for v in raw.split(",")))
            if not depths:
                raise ConfigError("depth-coded template needs depths0, depths1, ...")
            template = build_depth_coded_template(
                pitch, depths, float(_get(cp, "template", "height", "0.0")))
        else:
            raise ConfigError(f"unknown template kind {kind!r}")

        layout = ArrayLayout(int(_get(cp, "layout", "m", required=True)),
                             int(_get(cp, "layout", "n", required=True)))

        kernel_kind = _get(cp, "kernel", "kind", "helmholtz")
        wavelength = float(_get(cp, "kernel", "wavelength", "2.0"))
        if wavelength <= 0:
            raise ConfigError("wavelength must be positive")
        kappa = 0.0 if kernel_kind == "laplace" else 2.0 * np.pi / wavelength
        self_raw = _get(cp, "kernel", "self_term")
        self_term = complex(self_raw) if self_raw else complex(default_self_term(template))
        spec = KernelSpec(kernel_kind, kappa, self_term)

        params = HParams(
            leafsize=int(_get(cp, "hmatrix", "leafsize", "32")),
            eta=float(_get(cp, "hmatrix", "eta", "2.0")),
            aca_eps=float(_get(cp, "hmatrix", "aca_eps", "1e-4")),
            aca_max_rank=int(_get(cp, "hmatrix", "aca_max_rank", "256")))

        precond = _get(cp, "solver", "precond", "nearfield-ilu")
        if precond not in ("nearfield-ilu", "none"):
            raise ConfigError(f"unknown preconditioner {precond!r}")

        def float_list(section, key):
            raw = _get(cp, section, key)
            return [float(v) for v in raw.split(",")] if raw else []

        cfg = RunConfig(
            template=template,
            layout=layout,
            spec=spec,
            params=params,
            tol=float(_get(cp, "solver", "tol", "1e-6")),
            max_iter=int(_get(cp, "solver", "max_iter", "500")),
            seed=int(_get(cp, "solver", "seed", "0")),
            precond=precond,
            incident=BeamTarget(float(_get(cp, "excitation", "azimuth", "0.0")),
                                float(_get(cp, "excitation", "elevation", "0.0"))),
            polarization=complex(_get(cp, "excitation", "polarization", "1.0")),
            target_azimuths=float_list("targets", "azimuths"),
            target_elevations=float_list("targets", "elevations"),
            az_step=float(_get(cp, "farfield", "az_step", "1.0")),
            el_step=float(_get(cp, "farfield", "el_step", "1.0")),
            out_dir=Path(_get(cp, "output", "dir", "out")),
        )
        raw_cb = _get(cp, "codebooks", "dir")
        if raw_cb:
            cfg.codebook_dir = Path(raw_cb)
        return cfg
    except (ValueError, InvalidParameterError) as exc:
        raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------------------
# binary cache of assembled pattern content

def _write_array(fh, arr):
    arr = np.ascontiguousarray(arr, dtype="<c16")
    fh.write(struct.pack("<B", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(arr.tobytes())


def _read_array(fh):
    (ndim,) = struct.unpack("<B", fh.read(1))
    shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(fh.read(16 * count), dtype="<c16").astype(np.complex128)
    return data.reshape(shape)


def _pack_key(key):
    return struct.pack("<6q", key.di, key.dj, *key.src_shape, *key.obs_shape)


def _unpack_key(blob):
    from .patterns import PatternKey
    di, dj, sm, sn, om, on = struct.unpack("<6q", blob)
    return PatternKey(di, dj, (sm, sn), (om, on))


def save_cache(path, h, params_hash):
    from .aca import DenseBlock, LowRankBlock
    from .patterns import CellPairBlock, PatternSplit
    path = Path(path)
    tmp = path.with_suffix(".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<IQ", CACHE_VERSION, h.N))
        fh.write(params_hash)
        fh.write(struct.pack("<I", len(h.pdict)))
        for key, content in h.pdict.items():
            fh.write(_pack_key(key))
            if isinstance(content, PatternSplit):
                fh.write(struct.pack("<BI", 0, len(content.children)))
                fh.write(struct.pack("<QQ", *content.shape))
                for ro, co, child in content.children:
                    fh.write(struct.pack("<qq", ro, co))
                    fh.write(_pack_key(child))
            elif isinstance(content, CellPairBlock):
                fh.write(struct.pack("<BI", 1, len(content.leaves)))
                fh.write(struct.pack("<QQ", *content.shape))
                for leaf in content.leaves:
                    dense = isinstance(leaf, DenseBlock)
                    fh.write(struct.pack("<B4q", 1 if dense else 0,
                                         *leaf.row_range, *leaf.col_range))
                    if dense:
                        _write_array(fh, leaf.values)
                    else:
                        _write_array(fh, leaf.u)
                        _write_array(fh, leaf.v)
            elif isinstance(content, LowRankBlock):
                fh.write(struct.pack("<B", 2))
                fh.write(struct.pack("<4q", *content.row_range, *content.col_range))
                fh.write(struct.pack("<B", 1 if content.rank_capped else 0))
                _write_array(fh, content.u)
                _write_array(fh, content.v)
            else:
                raise TypeError(f"unknown content {type(content)!r}")
        fh.write(_pack_key(h.root_key))
    tmp.replace(path)


def load_cache(path, expected_hash, expected_n):
    from .aca import DenseBlock, LowRankBlock
    from .patterns import CellPairBlock, PatternSplit
    path = Path(path)
    if not path.exists():
        raise CacheMismatchError(f"assembled cache {path} not found; run assemble first")
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CACHE_MAGIC:
            raise CacheMismatchError(f"{path} is not an assembled-matrix cache")
        version, n = struct.unpack("<IQ", fh.read(12))
        if version != CACHE_VERSION:
            raise CacheMismatchError(
                f"cache format version {version} != supported {CACHE_VERSION}")
        stored_hash = fh.read(32)
        if stored_hash != expected_hash:
            raise CacheMismatchError(
                "cache was assembled with different parameters; "
                "re-run assemble into a fresh output directory")
        if n != expected_n:
            raise CacheMismatchError(f"cache is for N={n}, config gives N={expected_n}")
        (n_entries,) = struct.unpack("<I", fh.read(4))
        pdict = {}
        for _ in range(n_entries):
            key = _unpack_key(fh.read(48))
            (kind,) = struct.unpack("<B", fh.read(1))
            if kind == 0:
                (nchildren,) = struct.unpack("<I", fh.read(4))
                shape = struct.unpack("<QQ", fh.read(16))
                children = []
                for _c in range(nchildren):
                    ro, co = struct.unpack("<qq", fh.read(16))
                    children.append((ro, co, _unpack_key(fh.read(48))))
                pdict[key] = PatternSplit(children=children, shape=shape)
            elif kind == 1:
                (nleaves,) = struct.unpack("<I", fh.read(4))
                shape = struct.unpack("<QQ", fh.read(16))
                leaves = []
                for _l in range(nleaves):
                    dense, r0, r1, c0, c1 = struct.unpack("<B4q", fh.read(33))
                    if dense:
                        leaves.append(DenseBlock((r0, r1), (c0, c1), _read_array(fh)))
                    else:
                        u = _read_array(fh)
                        v = _read_array(fh)
                        leaves.append(LowRankBlock((r0, r1), (c0, c1), u, v))
                pdict[key] = CellPairBlock(leaves=leaves, shape=shape)
            else:
                r0, r1, c0, c1 = struct.unpack("<4q", fh.read(32))
                (capped,) = struct.unpack("<B", fh.read(1))
                u = _read_array(fh)
                v = _read_array(fh)
                pdict[key] = LowRankBlock((r0, r1), (c0, c1), u, v,
                                          rank_capped=bool(capped))
        root_key = _unpack_key(fh.read(48))
    return pdict, root_key


# ---------------------------------------------------------------------------
# shared state for solve/sweep

@dataclass
class AssembledState:
    h: object
    near_field: object
    sites: object
    assemble_ms: float


def cache_path(cfg):
    return cfg.out_dir / "assembled.qphm"


def _assemble_fresh(cfg):
    sites = instantiate_array(cfg.template, cfg.layout)
    h = assemble_virtual(sites, cfg.spec, cfg.params)
    return sites, h


def obtain_assembled(cfg, allow_assemble):
    """Load the cached global matrix, or assemble it if allowed."""
    t0 = time.perf_counter()
    path = cache_path(cfg)
    sites = instantiate_array(cfg.template, cfg.layout)
    if path.exists():
        pdict, root_key = load_cache(path, cfg.params_hash(), sites.N)
        h = rebuild_virtual(sites, cfg.spec, cfg.params, pdict, root_key)
        fresh = False
    elif allow_assemble:
        sites, h = _assemble_fresh(cfg)
        cfg.out_dir.mkdir(parents=True, exist_ok=True)
        save_cache(path, h, cfg.params_hash())
        _write_assembly_records(cfg, h)
        fresh = True
    else:
        raise CacheMismatchError(f"assembled cache {path} not found; run assemble first")
    nf = extract_near_field(h)
    nf.csr()
    ms = 1e3 * (time.perf_counter() - t0)
    return AssembledState(h=h, near_field=nf, sites=sites, assemble_ms=ms), fresh


def _write_assembly_records(cfg, h):
    h.report.to_csv(cfg.out_dir / "storage.csv")
    meta = {"totals": h.report.totals(),
            "params_hash": cfg.params_hash().hex(),
            "levels": len(h.report.levels)}
    (cfg.out_dir / "assembly.json").write_text(json.dumps(meta, indent=1))


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen(cfg):
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    cfg.codebook_dir.mkdir(parents=True, exist_ok=True)
    cfg.template.save(cfg.out_dir / "template.json")
    targets = [(az, el) for az in cfg.target_azimuths for el in cfg.target_elevations]
    if not targets:
        print("warning: no beam targets configured; no codebooks generated",
              file=sys.stderr)
        return []
    unique = []
    for t in targets:
        if t in unique:
            print(f"notice: duplicate target {t} skipped", file=sys.stderr)
        else:
            unique.append(t)
    lam = 2.0 * np.pi / cfg.spec.kappa if cfg.spec.kappa > 0 else None
    if lam is None:
        raise ConfigError("codebook generation needs a helmholtz kernel wavelength")
    written = []
    for az, el in unique:
        cb = phase_gradient_codebook(cfg.layout, cfg.template, cfg.incident,
                                     BeamTarget(az, el), lam, cfg.template.k_bits)
        name = f"cb_az{az:+05.1f}_el{el:+05.1f}.json".replace("+", "p").replace("-", "m")
        cb.save(cfg.codebook_dir / name)
        written.append(cfg.codebook_dir / name)
    print(f"wrote {len(written)} codebooks to {cfg.codebook_dir}")
    return written


def cmd_assemble(cfg):
    path = cache_path(cfg)
    sites = instantiate_array(cfg.template, cfg.layout)
    if path.exists():
        pdict, root_key = load_cache(path, cfg.params_hash(), sites.N)
        print(f"cache {path} is current (N={sites.N}, "
              f"{len(pdict)} patterns); nothing to do")
        return
    sites, h = _assemble_fresh(cfg)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    save_cache(path, h, cfg.params_hash())
    _write_assembly_records(cfg, h)
    tot = h.report.totals()
    print(f"assembled N={h.N}: {tot['distinct_patterns']} patterns, "
          f"{tot['lowrank_scalars']} low-rank + {tot['dense_scalars']} dense scalars")


def solve_one(cfg, state, codebook_path):
    """Mask, factorize, iterate, write per-codebook outputs.

    Returns the summary row dict.  Raises NonConvergence after writing
    outputs when the iteration fails to reach tolerance.
    """
    cb = Codebook.load(codebook_path)
    cb_id = Path(codebook_path).stem
    sites, h = state.sites, state.h
    mask = build_mask(cfg.template, cfg.layout, cb)

    t0 = time.perf_counter()
    if cfg.precond == "nearfield-ilu":
        M = factorize(state.near_field, mask)
    else:
        M = None
    factorize_ms = 1e3 * (time.perf_counter() - t0)

    op = masked_operator(h, mask)
    direction = -cfg.incident.unit_vector()
    rhs = masked_rhs(plane_wave_rhs(sites, direction, cfg.polarization,
                                    cfg.spec.kappa), mask)
    t1 = time.perf_counter()
    rep = bicgstab(op, rhs, M=M, tol=cfg.tol, max_iter=cfg.max_iter,
                   seed=cfg.seed, active=mask.bits.astype(bool))
    solve_ms = 1e3 * (time.perf_counter() - t1)

    sdir = cfg.out_dir / "solves" / cb_id
    sdir.mkdir(parents=True, exist_ok=True)
    np.save(sdir / "solution.npy", rep.x)
    rep.residuals_to_csv(sdir / "residuals.csv")
    grid = far_field(sites, rep.x, cfg.spec.kappa, cfg.az_step, cfg.el_step)
    grid.to_csv(sdir / "farfield.csv")
    try:
        lobe = main_lobe(grid)
        lobe_doc = {"azimuth": lobe.azimuth, "elevation": lobe.elevation}
    except ValueError:
        lobe_doc = None

    row = {
        "codebook_id": cb_id,
        "n_active": mask.active_count,
        "iters": rep.iterations,
        "relres": rep.relative_residuals[-1] if rep.relative_residuals else 0.0,
        "converged": rep.converged,
        "assemble_ms": state.assemble_ms,
        "factorize_ms": factorize_ms,
        "solve_ms": solve_ms,
        "peak_bytes": resource.getrusage(resource.RUSAGE_SELF).ru_maxrss * 1024,
    }
    (sdir / "summary.json").write_text(json.dumps(
        {**row, "main_lobe": lobe_doc, "true_relres": rep.true_relres,
         "assemble_reused": True}, indent=1))
    _write_summary_csv(sdir / "summary.csv", [row])
    if not rep.converged:
        raise NonConvergence(f"codebook {cb_id}: {rep.iterations} iterations, "
                             f"relres {row['relres']:.3e}", row=row)
    return row


def _format_row(row):
    return (f"{row['codebook_id']},{row['n_active']},{row['iters']},"
            f"{row['relres']:.9e},{str(bool(row['converged'])).lower()},"
            f"{row['assemble_ms']:.1f},{row['factorize_ms']:.1f},"
            f"{row['solve_ms']:.1f},{row['peak_bytes']}")


def _write_summary_csv(path, rows):
    with open(path, "w") as fh:
        fh.write(SUMMARY_HEADER + "\n")
        for row in rows:
            fh.write(_format_row(row) + "\n")


def cmd_solve(cfg, codebook_path):
    state, _fresh = obtain_assembled(cfg, allow_assemble=False)
    solve_one(cfg, state, codebook_path)


def cmd_sweep(cfg):
    codebooks = sorted(cfg.codebook_dir.glob("*.json"))
    if not codebooks:
        raise ConfigError(f"no codebooks in {cfg.codebook_dir}; run gen first")
    state, _fresh = obtain_assembled(cfg, allow_assemble=True)
    state.assemble_ms = state.assemble_ms if _fresh else 0.0
    rows = []
    failures = 0
    for path in codebooks:
        cb_id = path.stem
        row_file = cfg.out_dir / "solves" / cb_id / "summary.json"
        if row_file.exists():
            doc = json.loads(row_file.read_text())
            rows.append({k: doc[k] for k in (
                "codebook_id", "n_active", "iters", "relres", "converged",
                "assemble_ms", "factorize_ms", "solve_ms", "peak_bytes")})
            continue
        try:
            rows.append(solve_one(cfg, state, path))
        except NonConvergence as exc:
            print(f"warning: {exc}", file=sys.stderr)
            if exc.row is not None:
                rows.append(exc.row)
            failures += 1
        except Exception as exc:   # isolate per-codebook failures
            print(f"warning: codebook {cb_id} failed: {exc}", file=sys.stderr)
            failures += 1
        state.assemble_ms = 0.0   # shared state reused for the rest
    _write_summary_csv(cfg.out_dir / "summary.csv", rows)
    print(f"sweep complete: {len(rows)} codebooks, {failures} not converged")
    return failures


def cmd_report_data(cfg):
    out = cfg.out_dir
    bundle = {
        "summary": str(out / "summary.csv"),
        "storage": str(out / "storage.csv"),
        "residuals": sorted(str(p) for p in out.glob("solves/*/residuals.csv")),
        "farfields": sorted(str(p) for p in out.glob("solves/*/farfield.csv")),
        "solve_summaries": sorted(str(p) for p in out.glob("solves/*/summary.json")),
        "assemblies": sorted(str(p) for p in out.glob("**/assembly.json")),
    }
    missing = [p for p in (bundle["summary"], bundle["storage"])
               if not Path(p).exists()]
    if missing:
        print(f"warning: missing {missing}; bundle is partial", file=sys.stderr)
    (out / "bundle.json").write_text(json.dumps(bundle, indent=1))
    print(f"wrote {out / 'bundle.json'}")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="qphm",
        description="Shared-matrix solver for quasi-periodic coded arrays")
    parser.add_argument("--config", required=True, help="INI config file")
    parser.add_argument("--set", action="append", default=[], metavar="SEC.KEY=VAL",
                        help="override a config value")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", help="write template and codebook files for the targets")
    sub.add_parser("assemble", help="assemble the shared matrix and cache it")
    p_solve = sub.add_parser("solve", help="solve one codebook from the cache")
    p_solve.add_argument("--codebook", required=True)
    sub.add_parser("sweep", help="solve every codebook in the codebook directory")
    sub.add_parser("report-data", help="write a bundle manifest of the outputs")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.set)
        if args.command == "gen":
            cmd_gen(cfg)
        elif args.command == "assemble":
            cmd_assemble(cfg)
        elif args.command == "solve":
            cmd_solve(cfg, args.codebook)
        elif args.command == "sweep":
            failures = cmd_sweep(cfg)
            if failures:
                return EXIT_NONCONVERGENCE
        elif args.command == "report-data":
            cmd_report_data(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CacheMismatchError as exc:
        print(f"cache error: {exc}", file=sys.stderr)
        return EXIT_CACHE
    except NonConvergence as exc:
        print(f"not converged: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
