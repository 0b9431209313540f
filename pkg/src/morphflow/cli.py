"""Command line entry point: ``register``, ``morph``, ``evaluate`` and ``basis-info``.

Settings come from an optional ``key=value`` config file (``#`` starts a
comment) and from flags; a flag always wins over the file.  Exit codes are
0 on success, 2 for usage or input errors and 3 for numerical failures.
"""

import argparse
import json
import logging
import re
import sys
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .basis import ModeIndex, enumerate_basis
from .descriptors import (DescriptorSet, build_distance_model, compute_descriptors,
                          estimate_normals, load_descriptors)
from .domain import (Mesh, atomic_write_text, farthest_point_sample, fit_domain,
                     format_for_path, load_shape, pca_align, shape_text)
from .em import EmConfig, extract_correspondences, run_em
from .errors import ConfigError, FieldMismatch, MorphflowError, OutOfHorizon, ParseError
from .evaluation import GeodesicIndex, princeton_curve
from .flow import (MAX_HORIZON, FlowConfig, SpectralField, integrate, integrate_field,
                   sample_time, steps_for_time)

logger = logging.getLogger("morphflow")

FIELD_MAGIC = "MORPHFLOW-FIELD v1"
_FIELD_HEADER = re.compile(r"^MORPHFLOW-FIELD v1 D=(\d+) K=(\d+)$")
DESCRIPTOR_MODES = ("shot", "file", "none")


@dataclass
class RunConfig:
    """Every tunable of the pipeline; defaults follow the published setup."""

    sigma2: float = 0.01
    steps: int = 20
    basis_k: int = 3000
    basis_exponent: float = None
    downsample: int = 3000
    margin: float = 0.1
    huber_r0: float = 0.01
    max_iters: int = 100
    energy_tol: float = 1e-5
    w_truncation: float = 1e-8
    descriptor_mode: str = "shot"
    descriptor_radius: float = 0.1
    normal_k: int = 10
    source_descriptors: str = None
    target_descriptors: str = None
    seed: int = -1
    threads: int = None
    dim: int = 3

    def __post_init__(self):
        if self.descriptor_mode not in DESCRIPTOR_MODES:
            raise ConfigError(f"descriptor_mode must be one of {', '.join(DESCRIPTOR_MODES)}, "
                              f"got {self.descriptor_mode!r}")
        if self.dim not in (2, 3):
            raise ConfigError(f"dim must be 2 or 3, got {self.dim}")
        for name in ("steps", "basis_k", "downsample", "normal_k"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.max_iters < 0:
            raise ConfigError("max_iters must be non-negative")
        if not 0 < self.margin < 0.5:
            raise ConfigError("margin must lie in (0, 0.5)")
        try:
            self.em_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def em_config(self):
        return EmConfig(sigma2=self.sigma2, r0=self.huber_r0, max_iters=self.max_iters,
                        rel_energy_tol=self.energy_tol, w_truncation=self.w_truncation)

    def flow_config(self):
        return FlowConfig(self.steps)

    def basis(self):
        return enumerate_basis(self.dim, self.basis_k, self.basis_exponent)


def _optional(kind):
    def convert(text):
        return None if text.strip().lower() in ("", "none", "default") else kind(text)
    return convert


_KEY_TYPES = {
    "sigma2": float, "steps": int, "basis_k": int, "basis_exponent": _optional(float),
    "downsample": int, "margin": float, "huber_r0": float, "max_iters": int,
    "energy_tol": float, "w_truncation": float, "descriptor_mode": str,
    "descriptor_radius": float, "normal_k": int, "source_descriptors": _optional(str),
    "target_descriptors": _optional(str), "seed": int, "threads": _optional(int), "dim": int,
}


def read_config_file(path):
    """Parse a flat ``key=value`` file into a dict of typed values."""
    values = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParseError("expected key=value", lineno, str(path))
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in _KEY_TYPES:
                raise ParseError(f"unknown config key {key!r}", lineno, str(path))
            try:
                values[key] = _KEY_TYPES[key](value)
            except ValueError:
                raise ParseError(f"bad value {value!r} for {key}", lineno, str(path)) from None
    return values


def resolve_config(args):
    """Defaults, overridden by the config file, overridden by flags."""
    values = {}
    if getattr(args, "config", None):
        _require(args.config)
        values.update(read_config_file(args.config))
    for key in _KEY_TYPES:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    return RunConfig(**values)


# -- field files ----------------------------------------------------------------

def field_text(basis, a):
    lines = [f"{FIELD_MAGIC} D={basis.dimension} K={basis.K}"]
    for mode, ak in zip(basis.modes, a):
        lines.append(" ".join(str(jd) for jd in mode.j) + f" {mode.component} {ak:.17g}")
    return "\n".join(lines) + "\n"


def write_field(path, basis, a):
    atomic_write_text(path, field_text(basis, a))


def read_field(path):
    """Returns ``(dimension, modes, coefficients)`` from a field file."""
    path = str(path)
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError("empty field file", 1, path)
    match = _FIELD_HEADER.match(lines[0].strip())
    if match is None:
        raise ParseError(f"expected header '{FIELD_MAGIC} D=<d> K=<k>'", 1, path)
    dim, k = int(match.group(1)), int(match.group(2))
    if dim not in (2, 3):
        raise ParseError(f"unsupported dimension {dim}", 1, path)
    modes, coeffs = [], []
    for lineno, raw in enumerate(lines[1:], start=2):
        tokens = raw.split()
        if not tokens:
            continue
        if len(tokens) != dim + 2:
            raise ParseError(f"expected {dim + 2} fields, got {len(tokens)}", lineno, path)
        try:
            j = tuple(int(t) for t in tokens[:dim])
            modes.append(ModeIndex(j, int(tokens[dim])))
            coeffs.append(float(tokens[dim + 1]))
        except ValueError as exc:
            raise ParseError(str(exc), lineno, path) from None
    if len(modes) != k:
        raise ParseError(f"header declares K={k} but {len(modes)} entries follow", None, path)
    a = np.array(coeffs)
    if not np.all(np.isfinite(a)):
        raise ParseError("non-finite coefficient", None, path)
    return dim, tuple(modes), a


def check_field(basis, dim, modes):
    if dim != basis.dimension or len(modes) != basis.K:
        raise FieldMismatch(f"field file has D={dim} K={len(modes)}, configuration expects "
                            f"D={basis.dimension} K={basis.K}")
    for k, (got, want) in enumerate(zip(modes, basis.modes), start=1):
        if got != want:
            raise FieldMismatch(f"entry {k}: field file has {got}, basis expects {want}")


# -- shared pipeline pieces -------------------------------------------------------

def _require(path):
    if not Path(path).exists():
        raise FileNotFoundError(2, "No such file", str(path))


def _normalized_pair(cfg, source_path, target_path):
    """Load both shapes, align each by PCA and map them jointly into the unit cube."""
    _require(source_path)
    _require(target_path)
    source = load_shape(source_path, dimension=cfg.dim)
    target = load_shape(target_path, dimension=cfg.dim)
    src_cloud, tgt_cloud = pca_align(source.cloud, target.cloud)
    transform = fit_domain(src_cloud, tgt_cloud, cfg.margin)
    return (Mesh(transform.apply(src_cloud), source.faces),
            Mesh(transform.apply(tgt_cloud), target.faces), transform)


def _descriptors(cfg, cloud, which):
    if cfg.descriptor_mode == "none":
        return None
    if cfg.descriptor_mode == "file":
        path = getattr(cfg, f"{which}_descriptors")
        if path is None:
            raise ConfigError(f"descriptor_mode=file needs {which}_descriptors")
        _require(path)
        return load_descriptors(path, len(cloud))
    if cfg.dim != 3:
        raise ConfigError("descriptor_mode=shot needs 3D shapes; use none or file")
    if cloud.normals is None:
        cloud = estimate_normals(cloud, min(cfg.normal_k, len(cloud)))
    return compute_descriptors(cloud, cfg.descriptor_radius)


def _subset(desc, indices):
    return None if desc is None else desc.subset(indices)


def _samples(cfg, cloud):
    n = len(cloud)
    if cfg.seed >= n:
        raise ConfigError(f"seed index {cfg.seed} out of range for {n} points")
    seed = None if cfg.seed < 0 else cfg.seed
    return farthest_point_sample(cloud, min(cfg.downsample, n), seed).indices


def _deformed_mesh(mesh, points):
    return Mesh(mesh.cloud.with_points(points), mesh.faces)


@dataclass(frozen=True, eq=False)
class RegistrationResult:
    coefficients: np.ndarray
    correspondences: np.ndarray
    soft_summary: dict
    energy_history: tuple
    timings: dict
    config: RunConfig
    outputs: dict


def cmd_register(cfg, source_path, target_path, out_dir):
    """Full registration pipeline; writes the field, matches, energies, endpoint shape and manifest."""
    timings = {}
    clock = time.perf_counter()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    source, target, transform = _normalized_pair(cfg, source_path, target_path)
    timings["load_normalize"] = time.perf_counter() - clock

    clock = time.perf_counter()
    desc_x = _descriptors(cfg, source.cloud, "source")
    desc_y = _descriptors(cfg, target.cloud, "target")
    timings["descriptors"] = time.perf_counter() - clock

    clock = time.perf_counter()
    idx_x = _samples(cfg, source.cloud)
    idx_y = _samples(cfg, target.cloud)
    x = source.cloud.points[idx_x]
    y = target.cloud.points[idx_y]
    basis = cfg.basis()
    flow_cfg, em_cfg = cfg.flow_config(), cfg.em_config()
    model = build_distance_model(x, y, _subset(desc_x, idx_x), _subset(desc_y, idx_y))

    def report(iteration, energy, a):
        logger.info("iteration %d: energy %.10g", iteration, energy)

    state = run_em(x, y, basis, flow_cfg=flow_cfg, em_cfg=em_cfg, model=model, callback=report,
                   threads=cfg.threads)
    timings["em"] = time.perf_counter() - clock

    clock = time.perf_counter()
    endpoints = integrate(source.cloud, basis, state.a, flow_cfg, cfg.threads).endpoints
    if desc_x is None:
        desc_x, desc_y = DescriptorSet.empty(len(source.cloud)), DescriptorSet.empty(len(target.cloud))
    model_full = model.with_descriptors(desc_x, desc_y)
    matches = extract_correspondences(endpoints, target.cloud.points, model_full)
    timings["full_resolution"] = time.perf_counter() - clock

    ext = Path(source_path).suffix.lower()
    outputs = {
        "field": out_dir / "field.txt",
        "correspondences": out_dir / "correspondences.csv",
        "energy": out_dir / "energy.csv",
        "registered": out_dir / f"registered{ext}",
        "manifest": out_dir / "manifest.json",
    }
    write_field(outputs["field"], basis, state.a)
    atomic_write_text(outputs["correspondences"], "source_index,target_index\n"
                      + "".join(f"{s},{t}\n" for s, t in matches))
    rows = ["iteration,energy,halvings", f"0,{state.energy_history[0]:.17g},"]
    rows += [f"{i},{e:.17g},{k}" for i, (e, k) in
             enumerate(zip(state.energy_history[1:], state.halvings), start=1)]
    atomic_write_text(outputs["energy"], "\n".join(rows) + "\n")
    atomic_write_text(outputs["registered"],
                      shape_text(_deformed_mesh(source, endpoints), format_for_path(source_path)))

    w = state.w
    soft = {
        "mean_outlier_mass": float(w.outlier_mass.mean()),
        "nonzero_fraction": float(np.count_nonzero(w.w) / w.w.size),
        "max_source_mass": float(w.w.sum(axis=1).max()),
    }
    manifest = {
        "command": "register",
        "version": __version__,
        "backend": kernels.BACKEND,
        "inputs": {"source": str(source_path), "target": str(target_path)},
        "config": asdict(cfg),
        "transform": transform.to_dict(),
        "samples": {"source": int(len(idx_x)), "target": int(len(idx_y))},
        "em": {"iterations": state.iteration, "converged": state.converged,
               "stalled_iterations": list(state.stalled),
               "final_energy": state.energy_history[-1]},
        "soft_correspondences": soft,
        "timings_seconds": timings,
        "outputs": {k: str(v) for k, v in outputs.items()},
    }
    atomic_write_text(outputs["manifest"], json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return RegistrationResult(state.a, matches, soft, state.energy_history, timings, cfg,
                              outputs)


def _time_label(t):
    return f"{t:.6g}".replace("-", "m")


def cmd_morph(cfg, source_path, target_path, field_path, times, out_dir):
    """Advect the full-resolution normalized source to each time; one shape file per time."""
    times = [float(t) for t in times]
    if not times:
        raise ConfigError("no times given")
    for t in times:
        if not 0.0 <= t <= MAX_HORIZON:
            raise OutOfHorizon(f"time {t} outside [0, {MAX_HORIZON}]")
    _require(field_path)
    dim, modes, a = read_field(field_path)
    basis = cfg.basis()
    check_field(basis, dim, modes)
    source, _, _ = _normalized_pair(cfg, source_path, target_path)
    flow_cfg = cfg.flow_config()
    n_steps = max(flow_cfg.steps, steps_for_time(max(times), flow_cfg))
    bundle = integrate_field(source.cloud, SpectralField(basis, a, cfg.threads), flow_cfg, n_steps)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ext = Path(source_path).suffix.lower()
    written = []
    for t in times:
        path = out_dir / f"morph_t{_time_label(t)}{ext}"
        moved = sample_time(bundle, t).points
        atomic_write_text(path, shape_text(_deformed_mesh(source, moved), format_for_path(source_path)))
        written.append(path)
    return written


def read_pairs(path):
    """``source_index,target_index`` rows; a header line is optional."""
    path = str(path)
    _require(path)
    pairs = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if lineno == 1 and line.replace(" ", "") == "source_index,target_index":
                continue
            tokens = line.split(",")
            if len(tokens) != 2:
                raise ParseError("expected 'source_index,target_index'", lineno, path)
            try:
                s, t = int(tokens[0]), int(tokens[1])
            except ValueError:
                raise ParseError("indices must be integers", lineno, path) from None
            if s < 0 or t < 0:
                raise ParseError("indices must be non-negative", lineno, path)
            pairs.append((s, t))
    if not pairs:
        raise ParseError("no matches", None, path)
    return np.array(pairs, dtype=np.intp)


def cmd_evaluate(matches_path, truth_path, mesh_path, out_path=None, dim=3, thresholds=None):
    matches = read_pairs(matches_path)
    truth = read_pairs(truth_path)
    _require(mesh_path)
    mesh = load_shape(mesh_path, dimension=dim)
    index = GeodesicIndex(mesh)
    try:
        report = princeton_curve(matches, truth, index, thresholds)
    except IndexError as exc:
        raise ConfigError(str(exc)) from None
    if out_path is not None:
        report.write(out_path)
    return report


def basis_table(basis):
    dim = basis.dimension
    header = ",".join(["k"] + [f"j{d + 1}" for d in range(dim)]
                      + ["component", "laplace_eigenvalue", "kl_weight"])
    lines = [header]
    for (k, mode), lap, lam in zip(basis.entries(), basis.laplace_eigenvalues, basis.kl_weights):
        lines.append(",".join([str(k)] + [str(jd) for jd in mode.j]
                              + [str(mode.component), f"{lap:.17g}", f"{lam:.17g}"]))
    return "\n".join(lines) + "\n"


def basis_grid(basis, entry, size, slice_value):
    """Samples of one entry on a regular grid (a cross section at fixed ``x3`` in 3D)."""
    if not 1 <= entry <= basis.K:
        raise ConfigError(f"grid entry {entry} outside 1..{basis.K}")
    ticks = np.linspace(0.0, 1.0, size)
    g1, g2 = np.meshgrid(ticks, ticks, indexing="ij")
    pts = np.column_stack([g1.ravel(), g2.ravel()])
    if basis.dimension == 3:
        pts = np.column_stack([pts, np.full(len(pts), slice_value)])
    values, _ = basis.values(pts)
    vals = values[:, entry - 1, :]
    dim = basis.dimension
    header = ",".join([f"x{d + 1}" for d in range(dim)] + [f"v{d + 1}" for d in range(dim)])
    lines = [header] + [",".join(f"{c:.17g}" for c in np.concatenate([p, v]))
                        for p, v in zip(pts, vals)]
    return "\n".join(lines) + "\n"


# -- argument parsing -------------------------------------------------------------

def _add_config_flags(p):
    p.add_argument("--config", help="key=value configuration file")
    g = p.add_argument_group("configuration (overrides the config file)")
    g.add_argument("--sigma2", type=float)
    g.add_argument("--steps", type=int, help="integration steps T")
    g.add_argument("--basis-k", dest="basis_k", type=int)
    g.add_argument("--basis-exponent", dest="basis_exponent", type=float)
    g.add_argument("--downsample", type=int)
    g.add_argument("--margin", type=float)
    g.add_argument("--huber-r0", dest="huber_r0", type=float)
    g.add_argument("--max-iters", dest="max_iters", type=int)
    g.add_argument("--energy-tol", dest="energy_tol", type=float)
    g.add_argument("--w-truncation", dest="w_truncation", type=float)
    g.add_argument("--descriptor-mode", dest="descriptor_mode", choices=DESCRIPTOR_MODES)
    g.add_argument("--descriptor-radius", dest="descriptor_radius", type=float)
    g.add_argument("--normal-k", dest="normal_k", type=int)
    g.add_argument("--source-descriptors", dest="source_descriptors")
    g.add_argument("--target-descriptors", dest="target_descriptors")
    g.add_argument("--seed", type=int, help="FPS start index; -1 picks the point nearest the centroid")
    g.add_argument("--threads", type=int, help="0 = all cores")
    g.add_argument("--dim", type=int, choices=(2, 3))


def build_parser():
    parser = argparse.ArgumentParser(
        prog="morphflow",
        description="Register, morph and evaluate shapes with divergence-free deformation fields.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("--backend", choices=("auto", "cython", "python"), default="auto")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("register", help="estimate a deformation field from source to target")
    p.add_argument("source")
    p.add_argument("target")
    p.add_argument("-o", "--out-dir", required=True)
    _add_config_flags(p)
    p.set_defaults(func=_run_register)

    p = sub.add_parser("morph", help="advect the source under a field to given times")
    p.add_argument("source")
    p.add_argument("target", help="target shape used for the joint normalization")
    p.add_argument("field")
    p.add_argument("-t", "--times", type=float, nargs="+", required=True)
    p.add_argument("-o", "--out-dir", required=True)
    _add_config_flags(p)
    p.set_defaults(func=_run_morph)

    p = sub.add_parser("evaluate", help="geodesic error curve of hard matches")
    p.add_argument("matches")
    p.add_argument("ground_truth")
    p.add_argument("target_mesh")
    p.add_argument("-o", "--output", help="report CSV (default: stdout)")
    p.add_argument("--dim", type=int, choices=(2, 3), default=3)
    p.add_argument("--max-threshold", type=float, default=0.25)
    p.add_argument("--threshold-step", type=float, default=0.0025)
    p.set_defaults(func=_run_evaluate)

    p = sub.add_parser("basis-info", help="list basis entries and prior weights")
    p.add_argument("--dim", type=int, choices=(2, 3), default=3)
    p.add_argument("-K", "--basis-k", dest="basis_k", type=int, default=10)
    p.add_argument("--basis-exponent", dest="basis_exponent", type=float)
    p.add_argument("-o", "--output", help="table CSV (default: stdout)")
    p.add_argument("--grid", help="also write samples of one entry to this CSV")
    p.add_argument("--grid-entry", type=int, default=1, help="1-based entry index")
    p.add_argument("--grid-size", type=int, default=32)
    p.add_argument("--slice", type=float, default=0.5, help="x3 value of the 3D cross section")
    p.set_defaults(func=_run_basis_info)
    return parser


def _run_register(args):
    cfg = resolve_config(args)
    result = cmd_register(cfg, args.source, args.target, args.out_dir)
    print(f"field written to {result.outputs['field']}")
    return 0


def _run_morph(args):
    cfg = resolve_config(args)
    for path in cmd_morph(cfg, args.source, args.target, args.field, args.times, args.out_dir):
        print(path)
    return 0


def _run_evaluate(args):
    if args.threshold_step <= 0 or args.max_threshold < 0:
        raise ConfigError("thresholds need a positive step and non-negative maximum")
    n = int(round(args.max_threshold / args.threshold_step)) + 1
    thresholds = np.linspace(0.0, args.threshold_step * (n - 1), n)
    report = cmd_evaluate(args.matches, args.ground_truth, args.target_mesh, args.output,
                          args.dim, thresholds)
    if args.output is None:
        sys.stdout.write(report.to_csv())
    else:
        print(f"mean_error={report.mean_error:.10g}")
    return 0


def _run_basis_info(args):
    if args.basis_k < 1:
        raise ConfigError("K must be at least 1")
    basis = enumerate_basis(args.dim, args.basis_k, args.basis_exponent)
    table = basis_table(basis)
    if args.output:
        atomic_write_text(args.output, table)
    else:
        sys.stdout.write(table)
    if args.grid:
        if args.grid_size < 2:
            raise ConfigError("grid size must be at least 2")
        atomic_write_text(args.grid, basis_grid(basis, args.grid_entry, args.grid_size, args.slice))
    return 0


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.backend != "auto":
        try:
            kernels.set_backend(args.backend)
        except ValueError as exc:
            print(f"morphflow: error: {exc}", file=sys.stderr)
            return 2
    try:
        return args.func(args)
    except MorphflowError as exc:
        print(f"morphflow: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"morphflow: error: no such file: {exc.filename}", file=sys.stderr)
        return 2
    except (np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"morphflow: numerical failure: {exc}", file=sys.stderr)
        return 3
    except (ValueError, KeyError, OSError) as exc:
        print(f"morphflow: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
