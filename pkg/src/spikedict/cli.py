"""Command-line entry point: ``spikedict <subcommand> ...``.

Exit codes: 0 success, 1 usage / config / input error, 2 runtime abort
(the engine exceeded its current bound).

Config files are flat ``key = value`` text with ``#`` comments.  Every
:class:`~spikedict.model.RunConfig` field is a key, plus the run keys in
``RUN_KEYS``.  ``--set key=value`` (repeatable) and the dedicated flags
override the file.  The thread count comes from ``--threads``, then the
``threads`` key, then the ``LCA_THREADS`` environment variable.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import math
import os
import sys
from pathlib import Path

from .model import FormatError, RunConfig, SpikeDictError

log = logging.getLogger("spikedict")

RUN_KEYS = {
    "dataset": ("reference", str),
    "patch_size": (8, int),
    "train_patches": (20000, int),
    "test_patches": (1000, int),
    "data_seed": (1, int),
    "test_seed": (2, int),
    "iterations": (2000, int),
    "out": ("run", str),
    "threads": (None, int),
    "sgd_eta": (0.05, float),
    "calibrate_lambda2": (0, int),
}


class ConfigError(SpikeDictError, ValueError):
    pass


class UsageError(SpikeDictError):
    pass


# --- config ----------------------------------------------------------------

def _parse_bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _schema():
    types = {"float": float, "int": int, "str": str, "bool": _parse_bool}
    out = {}
    for f in dataclasses.fields(RunConfig):
        out[f.name] = (f.default, types[f.type if isinstance(f.type, str) else f.type.__name__])
    for k, v in RUN_KEYS.items():
        out[k] = v
    return out


SCHEMA = _schema()


def _convert(key, text):
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    conv = SCHEMA[key][1]
    try:
        if conv is float and "/" in text:
            num, den = text.split("/", 1)
            return float(num) / float(den)
        return conv(text.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {text.strip()!r} ({exc})") from None


def parse_config_text(text, origin="<config>"):
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value'")
        key, val = (p.strip() for p in line.split("=", 1))
        try:
            values[key] = _convert(key, val)
        except ConfigError as exc:
            raise ConfigError(f"{origin}:{lineno}: {exc}") from None
    return values


def load_config(path=None, overrides=()):
    """Merge defaults, the config file and ``key=value`` overrides."""
    values = {k: v[0] for k, v in SCHEMA.items()}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {path}")
        values.update(parse_config_text(p.read_text(), str(p)))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        values[key.strip()] = _convert(key.strip(), val)
    return values


def run_config(values):
    names = {f.name for f in dataclasses.fields(RunConfig)}
    try:
        return RunConfig(**{k: v for k, v in values.items() if k in names})
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


# --- threads ---------------------------------------------------------------

def resolve_threads(flag=None, config_value=None):
    for v in (flag, config_value, os.environ.get("LCA_THREADS")):
        if v is not None and v != "":
            try:
                n = int(v)
            except ValueError:
                raise ConfigError(f"bad thread count {v!r}") from None
            if n < 1:
                raise ConfigError(f"thread count must be >= 1, got {n}")
            return n
    return 1


def apply_threads(n):
    """Size numba's pool to ``n`` threads; results do not depend on ``n``."""
    if "numba" not in sys.modules:
        cur = int(os.environ.get("NUMBA_NUM_THREADS", "0") or 0)
        if n > cur:
            os.environ["NUMBA_NUM_THREADS"] = str(n)
        # try OpenMP before TBB; the TBB probe warns on old installations
        os.environ.setdefault("NUMBA_THREADING_LAYER_PRIORITY", "omp tbb workqueue")
    import numba

    limit = numba.config.NUMBA_NUM_THREADS
    if n > limit:
        log.warning("requested %d threads, numba pool has %d", n, limit)
    numba.set_num_threads(min(n, limit))


# --- inputs ----------------------------------------------------------------

def _tile_for(dim):
    for cand in (dim // 2, dim):
        p = math.isqrt(cand)
        if p * p == cand and cand > 0 and (cand == dim or dim % 2 == 0):
            return (p, p)
    return (1, dim)


def load_dataset(values):
    """Return ``(train, test, tile_shape)`` from the dataset keys."""
    import numpy as np

    from .data_io import (MNIST_IMAGE_MAGIC, load_mnist_idx, load_pgm, load_pst,
                          preprocess_split, reference_image, sample_patches)

    name = values["dataset"]
    n_train, n_test = values["train_patches"], values["test_patches"]
    if name == "reference" or name.lower().endswith(".pgm"):
        if name == "reference":
            img = reference_image()
        else:
            if not Path(name).is_file():
                raise ConfigError(f"dataset not found: {name}")
            img = load_pgm(name)
        p = values["patch_size"]
        train = preprocess_split(sample_patches(img, p, n_train, values["data_seed"])).patches
        test = preprocess_split(sample_patches(img, p, n_test, values["test_seed"])).patches
        return train, test, (p, p)
    path = Path(name)
    if not path.is_file():
        raise ConfigError(f"dataset not found: {name}")
    head = path.read_bytes()[:4]
    if len(head) == 4 and int.from_bytes(head, "big") == MNIST_IMAGE_MAGIC:
        ps = load_mnist_idx(path)
        tile = (ps.provenance["rows"], ps.provenance["cols"])
    elif head.startswith(b"PST1"):
        ps = load_pst(path)
        tile = _tile_for(ps.dim)
    else:
        raise ConfigError(f"unrecognised dataset format: {name}")
    X = ps.patches
    train = X[:n_train]
    test = X[n_train:n_train + n_test]
    if len(train) == 0:
        raise ConfigError(f"dataset {name} has no samples")
    return train, (test if len(test) else None), tile


def load_vector(path, expected=None):
    """Read an input vector from a DLM1 file, a PGM image or whitespace/comma separated text."""
    import numpy as np

    from .data_io import load_pgm
    from .model import load_dlm

    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"input not found: {path}")
    if p.suffix == ".dlm":
        x = load_dlm(p).reshape(-1)
    elif p.suffix == ".pgm":
        x = load_pgm(p).reshape(-1)
    else:
        try:
            x = np.array([float(t) for t in p.read_text().replace(",", " ").split()])
        except ValueError as exc:
            raise FormatError(f"{path}: {exc}") from None
    if expected is not None and x.size != expected:
        raise ConfigError(f"input has {x.size} entries, weights expect {expected}")
    return x


def _load_weights(path):
    from .model import load_weights

    p = Path(path)
    if not (p / "weights.json").is_file():
        raise ConfigError(f"not a checkpoint directory: {path}")
    return load_weights(p)


def _fmt(v):
    return f"{v:.10g}"


# --- outputs ---------------------------------------------------------------

def _write_run_outputs(out, records, weights, tile, meta, series_keys):
    from .metrics import export_atlas, jsonl_line, svg_line_chart, write_metrics_csv
    from .model import save_weights

    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.jsonl", "w") as fh:
        for rec in records:
            fh.write(jsonl_line(rec) + "\n")
    write_metrics_csv(out / "metrics.csv", records)
    save_weights(out / "checkpoint", weights, meta)
    export_atlas(out / "atlas.pgm", weights.B, tile)
    its = [r["iteration"] for r in records]
    for key in series_keys:
        ys = [r[key] for r in records]
        if any(math.isfinite(y) for y in ys):
            svg_line_chart(out / f"{key}.svg", {key: (its, ys)}, title=key, ylabel=key)


# --- subcommands -----------------------------------------------------------

def cmd_train_snn(args, values):
    from .learning import TrainingAborted, calibrate_lambda2, train

    cfg = run_config(values)
    train_set, test_set, tile = load_dataset(values)
    if values["calibrate_lambda2"] > 0:
        lam2 = calibrate_lambda2(train_set, cfg, values["calibrate_lambda2"])
        log.info("calibrated lambda2 = %.6g", lam2)
        cfg = cfg.replace(lambda2=lam2)
    out = Path(values["out"])
    meta = {"iterations": values["iterations"], "lambda2": cfg.lambda2, "seed": cfg.seed,
            "method": "snn"}
    try:
        result = train(train_set, cfg, values["iterations"], testset=test_set,
                       on_record=lambda r: log.info("iteration %d objective %.6g consistency %.4f",
                                                    r["iteration"], r["objective"], r["consistency"]))
    except TrainingAborted as exc:
        meta.update(aborted_at=exc.iteration)
        _write_run_outputs(out, exc.log, exc.weights, tile, meta,
                           ("objective", "consistency", "symmetry"))
        print(f"error: current bound exceeded: {exc.cause}", file=sys.stderr)
        return 2
    _write_run_outputs(out, result.log, result.weights, tile, meta,
                       ("objective", "consistency", "symmetry"))
    return 0


def cmd_train_sgd(args, values):
    from .model import weights_from_dictionary
    from .oracle import SGDConfig, sgd_train

    cfg = run_config(values)
    train_set, test_set, tile = load_dataset(values)
    if values["sgd_eta"] < 0:
        raise ConfigError("sgd_eta must be non-negative")
    scfg = SGDConfig(eta=values["sgd_eta"], lambda1=cfg.lambda1, n_atoms=cfg.n_atoms,
                     seed=cfg.seed, metrics_every=cfg.metrics_every)
    D, records, _ = sgd_train(train_set, scfg, values["iterations"], testset=test_set)
    meta = {"iterations": values["iterations"], "seed": cfg.seed, "method": "sgd",
            "eta": values["sgd_eta"]}
    _write_run_outputs(Path(values["out"]), records, weights_from_dictionary(D, cfg.lambda1),
                       tile, meta, ("objective",))
    return 0


def cmd_sparse_code(args, values):
    import numpy as np

    from .coding import sparse_code
    from .oracle import LassoProblem, solve_nn_lasso

    w = _load_weights(args.weights)
    x = load_vector(args.input, w.n_inputs)
    if args.oracle or args.compare:
        a_or, _ = solve_nn_lasso(LassoProblem(w.B, x, w.lambda1, w.s), tol=1e-10, max_iter=100_000)
    if args.oracle:
        code = a_or
    else:
        code, _ = sparse_code(w, x, T=args.T, dt=args.dt, gamma=args.gamma,
                              current_bound=values["current_bound"])
    for i in np.flatnonzero(code):
        print(f"{i},{_fmt(code[i])}")
    if args.compare and not args.oracle:
        print(f"gap,{_fmt(float(np.max(np.abs(code - a_or), initial=0.0)))}")
    return 0


def cmd_denoise(args, values):
    import numpy as np

    from .coding import sparse_code
    from .data_io import add_gaussian_noise, calibrate_sigma, load_pgm, reference_image, save_pgm
    from .metrics import denoise, psnr

    w = _load_weights(args.weights)
    if args.clean == "reference":
        clean = reference_image()
    else:
        if not Path(args.clean).is_file():
            raise ConfigError(f"image not found: {args.clean}")
        clean = load_pgm(args.clean)
    if args.target_psnr is not None:
        sigma = calibrate_sigma(clean, args.target_psnr, args.seed)
        log.info("calibrated sigma = %.6g", sigma)
    elif args.sigma is not None:
        sigma = args.sigma
    else:
        raise UsageError("one of --sigma or --target-psnr is required")
    p = args.patch_size or _tile_for(w.n_inputs)[0]
    noisy = add_gaussian_noise(clean, sigma, args.seed)
    coder = None
    if args.coder == "network":
        coder = lambda x: sparse_code(w, x, T=args.T, current_bound=values["current_bound"])[0]
    den, l0 = denoise(w.B, noisy, patch_size=p, lambda1=w.lambda1, stride=args.stride, coder=coder)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_pgm(out / "noisy.pgm", noisy)
    save_pgm(out / "denoised.pgm", den)
    print("psnr_noisy,psnr_denoised,mean_l0")
    print(f"{psnr(clean, noisy):.4f},{psnr(clean, den):.4f},{l0:.4f}")
    return 0


def cmd_raster(args, values):
    from .engine import write_raster_csv
    from .learning import contrastive_run

    w = _load_weights(args.weights)
    x = load_vector(args.input, w.n_inputs)
    cfg = run_config(values).replace(T_phase=args.T, dt=args.dt, kappa=args.kappa)
    _, sim = contrastive_run(w, x, cfg, record_spikes=True, return_sim=True)
    write_raster_csv(sys.stdout if args.out == "-" else args.out, sim.spike_log(), cfg.dt)
    return 0


def cmd_metrics(args, values):
    import numpy as np

    from .metrics import consistency, jsonl_line, symmetry
    from .oracle import surrogate_objective

    w = _load_weights(args.weights)
    rec = {
        "consistency": consistency(w.H, w.F, w.B),
        "symmetry": symmetry(w.F, w.B),
        "mean_atom_norm": float(np.linalg.norm(w.F, axis=1).mean()),
        "objective": float("nan"),
    }
    if args.config is not None:
        _, test_set, _ = load_dataset(values)
        if test_set is not None and np.all(w.F >= 0):
            rec["objective"] = surrogate_objective(w.F.T, test_set, values["lambda1"])
    print(jsonl_line(rec))
    return 0


# --- argument parsing ------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--threads", type=int, help="numba thread count")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="spikedict", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    for name, fn, helptext in (("train-snn", cmd_train_snn, "train the spiking network"),
                               ("train-sgd", cmd_train_sgd, "train the projected SGD baseline")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--seed", type=int)
        p.add_argument("--iterations", type=int)
        p.add_argument("--out")
        p.set_defaults(func=fn)

    p = sub.add_parser("sparse-code", parents=[common], help="code one input vector")
    p.add_argument("weights", help="checkpoint directory")
    p.add_argument("input", help="input vector (.dlm, .pgm or text)")
    p.add_argument("--gamma", type=float, default=0.0)
    p.add_argument("--T", type=float, default=200.0)
    p.add_argument("--dt", type=float, default=1.0 / 32.0)
    p.add_argument("--oracle", action="store_true", help="print the coordinate-descent code instead")
    p.add_argument("--compare", action="store_true", help="also print the l-inf gap to the oracle")
    p.set_defaults(func=cmd_sparse_code)

    p = sub.add_parser("denoise", parents=[common], help="denoise an image with a dictionary")
    p.add_argument("weights", help="checkpoint directory")
    p.add_argument("clean", help="clean PGM image, or 'reference'")
    p.add_argument("--sigma", type=float)
    p.add_argument("--target-psnr", type=float, help="calibrate sigma to this noisy PSNR")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--patch-size", type=int)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--coder", choices=("oracle", "network"), default="oracle")
    p.add_argument("--T", type=float, default=200.0)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("raster", parents=[common], help="spike raster of one contrastive pair")
    p.add_argument("weights", help="checkpoint directory")
    p.add_argument("input", help="input vector (.dlm, .pgm or text)")
    p.add_argument("--T", type=float, default=20.0, help="duration of each phase")
    p.add_argument("--dt", type=float, default=1.0 / 32.0)
    p.add_argument("--kappa", type=float, default=0.7)
    p.add_argument("--out", default="-", help="CSV path, '-' for stdout")
    p.set_defaults(func=cmd_raster)

    p = sub.add_parser("metrics", parents=[common], help="consistency / symmetry / objective of a checkpoint")
    p.add_argument("weights", help="checkpoint directory")
    p.set_defaults(func=cmd_metrics)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        overrides = list(args.set)
        for key in ("seed", "iterations", "out"):
            if getattr(args, key, None) is not None:
                overrides.append(f"{key}={getattr(args, key)}")
        values = load_config(args.config, overrides)
        apply_threads(resolve_threads(args.threads, values["threads"]))
        return args.func(args, values)
    except (ConfigError, UsageError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SpikeDictError as exc:
        # engine aborts outside training (coding, raster)
        from .model import CurrentBoundExceeded

        if isinstance(exc, CurrentBoundExceeded):
            print(f"error: current bound exceeded: {exc}", file=sys.stderr)
            return 2
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
