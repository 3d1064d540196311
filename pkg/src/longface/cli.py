"""Command-line entry point: ``longface <command> [options]``.

Exit codes: 0 success, 2 bad arguments, 3 input validation failure,
4 non-convergence, 5 I/O failure. Data go to ``--out`` (or standard output),
logs to standard error. Every artifact embeds the resolved configuration and
the tool version; floats are written with 17 significant digits.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from ._io import atomic_write_text, dumps, fmt_float
from .data import (
    DataError,
    StandardizationParams,
    export_dataset,
    ingest_dataset,
    load_dataset,
    longitudinal_observations,
    read_embeddings,
    scores_from_embeddings,
    summarize,
)
from .fusion import FusionSpec, fuse_sum
from .lmm import LmmFit, ModelSpec, fit_ml
from .longitudinal import (
    DEFAULT_HORIZON,
    bootstrap_fit,
    crossing_time,
    one_sd_time,
    population_band,
    standardized_threshold,
)
from .metrics import (
    PROTOCOL_METADATA,
    default_protocol,
    impostor_thresholds,
    matcher_scores_split,
    open_set_identify,
    verification_by_elapsed_time,
)
from .synthgen import clf_shaped, generate_longitudinal

log = logging.getLogger("longface")

EXIT_ARGS, EXIT_INPUT, EXIT_CONVERGENCE, EXIT_IO = 2, 3, 4, 5
_NOT_CONFIG = {"out", "threads", "verbose", "func"}
_PAIRING = {"enrollment": "enrollment_anchored", "all": "all_pairs"}


class NonConvergence(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# argument types


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _fars(text):
    vals = _floats(text)
    if not vals or any(not 0 < v <= 1 for v in vals):
        raise argparse.ArgumentTypeError(f"FAR targets must lie in (0, 1], got {text!r}")
    return vals


def _ints(text, minimum=None):
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or (minimum is not None and any(v < minimum for v in vals)):
        raise argparse.ArgumentTypeError(f"expected integers >= {minimum}, got {text!r}")
    return vals


def _fraction(text):
    v = float(text)
    if not 0 < v < 1:
        raise argparse.ArgumentTypeError(f"expected a value in (0, 1), got {text!r}")
    return v


def _fractions(text):
    vals = _floats(text)
    if not vals or any(not 0 < v < 1 for v in vals):
        raise argparse.ArgumentTypeError(f"expected values in (0, 1), got {text!r}")
    return vals


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}")
    return v


def _positive(text):
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text!r}")
    return v


def _grid(text):
    """``start:stop:step`` inclusive of ``stop`` (to rounding)."""
    try:
        start, stop, step = (float(v) for v in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must be start:stop:step, got {text!r}") from None
    if step <= 0 or stop < start or start < 0:
        raise argparse.ArgumentTypeError(f"grid needs 0 <= start <= stop and step > 0, got {text!r}")
    n = int(math.floor((stop - start) / step + 1e-9)) + 1
    return [start + k * step for k in range(n)]


def _fuse_pair(text):
    parts = text.split("+")
    if len(parts) != 2 or not all(parts):
        raise argparse.ArgumentTypeError(f"--fuse expects a+b, got {text!r}")
    return parts


def _gender(text):
    v = {"0": 0, "girl": 0, "f": 0, "1": 1, "boy": 1, "m": 1}.get(text.lower())
    if v is None:
        raise argparse.ArgumentTypeError(f"gender must be girl/boy/0/1, got {text!r}")
    return v


# ---------------------------------------------------------------------------
# output helpers


def _config(args) -> dict:
    cfg = {k: v for k, v in vars(args).items() if k not in _NOT_CONFIG}
    return json.loads(json.dumps(cfg, default=str))


def _envelope(args, result) -> dict:
    return {"tool": "longface", "version": __version__, "command": args.command, "config": _config(args), **result}


def _csv_header(args) -> str:
    cfg = json.dumps(_config(args), sort_keys=True, separators=(",", ":"))
    return f"# longface {__version__} {args.command}\n# config: {cfg}\n"


def _rows_csv(rows, columns) -> str:
    lines = [",".join(columns)]
    for r in rows:
        lines.append(",".join(fmt_float(r[c]) if isinstance(r[c], float) else str(r[c]) for c in columns))
    return "\n".join(lines) + "\n"


def _emit_json(args, name, result):
    text = dumps(_envelope(args, result))
    if args.out:
        atomic_write_text(Path(args.out) / name, text)
    else:
        sys.stdout.write(text)


def _emit_csv(args, name, text):
    if args.out:
        atomic_write_text(Path(args.out) / name, _csv_header(args) + text)


# ---------------------------------------------------------------------------
# dataset loading


def _dataset(args):
    ds = load_dataset(args.data)
    if getattr(args, "fuse", None):
        a, b = args.fuse
        ds = fuse_sum(ds, FusionSpec(a, b, args.fuse_norm, getattr(args, "fuse_label", None)))
        log.info("fused %s and %s into %s", a, b, ds.matcher_ids)
    return ds


def _observations(ds, args):
    obs, params = longitudinal_observations(ds, args.matcher, standardize_on=_PAIRING[args.standardize_on])
    return obs, params


def _fit_record(fit: LmmFit, params: StandardizationParams | None, matcher, standardize_on) -> dict:
    d = fit.to_dict()
    d["matcher"] = matcher
    d["pairing"] = "enrollment_anchored"
    d["standardization"] = (
        {"mean": params.mean, "std_dev": params.std_dev, "computed_on": standardize_on} if params else None
    )
    return d


def _load_fit(path):
    with open(path) as fh:
        doc = json.load(fh)
    rec = doc.get("fit", doc)
    std = rec.get("standardization")
    params = StandardizationParams(std["mean"], std["std_dev"]) if std else None
    return LmmFit.from_dict(rec), params, rec


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args):
    if args.preset != "clf-shaped":
        raise DataError(f"unknown preset {args.preset!r}")
    spec = clf_shaped(seed=args.seed, n_subjects=args.subjects, n_singletons=args.singletons)
    ds, truth = generate_longitudinal(spec)
    header = _csv_header(args)
    export_dataset(ds, args.out, header)
    truth = {k: v for k, v in truth.items()}
    for m in truth["matchers"].values():
        m.pop("random_effects")
    atomic_write_text(Path(args.out) / "truth.json", dumps(_envelope(args, {"truth": truth, "counts": ds.counts()})))
    log.info("wrote %d subjects, %d images to %s", len(ds.subjects), ds.n_images, args.out)


def cmd_ingest(args):
    ds = ingest_dataset(args.acquisitions, args.scores)
    if args.embeddings:
        ds = scores_from_embeddings(ds, read_embeddings(args.embeddings), args.embedding_matcher)
    export_dataset(ds, args.out, _csv_header(args))
    atomic_write_text(Path(args.out) / "ingest.json", dumps(_envelope(args, {"counts": ds.counts()})))
    log.info("ingested %s", ds.counts())


def cmd_summary(args):
    _emit_json(args, "summary.json", {"summary": summarize(_dataset(args))})


def cmd_fuse(args):
    ds = load_dataset(args.data)
    a, b = args.fuse
    ds = fuse_sum(ds, FusionSpec(a, b, args.fuse_norm, args.fuse_label))
    export_dataset(ds, args.out, _csv_header(args))
    atomic_write_text(Path(args.out) / "fuse.json", dumps(_envelope(args, {"counts": ds.counts()})))


def cmd_verify(args):
    ds = _dataset(args)
    rows = verification_by_elapsed_time(ds, args.matcher, args.far, args.buckets, _PAIRING[args.pairing])
    cols = ["bucket_years", "far_target", "threshold", "achieved_far", "tar", "n_genuine", "n_impostor", "status"]
    _emit_csv(args, "verify.csv", _rows_csv(rows, cols))
    _emit_json(args, "verify.json", {"matcher": args.matcher, "protocol": PROTOCOL_METADATA, "rows": rows})


def cmd_openset(args):
    ds = _dataset(args)
    proto = default_protocol(ds, args.ranks, args.far, args.lapse_bucket)
    rows = open_set_identify(ds, args.matcher, proto)
    cols = ["rank", "far_target", "threshold", "achieved_fpir", "dir", "n_mated", "n_nonmated", "status"]
    _emit_csv(args, "openset.csv", _rows_csv(rows, cols))
    meta = dict(PROTOCOL_METADATA, gallery="enrollment image of every multi-image subject",
                nonmated="images of single-image subjects")
    _emit_json(args, "openset.json", {"matcher": args.matcher, "protocol": meta, "rows": rows})


def cmd_fit(args):
    ds = _dataset(args)
    obs, params = _observations(ds, args)
    fit = fit_ml(obs, ModelSpec(args.model), reml=args.reml, max_iter=args.max_iter, tol=args.tol)
    _emit_json(args, "fit.json", {"fit": _fit_record(fit, params, args.matcher, args.standardize_on)})
    if not fit.converged:
        raise NonConvergence("model fit did not converge")


def cmd_bootstrap(args):
    ds = _dataset(args)
    res = bootstrap_fit(
        ds, args.matcher, ModelSpec(args.model), args.B, args.seed, args.level,
        standardize_on=_PAIRING[args.standardize_on], restandardize=args.restandardize,
        n_jobs=args.threads,
    )
    _emit_json(args, "bootstrap.json", {"matcher": args.matcher, "bootstrap": res.to_dict()})
    if res.n_nonconverged == res.n_replicates:
        raise NonConvergence("no bootstrap replicate converged")


def _fit_from_args(args):
    if args.fit:
        fit, params, rec = _load_fit(args.fit)
        return fit, params, rec.get("matcher")
    if not (args.data and args.matcher):
        raise DataError("give --fit, or --data and --matcher to fit on the fly")
    ds = _dataset(args)
    obs, params = _observations(ds, args)
    return fit_ml(obs, ModelSpec(args.model)), params, args.matcher


def cmd_band(args):
    fit, _, matcher = _fit_from_args(args)
    if fit.model.uses_gender and args.gender is None:
        raise DataError("a CGender fit needs --gender for its band")
    band = population_band(fit, args.coverage, args.grid, args.gender, args.include_residual)
    rows = [dict(zip(band, vals)) for vals in zip(*(band[k].tolist() for k in band))]
    text = _rows_csv(rows, ["delta_t", "mean", "lower", "upper"])
    if args.out:
        _emit_csv(args, "band.csv", text)
    else:
        sys.stdout.write(text)


def cmd_crossing(args):
    fit, params, matcher = _fit_from_args(args)
    if fit.model.uses_gender and args.gender is None:
        raise DataError("a CGender fit needs --gender for crossing times")
    if args.threshold is not None:
        thresholds = [(None, None, args.threshold)]
    else:
        if not (args.data and matcher):
            raise DataError("--far needs --data (and a matcher) to derive thresholds from impostor scores")
        if params is None:
            raise DataError("the fit carries no standardization, so raw thresholds cannot be converted")
        ds = _dataset(args)
        _, imp = matcher_scores_split(ds, matcher)
        thresholds = [
            (far, raw, standardized_threshold(raw, params))
            for far, (raw, _, _) in zip(args.far, impostor_thresholds(imp, args.far))
        ]
    out = []
    for far, raw, thr in thresholds:
        for q in args.fraction:
            r = crossing_time(fit, thr, q, args.horizon, args.gender, args.include_residual)
            out.append(dict(r.to_dict(), far=far, raw_threshold=raw, matcher=matcher))
    _emit_json(args, "crossing.json", {"matcher": matcher, "crossings": out})


def _report_matcher(ds, m, args):
    obs, params = longitudinal_observations(ds, m, standardize_on=_PAIRING[args.standardize_on])
    rec = {
        "verification": verification_by_elapsed_time(ds, m, args.far, args.buckets),
        "openset": {
            str(k): open_set_identify(ds, m, default_protocol(ds, args.ranks, args.openset_far, k))
            for k in args.openset_buckets
        },
        "standardization": {"mean": params.mean, "std_dev": params.std_dev},
    }
    _, imp = matcher_scores_split(ds, m)
    raw_thr = [t for t, _, _ in impostor_thresholds(imp, args.far)]
    models = {}
    for kind in ("BT", "CGender"):
        fit = fit_ml(obs, ModelSpec(kind))
        genders = [None] if kind == "BT" else [0, 1]
        entry = {"fit": _fit_record(fit, params, m, args.standardize_on), "one_sd_time": {}, "bands": {}, "crossings": []}
        for g in genders:
            label = "all" if g is None else ("girl", "boy")[g]
            try:
                entry["one_sd_time"][label] = one_sd_time(fit, g)
            except ValueError:
                entry["one_sd_time"][label] = None
            entry["bands"][label] = population_band(fit, args.coverage, args.grid, g)
            for far, raw in zip(args.far, raw_thr):
                thr = standardized_threshold(raw, params)
                for q in args.fractions:
                    c = crossing_time(fit, thr, q, DEFAULT_HORIZON, g)
                    entry["crossings"].append(dict(c.to_dict(), far=far, raw_threshold=raw, gender=label))
        models[kind] = entry
    rec["models"] = models
    if args.B:
        res = bootstrap_fit(ds, m, ModelSpec("BT"), args.B, args.seed, args.level, n_jobs=args.threads)
        b = res.to_dict()
        b.pop("replicates")
        b.pop("converged")
        rec["bootstrap_BT"] = b
    return rec


def cmd_report(args):
    ds = _dataset(args)
    matchers = args.matchers or list(ds.matcher_ids)
    if args.B and args.seed is None:
        raise DataError("--seed is required when bootstrapping")
    result = {
        "summary": summarize(ds),
        "protocol": PROTOCOL_METADATA,
        "matchers": {m: _report_matcher(ds, m, args) for m in matchers},
    }
    _emit_json(args, "report.json", result)


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="longface", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"longface {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True, out_required=False, fuse=True):
        if data:
            sp.add_argument("--data", required=True, help="directory with acquisitions.csv and scores.csv")
        sp.add_argument("--out", required=out_required, help="output directory (default: standard output)")
        sp.add_argument("--threads", type=_positive_int, default=os.cpu_count() or 1)
        sp.add_argument("-v", "--verbose", action="count", default=0)
        if fuse:
            sp.add_argument("--fuse", type=_fuse_pair, help="add a fused matcher a+b before running")
            sp.add_argument("--fuse-norm", default="zscore", choices=["zscore", "minmax", "identity"])
            sp.add_argument("--fuse-label", help="matcher id of the fused scores (default fused(a+b))")

    def model_opts(sp, matcher_required=True):
        sp.add_argument("--matcher", required=matcher_required)
        sp.add_argument("--model", default="bt", choices=["bt", "gender"])
        sp.add_argument("--standardize-on", default="enrollment", choices=sorted(_PAIRING),
                        help="genuine set defining the score mean and sd")

    sp = sub.add_parser("synth", help="write a synthetic dataset")
    sp.add_argument("--preset", default="clf-shaped", choices=["clf-shaped"])
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--subjects", type=_positive_int, default=120)
    sp.add_argument("--singletons", type=int, default=100)
    common(sp, data=False, out_required=True, fuse=False)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("ingest", help="validate CSV inputs and write the canonical form")
    sp.add_argument("--acquisitions", required=True)
    sp.add_argument("--scores")
    sp.add_argument("--embeddings", help="image_id,d,v_0.. rows scored by cosine similarity")
    sp.add_argument("--embedding-matcher", default="cosine")
    common(sp, data=False, out_required=True, fuse=False)
    sp.set_defaults(func=cmd_ingest)

    sp = sub.add_parser("summary", help="dataset statistics")
    common(sp)
    sp.set_defaults(func=cmd_summary)

    sp = sub.add_parser("fuse", help="write the dataset with a fused matcher added")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--fuse", type=_fuse_pair, required=True)
    sp.add_argument("--fuse-norm", default="zscore", choices=["zscore", "minmax", "identity"])
    sp.add_argument("--fuse-label")
    sp.add_argument("--threads", type=_positive_int, default=os.cpu_count() or 1)
    sp.add_argument("-v", "--verbose", action="count", default=0)
    sp.set_defaults(func=cmd_fuse)

    sp = sub.add_parser("verify", help="TAR at FAR per elapsed-time bucket")
    sp.add_argument("--matcher", required=True)
    sp.add_argument("--far", type=_fars, default=[1e-4, 1e-3])
    sp.add_argument("--buckets", type=lambda t: _ints(t, 0), default=[1, 3, 5])
    sp.add_argument("--pairing", default="enrollment", choices=sorted(_PAIRING))
    common(sp)
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("openset", help="DIR at rank and FAR")
    sp.add_argument("--matcher", required=True)
    sp.add_argument("--ranks", type=lambda t: _ints(t, 1), default=[1, 3])
    sp.add_argument("--far", type=_fars, default=[0.01])
    sp.add_argument("--lapse-bucket", type=int, help="only mated probes whose lapse rounds to this many years")
    common(sp)
    sp.set_defaults(func=cmd_openset)

    sp = sub.add_parser("fit", help="fit a mixed-effects model")
    model_opts(sp)
    sp.add_argument("--pairing", default="enrollment", choices=["enrollment"])
    sp.add_argument("--reml", action="store_true")
    sp.add_argument("--max-iter", type=_positive_int, default=2000)
    sp.add_argument("--tol", type=_positive, default=1e-8)
    common(sp)
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("bootstrap", help="subject-level bootstrap of model parameters")
    model_opts(sp)
    sp.add_argument("-B", type=_positive_int, default=1000)
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--level", type=_fraction, default=0.95)
    sp.add_argument("--restandardize", action="store_true", help="recompute score mean/sd inside each replicate")
    common(sp)
    sp.set_defaults(func=cmd_bootstrap)

    for name, fn, helptext in (("band", cmd_band, "population trend band"),
                               ("crossing", cmd_crossing, "threshold crossing times")):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--fit", help="fit.json written by the fit command")
        sp.add_argument("--data")
        model_opts(sp, matcher_required=False)
        sp.add_argument("--gender", type=_gender, help="girl/boy, required for gender models")
        sp.add_argument("--include-residual", action="store_true")
        sp.add_argument("--out")
        sp.add_argument("--threads", type=_positive_int, default=os.cpu_count() or 1)
        sp.add_argument("-v", "--verbose", action="count", default=0)
        sp.add_argument("--fuse", type=_fuse_pair)
        sp.add_argument("--fuse-norm", default="zscore", choices=["zscore", "minmax", "identity"])
        sp.add_argument("--fuse-label")
        if name == "band":
            sp.add_argument("--coverage", type=_fraction, default=0.80)
            sp.add_argument("--grid", type=_grid, default=_grid("0:8:0.1"))
        else:
            g = sp.add_mutually_exclusive_group(required=True)
            g.add_argument("--far", type=_fars)
            g.add_argument("--threshold", type=float, help="threshold in standardized units")
            sp.add_argument("--fraction", type=_fractions, default=[0.99])
            sp.add_argument("--horizon", type=_positive, default=DEFAULT_HORIZON)
        sp.set_defaults(func=fn)

    sp = sub.add_parser("report", help="full analysis bundle")
    sp.add_argument("--matchers", type=lambda t: [m for m in t.split(",") if m])
    sp.add_argument("--far", type=_fars, default=[1e-4, 1e-3])
    sp.add_argument("--buckets", type=lambda t: _ints(t, 0), default=[1, 3, 5])
    sp.add_argument("--ranks", type=lambda t: _ints(t, 1), default=[1, 3])
    sp.add_argument("--openset-far", type=_fars, default=[0.01])
    sp.add_argument("--openset-buckets", type=lambda t: _ints(t, 0), default=[1, 7])
    sp.add_argument("--coverage", type=_fraction, default=0.80)
    sp.add_argument("--grid", type=_grid, default=_grid("0:8:0.5"))
    sp.add_argument("--fractions", type=_fractions, default=[0.95, 0.99])
    sp.add_argument("--standardize-on", default="enrollment", choices=sorted(_PAIRING))
    sp.add_argument("-B", type=int, default=0, help="bootstrap replicates (0 skips)")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--level", type=_fraction, default=0.95)
    common(sp)
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    np.seterr(all="ignore")
    try:
        args.func(args)
    except NonConvergence as e:
        log.error("%s", e)
        return EXIT_CONVERGENCE
    except (DataError, ValueError) as e:
        log.error("%s", e)
        return EXIT_INPUT
    except OSError as e:
        log.error("%s", e)
        return EXIT_IO
    return 0


if __name__ == "__main__":
    sys.exit(main())
