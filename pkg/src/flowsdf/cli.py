"""Command-line entry point: corpus generation, two-stage training, optimization, evaluation, reports.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

import argparse
import json
import logging
import os
import sys

import numpy as np

from .corpus import CorpusManifest
from .experiments import (
    FLOW_MODES,
    OPTIMIZERS,
    PROTOCOLS,
    ExperimentConfig,
    ReferenceCache,
    TrainedModel,
    TrialResult,
    evaluate_trial,
    make_manifest,
    make_trials,
    per_object_rows,
    rows_to_csv,
    run_trials,
    summary_rows,
    trial_rows,
)
from .decoder import train_decoder
from .flow import FlowInversionError, train_flow
from .mesh import load_obj, save_obj
from .observations import load_bundle, save_bundle
from .weights_io import ChecksumError, load_weights, save_weights

logger = logging.getLogger("flowsdf")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

CORPUS_FILE = "corpus.json"
DECODER_FILE = "decoder.nfwt"
FLOW_FILE = "flow.nfwt"
METRIC_COLUMNS = ["object", "shape_seed", "method", "n_views", "chamfer_bi", "chamfer_uni", "iou"]
SUMMARY_COLUMNS = ["trial", "method", "median", "mean", "std"]
TRIAL_COLUMNS = ["trial", "object", "view", "method", "status", "iterations", "chamfer_bi", "chamfer_uni", "iou"]
CONVERGENCE_COLUMNS = ["trial", "iteration", "loss", "step_norm", "accepted", "damping"]


class DataError(Exception):
    pass


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _write_text(path, text):
    with open(path, "w") as fh:
        fh.write(text)


def load_config(args):
    """Config file (JSON) with command-line flags applied on top."""
    doc = {}
    if args.config:
        try:
            with open(args.config) as fh:
                doc = json.load(fh)
        except FileNotFoundError:
            raise DataError(f"config file not found: {args.config}")
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file is not valid JSON: {exc}")
    if args.seed is not None:
        doc["master_seed"] = args.seed
    for flag, key in (("mode", "protocol"), ("optimizer", "optimizer"), ("flow", "flow_mode")):
        val = getattr(args, flag, None)
        if val is not None:
            doc[key] = val
    try:
        return ExperimentConfig.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}")


def _echo_config(cfg, out, name="config.json"):
    _write_text(os.path.join(out, name), cfg.to_json())


def _read_manifest(out):
    path = os.path.join(out, CORPUS_FILE)
    if not os.path.exists(path):
        raise DataError(f"corpus manifest missing: {path} (run gen-corpus first)")
    with open(path) as fh:
        return CorpusManifest.from_json(fh.read())


def load_model(out):
    dpath, fpath = os.path.join(out, DECODER_FILE), os.path.join(out, FLOW_FILE)
    for p in (dpath, fpath):
        if not os.path.exists(p):
            raise DataError(f"weights missing: {p} (run train first)")
    try:
        dec = load_weights(dpath)
        fl = load_weights(fpath)
    except (ChecksumError, ValueError) as exc:
        raise DataError(str(exc))
    return TrainedModel(dec["decoder"], dec.get("codes"), fl["flow"], [], [])


# -- commands -------------------------------------------------------------------------------


def cmd_gen_corpus(cfg, out, force=False):
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, CORPUS_FILE)
    manifest = make_manifest(cfg)
    text = manifest.to_json()
    if os.path.exists(path) and not force:
        with open(path) as fh:
            if fh.read() == text:
                return manifest
        raise DataError(f"{path} exists with different content; pass --force to overwrite")
    _write_text(path, text)
    _echo_config(cfg, out)
    return manifest


def cmd_train(cfg, out, stage="all", force=False):
    manifest = _read_manifest(out)
    dpath, fpath = os.path.join(out, DECODER_FILE), os.path.join(out, FLOW_FILE)
    if stage in ("all", "decoder"):
        if os.path.exists(dpath) and not force:
            raise DataError(f"{dpath} exists; pass --force to retrain")
        res = train_decoder(manifest.train_shapes(), cfg.decoder_config())
        save_weights(dpath, decoder=res.theta, codes=res.codes)
        _write_text(dpath + ".log.json", json.dumps({"stage": "decoder", "loss": res.history}, indent=1) + "\n")
    if stage in ("all", "flow"):
        if not os.path.exists(dpath):
            raise DataError("flow training needs the decoder codes; train the decoder stage first")
        if os.path.exists(fpath) and not force and stage == "flow":
            raise DataError(f"{fpath} exists; pass --force to retrain")
        try:
            codes = load_weights(dpath)["codes"]
        except (ChecksumError, KeyError, ValueError) as exc:
            raise DataError(f"cannot read decoder codes: {exc}")
        fl = train_flow(codes, cfg.flow_config())
        save_weights(fpath, flow=fl.phi)
        _write_text(fpath + ".log.json", json.dumps({"stage": "flow", "mean_loglik": fl.history}, indent=1) + "\n")
    _echo_config(cfg, out, "train_config.json")


def _run_dir(out, cfg):
    return os.path.join(out, "runs", cfg.run_name)


def cmd_optimize(cfg, out, force=False, jobs=1):
    manifest = _read_manifest(out)
    model = load_model(out)
    run = _run_dir(out, cfg)
    if os.path.exists(os.path.join(run, "results.jsonl")) and not force:
        raise DataError(f"{run} already has results; pass --force to overwrite")
    bdir = os.path.join(out, "bundles", cfg.protocol)
    os.makedirs(bdir, exist_ok=True)
    os.makedirs(run, exist_ok=True)
    trials = make_trials(cfg, manifest)
    for trial in trials:
        bpath = os.path.join(bdir, trial.name + ".nfob")
        save_bundle(trial.bundle, bpath)
        trial.bundle = load_bundle(bpath)
    lines = []
    for trial, res in zip(trials, run_trials(model, trials, cfg, jobs)):
        base = os.path.join(run, trial.name)
        if res.mesh is not None:
            save_obj(res.mesh, base + ".obj")
        _write_text(base + ".log.jsonl", "".join(json.dumps(h, sort_keys=True) + "\n" for h in res.history))
        rec = res.to_dict()
        rec["object_pose"] = [float(x) for x in trial.object_pose.as_vector()]
        lines.append(json.dumps(rec, sort_keys=True))
        logger.info("%s %s: %s after %d iterations", cfg.run_name, trial.name, res.status, res.iterations)
    _write_text(os.path.join(run, "results.jsonl"), "\n".join(lines) + "\n")
    _echo_config(cfg, run)
    return run


def cmd_eval(cfg, out):
    from .geometry import SimilarityPose

    manifest = _read_manifest(out)
    run = _run_dir(out, cfg)
    path = os.path.join(run, "results.jsonl")
    if not os.path.exists(path):
        raise DataError(f"no results at {path} (run optimize first)")
    known = set(manifest.heldout_seeds)
    results, metrics = [], []
    refs = ReferenceCache(manifest.family, cfg)
    with open(path) as fh:
        records = [json.loads(line) for line in fh if line.strip()]
    for rec in records:
        if rec["shape_seed"] not in known:
            raise DataError(f"result {rec['name']} refers to shape seed {rec['shape_seed']} outside the held-out split")
        obj = os.path.join(run, rec["name"] + ".obj")
        mesh = load_obj(obj) if os.path.exists(obj) else None
        res = TrialResult.from_dict(rec, mesh)
        pose = SimilarityPose.from_vector(rec["object_pose"])
        shape, reference = refs(rec["shape_seed"], pose)
        metrics.append(evaluate_trial(res, shape, pose, cfg, reference))
        results.append(res)
    rows = per_object_rows(results, metrics, cfg)
    _write_text(os.path.join(run, "metrics.csv"), rows_to_csv(rows, METRIC_COLUMNS))
    _write_text(os.path.join(run, "trials.csv"), rows_to_csv(trial_rows(results, metrics, cfg), TRIAL_COLUMNS))
    _write_text(os.path.join(run, "convergence.csv"), rows_to_csv(_convergence_rows(run, records), CONVERGENCE_COLUMNS))
    summary = []
    for metric, scale in (("chamfer_bi", 1000.0), ("chamfer_uni", 1000.0), ("iou", 1.0)):
        stats, n_failed = summary_rows(rows, metric, scale)
        summary.append({"trial": f"{cfg.protocol}:{metric}", "method": cfg.run_name, **stats})
    _write_text(os.path.join(run, "summary.csv"), rows_to_csv(summary, SUMMARY_COLUMNS))
    return rows, summary


def _convergence_rows(run, records):
    """Per-iteration optimizer records of every trial, for convergence plots."""
    rows = []
    for rec in records:
        path = os.path.join(run, rec["name"] + ".log.jsonl")
        if not os.path.exists(path):
            continue
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    h = json.loads(line)
                    rows.append({"trial": rec["name"], "iteration": h["iteration"], "loss": float(h["loss"]),
                                 "step_norm": float(h["step_norm"]), "accepted": int(bool(h["accepted"])),
                                 "damping": float(h.get("damping", float("nan")))})
    return rows


def cmd_report(out):
    runs_dir = os.path.join(out, "runs")
    if not os.path.isdir(runs_dir):
        raise DataError(f"no runs under {out}")
    lines = []
    header = None
    for name in sorted(os.listdir(runs_dir)):
        path = os.path.join(runs_dir, name, "summary.csv")
        if not os.path.exists(path):
            continue
        with open(path) as fh:
            rows = fh.read().splitlines()
        header = header or rows[0]
        lines.extend(rows[1:])
    if header is None:
        raise DataError("no evaluated runs found (run eval first)")
    text = header + "\n" + "".join(l + "\n" for l in lines)
    _write_text(os.path.join(out, "report.csv"), text)
    return text


# -- argument parsing --------------------------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (JSON)")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("-v", "--verbose", action="store_true")
    run_opts = argparse.ArgumentParser(add_help=False)
    run_opts.add_argument("--mode", choices=PROTOCOLS)
    run_opts.add_argument("--optimizer", choices=OPTIMIZERS)
    run_opts.add_argument("--flow", choices=FLOW_MODES)
    jobs = argparse.ArgumentParser(add_help=False)
    jobs.add_argument("--jobs", type=int, default=1, help="worker processes for independent trials")

    p = _Parser(prog="flowsdf", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("gen-corpus", parents=[common], help="write the corpus manifest")
    t = sub.add_parser("train", parents=[common], help="train the decoder, then the flow")
    t.add_argument("--stage", choices=("all", "decoder", "flow"), default="all")
    sub.add_parser("optimize", parents=[common, run_opts, jobs], help="fit shapes to synthesized observations")
    sub.add_parser("eval", parents=[common, run_opts], help="score optimized shapes against the oracle")
    sub.add_parser("report", parents=[common], help="collect run summaries into one table")
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        if args.command == "gen-corpus":
            cmd_gen_corpus(cfg, args.out, args.force)
        elif args.command == "train":
            cmd_train(cfg, args.out, args.stage, args.force)
        elif args.command == "optimize":
            if args.jobs < 1:
                raise UsageError("--jobs must be at least 1")
            cmd_optimize(cfg, args.out, args.force, args.jobs)
        elif args.command == "eval":
            _, summary = cmd_eval(cfg, args.out)
            sys.stdout.write(rows_to_csv(summary, SUMMARY_COLUMNS))
        elif args.command == "report":
            sys.stdout.write(cmd_report(args.out))
    except UsageError as exc:
        print(f"flowsdf: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"flowsdf: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FloatingPointError, FlowInversionError, np.linalg.LinAlgError) as exc:
        print(f"flowsdf: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
