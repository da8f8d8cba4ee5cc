"""Command-line entry point: ``uisrnn <subcommand> ...``.

Options may also come from a JSON or TOML file given with ``--config``; keys
are the long option names (dashes or underscores) of the chosen subcommand.
Explicit flags override the file.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from uisrnn import io as uio
from uisrnn.data import (
    PcaProjection,
    format_rttm,
    frame_speaker_sets,
    labels_to_segments,
    parse_rttm,
    pca_apply_dataset,
    pca_fit,
    stratified_split,
)
from uisrnn.decoder import (
    DecodeConfig,
    beam_search,
    cumulative_mean_search,
    decode_many,
    fit_cumulative_mean_sigma2,
)
from uisrnn.errors import DimensionMismatchError, UisRnnError
from uisrnn.evaluation import FrameReference, der_corpus, format_domain_table
from uisrnn.model import ModelConfig, load_checkpoint, save_checkpoint
from uisrnn.priors import PriorParams, estimate_priors
from uisrnn.synthesis import SynthConfig, generate
from uisrnn.training import TrainConfig, train, validation_der

logger = logging.getLogger("uisrnn")

GLOBAL_KEYS = {"seed", "threads"}


class _JsonFormatter(logging.Formatter):
    def format(self, record):
        return json.dumps({"level": record.levelname, "logger": record.name, "message": record.getMessage()})


def _setup_logging(as_json: bool, verbose: bool):
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonFormatter() if as_json else logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(logging.INFO if verbose else logging.WARNING)
    logger.setLevel(logging.INFO)


def _load_config_file(path) -> dict:
    path = Path(path)
    text = path.read_bytes()
    if path.suffix.lower() == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # python < 3.11
            import tomli as tomllib
        data = tomllib.loads(text.decode("utf-8"))
    else:
        data = json.loads(text)
    if not isinstance(data, dict):
        raise UisRnnError(f"{path}: config must be a mapping")
    return {k.replace("-", "_"): v for k, v in data.items()}


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _add_train_options(p):
    p.add_argument("--train", required=True, help="training manifest")
    p.add_argument("--val", help="validation manifest (default: stratified split of --train)")
    p.add_argument("--split-ratio", type=float, default=0.8)
    p.add_argument("--loss", choices=["mse", "sml"], default="sml")
    p.add_argument("--num-samples", type=int, default=2)
    p.add_argument("--permutations", type=int, default=10)
    p.add_argument("--beam-val", type=int, default=2)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--max-iterations", type=int)
    p.add_argument("--eval-every", type=int, default=1)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch", type=int, default=10)
    p.add_argument("--hidden", type=int, default=200)
    p.add_argument("--l2", type=float, default=1e-5)
    p.add_argument("--sigma2-init", type=float, default=0.1)
    p.add_argument("--sigma2-prior", type=float, nargs=2, default=[1.0, 1.0], metavar=("A", "B"))
    p.add_argument("--crop", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uisrnn", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="JSON or TOML file with option defaults")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    parser.add_argument("--log-json", action="store_true")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--recordings", type=int, default=10)
    p.add_argument("--speakers", type=int, default=4)
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--mean-scale", type=float, default=1.0)
    p.add_argument("--sigma", type=float, default=0.1)
    p.add_argument("--frames", type=int, default=200)
    p.add_argument("--p0", type=float, default=0.05)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--overlap", type=float, default=0.0)
    p.add_argument("--domain", default="synthetic")
    p.add_argument("--prefix", default="rec")
    p.add_argument("--rttm", action="store_true", help="write RTTM references instead of label files")

    p = sub.add_parser("pca", help="fit or apply a PCA projection")
    pca_sub = p.add_subparsers(dest="pca_command", required=True)
    q = pca_sub.add_parser("fit")
    q.add_argument("--manifest", required=True)
    q.add_argument("--dim", type=int, default=200)
    q.add_argument("--out", required=True, help="projection file (.npz)")
    q = pca_sub.add_parser("apply")
    q.add_argument("--projection", required=True)
    q.add_argument("--manifest", required=True)
    q.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("estimate-priors", help="print alpha and p0 estimated from labels")
    p.add_argument("--manifest", required=True)

    p = sub.add_parser("train", help="train a speaker model")
    _add_train_options(p)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--report", help="JSON-lines training report path")

    p = sub.add_parser("decode", help="decode label sequences")
    p.add_argument("--model", help="checkpoint (required unless --baseline with --sigma2)")
    p.add_argument("--input", required=True, help="UEMB file or dataset manifest")
    p.add_argument("--beam", type=int, default=15)
    p.add_argument("--max-speakers", type=int)
    p.add_argument("--out", required=True, help="labels file (single input) or output directory")
    p.add_argument("--rttm", action="store_true", help="also write RTTM")
    p.add_argument("--baseline", choices=["cumulative-mean"])
    p.add_argument("--sigma2", type=float, help="observation variance for the baseline")
    p.add_argument("--fit-sigma2", metavar="MANIFEST",
                   help="fit the baseline variance by maximum likelihood on a labeled manifest")
    p.add_argument("--alpha", type=float)
    p.add_argument("--p0", type=float)
    p.add_argument("--trace", action="store_true")

    p = sub.add_parser("evaluate", help="score hypotheses against references")
    p.add_argument("--ref", required=True, help="manifest, labels file or RTTM file")
    p.add_argument("--hyp", required=True, help="decode output directory or labels file")
    p.add_argument("--exclude-overlap", action="store_true")
    p.add_argument("--per-domain", action="store_true")

    p = sub.add_parser("sweep-n", help="DER as a function of the SML sample count")
    _add_train_options(p)
    p.add_argument("--values", type=_int_list, default=[1, 2, 3, 4, 5, 7, 10])
    p.add_argument("--beam", type=int, default=2)
    p.add_argument("--out", help="JSON output path (default: stdout)")
    return parser


def _subparser(parser: argparse.ArgumentParser, argv) -> argparse.ArgumentParser:
    ns, _ = parser.parse_known_args(argv)
    action = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    sp = action.choices[ns.command]
    if ns.command == "pca" and getattr(ns, "pca_command", None):
        inner = next(a for a in sp._actions if isinstance(a, argparse._SubParsersAction))
        sp = inner.choices[ns.pca_command]
    return sp


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        config = _load_config_file(args.config)
        sp = _subparser(parser, argv)
        known = {a.dest for a in sp._actions} - {"help"}
        unknown = set(config) - known - GLOBAL_KEYS
        if unknown:
            raise UisRnnError(f"unknown config keys for {args.command}: {sorted(unknown)}")
        parser.set_defaults(**{k: v for k, v in config.items() if k in GLOBAL_KEYS})
        sp.set_defaults(**{k: v for k, v in config.items() if k in known})
        args = parser.parse_args(argv)
    return args


def _train_configs(args, loss=None, num_samples=None):
    model_cfg = dict(hidden_units=args.hidden, head_units=args.hidden, sigma2_init=args.sigma2_init)
    train_cfg = TrainConfig(
        loss=loss or args.loss,
        num_samples=num_samples or args.num_samples,
        learning_rate=args.lr,
        batch_size=args.batch,
        epochs=args.epochs,
        max_iterations=args.max_iterations,
        l2_weight=args.l2,
        sigma2_prior=tuple(args.sigma2_prior),
        seed=args.seed,
        crop_length=args.crop,
        permutations=args.permutations,
        eval_every=args.eval_every,
        val_beam=args.beam_val,
    )
    return model_cfg, train_cfg


def _train_val(args):
    train_set = uio.load_dataset(args.train)
    if args.val:
        return train_set, uio.load_dataset(args.val)
    return stratified_split(train_set, args.split_ratio, args.seed)


def _log_resolved(args):
    resolved = {k: v for k, v in sorted(vars(args).items()) if k != "config"}
    logger.info("resolved config: %s", json.dumps(resolved, sort_keys=True, default=str))


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------


def cmd_simulate(args):
    out = Path(args.out)
    cfg = SynthConfig(
        num_speakers=args.speakers, dim=args.dim, mean_scale=args.mean_scale, sigma=args.sigma,
        num_frames=args.frames, p0=args.p0, alpha=args.alpha, seed=args.seed, overlap_fraction=args.overlap,
    )
    entries = []
    for i in range(args.recordings):
        synth = generate(cfg, f"{args.prefix}{i:04d}", args.domain)
        entries.append(uio.save_recording(synth.recording, out, rttm=args.rttm))
    uio.write_manifest(entries, out / "manifest.json")
    print(str(out / "manifest.json"))
    return 0


def _save_projection(proj: PcaProjection, path):
    with open(path, "wb") as fh:
        np.savez(fh, mean=proj.mean, basis=proj.basis, variances=proj.variances,
                 total_variance=np.asarray(proj.total_variance))


def _load_projection(path) -> PcaProjection:
    with np.load(path) as z:
        return PcaProjection(z["mean"], z["basis"], z["variances"], float(z["total_variance"]))


def cmd_pca(args):
    dataset = uio.load_dataset(args.manifest)
    if args.pca_command == "fit":
        proj = pca_fit([r.embeddings for r in dataset], args.dim)
        _save_projection(proj, args.out)
        print(json.dumps({"input_dim": proj.input_dim, "output_dim": proj.output_dim,
                          "captured_fraction": proj.captured_fraction()}, sort_keys=True))
        return 0
    proj = _load_projection(args.projection)
    projected = pca_apply_dataset(proj, dataset)
    out = Path(args.out)
    entries = [uio.save_recording(r, out, rttm=r.reference is not None) for r in projected]
    uio.write_manifest(entries, out / "manifest.json")
    print(str(out / "manifest.json"))
    return 0


def cmd_estimate_priors(args):
    dataset = uio.load_dataset(args.manifest)
    priors = estimate_priors([r.labels for r in dataset])
    print(json.dumps({"alpha": priors.alpha, "p0": priors.p0}, sort_keys=True))
    return 0


def cmd_train(args):
    train_set, val_set = _train_val(args)
    model_kw, train_cfg = _train_configs(args)
    model, priors, report = train(train_set, val_set, ModelConfig(train_set.dim, **model_kw), train_cfg)
    save_checkpoint(model, priors, args.out)
    if args.report:
        Path(args.report).write_text(report.to_jsonl(), encoding="utf-8")
    summary = {"alpha": priors.alpha, "p0": priors.p0, "sigma2": float(np.mean(model.sigma2)),
               "iterations": len(report.losses), "best_validation_der": report.best_der}
    print(json.dumps(summary, sort_keys=True))
    return 0


def _decode_inputs(path):
    path = Path(path)
    if path.suffix == ".json":
        dataset = uio.load_dataset(path)
        return [(r.id, r.embeddings) for r in dataset], True
    return [(path.stem, uio.read_embeddings(path))], False


def cmd_decode(args):
    model = priors = None
    if args.model:
        model, priors = load_checkpoint(args.model)
    if args.alpha is not None or args.p0 is not None:
        priors = PriorParams(args.alpha if args.alpha is not None else priors.alpha,
                             args.p0 if args.p0 is not None else priors.p0)
    if priors is None:
        raise UisRnnError("priors unavailable: give --model or both --alpha and --p0")
    config = DecodeConfig(beam_width=args.beam, max_speakers=args.max_speakers)
    inputs, many = _decode_inputs(args.input)
    if args.baseline == "cumulative-mean":
        if args.sigma2 is not None:
            sigma2 = args.sigma2
        elif args.fit_sigma2:
            sigma2 = fit_cumulative_mean_sigma2(uio.load_dataset(args.fit_sigma2))
            logger.info("cumulative-mean sigma2 fitted: %.6g", sigma2)
        elif model is not None:
            sigma2 = float(np.mean(model.sigma2))
        else:
            raise UisRnnError("baseline needs --sigma2, --fit-sigma2 or --model")
        fn = lambda item: cumulative_mean_search(item[1], priors, config, sigma2, trace=args.trace)  # noqa: E731
    else:
        if model is None:
            raise UisRnnError("--model is required")
        for _, emb in inputs:
            if emb.dim != model.dim:
                raise DimensionMismatchError(f"input dim {emb.dim} but model expects {model.dim}")
        fn = lambda item: beam_search(item[1], model, priors, config, trace=args.trace)  # noqa: E731
    results = decode_many(inputs, fn, threads=args.threads)
    out = Path(args.out)
    if many:
        out.mkdir(parents=True, exist_ok=True)
    summary = {}
    for (rec_id, emb), res in zip(inputs, results):
        label_path = out / f"{rec_id}.labels" if many else out
        uio.write_labels(res.labels, label_path)
        if args.rttm:
            segments = labels_to_segments(list(res.labels), rec_id, emb.frame_duration)
            label_path.with_suffix(".rttm").write_text(format_rttm(segments), encoding="utf-8")
        if args.trace:
            label_path.with_suffix(".trace.json").write_text(
                json.dumps({"log_joint": res.log_joint, "margins": res.trace}) + "\n", encoding="utf-8")
        summary[rec_id] = {"log_joint": res.log_joint, "num_speakers": res.labels.num_speakers}
    print(json.dumps(summary, sort_keys=True))
    return 0


def _single_reference(path, num_frames):
    path = Path(path)
    if path.suffix == ".rttm":
        sets = frame_speaker_sets(parse_rttm(path.read_text(encoding="utf-8")), num_frames)
        return FrameReference(tuple(sets))
    return FrameReference.from_labels(uio.read_label_file_raw(path))


def cmd_evaluate(args):
    ref_path, hyp_path = Path(args.ref), Path(args.hyp)
    pairs, domains = [], []
    if ref_path.suffix == ".json":
        dataset = uio.load_dataset(ref_path)
        for rec in dataset:
            hyp = uio.read_label_file_raw(hyp_path / f"{rec.id}.labels")
            ref = FrameReference(tuple(rec.reference_sets()), rec.embeddings.frame_duration)
            pairs.append((ref, hyp))
            domains.append(rec.domain)
    else:
        hyp = uio.read_label_file_raw(hyp_path)
        pairs.append((_single_reference(ref_path, len(hyp)), hyp))
        domains.append("default")
    overall, per_domain = der_corpus(pairs, exclude_overlap=args.exclude_overlap, domains=domains)
    result = overall.to_dict()
    if args.per_domain:
        result["per_domain"] = {d: b.to_dict() for d, b in per_domain.items()}
    print(json.dumps(result, sort_keys=True))
    if args.per_domain:
        print(format_domain_table(per_domain, overall))
    return 0


def cmd_sweep_n(args):
    train_set, val_set = _train_val(args)
    if val_set is None:
        raise UisRnnError("sweep-n needs a validation set")

    rows = []
    for n in args.values:
        model_kw, train_cfg = _train_configs(args, loss="sml", num_samples=n)
        model, priors, _ = train(train_set, val_set, ModelConfig(train_set.dim, **model_kw), train_cfg)
        score = validation_der(model, priors, val_set, beam_width=args.beam)
        logger.info("N=%d: validation DER %.4f", n, score)
        rows.append({"N": n, "der": score})
    text = json.dumps(rows, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "pca": cmd_pca,
    "estimate-priors": cmd_estimate_priors,
    "train": cmd_train,
    "decode": cmd_decode,
    "evaluate": cmd_evaluate,
    "sweep-n": cmd_sweep_n,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (UisRnnError, OSError, ValueError) as exc:
        print(f"uisrnn: error: {exc}", file=sys.stderr)
        return 2
    _setup_logging(args.log_json, args.verbose)
    _log_resolved(args)
    try:
        return COMMANDS[args.command](args)
    except (UisRnnError, OSError, ValueError, KeyError) as exc:
        print(f"uisrnn: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
