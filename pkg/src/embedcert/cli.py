"""Command-line interface: ``embedcert {gen-data,certify,sweep,attack,plot}``.

Every flag can also come from ``--config FILE`` (a flat JSON object whose keys
are the flag names with underscores); explicit flags win.  Each run writes the
fully resolved configuration next to its outputs so that
``--config OUT/resolved_config.json`` replays it.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

from .bounds import procedure_error_probability
from .certifier import METHODS
from .embedders import KINDS, EmbedderError
from .harness import (
    ATTACKS,
    SWEEP_AXES,
    ExperimentConfig,
    ExperimentResult,
    PartialRunError,
    SyntheticDatasetSpec,
    UnsupportedAttackError,
    ca_csv,
    certified_accuracy,
    era_csv,
    generate_dataset,
    plot_svg,
    read_dataset,
    run_experiment,
    run_sweep,
    sweep_csv,
    write_dataset,
)
from .smoothing import EmbedderFailure

logger = logging.getLogger("embedcert")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3

_EXPERIMENT_KEYS = {f.name for f in fields(ExperimentConfig)}
# per-command keys that live in the resolved config but not in ExperimentConfig
_EXTRA_KEYS = {"data", "report_epsilon", "axis", "values"}


class UsageError(Exception):
    pass


def _csv_floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _add_data_flags(p):
    g = p.add_argument_group("synthetic data")
    g.add_argument("--n", type=int, help="input dimension (default 128)")
    g.add_argument("--K", type=int, help="number of enrolled speakers (default 118)")
    g.add_argument("--M", type=int, help="enrollment utterances per speaker (default 5)")
    g.add_argument("--inference-per-speaker", type=int, help="inference utterances per test speaker (default 2)")
    g.add_argument("--within-speaker-noise", type=float, help="utterance spread around the prototype (default 0.05)")
    g.add_argument("--test-speakers", type=int, help="number of speakers with inference utterances (default min(K, 118))")
    g.add_argument("--data-seed", type=int, help="dataset seed (default 0)")


def _add_experiment_flags(p):
    _add_data_flags(p)
    p.add_argument("--data", help="dataset file from gen-data; overrides the synthetic data flags")
    g = p.add_argument_group("embedder")
    g.add_argument("--embedder", choices=KINDS, help="embedder kind (default mlp_tanh)")
    g.add_argument("--embed-dim", type=int, help="embedding dimension d (default 16)")
    g.add_argument("--hidden", type=int, help="mlp_tanh hidden width (default 64)")
    g.add_argument("--embedder-seed", type=int, help="weight seed (default 0)")
    g.add_argument("--constant-vector", help="comma-separated vector for the constant embedder")
    g.add_argument("--external-command", help="command line of an external embedding server")
    g = p.add_argument_group("certification")
    g.add_argument("--sigma", type=float, help="noise standard deviation (default 0.01)")
    g.add_argument("--alpha", type=float, help="per-bound error level (default 0.001)")
    g.add_argument("--n-initial", type=int, help="samples per half in each round (default min(10000, n_max/2))")
    g.add_argument("--n-max", type=int, help="total noise-sample budget (default 100000)")
    g.add_argument("--metric", choices=("euclidean", "cosine"), help="centroid distance (default euclidean)")
    g.add_argument("--batch-size", type=int, help="embedder batch size (default 4096)")
    g = p.add_argument_group("evaluation")
    g.add_argument("--eps-points", type=int, help="size of the epsilon grid (default 16)")
    g.add_argument("--eps-min", type=float, help="smallest grid epsilon (default sigma/100)")
    g.add_argument("--eps-max", type=float, help="largest grid epsilon (default 4 sigma)")
    g.add_argument("--attack-samples", type=int, help="noise samples per smoothed prediction (default 1000)")
    g.add_argument("--attack-repetitions", type=int, help="random directions per input (default 20)")
    g.add_argument("--pgd-steps", type=int, help="projected gradient steps (default 10)")
    g.add_argument("--pgd-grad-samples", type=int, help="noise samples per gradient estimate (default 64)")
    g.add_argument("--fd-step", type=float, help="finite-difference step (default 1e-4)")
    g = p.add_argument_group("run")
    g.add_argument("--master-seed", type=int, help="seed from which per-sample seeds derive (default 0)")
    g.add_argument("--jobs", type=int, help="worker processes (default 1)")
    g.add_argument("--timings", dest="record_timings", action="store_const", const=True,
                   help="store wall-clock timings in result files (makes them non-reproducible)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="embedcert", description="Certified robustness for embedding classifiers.",
                                     argument_default=argparse.SUPPRESS)
    parser.add_argument("-v", "--verbose", action="store_true", default=False)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic speaker dataset", argument_default=argparse.SUPPRESS)
    _add_data_flags(p)
    p.add_argument("--seed", dest="data_seed", type=int, help="alias of --data-seed")
    p.add_argument("--config", help="JSON config file; explicit flags override its values")
    p.add_argument("--out", required=True, help="dataset file to write")

    p = sub.add_parser("certify", help="certify every inference utterance", argument_default=argparse.SUPPRESS)
    _add_experiment_flags(p)
    p.add_argument("--method", dest="methods",
                   help=f"comma-separated subset of {','.join(METHODS)} (default ours)")
    p.add_argument("--report-epsilon", type=_csv_floats, help="epsilons for the printed summary (default sigma/2)")
    p.add_argument("--config", help="JSON config file; explicit flags override its values")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("sweep", help="certify across values of one parameter", argument_default=argparse.SUPPRESS)
    _add_experiment_flags(p)
    p.add_argument("--method", dest="methods",
                   help=f"comma-separated subset of {','.join(METHODS)} (default ours)")
    p.add_argument("--axis", choices=SWEEP_AXES, help="parameter to vary")
    p.add_argument("--values", type=_csv_floats, help="comma-separated values of the axis")
    p.add_argument("--config", help="JSON config file; explicit flags override its values")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("attack", help="empirical robust accuracy curves", argument_default=argparse.SUPPRESS)
    _add_experiment_flags(p)
    p.add_argument("--kind", dest="attacks", help=f"comma-separated subset of {','.join(ATTACKS)}")
    p.add_argument("--levels", dest="attack_levels", help="comma-separated attack levels (default epsilon grid)")
    p.add_argument("--config", help="JSON config file; explicit flags override its values")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("plot", help="CSV and SVG from result files", argument_default=argparse.SUPPRESS)
    p.add_argument("--input", required=True, help="result file or directory of result files")
    p.add_argument("--out", help="output directory (default: next to the inputs)")
    p.add_argument("--no-svg", action="store_true", default=False, help="write the CSV files only")
    return parser


def resolve(args: argparse.Namespace, command_keys: set) -> dict:
    """Config file values overlaid with explicit flags."""
    resolved = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file {path} not found")
        try:
            resolved = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(resolved, dict):
            raise UsageError("config file must hold a flat JSON object")
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "out", "verbose", "input")}
    resolved.update(flags)
    unknown = set(resolved) - command_keys
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    return resolved


def _experiment_config(resolved: dict) -> ExperimentConfig:
    cfg = ExperimentConfig.from_dict({k: v for k, v in resolved.items() if k in _EXPERIMENT_KEYS})
    return cfg


def _write_resolved(out: Path, command: str, resolved: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    text = json.dumps(resolved, indent=1, sort_keys=True) + "\n"
    (out / "resolved_config.json").write_text(text)
    logger.info("%s resolved config: %s", command, json.dumps(resolved, sort_keys=True))


def _load_data(resolved: dict):
    """Dataset from --data, with the data fields of the config taken from its header."""
    path = resolved.get("data")
    if not path:
        return None, resolved
    if not Path(path).is_file():
        raise UsageError(f"dataset file {path} not found")
    dataset = read_dataset(path)
    s = dataset.spec
    resolved = dict(resolved, n=s.n, K=s.K, M=s.M, inference_per_speaker=s.inference_per_speaker,
                    within_speaker_noise=s.within_speaker_noise, data_seed=s.seed, test_speakers=s.test_speakers)
    return dataset, resolved


def cmd_gen_data(args) -> int:
    keys = {"n", "K", "M", "inference_per_speaker", "within_speaker_noise", "test_speakers", "data_seed"}
    resolved = resolve(args, keys)
    spec = SyntheticDatasetSpec(**{("seed" if k == "data_seed" else k): v for k, v in resolved.items()})
    full = {"n": spec.n, "K": spec.K, "M": spec.M, "inference_per_speaker": spec.inference_per_speaker,
            "within_speaker_noise": spec.within_speaker_noise, "test_speakers": spec.test_speakers,
            "data_seed": spec.seed}
    logger.info("gen-data resolved config: %s", json.dumps(full, sort_keys=True))
    out = Path(args.out)
    if out.parent != Path(""):
        out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(generate_dataset(spec), out)
    print(f"wrote {out}: K={spec.K} M={spec.M} n={spec.n}")
    return EXIT_OK


def _summary(result: ExperimentResult, epsilons) -> str:
    lines = []
    K = result.config["K"]
    for method, certs in result.certificates.items():
        n = len(certs)
        abst = sum(c.abstained for c in certs) / n if n else 0.0
        q = certs[0].error_probability if certs else procedure_error_probability(result.config["alpha"], K)
        ca = ", ".join(f"CA({e:g})={certified_accuracy(certs, result.labels[:n], e):.4f}" for e in epsilons)
        radius = result.mean_radius(method) if n == len(result.labels) else float("nan")
        lines.append(f"{method}: {ca}, abstain={abst:.4f}, mean radius={radius:.6g}, q={q:.6g}")
    if result.plain_accuracy is not None:
        lines.append(f"plain accuracy={result.plain_accuracy:.4f}, smoothed accuracy={result.smoothed_accuracy:.4f}, "
                     f"EER(f)={result.eer_f:.4f}, EER(g)={result.eer_g:.4f}")
    if result.timings:
        lines.append("timings: " + ", ".join(f"{k}={v:.2f}s" for k, v in result.timings.items()))
    return "\n".join(lines)


def _run_and_save(cfg: ExperimentConfig, dataset, out: Path, stem: str = "result"):
    """Runs one experiment; on embedder failure writes what finished and re-raises."""
    try:
        result = run_experiment(cfg, dataset)
    except PartialRunError as exc:
        exc.result.save(out / f"{stem}.json")
        logger.error("embedder failed; partial results written to %s", out / f"{stem}.json")
        raise
    result.save(out / f"{stem}.json")
    return result


def cmd_certify(args) -> int:
    resolved = resolve(args, _EXPERIMENT_KEYS | {"data", "report_epsilon"})
    dataset, resolved = _load_data(resolved)
    cfg = _experiment_config(resolved)
    if not cfg.method_list:
        raise UsageError("--method needs at least one method")
    resolved = dict(cfg.to_dict(), **{k: v for k, v in resolved.items() if k in _EXTRA_KEYS})
    out = Path(args.out)
    _write_resolved(out, "certify", resolved)
    result = _run_and_save(replace(cfg, attacks=""), dataset, out)
    (out / "ca.csv").write_text(ca_csv(result))
    print(_summary(result, resolved.get("report_epsilon") or [cfg.sigma / 2]))
    return EXIT_OK


def cmd_sweep(args) -> int:
    resolved = resolve(args, _EXPERIMENT_KEYS | {"data", "axis", "values"})
    if "axis" not in resolved or not resolved.get("values"):
        raise UsageError("sweep needs --axis and --values")
    dataset, resolved = _load_data(resolved)
    if dataset is not None and resolved["axis"] in ("M", "K", "input_length"):
        raise UsageError("data-shape axes cannot be swept over a fixed dataset file")
    cfg = _experiment_config(resolved)
    axis, values = resolved["axis"], resolved["values"]
    resolved = dict(cfg.to_dict(), **{k: v for k, v in resolved.items() if k in _EXTRA_KEYS})
    out = Path(args.out)
    _write_resolved(out, "sweep", resolved)

    def save(value, result):
        result.save(out / f"result_{axis}_{value:g}.json")
        summary = result.error or _summary(result, [result.config["sigma"] / 2])
        print(f"{axis}={value:g}: {summary}")

    results = run_sweep(cfg, axis, values, dataset, on_result=save)
    (out / f"sweep_{axis}.csv").write_text(sweep_csv(axis, values, results))
    if all(r.error for r in results):
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_attack(args) -> int:
    resolved = resolve(args, _EXPERIMENT_KEYS | {"data"})
    dataset, resolved = _load_data(resolved)
    resolved.setdefault("attacks", "gaussian")
    resolved["methods"] = ""
    cfg = _experiment_config(resolved)
    if not cfg.attack_list:
        raise UsageError("--kind needs at least one attack")
    resolved = dict(cfg.to_dict(), **{k: v for k, v in resolved.items() if k in _EXTRA_KEYS})
    out = Path(args.out)
    _write_resolved(out, "attack", resolved)
    result = _run_and_save(cfg, dataset, out)
    (out / "era.csv").write_text(era_csv(result))
    for a, curve in result.era_curves.items():
        print(f"{a}: " + ", ".join(f"ERA({e:g})={v:.4f}" for e, v in zip(result.attack_levels, curve)))
    print(f"smoothed accuracy={result.smoothed_accuracy:.4f}")
    return EXIT_OK


def cmd_plot(args) -> int:
    src = Path(args.input)
    if src.is_dir():
        files = sorted(p for p in src.glob("*.json") if p.name != "resolved_config.json")
    elif src.is_file():
        files = [src]
    else:
        raise UsageError(f"result path {src} not found")
    if not files:
        raise UsageError(f"no result files in {src}")
    out = Path(args.out) if getattr(args, "out", None) else (src if src.is_dir() else src.parent)
    out.mkdir(parents=True, exist_ok=True)
    for path in files:
        try:
            result = ExperimentResult.load(path)
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise UsageError(f"{path} is not a result file: {exc}") from exc
        if result.error and not result.epsilons:
            logger.warning("skipping failed run %s", path)
            continue
        (out / f"{path.stem}_ca.csv").write_text(ca_csv(result))
        if result.era_curves:
            (out / f"{path.stem}_era.csv").write_text(era_csv(result))
        if not args.no_svg:
            plot_svg(result, out / f"{path.stem}.svg", title=path.stem)
        print(f"plotted {path}")
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "certify": cmd_certify, "sweep": cmd_sweep, "attack": cmd_attack,
            "plot": cmd_plot}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, UnsupportedAttackError) as exc:
        print(f"embedcert {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (PartialRunError, EmbedderFailure, EmbedderError) as exc:
        print(f"embedcert {args.command}: embedder failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        print(f"embedcert {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
