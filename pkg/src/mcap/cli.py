"""Command-line interface: simulate, cluster, select-q, recover, evaluate, replay.

Every run writes ``manifest.json`` next to its outputs. The manifest holds
the resolved parameters, so ``mcap replay manifest.json`` regenerates the
same output files. Options can also come from a flat ``key = value`` file
given with ``--config``; flags on the command line take precedence.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import (
    DataMatrix,
    Partition,
    load_labels,
    load_matrix,
    rank_transform_to_normality,
    save_csv,
    save_labels,
)
from .evaluation import adjusted_rand_index, auprc_edges, match_groups, rand_index, topk_edge_hits
from .gmm import EmConfig
from .pipeline import fit_mcap
from .projection import PROJECTION_KINDS
from .recovery import back_transform, hard_estimates, soft_estimates
from .simulate import (
    BlockWishartSpec,
    GgmSpec,
    gen_block_wishart,
    gen_block_wishart_resampled,
    gen_ggm_mixture,
    gen_isotropic,
    gen_permuted_large_p,
    subsample_groups,
)
from .stability import StabilityConfig, select_q

__all__ = ["main", "build_parser", "CliError"]

THREADS_ENV = "MCAP_THREADS"
SCENARIOS = ("isotropic", "block-wishart", "block-wishart-resampled", "ggm", "permuted", "subsample")


class CliError(Exception):
    """Failure inside a named pipeline stage."""

    def __init__(self, stage: str, exc: BaseException):
        super().__init__(str(exc))
        self.stage = stage
        self.exc = exc


class Run:
    """Collects stage timings and wraps failures with the stage name."""

    def __init__(self):
        self.timings: dict[str, float] = {}

    @contextlib.contextmanager
    def stage(self, name: str):
        start = time.perf_counter()
        try:
            yield
        except CliError:
            raise
        except Exception as exc:
            raise CliError(name, exc) from exc
        finally:
            self.timings[name] = round(time.perf_counter() - start, 6)


# -- config files -------------------------------------------------------------

def read_config(path: str | Path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def write_config(values: dict, path: Path) -> None:
    lines = [f"{k} = {_config_value(v)}" for k, v in values.items() if v is not None]
    path.write_text("\n".join(lines) + "\n")


def _config_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    return str(v)


def _parse_bool(text) -> bool:
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text) -> list[int] | None:
    if text is None or text == "":
        return None
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    return [int(v) for v in str(text).split(",") if v.strip()]


def _dof(text) -> float:
    return float("inf") if str(text).lower() in ("inf", "infinity") else float(text)


def _sizes(text):
    vals = _int_list(text)
    return vals[0] if vals and len(vals) == 1 else tuple(vals) if vals else None


# -- parser -------------------------------------------------------------------

def _add_data_args(p):
    p.add_argument("--data", required=True, help="input matrix (.csv or .npy)")
    p.add_argument("--header", action=argparse.BooleanOptionalAction, default=True,
                   help="CSV input has a header row (default: yes)")
    p.add_argument("--rank-normalize", action=argparse.BooleanOptionalAction, default=False,
                   help="rank-transform each column to normality first")


def _add_cluster_args(p):
    _add_data_args(p)
    p.add_argument("--K", type=int, required=True, help="number of groups")
    p.add_argument("--kind", choices=PROJECTION_KINDS, default="pca")
    p.add_argument("--subsets", type=int, default=20, help="number of stability subsets")
    p.add_argument("--m-fraction", type=float, default=0.75, help="subset size as a fraction of n")
    p.add_argument("--grid", type=str, default=None, help="comma-separated candidate q values")
    p.add_argument("--q-min", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-init", type=int, default=5, help="EM restarts")
    p.add_argument("--max-iter", type=int, default=500)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--ridge", type=float, default=None, help="fixed covariance ridge (default: scaled)")
    p.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mcap", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"mcap {__version__}")
    parser.add_argument("--threads", type=int, default=None,
                        help=f"worker threads (default: ${THREADS_ENV} or 1)")
    parser.add_argument("--config", default=None, help="flat key = value file with option defaults")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="generate a synthetic data set")
    sim.add_argument("--scenario", choices=SCENARIOS, required=True)
    sim.add_argument("--K", type=int, default=2)
    sim.add_argument("--n-k", type=str, default="100", help="group size, or comma-separated sizes")
    sim.add_argument("--p", type=int, default=2000)
    sim.add_argument("--d", type=float, default=0.0, help="mean-shift magnitude")
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--block-size", type=int, default=200)
    sim.add_argument("--dof", type=_dof, default=float("inf"), help="inverse-Wishart dof (inf = identity)")
    sim.add_argument("--p-target", type=int, default=None, help="widened dimension (resampled scenario)")
    sim.add_argument("--base-n-k", type=str, default=None)
    sim.add_argument("--edges", type=float, default=30, help="expected edges per graph (ggm)")
    sim.add_argument("--copies", type=int, default=1, help="column blocks (permuted)")
    sim.add_argument("--permute-first", action=argparse.BooleanOptionalAction, default=True)
    sim.add_argument("--input", default=None, help="base matrix for permuted/subsample")
    sim.add_argument("--input-labels", default=None, help="base labels for permuted/subsample")
    sim.add_argument("--input-header", action=argparse.BooleanOptionalAction, default=True)
    sim.add_argument("--n", type=int, default=None, help="total rows (subsample, group-proportional)")
    sim.add_argument("--format", choices=("csv", "npy"), default="csv")
    sim.add_argument("--out", required=True)

    clu = sub.add_parser("cluster", help="cluster rows with adaptive projections")
    _add_cluster_args(clu)
    clu.add_argument("--q", default="auto", help="'auto', 'fixed:K' or an integer")

    sel = sub.add_parser("select-q", help="stability scores over the q grid")
    _add_cluster_args(sel)

    rec = sub.add_parser("recover", help="group-wise means, variances and graphs")
    _add_data_args(rec)
    rec.add_argument("--labels", default=None)
    rec.add_argument("--responsibilities", default=None)
    rec.add_argument("--mode", choices=("hard", "soft"), default="soft")
    rec.add_argument("--estimator", choices=("glasso", "mb"), default="glasso")
    rec.add_argument("--lambda", dest="lam", default="cv", help="'cv' or a fixed penalty")
    rec.add_argument("--folds", type=int, default=5)
    rec.add_argument("--rule", choices=("and", "or"), default="and")
    rec.add_argument("--seed", type=int, default=0)
    rec.add_argument("--back-transform", action=argparse.BooleanOptionalAction, default=False,
                     help="report precision entries on the data scale")
    rec.add_argument("--out", required=True)

    ev = sub.add_parser("evaluate", help="compare labels or edge lists with the truth")
    ev.add_argument("--pred-labels", default=None)
    ev.add_argument("--truth-labels", default=None)
    ev.add_argument("--pred-edges", nargs="*", default=None)
    ev.add_argument("--truth-edges", nargs="*", default=None)
    ev.add_argument("--p", type=int, default=None, help="dimension for AUPRC")
    ev.add_argument("--topk", type=int, default=100)
    ev.add_argument("--scenario", default="")
    ev.add_argument("--method", default="")
    ev.add_argument("--rep", default="")
    ev.add_argument("--append", action=argparse.BooleanOptionalAction, default=False)
    ev.add_argument("--out", required=True, help="metrics CSV")

    rp = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    rp.add_argument("manifest")
    rp.add_argument("--out", default=None, help="write outputs here instead")
    for name, sp in sub.choices.items():
        if name != "replay":
            sp.add_argument("--config", default=argparse.SUPPRESS, help="flat key = value file with option defaults")
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", default=None)
    known, _ = pre.parse_known_args(argv)
    if known.config:
        values = read_config(known.config)
        command = next((a for a in argv if not a.startswith("-") and a in _subparsers(parser)), None)
        if command is None:
            command = values.pop("command", None)
            if command is not None:
                argv = [command] + argv
        else:
            values.pop("command", None)
        sub = _subparsers(parser).get(command)
        if sub is None:
            parser.error("config needs a subcommand")
        dests = {a.dest: a for a in sub._actions}
        unknown = sorted(set(values) - set(dests))
        if unknown:
            parser.error(f"unknown config keys for {command}: {', '.join(unknown)}")
        for key, value in values.items():
            action = dests[key]
            if isinstance(action, argparse.BooleanOptionalAction):
                value = _parse_bool(value)
            elif action.nargs in ("*", "+"):
                value = value.split()
            action.required = False
            sub.set_defaults(**{key: value})
    return parser.parse_args(argv)


def _subparsers(parser) -> dict[str, argparse.ArgumentParser]:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices
    return {}


# -- helpers ------------------------------------------------------------------

def _threads(args) -> int:
    if getattr(args, "threads", None):
        return max(1, int(args.threads))
    env = os.environ.get(THREADS_ENV)
    return max(1, int(env)) if env else 1


def _load_data(args, run: Run) -> DataMatrix:
    with run.stage("dataset.load"):
        X = load_matrix(args.data, has_header=args.header)
    if args.rank_normalize:
        with run.stage("dataset.rank_normalize"):
            X = rank_transform_to_normality(X)
    return X


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _params(args) -> dict:
    skip = {"config", "func"}
    out = {}
    for k, v in vars(args).items():
        if k in skip:
            continue
        if isinstance(v, float) and not np.isfinite(v):
            v = "inf"
        out[k] = v
    return out


def _resolve_paths(params: dict) -> dict:
    for key in ("data", "input", "input_labels", "labels", "responsibilities", "pred_labels", "truth_labels", "out"):
        if params.get(key):
            params[key] = str(Path(params[key]).resolve())
    for key in ("pred_edges", "truth_edges"):
        if params.get(key):
            params[key] = [str(Path(v).resolve()) for v in params[key]]
    return params


def _write_manifest(out: Path, args, run: Run, outputs: list[str], extra: dict | None = None) -> None:
    manifest = {
        "mcap_version": __version__,
        "command": args.command,
        "params": _resolve_paths(_params(args)),
        "seeds": {k: v for k, v in _params(args).items() if k == "seed"},
        "outputs": sorted(outputs),
        "timings": run.timings,
    }
    manifest.update(extra or {})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _save_matrix(values: np.ndarray, path: Path, names: list[str]) -> None:
    with path.open("w", newline="") as fh:
        fh.write(",".join(names) + "\n")
        np.savetxt(fh, values, delimiter=",", fmt="%.17g")


def _save_edges(path: Path, edges, weights: np.ndarray | None) -> None:
    with path.open("w") as fh:
        fh.write("i,j,value\n")
        for i, j in sorted(edges):
            w = weights[i, j] if weights is not None else 1.0
            fh.write(f"{i + 1},{j + 1},{float(w)!r}\n")


def _load_edges(path) -> tuple[dict[tuple[int, int], float], set[tuple[int, int]]]:
    scores = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("i,"):
            continue
        parts = line.split(",")
        if len(parts) < 2:
            raise ValueError(f"{path}:{lineno}: expected 'i,j[,value]'")
        i, j = int(parts[0]) - 1, int(parts[1]) - 1
        key = (min(i, j), max(i, j))
        scores[key] = abs(float(parts[2])) if len(parts) > 2 else 1.0
    return scores, set(scores)


def _em_config(args) -> EmConfig:
    return EmConfig(max_iter=args.max_iter, tol=args.tol, n_init=args.n_init, ridge=args.ridge, seed=args.seed)


def _stability_config(args) -> StabilityConfig:
    grid = _int_list(args.grid)
    return StabilityConfig(n_subsets=args.subsets, m_fraction=args.m_fraction,
                           grid=tuple(grid) if grid else None, q_min=args.q_min, seed=args.seed)


def _write_stability(path: Path, scores: dict[int, float]) -> None:
    path.write_text("q,score\n" + "".join(f"{q},{scores[q]!r}\n" for q in sorted(scores)))


# -- commands -----------------------------------------------------------------

def cmd_simulate(args, run: Run) -> None:
    out = _out_dir(args.out)
    n_k = _sizes(args.n_k)
    extra: dict = {}
    graphs = precisions = None
    with run.stage(f"simulate.{args.scenario}"):
        if args.scenario == "isotropic":
            data, truth = gen_isotropic(args.K, n_k, args.p, args.d, args.seed)
        elif args.scenario in ("block-wishart", "block-wishart-resampled"):
            spec = BlockWishartSpec(args.block_size, args.dof, args.p, args.K, n_k, args.d, args.seed)
            if args.scenario == "block-wishart":
                data, truth = gen_block_wishart(spec)
            else:
                data, truth = gen_block_wishart_resampled(spec, args.p_target or args.p, _sizes(args.base_n_k))
        elif args.scenario == "ggm":
            sample = gen_ggm_mixture(GgmSpec(args.p, args.edges, args.K, n_k, args.d, args.seed))
            data, truth, graphs, precisions = sample
        else:
            if not args.input or not args.input_labels:
                raise ValueError(f"scenario {args.scenario} needs --input and --input-labels")
            base = load_matrix(args.input, has_header=args.input_header)
            base_truth = load_labels(args.input_labels)
            if args.scenario == "permuted":
                data, truth = gen_permuted_large_p(base, base_truth, args.copies, n_k, args.seed, args.permute_first)
            else:
                data, truth = subsample_groups(base, base_truth, n=args.n, p=args.p, n_k=_sizes(args.n_k)
                                               if args.n is None else None, seed=args.seed)
    outputs = []
    with run.stage("simulate.write"):
        if args.format == "npy":
            np.save(out / "data.npy", data.values)
            outputs.append("data.npy")
        else:
            save_csv(data, out / "data.csv")
            outputs.append("data.csv")
        save_labels(truth, out / "truth.txt")
        outputs.append("truth.txt")
        if graphs is not None:
            for k, (g, om) in enumerate(zip(graphs, precisions), start=1):
                _save_edges(out / f"truth_edges_{k}.csv", g, om)
                outputs.append(f"truth_edges_{k}.csv")
        scenario = {"command": "simulate"}
        scenario.update((k, v) for k, v in _params(args).items() if k not in ("threads", "out", "command"))
        write_config(scenario, out / "scenario.cfg")
        outputs.append("scenario.cfg")
    extra["shape"] = list(data.shape)
    _write_manifest(out, args, run, outputs, extra)


def _parse_q(text: str, K: int):
    text = str(text).strip().lower()
    if text == "auto":
        return "auto"
    if text.startswith("fixed:"):
        text = text.split(":", 1)[1]
        return K if text == "k" else int(text)
    return int(text)


def cmd_cluster(args, run: Run) -> None:
    out = _out_dir(args.out)
    X = _load_data(args, run)
    q = _parse_q(args.q, args.K)
    with run.stage("pipeline.fit"):
        result = fit_mcap(X.values, args.K, args.kind, q, _stability_config(args), _em_config(args), _threads(args))
    outputs = ["labels.txt", "responsibilities.csv", "params.json"]
    with run.stage("cluster.write"):
        save_labels(result.labels, out / "labels.txt")
        _save_matrix(result.responsibilities, out / "responsibilities.csv",
                     [f"k{k}" for k in range(1, args.K + 1)])
        params = result.params.to_dict() | {"loglik": result.loglik, "kind": result.kind, "q_hat": result.q}
        (out / "params.json").write_text(json.dumps(params, indent=2) + "\n")
        extra = {"q_hat": result.q, "loglik": result.loglik}
        if result.stability is not None:
            _write_stability(out / "stability.csv", result.stability.scores)
            outputs.append("stability.csv")
            extra["stability"] = [[q_, s] for q_, s in result.stability.table()]
    _write_manifest(out, args, run, outputs, extra)


def cmd_select_q(args, run: Run) -> None:
    out = _out_dir(args.out)
    X = _load_data(args, run)
    with run.stage("stability.select_q"):
        res = select_q(X.values, args.K, args.kind, _stability_config(args), _em_config(args), _threads(args))
    with run.stage("stability.write"):
        _write_stability(out / "stability.csv", res.scores)
    _write_manifest(out, args, run, ["stability.csv"],
                    {"q_hat": res.q_hat, "stability": [[q, s] for q, s in res.table()]})


def _read_responsibilities(path) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2))


def cmd_recover(args, run: Run) -> None:
    out = _out_dir(args.out)
    X = _load_data(args, run)
    lam = None if str(args.lam).lower() == "cv" else float(args.lam)
    threads = _threads(args)
    with run.stage("recovery.inputs"):
        if args.mode == "soft":
            if not args.responsibilities:
                raise ValueError("soft mode needs --responsibilities")
            gamma = _read_responsibilities(args.responsibilities)
        elif args.labels:
            labels = load_labels(args.labels)
        elif args.responsibilities:
            gamma = _read_responsibilities(args.responsibilities)
            labels = Partition(np.argmax(gamma, axis=1) + 1, gamma.shape[1])
        else:
            raise ValueError("hard mode needs --labels or --responsibilities")
    with run.stage(f"recovery.{args.mode}"):
        kw = dict(estimator=args.estimator, lam=lam, folds=args.folds, seed=args.seed, threads=threads,
                  mb_rule=args.rule)
        est = soft_estimates(X.values, gamma, **kw) if args.mode == "soft" else hard_estimates(X.values, labels, **kw)
    outputs = []
    names = X.col_names()
    with run.stage("recovery.write"):
        for g in est.groups:
            k = g.group
            for what, values in (("mean", g.mean), ("variance", g.variance)):
                path = out / f"group{k}_{what}.csv"
                path.write_text("feature,value\n" + "".join(f"{nm},{float(v)!r}\n" for nm, v in zip(names, values)))
                outputs.append(path.name)
            if g.precision is not None:
                Omega = g.precision.Omega
                if args.back_transform:
                    Omega = back_transform(Omega, g.variance)
                _save_edges(out / f"group{k}_edges.csv", g.graph, Omega)
            else:
                _save_edges(out / f"group{k}_edges.csv", g.graph, g.edge_scores())
            outputs.append(f"group{k}_edges.csv")
    extra = {"lambdas": {str(g.group): g.lam for g in est.groups},
             "n_hat": {str(g.group): g.n_hat for g in est.groups},
             "edge_counts": {str(g.group): len(g.graph) for g in est.groups}}
    _write_manifest(out, args, run, outputs, extra)


def cmd_evaluate(args, run: Run) -> None:
    rows: list[tuple[str, float]] = []
    mapping = None
    with run.stage("evaluation.labels"):
        if args.pred_labels and args.truth_labels:
            pred, truth = load_labels(args.pred_labels), load_labels(args.truth_labels)
            rows += [("rand_index", rand_index(pred, truth)), ("adjusted_rand_index", adjusted_rand_index(pred, truth))]
            mapping = match_groups(pred, truth)
        elif args.pred_labels or args.truth_labels:
            raise ValueError("give both --pred-labels and --truth-labels")
    with run.stage("evaluation.edges"):
        if args.pred_edges or args.truth_edges:
            if not args.pred_edges or not args.truth_edges:
                raise ValueError("give both --pred-edges and --truth-edges")
            preds = [_load_edges(f)[0] for f in args.pred_edges]
            truths = [_load_edges(f)[1] for f in args.truth_edges]
            order = list(range(len(preds)))
            if mapping is not None and len(preds) == len(truths):
                # align predicted group k with its matched true group
                order = [mapping.get(k + 1, k + 1) - 1 for k in range(len(preds))]
            p = args.p or 1 + max(max((max(e) for e in s), default=0) for s in preds + [dict.fromkeys(t) for t in truths])
            tk, ap = [], []
            for k, scores in enumerate(preds):
                truth = truths[order[k]]
                hit = topk_edge_hits(scores, truth, args.topk)
                tk.append(hit.fraction)
                ap.append(auprc_edges(scores, truth, p))
                rows += [(f"topk_group{k + 1}", hit.fraction), (f"auprc_group{k + 1}", ap[-1])]
            rows += [("topk_mean", float(np.mean(tk))), ("auprc_mean", float(np.mean(ap)))]
    if not rows:
        raise CliError("evaluation.inputs", ValueError("nothing to evaluate"))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    new = not (args.append and out.exists())
    with out.open("w" if new else "a") as fh:
        if new:
            fh.write("scenario,method,rep,metric,value\n")
        for metric, value in rows:
            fh.write(f"{args.scenario},{args.method},{args.rep},{metric},{float(value)!r}\n")


COMMANDS = {
    "simulate": cmd_simulate,
    "cluster": cmd_cluster,
    "select-q": cmd_select_q,
    "recover": cmd_recover,
    "evaluate": cmd_evaluate,
}


def _replay(args) -> argparse.Namespace:
    manifest = json.loads(Path(args.manifest).read_text())
    params = dict(manifest["params"])
    if args.out:
        params["out"] = args.out
    if params.get("dof") == "inf":
        params["dof"] = float("inf")
    ns = argparse.Namespace(**params)
    ns.command = manifest["command"]
    ns.threads = args.threads if args.threads else params.get("threads")
    return ns


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = _apply_config(parser, argv)
    if args.command == "replay":
        args = _replay(args)
    run = Run()
    try:
        COMMANDS[args.command](args, run)
    except CliError as err:
        print(f"mcap: error stage={err.stage} type={type(err.exc).__name__} message={json.dumps(str(err.exc))}",
              file=sys.stderr)
        return 1
    except (OSError, ValueError) as err:
        print(f"mcap: error stage={args.command} type={type(err).__name__} message={json.dumps(str(err))}",
              file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
