"""Command-line entry point: ``pairwise-iqa <command> [options]``.

Commands: design, simulate, estimate, train, score, eval, gradcheck,
coverage.  Every command reads an optional TOML run configuration
(``--config``); explicit flags override it.  Errors are reported as
``error [module]: message`` with exit status 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import traceback
from pathlib import Path

import numpy as np

from .config import RunConfig

log = logging.getLogger("pairwise_iqa")


class CommandError(Exception):
    def __init__(self, module: str, message: str):
        self.module = module
        super().__init__(message)


# helpers ---------------------------------------------------------------------

def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def _load_plan(path: Path):
    from .design import ComparisonPlan
    if not path.exists():
        raise CommandError("design", f"plan file not found: {path}")
    return ComparisonPlan.from_jsonl(path)


def _load_responses(path: Path):
    from .design import read_responses
    if not path.exists():
        raise CommandError("bt", f"response file not found: {path}")
    recs = read_responses(path)
    if not recs:
        raise CommandError("bt", f"{path} contains no responses")
    return recs


def _fmt_table(rows: list[tuple[str, object]], header=("quantity", "value")) -> str:
    width = max(len(header[0]), *(len(r[0]) for r in rows)) + 2
    lines = [f"{header[0]:<{width}}{header[1]}"]
    for k, v in rows:
        lines.append(f"{k:<{width}}{v:,}" if isinstance(v, int) else f"{k:<{width}}{v}")
    return "\n".join(lines) + "\n"


# commands --------------------------------------------------------------------

def cmd_design(cfg: RunConfig, args) -> int:
    from .design import plan_budget
    from .pipeline import make_plans

    if args.full_scale:
        b = plan_budget(160, 40, 10)
        rows = [("train inter pairs", b["train_inter"]), ("train intra pairs", b["train_intra"]),
                ("train pairs", b["train_total"]), ("test pairs", b["test_total"]),
                ("exhaustive total", b["exhaustive_total"]),
                ("sparse k=10 total", b["sparse_total"]),
                ("reduction", f"{100 * b['reduction']:.2f}%")]
        sys.stdout.write(_fmt_table(rows))
        if args.dry_run:
            return 0
        raise CommandError("cli", "--full-scale only supports --dry-run (images are not rendered at that size)")

    d = cfg.design
    full, sparse, test = make_plans(d, cfg.seed)
    fc = full.pair_counts()
    rows = [("train references", len(full.references)), ("test references", len(test.references)),
            ("train inter pairs", fc.get("inter", 0)), ("train intra pairs", fc.get("intra", 0)),
            ("train pairs", full.n_pairs), ("test pairs", test.n_pairs),
            (f"sparse k={d.sparse_k} train pairs", sparse.n_pairs)]
    sys.stdout.write(_fmt_table(rows))
    if args.dry_run:
        return 0
    plans = cfg.paths.resolve("plans")
    plans.mkdir(parents=True, exist_ok=True)
    full.to_jsonl(plans / "train_full.jsonl")
    sparse.to_jsonl(plans / "train.jsonl")
    test.to_jsonl(plans / "test.jsonl")
    from .dataset import render_plan
    images = cfg.paths.resolve("images")
    render_plan(full, d.image_size, d.channels).write(images)
    render_plan(test, d.image_size, d.channels).write(images)
    print(f"plans written to {plans}, images to {images}")
    return 0


def cmd_simulate(cfg: RunConfig, args) -> int:
    from .dataset import ImageBank, oracle_scores
    from .design import SEED_RESPONSES, derive_seed, simulate_responses, write_responses

    plans, images = cfg.paths.resolve("plans"), cfg.paths.resolve("images")
    out = cfg.paths.resolve("responses")
    n = args.responses if args.responses is not None else cfg.design.responses_per_pair
    for idx, split in enumerate(("train", "test")):
        plan = _load_plan(plans / f"{split}.jsonl")
        bank = ImageBank.read(images, plan)
        scores = oracle_scores(plan, bank, cfg.design.score_scale)
        recs = simulate_responses(plan, scores, n, derive_seed(cfg.seed, SEED_RESPONSES, idx))
        out.mkdir(parents=True, exist_ok=True)
        write_responses(out / f"{split}.jsonl", recs)
        _write(out / f"{split}_scores.json", json.dumps(scores, indent=1, sort_keys=True) + "\n")
        print(f"{split}: {len(recs)} pairs x {n} responses -> {out / f'{split}.jsonl'}")
    return 0


def cmd_estimate(cfg: RunConfig, args) -> int:
    from .bt import DisconnectedGraphError
    from .dataset import group_labels

    reports = cfg.paths.resolve("reports")
    if args.synthetic:
        from .pipeline import bt_recovery, recovery_report
        panels = bt_recovery(cfg.seed)
        _write(reports / "bt_recovery.json", recovery_report(panels))
        rows = []
        for p in panels:
            ber, n = p.heldout_ber()
            rows.append((f"setting {p.setting} (k={p.k or 'all'}, n={p.n_responses})",
                         f"slope {p.fit.slope:.4f}  intercept {p.fit.intercept:+.4f}  "
                         f"held-out BER {ber:.4f} on {n} pairs"))
        sys.stdout.write(_fmt_table(rows, ("panel", "fit")))
        if args.svg:
            from .plots import bt_fit_panels
            bt_fit_panels([(f"({p.setting}) k={p.k or 'all'}, n={p.n_responses}", p.gt, p.estimated, p.fit)
                           for p in panels], reports / "bt_recovery.svg")
        return 0

    plan_path = Path(args.plan) if args.plan else cfg.paths.resolve("plans") / "train.jsonl"
    resp_path = Path(args.responses) if args.responses else cfg.paths.resolve("responses") / "train.jsonl"
    plan = _load_plan(plan_path)
    recs = _load_responses(resp_path)
    try:
        labelled = group_labels(plan, recs)
    except DisconnectedGraphError as exc:
        raise CommandError("bt", str(exc)) from exc
    lines = []
    for gi, (g, (filled, _)) in enumerate(zip(plan.groups, labelled)):
        for i, j in g.all_pairs():
            lines.append(json.dumps({
                "group": gi, "id_a": g.items[i].id, "id_b": g.items[j].id,
                "p": float(filled.labels[i, j]), "estimated": float(filled.estimated[i, j]),
                "measured": bool(filled.measured[i, j])}))
    out = _write(reports / "estimates.jsonl", "\n".join(lines) + "\n")
    scores = {it.id: float(filled.scores.scores[k])
              for g, (filled, _) in zip(plan.groups, labelled) for k, it in enumerate(g.items)}
    _write(reports / "estimated_scores.json", json.dumps(scores, indent=1, sort_keys=True) + "\n")
    n_meas = sum(int(f.measured[np.triu_indices(g.size, 1)].sum()) for g, (f, _) in zip(plan.groups, labelled))
    print(f"{len(lines)} pair labels ({n_meas} measured, {len(lines) - n_meas} estimated) -> {out}")

    truth = resp_path.with_name(resp_path.stem + "_scores.json")
    if truth.exists():
        from .bt import bt_probability, validate_bt_fit
        true = json.loads(truth.read_text())
        gt, est = [], []
        for g, (filled, _) in zip(plan.groups, labelled):
            for i, j in g.all_pairs():
                gt.append(bt_probability(true[g.items[i].id], true[g.items[j].id]))
                est.append(filled.estimated[i, j])
        fit = validate_bt_fit(gt, est)
        _write(reports / "bt_fit.json", json.dumps(fit.to_dict(), indent=2) + "\n")
        print(f"fit against simulation truth: slope {fit.slope:.4f}, intercept {fit.intercept:+.4f}")
        if args.svg:
            from .plots import bt_fit_panels
            bt_fit_panels([(plan_path.stem, np.array(gt), np.array(est), fit)], reports / "bt_fit.svg")
    return 0


def _training_data(cfg: RunConfig):
    from .dataset import ImageBank, build_triplets
    plan = _load_plan(cfg.paths.resolve("plans") / "train.jsonl")
    recs = _load_responses(cfg.paths.resolve("responses") / "train.jsonl")
    bank = ImageBank.read(cfg.paths.resolve("images"), plan)
    return build_triplets(plan, bank, recs)


def cmd_train(cfg: RunConfig, args) -> int:
    from .design import SEED_NET_INIT, SEED_TRAINING, derive_seed
    from .net import ErrorNet
    from .plots import loss_curve
    from .train import TrainConfig

    triplets = _training_data(cfg)
    tc = TrainConfig(**{**cfg.train.__dict__, "seed": derive_seed(cfg.seed, SEED_TRAINING)})
    net = ErrorNet(cfg.net, seed=derive_seed(cfg.seed, SEED_NET_INIT))
    from .train import train
    ckpt = cfg.paths.resolve("checkpoints")
    net, history = train(triplets, tc, net, checkpoint_dir=ckpt)
    reports = cfg.paths.resolve("reports")
    reports.mkdir(parents=True, exist_ok=True)
    history.write_csv(reports / "train_loss.csv")
    its = [r[0] for r in history.rows]
    loss_curve(its, history.losses, reports / "train_loss.svg")
    print(f"{len(triplets)} triplets, {tc.iterations} iterations, final loss "
          f"{np.mean(history.losses[-50:]):.5f}; checkpoint {ckpt / 'final.ckpt'}")
    return 0


def cmd_score(cfg: RunConfig, args) -> int:
    from .images import read_pnm
    from .net import ErrorNet
    if not args.checkpoint:
        raise CommandError("net", "--checkpoint is required")
    net = ErrorNet.load(args.checkpoint)
    dist, ref = read_pnm(args.dist), read_pnm(args.ref)
    if dist.shape != ref.shape:
        raise CommandError("net", f"image shapes differ: {dist.shape} vs {ref.shape}")
    n = args.patches or cfg.net.patches_eval
    print(repr(net.score_image(dist, ref, n_patches=n, seed=cfg.eval.seed)))
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    from .bt import bt_probability
    from .dataset import ImageBank
    from .metrics import evaluate_predictions
    from .pipeline import BASELINES, net_scorer

    plan = _load_plan(Path(args.plan) if args.plan else cfg.paths.resolve("plans") / "test.jsonl")
    recs = _load_responses(Path(args.responses) if args.responses
                           else cfg.paths.resolve("responses") / "test.jsonl")
    bank = ImageBank.read(cfg.paths.resolve("images"), plan)
    if args.baseline:
        scorer, name = BASELINES[args.baseline], args.baseline
    else:
        from .net import ErrorNet
        ckpt = Path(args.checkpoint) if args.checkpoint else cfg.paths.resolve("checkpoints") / "final.ckpt"
        if not ckpt.exists():
            raise CommandError("net", f"checkpoint not found: {ckpt}")
        scorer, name = net_scorer(ErrorNet.load(ckpt), cfg.eval.patches, cfg.eval.seed), "net"
    preds = {it.id: float(scorer(bank.distorted[it.id], bank.references[g.reference_id]))
             for g, it in plan.items()}
    report = evaluate_predictions(plan, recs, preds)
    reports = cfg.paths.resolve("reports")
    _write(reports / f"eval_{name}.json", report.to_json())
    sys.stdout.write(report.table())
    if args.svg:
        from .metrics import ground_truth
        from .plots import eval_scatter
        gt, pred = [], []
        for g, (c, _) in zip(plan.groups, ground_truth(plan, recs)):
            for i, j in g.all_pairs():
                gt.append(c[i, j] / (c[i, j] + c[j, i]))
                pred.append(bt_probability(preds[g.items[i].id], preds[g.items[j].id]))
        eval_scatter(gt, pred, reports / f"eval_{name}.svg", title=name)
    return 0


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    from .checks import mini_gradcheck
    report = mini_gradcheck(seed=cfg.seed, tolerance=args.tolerance)
    for line in report.lines():
        print(line)
    print(f"{'PASS' if report.passed else 'FAIL'} max relative error "
          f"{max(report.max_rel_error.values()):.3e} (tolerance {report.tolerance:g})")
    return 0 if report.passed else 1


def cmd_coverage(cfg: RunConfig, args) -> int:
    from .design import coverage_probability
    rep = coverage_probability(args.image_size, args.patch_size, args.patches,
                               mode=args.mode, trials=args.trials, seed=cfg.seed)
    d = rep.to_dict()
    sys.stdout.write(_fmt_table([(k, f"{v:.6f}") for k, v in d.items() if isinstance(v, float)]))
    return 0


COMMANDS = {
    "design": (cmd_design, "design"),
    "simulate": (cmd_simulate, "design"),
    "estimate": (cmd_estimate, "bt"),
    "train": (cmd_train, "train"),
    "score": (cmd_score, "net"),
    "eval": (cmd_eval, "metrics"),
    "gradcheck": (cmd_gradcheck, "tensor"),
    "coverage": (cmd_coverage, "design"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--seed", type=int, help="root seed")
    common.add_argument("--threads", type=int, help="BLAS threads (default 1)")
    common.add_argument("--out", help="output root directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="pairwise-iqa", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("design", parents=[common], help="build comparison plans and images")
    s.add_argument("--n-train-refs", type=int)
    s.add_argument("--n-test-refs", type=int)
    s.add_argument("--sparse-k", type=int)
    s.add_argument("--dry-run", action="store_true", help="print pair counts only")
    s.add_argument("--full-scale", action="store_true",
                   help="160 training / 40 test references (dry-run only)")

    s = sub.add_parser("simulate", parents=[common], help="simulate observer responses")
    s.add_argument("--responses", type=int, help="responses per pair")

    s = sub.add_parser("estimate", parents=[common], help="fill missing preference labels")
    s.add_argument("--plan")
    s.add_argument("--responses")
    s.add_argument("--synthetic", action="store_true",
                   help="BT recovery study on synthetic groups (three settings)")
    s.add_argument("--svg", action="store_true")

    s = sub.add_parser("train", parents=[common], help="train the error estimator")
    s.add_argument("--iterations", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--patches", type=int, help="patches per image per iteration")
    s.add_argument("--step-size", type=float)
    s.add_argument("--optimizer", choices=["adam", "sgd"])

    s = sub.add_parser("score", parents=[common], help="perceptual error of one image")
    s.add_argument("dist")
    s.add_argument("ref")
    s.add_argument("--checkpoint")
    s.add_argument("--patches", type=int)

    s = sub.add_parser("eval", parents=[common], help="evaluate on the test plan")
    s.add_argument("--checkpoint")
    s.add_argument("--baseline", choices=["mae", "rmse", "oracle"])
    s.add_argument("--plan")
    s.add_argument("--responses")
    s.add_argument("--patches", type=int)
    s.add_argument("--svg", action="store_true", help="also write a scatter plot")

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference check, mini network")
    s.add_argument("--tolerance", type=float, default=1e-4)

    s = sub.add_parser("coverage", parents=[common], help="pixel coverage of random patches")
    s.add_argument("--image-size", type=int, default=256)
    s.add_argument("--patch-size", type=int, default=64)
    s.add_argument("--patches", type=int, default=36)
    s.add_argument("--mode", choices=["analytic_interior", "monte_carlo_all"], default="analytic_interior")
    s.add_argument("--trials", type=int, default=2000)
    return p


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.threads is not None:
        cfg.threads = args.threads
    if args.out is not None:
        cfg.paths.out = args.out
    d = cfg.design
    for flag, key in (("n_train_refs", "n_train_refs"), ("n_test_refs", "n_test_refs"),
                      ("sparse_k", "sparse_k")):
        v = getattr(args, flag, None)
        if v is not None:
            setattr(d, key, v)
    t = cfg.train
    for flag, key in (("iterations", "iterations"), ("batch_size", "batch_size"),
                      ("step_size", "step_size"), ("optimizer", "optimizer")):
        v = getattr(args, flag, None)
        if v is not None:
            setattr(t, key, v)
    if args.command == "train" and args.patches is not None:
        t.patches_per_image = args.patches
    if args.command == "eval" and args.patches is not None:
        cfg.eval.patches = args.patches
    t.__post_init__()
    return cfg


def _failing_module(exc: BaseException) -> str:
    aliases = {"distortions": "design", "images": "design", "dataset": "design",
               "config": "cli", "plots": "cli"}
    name = "cli"
    for frame, _ in traceback.walk_tb(exc.__traceback__):
        mod = frame.f_globals.get("__name__", "")
        if mod.startswith("pairwise_iqa."):
            part = mod.split(".")[1]
            name = aliases.get(part, part)
    return name


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    fn, module = COMMANDS[args.command]
    try:
        cfg = resolve_config(args)
        from threadpoolctl import threadpool_limits
        with threadpool_limits(limits=cfg.threads):
            return fn(cfg, args)
    except CommandError as exc:
        print(f"error [{exc.module}]: {exc}", file=sys.stderr)
        return 1
    except (ValueError, KeyError, OSError, RuntimeError) as exc:
        print(f"error [{_failing_module(exc)}] during {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
