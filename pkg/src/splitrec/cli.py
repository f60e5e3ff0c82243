"""Command-line entry point: ``splitrec train | eval | bench | sweep | report``.

Configuration comes from an optional flat config file (JSON object, or
``key = value`` lines) overridden by flags. Exit codes: 0 ok, 2 config
error, 3 data error, 4 runtime failure. ``SPLITREC_OUT`` sets the default
output directory.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import os
import shutil
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Sequence

from . import accounting as acct
from .accounting import AGG_SERVER, CostLedger, Direction, TowerDims
from .data import SyntheticSpec, gen_synthetic, load_movielens, train_test_split
from .errors import ConfigError, DataError, SplitRecError
from .evaluation import evaluate, format_metrics_table, oracle_scorer, random_scorer
from .featurize import TrigramVocab
from .federation import Federation, FederationConfig, RoundReport
from .optimizer import AdamState, FedAdamConfig, FedAdamState, load_checkpoint, save_checkpoint

log = logging.getLogger("splitrec")

OUT_ENV = "SPLITREC_OUT"
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4


@dataclass(frozen=True)
class RunConfig:
    # data
    dataset: str = ""  # MovieLens ratings file; empty means synthetic
    n_users: int = 200
    n_items: int = 200
    n_clusters: int = 2
    noise: float = 0.05
    data_seed: int = 0
    title_tokens: int = 8
    body_tokens: int = 0
    profile_tokens: int = 8
    min_interactions: int = 20
    dim: int = 30_000
    eval_negatives: int = 99
    # model and protocol
    arch: str = "dssm"
    mode: str = "split"
    widths: str = ""
    K: int = 50
    T: int = 10
    rho: float = 0.9
    rounds: int = 200
    seed: int = 0
    eval_every: int = 0
    dropout: float = 0.2
    deterministic: bool = False
    init_std: float = 0.1
    mask_bound: float = 1e3
    cut_layout: str = "union"
    item_grad_norm: str = "clients"
    user_feature_source: str = "auto"
    workers: int = 1
    # optimizer
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    tau: float = 1e-8
    decay: float = 0.01
    decay_every: int = 10
    # output
    out: str = ""
    checkpoint_every: int = 0

    def validate(self) -> None:
        if self.mode not in ("split", "naive", "centralized"):
            raise ConfigError(f"mode must be split, naive or centralized, got {self.mode!r}")
        if self.rounds < 0 or self.eval_every < 0 or self.checkpoint_every < 0:
            raise ConfigError("rounds, eval_every and checkpoint_every must be >= 0")
        if self.dataset and not Path(self.dataset).is_file():
            raise ConfigError(f"dataset file not found: {self.dataset}")
        try:
            self.optimizer()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        self.federation().validate()

    def optimizer(self) -> FedAdamConfig:
        return FedAdamConfig(self.lr, self.beta1, self.beta2, self.tau, self.decay, self.decay_every)

    def federation(self, **overrides) -> FederationConfig:
        try:
            widths = tuple(int(w) for w in self.widths.split(",")) if self.widths else None
        except ValueError as exc:
            raise ConfigError(f"widths must be comma-separated integers, got {self.widths!r}") from exc
        cfg = FederationConfig(
            arch=self.arch,
            widths=widths,
            K=self.K,
            T=self.T,
            rho=self.rho,
            seed=self.seed,
            dropout=self.dropout,
            deterministic=self.deterministic,
            init_std=self.init_std,
            mask_bound=self.mask_bound,
            cut_layout=self.cut_layout,
            item_grad_norm=self.item_grad_norm,
            user_feature_source=self.user_feature_source,
            optimizer=self.optimizer(),
            workers=self.workers,
        )
        return replace(cfg, **overrides)

    def out_dir(self) -> Path:
        return Path(self.out or os.environ.get(OUT_ENV, "runs"))


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(name: str, value):
    kind = type(getattr(RunConfig(), name))
    if kind is bool:
        if isinstance(value, bool):
            return value
        text = str(value).strip().lower()
        if text in ("1", "true", "yes", "on"):
            return True
        if text in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {value!r}")
    try:
        return kind(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: cannot convert {value!r} to {kind.__name__}") from exc


def read_config_file(path: str | Path) -> dict:
    """Flat mapping from a JSON object or ``key = value`` lines."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if text.lstrip().startswith("{"):
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if any(isinstance(v, (dict, list)) for v in raw.values()):
            raise ConfigError(f"{path}: config must be a flat object")
    else:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read_string("[run]\n" + text)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        raw = dict(parser["run"])
    unknown = sorted(set(raw) - set(_FIELDS))
    if unknown:
        raise ConfigError(f"{path}: unknown keys {unknown}")
    return raw


def build_config(args: argparse.Namespace) -> RunConfig:
    values = {}
    if getattr(args, "config", None):
        values.update(read_config_file(args.config))
    for name in _FIELDS:
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = flag
    if getattr(args, "synthetic", False):
        values["dataset"] = ""
    cfg = RunConfig(**{k: _coerce(k, v) for k, v in values.items()})
    cfg.validate()
    return cfg


def load_data(cfg: RunConfig):
    vocab = TrigramVocab(cfg.dim)
    if cfg.dataset:
        data = load_movielens(cfg.dataset, vocab=vocab, min_interactions=cfg.min_interactions)
    else:
        spec = SyntheticSpec(
            n_users=cfg.n_users,
            n_items=cfg.n_items,
            n_clusters=cfg.n_clusters,
            noise=cfg.noise,
            seed=cfg.data_seed,
            title_tokens=cfg.title_tokens,
            body_tokens=cfg.body_tokens,
            profile_tokens=cfg.profile_tokens,
        )
        data = gen_synthetic(spec, vocab)
    return train_test_split(data, seed=cfg.data_seed, n_negatives=cfg.eval_negatives)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _report_line(report: RoundReport) -> str:
    row = report.to_json()
    row.pop("compute_ms")
    return json.dumps(row, sort_keys=True)


def _save(fed: Federation, directory: Path, cfg: RunConfig) -> None:
    user, item = fed.snapshot()
    states = {"user": fed.agg.opt, "item": fed.server.opt}
    if fed._centralized is not None:
        oc = cfg.optimizer()
        states = {name: FedAdamState(s.m, s.v, s.t, oc) for name, s in fed._centralized.items()}
    save_checkpoint(directory, {"user": user, "item": item}, states, {"round": fed.round, "mode": cfg.mode, "config": asdict(cfg)})


def _restore(fed: Federation, directory: Path, cfg: RunConfig) -> None:
    towers, states, meta = load_checkpoint(directory)
    if meta.get("mode") != cfg.mode:
        raise ConfigError(f"checkpoint was written in {meta.get('mode')} mode")
    fed.agg.user_params = towers["user"]
    fed.server.item_params = towers["item"]
    if cfg.mode == "centralized":
        oc = cfg.optimizer()
        fed._centralized = {
            name: AdamState(s.m, s.v, s.t, lr=oc.lr, beta1=oc.beta1, beta2=oc.beta2, eps=oc.tau) for name, s in states.items()
        }
    else:
        fed.agg.opt, fed.server.opt = states["user"], states["item"]
    fed.round = int(meta["round"])


def cmd_train(cfg: RunConfig, run_dir: Path, config_path: str | None = None, resume: bool = False) -> dict:
    """Train and write ``rounds.jsonl``, ``timing.jsonl``, ``metrics.json`` and ``checkpoint/``."""
    train, eval_set = load_data(cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    if config_path:
        shutil.copyfile(config_path, run_dir / Path(config_path).name)
    _write_json(run_dir / "config.json", asdict(cfg))
    fed = Federation(train, cfg.federation())
    ckpt = run_dir / "checkpoint"
    if resume and (ckpt / "state.json").is_file():
        _restore(fed, ckpt, cfg)
        log.info("resumed at round %d", fed.round)
    mode = "a" if resume else "w"
    with open(run_dir / "rounds.jsonl", mode) as rounds_f, open(run_dir / "timing.jsonl", mode) as timing_f:
        while fed.round < cfg.rounds:
            (report,) = fed.train(1, cfg.mode, eval_set=eval_set if len(eval_set) else None, eval_every=cfg.eval_every)
            rounds_f.write(_report_line(report) + "\n")
            timing_f.write(json.dumps({"round": report.round, "compute_ms": report.compute_ms}, sort_keys=True) + "\n")
            if cfg.checkpoint_every and fed.round % cfg.checkpoint_every == 0:
                _save(fed, ckpt, cfg)
    _save(fed, ckpt, cfg)
    metrics = evaluate(fed.scorer(), eval_set).as_dict() if len(eval_set) else {}
    _write_json(run_dir / "metrics.json", metrics)
    return metrics


def cmd_eval(cfg: RunConfig, checkpoint: Path | None, scorer: str = "model") -> dict:
    """Metrics of a checkpoint (or a fresh initialization) on the held-out split."""
    train, eval_set = load_data(cfg)
    if scorer == "oracle":
        record = evaluate(oracle_scorer(eval_set), eval_set)
    elif scorer == "random":
        record = evaluate(random_scorer(cfg.seed), eval_set)
    else:
        fed = Federation(train, cfg.federation(K=1))
        if checkpoint is not None:
            towers, _, _ = load_checkpoint(checkpoint)
            fed.agg.user_params, fed.server.item_params = towers["user"], towers["item"]
        record = evaluate(fed.scorer(), eval_set)
    return record.as_dict()


def _bench_mode(train, cfg: RunConfig, mode: str) -> tuple[CostLedger, Federation]:
    ledger = CostLedger()
    fed = Federation(train, cfg.federation(), ledger=ledger)
    fed.train(cfg.rounds, mode)
    fed.run_inference(mode)
    return ledger, fed


def ring_bytes_per_client(ledger: CostLedger, round: int) -> float:
    sent = ledger.select(round=round, entity="client", direction=Direction.SENT, channel=("ring",))
    return sum(e.amount for e in sent) / max(1, len({e.entity for e in sent}))


def sas_ops(ledger: CostLedger, round: int | None = None) -> int:
    return ledger.total(round=round, entity=AGG_SERVER, direction=Direction.COMPUTE, channel=("secure_agg",))


def cmd_bench(cfg: RunConfig, k_sweep: Sequence[int] = ()) -> dict:
    """Split vs naive cost comparison on identical data and seeds."""
    train, _ = load_data(cfg)
    split_ledger, fed = _bench_mode(train, cfg, "split")
    naive_ledger, _ = _bench_mode(train, cfg, "naive")
    user, item = (TowerDims.from_params(p) for p in fed.snapshot())
    catalog = train.catalog
    predictions = {
        "train_ops": acct.predict_train_compute(user, item, cfg.T),
        "infer_payload_bytes": acct.predict_infer_comm(len(catalog), catalog.raw_bytes, item.embedding_dim),
    }
    report = acct.reconcile(split_ledger, naive_ledger, predictions)
    report["formula"] = asdict(acct.dssm_compute_formula(user.input_dim, item.input_dim, user.widths, cfg.T)) if cfg.arch == "dssm" else None
    report["config"] = asdict(cfg)
    if k_sweep:
        rows = []
        for k in k_sweep:
            ledger = CostLedger()
            f = Federation(train, cfg.federation(K=k, cut_layout="catalog"), ledger=ledger)
            f.step("split")
            rows.append({"K": k, "ring_bytes_per_client": ring_bytes_per_client(ledger, 0), "sas_ops": sas_ops(ledger, 0)})
        report["k_sweep"] = rows
    return report


SWEEP_COLUMNS = ("param", "value", "auc", "p10", "ndcg10", "client_bytes", "sas_ops")


def cmd_sweep(cfg: RunConfig, param: str, values: Sequence[str], out_csv: Path) -> list[dict]:
    """Train once per value of ``param`` and write one CSV row per value."""
    if param not in ("rho", "K"):
        raise ConfigError("sweep parameter must be rho or K")
    train, eval_set = load_data(cfg)
    rows = []
    for raw in values:
        value = _coerce(param, raw)
        run = replace(cfg, **{param: value})
        run.validate()
        ledger = CostLedger()
        fed = Federation(train, run.federation(), ledger=ledger)
        fed.train(run.rounds, run.mode)
        metrics = evaluate(fed.scorer(), eval_set)
        costs = acct.client_costs(ledger)
        rows.append(
            {
                "param": param,
                "value": value,
                "auc": metrics.auc,
                "p10": metrics.p10,
                "ndcg10": metrics.ndcg10,
                "client_bytes": costs.get("train_bytes", 0.0),
                "sas_ops": sas_ops(ledger) / max(1, run.rounds),
            }
        )
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    with open(out_csv, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    return rows


def cmd_report(path: Path) -> str:
    """Render a JSON report (bench or metrics) as a text table."""
    try:
        obj = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read report {path}: {exc}") from exc
    if "rows" in obj:
        text = acct.format_cost_table(obj)
        if obj.get("k_sweep"):
            text += "\n\n" + "\n".join(f"K={r['K']:<5} ring bytes/client={r['ring_bytes_per_client']:.0f} sas ops={r['sas_ops']}" for r in obj["k_sweep"])
        return text
    if {"auc", "p10", "ndcg10"} <= set(obj):
        return format_metrics_table({"model": {m: (obj[m], 0.0) for m in ("auc", "p10", "ndcg10")}})
    raise DataError(f"{path} is neither a bench nor a metrics report")


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat config file (JSON object or key = value lines)")
    p.add_argument("--synthetic", action="store_true", help="use generated data even if the config names a dataset")
    for f in fields(RunConfig):
        default = getattr(RunConfig(), f.name)
        flag = "--" + f.name.replace("_", "-")
        if isinstance(default, bool):
            p.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None)
        else:
            p.add_argument(flag, dest=f.name, default=None, help=f"default: {default!r}")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="splitrec", description="Split two-tower federated recommendation simulator")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train and write round reports + checkpoints")
    _add_config_flags(p)
    p.add_argument("--name", default="train", help="run directory name under the output dir")
    p.add_argument("--resume", action="store_true", help="continue from the run directory's checkpoint")

    p = sub.add_parser("eval", help="held-out metrics for a checkpoint")
    _add_config_flags(p)
    p.add_argument("--checkpoint", help="checkpoint directory; omitted means a fresh initialization")
    p.add_argument("--scorer", choices=("model", "oracle", "random"), default="model")
    p.add_argument("--json", action="store_true", help="print JSON instead of a table")

    p = sub.add_parser("bench", help="split vs naive efficiency comparison")
    _add_config_flags(p)
    p.add_argument("--k-sweep", default="", help="comma-separated K values for the ring-scaling subreport")

    p = sub.add_parser("sweep", help="metrics and costs across rho or K")
    _add_config_flags(p)
    p.add_argument("--param", required=True, choices=("rho", "K"))
    p.add_argument("--values", required=True, help="comma-separated values")

    p = sub.add_parser("report", help="render a JSON report as a table")
    p.add_argument("path")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            print(cmd_report(Path(args.path)))
            return EXIT_OK
        cfg = build_config(args)
        out = cfg.out_dir()
        if args.command == "train":
            metrics = cmd_train(cfg, out / args.name, args.config, args.resume)
            print(json.dumps(metrics, sort_keys=True))
        elif args.command == "eval":
            metrics = cmd_eval(cfg, Path(args.checkpoint) if args.checkpoint else None, args.scorer)
            if args.json:
                print(json.dumps(metrics, sort_keys=True))
            else:
                print(format_metrics_table({args.scorer: {m: (metrics[m], 0.0) for m in ("auc", "p10", "ndcg10")}}))
        elif args.command == "bench":
            ks = [int(k) for k in args.k_sweep.split(",") if k.strip()]
            report = cmd_bench(cfg, ks)
            out.mkdir(parents=True, exist_ok=True)
            acct.write_report(report, out / "bench.json")
            print(acct.format_cost_table(report))
        elif args.command == "sweep":
            values = [v.strip() for v in args.values.split(",") if v.strip()]
            rows = cmd_sweep(cfg, args.param, values, out / f"sweep_{args.param}.csv")
            print(json.dumps(rows, sort_keys=True))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (SplitRecError, OSError, ValueError, ArithmeticError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
