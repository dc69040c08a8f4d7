"""Command-line entry point.

Subcommands: ``train``, ``gradcheck``, ``kernel eval`` and ``bench-allreduce``.
Every subcommand accepts ``--config FILE`` holding ``key=value`` lines
(``#`` starts a comment); flags given on the command line win over the file.

Exit status is 0 on success, 1 when a check or run fails and 2 on usage
errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import io
import json
import sys
from dataclasses import dataclass

import numpy as np

from . import links as L
from . import optim
from . import tensor as T
from .training import (
    Dataset,
    Evaluator,
    LogReport,
    SerialIterator,
    StandardUpdater,
    Trainer,
    load_idx_dataset,
    synthetic_split,
)


class UsageError(Exception):
    """Bad flags or config; maps to exit status 2."""


# --------------------------------------------------------------------- config


@dataclass
class RunConfig:
    """Flat description of a training run; round-trips through key=value text."""

    seed: int = 0
    dataset: str = "synthetic"
    n_train: int = 800
    n_val: int = 200
    n_hid: int = 32
    optimizer: str = "momentum_sgd"
    lr: float | None = None
    batchsize: int = 32
    epochs: int = 20
    workers: int = 1
    transport: str = "inprocess"
    rank: int | None = None
    endpoints: str | None = None
    snapshot: str | None = None
    timeout: float = 30.0

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if value is not None:
                lines.append(f"{f.name}={value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        values = parse_config_text(text)
        kinds = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in kinds:
                raise UsageError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(raw, kinds[key])
        return cls(**kwargs)


def _coerce(raw: str, kind: str):
    kind = kind.replace(" | None", "")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def parse_config_text(text: str) -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"config line {lineno}: expected key=value, got {line!r}")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def read_config_file(path: str) -> dict[str, str]:
    try:
        with open(path) as fh:
            return parse_config_text(fh.read())
    except OSError as e:
        raise UsageError(f"--config: {e}") from None


# ---------------------------------------------------------------------- train


def load_datasets(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    if cfg.dataset == "synthetic":
        return synthetic_split(cfg.n_train, cfg.n_val, seed=cfg.seed)
    if cfg.dataset.startswith("idx:"):
        try:
            images, labels = cfg.dataset[4:].split(",")
        except ValueError:
            raise UsageError("--dataset idx:<images>,<labels> needs two comma-separated paths") from None
        full = load_idx_dataset(images, labels)
        n_val = min(cfg.n_val, len(full) // 5)
        n_train = len(full) - n_val
        return full.subset(np.arange(n_train)), full.subset(np.arange(n_train, len(full)))
    raise UsageError(f"--dataset: expected 'synthetic' or 'idx:<images>,<labels>', got {cfg.dataset!r}")


def make_optimizer(cfg: RunConfig) -> optim.Optimizer:
    hp = {}
    if cfg.lr is not None:
        hp["alpha" if cfg.optimizer == "adam" else "lr"] = cfg.lr
    return optim.create(cfg.optimizer, **hp)


class _RankMeanLoss:
    """Replaces the per-rank epoch loss by its mean over all ranks."""

    def __init__(self, comm):
        self.comm = comm

    def __call__(self, trainer):
        local = np.array([trainer.current_record["mean_loss"]])
        return {"mean_loss": float(self.comm.allreduce_sum(local).numpy()[0] / self.comm.size)}


def train_worker(comm, cfg: RunConfig, stream=None) -> dict:
    """One rank of a (possibly single-rank) data-parallel training run."""
    from .distributed import broadcast_params, multi_node_optimizer, scatter_dataset

    train_set, val_set = load_datasets(cfg)
    dtype = train_set.x.dtype
    model = L.MLP(train_set.x.shape[1], cfg.n_hid, max(train_set.n_classes, val_set.n_classes), dtype=dtype)
    model.init_params(cfg.seed)
    opt = make_optimizer(cfg)
    if comm.size > 1:
        broadcast_params(model, comm)
        train_set = scatter_dataset(train_set, comm, shuffle=True, seed=cfg.seed, force_equal_length=True)
        opt = multi_node_optimizer(opt, comm)
    opt.setup(model)
    iterator = SerialIterator(train_set, cfg.batchsize, shuffle=True, seed=cfg.seed + comm.rank)
    trainer = Trainer(StandardUpdater(iterator, opt, model), stop_trigger=(cfg.epochs, "epoch"))
    if comm.size > 1:
        trainer.extend(_RankMeanLoss(comm))
    trainer.extend(Evaluator(val_set, model))
    if stream is not None and comm.rank == 0:
        trainer.extend(LogReport(stream))
    report = trainer.run()
    if cfg.snapshot and comm.rank == 0:
        with open(cfg.snapshot, "wb") as fh:
            L.save(model, fh)
    return {"report": report, "checksum": L.checksum(model)}


def _train_worker_tcp(comm, cfg_text: str) -> dict:
    return train_worker(comm, RunConfig.from_text(cfg_text))


def run_train(cfg: RunConfig, stdout, stderr) -> int:
    from .distributed import SingleCommunicator, create_communicator, launch_tcp, run_inprocess

    if cfg.workers < 1:
        raise UsageError("--workers must be at least 1")
    if cfg.batchsize < 1 or cfg.epochs < 1:
        raise UsageError("--batchsize and --epochs must be positive")
    if cfg.optimizer not in optim.RULES:
        raise UsageError(f"--optimizer: choose from {', '.join(sorted(optim.RULES))}")

    if cfg.workers == 1:
        result = train_worker(SingleCommunicator(), cfg, stdout)
    elif cfg.transport == "inprocess":
        result = run_inprocess(cfg.workers, train_worker, cfg, stdout, timeout=cfg.timeout)[0]
    elif cfg.transport == "tcp" and cfg.rank is not None:
        if not cfg.endpoints:
            raise UsageError("--rank needs --endpoints host:port,... (one per worker)")
        with create_communicator("tcp", cfg.rank, cfg.workers, cfg.endpoints, cfg.timeout) as comm:
            result = train_worker(comm, cfg, stdout)
            comm.barrier()
    elif cfg.transport == "tcp":
        endpoints = cfg.endpoints.split(",") if cfg.endpoints else None
        result = launch_tcp(cfg.workers, _train_worker_tcp, cfg.to_text(), timeout=cfg.timeout, endpoints=endpoints)[0]
        for record in result["report"]:
            stdout.write(json.dumps(record) + "\n")
    else:
        raise UsageError(f"--transport: expected inprocess or tcp, got {cfg.transport!r}")

    report = result["report"]
    if report and (cfg.rank in (None, 0)):
        last = report[-1]
        stderr.write(
            f"trained {len(report)} epoch(s) on {cfg.workers} worker(s): "
            f"loss {last['mean_loss']:.4f}, val accuracy {last['val_accuracy']:.4f}\n"
        )
    return 0


# ------------------------------------------------------------------ gradcheck


def run_gradcheck(args, stdout, stderr) -> int:
    from .gradcheck import CATALOG, run_catalog

    cases = CATALOG
    if args.ops:
        wanted = set(args.ops.split(","))
        cases = tuple(c for c in CATALOG if c.name in wanted or c.op in wanted)
        if not cases:
            raise UsageError(f"--ops: no catalog case matches {args.ops!r}")
    reports = run_catalog(_int_list(args.seeds, "--seeds"), cases)
    for r in reports:
        stdout.write(r.line() + "\n")
    failed = [r for r in reports if not r.passed]
    stderr.write(f"{len(reports) - len(failed)}/{len(reports)} gradient checks passed\n")
    return 1 if failed else 0


# --------------------------------------------------------------------- kernel


def run_kernel_eval(args, stdout, stderr) -> int:
    from . import kernel

    if not (args.sig and args.out and args.expr and args.inputs):
        raise UsageError("kernel eval needs --sig, --out, --expr and --inputs")
    try:
        k = kernel.compile_elementwise(args.sig, args.out, args.expr, name=args.name)
    except (kernel.KernelSyntaxError, kernel.KernelCompileError) as e:
        raise UsageError(f"--sig/--out/--expr: {type(e).__name__}: {e}") from None
    with open(args.inputs, "rb") as fh:
        records = list(T.read_snapshot(fh))
    by_name = dict(records)
    names = [p.name for p in k.inputs]
    if all(n in by_name for n in names):
        arrays = [by_name[n] for n in names]
    elif len(records) == len(names):
        arrays = [arr for _, arr in records]
    else:
        raise UsageError(f"--inputs: kernel takes {names}, snapshot holds {[p for p, _ in records]}")
    result = k(*arrays)
    buf = io.BytesIO()
    T.write_snapshot(buf, [(k.outputs[0].name, result)])
    out = getattr(stdout, "buffer", stdout)
    out.write(buf.getvalue())
    out.flush()
    return 0


# ---------------------------------------------------------------------- bench


def run_bench(args, stdout, stderr) -> int:
    from .distributed import bench_allreduce, parse_sizes, write_csv

    try:
        sizes = parse_sizes(args.sizes)
    except ValueError as e:
        raise UsageError(f"--sizes: {e}") from None
    workers = _int_list(args.workers, "--workers")
    if args.iters < 1 or any(n < 1 for n in workers):
        raise UsageError("--iters and --workers must be positive")
    rows = bench_allreduce(workers, sizes, args.iters, transport=args.transport, seed=args.seed)
    write_csv(rows, stdout)
    return 0


def _int_list(text: str, flag: str) -> list[int]:
    try:
        return [int(s) for s in str(text).split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"{flag}: expected comma-separated integers, got {text!r}") from None


# --------------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dbrun", description="Define-by-run training toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    common = _Parser(add_help=False)
    common.add_argument("--config", help="key=value file; command-line flags override it")

    d = RunConfig()
    p = sub.add_parser("train", parents=[common], help="train a 2-layer MLP classifier")
    p.add_argument("--dataset", default=d.dataset, help="synthetic or idx:<images>,<labels>")
    p.add_argument("--n-train", type=int, default=d.n_train)
    p.add_argument("--n-val", type=int, default=d.n_val)
    p.add_argument("--n-hid", type=int, default=d.n_hid)
    p.add_argument("--batchsize", type=int, default=d.batchsize, help="per-worker minibatch size")
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--optimizer", default=d.optimizer, choices=sorted(optim.RULES))
    p.add_argument("--lr", type=float, default=d.lr, help="learning rate (alpha for adam)")
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--snapshot", default=d.snapshot, help="write final parameters here")
    p.add_argument("--workers", type=int, default=d.workers)
    p.add_argument("--transport", default=d.transport, choices=["inprocess", "tcp"])
    p.add_argument("--rank", type=int, default=d.rank, help="run only this rank (tcp)")
    p.add_argument("--endpoints", default=d.endpoints, help="host:port,... one per rank (tcp)")
    p.add_argument("--timeout", type=float, default=d.timeout)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every op")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--ops", default=None, help="comma-separated case or op names")

    p = sub.add_parser("kernel", help="custom elementwise kernels")
    ksub = p.add_subparsers(dest="kernel_command", required=True, parser_class=_Parser)
    p = ksub.add_parser("eval", parents=[common], help="evaluate a kernel on snapshot inputs")
    p.add_argument("--sig", default=None, help='input parameters, e.g. "float32 x, float32 y"')
    p.add_argument("--out", default=None, help='output parameter, e.g. "float32 z"')
    p.add_argument("--expr", default=None, help='body, e.g. "z = x * y"')
    p.add_argument("--inputs", default=None, help="snapshot file with one record per input")
    p.add_argument("--name", default="kernel")

    p = sub.add_parser("bench-allreduce", parents=[common], help="all-reduce timing table as CSV")
    p.add_argument("--sizes", default="1k,1m")
    p.add_argument("--workers", default="1,2,4", help="comma-separated worker counts")
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--transport", default="inprocess", choices=["inprocess", "tcp"])
    p.add_argument("--seed", type=int, default=0)
    return parser


def _subparser(parser, argv_command: list[str]):
    action = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    p = action.choices[argv_command[0]]
    if argv_command[0] == "kernel" and len(argv_command) > 1:
        inner = next(a for a in p._actions if isinstance(a, argparse._SubParsersAction))
        p = inner.choices[argv_command[1]]
    return p


def parse_args(argv: list[str]) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        values = read_config_file(args.config)
        path = [args.command] + ([args.kernel_command] if args.command == "kernel" else [])
        sub = _subparser(parser, path)
        known = {a.dest for a in sub._actions}
        unknown = sorted(set(values) - known)
        if unknown:
            raise UsageError(f"--config: unknown key {unknown[0]!r} for {' '.join(path)}")
        try:
            sub.set_defaults(**{k: _convert(sub, k, v) for k, v in values.items()})
        except (TypeError, ValueError) as e:
            raise UsageError(f"--config: {e}") from None
        args = parser.parse_args(argv)
    return args


def _convert(sub, dest, raw):
    action = next(a for a in sub._actions if a.dest == dest)
    value = action.type(raw) if action.type else raw
    if action.choices is not None and value not in action.choices:
        raise ValueError(f"{dest}={raw!r} not in {sorted(action.choices)}")
    return value


def config_from_args(args) -> RunConfig:
    names = {f.name for f in dataclasses.fields(RunConfig)}
    return RunConfig(**{k: v for k, v in vars(args).items() if k in names})


def main(argv=None, stdout=None, stderr=None) -> int:
    stdout = stdout if stdout is not None else sys.stdout
    stderr = stderr if stderr is not None else sys.stderr
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
        if args.command == "train":
            return run_train(config_from_args(args), stdout, stderr)
        if args.command == "gradcheck":
            return run_gradcheck(args, stdout, stderr)
        if args.command == "kernel":
            return run_kernel_eval(args, stdout, stderr)
        return run_bench(args, stdout, stderr)
    except UsageError as e:
        stderr.write(f"usage error: {e}\n")
        return 2
    except SystemExit as e:  # --help
        return int(e.code or 0)
    except Exception as e:  # any failure of the run itself
        stderr.write(f"error: {type(e).__name__}: {e}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
