"""``gkt`` command line: simulation, networked server/client roles, baselines and cost reports.

Settings come from an optional flat ``key=value`` file (``--config``) and
are overridden by flags. Exit codes: 0 ok, 1 unexpected failure, 2 bad
configuration, 3 protocol error, 4 numeric divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__, accounting
from .data import dirichlet_partition, format_partition, load_cifar10, read_partition, synthetic_pair, write_partition
from .models import EdgeModel, ServerModel, named_model, resnet8_spec, server_spec, small_edge_spec, toy_specs
from .orchestrator import (
    ClientSession,
    ConfigError,
    DivergenceError,
    GktConfig,
    OptimizerSpec,
    build_gkt_models,
    run_centralized,
    run_client,
    run_fedavg,
    run_gkt,
    serve,
    write_manifest,
    write_metrics_csv,
)
from .protocol import ProtocolError, TcpListener, tcp_connect

log = logging.getLogger("gkt")

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_PROTOCOL, EXIT_DIVERGENCE = 0, 1, 2, 3, 4
ROLES = ("sim", "server", "client", "baseline")


@dataclass
class RunConfig:
    role: str = "sim"
    # data
    dataset: str = "toy"
    data_dir: str = ""
    num_classes: int = 4
    per_class: int = 200
    test_per_class: int = 100
    image_size: int = 8
    noise: float = 1.0
    train_subset: int = 0
    # models
    edge_model: str = "toy"
    server_model: str = "toy(1)"
    edge_width: int = 8
    server_width: int = 4
    # training
    rounds: int = 15
    client_epochs: int = 1
    server_epochs: int = 2
    batch_size: int = 32
    optimizer: str = "adam"
    lr: float = 3e-3
    server_optimizer: str = ""
    server_lr: float = 0.0
    momentum: float = 0.9
    weight_decay: float = 1e-4
    temperature: float = 5.0
    mode: str = "sync"
    kd_mode: str = "both"
    augment: bool = False
    participation: float = 1.0
    lr_patience: int = 0
    lr_factor: float = 0.5
    baseline: str = "fedavg"
    # federation
    k: int = 4
    seed: int = 0
    alpha: float = 0.5
    partition_seed: int = -1
    min_client_size: int = 10
    partition_file: str = ""
    # plumbing
    transport: str = "inproc"
    server_addr: str = ""
    listen: str = "127.0.0.1:0"
    client_id: int = -1
    barrier_timeout: float = 600.0
    out: str = ""

    def problems(self) -> list[str]:
        out = []
        if self.role not in ROLES:
            out.append(f"role must be one of {', '.join(ROLES)}")
        if self.dataset not in ("toy", "cifar10"):
            out.append(f"dataset must be toy or cifar10, got {self.dataset!r}")
        if self.dataset == "cifar10" and not self.data_dir:
            out.append("dataset cifar10 needs data_dir")
        if self.edge_model not in ("toy", "resnet8", "resnet4", "resnet6"):
            out.append(f"edge_model must be toy, resnet8, resnet4 or resnet6, got {self.edge_model!r}")
        if self.transport not in ("inproc", "tcp"):
            out.append(f"transport must be inproc or tcp, got {self.transport!r}")
        if self.baseline not in ("fedavg", "centralized"):
            out.append(f"baseline must be fedavg or centralized, got {self.baseline!r}")
        if self.role == "client":
            if not self.server_addr:
                out.append("role client needs server_addr (host:port)")
            if not 0 <= self.client_id < self.k:
                out.append(f"role client needs client_id in [0, {self.k}), got {self.client_id}")
        for name in ("server_addr", "listen"):
            v = getattr(self, name)
            if v and (":" not in v or not v.rsplit(":", 1)[1].isdigit()):
                out.append(f"{name} must look like host:port, got {v!r}")
        for name in ("per_class", "test_per_class", "image_size", "num_classes", "edge_width", "server_width"):
            if getattr(self, name) < 1:
                out.append(f"{name} must be >= 1")
        if self.noise < 0:
            out.append("noise must be non-negative")
        if self.train_subset < 0:
            out.append("train_subset must be non-negative")
        if not self.alpha > 0:
            out.append(f"alpha must be positive, got {self.alpha}")
        if self.min_client_size < 0:
            out.append("min_client_size must be non-negative")
        try:
            self.gkt_config()
        except ConfigError as exc:
            out += exc.problems
        return out

    def validate(self) -> "RunConfig":
        problems = self.problems()
        if problems:
            raise ConfigError(problems)
        return self

    def gkt_config(self) -> GktConfig:
        client = OptimizerSpec(self.optimizer, self.lr, self.momentum, self.weight_decay)
        server = OptimizerSpec(self.server_optimizer or self.optimizer, self.server_lr or self.lr, self.momentum,
                               self.weight_decay)
        return GktConfig(
            rounds=self.rounds, client_epochs=self.client_epochs, server_epochs=self.server_epochs,
            batch_size=self.batch_size, client_optimizer=client, server_optimizer=server,
            temperature=self.temperature, mode=self.mode, num_clients=self.k, seed=self.seed,
            kd_mode=self.kd_mode, augment=self.augment, participation=self.participation,
            lr_factor=self.lr_factor, lr_patience=self.lr_patience, barrier_timeout=self.barrier_timeout,
        )

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name}={str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"


_FIELDS = {f.name: f for f in fields(RunConfig)}
_BOOL = {"1": True, "true": True, "yes": True, "on": True, "0": False, "false": False, "no": False, "off": False}


def _coerce(key: str, raw: str):
    kind = type(getattr(RunConfig(), key))
    if kind is bool:
        if raw.lower() not in _BOOL:
            raise ValueError(f"{key}: expected a boolean, got {raw!r}")
        return _BOOL[raw.lower()]
    try:
        return kind(raw)
    except ValueError:
        raise ValueError(f"{key}: expected {kind.__name__}, got {raw!r}") from None


def read_config_file(path) -> dict:
    """Parse ``key=value`` lines; ``#`` starts a comment, keys may use dashes."""
    values, problems = {}, []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep:
            problems.append(f"{path}:{n}: expected key=value, got {line!r}")
        elif key not in _FIELDS:
            problems.append(f"{path}:{n}: unknown key {key!r}")
        else:
            try:
                values[key] = _coerce(key, raw.strip())
            except ValueError as exc:
                problems.append(f"{path}:{n}: {exc}")
    if problems:
        raise ConfigError(problems)
    return values


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    p.add_argument("--config", default=S, help="key=value file; flags override it")
    p.add_argument("--toy", action="store_const", const="toy", dest="dataset", default=S,
                   help="synthetic desk-scale dataset (the default)")
    for f in fields(RunConfig):
        if f.name in ("role",):
            continue
        flag = "--" + f.name.replace("_", "-")
        if f.type in ("bool", bool):
            p.add_argument(flag, dest=f.name, type=lambda v, k=f.name: _coerce(k, v), nargs="?", const=True,
                           default=S)
        else:
            p.add_argument(flag, dest=f.name, type=lambda v, k=f.name: _coerce(k, v), default=S)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gkt", description="Group knowledge transfer experiments.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (("sim", "run clients and server in one process"),
                        ("server", "host the coordinator and wait for TCP clients"),
                        ("client", "run one client against a server"),
                        ("baseline", "train the FedAvg or centralized baseline")):
        _add_run_flags(sub.add_parser(name, help=help_))
    p = sub.add_parser("partition", help="write a Dirichlet partition file")
    _add_run_flags(p)
    p = sub.add_parser("cost", help="print parameter, FLOP and communication costs as JSON")
    p.add_argument("--model", action="append", required=True,
                   help="resnet8, resnet4, resnet6, resnet55, resnet56, resnet109, resnet110, toy-edge, "
                        "toy-server or toy-full; repeatable")
    p.add_argument("--num-classes", type=int, default=10)
    p.add_argument("--samples", type=int, default=50000)
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--rounds", type=int, default=1)
    p.add_argument("--out", default="")
    return parser


def parse_config(argv: Sequence[str], config_file: Optional[str] = None) -> tuple[str, RunConfig]:
    """Parse a run subcommand into ``(command, RunConfig)``; raises ConfigError."""
    parser = build_parser()
    try:
        ns = parser.parse_args(list(argv))
    except SystemExit as exc:
        if exc.code:
            raise ConfigError([f"could not parse arguments: {' '.join(argv)}"]) from None
        raise
    values = {}
    path = config_file or getattr(ns, "config", None)
    if path:
        values.update(read_config_file(path))
    flags = {k: v for k, v in vars(ns).items() if k in _FIELDS}
    values.update(flags)
    role = ns.command if ns.command in ROLES else "sim"
    values.setdefault("role", role)
    values["role"] = role
    cfg = RunConfig(**values)
    return ns.command, cfg.validate()


# -- data and model plumbing -------------------------------------------------------

def load_data(cfg: RunConfig):
    if cfg.dataset == "toy":
        return synthetic_pair(cfg.num_classes, cfg.per_class, cfg.image_size, noise=cfg.noise, seed=cfg.seed,
                              test_per_class=cfg.test_per_class)
    train, test = load_cifar10(cfg.data_dir)
    if cfg.train_subset:
        keep = np.sort(np.random.default_rng([cfg.seed, 9]).permutation(len(train))[:cfg.train_subset])
        train = type(train)(train.images[keep], train.labels[keep], train.num_classes)
        test.mean, test.std = train.mean, train.std
    return train, test


def model_specs(cfg: RunConfig, num_classes: int, in_channels: int, image_size: int):
    if cfg.edge_model == "toy":
        return toy_specs(num_classes, image_size, in_channels, cfg.edge_width, cfg.server_width, cfg.server_model)
    if cfg.edge_model == "resnet8":
        edge = resnet8_spec(num_classes, cfg.edge_width, image_size, in_channels)
    else:
        edge = small_edge_spec(cfg.edge_model, num_classes, cfg.edge_width, image_size, in_channels)
    feature_shape = (edge.stem_width, image_size, image_size)
    return edge, server_spec(cfg.server_model, num_classes, feature_shape, cfg.server_width)


def load_partition(cfg: RunConfig, train):
    if cfg.partition_file:
        plan = read_partition(cfg.partition_file, train.labels, train.num_classes)
        if plan.num_clients != cfg.k:
            raise ConfigError([f"partition file has {plan.num_clients} clients but k={cfg.k}"])
        return plan
    seed = cfg.seed if cfg.partition_seed < 0 else cfg.partition_seed
    return dirichlet_partition(train, cfg.k, cfg.alpha, seed=seed, min_size=cfg.min_client_size)


def _addr(text: str) -> tuple[str, int]:
    host, port = text.rsplit(":", 1)
    return host, int(port)


def _outdir(cfg: RunConfig) -> Optional[Path]:
    if not cfg.out:
        return None
    path = Path(cfg.out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _finish(cfg: RunConfig, out: Optional[Path], rows, plan, edge_spec, server_spec_, extra=None) -> None:
    if out is None:
        for r in rows:
            print(",".join(str(v) for v in r.csv_row().values()))
        return
    write_metrics_csv(rows, out / "metrics.csv")
    (out / "run.cfg").write_text(cfg.to_text())
    if plan is not None:
        write_partition(plan, out / "partition.txt")
    edge, server = EdgeModel(edge_spec), ServerModel(server_spec_)
    report = accounting.cost_report({"edge": edge, "server": server}, train_factor=cfg.gkt_config().train_factor)
    manifest = {
        "version": __version__,
        "config": asdict(cfg),
        "config_file": "run.cfg",
        "seeds": {"run": cfg.seed, "partition": cfg.seed if cfg.partition_seed < 0 else cfg.partition_seed},
        "partition_file": "partition.txt" if plan is not None else None,
        "metrics_file": "metrics.csv",
        "cost": report.to_dict(),
    }
    manifest.update(extra or {})
    write_manifest(out / "manifest.json", manifest)


# -- subcommands ---------------------------------------------------------------------

def cmd_sim(cfg: RunConfig) -> int:
    train, test = load_data(cfg)
    plan = load_partition(cfg, train)
    edge_spec, server_spec_ = model_specs(cfg, train.num_classes, train.images.shape[1], train.images.shape[2])
    out = _outdir(cfg)
    result = run_gkt(cfg.gkt_config(), train, test, plan, edge_spec, server_spec_, transport=cfg.transport)
    _finish(cfg, out, result.metrics, plan, edge_spec, server_spec_)
    log.info("final test accuracy %.4f", result.final_accuracy)
    return EXIT_OK


def cmd_baseline(cfg: RunConfig) -> int:
    train, test = load_data(cfg)
    edge_spec, server_spec_ = model_specs(cfg, train.num_classes, train.images.shape[1], train.images.shape[2])
    out = _outdir(cfg)
    gcfg = cfg.gkt_config()
    if cfg.baseline == "fedavg":
        plan = load_partition(cfg, train)
        result = run_fedavg(gcfg, train, test, plan, edge_spec, server_spec_)
    else:
        plan = None
        result = run_centralized(gcfg, train, test, edge_spec, server_spec_)
    _finish(cfg, out, result.metrics, plan, edge_spec, server_spec_, {"baseline": cfg.baseline})
    log.info("final test accuracy %.4f", result.final_accuracy)
    return EXIT_OK


def cmd_server(cfg: RunConfig) -> int:
    train, _ = load_data(cfg)
    edge_spec, server_spec_ = model_specs(cfg, train.num_classes, train.images.shape[1], train.images.shape[2])
    gcfg = cfg.gkt_config()
    _, server_model = build_gkt_models(gcfg, edge_spec, server_spec_)
    host, port = _addr(cfg.listen)
    listener = TcpListener(host, port)
    print(f"listening on {listener.address[0]}:{listener.port}", flush=True)
    try:
        rows = serve(gcfg, listener, server_model, edge_spec)
    finally:
        listener.close()
    _finish(cfg, _outdir(cfg), rows, load_partition(cfg, train), edge_spec, server_spec_)
    return EXIT_OK


def cmd_client(cfg: RunConfig) -> int:
    train, test = load_data(cfg)
    plan = load_partition(cfg, train)
    edge_spec, server_spec_ = model_specs(cfg, train.num_classes, train.images.shape[1], train.images.shape[2])
    gcfg = cfg.gkt_config()
    edges, _ = build_gkt_models(gcfg, edge_spec, server_spec_)
    k = cfg.client_id
    session = ClientSession(k, edges[k], train, plan.indices[k], test, gcfg)
    conn = tcp_connect(*_addr(cfg.server_addr), timeout=cfg.barrier_timeout)
    run_client(session, conn, gcfg.rounds, gcfg.mode)
    return EXIT_OK


def cmd_partition(cfg: RunConfig) -> int:
    train, _ = load_data(cfg)
    plan = load_partition(cfg, train)
    if cfg.out:
        write_partition(plan, cfg.out)
    else:
        sys.stdout.write(format_partition(plan))
    return EXIT_OK


def cmd_cost(ns: argparse.Namespace) -> int:
    models = {name: named_model(name, ns.num_classes) for name in ns.model}
    report = accounting.cost_report(models, num_samples=ns.samples, epochs=ns.epochs)
    text = json.dumps(report.to_dict(), indent=2, sort_keys=True)
    if ns.out:
        Path(ns.out).write_text(text + "\n")
    else:
        print(text)
    return EXIT_OK


COMMANDS = {"sim": cmd_sim, "server": cmd_server, "client": cmd_client, "baseline": cmd_baseline,
            "partition": cmd_partition}


def _setup_logging() -> None:
    level = os.environ.get("GKT_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _setup_logging()
    try:
        ns = build_parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if not exc.code else EXIT_CONFIG
    try:
        if ns.command == "cost":
            return cmd_cost(ns)
        command, cfg = parse_config(argv)
        return COMMANDS[command](cfg)
    except ConfigError as exc:
        print(f"gkt: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ProtocolError as exc:
        print(f"gkt: protocol error: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except DivergenceError as exc:
        print(f"gkt: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (ValueError, FileNotFoundError) as exc:
        print(f"gkt: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        log.exception("unexpected failure")
        print(f"gkt: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
