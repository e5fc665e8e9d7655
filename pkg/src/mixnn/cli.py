"""Operator entry points.

Exit codes: 0 ok, 2 usage/config error, 3 crash detected, 4 validation
failed, 5 I/O error. Config files are `key = value` lines; # comments and
blank lines are ignored; command-line flags override file values.
"""

import base64
import logging
import os
import stat
import sys

import click

from . import harness, nn, onion
from .crypto import Address, KeyPair, KeyRecord, gen_keypair
from .designer import (ConfigError, CrashDetected, Designer, ProvisionPlan,
                       TrainingConfig)
from .directory import Directory
from .harness import (DirectoryClient, DirectoryServer, NodeRuntime, SimNet,
                      SocketNodeServer, load_mnist_idx, run_baseline,
                      spawn_pool, synthetic_two_gaussians)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CRASH = 3
EXIT_VALIDATION = 4
EXIT_IO = 5


class ConfigFileError(Exception):
    pass


def parse_config(path: str) -> dict:
    """key = value lines; every error names its line number."""
    values = {}
    try:
        with open(path, encoding="utf-8") as f:
            lines = f.readlines()
    except OSError as exc:
        raise ConfigFileError(f"{path}: {exc}") from None
    for lineno, line in enumerate(lines, 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, sep, value = stripped.partition("=")
        if not sep:
            raise ConfigFileError(f"{path}:{lineno}: expected key = value, got {stripped!r}")
        values[key.strip()] = value.strip()
    return values


def parse_model(text: str):
    """Layer chains like: linear:784x128,relu | linear:128x64,relu | ...

    Layers are separated by '|', primitives inside a layer by ','.
    """
    chains = []
    for layer_text in text.split("|"):
        chain = []
        for prim in layer_text.split(","):
            prim = prim.strip().lower()
            if prim.startswith("linear:"):
                dims = prim.split(":", 1)[1]
                in_dim, _, out_dim = dims.partition("x")
                chain.append(nn.linear(int(in_dim), int(out_dim)))
            elif prim in ("relu", "logsoftmax", "nllloss", "identity"):
                chain.append(nn.PrimitiveOp(prim))
            else:
                raise ConfigFileError(f"unknown primitive {prim!r} in model")
        chains.append(chain)
    return chains


TABLE_MODEL = "linear:784x128,relu | linear:128x64,relu | linear:64x10 | logsoftmax | nllloss"


def _load_dataset(cfg: dict, prefix: str = "") -> harness.Dataset:
    kind = cfg.get(prefix + "data", "synthetic")
    limit = int(cfg[prefix + "limit"]) if prefix + "limit" in cfg else None
    if kind == "mnist":
        ds = load_mnist_idx(cfg[prefix + "images"], cfg[prefix + "labels"], limit=limit)
    elif kind == "synthetic":
        ds = synthetic_two_gaussians(
            n=limit or 512,
            dim=int(cfg.get("input_dim", 784)),
            seed=int(cfg.get("data_seed", cfg.get("seed", 0))),
        )
    else:
        raise ConfigFileError(f"unknown data kind {kind!r}")
    return ds


def _training_config(cfg: dict) -> TrainingConfig:
    return TrainingConfig(
        epochs=int(cfg.get("epochs", 1)),
        batch_size=int(cfg.get("batch_size", 64)),
        learning_rate=float(cfg.get("learning_rate", 0.01)),
        momentum=float(cfg.get("momentum", 0.9)),
        seed=int(cfg.get("seed", 0)),
        shuffle=cfg.get("shuffle", "true").lower() != "false",
        time_bound_T=float(cfg["time_bound"]) if "time_bound" in cfg else None,
        hold_first_layer=cfg.get("hold_first_layer", "false").lower() == "true",
        hold_last_layer=cfg.get("hold_last_layer", "false").lower() == "true",
    )


@click.group()
@click.option("--verbose", is_flag=True, help="log node/designer events to stderr")
def main(verbose):
    """MixNN: decentralized layer-per-server training behind onion routing."""
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.INFO if verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(message)s",
    )


@main.command()
@click.option("--out", required=True, type=click.Path(), help="basename for .pk/.sk files")
@click.option("--seed", default=None, help="hex seed for reproducible keys (tests)")
def keygen(out, seed):
    """Generate a key pair; the secret key file is chmod 0600."""
    kp = gen_keypair(bytes.fromhex(seed) if seed else None)
    try:
        with open(out + ".pk", "w", encoding="utf-8") as f:
            f.write(base64.b64encode(kp.pk).decode() + "\n")
        sk_path = out + ".sk"
        with open(sk_path, "w", encoding="utf-8") as f:
            f.write(base64.b64encode(kp.sk).decode() + "\n")
        os.chmod(sk_path, stat.S_IRUSR | stat.S_IWUSR)
    except OSError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_IO)
    click.echo(f"wrote {out}.pk and {out}.sk")


def _read_keypair(basename: str) -> KeyPair:
    with open(basename + ".pk", encoding="utf-8") as f:
        pk = base64.b64decode(f.read().strip())
    with open(basename + ".sk", encoding="utf-8") as f:
        sk = base64.b64decode(f.read().strip())
    return KeyPair(pk=pk, sk=sk)


@main.command("directory")
@click.option("--listen", default="127.0.0.1", help="host to bind (ephemeral port)")
@click.option("--store", default=None, type=click.Path(), help="append-only record store")
def directory_cmd(listen, store):
    """Run the registration authority until interrupted."""
    server = DirectoryServer(Directory(store_path=store), host=listen)
    server.start()
    click.echo(f"directory listening on {server.address}")
    try:
        while True:
            server.join(timeout=1.0)
    except KeyboardInterrupt:
        server.stop()


@main.command("node")
@click.option("--listen", default="127.0.0.1", help="host to bind (ephemeral port)")
@click.option("--key", "key_path", required=True, help="key file basename from keygen")
@click.option("--directory", "directory_addr", required=True, help="directory host:port")
@click.option("--node-id", default=None, help="defaults to host:port")
@click.option("--packet-len", default=onion.DEFAULT_PACKET_LEN, show_default=True)
def node_cmd(listen, key_path, directory_addr, node_id, packet_len):
    """Run one layer server: register, then serve until interrupted."""
    try:
        kp = _read_keypair(key_path)
    except OSError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_IO)
    runtime = NodeRuntime(node_id or "pending", kp, packet_len=packet_len)
    server = SocketNodeServer(runtime, host=listen)
    if node_id is None:
        runtime.state.node_id = str(server.address)
    try:
        client = DirectoryClient(Address.parse(directory_addr))
        client.register(KeyRecord(runtime.state.node_id, server.address, kp.pk, {}))
    except Exception as exc:
        click.echo(f"registration failed: {exc}", err=True)
        sys.exit(EXIT_USAGE)
    server.start()
    click.echo(f"node {runtime.state.node_id} listening on {server.address}")
    try:
        while True:
            server.join(timeout=1.0)
    except KeyboardInterrupt:
        server.stop()


def _build_world(cfg: dict, config: TrainingConfig):
    """Assemble pool + designer from a config; simulated unless mode=socket."""
    packet_len = int(cfg.get("packet_len", onion.DEFAULT_PACKET_LEN))
    chains = parse_model(cfg.get("model", TABLE_MODEL))
    model = nn.make_layer_specs(chains, config.seed)
    plan = ProvisionPlan(
        n=int(cfg["n"]) if "n" in cfg else len(model)
          - (1 if config.hold_first_layer else 0) - (1 if config.hold_last_layer else 0),
        p=int(cfg["p"]) if "p" in cfg else len(model)
          - (1 if config.hold_first_layer else 0) - (1 if config.hold_last_layer else 0),
        r=int(cfg.get("r", 0)),
        selection_seed=int(cfg.get("selection_seed", cfg.get("seed", 0))),
    )
    mode = cfg.get("mode", "simulated")
    if mode == "simulated":
        net = SimNet(latency=float(cfg.get("latency", 0.001)),
                     proc_delay=float(cfg.get("proc_delay", 0.0005)),
                     seed=int(cfg.get("seed", 0)))
        dir_obj = Directory()
        pool = spawn_pool(net, int(cfg.get("pool_size", plan.n * 2 + 2)), dir_obj,
                          packet_len=packet_len)
        channel = net.designer_channel()
        cleanup = pool.stop
    elif mode == "socket":
        dir_obj = DirectoryClient(Address.parse(cfg["directory"]))
        pool = None
        channel = harness.SocketChannel(packet_len=packet_len)
        cleanup = channel.stop
    else:
        raise ConfigFileError(f"unknown mode {mode!r}")
    designer = Designer(channel, gen_keypair())
    records = dir_obj.list()
    return designer, records, model, plan, pool, packet_len, cleanup


def _run_training(cfg: dict):
    config = _training_config(cfg)
    designer, records, model, plan, pool, packet_len, cleanup = _build_world(cfg, config)
    try:
        cascade = designer.provision(records, model, plan, config=config,
                                     packet_len=packet_len)
        if pool is not None and "fault_plan" in cfg:
            with open(cfg["fault_plan"], encoding="utf-8") as f:
                harness.inject_fault(harness.parse_fault_plan(f.read()), pool, cascade)
        designer.send_designer_loop(cascade, timeout=float(cfg.get("loop_timeout", 30.0)))
        designer.initialize_model(cascade, config)
        train_ds = _load_dataset(cfg)
        test_ds = _load_dataset(cfg, prefix="test_") if "test_data" in cfg else None
        metrics = designer.train(
            cascade, train_ds.images, train_ds.labels, config,
            test_data=test_ds.images if test_ds else None,
            test_labels=test_ds.labels if test_ds else None,
        )
        holdout = test_ds or train_ds
        verdict = True
        if "threshold" in cfg:
            verdict = designer.validate_model(cascade, holdout.images, holdout.labels,
                                              float(cfg["threshold"]), config=config)
        return metrics, verdict
    finally:
        cleanup()


@main.command("train")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--out", default=None, type=click.Path(), help="metrics CSV path")
@click.option("--simulated", is_flag=True, help="force simulated transport")
def train_cmd(config_path, out, simulated):
    """Provision a cascade and run the training loop per the config file."""
    try:
        cfg = parse_config(config_path)
        if simulated:
            cfg["mode"] = "simulated"
        metrics, verdict = _run_training(cfg)
    except (ConfigFileError, ConfigError) as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_USAGE)
    except CrashDetected as exc:
        click.echo(f"crash detected: {exc}", err=True)
        if out and exc.metrics is not None:  # partial rows plus the crash event
            harness.write_metrics(out, exc.metrics)
        sys.exit(EXIT_CRASH)
    except OSError as exc:
        click.echo(f"I/O error: {exc}", err=True)
        sys.exit(EXIT_IO)
    if out:
        harness.write_metrics(out, metrics)
    else:
        click.echo(metrics.to_csv(), nl=False)
    if not verdict:
        click.echo("validation failed: model below threshold", err=True)
        sys.exit(EXIT_VALIDATION)


@main.command("test")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--simulated", is_flag=True, help="force simulated transport")
def test_cmd(config_path, simulated):
    """Train per config, then report holdout accuracy on stdout."""
    try:
        cfg = parse_config(config_path)
        if simulated:
            cfg["mode"] = "simulated"
        config = _training_config(cfg)
        designer, records, model, plan, pool, packet_len, cleanup = _build_world(cfg, config)
        try:
            cascade = designer.provision(records, model, plan, config=config,
                                         packet_len=packet_len)
            designer.send_designer_loop(cascade)
            designer.initialize_model(cascade, config)
            ds = _load_dataset(cfg)
            designer.train(cascade, ds.images, ds.labels, config)
            accuracy = designer.test(cascade, ds.images, ds.labels,
                                     batch_size=config.batch_size, config=config)
        finally:
            cleanup()
    except (ConfigFileError, ConfigError) as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_USAGE)
    except CrashDetected as exc:
        click.echo(f"crash detected: {exc}", err=True)
        sys.exit(EXIT_CRASH)
    except OSError as exc:
        click.echo(f"I/O error: {exc}", err=True)
        sys.exit(EXIT_IO)
    click.echo(f"accuracy={accuracy!r}")


@main.command("baseline")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--out", default=None, type=click.Path(), help="metrics CSV path")
def baseline_cmd(config_path, out):
    """Run the same model/config in a single process (the oracle)."""
    try:
        cfg = parse_config(config_path)
        config = _training_config(cfg)
        model = nn.make_layer_specs(parse_model(cfg.get("model", TABLE_MODEL)), config.seed)
        train_ds = _load_dataset(cfg)
        test_ds = _load_dataset(cfg, prefix="test_") if "test_data" in cfg else None
        _, metrics = run_baseline(
            model, train_ds.images, train_ds.labels, config,
            test_data=test_ds.images if test_ds else None,
            test_labels=test_ds.labels if test_ds else None,
        )
    except (ConfigFileError, ConfigError) as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_USAGE)
    except OSError as exc:
        click.echo(f"I/O error: {exc}", err=True)
        sys.exit(EXIT_IO)
    if out:
        harness.write_metrics(out, metrics)
    else:
        click.echo(metrics.to_csv(), nl=False)


def read_metrics_csv(path: str):
    """(epoch, accuracy) pairs from a metrics CSV, ignoring comments."""
    rows = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#") or line.startswith("epoch,"):
                continue
            parts = line.split(",")
            rows.append((int(parts[0]), float(parts[2])))
    return rows


@main.command("compare")
@click.option("--metrics", "paths", nargs=2, required=True, type=click.Path())
@click.option("--threshold", default=0.001, show_default=True)
def compare_cmd(paths, threshold):
    """Per-epoch accuracy deltas between two runs; exit 0 iff max |delta| is
    below the threshold."""
    try:
        a, b = read_metrics_csv(paths[0]), read_metrics_csv(paths[1])
    except OSError as exc:
        click.echo(f"I/O error: {exc}", err=True)
        sys.exit(EXIT_IO)
    if len(a) != len(b) or any(ra[0] != rb[0] for ra, rb in zip(a, b)):
        click.echo(f"epoch mismatch: {len(a)} vs {len(b)} rows", err=True)
        sys.exit(EXIT_USAGE)
    deltas = [abs(ra[1] - rb[1]) for ra, rb in zip(a, b)]
    for (epoch, acc_a), (_, acc_b), d in zip(a, b, deltas):
        click.echo(f"epoch {epoch}: {acc_a:.6f} vs {acc_b:.6f} delta={d:.6f}")
    max_delta = max(deltas) if deltas else 0.0
    click.echo(f"max_delta={max_delta:.6f}")
    if max_delta >= threshold:
        sys.exit(1)


if __name__ == "__main__":
    main()
