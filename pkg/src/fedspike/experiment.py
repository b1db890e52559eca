"""Wires a config into a runnable federated experiment.

The pieces: a synthetic gesture pool split one-shot-per-class across
clients, identical frozen hidden layers on every client (same build
stream), per-client trainer rng streams, and cached hidden-layer spike
trains so local training and evaluation replay exactly.

Dataset files live in a directory written by write_dataset: one event file
per shot plus a JSON manifest naming every file and its label. A run can
also synthesize the same dataset in memory; both paths produce identical
spike trains for one seed.
"""

from __future__ import annotations

import json
import socket
import threading
from dataclasses import dataclass, replace
from math import ceil
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .data import GestureSample, bin_events, generate_synthetic, make_splits, read_events, write_events
from .federation import (
    FedConfig,
    LocalClient,
    ModelSnapshot,
    make_snapshot,
    run_federation,
    run_socket_client,
    serve_federation,
)
from .plasticity import SoelEngine
from .quant import Rng
from .snn import Network, build_network, classify, parse_arch


def synth_pool(cfg: ExperimentConfig) -> list[GestureSample]:
    """One sample per (class, subject): enough subjects for shots plus test."""
    extra = ceil(cfg.test_size / cfg.classes) if cfg.test_size else 0
    subjects = cfg.clients + extra
    pool = []
    for class_index in range(cfg.classes):
        for subject in range(subjects):
            pool.append(generate_synthetic(
                class_index, cfg.master_seed, subject=subject,
                width=cfg.width, height=cfg.height,
                duration_us=cfg.duration_us, step_us=cfg.step_us,
                noise_rate=cfg.noise_rate))
    return pool


def build_dataset(cfg: ExperimentConfig):
    """Synthesize and split: returns (ShotAssignment, test sample list)."""
    return make_splits(synth_pool(cfg), cfg.clients, cfg.test_size, cfg.master_seed)


def network_for(cfg: ExperimentConfig) -> Network:
    """Fresh network instance; hidden weights are identical across calls."""
    topos = parse_arch(cfg.arch, cfg.classes)
    return build_network(topos, cfg.hidden_params(), cfg.output_params(),
                         rng=Rng(cfg.master_seed).fork("network"),
                         hidden_init_mag=cfg.hidden_init_mag)


def cache_spikes(network: Network, samples, dt_us: int):
    """Bin events and run the frozen prefix once per sample."""
    return [(network.hidden_forward(bin_events(s, dt_us)), s.label) for s in samples]


def client_for(cfg: ExperimentConfig, client_id: int,
               samples) -> LocalClient:
    net = network_for(cfg)
    shots = cache_spikes(net, sorted(samples, key=lambda s: s.label), cfg.dt_us)
    engine = SoelEngine(cfg.plasticity_config(), cfg.error_unit(),
                        cfg.trace_template(), cfg.box_gate(),
                        Rng(cfg.master_seed).fork(f"client/{client_id}"))
    return LocalClient(client_id, net, engine, shots, cfg.classes,
                       cfg.target_rate, cfg.off_target)


@dataclass
class Experiment:
    cfg: ExperimentConfig
    clients: list[LocalClient]
    test_set: list
    initial: ModelSnapshot


def assemble(cfg: ExperimentConfig, shots_by_client=None,
             test_samples=None) -> Experiment:
    """Build clients and cached test data, from files or from scratch."""
    if shots_by_client is None:
        assignment, generated_test = build_dataset(cfg)
        shots_by_client = assignment.shots
        if test_samples is None:
            test_samples = generated_test
    clients = [client_for(cfg, cid, shots_by_client[cid])
               for cid in sorted(shots_by_client)]
    test_set = (cache_spikes(clients[0].network, test_samples, cfg.dt_us)
                if test_samples else [])
    head = clients[0].network.output_layer
    initial = make_snapshot(0, np.zeros((head.out_size, head.in_size), dtype=np.int8))
    return Experiment(cfg, clients, test_set, initial)


def fed_config(cfg: ExperimentConfig) -> FedConfig:
    transport = "socket" if cfg.transport == "socket" else "in_process"
    return FedConfig(num_clients=cfg.clients, server_rounds=cfg.rounds,
                     local_epochs=cfg.local_epochs, transport=transport,
                     listen=cfg.listen, timeout_s=cfg.timeout_s)


def run_simulation(cfg: ExperimentConfig, shots_by_client=None,
                   test_samples=None):
    """Full federation run per the config; returns (final, metrics, experiment).

    With test data present, every per-client record carries that client's
    local-model accuracy measured before aggregation, and every global
    record carries the aggregated model's accuracy.
    """
    ex = assemble(cfg, shots_by_client, test_samples)
    if cfg.transport == "socket":
        final, metrics = _run_socket_threads(cfg, ex)
        return final, metrics, ex
    eval_hook = local_hook = None
    if ex.test_set:
        eval_hook = lambda t, snap: {"accuracy": ex.clients[0].evaluate(ex.test_set)}
        local_hook = lambda t, c: {"accuracy": c.evaluate(ex.test_set)}
    final, metrics = run_federation(fed_config(cfg), ex.clients, ex.initial,
                                    eval_hook, local_hook)
    return final, metrics, ex


def _run_socket_threads(cfg: ExperimentConfig, ex: Experiment):
    """Socket transport inside one process: server and client threads."""
    fed = fed_config(cfg)
    srv = socket.create_server(("127.0.0.1", 0))
    address = srv.getsockname()
    results: dict = {}
    errors: list[BaseException] = []

    def server():
        try:
            results["server"] = serve_federation(fed, ex.initial, server_socket=srv)
        except BaseException as err:  # noqa: BLE001 - re-raised below
            errors.append(err)

    def client(c: LocalClient):
        try:
            results[c.client_id] = run_socket_client(fed, c, address)
        except BaseException as err:  # noqa: BLE001
            errors.append(err)

    threads = [threading.Thread(target=server)]
    threads += [threading.Thread(target=client, args=(c,)) for c in ex.clients]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]
    final, server_rows = results["server"]
    rows = list(server_rows)
    for c in ex.clients:
        rows.extend(results[c.client_id][1])
    rows.sort(key=lambda r: (r["round"],
                             0 if r["event"] == "train" else 1,
                             r.get("client", -1)))
    return final, rows


# --- dataset files ----------------------------------------------------------

MANIFEST_NAME = "manifest.json"


def write_dataset(cfg: ExperimentConfig, out_dir) -> Path:
    """Write one event file per sample plus a manifest; returns manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    assignment, test_samples = build_dataset(cfg)
    shots_entry: dict[str, list] = {}
    for cid in sorted(assignment.shots):
        client_dir = out / f"client_{cid}"
        client_dir.mkdir(exist_ok=True)
        entries = []
        for sample in sorted(assignment.shots[cid], key=lambda s: s.label):
            rel = f"client_{cid}/shot_{sample.label}.nfev"
            write_events(out / rel, sample)
            entries.append({"path": rel, "label": sample.label})
        shots_entry[str(cid)] = entries
    test_dir = out / "test"
    test_dir.mkdir(exist_ok=True)
    test_entry = []
    for i, sample in enumerate(test_samples):
        rel = f"test/{i:03d}_{sample.label}.nfev"
        write_events(out / rel, sample)
        test_entry.append({"path": rel, "label": sample.label})
    manifest = {
        "version": 1,
        "classes": cfg.classes,
        "clients": cfg.clients,
        "duration_us": cfg.duration_us,
        "shots": shots_entry,
        "test": test_entry,
    }
    path = out / MANIFEST_NAME
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return path


def _load_manifest(data_dir) -> tuple[dict, Path]:
    root = Path(data_dir)
    path = root / MANIFEST_NAME if root.is_dir() else root
    manifest = json.loads(path.read_text())
    return manifest, path.parent


def _read_entry(root: Path, entry: dict, manifest: dict) -> GestureSample:
    # Event files carry no recording window, so read_events infers one from
    # the last timestamp. The manifest records the true window; restore it
    # so a written dataset trains identically to the in-memory one.
    sample = read_events(root / entry["path"])
    duration = manifest.get("duration_us")
    if duration is not None:
        sample = replace(sample, duration_us=int(duration))
    return sample


def load_shots(data_dir, client_id: int) -> list[GestureSample]:
    manifest, root = _load_manifest(data_dir)
    key = str(client_id)
    if key not in manifest["shots"]:
        raise ValueError(f"no shots for client {client_id} in manifest")
    return [_read_entry(root, e, manifest) for e in manifest["shots"][key]]


def load_all_shots(data_dir) -> dict[int, list[GestureSample]]:
    manifest, root = _load_manifest(data_dir)
    return {int(k): [_read_entry(root, e, manifest) for e in entries]
            for k, entries in manifest["shots"].items()}


def load_test(data_dir) -> list[GestureSample]:
    manifest, root = _load_manifest(data_dir)
    return [_read_entry(root, e, manifest) for e in manifest["test"]]


def evaluate_network(network: Network, samples, dt_us: int) -> float:
    """Accuracy of a full network on raw event samples."""
    if not samples:
        raise ValueError("empty test set")
    correct = 0
    for sample in samples:
        counter = network.forward_window(bin_events(sample, dt_us))
        correct += classify(counter) == sample.label
    return correct / len(samples)
