"""Experiment driver: seed sweeps, artifact emission, run comparison.

Every run writes whole files atomically (temp + rename) so a rerun with the
same config produces byte-identical artifacts and never leaves partial
output behind.
"""

from __future__ import annotations

import json
import os
import re
import struct
import tempfile
from dataclasses import dataclass, replace
from typing import Callable, Mapping

import numpy as np

from . import figures
from .config import FlatFileData, RunConfig, config_text
from .data import ClientData, DomainSpec, generate_synthetic, load_flatfile
from .errors import ConfigError, DualFedError
from .metrics import dump_representations
from .model import serialize_params
from .protocol import FederationResult, deployed_params, run_federation
from .tensor import Tensor

MEAN_STD_PATTERN = re.compile(r"^\d+\.\d{2}±\d+\.\d{2}$")


def _atomic_write_bytes(path: str, payload: bytes) -> None:
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _atomic_write_text(path: str, text: str) -> None:
    _atomic_write_bytes(path, text.encode("utf-8"))


def _atomic_render(path: str, render: Callable[[str], None]) -> None:
    """Render through a callback that writes to a temp path, then rename."""
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-",
                               suffix=os.path.splitext(path)[1])
    os.close(fd)
    try:
        render(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def format_mean_std(mean: float, std: float) -> str:
    """Accuracy in percent as `95.01±0.31`."""
    return f"{100.0 * mean:.2f}±{100.0 * std:.2f}"


def _mean_std(values: list[float]) -> tuple[float, float]:
    mean = float(np.mean(values))
    std = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
    return mean, std


def resolve_datasets(cfg: RunConfig) -> list[ClientData]:
    if isinstance(cfg.data, FlatFileData):
        clients = []
        for i, (train_path, test_path) in enumerate(
                zip(cfg.data.train_files, cfg.data.test_files)):
            train = load_flatfile(train_path, num_classes=cfg.arch.num_classes)
            test = load_flatfile(test_path, num_classes=cfg.arch.num_classes)
            if train.input_dim != cfg.arch.input_dim:
                raise ConfigError(
                    f"data.train_files: {train_path} has {train.input_dim} "
                    f"features, arch.input_dim is {cfg.arch.input_dim}")
            identity = DomainSpec(domain_id=i,
                                  transform=np.eye(cfg.arch.input_dim),
                                  bias=np.zeros(cfg.arch.input_dim),
                                  noise_sigma=0.0)
            clients.append(ClientData(domain=identity, train=train, test=test))
        return clients
    return generate_synthetic(cfg.data)


def _snapshot_blob(snapshot: Mapping[str, np.ndarray]) -> bytes:
    out = [b"DFSS1\n", struct.pack("<I", len(snapshot))]
    for name in sorted(snapshot):
        arr = snapshot[name]
        name_bytes = name.encode("utf-8")
        out.append(struct.pack("<H", len(name_bytes)))
        out.append(name_bytes)
        out.append(struct.pack("<II", arr.shape[0], arr.shape[1]))
        out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(out)


def load_snapshot_blob(blob: bytes) -> dict[str, np.ndarray]:
    if not blob.startswith(b"DFSS1\n"):
        raise DualFedError("not a server snapshot blob")
    off = 6
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    result = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        rows, cols = struct.unpack_from("<II", blob, off)
        off += 8
        n = rows * cols * 8
        result[name] = np.frombuffer(blob[off:off + n], dtype="<f8").reshape(rows, cols).copy()
        off += n
    return result


@dataclass
class SeedArtifacts:
    seed: int
    metrics_csv: str
    ledger_csv: str
    result: FederationResult


@dataclass
class ExperimentArtifacts:
    output_dir: str
    summary_path: str
    per_seed: list[SeedArtifacts]
    summary: dict


def run_experiment(cfg: RunConfig,
                   config_values: Mapping[str, str] | None = None) -> ExperimentArtifacts:
    """One run per seed; emits metrics, ledger, summary, and figures."""
    outdir = cfg.output_dir
    os.makedirs(outdir, exist_ok=True)
    _atomic_write_text(os.path.join(outdir, "config_resolved.txt"),
                       config_text(config_values))
    clients_data = resolve_datasets(cfg)

    per_seed: list[SeedArtifacts] = []
    headline, final_global, final_personal, final_ensemble, comm_totals = \
        [], [], [], [], []
    for seed in cfg.seeds:
        checkpoint_fn = None
        if cfg.checkpoint_every > 0:
            ckpt_dir = os.path.join(outdir, "checkpoints")
            os.makedirs(ckpt_dir, exist_ok=True)

            def checkpoint_fn(t, server, clients, _seed=seed, _dir=ckpt_dir):
                if t % cfg.checkpoint_every != 0:
                    return
                _atomic_write_bytes(
                    os.path.join(_dir, f"seed{_seed}_round{t}_server.bin"),
                    _snapshot_blob(server.global_params))
                for client in clients:
                    _atomic_write_bytes(
                        os.path.join(
                            _dir,
                            f"seed{_seed}_round{t}_client{client.client_id}.bin"),
                        serialize_params(client.params))

        result = run_federation(cfg.arch, clients_data, cfg.train, cfg.loss,
                                cfg.method, seed=seed,
                                eval_every=cfg.eval_every,
                                checkpoint_fn=checkpoint_fn)
        metrics_path = os.path.join(outdir, f"metrics_seed{seed}.csv")
        _atomic_render(metrics_path, result.metrics.write_csv)
        ledger_path = os.path.join(outdir, f"ledger_seed{seed}.csv")
        _atomic_render(ledger_path, result.server.ledger.write_csv)
        if cfg.dump_reps:
            for client in result.clients:
                deployed = deployed_params(client, result.server, cfg.method)
                rep_path = os.path.join(
                    outdir, f"reps_seed{seed}_client{client.client_id}.csv")
                _atomic_render(rep_path, lambda p, c=client, m=deployed:
                               dump_representations(
                                   m, Tensor(c.test_set.features),
                                   c.test_set.labels, p))
        if cfg.figures and result.metrics.rows:
            _atomic_render(
                os.path.join(outdir, f"accuracy_seed{seed}.png"),
                lambda p, rows=result.metrics.rows: figures.save_training_curves(rows, p))
            _atomic_render(
                os.path.join(outdir, f"representations_seed{seed}.png"),
                lambda p, rows=result.metrics.rows: figures.save_representation_curves(rows, p))
        per_seed.append(SeedArtifacts(seed=seed, metrics_csv=metrics_path,
                                      ledger_csv=ledger_path, result=result))
        if result.metrics.rows:
            headline.append(result.metrics.best_mean_ensemble())
            last = result.metrics.rows[-1]
            final_global.append(last.mean_acc_global)
            final_personal.append(last.mean_acc_personal)
            final_ensemble.append(last.mean_acc_ensemble)
        comm_totals.append(result.server.ledger.total_bytes())

    summary: dict = {
        "method": cfg.method.display_name,
        "method_key": cfg.method.name,
        "rounds": cfg.train.rounds,
        "seeds": list(cfg.seeds),
        "comm_bytes": {
            "per_seed": comm_totals,
            "mean": float(np.mean(comm_totals)) if comm_totals else 0.0,
        },
    }
    if headline:
        mean, std = _mean_std(headline)
        summary["headline"] = {
            "metric": "best_mean_ensemble_accuracy",
            "per_seed": headline,
            "mean": mean,
            "std": std,
            "formatted": format_mean_std(mean, std),
        }
        summary["final_round"] = {
            "mean_acc_global": final_global,
            "mean_acc_personal": final_personal,
            "mean_acc_ensemble": final_ensemble,
        }
    summary_path = os.path.join(outdir, "summary.json")
    _atomic_write_text(summary_path,
                       json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return ExperimentArtifacts(output_dir=outdir, summary_path=summary_path,
                               per_seed=per_seed, summary=summary)


def compare_runs(summary_paths: list[str],
                 out_dir: str | None = None) -> tuple[str, list[dict]]:
    """Method-by-metric table from run summaries, as text plus rows.

    When out_dir is given, also writes comparison.csv, comparison.txt and a
    bar chart next to them.
    """
    if not summary_paths:
        raise DualFedError("compare needs at least one summary file")
    rows = []
    for path in summary_paths:
        try:
            with open(path) as fh:
                summary = json.load(fh)
        except OSError as exc:
            raise DualFedError(f"cannot read summary {path}: {exc}") from None
        head = summary.get("headline")
        if head is None:
            raise DualFedError(f"{path}: summary has no headline metric")
        rows.append({
            "method": summary["method"],
            "accuracy": head["formatted"],
            "accuracy_mean": head["mean"],
            "accuracy_std": head["std"],
            "comm_mb": summary["comm_bytes"]["mean"] / (1024.0 * 1024.0),
        })

    name_w = max(len("Method"), max(len(r["method"]) for r in rows))
    acc_w = max(len("Accuracy"), max(len(r["accuracy"]) for r in rows))
    lines = [f"{'Method':<{name_w}}  {'Accuracy':>{acc_w}}  {'Comm (MB)':>10}"]
    for r in rows:
        lines.append(f"{r['method']:<{name_w}}  {r['accuracy']:>{acc_w}}  "
                     f"{r['comm_mb']:>10.2f}")
    text = "\n".join(lines) + "\n"

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        csv_lines = ["method,accuracy,accuracy_mean,accuracy_std,comm_mb"]
        for r in rows:
            csv_lines.append(
                f"{r['method']},{r['accuracy']},{r['accuracy_mean']!r},"
                f"{r['accuracy_std']!r},{r['comm_mb']!r}")
        _atomic_write_text(os.path.join(out_dir, "comparison.csv"),
                           "\n".join(csv_lines) + "\n")
        _atomic_write_text(os.path.join(out_dir, "comparison.txt"), text)
        _atomic_render(
            os.path.join(out_dir, "comparison.png"),
            lambda p: figures.save_comparison_chart(
                [r["method"] for r in rows],
                [r["accuracy_mean"] for r in rows],
                [r["accuracy_std"] for r in rows], p))
    return text, rows


def dump_reps_at_round(cfg: RunConfig, round_no: int) -> list[str]:
    """Run the first configured seed to the given round and dump (z, u)."""
    if round_no < 0 or round_no > cfg.train.rounds:
        raise ConfigError(
            f"run.dump_round: must be in [0, {cfg.train.rounds}], got {round_no}")
    clients_data = resolve_datasets(cfg)
    seed = cfg.seeds[0]
    train = replace(cfg.train, rounds=round_no)
    result = run_federation(cfg.arch, clients_data, train, cfg.loss,
                            cfg.method, seed=seed, eval_every=max(1, round_no or 1))
    os.makedirs(cfg.output_dir, exist_ok=True)
    paths = []
    for client in result.clients:
        deployed = deployed_params(client, result.server, cfg.method)
        path = os.path.join(cfg.output_dir,
                            f"reps_seed{seed}_round{round_no}_client{client.client_id}.csv")
        _atomic_render(path, lambda p, c=client, m=deployed: dump_representations(
            m, Tensor(c.test_set.features), c.test_set.labels, p))
        paths.append(path)
    return paths
