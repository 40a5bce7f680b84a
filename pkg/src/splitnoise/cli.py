"""Command-line workflow: partition, learn noise, serve, infer, evaluate.

Subcommands
-----------
partition     cost table over the valid cuts and the chosen split point
train-noise   learn noise distributions and persist the collection
infer         local split inference, clean vs. noisy accuracy
serve         run the cloud partition behind a TCP socket
remote-infer  drive a remote cloud partition from the edge side
eval-mi       mutual-information privacy report as CSV
sweep-cuts    per-cut edge cost and privacy at a fixed accuracy budget

Every subcommand takes ``--config`` (a key/value file mirroring the
flags; command-line flags override file values), ``--seed``, and
``--out-dir``.  Exit codes: 0 success, 1 runtime failure, 2 usage or
configuration error.  All file outputs are byte-identical across reruns
with the same inputs and seed.
"""

from __future__ import annotations

import argparse
import csv
import sys
import threading
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .collector import (
    CollectorError,
    DistributionCollection,
    DistributionEntry,
    load_collection,
    save_collection,
)
from .datasets import DatasetError, load_dataset, to_model_input
from .learner import (
    NoiseLearningError,
    PrivateHead,
    TrainConfig,
    precompute_activations,
    train_noise,
)
from .metrics import MetricsError, estimate_mi
from .network import (
    NetworkError,
    NetworkSpec,
    Split,
    SplitError,
    load_network,
    load_weights,
    make_split,
    network_hash,
    parse_network_spec,
    run_cloud,
    run_edge,
    valid_cuts,
)
from .planner import ProfileError, build_cost_table, choose_cut, load_profile
from .runtime import (
    CloudServer,
    EdgeClient,
    FrameError,
    LinkSimulator,
    RemoteError,
)
from .sampler import SamplerError, add_noise, make_rng, sample_noise
from .tensor import Tensor, TensorError


class UsageError(Exception):
    """Bad invocation or configuration; maps to exit code 2."""


_RUNTIME_ERRORS = (
    NetworkError,
    DatasetError,
    CollectorError,
    SamplerError,
    NoiseLearningError,
    MetricsError,
    ProfileError,
    FrameError,
    RemoteError,
    TensorError,
    ConnectionError,
    OSError,
)

_PATH_FIELDS = ("spec", "weights", "dataset", "collection", "profile", "private_head")


@dataclass(frozen=True)
class ExperimentConfig:
    """One resolved invocation: every referenced input path is checked
    here, so missing files surface as usage errors before any work."""

    out_dir: Path
    seed: int
    spec: Path | None = None
    weights: Path | None = None
    dataset: Path | None = None
    collection: Path | None = None
    profile: Path | None = None
    private_head: Path | None = None
    train: TrainConfig | None = None
    sweep: tuple[float, ...] = ()

    def __post_init__(self):
        for name in _PATH_FIELDS:
            p = getattr(self, name)
            if p is not None and not p.exists():
                raise UsageError(f"--{name.replace('_', '-')} path does not exist: {p}")


# ---------------------------------------------------------------------------
# config file handling
# ---------------------------------------------------------------------------


def config_to_argv(path: Path) -> list[str]:
    """Translate a ``key value`` config file into CLI arguments.

    Keys are flag names without the leading dashes (``_`` and ``-`` are
    interchangeable); the rest of the line is the value.  Boolean flags
    take ``true``/``false`` — ``false`` keeps the default.  Blank lines
    and ``#`` comments are skipped.
    """
    out: list[str] = []
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(None, 1)
        key = parts[0].lstrip("-").replace("_", "-")
        if not key:
            raise UsageError(f"{path}:{lineno}: missing key")
        if key == "config":
            raise UsageError(f"{path}:{lineno}: config files cannot nest 'config'")
        value = parts[1].strip() if len(parts) == 2 else ""
        if value.lower() == "true" or value == "":
            out.append(f"--{key}")
        elif value.lower() == "false":
            continue
        else:
            out.extend([f"--{key}", value])
    return out


def _splice_config(argv: list[str]) -> list[str]:
    """Insert config-file arguments right after the subcommand, so that
    flags typed on the command line (parsed later) win."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config is None:
        return argv
    cfg_path = Path(known.config)
    if not cfg_path.exists():
        raise UsageError(f"--config path does not exist: {cfg_path}")
    if not argv or argv[0].startswith("-"):
        return argv
    return [argv[0]] + config_to_argv(cfg_path) + argv[1:]


# ---------------------------------------------------------------------------
# small shared helpers
# ---------------------------------------------------------------------------


def _fmt(v: float) -> str:
    return f"{v:.6f}"


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _parse_float_list(text: str, flag: str) -> tuple[float, ...]:
    values = []
    for piece in text.split(","):
        piece = piece.strip()
        if not piece:
            raise UsageError(f"{flag} has an empty element in {text!r}")
        try:
            values.append(float(piece))
        except ValueError:
            raise UsageError(f"{flag} expects comma-separated numbers, got {piece!r}")
    if not values:
        raise UsageError(f"{flag} sweep range is empty")
    return tuple(values)


def _parse_int_list(text: str, flag: str) -> tuple[int, ...]:
    try:
        return tuple(int(p.strip()) for p in text.split(",") if p.strip() != "")
    except ValueError:
        raise UsageError(f"{flag} expects comma-separated integers, got {text!r}")


def _parse_address(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not host:
        raise UsageError(f"--address must be HOST:PORT, got {text!r}")
    try:
        return host, int(port)
    except ValueError:
        raise UsageError(f"--address port must be an integer, got {port!r}")


def _path_or_none(value) -> Path | None:
    return None if value is None else Path(value)


def _experiment(args, **need) -> ExperimentConfig:
    """Build the resolved config; ``need`` marks required path flags."""
    paths = {}
    for name in _PATH_FIELDS:
        value = _path_or_none(getattr(args, name, None))
        if need.get(name) and value is None:
            raise UsageError(f"--{name.replace('_', '-')} is required")
        paths[name] = value
    return ExperimentConfig(
        out_dir=Path(args.out_dir),
        seed=args.seed,
        train=_train_config(args) if hasattr(args, "alpha") else None,
        sweep=getattr(args, "_sweep", ()),
        **paths,
    )


def _train_config(args) -> TrainConfig:
    private = bool(getattr(args, "private_labels", False))
    gamma = args.gamma if args.gamma is not None else (0.5 if private else 0.0)
    try:
        return TrainConfig(
            alpha=args.alpha,
            gamma=gamma,
            learning_rate=args.learning_rate,
            alpha_decay=args.alpha_decay,
            alpha_period=args.alpha_period,
            batch_size=args.batch_size,
            init_scale=args.init_scale,
            epsilon=args.epsilon,
            holdout_fraction=args.holdout_fraction,
            seed=args.seed,
            target_entries=args.target_entries,
            eval_every=args.eval_every,
            max_round_iters=args.max_round_iters,
            round_retries=args.round_retries,
            sse_threshold=args.sse_threshold,
            sse_bins=args.sse_bins,
        )
    except NoiseLearningError as exc:
        raise UsageError(str(exc))


def _load_spec(cfg: ExperimentConfig) -> NetworkSpec:
    return parse_network_spec(cfg.spec.read_text(encoding="utf-8"))


def _resolve_split(net: NetworkSpec, args, cfg: ExperimentConfig) -> Split:
    if getattr(args, "cut", None) is not None:
        try:
            return make_split(net, args.cut)
        except SplitError as exc:
            raise UsageError(str(exc))
    if cfg.profile is None:
        raise UsageError("need --cut or --profile to place the split")
    return make_split(net, choose_cut(build_cost_table(net, load_profile(cfg.profile))).cut)


def _noise_dataset(split, weights, dataset_dir: Path, offset: int, count: int,
                   with_styles: bool):
    train, _ = load_dataset(dataset_dir)
    end = offset + count
    if count < 1 or offset < 0 or end > len(train):
        raise UsageError(
            f"--data-offset/--data-count select rows {offset}:{end} outside "
            f"the {len(train)}-row train split"
        )
    styles = train.styles[offset:end].astype(np.int64) if with_styles else None
    return precompute_activations(
        split, weights,
        to_model_input(train.images[offset:end]),
        train.labels[offset:end].astype(np.int64),
        styles,
    )


def _load_head(cfg: ExperimentConfig, split: Split) -> PrivateHead | None:
    if cfg.private_head is None:
        return None
    return PrivateHead.from_weights(load_weights(cfg.private_head), split.activation_shape)


# ---------------------------------------------------------------------------
# collection training (sequential and parallel)
# ---------------------------------------------------------------------------

_CSV_TRAIN_HEADER = ["round", "iteration", "seed", "holdout_accuracy", "sse",
                     "mu", "b", "outcome", "detail"]


def _candidate_record(cand) -> list:
    if isinstance(cand.outcome, DistributionEntry):
        e = cand.outcome
        return [cand.round_index, cand.iteration, e.seed, _fmt(cand.accuracy),
                _fmt(e.sse), _fmt(e.params.mu), _fmt(e.params.b), "accepted", ""]
    r = cand.outcome
    return [cand.round_index, cand.iteration, cand.seed,
            _fmt(cand.accuracy), _fmt(r.sse), "", "", "rejected", r.reason]


_WORKER: dict = {}


def _worker_init(spec_path, weights_path, dataset_dir, offset, count,
                 cut, head_path, cfg):
    net, weights = load_network(spec_path, weights_path)
    split = make_split(net, cut)
    with_styles = head_path is not None and cfg.gamma > 0.0
    dataset = _noise_dataset(split, weights, Path(dataset_dir), offset, count, with_styles)
    head = None
    if head_path is not None:
        head = PrivateHead.from_weights(load_weights(head_path), split.activation_shape)
    _WORKER.update(net=net, weights=weights, split=split, dataset=dataset,
                   cfg=cfg, head=head)


def _worker_round(k: int):
    w = _WORKER
    coll = DistributionCollection(
        network_hash(w["net"], w["weights"]), w["split"].cut_index,
        w["split"].activation_shape,
    )
    cfg = replace(w["cfg"], target_entries=1)
    records = [
        _candidate_record(cand)
        for cand in train_noise(w["split"], w["weights"], w["dataset"], cfg,
                                coll, w["head"], start_round=k)
    ]
    return k, records, coll.entries[0]


def _collect_distributions(net, weights, split, dataset, cfg: TrainConfig,
                           head, jobs: int, *, worker_args=None):
    """Train until the collection is full; returns (collection, records).

    ``jobs > 1`` runs independent rounds in a process pool and merges
    them by round index, which reproduces the sequential output exactly.
    """
    collection = DistributionCollection(
        network_hash(net, weights), split.cut_index, split.activation_shape
    )
    records: list[list] = []
    if jobs <= 1:
        for cand in train_noise(split, weights, dataset, cfg, collection, head):
            records.append(_candidate_record(cand))
        return collection, records

    with ProcessPoolExecutor(max_workers=min(jobs, cfg.target_entries),
                             initializer=_worker_init,
                             initargs=worker_args) as pool:
        results = list(pool.map(_worker_round, range(cfg.target_entries)))
    for _, per_round, entry in sorted(results, key=lambda item: item[0]):
        records.extend(per_round)
        collection.append(entry)
    return collection, records


# ---------------------------------------------------------------------------
# privacy evaluation (pooled-coordinate mutual information)
# ---------------------------------------------------------------------------


def _pool_images(xin: np.ndarray) -> np.ndarray:
    """(N, 1, 28, 28) model input -> (N, 16) means over 7x7 blocks.

    k-NN mutual-information estimates collapse toward zero at the raw
    dimensionality of images and activations (neighbour distances
    concentrate), so privacy is scored on coarse spatial summaries that
    keep the estimator in its working regime.
    """
    n = xin.shape[0]
    return xin.reshape(n, 4, 7, 4, 7).mean(axis=(2, 4)).reshape(n, 16).astype(np.float64)


def _pool_activations(acts: np.ndarray, groups: int = 16) -> np.ndarray:
    """(N, ...) activations -> (N, <=groups) means over contiguous slices
    of the flattened feature axis (channel means, for conv outputs)."""
    flat = acts.reshape(acts.shape[0], -1).astype(np.float64)
    k = min(groups, flat.shape[1])
    return np.stack([p.mean(axis=1) for p in np.array_split(flat, k, axis=1)], axis=1)


@dataclass(frozen=True)
class PrivacyRow:
    point: str
    clean_mi_bits: float
    noisy_mi_bits: float
    mi_reduction_pct: float
    accuracy: float
    accuracy_loss: float

    def as_csv(self) -> list:
        return [self.point, _fmt(self.clean_mi_bits), _fmt(self.noisy_mi_bits),
                _fmt(self.mi_reduction_pct), _fmt(self.accuracy),
                _fmt(self.accuracy_loss)]


_CSV_EVAL_HEADER = ["point", "clean_mi_bits", "noisy_mi_bits",
                    "mi_reduction_pct", "accuracy", "accuracy_loss"]


class _EvalContext:
    """Clean-side quantities shared by every evaluation row."""

    def __init__(self, split, weights, images, labels, samples: int, k: int):
        if samples < 1 or samples > len(images):
            raise UsageError(
                f"--samples must be in [1, {len(images)}], got {samples}"
            )
        self.split = split
        self.weights = weights
        self.k = k
        self.labels = np.asarray(labels[:samples], dtype=np.int64)
        xin = to_model_input(images[:samples])
        self.acts = np.stack(
            [run_edge(split, weights, Tensor(x)).array for x in xin]
        )
        self.pooled_x = _pool_images(xin)
        self.clean_mi = estimate_mi(self.pooled_x, _pool_activations(self.acts), k=k)
        self.clean_acc = self._accuracy(self.acts)

    def _accuracy(self, acts: np.ndarray) -> float:
        hits = sum(
            int(np.argmax(run_cloud(self.split, self.weights, Tensor(a)).array)) == y
            for a, y in zip(acts, self.labels)
        )
        return hits / len(self.labels)

    def row(self, point: str, collection: DistributionCollection | None,
            rng) -> PrivacyRow:
        if collection is None:  # zero noise: transmitted data is the activation
            noisy = self.acts
        else:
            noisy = np.stack([
                add_noise(Tensor(a), sample_noise(collection, rng)).array
                for a in self.acts
            ])
        noisy_mi = estimate_mi(self.pooled_x, _pool_activations(noisy), k=self.k)
        clean = self.clean_mi.bits
        reduction = 0.0 if clean <= 0.0 else 100.0 * (1.0 - noisy_mi.bits / clean)
        acc = self._accuracy(noisy)
        return PrivacyRow(
            point=point,
            clean_mi_bits=clean,
            noisy_mi_bits=noisy_mi.bits,
            mi_reduction_pct=reduction,
            accuracy=acc,
            accuracy_loss=self.clean_acc - acc,
        )


def _print_privacy_row(row: PrivacyRow) -> None:
    print(
        f"{row.point}: clean {row.clean_mi_bits:.3f} bits -> noisy "
        f"{row.noisy_mi_bits:.3f} bits ({row.mi_reduction_pct:.2f}% reduction), "
        f"accuracy {row.accuracy:.4f} (loss {row.accuracy_loss:+.4f})"
    )


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_partition(args) -> int:
    cfg = _experiment(args, spec=True)
    net = _load_spec(cfg)
    if cfg.profile is None and args.cut is None:
        raise UsageError("need --profile (planner) or --cut (override)")
    if cfg.profile is not None:
        table = build_cost_table(net, load_profile(cfg.profile))
        print("cut   edge_ms  transmit_bytes  transmit_ms  cloud_ms  total_ms")
        for row in table:
            print(f"{row.cut:>3}  {row.edge_ms:>8.3f}  {row.transmit_bytes:>14d}  "
                  f"{row.transmit_ms:>11.3f}  {row.cloud_ms:>8.3f}  {row.total_ms:>8.3f}")
    if args.cut is not None:
        try:
            split = make_split(net, args.cut)
        except SplitError as exc:
            raise UsageError(str(exc))
        print(f"chosen cut: {split.cut_index} (forced)")
    else:
        print(f"chosen cut: {choose_cut(table).cut}")
    return 0


def cmd_train_noise(args) -> int:
    cfg = _experiment(args, spec=True, weights=True, dataset=True,
                      private_head=bool(args.private_labels))
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    net, weights = load_network(cfg.spec, cfg.weights)
    split = _resolve_split(net, args, cfg)
    head = _load_head(cfg, split) if args.private_labels else None
    dataset = _noise_dataset(split, weights, cfg.dataset, args.data_offset,
                             args.data_count, with_styles=args.private_labels)
    worker_args = (cfg.spec, cfg.weights, cfg.dataset, args.data_offset,
                   args.data_count, split.cut_index,
                   cfg.private_head if args.private_labels else None, cfg.train)
    collection, records = _collect_distributions(
        net, weights, split, dataset, cfg.train, head, args.jobs,
        worker_args=worker_args,
    )

    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    out_path = Path(args.out) if args.out else cfg.out_dir / "collection.shrc"
    csv_path = Path(args.metrics_csv) if args.metrics_csv else cfg.out_dir / "train_metrics.csv"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_collection(out_path, collection)
    _write_csv(csv_path, _CSV_TRAIN_HEADER, records)

    for rec in records:
        if rec[7] == "accepted":
            print(f"round {rec[0]}: accepted at iteration {rec[1]} "
                  f"(accuracy {rec[3]}, b {rec[6]})")
    print(f"collected {len(collection.entries)} distributions at cut {split.cut_index}")
    print(f"wrote {out_path}")
    print(f"wrote {csv_path}")
    return 0


def cmd_infer(args) -> int:
    cfg = _experiment(args, spec=True, weights=True, dataset=True,
                      collection=not args.zero_noise)
    net, weights = load_network(cfg.spec, cfg.weights)
    split = _resolve_split(net, args, cfg)
    _, test = load_dataset(cfg.dataset)
    count = args.count
    if count < 1 or count > len(test):
        raise UsageError(f"--count must be in [1, {len(test)}], got {count}")
    xin = to_model_input(test.images[:count])
    labels = test.labels[:count].astype(np.int64)
    acts = np.stack([run_edge(split, weights, Tensor(x)).array for x in xin])

    def accuracy(rows: np.ndarray) -> float:
        hits = sum(
            int(np.argmax(run_cloud(split, weights, Tensor(a)).array)) == y
            for a, y in zip(rows, labels)
        )
        return hits / count

    clean_acc = accuracy(acts)
    print(f"split cut {split.cut_index} over {count} test rows")
    print(f"clean accuracy {clean_acc:.4f}")
    if args.zero_noise:
        return 0

    collection = load_collection(
        cfg.collection, expect_hash=network_hash(net, weights),
        expect_cut=split.cut_index, expect_shape=split.activation_shape,
    )
    if args.entry is not None and not 0 <= args.entry < len(collection.entries):
        raise UsageError(
            f"--entry must be in [0, {len(collection.entries) - 1}], got {args.entry}"
        )
    rng = make_rng(cfg.seed)
    noisy = np.stack([
        add_noise(Tensor(a), sample_noise(collection, rng, args.entry)).array
        for a in acts
    ])
    noisy_acc = accuracy(noisy)
    print(f"noisy accuracy {noisy_acc:.4f} (loss {clean_acc - noisy_acc:+.4f})")
    return 0


def cmd_serve(args) -> int:
    cfg = _experiment(args, spec=True, weights=True)
    net, weights = load_network(cfg.spec, cfg.weights)
    split = _resolve_split(net, args, cfg)
    server = CloudServer(split, weights, host=args.host, port=args.port)
    server.start()
    host, port = server.address
    print(f"listening on {host}:{port} (cut {split.cut_index})", flush=True)
    try:
        threading.Event().wait()
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return 0


def cmd_remote_infer(args) -> int:
    cfg = _experiment(args, spec=True, weights=True, dataset=True,
                      collection=not args.zero_noise)
    net, weights = load_network(cfg.spec, cfg.weights)
    split = _resolve_split(net, args, cfg)
    address = _parse_address(args.address)
    _, test = load_dataset(cfg.dataset)
    count = args.count
    if count < 1 or count > len(test):
        raise UsageError(f"--count must be in [1, {len(test)}], got {count}")
    xin = to_model_input(test.images[:count])
    labels = test.labels[:count].astype(np.int64)

    collection = None
    if not args.zero_noise:
        collection = load_collection(
            cfg.collection, expect_hash=network_hash(net, weights),
            expect_cut=split.cut_index, expect_shape=split.activation_shape,
        )
    link = None
    if args.link_profile is not None:
        link_path = Path(args.link_profile)
        if not link_path.exists():
            raise UsageError(f"--link-profile path does not exist: {link_path}")
        profile = load_profile(link_path)
        link = LinkSimulator(profile.bandwidth_bytes_per_s, profile.latency_ms)

    hits = 0
    timings = []
    with EdgeClient(split, weights, collection, address=address, link=link,
                    rng=make_rng(cfg.seed), zero_noise=args.zero_noise) as client:
        for i in range(count):
            result = client.infer(Tensor(xin[i]))
            hits += int(result.label == labels[i])
            timings.append(result.timing)
    print(f"remote accuracy {hits / count:.4f} over {count} rows (cut {split.cut_index})")
    print(
        "mean timing: edge {:.2f} ms | sample {:.2f} ms | transmit {:.2f} ms "
        "| roundtrip {:.2f} ms".format(
            float(np.mean([t.edge_ms for t in timings])),
            float(np.mean([t.sample_ms for t in timings])),
            float(np.mean([t.transmit_ms for t in timings])),
            float(np.mean([t.roundtrip_ms for t in timings])),
        )
    )
    return 0


def cmd_eval_mi(args) -> int:
    sweep_eps = _parse_float_list(args.sweep_epsilon, "--sweep-epsilon") \
        if args.sweep_epsilon else ()
    sweep_alpha = _parse_float_list(args.sweep_alpha, "--sweep-alpha") \
        if args.sweep_alpha else ()
    if sweep_eps and sweep_alpha:
        raise UsageError("--sweep-epsilon and --sweep-alpha are mutually exclusive")
    modes = bool(sweep_eps or sweep_alpha) + (args.collection is not None) + args.zero_noise
    if modes != 1:
        raise UsageError(
            "choose exactly one of --collection, --sweep-epsilon/--sweep-alpha, "
            "or --zero-noise"
        )
    args._sweep = sweep_eps or sweep_alpha
    cfg = _experiment(args, spec=True, weights=True, dataset=True)
    net, weights = load_network(cfg.spec, cfg.weights)
    split = _resolve_split(net, args, cfg)
    _, test = load_dataset(cfg.dataset)
    ctx = _EvalContext(split, weights, test.images, test.labels,
                       args.samples, args.mi_neighbors)

    rows: list[PrivacyRow] = []
    if args.zero_noise:
        rows.append(ctx.row("zero-noise", None, make_rng(cfg.seed)))
    elif args.collection is not None:
        collection = load_collection(
            cfg.collection, expect_hash=network_hash(net, weights),
            expect_cut=split.cut_index, expect_shape=split.activation_shape,
        )
        rows.append(ctx.row("collection", collection, make_rng(cfg.seed)))
    else:
        dataset = _noise_dataset(split, weights, cfg.dataset, args.data_offset,
                                 args.data_count, with_styles=False)
        for i, value in enumerate(cfg.sweep):
            if sweep_eps:
                point, train_cfg = f"eps={value:g}", replace(cfg.train, epsilon=value)
            else:
                point, train_cfg = f"alpha={value:g}", replace(cfg.train, alpha=value)
            collection, _ = _collect_distributions(
                net, weights, split, dataset, train_cfg, None, jobs=1
            )
            # common random numbers: every sweep point draws noise from the same
            # stream, so row-to-row differences reflect the collections alone
            rows.append(ctx.row(point, collection, make_rng(cfg.seed)))

    for row in rows:
        _print_privacy_row(row)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    out_path = Path(args.out) if args.out else cfg.out_dir / "eval_mi.csv"
    _write_csv(out_path, _CSV_EVAL_HEADER, [r.as_csv() for r in rows])
    print(f"wrote {out_path}")
    return 0


def cmd_sweep_cuts(args) -> int:
    cfg = _experiment(args, spec=True, weights=True, dataset=True, profile=True)
    net, weights = load_network(cfg.spec, cfg.weights)
    cuts = sorted(set(_parse_int_list(args.cuts, "--cuts"))) if args.cuts \
        else valid_cuts(net)
    if not cuts:
        raise UsageError("--cuts selects no cut indices")
    allowed = valid_cuts(net)
    for cut in cuts:
        if cut not in allowed:
            raise UsageError(f"cut {cut} invalid (valid cuts: {allowed})")
    table = {row.cut: row for row in build_cost_table(net, load_profile(cfg.profile))}
    _, test = load_dataset(cfg.dataset)

    out_rows = []
    for cut in cuts:
        split = make_split(net, cut)
        dataset = _noise_dataset(split, weights, cfg.dataset, args.data_offset,
                                 args.data_count, with_styles=False)
        collection, _ = _collect_distributions(
            net, weights, split, dataset, cfg.train, None, jobs=1
        )
        ctx = _EvalContext(split, weights, test.images, test.labels,
                           args.samples, args.mi_neighbors)
        row = ctx.row(f"cut={cut}", collection, make_rng(cfg.seed))
        print(f"cut {cut}: edge {table[cut].edge_ms:.3f} ms, "
              f"reduction {row.mi_reduction_pct:.2f}%, accuracy {row.accuracy:.4f}")
        out_rows.append([cut, _fmt(table[cut].edge_ms), _fmt(row.mi_reduction_pct)])

    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    out_path = Path(args.out) if args.out else cfg.out_dir / "sweep_cuts.csv"
    _write_csv(out_path, ["cut", "edge_ms", "mi_reduction_pct"], out_rows)
    print(f"wrote {out_path}")
    return 0


# ---------------------------------------------------------------------------
# parser assembly
# ---------------------------------------------------------------------------


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key/value file mirroring the flags")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out-dir", default=".")


def _add_model_args(parser, *, weights=True, dataset=False) -> None:
    parser.add_argument("--spec", required=False, help="network architecture file")
    if weights:
        parser.add_argument("--weights", help="trained weights (.shrw)")
    if dataset:
        parser.add_argument("--dataset", help="dataset directory")
    parser.add_argument("--cut", type=int, help="split after this layer index")
    parser.add_argument("--profile", help="device/link profile for the planner")


def _add_train_args(parser) -> None:
    d = TrainConfig()
    parser.add_argument("--alpha", type=float, default=d.alpha)
    parser.add_argument("--gamma", type=float, default=None,
                        help="private-head weight (default 0, or 0.5 with --private-labels)")
    parser.add_argument("--learning-rate", type=float, default=d.learning_rate)
    parser.add_argument("--alpha-decay", type=float, default=d.alpha_decay)
    parser.add_argument("--alpha-period", type=int, default=d.alpha_period)
    parser.add_argument("--batch-size", type=int, default=d.batch_size)
    parser.add_argument("--init-scale", type=float, default=d.init_scale)
    parser.add_argument("--epsilon", type=float, default=d.epsilon)
    parser.add_argument("--holdout-fraction", type=float, default=d.holdout_fraction)
    parser.add_argument("--target-entries", type=int, default=d.target_entries)
    parser.add_argument("--eval-every", type=int, default=d.eval_every)
    parser.add_argument("--max-round-iters", type=int, default=d.max_round_iters)
    parser.add_argument("--round-retries", type=int, default=d.round_retries,
                        help="fresh starting draws per round before giving up")
    parser.add_argument("--sse-threshold", type=float, default=d.sse_threshold)
    parser.add_argument("--sse-bins", type=int, default=d.sse_bins)
    parser.add_argument("--data-offset", type=int, default=0,
                        help="first train-split row used for noise learning")
    parser.add_argument("--data-count", type=int, default=3000,
                        help="number of train-split rows used for noise learning")


def _add_eval_args(parser) -> None:
    parser.add_argument("--samples", type=int, default=1000,
                        help="test rows used for the estimate")
    parser.add_argument("--mi-neighbors", type=int, default=3)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="splitnoise",
        description="split inference with learned additive noise",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("partition", help="cost table and chosen cut")
    _add_common(p)
    _add_model_args(p, weights=False)
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("train-noise", help="learn and persist noise distributions")
    _add_common(p)
    _add_model_args(p, dataset=True)
    _add_train_args(p)
    p.add_argument("--out", help="collection output path (default OUT_DIR/collection.shrc)")
    p.add_argument("--metrics-csv", help="per-candidate log (default OUT_DIR/train_metrics.csv)")
    p.add_argument("--private-labels", action="store_true",
                   help="also suppress the private attribute during learning")
    p.add_argument("--private-head", help="private-head weights (.shrw)")
    p.add_argument("--jobs", type=int, default=1,
                   help="parallel collection rounds (merged by round index)")
    p.set_defaults(func=cmd_train_noise)

    p = sub.add_parser("infer", help="local split inference accuracy")
    _add_common(p)
    _add_model_args(p, dataset=True)
    p.add_argument("--collection", help="learned distribution collection (.shrc)")
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--entry", type=int, default=None,
                   help="pin one collection entry instead of sampling uniformly")
    p.add_argument("--zero-noise", action="store_true")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("serve", help="run the cloud partition on a socket")
    _add_common(p)
    _add_model_args(p)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=0)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("remote-infer", help="edge-side inference against a server")
    _add_common(p)
    _add_model_args(p, dataset=True)
    p.add_argument("--collection")
    p.add_argument("--address", required=True, help="HOST:PORT of the cloud server")
    p.add_argument("--count", type=int, default=50)
    p.add_argument("--zero-noise", action="store_true")
    p.add_argument("--link-profile", help="profile whose link the client simulates")
    p.set_defaults(func=cmd_remote_infer)

    p = sub.add_parser("eval-mi", help="mutual-information privacy report")
    _add_common(p)
    _add_model_args(p, dataset=True)
    _add_train_args(p)
    _add_eval_args(p)
    p.add_argument("--collection", help="evaluate one stored collection")
    p.add_argument("--sweep-epsilon", help="comma list: train and evaluate per value")
    p.add_argument("--sweep-alpha", help="comma list: train and evaluate per value")
    p.add_argument("--zero-noise", action="store_true",
                   help="reference row with the unperturbed activation")
    p.add_argument("--out", help="CSV path (default OUT_DIR/eval_mi.csv)")
    p.set_defaults(func=cmd_eval_mi)

    p = sub.add_parser("sweep-cuts", help="edge cost and privacy per cut")
    _add_common(p)
    _add_model_args(p, dataset=True)
    _add_train_args(p)
    _add_eval_args(p)
    p.add_argument("--cuts", help="comma list of cut indices (default: all valid)")
    p.add_argument("--out", help="CSV path (default OUT_DIR/sweep_cuts.csv)")
    p.set_defaults(func=cmd_sweep_cuts)

    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        argv = _splice_config(argv)
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except _RUNTIME_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
