"""Round orchestration: local training, clustering, aggregation, fusion.

One round of the full pipeline:

  1. sample the active clients for the round,
  2. each active client trains locally from its broadcast model,
  3. clients upload masked parameters; the server builds the similarity
     matrix and clusters the active set,
  4. clusters are aggregated into cluster models, cluster models into the
     plain global average,
  5. the distillation stage fuses the cluster models into the universal
     model that is broadcast next round.

Variants switch stages off: `fedavg` skips 3 to 5 (direct sample-weighted
averaging), `cfl_only` skips 5 and broadcasts cluster models to their
members only, `disue_minus_iga` skips 5 but keeps the global broadcast,
and the remaining `disue_minus_*` ablations degrade single ingredients of
stage 5.

Randomness is streamed per purpose: every consumer draws from a generator
keyed by (master seed, purpose tag, round, client), so results do not
depend on scheduling or worker count.
"""
from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .aggregation import (
    compute_gls,
    compute_gwf,
    global_average,
    intra_group_aggregate,
    uniform_gls,
    uniform_gwf,
)
from .clustering import ClusterPartition, affinity_propagation, build_similarity_matrix, singleton_partition
from .config import CLUSTERED_VARIANTS, IGA_VARIANTS, SimConfig, validate_config
from .data import (
    ClientDataset,
    LabelHistogram,
    collect_label_histogram,
    dirichlet_partition,
    label_counts,
    make_synthetic_dataset,
    split_client_holdout,
    split_dataset,
)
from .distill import iga_round
from .errors import DivergenceError, InvalidInputError
from .metrics import RoundMetrics
from .nn import Classifier, Generator
from .secure import SecParams, ssc_encrypt

# purpose tags for seed streams; fixed forever, order is part of the contract
_TAG_DATASET = 0
_TAG_TEST_SPLIT = 1
_TAG_PARTITION = 2
_TAG_HOLDOUT = 3
_TAG_MODEL_INIT = 4
_TAG_GEN_INIT = 5
_TAG_ACTIVE = 6
_TAG_LOCAL = 7
_TAG_IGA = 8


def stream(master_seed: int, tag: int, *extra: int) -> np.random.Generator:
    """A deterministic generator for one purpose, independent of all others."""
    return np.random.default_rng([int(master_seed), int(tag), *map(int, extra)])


@dataclass
class ClientShard:
    """One client's fixed local data: a training shard and a held-out shard."""

    client_id: int
    train: ClientDataset
    holdout: ClientDataset


@dataclass
class FederatedData:
    """Immutable per-seed data environment for a simulation."""

    clients: list[ClientShard]
    test_features: np.ndarray
    test_labels: np.ndarray
    num_classes: int
    feature_dim: int


@dataclass
class Event:
    """A warning surfaced by a round stage."""

    round_index: int
    stage: str
    message: str


def build_federated_data(cfg: SimConfig, seed: int) -> FederatedData:
    """Generate, split and federate the synthetic task for one seed."""
    ds = cfg.dataset
    full = make_synthetic_dataset(
        ds.num_classes,
        ds.samples_per_class,
        ds.feature_dim,
        seed=[seed, _TAG_DATASET],
        class_std=ds.class_std,
        radius=ds.radius,
    )
    train_pool, test_pool = split_dataset(full, ds.test_fraction, seed=[seed, _TAG_TEST_SPLIT])
    shards = dirichlet_partition(train_pool, cfg.clients, cfg.epsilon, seed=[seed, _TAG_PARTITION])
    clients = []
    for shard in shards:
        train, holdout = split_client_holdout(shard, ds.holdout_fraction, seed=[seed, _TAG_HOLDOUT, shard.client_id])
        clients.append(ClientShard(shard.client_id, train, holdout))
    return FederatedData(
        clients=clients,
        test_features=test_pool.features,
        test_labels=test_pool.labels,
        num_classes=ds.num_classes,
        feature_dim=ds.feature_dim,
    )


def sample_active_clients(num_clients: int, act: float, round_index: int, master_seed: int) -> np.ndarray:
    """The sorted ids of this round's participants: ceil(act * N) without replacement."""
    if not 0.0 < act <= 1.0:
        raise InvalidInputError("act must be in (0, 1]")
    count = math.ceil(act * num_clients)
    rng = stream(master_seed, _TAG_ACTIVE, round_index)
    return np.sort(rng.choice(num_clients, size=count, replace=False)).astype(np.int64)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    """Index batches for one epoch; full-batch runs skip the shuffle draw."""
    if batch_size >= n:
        yield np.arange(n)
        return
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def local_train(
    data: ClientDataset,
    init_params: np.ndarray,
    template: Classifier,
    epochs: int,
    lr: float,
    batch_size: int,
    weight_decay: float,
    rng: np.random.Generator,
) -> tuple[np.ndarray, float, bool]:
    """Mini-batch SGD from the broadcast parameters on one client's shard.

    Returns (parameters, mean training loss, diverged). A divergent client
    reports its pre-training parameters instead of poisoning the round.
    """
    if data.n < 1:
        raise InvalidInputError("cannot train on an empty shard")
    model = template.spawn(init_params)
    losses: list[float] = []
    try:
        for _ in range(epochs):
            for idx in _batches(data.n, batch_size, rng):
                loss = nn.cross_entropy(model.forward(data.features[idx]), data.labels[idx])
                if not np.isfinite(loss.item()):
                    raise DivergenceError("non-finite training loss")
                losses.append(loss.item())
                nn.backward(loss)
                model.step(lr, weight_decay)
    except DivergenceError:
        return init_params.copy(), float("nan"), True
    return model.param_vector(), float(np.mean(losses)), False


def _evaluate(template: Classifier, params: np.ndarray, features: np.ndarray, labels: np.ndarray) -> float:
    return nn.accuracy(template.spawn(params), features, labels)


class Simulation:
    """One seed's stateful simulation; call run_round() T times or run().

    `data` can be injected to study hand-built federations; by default the
    environment is generated from (cfg, seed).
    """

    def __init__(self, cfg: SimConfig, seed: int, data: FederatedData | None = None):
        validate_config(cfg)
        self.cfg = cfg
        self.seed = int(seed)
        self.data = data if data is not None else build_federated_data(cfg, seed)
        self.template = Classifier(self.data.feature_dim, self.data.num_classes, hidden=(cfg.hidden_dim, cfg.hidden_dim))
        init_model = Classifier(
            self.data.feature_dim,
            self.data.num_classes,
            hidden=(cfg.hidden_dim, cfg.hidden_dim),
            rng=stream(seed, _TAG_MODEL_INIT),
        )
        self.global_params = init_model.param_vector()
        self.generator = self._fresh_generator(stream(seed, _TAG_GEN_INIT))
        self.round_index = 0
        self.events: list[Event] = []
        # cfl_only never broadcasts globally after round 0, so remember what
        # each client last received; everyone starts from the initial model
        self.client_feed: dict[int, np.ndarray] = {}
        if cfg.variant == "cfl_only":
            self.client_feed = {shard.client_id: self.global_params for shard in self.data.clients}
        self.accumulated_counts = np.zeros((cfg.clients, self.data.num_classes), dtype=np.int64)
        self.secure = SecParams(cfg.secure_seed if cfg.secure_seed is not None else seed)

    def _fresh_generator(self, rng: np.random.Generator) -> Generator:
        d = self.cfg.distill
        return Generator(
            noise_dim=d.noise_dim,
            num_classes=self.data.num_classes,
            sample_dim=self.data.feature_dim,
            embed_dim=d.label_embed_dim,
            hidden=(d.gen_hidden_dim, d.gen_hidden_dim),
            rng=rng,
        )

    def _client_init(self, client_id: int) -> np.ndarray:
        if self.cfg.variant == "cfl_only":
            return self.client_feed[client_id]
        return self.global_params

    def _train_actives(self, actives: np.ndarray, round_index: int) -> tuple[dict[int, np.ndarray], float]:
        cfg = self.cfg
        shards = {s.client_id: s for s in self.data.clients}

        def job(cid: int) -> tuple[int, np.ndarray, float, bool]:
            params, loss, diverged = local_train(
                shards[cid].train,
                self._client_init(cid),
                self.template,
                cfg.local_epochs,
                cfg.local_lr,
                cfg.batch_size,
                cfg.weight_decay,
                stream(self.seed, _TAG_LOCAL, round_index, cid),
            )
            return cid, params, loss, diverged

        if cfg.workers > 1:
            with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
                results = list(pool.map(job, actives.tolist()))
        else:
            results = [job(cid) for cid in actives.tolist()]
        params_by_client: dict[int, np.ndarray] = {}
        losses = []
        for cid, params, loss, diverged in sorted(results):
            params_by_client[cid] = params
            if diverged:
                self.events.append(Event(round_index, "local_train", f"client {cid} diverged; kept broadcast parameters"))
            else:
                losses.append(loss)
        mean_loss = float(np.mean(losses)) if losses else float("nan")
        return params_by_client, mean_loss

    def _cluster_actives(self, actives: np.ndarray, params_by_client: dict[int, np.ndarray], round_index: int) -> ClusterPartition:
        if actives.size < 2:
            return singleton_partition([int(c) for c in actives])
        masked = [ssc_encrypt(params_by_client[cid], self.secure, round_index, cid) for cid in actives.tolist()]
        partition = affinity_propagation(build_similarity_matrix(masked))
        if partition.fallback:
            self.events.append(Event(round_index, "clustering", "no exemplar emerged; fell back to a single cluster"))
        if not partition.converged and not partition.fallback:
            self.events.append(Event(round_index, "clustering", f"message passing hit the iteration cap at {partition.n_iterations}"))
        return partition

    def _histogram(self, partition: ClusterPartition, round_index: int) -> LabelHistogram:
        shards = {s.client_id: s.train for s in self.data.clients}
        if not self.cfg.accumulate_histograms:
            return collect_label_histogram(partition, shards, self.data.num_classes)
        # accumulate counts every round a client participates, then read the
        # running totals through the current round's cluster structure
        for members in partition.members:
            for cid in members:
                self.accumulated_counts[cid] += label_counts(shards[cid].labels, self.data.num_classes)
        counts = np.stack([self.accumulated_counts[members].sum(axis=0) for members in partition.members])
        return LabelHistogram(counts)

    def run_round(self) -> RoundMetrics:
        cfg = self.cfg
        r = self.round_index
        started = time.perf_counter()
        backup = (self.global_params.copy(), self.generator.param_vector(), dict(self.client_feed))
        try:
            row = self._round_body(r)
        except Exception as exc:
            self.global_params, gen_params, self.client_feed = backup
            self.generator.load_param_vector(gen_params)
            self.events.append(Event(r, "round", f"round failed and was rolled back: {exc}"))
            if cfg.failure_policy == "halt":
                raise
            row = RoundMetrics(
                round_index=r,
                cluster_count=1,
                global_acc=_evaluate(self.template, self.global_params, self.data.test_features, self.data.test_labels),
            )
        self.round_index += 1
        row.wall_ms = (time.perf_counter() - started) * 1000.0
        return row

    def _round_body(self, r: int) -> RoundMetrics:
        cfg = self.cfg
        actives = sample_active_clients(cfg.clients, cfg.act, r, self.seed)
        params_by_client, mean_local_loss = self._train_actives(actives, r)
        shards = {s.client_id: s for s in self.data.clients}
        weighted = lambda ids: [(params_by_client[cid], shards[cid].train.n) for cid in ids]

        loss_cd = loss_cf = loss_div = float("nan")
        if cfg.variant == "fedavg":
            partition = singleton_partition([int(c) for c in actives])
            cluster_models = [intra_group_aggregate(weighted(partition.members[0]))]
            new_global = cluster_models[0]
        else:
            partition = self._cluster_actives(actives, params_by_client, r)
            cluster_models = [intra_group_aggregate(weighted(members)) for members in partition.members]
            cluster_sizes = [sum(shards[cid].train.n for cid in members) for members in partition.members]
            new_global = global_average(list(zip(cluster_models, cluster_sizes)))
            if cfg.variant in IGA_VARIANTS:
                hist = self._histogram(partition, r)
                gls = uniform_gls(self.data.num_classes) if cfg.variant == "disue_minus_gls" else compute_gls(hist)
                gwf = (
                    uniform_gwf(partition.num_clusters, self.data.num_classes)
                    if cfg.variant == "disue_minus_gwf"
                    else compute_gwf(hist)
                )
                dcfg = cfg.distill
                if cfg.variant == "disue_minus_lcf":
                    dcfg = replace(dcfg, beta_cf=0.0)
                if cfg.variant == "disue_minus_ldiv":
                    dcfg = replace(dcfg, beta_div=0.0)
                if dcfg.reinit_generator:
                    self.generator = self._fresh_generator(stream(self.seed, _TAG_GEN_INIT, r))
                teachers = [self.template.spawn(m) for m in cluster_models]
                student = self.template.spawn(new_global)
                result = iga_round(teachers, student, self.generator, gls, gwf, dcfg, stream(self.seed, _TAG_IGA, r))
                if result.diverged:
                    self.events.append(Event(r, "distill", "fusion diverged; kept the plain global average"))
                else:
                    new_global = result.student.param_vector()
                loss_cd, loss_cf, loss_div = result.mean_losses()

        # broadcast
        if cfg.variant == "cfl_only":
            for k, members in enumerate(partition.members):
                for cid in members:
                    self.client_feed[cid] = cluster_models[k]
        self.global_params = new_global

        global_acc = _evaluate(self.template, new_global, self.data.test_features, self.data.test_labels)
        cluster_accs = []
        for k, members in enumerate(partition.members):
            holdout_x = np.concatenate([shards[cid].holdout.features for cid in members])
            holdout_y = np.concatenate([shards[cid].holdout.labels for cid in members])
            cluster_accs.append(_evaluate(self.template, cluster_models[k], holdout_x, holdout_y))

        return RoundMetrics(
            round_index=r,
            cluster_count=partition.num_clusters,
            global_acc=global_acc,
            cluster_accs=cluster_accs,
            loss_local=mean_local_loss,
            loss_cd=loss_cd,
            loss_cf=loss_cf,
            loss_div=loss_div,
        )

    def run(self) -> list[RoundMetrics]:
        return [self.run_round() for _ in range(self.cfg.rounds)]


@dataclass
class ExperimentResult:
    """All rounds of one variant across its seeds."""

    variant: str
    rows_by_seed: dict[int, list[RoundMetrics]] = field(default_factory=dict)
    events_by_seed: dict[int, list[Event]] = field(default_factory=dict)


def run_experiment(cfg: SimConfig) -> ExperimentResult:
    """Run cfg.rounds rounds for every seed in cfg.seeds."""
    validate_config(cfg)
    result = ExperimentResult(variant=cfg.variant)
    for seed in cfg.seeds:
        sim = Simulation(cfg, seed)
        result.rows_by_seed[seed] = sim.run()
        result.events_by_seed[seed] = sim.events
    return result
