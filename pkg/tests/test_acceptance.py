"""End-to-end acceptance checks, one group per criterion.

Run ``pytest tests/test_acceptance.py`` for just this suite; the terminal
summary ends with one ``ACCEPTANCE criterion N: PASS|FAIL`` line per group.
Accuracy comparisons use the median over five seeds of the final-round
test accuracy (fractions, so 3 points is 0.03).
"""

import socket
import time
from dataclasses import replace

import numpy as np
import pytest

from corpus import corpus
from gradcheck import OP_CASES, run_op
from gkt.accounting import (
    comm_cost_gkt,
    comm_cost_sl,
    count_flops,
    count_params,
    feature_bytes,
    soft_label_bytes,
)
from gkt.data import class_count_matrix, dirichlet_partition
from gkt.distillation import client_loss, cross_entropy, kl_divergence, server_loss, temperature_softmax
from gkt.models import EdgeModel, ServerModel, named_model
from gkt.orchestrator import (
    ClientSession,
    GktServer,
    aggregate_states,
    derive_seed,
    metrics_equal,
    run_centralized,
    run_fedavg,
    run_gkt,
    toy_config,
)
from gkt.protocol import (
    MalformedMessageError,
    PeerDisconnectedError,
    ProtocolError,
    TcpListener,
    TruncatedError,
    decode,
    encode,
    inprocess_pair,
    tcp_connect,
)
from gkt.tensor import Tensor

SEEDS = range(5)


class Runs:
    """Memoized toy experiments shared by criteria 7-11."""

    def __init__(self, data, models):
        self.train, self.test = data
        self.models = models
        self.cache = {}

    def plan(self, k, seed):
        return dirichlet_partition(self.train, k, 0.5, seed=seed, min_size=10)

    def gkt(self, seed, k=4, mode="sync", kd_mode="both"):
        key = ("gkt", seed, k, mode, kd_mode)
        if key not in self.cache:
            cfg = toy_config(seed=seed, num_clients=k, mode=mode, kd_mode=kd_mode)
            self.cache[key] = run_gkt(cfg, self.train, self.test, self.plan(k, seed), *self.models).final_accuracy
        return self.cache[key]

    def centralized(self, seed):
        key = ("centralized", seed)
        if key not in self.cache:
            cfg = toy_config(seed=seed)
            self.cache[key] = run_centralized(cfg, self.train, self.test, *self.models).final_accuracy
        return self.cache[key]

    def fedavg(self, seed):
        key = ("fedavg", seed)
        if key not in self.cache:
            cfg = toy_config(seed=seed)
            self.cache[key] = run_fedavg(cfg, self.train, self.test, self.plan(4, seed), *self.models).final_accuracy
        return self.cache[key]

    def median(self, fn, **kw):
        return float(np.median([fn(s, **kw) for s in SEEDS]))


@pytest.fixture(scope="module")
def runs(toy_data, toy_models):
    return Runs(toy_data, toy_models)


def report(label, value, bound):
    print(f"{label}: {value:.4f} (bound {bound})")


# -- 1. numerical core ------------------------------------------------------------

@pytest.mark.criterion(1)
def test_c1_gradient_checks():
    start = time.perf_counter()
    worst = {}
    for name in OP_CASES:
        errors = run_op(name, 20, dtype=np.float32, h=1e-3)
        assert len(errors) >= 20
        worst[name] = max(errors)
    elapsed = time.perf_counter() - start
    bad = {k: v for k, v in worst.items() if not v < 1e-2}
    assert not bad, bad
    assert elapsed < 120, elapsed


# -- 2. distillation algebra ---------------------------------------------------------

@pytest.mark.criterion(2)
def test_c2_kl_self_is_zero():
    rng = np.random.default_rng(0)
    for _ in range(100):
        z = Tensor(rng.normal(scale=5, size=(int(rng.integers(1, 8)), int(rng.integers(2, 12)))))
        p = temperature_softmax(z).data
        assert abs(kl_divergence(p, Tensor(p)).item()) <= 1e-7


@pytest.mark.criterion(2)
def test_c2_kl_nonnegative_on_100_pairs():
    rng = np.random.default_rng(1)
    for _ in range(100):
        zp, zq = rng.normal(scale=3, size=(2, 4, 10))
        p = temperature_softmax(Tensor(zp)).data
        q = temperature_softmax(Tensor(zq))
        assert kl_divergence(p, q).item() >= 0


@pytest.mark.criterion(2)
def test_c2_matched_teacher_is_exactly_ce():
    rng = np.random.default_rng(2)
    for _ in range(20):
        z = rng.normal(size=(8, 10)).astype(np.float32)
        y = rng.integers(0, 10, size=8)
        for fn in (client_loss, server_loss):
            terms = fn(Tensor(z), z, y, 1.0)
            assert terms.ce.item() == cross_entropy(Tensor(z), y).item()
            assert abs(terms.kd.item()) <= 1e-7


@pytest.mark.criterion(2)
def test_c2_temperature_shift_invariance():
    rng = np.random.default_rng(3)
    for _ in range(100):
        z = rng.normal(scale=4, size=(3, 7))
        c, T = rng.uniform(-30, 30), rng.uniform(0.5, 8)
        a = temperature_softmax(Tensor(z + c, dtype=np.float64), T).data
        b = temperature_softmax(Tensor(z, dtype=np.float64), T).data
        assert np.abs(a - b).max() <= 1e-6


# -- 3. architecture fidelity -----------------------------------------------------------

@pytest.mark.criterion(3)
def test_c3_parameter_counts():
    pinned = {"resnet8": 10_586, "resnet56": 591_322, "resnet110": 1_147_738, "resnet55": 590_858}
    counts = {name: count_params(named_model(name)) for name in pinned}
    assert counts == pinned
    assert abs(counts["resnet8"] - 11_000) <= 0.10 * 11_000
    assert abs(counts["resnet56"] - 591_000) <= 0.05 * 591_000
    assert abs(counts["resnet110"] - 1_150_000) <= 0.05 * 1_150_000


@pytest.mark.criterion(3)
def test_c3_flop_ratios():
    r8, r56, r110 = (count_flops(named_model(n)) for n in ("resnet8", "resnet56", "resnet110"))
    report("resnet56/resnet8", r56 / r8, "9 +- 20%")
    report("resnet110/resnet8", r110 / r8, "17 +- 20%")
    assert abs(r56 / r8 - 9) <= 0.2 * 9
    assert abs(r110 / r8 - 17) <= 0.2 * 17


# -- 4. communication formulas ------------------------------------------------------------

@pytest.mark.criterion(4)
def test_c4_formulas_match_hand_arithmetic():
    # 4096 f32 values each way, 1000 samples, 2 epochs
    assert comm_cost_sl(16_384, 16_384, 1000, 2) == 65_536_000
    # 16x32x32 feature map + 10 logits per sample, 50k samples, 3 rounds
    assert comm_cost_gkt(feature_bytes((16, 32, 32)), soft_label_bytes(10), 50_000, 3) == (65_536 + 40) * 150_000


@pytest.mark.criterion(4)
def test_c4_toy_run_payload_equals_prediction(toy_data, toy_models):
    train, test = toy_data
    cfg = toy_config(rounds=2, server_epochs=1)
    res = run_gkt(cfg, train, test, dirichlet_partition(train, 4, 0.5, seed=0, min_size=10), *toy_models)
    measured = sum(r.payload_up + r.payload_down for r in res.metrics)
    predicted = comm_cost_gkt(feature_bytes(res.edges[0].feature_shape), soft_label_bytes(4), len(train), 2)
    assert measured == predicted


@pytest.mark.criterion(4)
def test_c4_sl_to_gkt_ratio():
    fb = feature_bytes((16, 32, 32))
    ratio = comm_cost_sl(fb, fb, 50_000, 100) / comm_cost_gkt(fb, soft_label_bytes(10), 50_000, 100)
    report("SL/GKT", ratio, "2.0 +- 0.2")
    assert abs(ratio - 2.0) <= 0.2


# -- 5. partitioner ---------------------------------------------------------------------------

@pytest.mark.criterion(5)
def test_c5_disjoint_and_complete_over_50_draws():
    rng = np.random.default_rng(5)
    for _ in range(50):
        k, alpha, seed = int(rng.integers(1, 17)), float(rng.uniform(0.05, 10)), int(rng.integers(0, 2**31))
        labels = rng.integers(0, 10, size=500)
        plan = dirichlet_partition(labels, k, alpha, seed=seed, num_classes=10)
        allix = np.concatenate(plan.indices)
        assert np.array_equal(np.sort(allix), np.arange(500))
        assert np.array_equal(class_count_matrix(plan, labels, 10).sum(axis=0), np.bincount(labels, minlength=10))
        assert plan == dirichlet_partition(labels, k, alpha, seed=seed, num_classes=10)


@pytest.mark.criterion(5)
def test_c5_non_iid_signature():
    labels = np.repeat(np.arange(10), 5000)
    plan = dirichlet_partition(labels, 16, 0.5, seed=0, num_classes=10)
    ratio = plan.sizes.max() / plan.sizes.min()
    report("max/min client size", ratio, "> 2")
    assert (plan.class_counts == 0).sum() >= 1 and ratio > 2


# -- 6. protocol ------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def c6_clock():
    return [0.0]


@pytest.mark.criterion(6)
def test_c6_fuzz_round_trip(c6_clock):
    start = time.perf_counter()
    for msg in corpus(1000, seed=6):
        assert decode(encode(msg)) == msg
    c6_clock[0] += time.perf_counter() - start


@pytest.mark.criterion(6)
def test_c6_transport_transparency(tiny_setup, c6_clock):
    start = time.perf_counter()
    cfg, train, test, plan, models = tiny_setup
    a = run_gkt(cfg, train, test, plan, *models, transport="inproc")
    b = run_gkt(cfg, train, test, plan, *models, transport="tcp")
    assert metrics_equal(a.metrics, b.metrics)
    c6_clock[0] += time.perf_counter() - start


@pytest.mark.criterion(6)
def test_c6_faults_are_typed(tiny_setup, c6_clock):
    start = time.perf_counter()
    frame = encode(corpus(1, seed=0)[0])
    for cut in range(len(frame)):
        with pytest.raises(ProtocolError):
            decode(frame[:cut])
    listener = TcpListener()
    client = tcp_connect("127.0.0.1", listener.port)
    server = listener.accept(timeout=5)
    big = encode(corpus(20, seed=3)[-1])
    client.sock.sendall(big[:len(big) // 2])
    client.sock.shutdown(socket.SHUT_WR)
    with pytest.raises(TruncatedError):
        server.recv(timeout=5)
    for c in (client, server, listener):
        c.close()
    a, b = inprocess_pair()
    a.close()
    with pytest.raises(PeerDisconnectedError):
        b.recv(timeout=1)
    # a malformed download leaves the client's cached logits untouched
    cfg, train, test, plan, (edge_spec, srv_spec) = tiny_setup
    session = ClientSession(0, EdgeModel(edge_spec, 0), train, plan.indices[0], test, cfg)
    upload, _, _ = session.local_training(1)
    downloads, _ = GktServer(ServerModel(srv_spec, 1), cfg).server_round([upload])
    session.apply_download(downloads[0])
    kept = session.teacher.copy()
    with pytest.raises(ProtocolError):
        session.apply_download(replace(downloads[0], batches=downloads[0].batches[:-1]))
    assert np.array_equal(session.teacher, kept)
    with pytest.raises(MalformedMessageError):
        encode(replace(downloads[0], batches=downloads[0].batches[::-1]))
    c6_clock[0] += time.perf_counter() - start
    assert c6_clock[0] < 180, c6_clock[0]


# -- 7. end-to-end toy GKT --------------------------------------------------------------------

@pytest.mark.criterion(7)
def test_c7_toy_gkt_matches_centralized(runs):
    start = time.perf_counter()
    gkt = runs.median(runs.gkt)
    central = runs.median(runs.centralized)
    elapsed = time.perf_counter() - start
    report("GKT sync K=4", gkt, "")
    report("centralized", central, "")
    print(f"criterion 7 runtime {elapsed:.0f}s")
    assert abs(gkt - central) <= 0.03
    assert elapsed < 600


# -- 8. async parity ----------------------------------------------------------------------------

@pytest.mark.criterion(8)
def test_c8_async_within_two_points_of_sync(runs):
    sync = runs.median(runs.gkt)
    async_ = runs.median(runs.gkt, mode="async")
    report("GKT async K=4", async_, f"sync {sync:.4f} +- 0.02")
    assert abs(async_ - sync) <= 0.02


@pytest.mark.criterion(8)
def test_c8_single_client_async_is_sync(toy_data, toy_models):
    train, test = toy_data
    plan = dirichlet_partition(train, 1, 0.5, seed=0)
    out = [run_gkt(toy_config(rounds=3, num_clients=1, mode=m), train, test, plan, *toy_models) for m in
           ("sync", "async")]
    assert metrics_equal(out[0].metrics, out[1].metrics)


# -- 9. ablation switchboard ------------------------------------------------------------------------

@pytest.mark.criterion(9)
def test_c9_structural_switches(tiny_setup):
    cfg, train, test, plan, (edge_spec, srv_spec) = tiny_setup
    for mode, client_kd in (("none", False), ("server_to_edge_only", True)):
        mcfg = replace(cfg, kd_mode=mode)
        sessions = [ClientSession(k, EdgeModel(edge_spec, derive_seed(0, 1)), train, plan.indices[k], test, mcfg)
                    for k in range(2)]
        server = GktServer(ServerModel(srv_spec, derive_seed(0, 2)), mcfg)
        assert server.kd.server is False and all(s.kd.client is client_kd for s in sessions)
        uploads = [s.local_training(1)[0] for s in sessions]
        downloads, _ = server.server_round(uploads)
        for s in sessions:
            s.apply_download(downloads[s.client_id])
            _, ce, kd = s.local_training(2)
            assert (kd > 0) is client_kd
        z = uploads[0].batches[0]
        terms = server_loss(Tensor(z.logits), z.logits + 1.0, z.labels, 3.0, server.kd.server)
        assert terms.kd is None and terms.total is terms.ce
        terms = client_loss(Tensor(z.logits), z.logits + 1.0, z.labels, 3.0, sessions[0].kd.client)
        assert (terms.kd is None) is (not client_kd)
        if not client_kd:
            assert terms.total is terms.ce


@pytest.mark.criterion(9)
def test_c9_kd_helps_or_is_harmless(runs):
    none = runs.median(runs.gkt, kd_mode="none")
    both = runs.median(runs.gkt)
    s2e = runs.median(runs.gkt, kd_mode="server_to_edge_only")
    report("kd none", none, "")
    report("kd both", both, f">= {none - 0.01:.4f}")
    report("kd S->E", s2e, f">= {none - 0.01:.4f}")
    assert both >= none - 0.01 and s2e >= none - 0.01


# -- 10. FedAvg baseline -----------------------------------------------------------------------------

@pytest.mark.criterion(10)
def test_c10_identical_models_aggregate_to_themselves(toy_models):
    state = named_model("toy-full", num_classes=4, seed=3).state_dict()
    out = aggregate_states([state] * 4, [10, 30, 5, 55])
    assert all(np.array_equal(out[k], state[k]) for k in state)


@pytest.mark.criterion(10)
def test_c10_fedavg_matches_centralized(runs):
    fed = runs.median(runs.fedavg)
    central = runs.median(runs.centralized)
    report("FedAvg K=4", fed, f"centralized {central:.4f} +- 0.03")
    assert abs(fed - central) <= 0.03


# -- 11. edge-count scaling -----------------------------------------------------------------------------

@pytest.mark.criterion(11)
def test_c11_edge_count_band(runs):
    accs = {k: runs.median(runs.gkt, k=k) for k in (2, 4, 8)}
    for k, a in accs.items():
        report(f"GKT K={k}", a, "2-point band")
    assert max(accs.values()) - min(accs.values()) <= 0.02
