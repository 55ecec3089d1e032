"""Replica engine tests: rank collectives, the commit star, peer discovery,
death machinery, and full-cluster trajectories checked bitwise against a
serial reference."""

import os
import threading
import time

import numpy as np
import pytest

from ftdp import model, transport, wire
from ftdp.errors import PEER_DOWN, Recoverable
from ftdp.quorum import Decision
from ftdp.replica import (
    EXIT_FATAL,
    ControlPlane,
    FilePortBook,
    IntraGroup,
    Mortality,
    StaticBook,
    Watchdog,
    _Halt,
)
from helpers import (
    Cluster,
    assert_replicas_agree,
    kill_failure,
    quick_scenario,
    read_hashes,
    read_metrics,
)


def run_ranks(n, fn):
    """Run fn(rank) on n threads; returns results indexed by rank."""
    out = [None] * n
    errs = [None] * n

    def main(r):
        try:
            out[r] = fn(r)
        except BaseException as exc:  # noqa: BLE001 - surfaced below
            errs[r] = exc

    threads = [threading.Thread(target=main, args=(r,)) for r in range(n)]
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout=10.0)
    assert not any(t.is_alive() for t in threads), "rank thread hung"
    for exc in errs:
        if exc is not None:
            raise exc
    return out


# ------------------------------------------------------------ IntraGroup


def test_reduce_scatter_hand_values():
    g = IntraGroup(2)
    vecs = [np.array([1, 2, 3, 4], dtype=np.float32),
            np.array([10, 20, 30, 40], dtype=np.float32)]
    bounds = [(0, 2), (2, 2)]
    shards = run_ranks(2, lambda r: g.reduce_scatter(r, vecs[r], bounds))
    assert shards[0].tolist() == [11.0, 22.0]
    assert shards[1].tolist() == [33.0, 44.0]


def test_reduce_scatter_fold_is_rank_ascending():
    rng = np.random.default_rng(4242)
    for _ in range(20):
        n = int(rng.integers(2, 5))
        length = int(rng.integers(n, 40))
        vecs = [rng.standard_normal(length).astype(np.float32) for _ in range(n)]
        cut = length // n
        bounds = [(r * cut, cut if r < n - 1 else length - (n - 1) * cut)
                  for r in range(n)]
        g = IntraGroup(n)
        shards = run_ranks(n, lambda r: g.reduce_scatter(r, vecs[r], bounds))
        want = vecs[0].copy()
        for v in vecs[1:]:
            want += v  # the exact fold order the group promises
        for r, (off, ln) in enumerate(bounds):
            assert np.array_equal(shards[r], want[off:off + ln])


def test_all_gather_restores_full_vector():
    g = IntraGroup(3)
    full = np.arange(10, dtype=np.float32)
    bounds = [(0, 4), (4, 3), (7, 3)]
    outs = run_ranks(3, lambda r: g.all_gather(
        r, full[bounds[r][0]:bounds[r][0] + bounds[r][1]].copy(), bounds, 10))
    for got in outs:
        assert np.array_equal(got, full)


def test_broadcast_carries_leader_value():
    g = IntraGroup(3)
    outs = run_ranks(3, lambda r: g.broadcast(r, "payload" if r == 0 else None))
    assert outs == ["payload"] * 3


def test_exchange_collects_every_rank():
    g = IntraGroup(4)
    outs = run_ranks(4, lambda r: g.exchange(r, r * r))
    assert all(o == [0, 1, 4, 9] for o in outs)


def test_abort_unblocks_waiters_as_halt():
    g = IntraGroup(2)
    hit = []

    def waiter():
        try:
            g.exchange(1, "x")
        except _Halt:
            hit.append(True)

    t = threading.Thread(target=waiter)
    t.start()
    time.sleep(0.05)
    g.abort()
    t.join(timeout=2.0)
    assert hit == [True]
    with pytest.raises(_Halt):
        g.broadcast(0, 1)  # barrier stays broken


# ------------------------------------------------------------ Mortality


def test_mortality_first_code_wins_and_closers_run():
    codes = []
    m = Mortality(exit_fn=codes.append)
    ran = []
    m.register_closer(lambda: ran.append("a"))
    m.register_closer(lambda: (_ for _ in ()).throw(RuntimeError("boom")))
    m.register_closer(lambda: ran.append("b"))
    with pytest.raises(_Halt):
        m.die(9)
    with pytest.raises(_Halt):
        m.die(4)
    assert m.code == 9
    assert codes[0] == 9
    assert ran == ["a", "b", "a", "b"]  # closers re-run, code does not change
    assert m.dying.is_set()


def test_watchdog_fires_when_marks_go_stale():
    m = Mortality(exit_fn=lambda code: None)
    progress = [time.monotonic()]
    Watchdog(m, progress, limit_s=0.3).start()
    assert m.dying.wait(3.0), "watchdog never fired"
    assert m.code == EXIT_FATAL


def test_watchdog_quiet_while_marks_refresh():
    m = Mortality(exit_fn=lambda code: None)
    progress = [time.monotonic()]
    Watchdog(m, progress, limit_s=0.5).start()
    for _ in range(8):
        time.sleep(0.1)
        progress[0] = time.monotonic()
    assert not m.dying.is_set()
    m.dying.set()  # stop the thread


# ------------------------------------------------------------ address books


def test_static_book_publish_and_overwrite():
    book = StaticBook()
    book.publish(3, 0, 1111)
    book.publish(3, 1, 2222)
    addr = book.lookup(3, 1)
    assert (addr.replica_id, addr.rank_id, addr.port) == (3, 1, 2222)
    with pytest.raises(Recoverable) as ei:
        book.lookup(4, 0)
    assert ei.value.reason == PEER_DOWN


def test_file_port_book_newest_incarnation_wins(tmp_path):
    path = str(tmp_path / "ports.txt")
    book = FilePortBook(path)
    with pytest.raises(Recoverable):
        book.lookup(0, 0)  # no file yet
    book.publish(0, 0, 5000)
    book.publish(1, 0, 6000)
    book.publish(0, 1, 5001)  # respawn shadows the dead process
    with open(path, "a") as fh:
        fh.write("not,a,valid,line\n")
    assert book.lookup(0, 0).port == 5001
    assert book.lookup(1, 3).port == 6000
    with pytest.raises(Recoverable):
        book.lookup(2, 0)


# ------------------------------------------------------------ ControlPlane


class _Star:
    """Three leader endpoints wired through real routers."""

    def __init__(self, ids=(0, 1, 2), timeout_s=2.0):
        self.book = StaticBook()
        self.routers = {}
        self.planes = {}
        for rid in ids:
            listener = transport.Listener()
            self.book.publish(rid, 0, listener.port)
            self.routers[rid] = transport.ConnectionRouter(listener).start()
            self.planes[rid] = ControlPlane(rid, 0, self.routers[rid], self.book,
                                            timeout_s=timeout_s)

    def reconfig(self, decision, only=None):
        rids = list(self.planes) if only is None else list(only)
        run_ranks(len(rids), lambda i: self.planes[rids[i]].reconfig(decision))

    def close(self):
        for p in self.planes.values():
            p.close()
        for r in self.routers.values():
            r.stop()


def decision_of(healthy, behind=None, target=5, gen=1):
    return Decision(1, target, gen, tuple(healthy), dict(behind or {}))


def test_ctrl_unanimous_commit_fires_chair_first():
    star = _Star()
    try:
        d = decision_of((0, 1, 2))
        star.reconfig(d)
        stamps = {}

        def play(rid):
            out = star.planes[rid].round(
                d, True, on_commit=lambda: stamps.setdefault(rid, time.monotonic()))
            return out

        outs = run_ranks(3, lambda i: play(i))
        assert outs == [True, True, True]
        assert sorted(stamps) == [0, 1, 2]
        # write-ahead: the chair records before the outcome reaches anyone
        assert stamps[0] <= stamps[1] and stamps[0] <= stamps[2]
    finally:
        star.close()


def test_ctrl_single_no_vote_forces_retry():
    star = _Star()
    try:
        d = decision_of((0, 1, 2))
        star.reconfig(d)
        fired = []
        outs = run_ranks(3, lambda rid: star.planes[rid].round(
            d, rid != 1, on_commit=lambda: fired.append(rid)))
        assert outs == [False, False, False]
        assert fired == []
    finally:
        star.close()


def test_ctrl_member_that_never_dialed_costs_a_retry():
    star = _Star(timeout_s=0.5)
    try:
        d = decision_of((0, 1, 2))
        star.reconfig(d, only=(0, 1))  # 2 stays silent
        outs = run_ranks(2, lambda rid: star.planes[rid].round(d, True))
        assert outs == [False, False]
    finally:
        star.close()


def test_ctrl_behind_member_receives_outcome_only():
    star = _Star()
    try:
        d = decision_of((0, 1), behind={2: 3})
        star.reconfig(d)
        fired = []
        outs = run_ranks(3, lambda rid: star.planes[rid].round(
            d, rid != 2, on_commit=lambda: fired.append(rid)))
        assert outs == [True, True, True]  # 2's vote is never solicited
        assert sorted(fired) == [0, 1, 2]
    finally:
        star.close()


def test_ctrl_solo_and_unassigned():
    star = _Star(ids=(0,))
    try:
        solo = decision_of((0,))
        star.planes[0].reconfig(solo)
        fired = []
        assert star.planes[0].round(solo, True, on_commit=lambda: fired.append(1))
        assert fired == [1]
        assert not star.planes[0].round(solo, False)
        foreign = decision_of((1, 2))
        star.planes[0].reconfig(foreign)
        assert not star.planes[0].round(foreign, True)
    finally:
        star.close()


# ------------------------------------------------------------ cluster runs


def digest_history(run_dir):
    per_step = {}
    for (step, rid), digest in read_hashes(run_dir).items():
        per_step.setdefault(step, {})[rid] = digest
    return per_step


def test_clean_run_commits_every_step(tmp_path):
    cfg = quick_scenario(num_replicas=3, ranks=2, total_steps=6)
    cluster = Cluster(cfg, str(tmp_path))
    codes = cluster.run(timeout_s=60)
    assert codes == {0: 0, 1: 0, 2: 0}
    cluster.validate_ledger()
    per_step = assert_replicas_agree(str(tmp_path))
    assert sorted(per_step) == list(range(1, 7))
    rows = read_metrics(str(tmp_path))
    assert all(r["healthy_count"] == 3 for r in rows)
    assert all(r["event"] == "" for r in rows)


def test_cluster_matches_serial_reference(tmp_path):
    """With two replicas every cross-replica sum has two operands, and
    float32 addition of two terms is order-free, so a plain serial rerun of
    the training arithmetic must agree bit for bit."""
    n, r, steps = 2, 2, 5
    cfg = quick_scenario(num_replicas=n, ranks=r, total_steps=steps)
    cluster = Cluster(cfg, str(tmp_path))
    assert cluster.run(timeout_s=60) == {0: 0, 1: 0}

    state = model.init_model(cfg.topology.model_dims, cfg.model_seed)
    opt = model.init_optimizer(cfg.topology.model_dims, cfg.tuning.momentum_beta)
    policy = cfg.lr_policy()
    want = {}
    cursor = 0
    for step in range(1, steps + 1):
        total = None
        for rid in range(n):
            acc = None
            for rank in range(r):
                batch = model.next_batch(cfg.data_seed, rid, cursor + rank,
                                         cfg.topology.micro_batch,
                                         cfg.topology.model_dims)
                _, grad = model.forward_backward(state, batch)
                acc = grad if acc is None else acc + grad
            total = acc if total is None else total + acc
        cursor += r
        total *= np.float32(1.0 / (n * r))
        lr = model.compute_lr(policy, step, n, n)
        model.optimizer_step(state, opt, total, lr)
        want[step] = model.hash_state(state.params, opt.momentum, step)

    got = read_hashes(str(tmp_path))
    for step in range(1, steps + 1):
        for rid in range(n):
            assert got[(step, rid)] == want[step], f"step {step} replica {rid}"


def test_kill_respawn_rejoins_at_gate_step(tmp_path):
    cfg = quick_scenario(num_replicas=3, ranks=2, total_steps=10,
                         failures=[kill_failure(3, 3, (2,))])
    cluster = Cluster(cfg, str(tmp_path))
    codes = cluster.run(timeout_s=60)
    assert codes == {0: 0, 1: 0, 2: 0}
    cluster.validate_ledger()
    assert_replicas_agree(str(tmp_path))
    rows = read_metrics(str(tmp_path))
    h = {r["step"]: r["healthy_count"] for r in rows
         if r["replica_id"] == 0 and r["phase"] == "commit"}
    assert h == {1: 3, 2: 3, 3: 2, 4: 2, 5: 2, 6: 2, 7: 3, 8: 3, 9: 3, 10: 3}
    assert any(r["step"] == 3 and r["event"] == "retry" for r in rows)
    assert any(r["step"] == 6 and r["replica_id"] == 2
               and r["event"] == "catch-up" for r in rows)
    # the dead window left no consumption lines for replica 2
    steps_of_2 = sorted(s for s, rid, _ in cluster.ledger_entries() if rid == 2)
    assert steps_of_2 == [1, 2, 7, 8, 9, 10]


def test_kill_run_is_bitwise_deterministic(tmp_path):
    cfg = quick_scenario(num_replicas=3, ranks=1, total_steps=8,
                         failures=[kill_failure(3, 2, (2,))])
    histories = []
    for i in range(2):
        run_dir = str(tmp_path / f"run{i}")
        cluster = Cluster(cfg, run_dir)
        codes = cluster.run(timeout_s=60)
        assert codes == {0: 0, 1: 0, 2: 0}
        cluster.validate_ledger()
        assert_replicas_agree(run_dir)
        histories.append(digest_history(run_dir))
    assert set(histories[0]) == set(histories[1])
    for step in histories[0]:
        assert histories[0][step] == histories[1][step], f"diverged at step {step}"


def test_hung_rank_sheds_whole_replica(tmp_path):
    from ftdp.scenario import Failure

    cfg = quick_scenario(num_replicas=3, ranks=2, total_steps=8,
                         failures=[Failure("hang_rank", 3, 3, 1, (2,), rank=1)])
    cfg.timeouts.chunk_s = 1.0
    cfg.timeouts.two_pc_s = 1.0
    cfg.timeouts.fetch_s = 1.0
    cfg.timeouts.watchdog_s = 6.0
    cluster = Cluster(cfg, str(tmp_path))
    codes = cluster.run(timeout_s=70)
    assert codes[0] == 0 and codes[1] == 0
    assert codes[2] != 0  # reaped, never a clean exit
    cluster.validate_ledger()
    rows = read_metrics(str(tmp_path))
    h = {r["step"]: r["healthy_count"] for r in rows
         if r["replica_id"] == 0 and r["phase"] == "commit"}
    assert h[2] == 3 and h[3] == 2 and h[8] == 2
    hashes = read_hashes(str(tmp_path))
    for step in range(1, 9):
        assert hashes[(step, 0)] == hashes[(step, 1)]


def test_blackholed_links_retry_then_heal(tmp_path):
    from ftdp.scenario import Failure

    cfg = quick_scenario(num_replicas=3, ranks=2, total_steps=8,
                         failures=[Failure("drop_links", 3, 2, 1, (2,))])
    cluster = Cluster(cfg, str(tmp_path))
    codes = cluster.run(timeout_s=70)
    assert codes == {0: 0, 1: 0, 2: 0}
    cluster.validate_ledger()
    rows = read_metrics(str(tmp_path))
    committed = {r["step"]: r["healthy_count"] for r in rows
                 if r["replica_id"] == 0 and r["phase"] == "commit"}
    assert all(committed[s] == 3 for s in range(1, 9))  # nobody died
    retries = [r["step"] for r in rows
               if r["replica_id"] == 0 and r["event"] == "retry"]
    assert 3 in retries
    assert_replicas_agree(str(tmp_path))


def test_restore_continues_bitwise_identically(tmp_path):
    cfg = quick_scenario(num_replicas=2, ranks=2, total_steps=6, interval=3)
    dir_a = str(tmp_path / "full")
    cluster = Cluster(cfg, dir_a)
    assert cluster.run(timeout_s=60) == {0: 0, 1: 0}
    full = digest_history(dir_a)

    from ftdp.checkpoint import find_latest, restore_cursors

    ckpt_dir = os.path.join(dir_a, "checkpoints")
    latest = find_latest(ckpt_dir)
    assert latest is not None and latest[0] == 6
    cursors = restore_cursors(os.path.join(dir_a, "ledger.txt"), 3, 2)
    assert cursors == {0: 6, 1: 6}  # 2 ranks * 3 steps each

    dir_b = str(tmp_path / "resumed")
    resumed = Cluster(cfg, dir_b, restore=(ckpt_dir, 3, cursors))
    assert resumed.run(timeout_s=60) == {0: 0, 1: 0}
    resumed.validate_ledger()
    tail = digest_history(dir_b)
    assert sorted(tail) == [4, 5, 6]
    for step in (4, 5, 6):
        assert tail[step] == full[step], f"resumed run diverged at step {step}"


def test_metrics_rows_have_exact_schema(tmp_path):
    cfg = quick_scenario(num_replicas=2, ranks=1, total_steps=3)
    cluster = Cluster(cfg, str(tmp_path))
    assert cluster.run(timeout_s=60) == {0: 0, 1: 0}
    keys = ["step", "replica_id", "phase", "wall_ms", "healthy_count",
            "tokens_committed", "loss", "stall_ms", "event"]
    rows = read_metrics(str(tmp_path))
    assert rows, "no metrics written"
    for row in rows:
        assert list(row) == keys
        assert row["phase"] in ("commit", "retry")
        assert row["wall_ms"] >= 0 and row["stall_ms"] >= 0
        assert isinstance(row["loss"], float)
    by_rid = {}
    for row in rows:
        by_rid.setdefault(row["replica_id"], []).append(row)
    for rid, rws in by_rid.items():
        # 4 samples per replica per committed step at micro_batch 4, 1 rank
        assert [r["tokens_committed"] for r in rws] == [8, 16, 24]
    for (step, rid), digest in read_hashes(str(tmp_path)).items():
        assert 1 <= step <= 3 and rid in (0, 1)
        assert len(digest) == 64 and int(digest, 16) >= 0
