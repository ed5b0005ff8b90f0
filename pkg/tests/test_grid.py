import math
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tailstream.cluster.node import ClusterNode
from tailstream.grid.partition import (
    OWNER, DataLoss, TooFewMembers, build_partition_table, promote_backups, rebalance,
)
from tailstream.grid.store import partition_of


def ownership_moves(old, new):
    return sum(1 for a, b in zip(old.owners, new.owners) if a != b)


# ------------------------------------------------------------ build_partition_table


def test_single_node_owns_everything():
    t = build_partition_table((1,), 271, 0)
    assert t.owned_counts() == {1: 271}
    assert all(b == () for b in t.backups)


def test_three_nodes_balanced_271():
    t = build_partition_table((1, 2, 3), 271, 1)
    assert sorted(t.owned_counts().values()) == [90, 90, 91]
    t.check()


def test_twelve_partitions_three_nodes_layout():
    t = build_partition_table((1, 2, 3), 12, 1)
    assert t.owned_counts() == {1: 4, 2: 4, 3: 4}
    assert t.backup_counts() == {1: 4, 2: 4, 3: 4}
    # node 1 owns P1, P4, P7, P10 (ids 0, 3, 6, 9); their backups sit on nodes 2 and 3
    assert t.owned_by(1) == [0, 3, 6, 9]
    assert {t.backups[p][0] for p in t.owned_by(1)} == {2, 3}


def test_too_many_backups_rejected():
    with pytest.raises(TooFewMembers):
        build_partition_table((1, 2), 10, 2)
    with pytest.raises(TooFewMembers):
        build_partition_table((), 10, 0)


@given(st.integers(1, 8), st.integers(1, 400), st.integers(0, 3))
def test_build_is_balanced_and_valid(n, partitions, backups):
    members = tuple(range(1, n + 1))
    backups = min(backups, n - 1)
    t = build_partition_table(members, partitions, backups)
    t.check()
    counts = t.owned_counts().values()
    assert max(counts) - min(counts) <= 1
    assert all(len(b) == backups for b in t.backups)
    assert t == build_partition_table(members, partitions, backups)  # pure


# ------------------------------------------------------------ promote_backups


def test_node_one_failure_promotes_like_the_recovery_figure():
    t = build_partition_table((1, 2, 3), 12, 1)
    new, plan = promote_backups(t, 1)
    promoted = {m.partition: m.target for m in plan if m.role == OWNER}
    label = {p: f"P{p + 1}" for p in range(12)}
    assert sorted(label[p] for p, n in promoted.items() if n == 2) == ["P1", "P4"]
    assert sorted(label[p] for p, n in promoted.items() if n == 3) == ["P10", "P7"]
    assert new.version == t.version + 1
    new.check()
    # the survivors back up each other's new primaries
    for p in (0, 3, 6, 9):
        assert new.backups[p] == tuple({2, 3} - {new.owners[p]})


def test_single_node_failure_is_data_loss():
    t = build_partition_table((1,), 271, 0)
    with pytest.raises(DataLoss) as e:
        promote_backups(t, 1)
    assert e.value.partitions == list(range(271))


@pytest.mark.parametrize("n", [2, 3, 4, 5])
def test_any_single_failure_loses_nothing(n):
    members = tuple(range(1, n + 1))
    t = build_partition_table(members, 271, 1)
    for failed in members:
        new, _ = promote_backups(t, failed)
        new.check()
        assert failed not in new.owners
        survivors = tuple(m for m in members if m != failed)
        table, _ = rebalance(t, survivors)
        table.check()


def test_double_failure_with_one_backup_reports_loss():
    t = build_partition_table((1, 2, 3), 12, 1)
    with pytest.raises(DataLoss) as e:
        rebalance(t, (3,))
    lost = set(e.value.partitions)
    assert lost == {p for p in range(12) if set(t.replicas(p)) <= {1, 2}}


# ------------------------------------------------------------ rebalance


def test_no_change_no_moves():
    t = build_partition_table((1, 2, 3), 271, 1)
    assert rebalance(t, (1, 2, 3)) == (t, [])


def test_one_to_two_nodes_moves_about_half():
    t = build_partition_table((1,), 271, 0)
    new, plan = rebalance(t, (1, 2))
    assert 135 <= ownership_moves(t, new) <= 136
    new.check()


def test_three_to_four_moves_a_quarter():
    t = build_partition_table((1, 2, 3), 271, 1)
    new, plan = rebalance(t, (1, 2, 3, 4))
    moves = ownership_moves(t, new)
    assert moves <= math.ceil(271 / 4) + 1
    assert abs(moves / 271 - 0.25) < 0.02
    assert sorted(new.owned_counts().values()) == [67, 68, 68, 68]


@settings(max_examples=100)
@given(st.integers(1, 8), st.integers(1, 500), st.integers(0, 2))
def test_join_moves_at_most_one_share(n, partitions, backups):
    members = tuple(range(1, n + 1))
    t = build_partition_table(members, partitions, min(backups, n - 1))
    new, plan = rebalance(t, members + (n + 1,))
    new.check()
    assert ownership_moves(t, new) <= math.ceil(partitions / (n + 1)) + 1
    counts = new.owned_counts().values()
    assert max(counts) - min(counts) <= 1
    # every owner change in the table shows up in the plan
    changed = {p for p in range(partitions) if t.owners[p] != new.owners[p]}
    assert changed <= {m.partition for m in plan if m.role == OWNER}


@settings(max_examples=100)
@given(st.lists(st.sampled_from(["join", "leave"]), min_size=1, max_size=8), st.integers(10, 300))
def test_membership_sequences_keep_tables_valid(events, partitions):
    members = [1, 2, 3]
    next_id = 4
    t = build_partition_table(tuple(members), partitions, 1)
    for ev in events:
        if ev == "join":
            members.append(next_id)
            next_id += 1
        elif len(members) > 2:
            members.pop(0)
        t, _ = rebalance(t, tuple(members))
        t.check()
        counts = t.owned_counts().values()
        assert max(counts) - min(counts) <= 1
        assert all(len(b) == 1 for b in t.backups)


# ------------------------------------------------------------ grid service


@pytest.fixture
def three_nodes():
    nodes = [ClusterNode(threads=1, heartbeat_timeout_s=2.0).start()]
    for _ in range(2):
        nodes.append(ClusterNode(threads=1, join=nodes[0].address, heartbeat_timeout_s=2.0).start())
    nodes[0].wait_for_members(3)
    deadline = time.monotonic() + 10
    while any(n.grid.table is None or len(n.grid.table.members) < 3 for n in nodes):
        assert time.monotonic() < deadline
        time.sleep(0.05)
    yield nodes
    for n in reversed(nodes):
        n.shutdown()


def key_owned_by(table, node, prefix="k"):
    for i in range(10_000):
        k = f"{prefix}{i}"
        if table.owner(partition_of(k, table.partition_count)) == node:
            return k
    raise AssertionError("no key found")


def test_put_get_from_any_member(three_nodes):
    a, b, c = three_nodes
    a.grid.put("m", "k", 1)
    assert b.grid.get("m", "k") == 1 and c.grid.get("m", "k") == 1
    c.grid.put("m", "k", 2)
    assert a.grid.get("m", "k") == 2


def test_backups_equal_owner_after_puts(three_nodes):
    a, b, c = three_nodes
    for i in range(200):
        three_nodes[i % 3].grid.put("m", ("x", i), i * i)
    table = a.grid.table
    for pid in range(table.partition_count):
        replicas = [n for n in three_nodes if n.node_id in table.replicas(pid)]
        stores = [n.grid.data.get(pid, {}).get("m", {}) for n in replicas]
        assert all(s == stores[0] for s in stores)
    assert sum(len(n.grid.data.get(p, {}).get("m", {})) for n in three_nodes
               for p in table.owned_by(n.node_id)) == 200


def test_acked_put_survives_owner_crash(three_nodes):
    a, b, c = three_nodes
    key = key_owned_by(a.grid.table, c.node_id)
    b.grid.put("m", key, 1)
    c.shutdown()  # abrupt from the others' view: connections drop, no leave protocol
    deadline = time.monotonic() + 15
    while c.node_id in (a.grid.table.members if a.grid.table else ()):
        assert time.monotonic() < deadline, "master never dropped the crashed node"
        time.sleep(0.05)
    assert b.grid.get("m", key) == 1
    assert a.grid.get("m", key) == 1
    pid = partition_of(key, a.grid.table.partition_count)
    assert a.grid.table.owner(pid) in (a.node_id, b.node_id)
