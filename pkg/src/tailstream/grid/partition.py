"""Partition ownership: initial layout, minimal-move rebalancing, backup promotion.

All functions here are pure: the same inputs give the same table on every
node, which is what lets members agree without exchanging the table itself.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

from ..hashing import DEFAULT_PARTITION_COUNT

OWNER = "owner"
BACKUP = "backup"


class TooFewMembers(ValueError):
    pass


class DataLoss(Exception):
    """Some partitions lost their owner and every backup."""

    def __init__(self, partitions, table=None, plan=()):
        super().__init__(f"{len(partitions)} partitions lost all replicas")
        self.partitions = sorted(partitions)
        self.table = table
        self.plan = list(plan)


class Move(NamedTuple):
    partition: int
    source: object  # node to copy from; None when nothing survives
    target: object
    role: str  # OWNER or BACKUP


@dataclass(frozen=True)
class PartitionTable:
    members: tuple
    owners: tuple
    backups: tuple  # per partition, ordered tuple of backup nodes
    backup_count: int
    version: int = 1

    @property
    def partition_count(self) -> int:
        return len(self.owners)

    def owner(self, pid: int):
        return self.owners[pid]

    def replicas(self, pid: int) -> tuple:
        return (self.owners[pid],) + self.backups[pid]

    def owned_by(self, node) -> list:
        return [p for p, o in enumerate(self.owners) if o == node]

    def backed_up_by(self, node) -> list:
        return [p for p, b in enumerate(self.backups) if node in b]

    def owned_counts(self) -> dict:
        counts = dict.fromkeys(self.members, 0)
        for o in self.owners:
            counts[o] += 1
        return counts

    def backup_counts(self) -> dict:
        counts = dict.fromkeys(self.members, 0)
        for b in self.backups:
            for n in b:
                counts[n] += 1
        return counts

    def check(self):
        """Raise AssertionError if a structural invariant is broken."""
        members = set(self.members)
        for p in range(self.partition_count):
            owner = self.owners[p]
            assert owner in members, f"P{p} owner {owner} not a member"
            b = self.backups[p]
            assert owner not in b, f"P{p} backed up on its owner"
            assert len(set(b)) == len(b), f"P{p} duplicate backups"
            assert set(b) <= members, f"P{p} backup outside membership"
            assert len(b) <= len(self.members) - 1

    def to_json_dict(self) -> dict:
        return {
            "version": self.version,
            "members": list(self.members),
            "backup_count": self.backup_count,
            "owners": list(self.owners),
            "backups": [list(b) for b in self.backups],
        }


def _effective_backups(backup_count, member_count):
    return max(0, min(backup_count, member_count - 1))


def build_partition_table(
    members, partition_count: int = DEFAULT_PARTITION_COUNT, backup_count: int = 1
) -> PartitionTable:
    """Round-robin owners; each node's owned partitions spread their backups
    over the other nodes in contiguous blocks."""
    members = tuple(members)
    n = len(members)
    if n == 0:
        raise TooFewMembers("need at least one member")
    if backup_count < 0:
        raise ValueError("backup_count must be >= 0")
    if backup_count >= n and backup_count > 0:
        raise TooFewMembers(f"{backup_count} backups need more than {n} members")
    if partition_count < 1:
        raise ValueError("partition_count must be >= 1")

    owners = tuple(members[p % n] for p in range(partition_count))
    owned_total = [len(range(k, partition_count, n)) for k in range(n)]
    backups = []
    for p in range(partition_count):
        k = p % n
        rank = p // n
        chosen = []
        for r in range(backup_count):
            # block of the owner's list this partition falls in, shifted per replica
            offset = 1 + (rank * (n - 1) // owned_total[k] + r) % (n - 1)
            chosen.append(members[(k + offset) % n])
        backups.append(tuple(chosen))
    return PartitionTable(members, owners, tuple(backups), backup_count, 1)


def _balance_backups(members, owners, backups, backup_count, partition_count):
    """Fill/trim backup lists, keeping existing placements where legal."""
    want = _effective_backups(backup_count, len(members))
    live = set(members)
    counts = dict.fromkeys(members, 0)
    kept = []
    for p in range(partition_count):
        b = [n for n in backups[p] if n in live and n != owners[p]]
        b = list(dict.fromkeys(b))[:want]
        kept.append(b)
        for node in b:
            counts[node] += 1
    total = partition_count * want
    n = len(members)
    cap = {m: total // n + (1 if i < total % n else 0) for i, m in enumerate(members)}
    # trim overloaded nodes (from the highest partition ids down)
    for p in reversed(range(partition_count)):
        for node in list(kept[p]):
            if counts[node] > cap[node] and n > 1:
                kept[p].remove(node)
                counts[node] -= 1
    order = {m: i for i, m in enumerate(members)}
    for p in range(partition_count):
        while len(kept[p]) < want:
            candidates = [m for m in members if m != owners[p] and m not in kept[p]]
            node = min(candidates, key=lambda m: (counts[m] - cap[m], counts[m], order[m]))
            kept[p].append(node)
            counts[node] += 1
    return tuple(tuple(b) for b in kept)


def _backup_moves(old: PartitionTable, owners, backups, plan):
    for p in range(len(owners)):
        before = set(old.backups[p]) | {old.owners[p]}
        for node in backups[p]:
            if node not in before:
                plan.append(Move(p, owners[p], node, BACKUP))


def rebalance(old: PartitionTable, new_members, backup_count=None):
    """Rebalance ``old`` onto ``new_members`` moving as few partitions as possible.

    Returns ``(table, moves)``. Partitions whose owner left are handed to the
    first surviving backup when one exists (that is a promotion, not a copy).
    ``backup_count`` changes the number of backups (default: keep it); the
    effective count never exceeds ``members - 1``.
    """
    new_members = tuple(new_members)
    if not new_members:
        raise TooFewMembers("need at least one member")
    backup_count = old.backup_count if backup_count is None else backup_count
    if tuple(old.members) == new_members and backup_count == old.backup_count:
        return old, []
    P = old.partition_count
    live = set(new_members)
    n = len(new_members)
    owners = list(old.owners)
    plan = []
    lost = []
    unassigned = []
    for p in range(P):
        if owners[p] not in live:
            survivor = next((b for b in old.backups[p] if b in live), None)
            if survivor is None:
                lost.append(p)
                unassigned.append(p)
                owners[p] = None
            else:
                owners[p] = survivor
                plan.append(Move(p, survivor, survivor, OWNER))

    counts = dict.fromkeys(new_members, 0)
    for o in owners:
        if o is not None:
            counts[o] += 1
    order = {m: i for i, m in enumerate(new_members)}
    # nodes already holding more get the +1 slots, so fewer partitions move
    ranked = sorted(new_members, key=lambda m: (-counts[m], order[m]))
    target = {m: P // n + (1 if i < P % n else 0) for i, m in enumerate(ranked)}

    for node in new_members:
        excess = counts[node] - target[node]
        if excess > 0:
            mine = [p for p in range(P) if owners[p] == node]
            for p in mine[-excess:]:
                unassigned.append(p)
                owners[p] = None
            counts[node] -= excess
    unassigned.sort()
    for p in unassigned:
        node = min(
            (m for m in new_members if counts[m] < target[m]),
            key=lambda m: (counts[m] - target[m], order[m]),
        )
        previous = old.owners[p]
        counts[node] += 1
        owners[p] = node
        if p in lost:
            plan.append(Move(p, None, node, OWNER))
        else:
            source = previous if previous in live else next(
                (b for b in old.backups[p] if b in live), None
            )
            plan.append(Move(p, source, node, OWNER))

    backups = _balance_backups(new_members, owners, old.backups, backup_count, P)
    _backup_moves(old, owners, backups, plan)
    table = PartitionTable(new_members, tuple(owners), backups, backup_count, old.version + 1)
    if lost:
        raise DataLoss(lost, table, plan)
    return table, plan


def promote_backups(table: PartitionTable, failed_node):
    """Promote the first live backup of every partition ``failed_node`` owned.

    Returns ``(table, recovery_moves)``; raises :class:`DataLoss` carrying the
    best-effort table when a partition had no surviving replica.
    """
    members = tuple(m for m in table.members if m != failed_node)
    P = table.partition_count
    if not members:
        raise DataLoss(list(range(P)), None, [])
    owners = list(table.owners)
    plan = []
    lost = []
    for p in range(P):
        if owners[p] == failed_node:
            survivor = next((b for b in table.backups[p] if b != failed_node), None)
            if survivor is None:
                lost.append(p)
                owners[p] = members[p % len(members)]
                plan.append(Move(p, None, owners[p], OWNER))
            else:
                owners[p] = survivor
                plan.append(Move(p, survivor, survivor, OWNER))
    backups = _balance_backups(members, owners, table.backups, table.backup_count, P)
    _backup_moves(table, owners, backups, plan)
    new = PartitionTable(members, tuple(owners), backups, table.backup_count, table.version + 1)
    if lost:
        raise DataLoss(lost, new, plan)
    return new, plan
