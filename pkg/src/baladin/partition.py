"""Region decomposition: balanced graph partitioning, core/copy sets, consensus.

The partitioner is a greedy-growth initialization followed by Kernighan-Lin
style boundary refinement and a connectivity repair pass.  It is deterministic
for a fixed (graph, k, seed) and enforces the balance bound
``ceil((1 + imbalance) * n_bus / k)`` on every region.

Consensus structure: every line whose two endpoint cores live in different
regions makes both endpoints shared.  The owner region keeps the core voltage
variables (and any generators at the bus); every other region that sees the
bus through one of its lines holds a copy, tied to the core by two signed
consensus rows (one for each of u and w) with right-hand side zero.
"""

from __future__ import annotations

import json
import math
from collections import Counter, deque
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp


class PartitionError(ValueError):
    pass


@dataclass
class RegionAssignment:
    region_of: np.ndarray  # bus position -> region index
    n_regions: int

    def members(self, r):
        return np.flatnonzero(self.region_of == r)


@dataclass
class RegionStructure:
    index: int
    core: list[int]          # bus positions owned by this region
    copy: list[int]          # bus positions copied into this region
    local_buses: list[int]   # core + copy, sorted by bus position
    core_gens: list[int]     # generator indices whose bus core is here
    lines: list[int]         # branch indices with a local core endpoint
    limit_lines: list[int]   # subset of ``lines`` whose flow limit this region enforces
    angle_lines: list[int]   # subset whose angle bounds this region enforces
    n_pvars: int
    coupled_rows: np.ndarray      # sorted global consensus-row indices touching here
    a_coupled: sp.csr_matrix      # (n_cpl, n_pvars) signed 0/+-1 rows
    local_index: dict = field(default_factory=dict, repr=False)  # bus position -> slot

    @property
    def n_cpl(self):
        return len(self.coupled_rows)

    def uw_cols(self, bus_position):
        k = self.local_index[bus_position]
        return 2 * k, 2 * k + 1


@dataclass
class Partition:
    assignment: RegionAssignment
    owner: np.ndarray               # bus position -> owning region
    regions: list[RegionStructure]
    rows: list[tuple]               # (bus position, 'u'|'w', owner region, copy region)
    b: np.ndarray
    n_conn: int

    @property
    def n_regions(self):
        return len(self.regions)

    @property
    def n_lambda(self):
        return len(self.rows)


# ---------------------------------------------------------------------------
# graph helpers

def _adjacency(net):
    """Neighbor map with line multiplicity as edge weight."""
    adj = {k: Counter() for k in range(net.n_bus)}
    for br in net.branches:
        i, j = net.bus_position(br.from_bus), net.bus_position(br.to_bus)
        if i == j:
            continue
        adj[i][j] += 1
        adj[j][i] += 1
    return adj


def _connected(adj, nodes):
    nodes = list(nodes)
    if not nodes:
        return True
    allowed = set(nodes)
    seen = {nodes[0]}
    queue = deque([nodes[0]])
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if v in allowed and v not in seen:
                seen.add(v)
                queue.append(v)
    return len(seen) == len(allowed)


def _components(adj, nodes):
    remaining = set(nodes)
    comps = []
    while remaining:
        start = min(remaining)
        comp = {start}
        queue = deque([start])
        while queue:
            u = queue.popleft()
            for v in adj[u]:
                if v in remaining and v not in comp:
                    comp.add(v)
                    queue.append(v)
        comps.append(sorted(comp))
        remaining -= comp
    return comps


def _bfs_distances(adj, sources, n):
    dist = np.full(n, np.inf)
    queue = deque()
    for s in sources:
        dist[s] = 0
        queue.append(s)
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if dist[v] == np.inf:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


def _cut_weight(adj, region_of):
    cut = 0
    for u, nbrs in adj.items():
        for v, w in nbrs.items():
            if u < v and region_of[u] != region_of[v]:
                cut += w
    return cut


# ---------------------------------------------------------------------------
# partitioning

def partition_graph(net, k, imbalance=0.0, seed=0, refine=True):
    """Assign buses to k balanced regions with a small line cut.

    Each region ends up with at most ``ceil((1 + imbalance) * n_bus / k)``
    buses and a connected induced subgraph.  ``refine=False`` skips the
    Kernighan-Lin pass (the greedy baseline, useful as a comparison oracle).
    """
    n = net.n_bus
    if k < 1:
        raise PartitionError(f"region count must be >= 1, got {k}")
    if k > n:
        raise PartitionError(f"region count {k} exceeds bus count {n}")
    if not 0.0 <= imbalance < 1.0:
        raise PartitionError(f"imbalance must be in [0, 1), got {imbalance}")
    adj = _adjacency(net)
    if not _connected(adj, range(n)):
        raise PartitionError("bus graph is disconnected")
    if k == 1:
        return RegionAssignment(region_of=np.zeros(n, dtype=int), n_regions=1)

    cap = math.ceil((1.0 + imbalance) * n / k)
    last_error = None
    for attempt in range(8):  # deterministic retries with re-seeded growth
        rng = np.random.default_rng((seed, attempt))
        region_of = _greedy_growth(adj, n, k, cap, rng)
        if refine:
            _kl_refine(adj, region_of, k, cap)
        _repair_connectivity(adj, region_of, k, cap)
        asg = RegionAssignment(region_of=region_of, n_regions=k)
        try:
            _check_partition(adj, asg, cap)
            return asg
        except PartitionError as exc:
            last_error = exc
    raise last_error


def _greedy_growth(adj, n, k, cap, rng):
    seeds = [int(rng.integers(n))]
    while len(seeds) < k:
        dist = _bfs_distances(adj, seeds, n)
        far = int(np.lexsort((np.arange(n), -dist))[0])
        if dist[far] == 0:  # graph smaller than k handled earlier; defensive
            far = next(u for u in range(n) if u not in seeds)
        seeds.append(far)

    region_of = np.full(n, -1, dtype=int)
    sizes = [0] * k
    for r, s in enumerate(seeds):
        region_of[s] = r
        sizes[r] = 1

    unassigned = n - k
    while unassigned:
        progressed = False
        for r in sorted(range(k), key=lambda q: (sizes[q], q)):
            if sizes[r] >= cap:
                continue
            best = None
            for u in range(n):
                if region_of[u] != r:
                    continue
                for v, w in adj[u].items():
                    if region_of[v] != -1:
                        continue
                    gain = sum(wt for nb, wt in adj[v].items() if region_of[nb] == r)
                    cand = (gain, -v)
                    if best is None or cand > best:
                        best = cand
            if best is not None:
                v = -best[1]
                region_of[v] = r
                sizes[r] += 1
                unassigned -= 1
                progressed = True
                break
        if not progressed:
            # every open region is blocked; attach a stranded bus to the
            # smallest adjacent region regardless of frontier order
            u = next(u for u in range(n) if region_of[u] == -1)
            comp = [u]
            nbr_regions = {region_of[v] for c in comp for v in adj[c] if region_of[v] != -1}
            if not nbr_regions:
                raise PartitionError("internal: stranded bus with no assigned neighbor")
            r = min(nbr_regions, key=lambda q: (sizes[q], q))
            region_of[u] = r
            sizes[r] += 1
            unassigned -= 1
    return region_of


def _kl_refine(adj, region_of, k, cap, max_passes=12):
    n = len(region_of)
    sizes = Counter(region_of.tolist())
    for _ in range(max_passes):
        improved = False
        for u in range(n):
            src = region_of[u]
            if sizes[src] <= 1:
                continue
            links = Counter()
            for v, w in adj[u].items():
                links[region_of[v]] += w
            internal = links.get(src, 0)
            best = None
            for r, w in sorted(links.items()):
                if r == src or sizes[r] >= cap:
                    continue
                gain = w - internal
                if gain > 0 and (best is None or (gain, -r) > best[:2]):
                    best = (gain, -r, r)
            if best is None:
                continue
            r = best[2]
            region_of[u] = r
            if not _connected(adj, np.flatnonzero(region_of == src)):
                region_of[u] = src
                continue
            sizes[src] -= 1
            sizes[r] += 1
            improved = True
        if not improved:
            break


def _repair_connectivity(adj, region_of, k, cap, max_rounds=8):
    n = len(region_of)
    for _ in range(max_rounds):
        dirty = False
        for r in range(k):
            members = np.flatnonzero(region_of == r)
            comps = _components(adj, members)
            if len(comps) <= 1:
                continue
            comps.sort(key=len, reverse=True)
            for comp in comps[1:]:
                nbr = Counter()
                for u in comp:
                    for v, w in adj[u].items():
                        if region_of[v] != r:
                            nbr[region_of[v]] += w
                if not nbr:
                    continue  # isolated from all other regions; keep in place
                target = max(sorted(nbr), key=lambda q: (nbr[q], -q))
                for u in comp:
                    region_of[u] = target
                dirty = True
        # rebalance any region the repair pushed over the cap
        sizes = Counter(region_of.tolist())
        for r in range(k):
            guard = 0
            while sizes[r] > cap and guard < n:
                guard += 1
                moved = False
                for u in sorted(np.flatnonzero(region_of == r)):
                    links = Counter()
                    for v, w in adj[u].items():
                        links[region_of[v]] += w
                    targets = [q for q in sorted(links) if q != r and sizes[q] < cap]
                    if not targets:
                        continue
                    q = max(targets, key=lambda t: (links[t], -t))
                    region_of[u] = q
                    if not _connected(adj, np.flatnonzero(region_of == r)):
                        region_of[u] = r
                        continue
                    sizes[r] -= 1
                    sizes[q] += 1
                    dirty = True
                    moved = True
                    break
                if not moved:
                    break
        if not dirty:
            return


def _check_partition(adj, asg, cap):
    sizes = Counter(asg.region_of.tolist())
    for r in range(asg.n_regions):
        if sizes.get(r, 0) == 0:
            raise PartitionError(f"internal: region {r} is empty")
        if sizes[r] > cap:
            raise PartitionError(f"internal: region {r} exceeds balance cap {cap}")
        if not _connected(adj, asg.members(r)):
            raise PartitionError(f"internal: region {r} is disconnected")


def greedy_cut(net, k, imbalance=0.0, seed=0):
    """Cut weight of the unrefined greedy partition (baseline for tests)."""
    asg = partition_graph(net, k, imbalance, seed, refine=False)
    return _cut_weight(_adjacency(net), asg.region_of)


def cut_weight(net, asg):
    return _cut_weight(_adjacency(net), asg.region_of)


# ---------------------------------------------------------------------------
# consensus construction

def _ownership(net, asg):
    """Owner region per bus: assignment, overridden on boundary buses by the
    region holding more of the bus's incident lines (ties to lower index)."""
    own = asg.region_of.copy()
    pulls = {}
    for br in net.branches:
        i, j = net.bus_position(br.from_bus), net.bus_position(br.to_bus)
        if asg.region_of[i] == asg.region_of[j]:
            continue
        pulls.setdefault(i, Counter())
        pulls.setdefault(j, Counter())
    if not pulls:
        return own
    for br in net.branches:
        i, j = net.bus_position(br.from_bus), net.bus_position(br.to_bus)
        if i in pulls:
            pulls[i][asg.region_of[j]] += 1
        if j in pulls:
            pulls[j][asg.region_of[i]] += 1
    core_count = Counter(own.tolist())
    for b in sorted(pulls):
        counts = pulls[b]
        top = max(counts.values())
        winner = min(r for r, c in counts.items() if c == top)
        if winner != own[b]:
            if core_count[own[b]] <= 1:
                continue  # never leave a region without a core bus
            core_count[own[b]] -= 1
            core_count[winner] += 1
            own[b] = winner
    return own


def build_consensus(net, asg):
    """Derive core/copy sets, local line sets, and the consensus rows."""
    n_regions = asg.n_regions
    own = _ownership(net, asg)

    region_lines = [[] for _ in range(n_regions)]
    copies = [set() for _ in range(n_regions)]
    cut_lines = []
    for idx, br in enumerate(net.branches):
        i, j = net.bus_position(br.from_bus), net.bus_position(br.to_bus)
        ri, rj = own[i], own[j]
        if ri == rj:
            region_lines[ri].append(idx)
        else:
            region_lines[ri].append(idx)
            region_lines[rj].append(idx)
            copies[ri].add(j)
            copies[rj].add(i)
            cut_lines.append(idx)

    rows = []
    for b in range(net.n_bus):
        owner = own[b]
        for r in range(n_regions):
            if b in copies[r]:
                rows.append((b, "u", owner, r))
                rows.append((b, "w", owner, r))

    regions = []
    for r in range(n_regions):
        core = sorted(np.flatnonzero(own == r).tolist())
        copy = sorted(copies[r])
        local = sorted(core + copy)
        local_index = {b: k for k, b in enumerate(local)}
        core_gens = [g for g, gen in enumerate(net.generators) if own[net.bus_position(gen.bus)] == r]
        n_pvars = 2 * len(local) + 2 * len(core_gens)

        limit_lines, angle_lines = [], []
        for idx in region_lines[r]:
            br = net.branches[idx]
            i, j = net.bus_position(br.from_bus), net.bus_position(br.to_bus)
            enforcer = r if own[i] == own[j] else min(own[i], own[j])
            if enforcer != r:
                continue  # cut-line limits live in the lower-indexed region only
            if br.s_max is not None:
                limit_lines.append(idx)
            if br.has_angle_bounds:
                angle_lines.append(idx)

        ai, aj, av = [], [], []
        coupled = []
        for row_idx, (b, comp, owner, copier) in enumerate(rows):
            if owner != r and copier != r:
                continue
            coupled.append(row_idx)
            col = 2 * local_index[b] + (0 if comp == "u" else 1)
            ai.append(len(coupled) - 1)
            aj.append(col)
            av.append(1.0 if owner == r else -1.0)
        a_coupled = sp.csr_matrix((av, (ai, aj)), shape=(len(coupled), n_pvars))

        regions.append(
            RegionStructure(
                index=r,
                core=core,
                copy=copy,
                local_buses=local,
                core_gens=core_gens,
                lines=sorted(region_lines[r]),
                limit_lines=sorted(limit_lines),
                angle_lines=sorted(angle_lines),
                n_pvars=n_pvars,
                coupled_rows=np.array(coupled, dtype=int),
                a_coupled=a_coupled,
                local_index=local_index,
            )
        )

    return Partition(
        assignment=asg,
        owner=own,
        regions=regions,
        rows=rows,
        b=np.zeros(len(rows)),
        n_conn=len(cut_lines),
    )


def make_identity_partition(net):
    asg = RegionAssignment(region_of=np.zeros(net.n_bus, dtype=int), n_regions=1)
    return build_consensus(net, asg)


def coupling_metrics(part, net):
    """Density measures of the decomposition (lines per bus, coupling fractions)."""
    xi = [(reg.n_cpl / reg.n_pvars) if reg.n_pvars else 0.0 for reg in part.regions]
    return {
        "zeta": net.n_branch / net.n_bus,
        "xi": xi,
        "xi_bar": float(np.mean(xi)) if xi else 0.0,
        "n_lambda": part.n_lambda,
        "n_conn": part.n_conn,
        "n_pvars_max": max(reg.n_pvars for reg in part.regions),
        "region_sizes": [len(reg.core) for reg in part.regions],
    }


# ---------------------------------------------------------------------------
# JSON schema for the CLI

def partition_to_dict(part, net, seed=None, imbalance=None):
    d = {
        "n_regions": part.n_regions,
        "seed": seed,
        "imbalance": imbalance,
        "region_of": {str(net.buses[b].id): int(r) for b, r in enumerate(part.assignment.region_of)},
        "owner": {str(net.buses[b].id): int(r) for b, r in enumerate(part.owner)},
        "n_lambda": part.n_lambda,
        "n_conn": part.n_conn,
        "b": part.b.tolist(),
        "rows": [
            {"bus": net.buses[b].id, "component": comp, "owner": int(o), "copier": int(c)}
            for b, comp, o, c in part.rows
        ],
        "regions": [],
        "metrics": coupling_metrics(part, net),
    }
    for reg in part.regions:
        coo = reg.a_coupled.tocoo()
        d["regions"].append(
            {
                "index": reg.index,
                "core_buses": [net.buses[b].id for b in reg.core],
                "copy_buses": [net.buses[b].id for b in reg.copy],
                "generators": reg.core_gens,
                "lines": reg.lines,
                "limit_lines": reg.limit_lines,
                "angle_lines": reg.angle_lines,
                "n_pvars": reg.n_pvars,
                "coupled_rows": reg.coupled_rows.tolist(),
                "a_coupled_coo": [[int(i), int(j), float(v)] for i, j, v in zip(coo.row, coo.col, coo.data)],
            }
        )
    return d


def partition_to_json(part, net, seed=None, imbalance=None):
    return json.dumps(partition_to_dict(part, net, seed=seed, imbalance=imbalance), indent=1)
