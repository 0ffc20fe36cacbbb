"""Synthetic graph populations, GED-labelled pair files and EIS probe pairs."""
from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field
from multiprocessing import Pool
from pathlib import Path
from typing import Sequence

import numpy as np

from .ged import DEFAULT_BEAM_WIDTH, ground_truth_ged
from .graph import (Graph, LabelVocab, extract_partition, ged_under_mapping, graph_from_json,
                    graph_to_json, pad_pair, sim_from_ged)

SOURCES = ("exact", "min_heuristics")


@dataclass
class PairSample:
    g1: Graph
    g2: Graph
    ged: int
    sim: float
    source: str

    def to_json(self) -> dict:
        return {"g1": self.g1.id, "g2": self.g2.id, "ged": int(self.ged), "sim": self.sim, "source": self.source}


def label_policy(g1: Graph, g2: Graph, exact_cap: int) -> str:
    return "exact" if max(g1.n, g2.n) <= exact_cap else "min_heuristics"


def label_pair(g1: Graph, g2: Graph, exact_cap: int = 8, beam_width: int = DEFAULT_BEAM_WIDTH) -> PairSample:
    policy = label_policy(g1, g2, exact_cap)
    res = ground_truth_ged(pad_pair(g1, g2), policy, beam_width)
    ged = int(res.value)
    return PairSample(g1, g2, ged, sim_from_ged(ged, g1.n, g2.n), policy)


# ----------------------------------------------------------------------------
# generators


def is_connected(g: Graph) -> bool:
    if g.n <= 1:
        return True
    nbrs = g.neighbors()
    seen, stack = {0}, [0]
    while stack:
        for u in nbrs[stack.pop()]:
            if u not in seen:
                seen.add(u)
                stack.append(u)
    return len(seen) == g.n


def gen_random_graph(n: int, label_vocab: int, edge_prob: float, rng: np.random.Generator,
                     connected: bool = False, gid: str = "g", max_tries: int = 10_000) -> Graph:
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0.0 <= edge_prob <= 1.0:
        raise ValueError("edge_prob must lie in [0, 1]")
    iu, ju = np.triu_indices(n, k=1)
    for _ in range(max_tries):
        labels = tuple(int(x) for x in rng.integers(0, label_vocab, size=n))
        keep = rng.random(iu.size) < edge_prob
        g = Graph(gid, labels, frozenset(zip(iu[keep].tolist(), ju[keep].tolist())))
        if not connected or is_connected(g):
            return g
    raise RuntimeError(f"no connected graph with n={n}, p={edge_prob} after {max_tries} draws")


EDIT_OPS = ("add_edge", "remove_edge", "add_node", "remove_node", "relabel")


def apply_random_edit(g: Graph, label_vocab: int, rng: np.random.Generator) -> Graph | None:
    """One unit-cost edit, or None when the drawn operation is impossible on ``g``.

    Only isolated nodes can be removed, so every edit costs exactly 1 and a
    sequence of k edits witnesses GED <= k.
    """
    op = EDIT_OPS[int(rng.integers(len(EDIT_OPS)))]
    labels, edges = list(g.labels), set(g.edges)
    if op == "add_edge":
        free = [(u, v) for u in range(g.n) for v in range(u + 1, g.n) if (u, v) not in edges]
        if not free:
            return None
        edges.add(free[int(rng.integers(len(free)))])
    elif op == "remove_edge":
        if not edges:
            return None
        edges.remove(sorted(edges)[int(rng.integers(len(edges)))])
    elif op == "add_node":
        labels.append(int(rng.integers(label_vocab)))
    elif op == "remove_node":
        iso = [k for k, d in enumerate(g.degrees()) if d == 0]
        if not iso or g.n == 1:
            return None
        k = iso[int(rng.integers(len(iso)))]
        del labels[k]
        edges = {(u - (u > k), v - (v > k)) for u, v in edges}
    else:
        if label_vocab < 2:
            return None
        k = int(rng.integers(g.n))
        labels[k] = int((labels[k] + rng.integers(1, label_vocab)) % label_vocab)
    return Graph(g.id, tuple(labels), frozenset(edges))


def gen_pair_by_edits(base: Graph, k_ops: int, rng: np.random.Generator, label_vocab: int = 3,
                      exact_cap: int = 8, gid: str | None = None) -> PairSample:
    if k_ops < 0:
        raise ValueError("k_ops must be >= 0")
    g = base
    done = 0
    while done < k_ops:
        nxt = apply_random_edit(g, label_vocab, rng)
        if nxt is not None:
            g, done = nxt, done + 1
    g2 = Graph(gid or f"{base.id}~{k_ops}", g.labels, g.edges)
    return label_pair(base, g2, exact_cap)


# ----------------------------------------------------------------------------
# EIS pairs


@dataclass
class EisConstruction:
    """Which node indices of each graph were intended to be aligned."""

    mode: str
    core_sizes: tuple[int, int]
    attachment_sizes: tuple[int, int]
    audited: bool

    def to_json(self) -> dict:
        return asdict(self)


def graft(core: Graph, part: Graph | None, rng: np.random.Generator, gid: str) -> Graph:
    """Disjoint union of ``core`` and ``part`` joined by one edge (core first)."""
    if part is None:
        return Graph(gid, core.labels, core.edges)
    off = core.n
    edges = set(core.edges) | {(u + off, v + off) for u, v in part.edges}
    edges.add((int(rng.integers(core.n)), off + int(rng.integers(part.n))))
    return Graph(gid, core.labels + part.labels, frozenset(edges))


def audit_core(g1: Graph, g2: Graph, core: int, ged: int) -> bool:
    """True when some optimal alignment maps core node k of g1 to core node k of g2.

    The partition under that alignment is checked to hold every core node and
    core edge in the aligned sets of both graphs.
    """
    pair = pad_pair(g1, g2)
    core_nodes = set(range(core))
    core_edges = {e for e in g1.edges if e[1] < core}
    for perm in itertools.permutations(range(core, pair.pad_size)):
        mapping = tuple(range(core)) + perm
        if ged_under_mapping(pair, mapping).total != ged:
            continue
        part = extract_partition(pair, mapping)
        return all(core_nodes <= side.aligned_nodes and core_edges <= side.aligned_edges
                   for side in (part.g1, part.g2))
    return False


def gen_eis_pairs(mode: str, rng: np.random.Generator, label_vocab: int = 3, core_size=(4, 6),
                  attach_size=(1, 2), edge_prob: float = 0.4, exact_cap: int = 8,
                  max_tries: int = 200, tag: str = "eis") -> tuple[PairSample, PairSample, EisConstruction]:
    """Two pairs that share aligned (``aligned``) or unaligned (``unaligned``) substructures.

    aligned: pair1 = (C+A1, C+A2), pair2 = (C+B1, C+B2) with one common core C.
    unaligned: pair1 = (C1+D1, C1+D2), pair2 = (C2+D1, C2+D2), so both pairs
    differ by the same grafted parts on different cores.
    Draws are repeated until exact GED confirms that the core is aligned in
    some optimal partition of both pairs.
    """
    if mode not in ("aligned", "unaligned"):
        raise ValueError(f"mode must be 'aligned' or 'unaligned', got {mode!r}")

    def part():
        n = int(rng.integers(attach_size[0], attach_size[1] + 1))
        return gen_random_graph(n, label_vocab, edge_prob, rng, connected=True) if n else None

    def core():
        n = int(rng.integers(core_size[0], core_size[1] + 1))
        return gen_random_graph(n, label_vocab, edge_prob, rng, connected=True)

    for _ in range(max_tries):
        if mode == "aligned":
            c = core()
            cores = (c, c)
            parts = ((part(), part()), (part(), part()))
        else:
            cores = (core(), core())
            d1, d2 = part(), part()
            parts = ((d1, d2), (d1, d2))
        samples = []
        ok = True
        for t, (c, (a, b)) in enumerate(zip(cores, parts)):
            g1 = graft(c, a, rng, f"{tag}-{t}a")
            g2 = graft(c, b, rng, f"{tag}-{t}b")
            s = label_pair(g1, g2, max(exact_cap, g1.n, g2.n))
            if max(g1.n, g2.n) <= 8 and not audit_core(g1, g2, c.n, s.ged):
                ok = False
                break
            samples.append(s)
        if ok:
            info = EisConstruction(mode, (cores[0].n, cores[1].n), tuple(x.n if x else 0 for x in parts[0]), True)
            return samples[0], samples[1], info
    raise RuntimeError(f"could not build an audited {mode} EIS pair in {max_tries} tries")


# ----------------------------------------------------------------------------
# datasets


@dataclass
class DataConfig:
    n_graphs: int = 200
    n_min: int = 5
    n_max: int = 10
    n_labels: int = 3
    edge_prob: float = 0.4
    connected: bool = False
    seed: int = 0
    split: tuple[float, float, float] = (0.6, 0.2, 0.2)
    pairing: str = "sampled"
    train_partners: int = 10
    db_size: int = 40
    self_pairs: bool = False
    exact_cap: int = 8
    beam_width: int = DEFAULT_BEAM_WIDTH
    graphs_file: str | None = None

    def __post_init__(self):
        self.split = tuple(float(x) for x in self.split)
        if self.n_graphs < 3 or not 1 <= self.n_min <= self.n_max:
            raise ValueError("need n_graphs >= 3 and 1 <= n_min <= n_max")
        if self.pairing not in ("sampled", "all"):
            raise ValueError("pairing must be 'sampled' or 'all'")
        if abs(sum(self.split) - 1.0) > 1e-9 or min(self.split) <= 0:
            raise ValueError("split proportions must be positive and sum to 1")

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class Dataset:
    graphs: dict[str, Graph]
    splits: dict[str, list[PairSample]]
    manifest: dict = field(default_factory=dict)
    vocab: LabelVocab | None = None


def split_sizes(n: int, split: Sequence[float]) -> tuple[int, int, int]:
    n_val = int(round(n * split[1]))
    n_test = int(round(n * split[2]))
    return n - n_val - n_test, n_val, n_test


def all_pairs(graphs: Sequence[Graph], self_pairs: bool = False) -> list[tuple[Graph, Graph]]:
    out = list(itertools.combinations(graphs, 2))
    if self_pairs:
        out += [(g, g) for g in graphs]
    return out


def _label_job(args):
    g1, g2, cap, width = args
    return label_pair(g1, g2, cap, width)


def label_pairs(pairs: Sequence[tuple[Graph, Graph]], exact_cap: int, beam_width: int = DEFAULT_BEAM_WIDTH,
                jobs: int = 1) -> list[PairSample]:
    """Label pairs, fanning out over ``jobs`` processes. Output order follows input order."""
    work = [(a, b, exact_cap, beam_width) for a, b in pairs]
    if jobs <= 1 or len(work) < 2:
        return [_label_job(w) for w in work]
    with Pool(jobs) as pool:
        return pool.map(_label_job, work, chunksize=max(1, len(work) // (4 * jobs)))


def make_population(cfg: DataConfig, vocab: LabelVocab) -> list[Graph]:
    if cfg.graphs_file:
        return load_external(cfg.graphs_file, vocab)
    rng = np.random.default_rng(cfg.seed)
    for k in range(cfg.n_labels):
        vocab.intern(str(k))
    graphs = []
    for t in range(cfg.n_graphs):
        n = int(rng.integers(cfg.n_min, cfg.n_max + 1))
        graphs.append(gen_random_graph(n, cfg.n_labels, cfg.edge_prob, rng, cfg.connected, gid=f"g{t:04d}"))
    return graphs


def load_external(path, vocab: LabelVocab) -> list[Graph]:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise OSError(f"cannot read graph collection {path}: {exc}") from exc
    if isinstance(data, dict):
        data = [data]
    graphs = [graph_from_json(obj, vocab) for obj in data]
    ids = [g.id for g in graphs]
    if len(set(ids)) != len(ids) or "" in ids:
        graphs = [Graph(f"g{t:04d}", g.labels, g.edges) for t, g in enumerate(graphs)]
    return graphs


def pair_plan(train: list[Graph], val: list[Graph], test: list[Graph], cfg: DataConfig,
              rng: np.random.Generator) -> dict[str, list[tuple[Graph, Graph]]]:
    """Training pairs among training graphs; val/test queries scored against training graphs."""
    if cfg.pairing == "all":
        plan = {"train": all_pairs(train, cfg.self_pairs)}
        for name, qs in (("val", val), ("test", test)):
            plan[name] = [(q, d) for q in qs for d in train]
        return plan
    plan = {"train": []}
    for k, g in enumerate(train):
        others = [j for j in range(len(train)) if j != k]
        take = rng.choice(others, size=min(cfg.train_partners, len(others)), replace=False)
        plan["train"] += [(g, train[int(j)]) for j in sorted(take)]
        if cfg.self_pairs:
            plan["train"].append((g, g))
    db_idx = sorted(int(j) for j in rng.choice(len(train), size=min(cfg.db_size, len(train)), replace=False))
    db = [train[j] for j in db_idx]
    for name, qs in (("val", val), ("test", test)):
        plan[name] = [(q, d) for q in qs for d in db]
    return plan


def build_dataset(cfg: DataConfig, out_dir=None, jobs: int = 1) -> Dataset:
    vocab = LabelVocab()
    graphs = make_population(cfg, vocab)
    rng = np.random.default_rng(cfg.seed + 1)
    order = rng.permutation(len(graphs))
    n_train, n_val, _ = split_sizes(len(graphs), cfg.split)
    train = [graphs[i] for i in sorted(order[:n_train])]
    val = [graphs[i] for i in sorted(order[n_train:n_train + n_val])]
    test = [graphs[i] for i in sorted(order[n_train + n_val:])]
    plan = pair_plan(train, val, test, cfg, rng)
    splits = {name: label_pairs(prs, cfg.exact_cap, cfg.beam_width, jobs) for name, prs in plan.items()}
    manifest = {
        "config": cfg.to_json(),
        "graph_splits": {"train": [g.id for g in train], "val": [g.id for g in val], "test": [g.id for g in test]},
        "pair_counts": {k: len(v) for k, v in splits.items()},
        "label_policy": f"exact (A*) when both graphs have <= {cfg.exact_cap} nodes, else min(beam, hungarian)",
        "vocabulary": vocab.names,
        "roles": "train pairs join training graphs; val/test pairs are (query from the split, database graph from train)",
    }
    ds = Dataset({g.id: g for g in graphs}, splits, manifest, vocab)
    if out_dir is not None:
        save_dataset(ds, out_dir)
    return ds


def save_dataset(ds: Dataset, out_dir) -> None:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "graphs.json", "w") as fh:
            json.dump([graph_to_json(g, ds.vocab) for g in ds.graphs.values()], fh)
        for name, samples in ds.splits.items():
            with open(out / f"pairs.{name}.jsonl", "w") as fh:
                for s in samples:
                    fh.write(json.dumps(s.to_json()) + "\n")
        with open(out / "manifest.json", "w") as fh:
            json.dump(ds.manifest, fh, indent=2, sort_keys=True)
    except OSError as exc:
        raise OSError(f"writing dataset to {out}: {exc}") from exc


def read_pairs(path, graphs: dict[str, Graph]) -> list[PairSample]:
    out = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            obj = json.loads(line)
            try:
                g1, g2 = graphs[obj["g1"]], graphs[obj["g2"]]
            except KeyError as exc:
                raise ValueError(f"{path}:{line_no}: unknown graph id {exc}") from exc
            out.append(PairSample(g1, g2, int(obj["ged"]), float(obj["sim"]), obj.get("source", "exact")))
    return out


def load_dataset(path) -> Dataset:
    root = Path(path)
    if not (root / "graphs.json").exists():
        raise FileNotFoundError(f"{root}: no graphs.json (not a dataset directory)")
    vocab = LabelVocab()
    manifest = {}
    if (root / "manifest.json").exists():
        with open(root / "manifest.json") as fh:
            manifest = json.load(fh)
        for name in manifest.get("vocabulary", []):
            vocab.intern(name)
    with open(root / "graphs.json") as fh:
        graphs = {g.id: g for g in (graph_from_json(o, vocab) for o in json.load(fh))}
    splits = {}
    for name in ("train", "val", "test"):
        f = root / f"pairs.{name}.jsonl"
        if f.exists():
            splits[name] = read_pairs(f, graphs)
    return Dataset(graphs, splits, manifest, vocab)
