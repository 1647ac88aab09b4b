"""Equivariant velocity network with hand-written backpropagation.

The network is EGNN-flavoured message passing over atom pairs. All learned
quantities are rotation invariant scalars (atom/time embeddings, radial basis
of pair distances, graph-derived pair features); the output velocity of atom
``i`` is ``sum_j gate_ij * env_ij * r_ij / (|r_ij| + eps)`` with
``r_ij = x_j - x_i``, so it is exactly translation invariant and rotation
equivariant.

Molecules in a batch are padded to a common atom count and processed as dense
``(B, n, n, H)`` pair tensors; masks remove padding and out-of-cutoff pairs.
"""
from __future__ import annotations

import json
from collections import deque
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

CHECKPOINT_VERSION = 1
N_PAIR_ATTR = 5


@dataclass(eq=False)
class MolecularGraph:
    """Atom kinds plus undirected bonds ``(i, j, order)`` stored once each."""

    atom_kinds: list[int]
    bonds: list[tuple[int, int, int]] = field(default_factory=list)

    def __post_init__(self):
        self.atom_kinds = [int(k) for k in self.atom_kinds]
        n = len(self.atom_kinds)
        if n < 1:
            raise ValueError("graph needs at least one atom")
        seen = set()
        clean = []
        for i, j, order in self.bonds:
            i, j, order = int(i), int(j), int(order)
            if not (0 <= i < n and 0 <= j < n):
                raise ValueError(f"bond ({i}, {j}) out of range for {n} atoms")
            if i == j:
                raise ValueError(f"self-bond on atom {i}")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise ValueError(f"bond {key} listed twice")
            seen.add(key)
            clean.append((i, j, order))
        self.bonds = clean

    @property
    def n_atoms(self) -> int:
        return len(self.atom_kinds)

    @cached_property
    def bond_order(self) -> np.ndarray:
        n = self.n_atoms
        order = np.zeros((n, n), dtype=np.int64)
        for i, j, o in self.bonds:
            order[i, j] = order[j, i] = o
        return order

    @cached_property
    def hops(self) -> np.ndarray:
        """Shortest-path bond counts; -1 where unreachable."""
        n = self.n_atoms
        adj = [np.flatnonzero(self.bond_order[i]) for i in range(n)]
        hops = np.full((n, n), -1, dtype=np.int64)
        for s in range(n):
            hops[s, s] = 0
            queue = deque([s])
            while queue:
                a = queue.popleft()
                for b in adj[a]:
                    if hops[s, b] < 0:
                        hops[s, b] = hops[s, a] + 1
                        queue.append(b)
        return hops

    @cached_property
    def pair_attr(self) -> np.ndarray:
        """Per ordered pair: one-hot hop class (1, 2, 3, >=4) and a rigidity flag.

        The flag marks multiple bonds and 1-4 pairs whose central bond is
        multiple, i.e. torsions that cannot rotate.
        """
        n = self.n_atoms
        hops = self.hops
        order = self.bond_order
        attr = np.zeros((n, n, N_PAIR_ATTR))
        attr[..., 0] = hops == 1
        attr[..., 1] = hops == 2
        attr[..., 2] = hops == 3
        attr[..., 3] = (hops >= 4) | (hops < 0)
        np.fill_diagonal(attr[..., 3], 0.0)
        attr[..., 4] = (hops == 1) & (order >= 2)
        for i, j in zip(*np.nonzero(hops == 3)):
            for a in np.flatnonzero(order[i]):
                for b in np.flatnonzero(order[j]):
                    if order[a, b] >= 2 and hops[i, a] == 1 and hops[b, j] == 1:
                        attr[i, j, 4] = 1.0
        return attr


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 3
    hidden: int = 64
    n_rbf: int = 16
    cutoff: float = 5.0
    denom_epsilon: float = 1e-8
    n_kinds: int = 10
    n_time_freq: int = 8
    aggregation_norm: float = 4.0


@dataclass
class VelocityModel:
    config: ModelConfig
    params: dict[str, np.ndarray]

    def copy(self) -> "VelocityModel":
        return VelocityModel(self.config, {k: v.copy() for k, v in self.params.items()})

    @property
    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))


def _fan_in_uniform(rng, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_model(config: ModelConfig | None = None, rng: np.random.Generator | None = None) -> VelocityModel:
    """Fan-in scaled uniform init; the final gate layer starts at zero.

    A zero gate makes the fresh model output zero velocity everywhere, so it
    acts as the identity refiner.
    """
    config = config or ModelConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    h = config.hidden
    n_s = config.n_rbf + N_PAIR_ATTR
    n_t = 2 * config.n_time_freq
    p: dict[str, np.ndarray] = {}
    p["embed"] = rng.normal(0.0, 1.0, size=(config.n_kinds, h))
    p["time_w"] = _fan_in_uniform(rng, n_t, (n_t, h))
    p["time_b"] = np.zeros(h)
    edge_fan = 2 * h + n_s
    for layer in range(config.n_layers):
        k = f"layer{layer}."
        p[k + "edge_hi"] = _fan_in_uniform(rng, edge_fan, (h, h))
        p[k + "edge_hj"] = _fan_in_uniform(rng, edge_fan, (h, h))
        p[k + "edge_s"] = _fan_in_uniform(rng, edge_fan, (n_s, h))
        p[k + "edge_b"] = _fan_in_uniform(rng, edge_fan, (h,))
        p[k + "node_h"] = _fan_in_uniform(rng, 2 * h, (h, h))
        p[k + "node_m"] = _fan_in_uniform(rng, 2 * h, (h, h))
        p[k + "node_b1"] = _fan_in_uniform(rng, 2 * h, (h,))
        p[k + "node_w2"] = _fan_in_uniform(rng, h, (h, h))
        p[k + "node_b2"] = np.zeros(h)
    p["gate_hi"] = _fan_in_uniform(rng, edge_fan, (h, h))
    p["gate_hj"] = _fan_in_uniform(rng, edge_fan, (h, h))
    p["gate_s"] = _fan_in_uniform(rng, edge_fan, (n_s, h))
    p["gate_b1"] = _fan_in_uniform(rng, edge_fan, (h,))
    p["gate_w2"] = np.zeros(h)
    p["gate_b2"] = np.zeros(1)
    return VelocityModel(config, p)


class GraphBatch:
    """Padded static description of a list of molecular graphs."""

    def __init__(self, graphs: Sequence[MolecularGraph]):
        if len(graphs) == 0:
            raise ValueError("empty batch")
        self.graphs = list(graphs)
        self.sizes = np.array([g.n_atoms for g in graphs])
        b, n = len(graphs), int(self.sizes.max())
        self.n_max = n
        self.kinds = np.zeros((b, n), dtype=np.int64)
        self.atom_mask = np.zeros((b, n), dtype=bool)
        self.bonded = np.zeros((b, n, n), dtype=bool)
        self.attr = np.zeros((b, n, n, N_PAIR_ATTR))
        for k, g in enumerate(graphs):
            m = g.n_atoms
            self.kinds[k, :m] = g.atom_kinds
            self.atom_mask[k, :m] = True
            self.bonded[k, :m, :m] = g.bond_order > 0
            self.attr[k, :m, :m] = g.pair_attr
        self.pair_mask = self.atom_mask[:, :, None] & self.atom_mask[:, None, :]
        self.pair_mask &= ~np.eye(n, dtype=bool)[None]

    def __len__(self) -> int:
        return len(self.graphs)

    def pack(self, coords: Sequence[np.ndarray]) -> np.ndarray:
        out = np.zeros((len(self.graphs), self.n_max, 3))
        for k, (g, x) in enumerate(zip(self.graphs, coords)):
            x = np.asarray(x, dtype=np.float64)
            if x.shape != (g.n_atoms, 3):
                raise ValueError(f"item {k}: coordinates {x.shape} do not match graph with {g.n_atoms} atoms")
            out[k, : g.n_atoms] = x
        return out

    def unpack(self, arr: np.ndarray) -> list[np.ndarray]:
        return [arr[k, :m].copy() for k, m in enumerate(self.sizes)]


def _silu(z):
    sig = expit(z)
    return z * sig, sig


def _dsilu(z, sig):
    return sig * (1.0 + z * (1.0 - sig))


def time_features(t: np.ndarray, n_freq: int) -> np.ndarray:
    freqs = np.pi * np.arange(1, n_freq + 1)
    arg = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


def _radial_basis(d: np.ndarray, config: ModelConfig) -> np.ndarray:
    centers = np.linspace(0.0, config.cutoff, config.n_rbf)
    spacing = config.cutoff / max(config.n_rbf - 1, 1)
    gamma = 0.5 / spacing**2
    return np.exp(-gamma * (d[..., None] - centers) ** 2)


def _geometry(config: ModelConfig, batch: GraphBatch, x: np.ndarray):
    r = x[:, None, :, :] - x[:, :, None, :]  # r[b, i, j] = x_j - x_i
    d = np.sqrt(np.sum(r * r, axis=-1))
    within = d <= config.cutoff
    mask = batch.pair_mask & (batch.bonded | within)
    smooth = 0.5 * (np.cos(np.pi * np.minimum(d, config.cutoff) / config.cutoff) + 1.0)
    env = np.where(batch.bonded, 1.0, smooth) * mask
    unit = r / (d + config.denom_epsilon)[..., None]
    static = np.concatenate([_radial_basis(d, config), batch.attr], axis=-1)
    return env, unit, static, mask


def _forward(model: VelocityModel, batch: GraphBatch, x: np.ndarray, t: np.ndarray, keep_cache: bool):
    cfg = model.config
    p = model.params
    env, unit, static, mask = _geometry(cfg, batch, x)
    phi = time_features(t, cfg.n_time_freq)
    h = p["embed"][batch.kinds] + (phi @ p["time_w"] + p["time_b"])[:, None, :]
    layers = []
    for layer in range(cfg.n_layers):
        k = f"layer{layer}."
        z = (
            (h @ p[k + "edge_hi"])[:, :, None, :]
            + (h @ p[k + "edge_hj"])[:, None, :, :]
            + static @ p[k + "edge_s"]
            + p[k + "edge_b"]
        )
        a, sig_z = _silu(z)
        m = np.sum(a * env[..., None], axis=2) / cfg.aggregation_norm
        y = h @ p[k + "node_h"] + m @ p[k + "node_m"] + p[k + "node_b1"]
        c, sig_y = _silu(y)
        h_next = h + c @ p[k + "node_w2"] + p[k + "node_b2"]
        if keep_cache:
            layers.append((h, z, sig_z, m, y, sig_y, c))
        h = h_next
    zg = (h @ p["gate_hi"])[:, :, None, :] + (h @ p["gate_hj"])[:, None, :, :] + static @ p["gate_s"] + p["gate_b1"]
    ag, sig_g = _silu(zg)
    gate = ag @ p["gate_w2"] + p["gate_b2"][0]
    weight = gate * env
    v = np.einsum("bij,bijc->bic", weight, unit)
    cache = None
    if keep_cache:
        cache = dict(env=env, unit=unit, static=static, phi=phi, layers=layers, h=h, zg=zg, ag=ag, sig_g=sig_g)
    return v, cache


def _backward(model: VelocityModel, batch: GraphBatch, cache: dict, dv: np.ndarray) -> dict[str, np.ndarray]:
    cfg = model.config
    p = model.params
    H = cfg.hidden
    env, unit, static = cache["env"], cache["unit"], cache["static"]
    n_s = static.shape[-1]
    flat_s = static.reshape(-1, n_s)
    grads: dict[str, np.ndarray] = {}

    dweight = np.einsum("bic,bijc->bij", dv, unit)
    dgate = dweight * env
    ag = cache["ag"]
    grads["gate_w2"] = ag.reshape(-1, H).T @ dgate.reshape(-1)
    grads["gate_b2"] = np.array([dgate.sum()])
    dzg = dgate[..., None] * p["gate_w2"] * _dsilu(cache["zg"], cache["sig_g"])
    grads["gate_b1"] = dzg.sum(axis=(0, 1, 2))
    grads["gate_s"] = flat_s.T @ dzg.reshape(-1, H)
    d_hi = dzg.sum(axis=2)
    d_hj = dzg.sum(axis=1)
    h = cache["h"]
    grads["gate_hi"] = h.reshape(-1, H).T @ d_hi.reshape(-1, H)
    grads["gate_hj"] = h.reshape(-1, H).T @ d_hj.reshape(-1, H)
    dh = d_hi @ p["gate_hi"].T + d_hj @ p["gate_hj"].T

    for layer in reversed(range(cfg.n_layers)):
        k = f"layer{layer}."
        h_in, z, sig_z, m, y, sig_y, c = cache["layers"][layer]
        grads[k + "node_w2"] = c.reshape(-1, H).T @ dh.reshape(-1, H)
        grads[k + "node_b2"] = dh.sum(axis=(0, 1))
        dy = (dh @ p[k + "node_w2"].T) * _dsilu(y, sig_y)
        flat_dy = dy.reshape(-1, H)
        grads[k + "node_h"] = h_in.reshape(-1, H).T @ flat_dy
        grads[k + "node_m"] = m.reshape(-1, H).T @ flat_dy
        grads[k + "node_b1"] = flat_dy.sum(axis=0)
        dm = dy @ p[k + "node_m"].T
        dz = (dm[:, :, None, :] / cfg.aggregation_norm) * env[..., None] * _dsilu(z, sig_z)
        grads[k + "edge_b"] = dz.sum(axis=(0, 1, 2))
        grads[k + "edge_s"] = flat_s.T @ dz.reshape(-1, H)
        d_hi = dz.sum(axis=2)
        d_hj = dz.sum(axis=1)
        grads[k + "edge_hi"] = h_in.reshape(-1, H).T @ d_hi.reshape(-1, H)
        grads[k + "edge_hj"] = h_in.reshape(-1, H).T @ d_hj.reshape(-1, H)
        dh = dh + dy @ p[k + "node_h"].T + d_hi @ p[k + "edge_hi"].T + d_hj @ p[k + "edge_hj"].T

    dh = dh * batch.atom_mask[..., None]
    embed = np.zeros_like(p["embed"])
    np.add.at(embed, batch.kinds[batch.atom_mask], dh[batch.atom_mask])
    grads["embed"] = embed
    dtime = dh.sum(axis=1)
    grads["time_w"] = cache["phi"].T @ dtime
    grads["time_b"] = dtime.sum(axis=0)
    return {name: grads[name] for name in p}


def _check_times(t, n: int) -> np.ndarray:
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,)).copy()
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise ValueError("t must lie in [0, 1]")
    return t


def forward_batch(model: VelocityModel, batch: GraphBatch, x: np.ndarray, t) -> np.ndarray:
    """Velocities for a padded batch ``x`` of shape ``(B, n_max, 3)``; padding rows are zero."""
    t = _check_times(t, len(batch))
    if x.shape != (len(batch), batch.n_max, 3):
        raise ValueError(f"expected coordinates of shape {(len(batch), batch.n_max, 3)}, got {x.shape}")
    v, _ = _forward(model, batch, x, t, keep_cache=False)
    return v * batch.atom_mask[..., None]


def forward(model: VelocityModel, x, graph: MolecularGraph, t: float) -> np.ndarray:
    """Velocity field ``u_theta(x, t, graph)`` for one conformer."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (graph.n_atoms, 3):
        raise ValueError(f"coordinates {x.shape} do not match graph with {graph.n_atoms} atoms")
    batch = GraphBatch([graph])
    return forward_batch(model, batch, x[None], [t])[0]


def loss_and_grad_batch(model: VelocityModel, batch: GraphBatch, x: np.ndarray, t, target: np.ndarray):
    """Mean over items of the per-atom squared velocity error, with exact gradients."""
    t = _check_times(t, len(batch))
    v, cache = _forward(model, batch, x, t, keep_cache=True)
    mask = batch.atom_mask[..., None]
    diff = (v - target) * mask
    per_item = np.sum(diff * diff, axis=(1, 2)) / batch.sizes
    loss = float(per_item.mean())
    dv = 2.0 * diff / (batch.sizes[:, None, None] * len(batch))
    return loss, _backward(model, batch, cache, dv)


def loss_and_grad(model: VelocityModel, items) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and gradients for a list of ``(x_t, t, graph, u_t)`` tuples."""
    items = list(items)
    batch = GraphBatch([it[2] for it in items])
    x = batch.pack([it[0] for it in items])
    target = batch.pack([it[3] for it in items])
    return loss_and_grad_batch(model, batch, x, [it[1] for it in items], target)


@dataclass
class OptimizerState:
    """Adam moments and hyperparameters."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, model: VelocityModel, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr < 0:
            raise ValueError("learning rate must be >= 0")
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise ValueError("moment decays must lie in [0, 1)")
        zeros = {k: np.zeros_like(v) for k, v in model.params.items()}
        return cls({k: z.copy() for k, z in zeros.items()}, zeros, 0, lr, beta1, beta2, eps)


class NonFiniteGradientError(FloatingPointError):
    pass


def optimizer_step(model: VelocityModel, grads: dict[str, np.ndarray], state: OptimizerState):
    """One Adam update; returns a new model and state, inputs untouched.

    With ``beta1 = beta2 = 0`` the step is ``theta - lr * g``.
    """
    for name, g in grads.items():
        if name not in model.params:
            raise KeyError(f"gradient for unknown parameter {name}")
        if g.shape != model.params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {model.params[name].shape} for {name}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient in {name}")
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_params, new_m, new_v = {}, {}, {}
    for name, theta in model.params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(theta)
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**step)
        v_hat = v / (1.0 - b2**step)
        # beta2 == 0 switches the second-moment scaling off, so (0, 0) is plain gradient descent
        denom = np.sqrt(v_hat) + state.eps if b2 > 0 else 1.0
        new_params[name] = theta - state.lr * m_hat / denom
        new_m[name], new_v[name] = m, v
    new_state = OptimizerState(new_m, new_v, step, state.lr, b1, b2, state.eps)
    return VelocityModel(model.config, new_params), new_state


def save_checkpoint(model: VelocityModel, path, metadata: dict | None = None) -> None:
    meta = {"format_version": CHECKPOINT_VERSION, "config": asdict(model.config), "metadata": metadata or {}}
    arrays = {f"param/{k}": v for k, v in model.params.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def load_checkpoint(path) -> tuple[VelocityModel, dict]:
    with np.load(Path(path), allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('format_version')}")
        params = {k[len("param/"):]: np.array(data[k], dtype=np.float64) for k in data.files if k.startswith("param/")}
    config = ModelConfig(**meta["config"])
    expected = init_model(config, np.random.default_rng(0)).params
    if set(expected) != set(params):
        raise ValueError("checkpoint parameters do not match the model layout")
    ordered = {k: params[k] for k in expected}
    return VelocityModel(config, ordered), meta.get("metadata", {})
