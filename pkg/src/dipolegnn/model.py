"""Dipole prediction network on atom-bond and bond-angle graphs.

Pipeline per molecule: build the cutoff graph and its line graph, embed
atoms/bonds/angles, run GIN convolutions (bond features update on the
bond-angle graph, then atom features update on the atom-bond graph), map
final atom features to one scalar coefficient per bonded pair, scale the
pair displacement by it, and sum the resulting vectors into the predicted
dipole.

The pair coefficient is built so that the pair's latent vector does not
depend on which edge direction computes it: the coefficient and the
displacement flip sign together, and their product is unchanged, exactly,
in IEEE arithmetic.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tape, Tensor
from .featurize import (
    EmbeddingTable,
    FeatureState,
    LinearMap,
    MoleculeBundle,
    RbfSpec,
    bundle_molecule,
    init_features,
)
from .molgraph import Molecule

__all__ = [
    "VARIANTS",
    "ModelConfig",
    "ModelParams",
    "EdgeVectorSet",
    "activation",
    "gin_conv",
    "GinParams",
    "layer_forward",
    "pair_coefficients",
    "direction_invariant_embed",
    "readout",
    "forward",
    "forward_bundle",
    "rmse_norm_loss",
    "rmse_norm_loss_node",
    "mae_metric",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
]

VARIANTS = ("paper_literal", "strict_equivariant", "nonsym_edge", "node_charge")


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 3
    hidden_dim: int = 128
    activation: str = "bent_identity"
    embed_variant: str = "strict_equivariant"
    cutoff: float = 5.0
    n_rbf_dist: int = 64
    n_rbf_angle: int = 40
    atom_embed_dim: int = 64
    gate_hidden: int = 32
    update_angles: bool = False

    def __post_init__(self):
        if self.n_layers < 1 or self.hidden_dim < 1:
            raise ValueError("n_layers and hidden_dim must be >= 1")
        if self.embed_variant not in VARIANTS:
            raise ValueError(f"unknown embed_variant {self.embed_variant!r}; known: {VARIANTS}")
        if self.activation not in ad.ACTIVATION_KINDS:
            raise ValueError(f"unknown activation {self.activation!r}; known: {ad.ACTIVATION_KINDS}")

    def dist_spec(self) -> RbfSpec:
        return RbfSpec(self.n_rbf_dist, 0.0, self.cutoff)

    def angle_spec(self) -> RbfSpec:
        return RbfSpec(self.n_rbf_angle, -1.0, 1.0)


def activation(kind: str, x):
    """Scalar/array activation value; the tape op `unary` records the same map."""
    out = ad.activation_value(kind, x)
    return float(out) if np.ndim(x) == 0 else out


class GinParams:
    """Weights of one GIN convolution: learnable eps, 1-layer P, 2-layer MLP."""

    def __init__(self, name: str, dim: int, rng: np.random.Generator):
        self.eps = Parameter(f"{name}.eps", 0.0)
        self.p = LinearMap(f"{name}.P", dim, dim, rng)
        self.mlp1 = LinearMap(f"{name}.mlp1", dim, dim, rng)
        self.mlp2 = LinearMap(f"{name}.mlp2", dim, dim, rng)

    def parameters(self):
        return [self.eps, *self.p.parameters(), *self.mlp1.parameters(), *self.mlp2.parameters()]


def gin_conv(
    tape: Tape,
    node_feats: Tensor,
    edge_feats: Tensor,
    recv: np.ndarray,
    send: np.ndarray,
    n_nodes: int,
    params: GinParams,
    kind: str,
) -> Tensor:
    """One GIN update with edge features.

    out_i = MLP((1 + eps) h_i + sum over edges e with recv[e] = i of
    P(edge_feats[e] + h_send[e])), P a single linear layer + activation,
    MLP two linear layers with the activation between them. Nodes with no
    incoming edge keep an all-zero message (empty sum).
    """
    if node_feats.shape[1] != edge_feats.shape[1]:
        raise ad.ShapeMismatchError("gin_conv(features)", node_feats.shape, edge_feats.shape)
    msg = ad.unary(kind, params.p.apply(tape, ad.add(edge_feats, ad.gather_rows(node_feats, send))))
    agg = ad.segment_sum(msg, recv, n_nodes)
    one_plus_eps = ad.add(tape.constant(1.0), tape.leaf(params.eps))
    pre = ad.add(ad.scale_by(node_feats, one_plus_eps), agg)
    return params.mlp2.apply(tape, ad.unary(kind, params.mlp1.apply(tape, pre)))


class LayerParams:
    """One interaction layer: a bond update and an atom update (optionally angles)."""

    def __init__(self, name: str, dim: int, rng: np.random.Generator, update_angles: bool):
        self.bond = GinParams(f"{name}.bond", dim, rng)
        self.atom = GinParams(f"{name}.atom", dim, rng)
        self.angle = GinParams(f"{name}.angle", dim, rng) if update_angles else None

    def parameters(self):
        out = [*self.bond.parameters(), *self.atom.parameters()]
        if self.angle is not None:
            out.extend(self.angle.parameters())
        return out


def layer_forward(
    tape: Tape,
    state: FeatureState,
    bundle: MoleculeBundle,
    params: LayerParams,
    kind: str,
) -> FeatureState:
    """Bond features update on the bond-angle graph, then atom features on the atom-bond graph.

    Angle features are static unless the layer carries angle weights; the
    experimental angle refresh treats each angle as receiving one message
    from its updated bond pair.
    """
    y = gin_conv(tape, state.y, state.z, bundle.ldst, bundle.lsrc, bundle.n_bonds, params.bond, kind)
    x = gin_conv(tape, state.x, y, bundle.src, bundle.dst, bundle.n_atoms, params.atom, kind)
    z = state.z
    if params.angle is not None and bundle.lsrc.size:
        pair_sum = ad.add(ad.gather_rows(y, bundle.lsrc), ad.gather_rows(y, bundle.ldst))
        msg = ad.unary(kind, params.angle.p.apply(tape, pair_sum))
        one_plus_eps = ad.add(tape.constant(1.0), tape.leaf(params.angle.eps))
        pre = ad.add(ad.scale_by(z, one_plus_eps), msg)
        z = params.angle.mlp2.apply(tape, ad.unary(kind, params.angle.mlp1.apply(tape, pre)))
    return FeatureState(x=x, y=y, z=z)


class HeadParams:
    """Weights of the pair-coefficient head; the set depends on the variant.

    Output-producing weights start damped by 0.1 so untrained predictions
    land near the Debye label scale instead of the raw pair-sum scale.
    """

    _OUT_SCALE = 0.1

    def __init__(self, cfg: "ModelConfig", rng: np.random.Generator):
        d = cfg.hidden_dim
        nb = cfg.n_rbf_dist
        k = self._OUT_SCALE
        self.variant = cfg.embed_variant
        if self.variant == "paper_literal":
            self.w_h = Parameter("head.w_h", k * rng.standard_normal((d, 1)) / np.sqrt(d))
            self.w_r = Parameter("head.w_r", k * rng.standard_normal((3, 1)) / np.sqrt(3.0))
        elif self.variant == "strict_equivariant":
            self.w_h = Parameter("head.w_h", k * rng.standard_normal((d, 1)) / np.sqrt(d))
            self.gate1 = LinearMap("head.gate1", nb, cfg.gate_hidden, rng)
            self.gate2 = LinearMap("head.gate2", cfg.gate_hidden, 1, rng)
            self.gate2.weight.value *= k
        elif self.variant == "nonsym_edge":
            self.mlp1 = LinearMap("head.mlp1", 2 * d + nb, d, rng)
            self.mlp2 = LinearMap("head.mlp2", d, 1, rng)
            self.mlp2.weight.value *= k
        elif self.variant == "node_charge":
            self.w_q = Parameter("head.w_q", k * rng.standard_normal((d, 1)) / np.sqrt(d))
        else:
            raise ValueError(f"unknown embed_variant {self.variant!r}")

    def parameters(self):
        out = []
        for attr in ("w_h", "w_r", "w_q"):
            if hasattr(self, attr):
                out.append(getattr(self, attr))
        for attr in ("gate1", "gate2", "mlp1", "mlp2"):
            if hasattr(self, attr):
                out.extend(getattr(self, attr).parameters())
        return out


@dataclass
class EdgeVectorSet:
    """Latent 3-vectors whose sum is the dipole prediction.

    For pair variants there is one vector and one scalar coefficient per
    unordered bonded pair (direction-invariant for paper_literal and
    strict_equivariant); for node_charge there is one vector per atom.
    ``seg`` assigns each row to its molecule for batched readout.
    """

    vectors: Tensor
    coeffs: Tensor
    seg: np.ndarray
    n_mols: int


def pair_coefficients(
    tape: Tape,
    x_final: Tensor,
    src: np.ndarray,
    dst: np.ndarray,
    rvec: np.ndarray,
    rbf_dist: np.ndarray,
    head: HeadParams,
    kind: str,
) -> Tensor:
    """Scalar coefficient for each directed pair (src[k] -> dst[k]).

    paper_literal and strict_equivariant are antisymmetric under direction
    swap by construction; nonsym_edge deliberately is not.
    """
    variant = head.variant
    if variant == "paper_literal":
        proj = ad.matmul(x_final, tape.leaf(head.w_h))
        anti = ad.sub(ad.gather_rows(proj, src), ad.gather_rows(proj, dst))
        return ad.add(anti, ad.matmul(tape.constant(rvec), tape.leaf(head.w_r)))
    if variant == "strict_equivariant":
        delta = ad.sub(ad.gather_rows(x_final, src), ad.gather_rows(x_final, dst))
        anti = ad.matmul(delta, tape.leaf(head.w_h))
        gate = head.gate2.apply(tape, ad.unary(kind, head.gate1.apply(tape, tape.constant(rbf_dist))))
        return ad.mul_elementwise(anti, gate)
    if variant == "nonsym_edge":
        feats = ad.concat_cols(
            [ad.gather_rows(x_final, src), ad.gather_rows(x_final, dst), tape.constant(rbf_dist)]
        )
        return head.mlp2.apply(tape, ad.unary(kind, head.mlp1.apply(tape, feats)))
    raise ValueError(f"pair_coefficients does not apply to variant {variant!r}")


def direction_invariant_embed(
    tape: Tape,
    x_final: Tensor,
    bundle: MoleculeBundle,
    head: HeadParams,
    kind: str,
) -> EdgeVectorSet:
    """Latent vector per unordered pair (canonical direction src < dst).

    v = coefficient * displacement. For node_charge the vectors are
    per-atom charge-weighted centroid-relative positions instead.
    """
    if head.variant == "node_charge":
        q = ad.matmul(x_final, tape.leaf(head.w_q))
        vec = ad.row_scale(tape.constant(bundle.rel_pos), q)
        return EdgeVectorSet(vectors=vec, coeffs=q, seg=bundle.atom_mol, n_mols=bundle.n_mols)
    phi = pair_coefficients(
        tape, x_final, bundle.pair_src, bundle.pair_dst, bundle.pair_rvec,
        bundle.pair_rbf_dist, head, kind,
    )
    vec = ad.row_scale(tape.constant(bundle.pair_rvec), phi)
    return EdgeVectorSet(vectors=vec, coeffs=phi, seg=bundle.pair_mol, n_mols=bundle.n_mols)


def readout(evs: EdgeVectorSet) -> Tensor:
    """Sum the latent vectors per molecule; [n_mols, 3], zero rows when empty."""
    return ad.segment_sum(evs.vectors, evs.seg, evs.n_mols)


class ModelParams:
    """All learnable parameters of one model instance, seeded deterministically."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, species=None):
        from .featurize import QM9_SPECIES

        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.seed = int(seed)
        self.species = tuple(species) if species is not None else QM9_SPECIES
        self.table = EmbeddingTable(self.species, cfg.atom_embed_dim,
                                    seed=int(rng.integers(2**31)))
        self.proj_x = LinearMap("proj_x", cfg.atom_embed_dim, cfg.hidden_dim, rng)
        self.proj_y = LinearMap("proj_y", cfg.n_rbf_dist, cfg.hidden_dim, rng)
        self.proj_z = LinearMap("proj_z", cfg.n_rbf_angle, cfg.hidden_dim, rng)
        self.layers = [
            LayerParams(f"layer{i}", cfg.hidden_dim, rng, cfg.update_angles)
            for i in range(cfg.n_layers)
        ]
        self.head = HeadParams(cfg, rng)

    def all_parameters(self) -> list[Parameter]:
        out = [self.table.weights]
        for lin in (self.proj_x, self.proj_y, self.proj_z):
            out.extend(lin.parameters())
        for layer in self.layers:
            out.extend(layer.parameters())
        out.extend(self.head.parameters())
        return out

    def zero_grads(self) -> None:
        for p in self.all_parameters():
            p.zero_grad()

    def copy_values(self) -> dict[str, np.ndarray]:
        return {p.name: p.value.copy() for p in self.all_parameters()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        params = {p.name: p for p in self.all_parameters()}
        if set(values) != set(params):
            missing = set(params) - set(values)
            extra = set(values) - set(params)
            raise CheckpointError(f"parameter name mismatch (missing {missing}, extra {extra})")
        for name, val in values.items():
            p = params[name]
            val = np.asarray(val, dtype=np.float64).reshape(p.value.shape)
            p.value[...] = val


def forward_bundle(tape: Tape, bundle: MoleculeBundle, params: ModelParams) -> Tensor:
    """Predicted dipole vectors [n_mols, 3] for a (possibly merged) bundle."""
    cfg = params.cfg
    state = init_features(tape, bundle, params.table, params.proj_x, params.proj_y, params.proj_z)
    for layer in params.layers:
        state = layer_forward(tape, state, bundle, layer, cfg.activation)
    evs = direction_invariant_embed(tape, state.x, bundle, params.head, cfg.activation)
    return readout(evs)


def forward(mol: Molecule, cfg: ModelConfig, params: ModelParams) -> np.ndarray:
    """Predicted dipole 3-vector for one molecule (no gradients kept)."""
    bundle = bundle_molecule(mol, cfg.cutoff, cfg.dist_spec(), cfg.angle_spec())
    mu = forward_bundle(Tape(), bundle, params)
    return mu.data[0].copy()


# ---------------------------------------------------------------------------
# loss and metrics

def rmse_norm_loss_node(tape: Tape, labels: np.ndarray, mu: Tensor) -> Tensor:
    """Differentiable sqrt(mean((label - |mu|)^2)) over the rows of mu [B,3]."""
    labels = np.asarray(labels, dtype=np.float64)
    if labels.shape != (mu.shape[0],):
        raise ad.ShapeMismatchError("rmse_norm_loss", labels.shape, mu.shape)
    diff = ad.sub(tape.constant(labels), ad.rows_l2_norm(mu))
    return ad.sqrt(ad.scale(ad.sum_all(ad.mul_elementwise(diff, diff)), 1.0 / labels.size))


def _norms_checked(op: str, labels, preds) -> tuple[np.ndarray, np.ndarray]:
    labels = np.asarray(labels, dtype=np.float64)
    preds = np.asarray(preds, dtype=np.float64)
    if labels.ndim != 1 or preds.shape != (labels.size, 3):
        raise ad.ShapeMismatchError(op, labels.shape, preds.shape)
    return labels, np.sqrt(np.sum(preds * preds, axis=1))


def rmse_norm_loss(labels, preds) -> float:
    """sqrt(mean((label - |pred|)^2)); preds are dipole 3-vectors."""
    labels, norms = _norms_checked("rmse_norm_loss", labels, preds)
    return float(np.sqrt(np.mean((labels - norms) ** 2)))


def mae_metric(labels, preds) -> float:
    """Mean absolute error between labels and prediction norms, in Debye."""
    labels, norms = _norms_checked("mae_metric", labels, preds)
    return float(np.mean(np.abs(labels - norms)))


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_FORMAT = "dipolegnn-checkpoint-v1"


class CheckpointError(ValueError):
    """Checkpoint file missing, malformed, or inconsistent with its config."""


def save_checkpoint(path, params: ModelParams, meta: dict | None = None) -> None:
    """Single JSON file: config header + named float64 arrays.

    json keeps full float64 precision (shortest round-trip repr), so a
    save/load cycle is bit-exact.
    """
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(params.cfg),
        "species": list(params.species),
        "seed": params.seed,
        "meta": meta or {},
        "params": {
            p.name: {"shape": list(p.value.shape), "data": p.value.reshape(-1).tolist()}
            for p in params.all_parameters()
        },
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_checkpoint(path) -> ModelParams:
    try:
        with open(path) as fh:
            payload = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    try:
        cfg = ModelConfig(**payload["config"])
        params = ModelParams(cfg, seed=payload["seed"], species=payload["species"])
        values = {}
        for name, entry in payload["params"].items():
            arr = np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
            values[name] = arr
        params.load_values(values)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"malformed checkpoint {path}: {exc}") from exc
    return params
