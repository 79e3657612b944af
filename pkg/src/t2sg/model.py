"""TopoFormer relation model: geometry-guided and counterfactual attention blocks plus heads."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .datagen import DetectionSample, denormalize_points, normalize_points
from .scene import LANE_CATEGORIES, NUM_CLASSES, Centerline, Lane, SceneGraph, SpmConfig, spm, validate

SPM_MODES = ("add", "mul", "hadamard", "off")
CIL_MODES = ("zero", "mean", "random", "off")
REG_MODES = ("refine", "absolute")
RESIDUALS = ("literal", "two_sublayer")
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    n_blocks: int = 2
    d_in: int = 32
    max_queries: int = 200
    n_points: int = 11
    spm_mode: str = "add"
    cil_mode: str = "zero"
    ffn_width: int | None = None
    residual: str = "literal"
    reg_mode: str = "refine"
    n_cf_samples: int = 1
    spm_epsilon: float = 1e-6
    spm_distance: str = "l1"
    seed: int = 0

    def __post_init__(self):
        for name in ("d", "n_blocks", "d_in", "max_queries", "n_points", "n_cf_samples"):
            if getattr(self, name) <= 0:
                raise ValueError(f"ModelConfig.{name} must be positive")
        if self.spm_mode not in SPM_MODES:
            raise ValueError(f"spm_mode must be one of {SPM_MODES}")
        if self.cil_mode not in CIL_MODES:
            raise ValueError(f"cil_mode must be one of {CIL_MODES}")
        if self.residual not in RESIDUALS:
            raise ValueError(f"residual must be one of {RESIDUALS}")
        if self.reg_mode not in REG_MODES:
            raise ValueError(f"reg_mode must be one of {REG_MODES}")
        if self.ffn_width is not None and self.ffn_width <= 0:
            raise ValueError("ffn_width must be positive")

    @property
    def hidden(self) -> int:
        return self.ffn_width or 2 * self.d


class _Init:
    def __init__(self, seed: int):
        self.rng = np.random.default_rng([seed, 0x70F0])

    def weight(self, fan_in: int, fan_out: int, name: str) -> Parameter:
        return Parameter(self.rng.standard_normal((fan_in, fan_out)) / math.sqrt(fan_in), name=name)

    def bias(self, n: int, name: str, fill: float = 0.0) -> Parameter:
        return Parameter(np.full((1, n), fill), name=name)


class Linear:
    def __init__(self, init: _Init, fan_in: int, fan_out: int, name: str, bias_fill: float = 0.0):
        self.weight = init.weight(fan_in, fan_out, f"{name}.weight")
        self.bias = init.bias(fan_out, f"{name}.bias", bias_fill)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.weight, self.bias)

    def parameters(self):
        return [self.weight, self.bias]


class MLP:
    def __init__(self, init: _Init, widths, name: str, out_bias: float = 0.0):
        n = len(widths) - 1
        self.layers = [
            Linear(init, widths[i], widths[i + 1], f"{name}.{i}", out_bias if i == n - 1 else 0.0)
            for i in range(n)
        ]

    def __call__(self, x: Tensor) -> Tensor:
        return ad.mlp_forward(x, [(l.weight, l.bias) for l in self.layers])

    def parameters(self):
        return [p for l in self.layers for p in l.parameters()]


class AttentionLayer:
    """Shared structure of the aggregation and intervention layers."""

    def __init__(self, init: _Init, cfg: ModelConfig, name: str):
        d = cfg.d
        self.d = d
        self.residual = cfg.residual
        self.w_q = init.weight(d, d, f"{name}.w_q")
        self.w_k = init.weight(d, d, f"{name}.w_k")
        self.w_v = init.weight(d, d, f"{name}.w_v")
        self.ffn = MLP(init, [d, cfg.hidden, d], f"{name}.ffn")
        self.norm_gain = Parameter(np.ones((1, d)), name=f"{name}.norm.gain")
        self.norm_bias = Parameter(np.zeros((1, d)), name=f"{name}.norm.bias")
        self.norm2_gain = Parameter(np.ones((1, d)), name=f"{name}.norm2.gain")
        self.norm2_bias = Parameter(np.zeros((1, d)), name=f"{name}.norm2.bias")

    def parameters(self):
        ps = [self.w_q, self.w_k, self.w_v, *self.ffn.parameters(), self.norm_gain, self.norm_bias]
        if self.residual == "two_sublayer":
            ps += [self.norm2_gain, self.norm2_bias]
        return ps

    def logits(self, x: Tensor) -> Tensor:
        q = ad.matmul(x, self.w_q)
        k = ad.matmul(x, self.w_k)
        return ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(self.d))

    def wrap(self, x: Tensor, attended: Tensor) -> Tensor:
        if self.residual == "literal":
            return ad.layer_norm(ad.add(x, self.ffn(attended)), self.norm_gain, self.norm_bias)
        y = ad.layer_norm(ad.add(x, attended), self.norm_gain, self.norm_bias)
        return ad.layer_norm(ad.add(y, self.ffn(y)), self.norm2_gain, self.norm2_bias)


class LalLayer(AttentionLayer):
    pass


class CilLayer(AttentionLayer):
    pass


def combine_spm(logits: Tensor, a_spm: Tensor, mode: str) -> Tensor:
    if mode == "add":
        return ad.add(logits, a_spm)
    if mode == "mul":
        return ad.matmul(logits, a_spm)
    if mode == "hadamard":
        return ad.mul(logits, a_spm)
    if mode == "off":
        return logits
    raise ValueError(f"unknown spm mode {mode!r}")


def _check_inputs(layer: AttentionLayer, x: Tensor, a_spm: Tensor) -> None:
    n = x.rows
    if x.cols != layer.d or a_spm.shape != (n, n):
        raise ad.ContractError(
            f"attention expects X (N, {layer.d}) and A_spm (N, N); got {x.shape} and {a_spm.shape}"
        )


def gsa_forward(layer: AttentionLayer, x: Tensor, a_spm: Tensor, mode: str = "add"):
    """Geometry-guided attention; returns the attended features and the attention matrix."""
    _check_inputs(layer, x, a_spm)
    attn = ad.row_softmax(combine_spm(layer.logits(x), a_spm, mode))
    return ad.matmul(attn, ad.matmul(x, layer.w_v)), attn


def counterfactual_logits(factual: np.ndarray, policy: str, rng: np.random.Generator | None = None) -> np.ndarray:
    """The hypothetical attention logits that replace the learned ones."""
    if policy == "zero":
        return np.zeros_like(factual)
    if policy == "mean":
        return np.full_like(factual, factual.mean())
    if policy == "random":
        if rng is None:
            rng = np.random.default_rng(0)
        return rng.normal(factual.mean(), factual.std(), size=factual.shape)
    raise ValueError(f"unknown counterfactual policy {policy!r}")


def csa_forward(
    layer: AttentionLayer,
    x: Tensor,
    a_spm: Tensor,
    policy: str = "zero",
    mode: str = "add",
    rng: np.random.Generator | None = None,
):
    """Counterfactual attention: learned logits are swapped for a policy-drawn constant."""
    _check_inputs(layer, x, a_spm)
    if policy == "zero":
        hypo = np.zeros((x.rows, x.rows))
    else:
        with ad.no_tape():
            factual = layer.logits(x).value
        hypo = counterfactual_logits(factual, policy, rng)
    attn = ad.row_softmax(combine_spm(Tensor(hypo), a_spm, mode))
    return ad.matmul(attn, ad.matmul(x, layer.w_v)), attn


def lal_forward(layer: AttentionLayer, x: Tensor, a_spm: Tensor, mode: str = "add") -> Tensor:
    attended, _ = gsa_forward(layer, x, a_spm, mode)
    return layer.wrap(x, attended)


def cil_forward(
    layer: AttentionLayer,
    x: Tensor,
    a_spm: Tensor,
    policy: str = "zero",
    mode: str = "add",
    rng: np.random.Generator | None = None,
) -> Tensor:
    attended, _ = csa_forward(layer, x, a_spm, policy, mode, rng)
    return layer.wrap(x, attended)


class EdgeHead:
    """Start/end projections, then a pairwise scorer over every ordered lane pair."""

    def __init__(self, init: _Init, d: int, name: str = "edge"):
        self.mlp_s = MLP(init, [d, d, d, d], f"{name}.mlp_s")
        self.mlp_e = MLP(init, [d, d, d, d], f"{name}.mlp_e")
        # first layer of the pair scorer acting on concat(x_s, x_e), split by halves
        pair = init.weight(2 * d, d, f"{name}.pair.weight")
        self.pair_s = Parameter(pair.value[:d], name=f"{name}.pair.weight_s")
        self.pair_e = Parameter(pair.value[d:], name=f"{name}.pair.weight_e")
        self.pair_b = init.bias(d, f"{name}.pair.bias")
        self.out = Linear(init, d, 1, f"{name}.out")

    def parameters(self):
        return [*self.mlp_s.parameters(), *self.mlp_e.parameters(), self.pair_s, self.pair_e, self.pair_b, *self.out.parameters()]

    def logits(self, x: Tensor) -> Tensor:
        n = x.rows
        s = ad.matmul(self.mlp_s(x), self.pair_s)
        e = ad.matmul(self.mlp_e(x), self.pair_e)
        h = ad.relu(ad.add(ad.pair_sum(s, e), self.pair_b))
        return ad.reshape(self.out(h), n, n)

    @staticmethod
    def scores(logits: Tensor) -> Tensor:
        return ad.mul(ad.sigmoid(logits), Tensor(1.0 - np.eye(logits.rows)))

    def __call__(self, x: Tensor) -> Tensor:
        return self.scores(self.logits(x))


def edge_head_forward(head: EdgeHead, x_tilde: Tensor) -> Tensor:
    return head(x_tilde)


class LaneHead:
    """Class logits plus centerline points.

    ``reg_mode="refine"`` predicts an offset added to the query's own detected
    points (zero-initialized, so an untrained head returns the detection);
    ``"absolute"`` regresses normalized coordinates directly.
    """

    def __init__(self, init: _Init, d: int, n_points: int, name: str = "lane", reg_mode: str = "refine"):
        prior = -math.log((1 - 0.01) / 0.01)
        self.reg_mode = reg_mode
        self.cls = MLP(init, [d, d, d, NUM_CLASSES], f"{name}.cls", out_bias=prior)
        self.reg = MLP(init, [d, d, d, 3 * n_points], f"{name}.reg", out_bias=0.0 if reg_mode == "refine" else 0.5)
        if reg_mode == "refine":
            self.reg.layers[-1].weight.assign(np.zeros((d, 3 * n_points)))

    def points(self, x: Tensor, reference: Tensor | None) -> Tensor:
        out = self.reg(x)
        if self.reg_mode == "absolute":
            return out
        if reference is None or reference.shape != out.shape:
            raise ad.ContractError("reg_mode='refine' needs reference points of shape N x 3l")
        return ad.add(out, reference)

    def parameters(self):
        return [*self.cls.parameters(), *self.reg.parameters()]


@dataclass
class ForwardOutput:
    x_tilde: Tensor
    e_a: Tensor
    e_cf_samples: list[Tensor]
    cls_logits: Tensor
    reg_points: Tensor
    e_a_logits: Tensor
    e_cf_logit_samples: list[Tensor]
    attentions: dict[str, Tensor] = field(default_factory=dict)
    x_cf: list[Tensor] = field(default_factory=list)

    @property
    def e_cf(self) -> Tensor:
        if len(self.e_cf_samples) == 1:
            return self.e_cf_samples[0]
        acc = self.e_cf_samples[0]
        for t in self.e_cf_samples[1:]:
            acc = ad.add(acc, t)
        return ad.scale(acc, 1.0 / len(self.e_cf_samples))


class TopoFormer:
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        init = _Init(cfg.seed)
        self.input_proj = Linear(init, cfg.d_in, cfg.d, "input_proj")
        self.blocks = [
            (LalLayer(init, cfg, f"block{b}.lal"), CilLayer(init, cfg, f"block{b}.cil"))
            for b in range(cfg.n_blocks)
        ]
        self.edge_head = EdgeHead(init, cfg.d)
        self.lane_head = LaneHead(init, cfg.d, cfg.n_points, reg_mode=cfg.reg_mode)

    def parameters(self) -> dict[str, Parameter]:
        ps = [*self.input_proj.parameters()]
        for lal, cil in self.blocks:
            ps += lal.parameters() + cil.parameters()
        ps += self.edge_head.parameters() + self.lane_head.parameters()
        out = {p.name: p for p in ps}
        if len(out) != len(ps):
            raise AssertionError("duplicate parameter names")
        return out

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    def spm(self, centerlines) -> Tensor:
        return spm(centerlines, SpmConfig(self.cfg.spm_epsilon, self.cfg.spm_distance))

    def forward(self, sample: DetectionSample, step: int = 0, counterfactual: bool = True) -> ForwardOutput:
        queries = sample.queries
        if queries.shape[1] != self.cfg.d_in:
            raise ad.ContractError(f"sample features have width {queries.shape[1]}, model expects {self.cfg.d_in}")
        if queries.shape[0] > self.cfg.max_queries:
            raise ad.ContractError(f"{queries.shape[0]} queries exceed max_queries={self.cfg.max_queries}")
        return self.forward_features(
            Tensor(queries), self.spm(sample.pred_centerlines), step, counterfactual, reference_points(sample)
        )

    def forward_features(
        self,
        queries: Tensor,
        a_spm: Tensor,
        step: int = 0,
        counterfactual: bool = True,
        reference: Tensor | None = None,
    ) -> ForwardOutput:
        cfg = self.cfg
        mode = cfg.spm_mode
        x0 = self.input_proj(queries)
        attns: dict[str, Tensor] = {}

        x = x0
        first_lal = None
        for b, (lal, cil) in enumerate(self.blocks):
            att, attns[f"block{b}.lal"] = gsa_forward(lal, x, a_spm, mode)
            x = lal.wrap(x, att)
            if b == 0:
                first_lal = x
            att, attns[f"block{b}.cil"] = gsa_forward(cil, x, a_spm, mode)
            x = cil.wrap(x, att)
        e_a_logits = self.edge_head.logits(x)
        e_a = EdgeHead.scores(e_a_logits)

        cf_samples: list[Tensor] = []
        cf_logits: list[Tensor] = []
        x_cfs: list[Tensor] = []
        if cfg.cil_mode == "off" or not counterfactual:
            cf_samples.append(e_a)
            cf_logits.append(e_a_logits)
        else:
            n_samples = cfg.n_cf_samples if cfg.cil_mode == "random" else 1
            for k in range(n_samples):
                xc = x0
                for b, (lal, cil) in enumerate(self.blocks):
                    # the first aggregation layer sees identical inputs in both branches
                    xc = first_lal if b == 0 else lal_forward(lal, xc, a_spm, mode)
                    rng = np.random.default_rng([cfg.seed, step, b, k])
                    att, attns[f"block{b}.cil.cf{k}"] = csa_forward(cil, xc, a_spm, cfg.cil_mode, mode, rng)
                    xc = cil.wrap(xc, att)
                x_cfs.append(xc)
                lg = self.edge_head.logits(xc)
                cf_logits.append(lg)
                cf_samples.append(EdgeHead.scores(lg))

        return ForwardOutput(
            x_tilde=x,
            e_a=e_a,
            e_cf_samples=cf_samples,
            cls_logits=self.lane_head.cls(x),
            reg_points=self.lane_head.points(x, reference),
            e_a_logits=e_a_logits,
            e_cf_logit_samples=cf_logits,
            attentions=attns,
            x_cf=x_cfs,
        )

    # ------------------------------------------------------------ checkpoints

    def save(self, path, extra: dict | None = None, arrays: dict[str, np.ndarray] | None = None) -> None:
        meta = {"checkpoint_version": CHECKPOINT_VERSION, "model_config": asdict(self.cfg), "extra": extra or {}}
        payload = {f"param/{k}": p.value for k, p in self.parameters().items()}
        for k, v in (arrays or {}).items():
            payload[f"array/{k}"] = v
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("wb") as fh:
            np.savez(fh, __meta__=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8), **payload)

    @classmethod
    def load(cls, path):
        """Returns ``(model, extra, arrays)``."""
        with np.load(Path(path), allow_pickle=False) as data:
            meta = json.loads(bytes(data["__meta__"]).decode())
            if meta.get("checkpoint_version") != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {meta.get('checkpoint_version')}")
            model = cls(ModelConfig(**meta["model_config"]))
            params = model.parameters()
            for k, p in params.items():
                p.assign(data[f"param/{k}"])
            arrays = {k[len("array/"):]: data[k].copy() for k in data.files if k.startswith("array/")}
        return model, meta["extra"], arrays


def reference_points(sample: DetectionSample) -> Tensor:
    """Normalized detected points, one flattened row per query."""
    if not sample.pred_centerlines:
        return Tensor(np.zeros((0, 0)))
    return Tensor(np.stack([normalize_points(c.points, sample.bev_extent).reshape(-1) for c in sample.pred_centerlines]))


def model_forward(model: TopoFormer, sample: DetectionSample, step: int = 0) -> ForwardOutput:
    return model.forward(sample, step)


@dataclass
class Inference:
    graph: SceneGraph
    confidences: np.ndarray  # max class probability per kept node
    class_probs: np.ndarray  # (kept, NUM_CLASSES)
    edge_scores: np.ndarray  # E_A restricted to kept nodes
    query_index: np.ndarray  # kept node -> query row


def decode_nodes(out: ForwardOutput, sample: DetectionSample, node_threshold: float) -> tuple[np.ndarray, np.ndarray, list[Lane]]:
    probs = 1.0 / (1.0 + np.exp(-out.cls_logits.value))
    keep = np.flatnonzero(probs.max(axis=1) >= node_threshold)
    lanes = []
    for q in keep:
        pts = denormalize_points(out.reg_points.value[q].reshape(-1, 3), sample.bev_extent)
        lanes.append(Lane(LANE_CATEGORIES[int(np.argmax(probs[q]))], Centerline(pts)))
    return keep, probs, lanes


def infer(
    model: TopoFormer,
    sample: DetectionSample,
    edge_threshold: float = 0.5,
    node_threshold: float = 0.3,
) -> Inference:
    """Scene graph from the factual edge scores only; the counterfactual branch is never run."""
    if not 0.0 <= edge_threshold <= 1.0:
        raise ValueError("edge_threshold must lie in [0, 1]")
    out = model.forward(sample, counterfactual=False)
    return infer_from_output(out, sample, edge_threshold, node_threshold)


def infer_from_output(out: ForwardOutput, sample, edge_threshold: float = 0.5, node_threshold: float = 0.3) -> Inference:
    keep, probs, lanes = decode_nodes(out, sample, node_threshold)
    scores = out.e_a.value[np.ix_(keep, keep)].copy()
    np.fill_diagonal(scores, 0.0)
    hits = np.argwhere(scores >= edge_threshold)
    edges = frozenset((int(i), int(j)) for i, j in hits if i != j)
    graph = SceneGraph(tuple(lanes), edges)
    assert not validate(graph)
    return Inference(
        graph=graph,
        confidences=probs[keep].max(axis=1) if len(keep) else np.zeros(0),
        class_probs=probs[keep],
        edge_scores=scores,
        query_index=keep,
    )
