"""Model assembly: parameter construction, the full forward pass, ablation
routing, per-task losses, and prediction."""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .tensor import Tensor
from . import decoders, graphs, interactions
from .decoders import TASKS, TaskError
from .interactions import InteractionTrace
from .layers import BiGRUEncoder, GCNStack, LinearLayer, ParamRegistry

ABLATIONS = (
    "no_appearance", "no_motion",
    "no_q2a", "no_q2m", "no_q2v",
    "no_a2m", "no_m2a", "no_v2v",
    "no_bridge",
)


@dataclass
class ModelConfig:
    task: str
    feature_dim: int
    num_labels: int = 0
    num_candidates: int = 0
    count_min: int = 1
    count_max: int = 10
    embed_dim: int = 300
    d_model: int = 512
    d_fuse: int = 0          # 0 -> d_model // 2
    gcn_depth: int = 2
    lam: float = 10.0
    precision: str = "f32"
    seed: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.d_fuse == 0:
            self.d_fuse = self.d_model // 2
        if self.task == "open_ended" and self.num_labels < 2:
            raise ValueError("open_ended needs num_labels >= 2")
        if self.task == "multi_choice" and self.num_candidates < 2:
            raise ValueError("multi_choice needs num_candidates >= 2")
        if self.gcn_depth < 1:
            raise ValueError("gcn_depth must be >= 1")
        if self.precision not in ("f32", "f64"):
            raise ValueError(f"precision must be f32 or f64, got {self.precision!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class ForwardPass:
    o: Tensor                      # fused visual vector, 2*d_fuse
    u_bar: Tensor                  # mean question row, d_model
    question: Tensor               # encoded question rows, K x d_model
    v_f: Tensor | None             # final appearance nodes, L x d_fuse
    m_f: Tensor | None             # final motion nodes, N x d_fuse
    trace: InteractionTrace


def check_ablations(ablations) -> frozenset:
    abl = frozenset(ablations)
    unknown = abl - set(ABLATIONS)
    if unknown:
        raise ValueError(f"unknown ablation flags: {sorted(unknown)}")
    return abl


class Model:
    """The full network. Parameters live in a ParamRegistry keyed by symbol
    name; layer creation order is fixed so a given seed always produces the
    same initialization."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.params = ParamRegistry()
        rng = np.random.default_rng(config.seed)
        d = config.d_model
        df = config.d_fuse
        dt = config.precision
        gcn_dims = [d] * (config.gcn_depth + 1)

        reg = self.params
        self.proj_v = LinearLayer(reg, "W_pv", config.feature_dim, d, rng, dt)
        self.proj_m = LinearLayer(reg, "W_pm", config.feature_dim, d, rng, dt)
        self.encoder = BiGRUEncoder(reg, config.embed_dim, d, rng, dt)

        self.fc_f_v = LinearLayer(reg, "W_f_v", d, d, rng, dt, activation="relu")
        self.fc_f_m = LinearLayer(reg, "W_f_m", d, d, rng, dt, activation="relu")
        self.gcn_g_v = GCNStack(reg, "W_g_v", gcn_dims, rng, dt)
        self.gcn_g_m = GCNStack(reg, "W_g_m", gcn_dims, rng, dt)
        self.gcn_gb_v = GCNStack(reg, "W_gb_v", gcn_dims, rng, dt)
        self.gcn_gb_m = GCNStack(reg, "W_gb_m", gcn_dims, rng, dt)
        self.fc_b_v = LinearLayer(reg, "W_b_v", d, df, rng, dt, activation="relu")
        self.fc_b_m = LinearLayer(reg, "W_b_m", d, df, rng, dt, activation="relu")
        self.fc_wob_v = LinearLayer(reg, "W_wob_v", d, df, rng, dt, activation="relu")
        self.fc_wob_m = LinearLayer(reg, "W_wob_m", d, df, rng, dt, activation="relu")
        # Stand-in projections keep decoder shapes when one delivery leg is off.
        self.fc_only_v = LinearLayer(reg, "W_only_v", d, df, rng, dt, activation="relu")
        self.fc_only_m = LinearLayer(reg, "W_only_m", d, df, rng, dt, activation="relu")

        if config.task in ("open_ended", "count"):
            self.w1 = LinearLayer(reg, "W_1", d, d, rng, dt)
            self.w2 = LinearLayer(reg, "W_2", 2 * df + d, d, rng, dt, activation="relu")
            self.wy = LinearLayer(reg, "W_y", d, df, rng, dt, activation="relu")
            if config.task == "open_ended":
                self.wyp = LinearLayer(reg, "W_yp", df, config.num_labels, rng, dt)
            else:
                self.wc = LinearLayer(reg, "W_c", df, 1, rng, dt)
        else:
            self.ww = LinearLayer(reg, "W_w", d, d, rng, dt)
            self.wa = LinearLayer(reg, "W_a", d, d, rng, dt)
            self.wy_mc = LinearLayer(reg, "W_y_mc", 2 * (2 * df) + 2 * d, d, rng, dt,
                                     activation="relu")
            self.wyp_mc = LinearLayer(reg, "W_yp_mc", d, 1, rng, dt)

    # -- encoding -----------------------------------------------------------

    def _const(self, arr: np.ndarray) -> Tensor:
        return Tensor(arr, dtype=self.config.precision)

    def encode_question(self, embeddings: np.ndarray) -> Tensor:
        return self.encoder.encode(self._const(embeddings))

    # -- interaction pipeline ------------------------------------------------

    def interact(self, v_hat: Tensor | None, m_hat: Tensor | None, u: Tensor,
                 edges, abl: frozenset):
        """Run Q2V then V2V under the given ablation set.

        Returns (v_f, m_f, trace); a stream that is ablated away comes back
        as None and its pooled vector is zero-filled downstream.
        """
        lam = self.config.lam
        trace = InteractionTrace()

        v_tilde = m_tilde = None
        if v_hat is not None:
            if {"no_q2a", "no_q2v"} & abl:
                v_tilde = v_hat
            else:
                w_v = graphs.visual_edge_weights(v_hat, lam)
                v_tilde, s_v = interactions.q2v_interaction(
                    v_hat, u, w_v, self.fc_f_v, self.gcn_g_v, lam)
                trace.s_v = s_v.data.copy()
        if m_hat is not None:
            if {"no_q2m", "no_q2v"} & abl:
                m_tilde = m_hat
            else:
                w_m = graphs.visual_edge_weights(m_hat, lam)
                m_tilde, s_m = interactions.q2v_interaction(
                    m_hat, u, w_m, self.fc_f_m, self.gcn_g_m, lam)
                trace.s_m = s_m.data.copy()

        v_f = m_f = None
        both = v_tilde is not None and m_tilde is not None
        if both and "no_v2v" not in abl:
            bridged = "no_bridge" not in abl
            w_q = None
            if bridged:
                w_q, _, _ = graphs.build_question_graph(u, edges, lam)
            if "no_m2a" not in abl:
                if bridged:
                    u_hat_b_m, attn = interactions.bridge_aggregate(
                        u, m_tilde, w_q, self.gcn_gb_m, lam)
                    v_f, s_b_v = interactions.v2v_deliver(
                        v_tilde, u_hat_b_m, self.fc_b_v, lam)
                    trace.bridge_m = attn.data.copy()
                else:
                    v_f, s_b_v = interactions.v2v_no_bridge(
                        v_tilde, m_tilde, self.fc_wob_v, lam)
                trace.s_b_v = s_b_v.data.copy()
            if "no_a2m" not in abl:
                if bridged:
                    u_hat_b_v, attn = interactions.bridge_aggregate(
                        u, v_tilde, w_q, self.gcn_gb_v, lam)
                    m_f, s_b_m = interactions.v2v_deliver(
                        m_tilde, u_hat_b_v, self.fc_b_m, lam)
                    trace.bridge_v = attn.data.copy()
                else:
                    m_f, s_b_m = interactions.v2v_no_bridge(
                        m_tilde, v_tilde, self.fc_wob_m, lam)
                trace.s_b_m = s_b_m.data.copy()

        # Any leg not produced above falls back to a plain projection so the
        # decoder always sees d_fuse-wide nodes.
        if v_f is None and v_tilde is not None:
            v_f = self.fc_only_v.forward(v_tilde)
        if m_f is None and m_tilde is not None:
            m_f = self.fc_only_m.forward(m_tilde)
        return v_f, m_f, trace

    def _pipeline(self, appearance: np.ndarray, motion: np.ndarray,
                  embeddings: np.ndarray, edges, abl: frozenset) -> ForwardPass:
        u = self.encode_question(embeddings)
        u_bar = T.mean_axis(u, 0)
        v_hat = None if "no_appearance" in abl else self.proj_v.forward(self._const(appearance))
        m_hat = None if "no_motion" in abl else self.proj_m.forward(self._const(motion))
        v_f, m_f, trace = self.interact(v_hat, m_hat, u, edges, abl)

        zero = Tensor(np.zeros(self.config.d_fuse), dtype=self.config.precision)
        v_bar = T.mean_axis(v_f, 0) if v_f is not None else zero
        m_bar = T.mean_axis(m_f, 0) if m_f is not None else zero
        o = T.concat_last([v_bar, m_bar])
        return ForwardPass(o, u_bar, u, v_f, m_f, trace)

    def forward(self, sample, ablations=()) -> ForwardPass:
        """Full question-conditioned pass over one sample."""
        abl = check_ablations(ablations)
        return self._pipeline(sample.appearance, sample.motion,
                              sample.embeddings, sample.edges, abl)

    # -- task heads ----------------------------------------------------------

    def _require_task(self, task: str) -> None:
        if self.config.task != task:
            raise TaskError(f"model decodes {self.config.task!r}, sample is {task!r}")

    def open_ended_probs(self, sample, ablations=()) -> Tensor:
        self._require_task("open_ended")
        fp = self.forward(sample, ablations)
        return decoders.open_ended_decode(fp.o, fp.u_bar, self.w1, self.w2,
                                          self.wy, self.wyp)

    def count_raw(self, sample, ablations=()) -> Tensor:
        self._require_task("count")
        fp = self.forward(sample, ablations)
        return decoders.count_decode(fp.o, fp.u_bar, self.w1, self.w2,
                                     self.wy, self.wc)

    def candidate_scores(self, sample, ablations=()) -> list[Tensor]:
        """One pipeline pass per candidate, conditioned like the question."""
        self._require_task("multi_choice")
        abl = check_ablations(ablations)
        fp_q = self._pipeline(sample.appearance, sample.motion,
                              sample.embeddings, sample.edges, abl)
        scores = []
        for cand in sample.candidates:
            u_a = self.encode_question(cand.embeddings)
            a_bar = T.mean_axis(u_a, 0)
            v_hat = (None if "no_appearance" in abl
                     else self.proj_v.forward(self._const(sample.appearance)))
            m_hat = (None if "no_motion" in abl
                     else self.proj_m.forward(self._const(sample.motion)))
            v_f, m_f, _ = self.interact(v_hat, m_hat, u_a, cand.edges, abl)
            zero = Tensor(np.zeros(self.config.d_fuse), dtype=self.config.precision)
            v_bar = T.mean_axis(v_f, 0) if v_f is not None else zero
            m_bar = T.mean_axis(m_f, 0) if m_f is not None else zero
            o_a = T.concat_last([v_bar, m_bar])
            scores.append(decoders.multichoice_score(
                fp_q.o, o_a, fp_q.u_bar, a_bar,
                self.ww, self.wa, self.wy_mc, self.wyp_mc))
        return scores

    # -- losses and predictions ----------------------------------------------

    def loss(self, sample, ablations=()) -> Tensor:
        task = self.config.task
        if task == "open_ended":
            return decoders.cross_entropy_loss(
                self.open_ended_probs(sample, ablations), sample.answer)
        if task == "count":
            return decoders.mse_loss(self.count_raw(sample, ablations),
                                     float(sample.answer))
        return decoders.hinge_loss(self.candidate_scores(sample, ablations),
                                   sample.answer)

    def predict(self, sample, ablations=()):
        """Predicted answer; multi-choice also returns the score vector."""
        task = self.config.task
        if task == "open_ended":
            return int(np.argmax(self.open_ended_probs(sample, ablations).data))
        if task == "count":
            raw = self.count_raw(sample, ablations).item()
            return decoders.round_count(raw, self.config.count_min, self.config.count_max)
        scores = [s.item() for s in self.candidate_scores(sample, ablations)]
        return decoders.select_answer(scores), scores

    # -- parameter plumbing ---------------------------------------------------

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.params.items()}

    def load_param_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        mine = set(self.params.names())
        theirs = set(arrays)
        if mine != theirs:
            missing = sorted(mine - theirs)
            extra = sorted(theirs - mine)
            raise ValueError(f"parameter set mismatch: missing {missing}, extra {extra}")
        for name, t in self.params.items():
            arr = arrays[name]
            if arr.shape != t.shape:
                raise ValueError(
                    f"parameter {name}: shape {arr.shape} != expected {t.shape}")
            t.data = np.ascontiguousarray(arr.astype(t.data.dtype, copy=False)).copy()
