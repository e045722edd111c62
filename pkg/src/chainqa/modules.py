"""Select, Chain, and Predict modules and their fixed multi-step wiring.

The layout mirrors the wiring of the inference diagram: the question and
background are each pooled by a Select, a Chain reads the background with the
question summary as its query, a second Chain reads the situation with
everything gathered so far (including the token or span being scored), and
Predict maps the concatenated module outputs to r scores.  r=2 scores tokens
as span start/end; r=1 scores reranker candidates.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError, InputError
from .text import EncodedInput, Region, region_view

Q_SELECT = "Q-SELECT"
B_SELECT = "B-SELECT"
B_CHAIN = "B-CHAIN"
S_CHAIN = "S-CHAIN"
MODULE_IDS = (Q_SELECT, B_SELECT, B_CHAIN, S_CHAIN)


@dataclass(frozen=True)
class LayoutConfig:
    """Which modules run, their attention head count, width, and output arity."""

    modules: tuple = MODULE_IDS
    heads: int = 8
    r: int = 2
    width: int = 64
    # Alternative reading of the wiring: the background Chain's query also
    # sees the background Select output, not just the question Select.
    chain_query_includes_b_select: bool = False

    def __post_init__(self):
        if self.r not in (1, 2):
            raise ConfigurationError(f"r must be 1 or 2, got {self.r}")
        if len(set(self.modules)) != len(self.modules):
            raise ConfigurationError("duplicate module in layout")
        for m in self.modules:
            if m not in MODULE_IDS:
                raise ConfigurationError(f"unknown module {m!r}")
        if self.heads < 1 or self.width % self.heads != 0:
            raise ConfigurationError(
                f"heads={self.heads} must divide module width {self.width}")
        if S_CHAIN in self.modules and not any(m in self.modules for m in (Q_SELECT, B_SELECT, B_CHAIN)):
            raise ConfigurationError(f"{S_CHAIN} requires at least one upstream module")

    def b_chain_sources(self) -> tuple:
        if self.chain_query_includes_b_select:
            return (B_SELECT, Q_SELECT)
        return (Q_SELECT,)

    def effective_modules(self) -> tuple:
        """Enabled modules minus those whose query inputs all vanished.

        The background Chain is query-driven by upstream Selects; removing all
        of them transitively disables it.  The situation Chain always keeps
        the token/span representation in its query, so it never vanishes.
        """
        effective = set(self.modules)
        changed = True
        while changed:
            changed = False
            if B_CHAIN in effective and not any(s in effective for s in self.b_chain_sources()):
                effective.discard(B_CHAIN)
                changed = True
        return tuple(m for m in MODULE_IDS if m in effective)

    def ablate(self, module: str) -> "LayoutConfig":
        """Remove one module; downstream maps must be re-instantiated."""
        if module not in self.modules:
            raise ConfigurationError(f"{module} is not enabled in this layout")
        remaining = tuple(m for m in self.modules if m != module)
        if not remaining:
            raise ConfigurationError("cannot remove the last module feeding the predictor")
        return replace(self, modules=remaining)


def ablate(layout: LayoutConfig, module: str) -> LayoutConfig:
    return layout.ablate(module)


class InferenceTrace:
    """Per-example attention record: module id -> distribution over tokens.

    Select and background-Chain entries hold one distribution; the situation
    Chain holds one distribution per scored token/candidate (stored as a
    matrix).  Absent modules (empty background) are recorded as None.
    """

    def __init__(self):
        self.records: dict[str, tuple[list[int], np.ndarray] | None] = {}

    def record(self, module_id: str, token_indices: list[int], dist: np.ndarray) -> None:
        self.records[module_id] = (list(token_indices), np.asarray(dist))

    def mark_absent(self, module_id: str) -> None:
        self.records[module_id] = None

    def distributions(self) -> list[np.ndarray]:
        out = []
        for rec in self.records.values():
            if rec is None:
                continue
            _, dist = rec
            if dist.ndim == 1:
                out.append(dist)
            else:
                out.extend(dist)
        return out

    def dump_lines(self, example_id: str) -> list[str]:
        """Line-oriented dump: example id, module id, index:weight pairs.

        Multi-query records (situation Chain) are summarized by their mean
        distribution, which is itself a distribution.
        """
        lines = []
        for module_id in MODULE_IDS:
            rec = self.records.get(module_id)
            if rec is None:
                if module_id in self.records:
                    lines.append(f"{example_id}\t{module_id}\tabsent")
                continue
            indices, dist = rec
            flat = dist if dist.ndim == 1 else dist.mean(axis=0)
            pairs = " ".join(f"{k}:{w!r}" for k, w in zip(indices, flat))
            lines.append(f"{example_id}\t{module_id}\t{pairs}")
        return lines


class SelectModule:
    """Attention-pool a token sequence into one vector via a learned scorer."""

    def __init__(self, width: int, rng: np.random.Generator, name: str):
        self.width = width
        self.w = T.init_weight(rng, f"{name}/w", width, 1)
        self.b = T.init_bias(f"{name}/b", 1)

    def parameters(self):
        return [self.w, self.b]

    def forward(self, x: T.Tensor) -> tuple[T.Tensor, np.ndarray]:
        """Weighted sum of rows; returns ([1, width], weights[n])."""
        if x is None or x.shape[0] == 0:
            raise InputError("select applied to an empty region")
        scores = T.linear(x, self.w.tensor, self.b.tensor)  # [n, 1]
        weights = T.softmax(T.col(scores, 0))  # [n]
        pooled = T.matmul(_as_row(weights), x)  # [1, width]
        return pooled, weights.detach()


def _as_row(v: T.Tensor) -> T.Tensor:
    """View a 1-D tensor as a [1, n] row without breaking the tape."""
    out_data = v.data.reshape(1, -1)

    def backward(out: T.Tensor) -> None:
        if v.requires_grad:
            v.accumulate_grad(out.grad.reshape(v.data.shape))

    return T._result(out_data, (v,), backward)


class ChainModule:
    """Single-query multi-head attention over a passage.

    The query is a learned projection of the concatenated upstream vectors;
    keys and values are the passage's token vectors.
    """

    def __init__(self, input_widths: list[int], z_width: int, heads: int,
                 rng: np.random.Generator, name: str):
        self.input_widths = list(input_widths)
        self.z_width = z_width
        self.heads = heads
        total = sum(input_widths)
        self.g_w = T.init_weight(rng, f"{name}/g_w", total, z_width)
        self.g_b = T.init_bias(f"{name}/g_b", z_width)

    def parameters(self):
        return [self.g_w, self.g_b]

    def _check_widths(self, xs) -> None:
        widths = [x.shape[1] for x in xs]
        if widths != self.input_widths:
            raise DimensionError(
                f"chain query widths {widths} do not match configured {self.input_widths}")

    def query(self, xs: list[T.Tensor]) -> T.Tensor:
        if not xs:
            raise InputError("chain requires at least one query input")
        self._check_widths(xs)
        return T.linear(T.concat(xs, axis=1), self.g_w.tensor, self.g_b.tensor)

    def query_rows(self, shared: list[T.Tensor], per_row: T.Tensor) -> T.Tensor:
        """Batched queries: shared [1, w] slots plus one [n, w] slot (the last)."""
        self._check_widths(shared + [per_row])
        q = None
        offset = 0
        for part in shared + [per_row]:
            w_slot = T.row_slice(self.g_w.tensor, offset, offset + part.shape[1])
            term = T.matmul(part, w_slot)
            q = term if q is None else T.add(q, term)
            offset += part.shape[1]
        return T.add(q, self.g_b.tensor)

    def forward(self, xs: list[T.Tensor], z: T.Tensor) -> tuple[T.Tensor, np.ndarray]:
        """Chain([x_0..x_n], z) -> ([1, z_width], head-mean weights[m])."""
        if z is None or z.shape[0] == 0:
            raise InputError("chain applied to an empty region")
        out, weights = T.attention_with_weights(self.query(xs), z, z, heads=self.heads)
        return out, weights.mean(axis=0)[0]

    def attend_rows(self, queries: T.Tensor, z: T.Tensor) -> tuple[T.Tensor, np.ndarray]:
        if z is None or z.shape[0] == 0:
            raise InputError("chain applied to an empty region")
        out, weights = T.attention_with_weights(queries, z, z, heads=self.heads)
        return out, weights.mean(axis=0)


class PredictModule:
    """Linear scorer over the concatenation of all module outputs."""

    def __init__(self, input_widths: list[int], r: int, rng: np.random.Generator, name: str):
        self.input_widths = list(input_widths)
        self.r = r
        total = sum(input_widths)
        self.w = T.init_weight(rng, f"{name}/w", total, r)
        self.b = T.init_bias(f"{name}/b", r)

    def parameters(self):
        return [self.w, self.b]

    def forward(self, ys: list[T.Tensor]) -> T.Tensor:
        if not ys:
            raise InputError("predict requires at least one input")
        widths = [y.shape[1] for y in ys]
        if widths != self.input_widths:
            raise DimensionError(
                f"predict input widths {widths} do not match configured {self.input_widths}")
        return T.linear(T.concat(ys, axis=1), self.w.tensor, self.b.tensor)

    def forward_rows(self, slots: list[T.Tensor]) -> T.Tensor:
        """Slot-wise evaluation where slots may be [1, w] or [n, w]."""
        widths = [s.shape[1] for s in slots]
        if widths != self.input_widths:
            raise DimensionError(
                f"predict input widths {widths} do not match configured {self.input_widths}")
        out = None
        offset = 0
        for part in slots:
            w_slot = T.row_slice(self.w.tensor, offset, offset + part.shape[1])
            term = T.matmul(part, w_slot)
            out = term if out is None else T.add(out, term)
            offset += part.shape[1]
        return T.add(out, self.b.tensor)


class MSInference:
    """The fixed multi-step layout over an encoded input.

    With r=2 it produces per-token start/end scores; with r=1 it scores span
    candidates represented by their end-point concatenation [x_i; x_j].
    """

    def __init__(self, layout: LayoutConfig, rng: np.random.Generator,
                 x_width: int | None = None, prefix: str = "ms"):
        self.layout = layout
        d = layout.width
        self.x_width = x_width if x_width is not None else (d if layout.r == 2 else 2 * d)
        self.effective = layout.effective_modules()

        self.select_q = self.select_b = self.chain_b = self.chain_s = None
        if Q_SELECT in self.effective:
            self.select_q = SelectModule(d, rng, f"{prefix}/select_q")
        if B_SELECT in self.effective:
            self.select_b = SelectModule(d, rng, f"{prefix}/select_b")
        if B_CHAIN in self.effective:
            srcs = [m for m in self.layout.b_chain_sources() if m in self.effective]
            self.b_chain_inputs = srcs
            self.chain_b = ChainModule([d] * len(srcs), d, layout.heads, rng, f"{prefix}/chain_b")
        upstream = [m for m in (B_SELECT, B_CHAIN, Q_SELECT) if m in self.effective]
        self.upstream = upstream
        if S_CHAIN in self.effective:
            self.chain_s = ChainModule([d] * len(upstream) + [self.x_width], d,
                                       layout.heads, rng, f"{prefix}/chain_s")
        predict_widths = [d] * len(upstream) + [self.x_width]
        if S_CHAIN in self.effective:
            predict_widths.append(d)
        self.predict = PredictModule(predict_widths, layout.r, rng, f"{prefix}/predict")

    def parameters(self) -> list[T.Parameter]:
        params = []
        for mod in (self.select_q, self.select_b, self.chain_b, self.chain_s, self.predict):
            if mod is not None:
                params.extend(mod.parameters())
        return params

    def _upstream_outputs(self, enc: EncodedInput, trace: InferenceTrace | None):
        d = self.layout.width
        zeros = lambda: T.Tensor(np.zeros((1, d)))
        outs: dict[str, T.Tensor] = {}

        q_view, q_idx = region_view(enc, Region.QUESTION)
        b_view, b_idx = region_view(enc, Region.BACKGROUND)

        if self.select_q is not None:
            outs[Q_SELECT], w = self.select_q.forward(q_view), None
            outs[Q_SELECT], w = outs[Q_SELECT]
            if trace is not None:
                trace.record(Q_SELECT, q_idx, w)
        if self.select_b is not None:
            if b_view is None:
                outs[B_SELECT] = zeros()
                if trace is not None:
                    trace.mark_absent(B_SELECT)
            else:
                outs[B_SELECT], w = self.select_b.forward(b_view)
                if trace is not None:
                    trace.record(B_SELECT, b_idx, w)
        if self.chain_b is not None:
            if b_view is None:
                outs[B_CHAIN] = zeros()
                if trace is not None:
                    trace.mark_absent(B_CHAIN)
            else:
                query_inputs = [outs[m] for m in self.b_chain_inputs]
                outs[B_CHAIN], w = self.chain_b.forward(query_inputs, b_view)
                if trace is not None:
                    trace.record(B_CHAIN, b_idx, w)
        return outs

    def _scores_for_rows(self, enc: EncodedInput, x_rows: T.Tensor,
                         trace: InferenceTrace | None) -> T.Tensor:
        """Shared batched path: score each row of x_rows ([n, x_width])."""
        outs = self._upstream_outputs(enc, trace)
        shared = [outs[m] for m in self.upstream]
        slots: list[T.Tensor] = list(shared) + [x_rows]
        if self.chain_s is not None:
            s_view, s_idx = region_view(enc, Region.SITUATION)
            if s_view is None:
                raise InputError("situation region is empty; nothing to chain over")
            queries = self.chain_s.query_rows(shared, x_rows)
            chained, weights = self.chain_s.attend_rows(queries, s_view)
            if trace is not None:
                trace.record(S_CHAIN, s_idx, weights)
            slots.append(chained)
        return self.predict.forward_rows(slots)

    def span_scores(self, enc: EncodedInput,
                    trace: InferenceTrace | None = None) -> tuple[T.Tensor, T.Tensor]:
        """Start and end score vectors ([n], [n]) over all assembled tokens."""
        if self.layout.r != 2:
            raise ConfigurationError("span scoring requires an r=2 layout")
        scores = self._scores_for_rows(enc, enc.vectors, trace)
        return T.col(scores, 0), T.col(scores, 1)

    def rerank_scores(self, enc: EncodedInput, spans: list[tuple[int, int]],
                      trace: InferenceTrace | None = None) -> T.Tensor:
        """One raw score per candidate span ([c])."""
        if self.layout.r != 1:
            raise ConfigurationError("candidate scoring requires an r=1 layout")
        if not spans:
            raise InputError("no candidate spans to score")
        n = len(enc)
        for (i, j) in spans:
            if not (0 <= i <= j < n):
                raise InputError(f"candidate span ({i}, {j}) out of bounds for {n} tokens")
        starts = np.asarray([i for i, _ in spans], dtype=np.intp)
        ends = np.asarray([j for _, j in spans], dtype=np.intp)
        x_rows = T.concat([T.take(enc.vectors, starts), T.take(enc.vectors, ends)], axis=1)
        scores = self._scores_for_rows(enc, x_rows, trace)
        return T.col(scores, 0)

    # Reference paths used to validate the batched implementation.

    def span_scores_loop(self, enc: EncodedInput) -> np.ndarray:
        """Per-token loop evaluation of the layout; returns [n, 2] values."""
        rows = [T.take(enc.vectors, [k]) for k in range(len(enc))]
        return self._loop(enc, rows)

    def rerank_scores_loop(self, enc: EncodedInput, spans: list[tuple[int, int]]) -> np.ndarray:
        rows = [T.concat([T.take(enc.vectors, [i]), T.take(enc.vectors, [j])], axis=1)
                for i, j in spans]
        return self._loop(enc, rows)[:, 0]

    def _loop(self, enc: EncodedInput, x_rows: list[T.Tensor]) -> np.ndarray:
        outs = self._upstream_outputs(enc, None)
        shared = [outs[m] for m in self.upstream]
        s_view, _ = region_view(enc, Region.SITUATION)
        results = []
        for x in x_rows:
            ys = list(shared) + [x]
            if self.chain_s is not None:
                if s_view is None:
                    raise InputError("situation region is empty; nothing to chain over")
                chained, _ = self.chain_s.forward(list(shared) + [x], s_view)
                ys.append(chained)
            results.append(self.predict.forward(ys).data[0])
        return np.asarray(results)
