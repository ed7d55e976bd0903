"""Lattices: arc posteriors, MPE correctness statistics and text I/O.

Node times are frame boundaries: an arc from a node at time ``s`` to a node
at time ``e`` covers frames ``s .. e-1`` and carries one HMM state id per
frame.  All recursions run in the log domain.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np


class LatticeError(ValueError):
    """Structurally invalid lattice."""


class LatticeFormatError(LatticeError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class Arc:
    start: int
    end: int
    phone: str
    lm_logprob: float
    alignment: tuple[int, ...]
    correctness: float | None = None


@dataclass
class Lattice:
    utt_id: str
    nodes: dict[int, int]  # node id -> frame time
    arcs: list[Arc]
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    @property
    def start(self) -> int:
        return self._topology()["start"]

    @property
    def end(self) -> int:
        return self._topology()["end"]

    @property
    def num_frames(self) -> int:
        return self.nodes[self.end] - self.nodes[self.start]

    def arc_span(self, q: int) -> tuple[int, int]:
        arc = self.arcs[q]
        return self.nodes[arc.start], self.nodes[arc.end]

    def _topology(self) -> dict:
        if "topo" not in self._cache:
            self._cache["topo"] = _build_topology(self)
        return self._cache["topo"]

    def _flat(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(arc index, frame time, state) for every aligned frame of every arc."""
        if "flat" not in self._cache:
            arc_idx, frames, states = [], [], []
            for q, arc in enumerate(self.arcs):
                ts = self.nodes[arc.start]
                n = len(arc.alignment)
                arc_idx.append(np.full(n, q))
                frames.append(np.arange(ts, ts + n))
                states.append(np.asarray(arc.alignment))
            self._cache["flat"] = tuple(np.concatenate(x).astype(np.int64)
                                        for x in (arc_idx, frames, states))
        return self._cache["flat"]

    def validate(self, num_states: int | None = None) -> None:
        _build_topology(self)
        if num_states is not None:
            for q, arc in enumerate(self.arcs):
                if max(arc.alignment) >= num_states or min(arc.alignment) < 0:
                    raise LatticeError(f"{self.utt_id}: arc {q} aligns to a state outside "
                                       f"[0, {num_states})")


def _build_topology(lat: Lattice) -> dict:
    if not lat.nodes:
        raise LatticeError(f"{lat.utt_id}: lattice has no nodes")
    if not lat.arcs:
        raise LatticeError(f"{lat.utt_id}: lattice has no arcs")
    incoming, outgoing = defaultdict(list), defaultdict(list)
    for q, arc in enumerate(lat.arcs):
        for nid in (arc.start, arc.end):
            if nid not in lat.nodes:
                raise LatticeError(f"{lat.utt_id}: arc {q} references unknown node {nid}")
        ts, te = lat.nodes[arc.start], lat.nodes[arc.end]
        if te <= ts:
            raise LatticeError(f"{lat.utt_id}: arc {q} ({arc.start}->{arc.end}) does not "
                               f"advance in time ({ts} -> {te}); lattice would be cyclic")
        if len(arc.alignment) != te - ts:
            raise LatticeError(f"{lat.utt_id}: arc {q} has {len(arc.alignment)} aligned "
                               f"states for {te - ts} frames")
        outgoing[arc.start].append(q)
        incoming[arc.end].append(q)
    sources = [n for n in lat.nodes if not incoming[n]]
    sinks = [n for n in lat.nodes if not outgoing[n]]
    if len(sources) != 1 or len(sinks) != 1:
        raise LatticeError(f"{lat.utt_id}: need exactly one start and one end node, "
                           f"found starts {sorted(sources)} and ends {sorted(sinks)}")
    # times strictly increase along arcs, so time order is a topological order
    order = sorted(lat.nodes, key=lambda n: (lat.nodes[n], n))
    return {"start": sources[0], "end": sinks[0], "order": order,
            "incoming": dict(incoming), "outgoing": dict(outgoing)}


# --------------------------------------------------------------------------
# scores


def log_softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    m = logits.max(axis=-1, keepdims=True)
    return logits - m - np.log(np.exp(logits - m).sum(axis=-1, keepdims=True))


def arc_acoustic_score(arc: Arc, span_start: int, logits: np.ndarray,
                       log_priors: np.ndarray, kappa: float) -> float:
    """kappa * sum over the arc's frames of (log posterior - log prior)."""
    n = len(arc.alignment)
    if span_start < 0 or span_start + n > logits.shape[0]:
        raise LatticeError(f"arc span [{span_start}, {span_start + n}) outside "
                           f"{logits.shape[0]} frames")
    logp = log_softmax(logits[span_start:span_start + n])
    states = np.asarray(arc.alignment)
    return float(kappa * np.sum(logp[np.arange(n), states] - log_priors[states]))


def acoustic_scores(lat: Lattice, log_post: np.ndarray, log_priors: np.ndarray,
                    kappa: float) -> np.ndarray:
    """Scaled-likelihood scores for every arc, given per-frame log posteriors."""
    arc_idx, frames, states = lat._flat()
    per_frame = log_post[frames, states] - log_priors[states]
    return kappa * np.bincount(arc_idx, weights=per_frame, minlength=len(lat.arcs))


# --------------------------------------------------------------------------
# recursions


@dataclass
class ArcPosteriors:
    gamma: np.ndarray  # per-arc occupancy
    log_z: float
    log_alpha: dict
    log_beta: dict
    scores: np.ndarray  # total arc scores used


def _logsumexp(values) -> float:
    if not values:
        return -math.inf
    m = max(values)
    if m == -math.inf:
        return m
    return m + math.log(sum(math.exp(x - m) for x in values))


def forward_backward(lat: Lattice, arc_scores: np.ndarray,
                     include_lm: bool = True) -> ArcPosteriors:
    """Arc posteriors under total scores (acoustic + LM log-probabilities)."""
    topo = lat._topology()
    scores = np.asarray(arc_scores, dtype=np.float64)
    if scores.shape != (len(lat.arcs),):
        raise LatticeError(f"{lat.utt_id}: expected {len(lat.arcs)} arc scores")
    if include_lm:
        scores = scores + np.array([a.lm_logprob for a in lat.arcs])
    arcs, inc, out = lat.arcs, topo["incoming"], topo["outgoing"]
    log_alpha = {}
    for n in topo["order"]:
        if n == topo["start"]:
            log_alpha[n] = 0.0
        else:
            log_alpha[n] = _logsumexp([log_alpha[arcs[q].start] + scores[q] for q in inc[n]])
    log_beta = {}
    for n in reversed(topo["order"]):
        if n == topo["end"]:
            log_beta[n] = 0.0
        else:
            log_beta[n] = _logsumexp([scores[q] + log_beta[arcs[q].end] for q in out[n]])
    log_z = log_alpha[topo["end"]]
    if log_z == -math.inf or not math.isfinite(log_z):
        raise LatticeError(f"{lat.utt_id}: total lattice probability is zero or non-finite")
    gamma = np.array([
        math.exp(log_alpha[a.start] + scores[q] + log_beta[a.end] - log_z)
        for q, a in enumerate(arcs)
    ])
    return ArcPosteriors(gamma=gamma, log_z=log_z, log_alpha=log_alpha,
                         log_beta=log_beta, scores=scores)


def lattice_log_z(lat: Lattice, arc_scores: np.ndarray) -> float:
    """Forward pass only."""
    topo = lat._topology()
    scores = np.asarray(arc_scores, dtype=np.float64) + np.array(
        [a.lm_logprob for a in lat.arcs])
    log_alpha = {topo["start"]: 0.0}
    for n in topo["order"][1:]:
        log_alpha[n] = _logsumexp([log_alpha[lat.arcs[q].start] + scores[q]
                                   for q in topo["incoming"][n]])
    return log_alpha[topo["end"]]


@dataclass
class MpeArcStats:
    gamma: np.ndarray
    c_q: np.ndarray
    c_avg: float
    log_z: float


def mpe_stats(lat: Lattice, post: ArcPosteriors, correctness: np.ndarray) -> MpeArcStats:
    """Expected correctness of paths through each arc and over the lattice.

    A second pass over the forward/backward quantities propagates expected
    partial correctness: ``c_q = alpha'(start) + c(q) + beta'(end)``.
    """
    topo = lat._topology()
    arcs, scores = lat.arcs, post.scores
    corr = np.asarray(correctness, dtype=np.float64)
    la, lb = post.log_alpha, post.log_beta
    alpha_c = {}
    for n in topo["order"]:
        if n == topo["start"]:
            alpha_c[n] = 0.0
            continue
        acc = 0.0
        for q in topo["incoming"][n]:
            a = arcs[q]
            w = math.exp(la[a.start] + scores[q] - la[n])
            acc += w * (alpha_c[a.start] + corr[q])
        alpha_c[n] = acc
    beta_c = {}
    for n in reversed(topo["order"]):
        if n == topo["end"]:
            beta_c[n] = 0.0
            continue
        acc = 0.0
        for q in topo["outgoing"][n]:
            a = arcs[q]
            w = math.exp(scores[q] + lb[a.end] - lb[n])
            acc += w * (corr[q] + beta_c[a.end])
        beta_c[n] = acc
    c_q = np.array([alpha_c[a.start] + corr[q] + beta_c[a.end] for q, a in enumerate(arcs)])
    return MpeArcStats(gamma=post.gamma, c_q=c_q, c_avg=alpha_c[topo["end"]],
                       log_z=post.log_z)


def state_occupancy(lat: Lattice, arc_weights: np.ndarray, num_states: int) -> np.ndarray:
    """(T, K) matrix: per frame, the summed weight of arcs aligning it to each state."""
    arc_idx, frames, states = lat._flat()
    T = lat.num_frames
    cells = (frames - lat.nodes[lat.start]) * num_states + states
    occ = np.bincount(cells, weights=np.asarray(arc_weights, dtype=np.float64)[arc_idx],
                      minlength=T * num_states)
    return occ.reshape(T, num_states)


# --------------------------------------------------------------------------
# phone accuracy


def approx_phone_accuracy(phone: str, start: int, end: int, reference) -> float:
    """Overlap-based approximate accuracy of one hypothesised phone.

    ``reference`` is a sequence of ``(phone, start, end)`` frame segments.
    Against each reference phone z with overlap proportion e (of z's
    duration) the arc scores -1 + 2e for the same label and -1 + e
    otherwise; the best match is returned.
    """
    if not reference:
        raise ValueError("empty reference")
    best = -math.inf
    for ref_phone, rs, re_ in reference:
        overlap = max(0, min(end, re_) - max(start, rs))
        e = overlap / (re_ - rs)
        best = max(best, -1.0 + 2.0 * e if ref_phone == phone else -1.0 + e)
    return best


def arc_correctness(lat: Lattice, reference=None) -> np.ndarray:
    """Per-arc correctness; values stored in the lattice take precedence."""
    key = ("corr", None if reference is None else tuple(map(tuple, reference)))
    if key in lat._cache:
        return lat._cache[key]
    out = np.empty(len(lat.arcs))
    for q, arc in enumerate(lat.arcs):
        if arc.correctness is not None:
            out[q] = arc.correctness
        else:
            if reference is None:
                raise LatticeError(f"{lat.utt_id}: arc {q} has no correctness and no "
                                   f"reference was given")
            ts, te = lat.arc_span(q)
            out[q] = approx_phone_accuracy(arc.phone, ts, te, reference)
    out.setflags(write=False)
    lat._cache[key] = out
    return out


# --------------------------------------------------------------------------
# text format


def _fmt_float(x: float) -> str:
    return repr(float(x))


def serialize_lattice(lat: Lattice) -> str:
    lines = [f"LATTICE {lat.utt_id} {len(lat.nodes)} {len(lat.arcs)}"]
    for nid in sorted(lat.nodes):
        lines.append(f"N {nid} {lat.nodes[nid]}")
    arcs = sorted(lat.arcs, key=lambda a: (a.start, a.end, a.phone, a.alignment,
                                           a.lm_logprob))
    for a in arcs:
        fields = ["A", str(a.start), str(a.end), a.phone, _fmt_float(a.lm_logprob),
                  ",".join(str(s) for s in a.alignment)]
        if a.correctness is not None:
            fields.append(_fmt_float(a.correctness))
        lines.append(" ".join(fields))
    return "\n".join(lines) + "\n"


def serialize_lattices(lattices) -> str:
    return "".join(serialize_lattice(lat) for lat in lattices)


def _parse_int(tok, what, lineno):
    try:
        return int(tok)
    except ValueError:
        raise LatticeFormatError(f"bad {what} {tok!r}", lineno) from None


def _parse_float(tok, what, lineno):
    try:
        val = float(tok)
    except ValueError:
        raise LatticeFormatError(f"bad {what} {tok!r}", lineno) from None
    if math.isnan(val):
        raise LatticeFormatError(f"{what} is NaN", lineno)
    return val


def parse_lattices(text: str, num_states: int | None = None) -> list[Lattice]:
    """Parse every record in ``text``, validating each lattice."""
    records = []
    current = None

    def finish():
        utt, n_nodes, n_arcs = current["utt"], current["n_nodes"], current["n_arcs"]
        nodes, arcs, hdr_line = current["nodes"], current["arcs"], current["line"]
        if len(nodes) != n_nodes or len(arcs) != n_arcs:
            raise LatticeFormatError(
                f"{utt}: header declares {n_nodes} nodes/{n_arcs} arcs, found "
                f"{len(nodes)}/{len(arcs)}", hdr_line)
        for a, ln in arcs:
            for nid in (a.start, a.end):
                if nid not in nodes:
                    raise LatticeFormatError(f"{utt}: dangling node id {nid}", ln)
            if nodes[a.end] <= nodes[a.start]:
                raise LatticeFormatError(
                    f"{utt}: arc end node {a.end} (t={nodes[a.end]}) does not follow "
                    f"start node {a.start} (t={nodes[a.start]})", ln)
        lat = Lattice(utt_id=utt, nodes=nodes, arcs=[a for a, _ in arcs])
        try:
            lat.validate(num_states)
        except LatticeError as exc:
            raise LatticeFormatError(str(exc), hdr_line) from None
        records.append(lat)

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        if tok[0] == "LATTICE":
            if len(tok) != 4:
                raise LatticeFormatError("header must be LATTICE <utt> <nodes> <arcs>", lineno)
            if current is not None:
                finish()
            current = {"utt": tok[1], "n_nodes": _parse_int(tok[2], "node count", lineno),
                       "n_arcs": _parse_int(tok[3], "arc count", lineno),
                       "nodes": {}, "arcs": [], "line": lineno}
        elif current is None:
            raise LatticeFormatError("record line before LATTICE header", lineno)
        elif tok[0] == "N":
            if len(tok) != 3:
                raise LatticeFormatError("node line must be N <id> <time>", lineno)
            nid = _parse_int(tok[1], "node id", lineno)
            if nid in current["nodes"]:
                raise LatticeFormatError(f"duplicate node id {nid}", lineno)
            current["nodes"][nid] = _parse_int(tok[2], "frame time", lineno)
        elif tok[0] == "A":
            if len(tok) not in (6, 7):
                raise LatticeFormatError(
                    "arc line must be A <start> <end> <phone> <lm> <align> [<corr>]", lineno)
            try:
                align = tuple(int(s) for s in tok[5].split(","))
            except ValueError:
                raise LatticeFormatError(f"bad alignment {tok[5]!r}", lineno) from None
            arc = Arc(
                start=_parse_int(tok[1], "start node", lineno),
                end=_parse_int(tok[2], "end node", lineno),
                phone=tok[3],
                lm_logprob=_parse_float(tok[4], "lm log-probability", lineno),
                alignment=align,
                correctness=_parse_float(tok[6], "correctness", lineno) if len(tok) == 7
                else None,
            )
            current["arcs"].append((arc, lineno))
        else:
            raise LatticeFormatError(f"unknown record type {tok[0]!r}", lineno)
    if current is not None:
        finish()
    return records


def parse_lattice(text: str, num_states: int | None = None) -> Lattice:
    lats = parse_lattices(text, num_states)
    if len(lats) != 1:
        raise LatticeFormatError(f"expected one lattice, found {len(lats)}")
    return lats[0]
