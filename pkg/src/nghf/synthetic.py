"""Synthetic phone-recognition task with confusable competitor lattices.

Phones have ``states_per_phone`` HMM states each; every state emits
Gaussian feature frames around its own mean.  Phones are paired, and the
state means of a pair differ only by a small offset, so frame-level
classification leaves systematic confusions that sequence training can fix.

Each utterance gets a single-path numerator lattice (the reference
alignment) and a sausage-shaped denominator lattice: the reference arc of
every phone segment plus ``confusability`` competitor arcs over the same
frames.  The first competitor is the confusable partner; the rest are drawn
uniformly from the remaining phones.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .data import Utterance, write_dataset
from .lattice import Arc, Lattice


@dataclass
class SyntheticConfig:
    num_train: int = 200
    num_valid: int = 50
    num_phones: int = 8
    states_per_phone: int = 3
    feat_dim: int = 10
    avg_frames: int = 40
    min_phone_frames: int = 3
    confusability: int = 3
    separation: float = 2.0  # spread of state means
    partner_offset: float = 0.6  # distance between paired phones' state means
    noise: float = 1.0
    lm_noise: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.num_train < 1 or self.num_valid < 0:
            raise ValueError("need at least one training utterance")
        if self.num_phones < 2:
            raise ValueError("need at least two phones")
        if self.states_per_phone < 1 or self.feat_dim < 1:
            raise ValueError("states_per_phone and feat_dim must be >= 1")
        if self.min_phone_frames < self.states_per_phone:
            raise ValueError("min_phone_frames must cover every state of a phone")
        if self.avg_frames < self.min_phone_frames:
            raise ValueError("avg_frames shorter than a single phone")
        if not 0 <= self.confusability < self.num_phones:
            raise ValueError(f"confusability must be in [0, {self.num_phones})")

    @property
    def num_states(self) -> int:
        return self.num_phones * self.states_per_phone


def phone_name(p: int) -> str:
    return f"p{p}"


def _state_means(cfg: SyntheticConfig, rng) -> np.ndarray:
    S = cfg.states_per_phone
    means = rng.normal(0.0, cfg.separation, size=(cfg.num_states, cfg.feat_dim))
    for p in range(0, cfg.num_phones - 1, 2):
        # phone p+1 shadows phone p state by state
        offset = rng.normal(size=(S, cfg.feat_dim))
        offset *= cfg.partner_offset / np.linalg.norm(offset, axis=1, keepdims=True)
        means[(p + 1) * S:(p + 2) * S] = means[p * S:(p + 1) * S] + offset
    return means


def partner(p: int, num_phones: int) -> int:
    q = p ^ 1
    return q if q < num_phones else (p - 1)


def _state_alignment(phone: int, n_frames: int, S: int) -> tuple[int, ...]:
    # split the frames as evenly as possible over the phone's states, in order
    bounds = np.linspace(0, n_frames, S + 1).round().astype(int)
    return tuple(int(phone * S + s) for s in range(S) for _ in range(bounds[s + 1] - bounds[s]))


def _segments(cfg: SyntheticConfig, rng) -> list[tuple[int, int]]:
    mean_dur = cfg.min_phone_frames + 3
    n_phones = max(1, int(round(cfg.avg_frames / mean_dur + rng.normal(0, 1))))
    durs = cfg.min_phone_frames + rng.poisson(3, size=n_phones)
    return [(int(rng.integers(cfg.num_phones)), int(d)) for d in durs]


def make_utterance(utt_id: str, cfg: SyntheticConfig, means: np.ndarray, rng) -> Utterance:
    S = cfg.states_per_phone
    segs = _segments(cfg, rng)
    times = np.concatenate([[0], np.cumsum([d for _, d in segs])]).astype(int)
    labels = np.concatenate([_state_alignment(p, d, S) for p, d in segs]).astype(np.int64)
    feats = means[labels] + rng.normal(0.0, cfg.noise, size=(len(labels), cfg.feat_dim))
    reference = [(phone_name(p), int(times[i]), int(times[i + 1]))
                 for i, (p, _) in enumerate(segs)]
    nodes = {i: int(t) for i, t in enumerate(times)}
    base_lm = -np.log(cfg.num_phones)
    num_arcs, den_arcs = [], []
    for i, (p, d) in enumerate(segs):
        lm = float(base_lm + cfg.lm_noise * rng.normal())
        ref_arc = Arc(i, i + 1, phone_name(p), lm, _state_alignment(p, d, S))
        num_arcs.append(ref_arc)
        den_arcs.append(ref_arc)
        if cfg.confusability:
            others = [q for q in range(cfg.num_phones) if q not in (p, partner(p, cfg.num_phones))]
            rivals = [partner(p, cfg.num_phones)]
            rivals += [int(q) for q in rng.choice(others, cfg.confusability - 1, replace=False)]
            for q in rivals:
                den_arcs.append(Arc(i, i + 1, phone_name(q),
                                    float(base_lm + cfg.lm_noise * rng.normal()),
                                    _state_alignment(q, d, S)))
    num = Lattice(utt_id, dict(nodes), num_arcs)
    den = Lattice(utt_id, dict(nodes), den_arcs)
    num.validate(cfg.num_states)
    den.validate(cfg.num_states)
    return Utterance(utt_id, feats, labels, reference, num, den)


def generate(cfg: SyntheticConfig) -> tuple[list[Utterance], dict[str, list[str]]]:
    rng = np.random.default_rng(cfg.seed)
    means = _state_means(cfg, rng)
    utts, splits = [], {"train": [], "valid": []}
    for split, n in (("train", cfg.num_train), ("valid", cfg.num_valid)):
        for i in range(n):
            utt_id = f"{split}{i:05d}"
            utts.append(make_utterance(utt_id, cfg, means, rng))
            splits[split].append(utt_id)
    return utts, splits


def write_synthetic(cfg: SyntheticConfig, out_dir):
    utts, splits = generate(cfg)
    return write_dataset(out_dir, utts, splits, cfg.num_states,
                         meta={"generator": "synthetic", "synthetic": asdict(cfg)})
