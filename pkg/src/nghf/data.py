"""Utterances and the on-disk dataset layout.

A dataset directory holds::

    meta.json        state/phone inventory, splits, estimated log priors
    features.npz     one (T, input_dim) array per utterance id
    alignments.txt   <utt> <comma-separated state ids>
    references.txt   <utt> <phone>:<start>:<end> ...
    num.lat          numerator (reference) lattices
    den.lat          denominator (competitor) lattices
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .lattice import Lattice, parse_lattices, serialize_lattices

DATASET_VERSION = 1


class DatasetError(ValueError):
    pass


@dataclass
class Utterance:
    utt_id: str
    features: np.ndarray
    labels: np.ndarray  # frame-level state alignment of the reference
    reference: list[tuple[str, int, int]]
    num: Lattice
    den: Lattice

    @property
    def num_frames(self) -> int:
        return self.features.shape[0]


@dataclass
class Dataset:
    utterances: dict[str, Utterance]
    splits: dict[str, list[str]]
    num_states: int
    input_dim: int
    log_priors: np.ndarray
    meta: dict

    def split(self, name: str) -> list[Utterance]:
        if name not in self.splits:
            raise DatasetError(f"unknown split {name!r}; have {sorted(self.splits)}")
        utts = [self.utterances[u] for u in self.splits[name]]
        if not utts:
            raise DatasetError(f"split {name!r} is empty")
        return utts


def estimate_log_priors(alignments, num_states: int, floor: float = 1e-3) -> np.ndarray:
    counts = np.zeros(num_states)
    for labels in alignments:
        counts += np.bincount(labels, minlength=num_states)
    probs = np.maximum(counts / counts.sum(), floor)
    return np.log(probs / probs.sum())


def _write_npz(path: Path, arrays: dict[str, np.ndarray]) -> None:
    # fixed zip timestamps so reruns are byte-identical
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.save(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, buf.getvalue())


def write_dataset(out_dir, utterances: list[Utterance], splits: dict[str, list[str]],
                  num_states: int, meta: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_ids = set(splits.get("train", []))
    priors = estimate_log_priors(
        [u.labels for u in utterances if u.utt_id in train_ids] or
        [u.labels for u in utterances], num_states)
    meta = dict(meta or {})
    meta.update({
        "version": DATASET_VERSION,
        "num_states": num_states,
        "input_dim": int(utterances[0].features.shape[1]),
        "splits": splits,
        "log_priors": [float(x) for x in priors],
    })
    (out / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    _write_npz(out / "features.npz", {u.utt_id: u.features for u in utterances})
    with open(out / "alignments.txt", "w") as fh:
        for u in utterances:
            fh.write(f"{u.utt_id} {','.join(str(int(s)) for s in u.labels)}\n")
    with open(out / "references.txt", "w") as fh:
        for u in utterances:
            segs = " ".join(f"{p}:{s}:{e}" for p, s, e in u.reference)
            fh.write(f"{u.utt_id} {segs}\n")
    (out / "num.lat").write_text(serialize_lattices(u.num for u in utterances))
    (out / "den.lat").write_text(serialize_lattices(u.den for u in utterances))
    return out


def _read_table(path: Path) -> dict[str, str]:
    rows = {}
    for line in path.read_text().splitlines():
        if line.strip():
            key, _, rest = line.partition(" ")
            rows[key] = rest.strip()
    return rows


def load_dataset(path) -> Dataset:
    root = Path(path)
    if not (root / "meta.json").exists():
        raise DatasetError(f"{root}: not a dataset directory (no meta.json)")
    meta = json.loads((root / "meta.json").read_text())
    if meta.get("version") != DATASET_VERSION:
        raise DatasetError(f"{root}: unsupported dataset version {meta.get('version')}")
    K = int(meta["num_states"])
    with np.load(root / "features.npz", allow_pickle=False) as feats:
        features = {k: feats[k] for k in feats.files}
    aligns = _read_table(root / "alignments.txt")
    refs = _read_table(root / "references.txt")
    num = {lat.utt_id: lat for lat in parse_lattices((root / "num.lat").read_text(), K)}
    den = {lat.utt_id: lat for lat in parse_lattices((root / "den.lat").read_text(), K)}
    utterances = {}
    for utt_id, feat in features.items():
        try:
            labels = np.array([int(s) for s in aligns[utt_id].split(",")], dtype=np.int64)
            reference = []
            for seg in refs[utt_id].split():
                p, s, e = seg.rsplit(":", 2)
                reference.append((p, int(s), int(e)))
            utterances[utt_id] = Utterance(utt_id, feat, labels, reference,
                                           num[utt_id], den[utt_id])
        except KeyError as exc:
            raise DatasetError(f"{root}: utterance {utt_id} is missing {exc}") from None
    return Dataset(
        utterances=utterances,
        splits={k: list(v) for k, v in meta["splits"].items()},
        num_states=K,
        input_dim=int(meta["input_dim"]),
        log_priors=np.array(meta["log_priors"], dtype=np.float64),
        meta=meta,
    )
