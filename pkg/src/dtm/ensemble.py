"""Transformation ensembles: members are averaged on the scale of h, not of probabilities."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .models import (Coefficients, ModelError, TransformationModel, linear_coefficients,
                     load_model, save_model)
from .trafo import class_probs_from_cutpoints, thetas_from_gammas

DEFAULT_MEMBERS = 5


def member_seed(master: int, split: int, member: int) -> int:
    """Reproducible, well-separated seed for one (split, member) run."""
    return int(np.random.SeedSequence([master, split, member]).generate_state(1)[0])


@dataclass
class TransformationEnsemble:
    members: list[TransformationModel]

    def __post_init__(self):
        if not self.members:
            raise ModelError("an ensemble needs at least one member")
        ref = self.members[0].spec
        for m in self.members[1:]:
            if m.spec != ref:
                raise ModelError(f"ensemble members disagree on spec: {ref.name} vs {m.spec.name}")
            if not (np.array_equal(m.stats.mean, self.members[0].stats.mean)
                    and np.array_equal(m.stats.sd, self.members[0].stats.sd)):
                raise ModelError("ensemble members use different standardization statistics")

    @property
    def spec(self):
        return self.members[0].spec

    @property
    def dist(self):
        return self.members[0].dist

    def __len__(self):
        return len(self.members)

    def predict_cutpoints(self, X=None, B=None) -> np.ndarray:
        hs = [m.predict_cutpoints(X, B) for m in self.members]
        # offsets from the first member keep identical members bit-exact
        return hs[0] + np.mean([h - hs[0] for h in hs], axis=0)

    def predict_proba(self, X=None, B=None) -> np.ndarray:
        return class_probs_from_cutpoints(self.predict_cutpoints(X, B), self.dist)

    def probability_average(self, X=None, B=None) -> np.ndarray:
        """Classical deep-ensemble average on the probability scale (comparison only)."""
        return np.mean([m.predict_proba(X, B) for m in self.members], axis=0)

    def decomposition(self, X=None, B=None) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        """Averaged intercept cutpoints (N, K-1) and averaged value of every shift term (N,)."""
        n = len(X if X is not None else B)
        thetas, shifts = [], {t.key: [] for t in self.spec.shifts}
        for m in self.members:
            outs = m.term_outputs(X, B, n=n)
            th = thetas_from_gammas(outs[self.spec.intercept.key].data)
            thetas.append(np.broadcast_to(th, (n, th.shape[-1])))
            for k in shifts:
                shifts[k].append(outs[k].data[:, 0])
        return np.mean(thetas, axis=0), {k: np.mean(v, axis=0) for k, v in shifts.items()}

    def save(self, directory, meta: dict | None = None) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        files = []
        for i, m in enumerate(self.members):
            name = f"member{i}.dtm"
            save_model(m, directory / name)
            files.append(name)
        doc = {"model": self.spec.name, "members": files, "aggregation": "transformation",
               "meta": meta or {}}
        (directory / "ensemble.json").write_text(json.dumps(doc, indent=2, sort_keys=True))

    @classmethod
    def load(cls, directory) -> "TransformationEnsemble":
        directory = Path(directory)
        doc = json.loads((directory / "ensemble.json").read_text())
        return cls([load_model(directory / f) for f in doc["members"]])


def ensemble_predict(ens: TransformationEnsemble, X=None, B=None) -> np.ndarray:
    return ens.predict_proba(X, B)


@dataclass
class PooledCoefficients:
    names: list[str]
    mean: np.ndarray
    members: np.ndarray      # (M, p)
    scale: str

    @property
    def spread(self) -> np.ndarray:
        return self.members.std(axis=0, ddof=0)


def ensemble_coefficients(ens: TransformationEnsemble) -> PooledCoefficients:
    coefs: list[Coefficients] = [linear_coefficients(m) for m in ens.members]
    vals = np.array([c.values for c in coefs])
    return PooledCoefficients(coefs[0].names, vals.mean(axis=0), vals, coefs[0].scale)


def warm_start(member: TransformationModel, reference: TransformationModel) -> TransformationModel:
    """Copy simple-intercept and linear-shift parameters from ``reference`` into ``member``.

    Linear coefficients are matched by feature name, so a member whose linear
    term uses a subset of the reference's features takes the matching entries.
    Image networks keep their own random initialization.
    """
    ms, rs = member.spec, reference.spec
    if "SI" in member.nets:
        if "SI" not in reference.nets:
            raise ModelError(f"reference {rs.name} has no simple intercept to copy")
        if ms.K != rs.K:
            raise ModelError(f"class count mismatch: member K={ms.K}, reference K={rs.K}")
        member.nets["SI"].set_weights(reference.nets["SI"].get_weights())
    if "LS" in member.nets:
        if "LS" not in reference.nets:
            raise ModelError(f"reference {rs.name} has no linear shift to copy")
        ref_feats = rs.linear_term.features
        missing = [f for f in ms.linear_term.features if f not in ref_feats]
        if missing:
            raise ModelError(f"reference linear shift lacks feature(s) {missing}")
        w = reference.nets["LS"].params["0_dense.kernel"].data
        rows = [ref_feats.index(f) for f in ms.linear_term.features]
        member.nets["LS"].set_weights({"0_dense.kernel": w[rows].copy()})
    return member
