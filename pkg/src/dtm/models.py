"""Transformation models composed of one intercept term and any number of shift terms.

``h(y_k | B, x) = theta_k(.) - sum(shift terms)``, with theta built from the
intercept network's output by the monotone exp-increment map.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import Standardization
from .latent import LatentDistribution, get_latent
from .netcore import CNNConfig, Network, Tensor, build_preset
from .trafo import class_probs_from_cutpoints, ordered_cutpoints, ordinal_loglik

MODEL_NAMES = ("SI", "SI-LS_x", "SI-CS_age-LS_xt", "SI-CS_B", "SI-CS_B-LS_x",
               "CI_B", "CI_B-LS_mRS", "CI_B-LS_x", "CI_B-Binary")
ALIASES = {"SI-CS_age-LS_x̃": "SI-CS_age-LS_xt", "SI-LS_xt-CS_age": "SI-CS_age-LS_xt"}
IMAGE_MODELS = tuple(m for m in MODEL_NAMES if "_B" in m)
MODEL_MAGIC = b"DTM1"


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class TermSpec:
    role: str          # intercept | shift
    complexity: str    # simple | linear | complex
    input: str         # none | tabular | image
    features: tuple[str, ...] = ()

    def __post_init__(self):
        if self.role not in ("intercept", "shift"):
            raise ModelError(f"unknown term role {self.role!r}")
        if self.complexity not in ("simple", "linear", "complex"):
            raise ModelError(f"unknown term complexity {self.complexity!r}")
        if self.input not in ("none", "tabular", "image"):
            raise ModelError(f"unknown term input {self.input!r}")
        if self.role == "intercept" and self.complexity == "linear":
            raise ModelError("intercepts are simple or complex")
        if self.complexity == "simple" and self.input != "none":
            raise ModelError("a simple intercept takes no input")

    @property
    def key(self) -> str:
        if self.role == "intercept":
            return "SI" if self.complexity == "simple" else "CI_B"
        if self.complexity == "linear":
            return "LS"
        return "CS_B" if self.input == "image" else "CS_" + "_".join(self.features)


@dataclass(frozen=True)
class ModelSpec:
    name: str
    K: int
    features: tuple[str, ...]
    terms: tuple[TermSpec, ...]
    latent: str = "logistic"
    volume_shape: tuple[int, int, int] | None = None
    cnn: CNNConfig = CNNConfig()
    l2: float = 1e-3
    binary_cut: int | None = None

    def __post_init__(self):
        n_int = sum(t.role == "intercept" for t in self.terms)
        if n_int != 1:
            raise ModelError(f"{self.name}: needs exactly one intercept term, has {n_int}")
        keys = [t.key for t in self.terms]
        if len(set(keys)) != len(keys):
            raise ModelError(f"{self.name}: duplicate terms {keys}")
        for t in self.terms:
            missing = [f for f in t.features if f not in self.features]
            if missing:
                raise ModelError(f"{self.name}: term {t.key} uses unknown feature(s) {missing}")
        if self.needs_image and self.volume_shape is None:
            raise ModelError(f"{self.name}: image terms need volume_shape")
        get_latent(self.latent)

    @property
    def intercept(self) -> TermSpec:
        return next(t for t in self.terms if t.role == "intercept")

    @property
    def shifts(self) -> tuple[TermSpec, ...]:
        return tuple(t for t in self.terms if t.role == "shift")

    @property
    def needs_image(self) -> bool:
        return any(t.input == "image" for t in self.terms)

    @property
    def linear_term(self) -> TermSpec | None:
        return next((t for t in self.terms if t.complexity == "linear"), None)

    def target(self, y):
        """Outcome as the model sees it (dichotomized for binary variants)."""
        y = np.asarray(y, dtype=np.int64)
        return y if self.binary_cut is None else (y > self.binary_cut).astype(np.int64)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["terms"] = [asdict(t) for t in self.terms]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        d["terms"] = tuple(TermSpec(**{**t, "features": tuple(t["features"])}) for t in d["terms"])
        d["features"] = tuple(d["features"])
        d["cnn"] = CNNConfig(**{**d["cnn"], "filters": tuple(d["cnn"]["filters"])})
        if d.get("volume_shape") is not None:
            d["volume_shape"] = tuple(d["volume_shape"])
        return cls(**d)


def canonical_name(name: str) -> str:
    name = ALIASES.get(name, name)
    if name not in MODEL_NAMES:
        raise ModelError(f"unknown model {name!r}; choose from {', '.join(MODEL_NAMES)}")
    return name


def make_spec(name: str, features, K: int = 7, latent: str = "logistic", *,
              volume_shape=None, age_feature: str = "age", mrs_prefix: str = "mrs_bl",
              cnn: CNNConfig = CNNConfig(), l2: float = 1e-3, binary_cut: int = 2) -> ModelSpec:
    """Spec for one of the named model variants over the given encoded feature columns."""
    name = canonical_name(name)
    features = tuple(features)
    si = TermSpec("intercept", "simple", "none")
    ci = TermSpec("intercept", "complex", "image")
    cs_b = TermSpec("shift", "complex", "image")

    def ls(cols):
        if not cols:
            raise ModelError(f"{name}: linear shift has no features")
        return TermSpec("shift", "linear", "tabular", tuple(cols))

    if name == "SI":
        terms = (si,)
    elif name == "SI-LS_x":
        terms = (si, ls(features))
    elif name == "SI-CS_age-LS_xt":
        if age_feature not in features:
            raise ModelError(f"{name}: no {age_feature!r} column among features")
        terms = (si, TermSpec("shift", "complex", "tabular", (age_feature,)),
                 ls([f for f in features if f != age_feature]))
    elif name == "SI-CS_B":
        terms = (si, cs_b)
    elif name == "SI-CS_B-LS_x":
        terms = (si, cs_b, ls(features))
    elif name in ("CI_B", "CI_B-Binary"):
        terms = (ci,)
    elif name == "CI_B-LS_mRS":
        terms = (ci, ls([f for f in features if f.startswith(mrs_prefix)]))
    else:
        terms = (ci, ls(features))
    binary = name == "CI_B-Binary"
    return ModelSpec(name, 2 if binary else K, features, terms, latent,
                     tuple(volume_shape) if volume_shape is not None else None, cnn, l2,
                     binary_cut if binary else None)


class TransformationModel:
    """Networks for every term of a :class:`ModelSpec` plus frozen standardization."""

    def __init__(self, spec: ModelSpec, rng: np.random.Generator | int = 0):
        rng = np.random.default_rng(rng)
        self.spec = spec
        self.dist: LatentDistribution = get_latent(spec.latent)
        self.stats = Standardization.identity(len(spec.features))
        self.meta: dict = {}
        self.history: list[tuple[int, float, float]] = []
        self.nets: dict[str, Network] = {}
        self._cols = {t.key: [spec.features.index(f) for f in t.features] for t in spec.terms}
        for t in spec.terms:
            self.nets[t.key] = self._build(t, rng)

    def _build(self, t: TermSpec, rng) -> Network:
        s = self.spec
        if t.key == "SI":
            return build_preset("si_head", rng, K=s.K)
        if t.key == "CI_B":
            return build_preset("cnn3d", rng, out_units=s.K - 1, volume_shape=s.volume_shape, cnn=s.cnn)
        if t.key == "CS_B":
            return build_preset("cnn3d", rng, out_units=1, volume_shape=s.volume_shape, cnn=s.cnn)
        if t.key == "LS":
            return build_preset("ls_head", rng, p=len(t.features))
        if len(t.features) != 1:
            raise ModelError(f"complex tabular shift {t.key} needs exactly one feature")
        return build_preset("cs_age_mlp", rng, l2=s.l2)

    # parameters -------------------------------------------------------------
    def parameters(self) -> dict[str, Tensor]:
        return {f"{k}/{n}": p for k, net in self.nets.items() for n, p in net.params.items()}

    def get_weights(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.parameters().items()}

    def set_weights(self, weights: dict[str, np.ndarray]):
        for k, p in self.parameters().items():
            w = np.asarray(weights[k], dtype=np.float64)
            if w.shape != p.shape:
                raise ModelError(f"weight {k}: shape {w.shape} != {p.shape}")
            p.data = w.copy()

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters().values())

    # forward ----------------------------------------------------------------
    def _inputs(self, X, B, n):
        if any(t.input == "tabular" for t in self.spec.terms):
            if X is None:
                term = next(t.key for t in self.spec.terms if t.input == "tabular")
                raise ModelError(f"{self.spec.name}: term {term} needs tabular input")
            X = self.stats.transform(X)
        if self.spec.needs_image:
            if B is None:
                term = next(t.key for t in self.spec.terms if t.input == "image")
                raise ModelError(f"{self.spec.name}: term {term} needs image input")
            B = np.asarray(B, dtype=np.float64)
            if B.ndim == 4:
                B = B[..., None]
        return X, B

    def term_outputs(self, X=None, B=None, training: bool = False,
                     rng: np.random.Generator | None = None, n: int | None = None) -> dict[str, Tensor]:
        n = n if n is not None else len(X if X is not None else B)
        X, B = self._inputs(X, B, n)
        for net in self.nets.values():
            net.mode = "training" if training else "inference"
        out = {}
        for t in self.spec.terms:
            net = self.nets[t.key]
            if t.input == "none":
                out[t.key] = net(np.ones((1, 1)), rng)
            elif t.input == "image":
                out[t.key] = net(B, rng)
            else:
                out[t.key] = net(X[:, self._cols[t.key]], rng)
        return out

    def cutpoints(self, X=None, B=None, training: bool = False,
                  rng: np.random.Generator | None = None, n: int | None = None) -> Tensor:
        """Shifted cutpoints ``h(y_k | .)``, shape (N, K-1)."""
        n = n if n is not None else len(X if X is not None else B)
        outs = self.term_outputs(X, B, training, rng, n)
        theta = ordered_cutpoints(outs[self.spec.intercept.key])
        h = theta if theta.shape[0] == n else theta + np.zeros((n, 1))
        for t in self.spec.shifts:
            h = h - outs[t.key]
        return h

    def loss(self, X, B, y, training: bool = False, rng=None) -> tuple[Tensor, float]:
        """Mean NLL plus weight penalties; also returns the bare NLL value.

        ``y`` is always on the original ordinal scale; binary variants collapse it.
        """
        y = self.spec.target(y)
        h = self.cutpoints(X, B, training, rng, n=len(y))
        nll = -ordinal_loglik(h, y, self.dist).mean()
        total = nll
        for net in self.nets.values():
            pen = net.l2_penalty()
            if pen is not None:
                total = total + pen
        return total, float(nll.data)

    def predict_cutpoints(self, X=None, B=None, batch_size: int = 64) -> np.ndarray:
        n = len(X if X is not None else B)
        parts = []
        for s in range(0, n, batch_size):
            sl = slice(s, s + batch_size)
            parts.append(self.cutpoints(None if X is None else X[sl], None if B is None else B[sl],
                                        n=min(batch_size, n - s)).data)
        return np.concatenate(parts, axis=0) if parts else np.zeros((0, self.spec.K - 1))

    def predict_proba(self, X=None, B=None, batch_size: int = 64) -> np.ndarray:
        return class_probs_from_cutpoints(self.predict_cutpoints(X, B, batch_size), self.dist)

    def nll(self, X, B, y, batch_size: int = 64) -> float:
        p = self.predict_proba(X, B, batch_size)
        y = self.spec.target(y)
        return float(-np.mean(np.log(p[np.arange(len(y)), y])))


def compose_h(model: TransformationModel, X=None, B=None) -> np.ndarray:
    return model.predict_cutpoints(X, B)


# ---------------------------------------------------------------------------
# interpretation


@dataclass
class Coefficients:
    names: list[str]
    values: np.ndarray
    scale: str

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.names, map(float, self.values)))


def linear_coefficients(model: TransformationModel) -> Coefficients:
    term = model.spec.linear_term
    if term is None:
        raise ModelError(f"{model.spec.name} has no linear shift term")
    w = model.nets["LS"].params["0_dense.kernel"].data[:, 0]
    return Coefficients(list(term.features), w.copy(), model.dist.interpretation)


def log_odds_ratios(model: TransformationModel) -> Coefficients:
    coefs = linear_coefficients(model)
    if model.dist.kind != "logistic":
        raise ModelError(f"shift coefficients are on the {coefs.scale} scale, not log odds-ratios; "
                         "use linear_coefficients()")
    return coefs


def effect_curve(model: TransformationModel, feature: str, grid) -> np.ndarray:
    """Complex-shift contribution of ``feature`` on a raw-unit grid, centred to mean zero."""
    key = "CS_" + feature
    if key not in model.nets:
        raise ModelError(f"{model.spec.name} has no complex shift on {feature!r}")
    j = model.spec.features.index(feature)
    grid = np.asarray(grid, dtype=np.float64)
    z = (grid - model.stats.mean[j]) / model.stats.sd[j]
    net = model.nets[key]
    net.mode = "inference"
    vals = net(z[:, None]).data[:, 0]
    return vals - vals.mean()


# ---------------------------------------------------------------------------
# serialization: magic, u32 header length, JSON header, float64 LE payload


def model_to_bytes(model: TransformationModel) -> bytes:
    weights = model.get_weights()
    names = sorted(weights)
    header = {
        "spec": model.spec.to_dict(),
        "stats": {"mean": model.stats.mean.tolist(), "sd": model.stats.sd.tolist()},
        "meta": model.meta,
        "history": [list(h) for h in model.history],
        "tensors": [{"name": n, "shape": list(weights[n].shape)} for n in names],
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(weights[n], dtype="<f8").tobytes() for n in names)
    return MODEL_MAGIC + struct.pack("<I", len(head)) + head + payload


def model_from_bytes(raw: bytes) -> TransformationModel:
    if raw[:4] != MODEL_MAGIC:
        raise ModelError("not a DTM1 model file")
    (hlen,) = struct.unpack_from("<I", raw, 4)
    header = json.loads(raw[8:8 + hlen].decode("utf-8"))
    spec = ModelSpec.from_dict(header["spec"])
    model = TransformationModel(spec, 0)
    offset = 8 + hlen
    weights = {}
    for t in header["tensors"]:
        count = int(np.prod(t["shape"])) if t["shape"] else 1
        end = offset + 8 * count
        if end > len(raw):
            raise ModelError("model file truncated")
        weights[t["name"]] = np.frombuffer(raw[offset:end], dtype="<f8").reshape(t["shape"])
        offset = end
    if offset != len(raw):
        raise ModelError("trailing bytes after model payload")
    model.set_weights(weights)
    model.stats = Standardization(np.array(header["stats"]["mean"]), np.array(header["stats"]["sd"]))
    model.meta = header["meta"]
    model.history = [tuple(h) for h in header["history"]]
    return model


def save_model(model: TransformationModel, path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path) -> TransformationModel:
    return model_from_bytes(Path(path).read_bytes())


def clone_model(model: TransformationModel) -> TransformationModel:
    return model_from_bytes(model_to_bytes(model))
