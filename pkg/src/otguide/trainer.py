"""OT-guided cycle-consistent adversarial training on feature vectors.

Training runs in two stages.  First a transport plan under the task cost
is solved and projected to barycentric references for every sample in both
domains (:func:`precompute_references`).  Then two generators and two
critics are trained on the WGAN-GP objective plus cycle and reference
losses (:func:`train`).
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .core import CostMatrix, DiscreteMeasure, OTGuideError, StructuralError, measure_records
from .costs import CostSpec
from .mapping import ReferenceMap, mismatching_degree, nearest_index, reference_map
from .neural import (
    AdamState,
    Mlp,
    add_grads,
    adam_step,
    backward,
    forward,
    gradient_penalty,
    init_mlp,
)

DIVERGENCE_LIMIT = 1e8


class TrainingDiverged(OTGuideError, RuntimeError):
    def __init__(self, message: str, checkpoint: dict | None = None, report: "TrainReport | None" = None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.report = report


class ConfigError(OTGuideError, ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class TrainConfig:
    lambda_gp: float = 10.0
    lambda_rec: float = 100.0
    lambda_ref: float = 100.0
    lr0: float = 2e-4
    epochs: int = 2000
    batch: int = 32
    critic_steps: int = 5
    seed: int = 0
    ref_norm: str = "L2"
    hidden: tuple[int, ...] = (64, 64)
    normalize: bool = True

    def __post_init__(self):
        for name in ("lambda_gp", "lambda_rec", "lambda_ref"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v >= 0):
                raise ConfigError(name, f"must be a finite number >= 0, got {v!r}")
        if not (isinstance(self.lr0, (int, float)) and self.lr0 > 0):
            raise ConfigError("lr0", f"must be positive, got {self.lr0!r}")
        for name, low in (("epochs", 1), ("batch", 1), ("critic_steps", 1)):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < low:
                raise ConfigError(name, f"must be an integer >= {low}, got {v!r}")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise ConfigError("seed", f"must be an integer, got {self.seed!r}")
        if self.ref_norm != "L2":
            raise ConfigError("ref_norm", f"only 'L2' is supported, got {self.ref_norm!r}")
        if not all(isinstance(h, int) and h >= 1 for h in self.hidden):
            raise ConfigError("hidden", f"must be positive integers, got {self.hidden!r}")

    @classmethod
    def from_json(cls, doc: dict) -> "TrainConfig":
        if not isinstance(doc, dict):
            raise ConfigError("<root>", "config must be a JSON object")
        known = {f.name for f in fields(cls)}
        for key in doc:
            if key not in known:
                raise ConfigError(key, "unknown field")
        doc = dict(doc)
        if "hidden" in doc:
            if not isinstance(doc["hidden"], list):
                raise ConfigError("hidden", "must be a list of widths")
            doc["hidden"] = tuple(doc["hidden"])
        return cls(**doc)

    def to_json(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass(frozen=True, eq=False)
class Normalizer:
    """Per-coordinate affine standardisation shared by both domains."""

    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, *point_sets: np.ndarray) -> "Normalizer":
        x = np.vstack(point_sets)
        scale = x.std(axis=0)
        return cls(x.mean(axis=0), np.where(scale > 1e-12, scale, 1.0))

    @classmethod
    def identity(cls, d: int) -> "Normalizer":
        return cls(np.zeros(d), np.ones(d))

    def encode(self, x):
        return (np.asarray(x, dtype=float) - self.mean) / self.scale

    def decode(self, z):
        return np.asarray(z) * self.scale + self.mean

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_json(cls, doc: dict) -> "Normalizer":
        return cls(np.asarray(doc["mean"], dtype=float), np.asarray(doc["scale"], dtype=float))


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """A generator wrapped with the feature normaliser; maps raw feature rows."""

    net: Mlp
    normalizer: Normalizer

    def __call__(self, points) -> np.ndarray:
        return self.normalizer.decode(self.net(self.normalizer.encode(points)))

    def to_json(self) -> dict:
        return {"generator": self.net.to_json(), "normalizer": self.normalizer.to_json()}

    @classmethod
    def from_json(cls, doc: dict) -> "FeatureMap":
        return cls(Mlp.from_json(doc["generator"]), Normalizer.from_json(doc["normalizer"]))


# --- references --------------------------------------------------------------

def dataset_key(mu: DiscreteMeasure, nu: DiscreteMeasure, cost_spec: CostSpec) -> str:
    blob = json.dumps(
        {"mu": measure_records(mu), "nu": measure_records(nu), "cost": cost_spec.to_json()},
        sort_keys=True,
    ).encode()
    return hashlib.sha256(blob).hexdigest()[:24]


def precompute_references(
    mu: DiscreteMeasure,
    nu: DiscreteMeasure,
    cost_spec: CostSpec,
    *,
    cache_dir=None,
    images=None,
) -> ReferenceMap:
    """Barycentric references for both domains, cached on disk when ``cache_dir`` is set."""
    key = dataset_key(mu, nu, cost_spec)
    path = Path(cache_dir) / f"refs-{key}.jsonl" if cache_dir is not None else None
    if path is not None and path.exists():
        return ReferenceMap.from_jsonl(path.read_text(), provenance=key)
    refs = reference_map(mu, nu, cost_spec, images=images)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        tmp.write_text(refs.to_jsonl())
        tmp.replace(path)
    return refs


# --- losses ------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CriticLoss:
    loss: float
    grads: list[np.ndarray]
    wasserstein: float  # E[D(real)] - E[D(fake)]
    penalty: float
    zero_norms: int


def critic_loss(
    critic: Mlp,
    real_batch: np.ndarray,
    fake_batch: np.ndarray,
    lambda_gp: float,
    rng: np.random.Generator | None = None,
    *,
    t: np.ndarray | None = None,
) -> CriticLoss:
    """Negated critic objective ``-(E D(real) - E D(fake) - lambda_gp * GP)``.

    Interpolates are ``t * real + (1 - t) * fake`` with one uniform ``t`` per
    sample, drawn from ``rng`` unless given.
    """
    real = np.asarray(real_batch, dtype=float)
    fake = np.asarray(fake_batch, dtype=float)
    if real.shape != fake.shape:
        raise StructuralError(f"real batch {real.shape} and fake batch {fake.shape} differ")
    k = real.shape[0]
    if t is None:
        t = (rng or np.random.default_rng()).random(k)
    t = np.asarray(t, dtype=float).reshape(k, 1)

    d_real, tape_r = forward(critic, real)
    d_fake, tape_f = forward(critic, fake)
    w = float(d_real.mean() - d_fake.mean())
    g_real, _ = backward(critic, tape_r, np.full_like(d_real, -1.0 / k))
    g_fake, _ = backward(critic, tape_f, np.full_like(d_fake, 1.0 / k))
    gp = gradient_penalty(critic, t * real + (1.0 - t) * fake)
    grads = add_grads(add_grads(g_real, g_fake), gp.grads, lambda_gp)
    loss = -w + lambda_gp * gp.value
    if not math.isfinite(loss):
        raise FloatingPointError(f"critic loss is not finite (W={w}, GP={gp.value})")
    return CriticLoss(loss, grads, w, gp.value, gp.zero_norms)


def _l2_rows(diff: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row norms and the gradient of their mean-free sum (zero where a row vanishes)."""
    norms = np.sqrt((diff * diff).sum(axis=1))
    safe = np.where(norms > 0, norms, 1.0)
    return norms, np.where(norms[:, None] > 0, diff / safe[:, None], 0.0)


@dataclass(frozen=True, eq=False)
class GeneratorLoss:
    loss: float
    grads_fwd: list[np.ndarray]
    grads_bwd: list[np.ndarray]
    adversarial: float
    cycle: float
    reference: float


def generator_loss(
    g_fwd: Mlp,
    g_bwd: Mlp,
    critic: Mlp,
    batch: np.ndarray,
    refs: np.ndarray,
    lambda_rec: float,
    lambda_ref: float,
) -> GeneratorLoss:
    """``-E D(G(u)) + lambda_rec E||F(G(u)) - u|| + lambda_ref E||G(u) - ref(u)||``.

    ``refs`` row i must be the reference of ``batch`` row i.  Gradients are
    returned for the forward generator ``G`` and, through the cycle term,
    the backward generator ``F``.
    """
    u = np.asarray(batch, dtype=float)
    refs = np.asarray(refs, dtype=float)
    if refs.shape != u.shape[:1] + (g_fwd.dims[-1],):
        raise StructuralError(f"references {refs.shape} are not aligned with batch {u.shape}")
    k = u.shape[0]
    fake, tape_g = forward(g_fwd, u)
    score, tape_d = forward(critic, fake)
    adversarial = float(-score.mean())
    _, d_fake = backward(critic, tape_d, np.full_like(score, -1.0 / k))

    rec, tape_f = forward(g_bwd, fake)
    cyc_norms, cyc_dir = _l2_rows(rec - u)
    grads_bwd, d_fake_cyc = backward(g_bwd, tape_f, (lambda_rec / k) * cyc_dir)

    ref_norms, ref_dir = _l2_rows(fake - refs)
    d_fake = d_fake + d_fake_cyc + (lambda_ref / k) * ref_dir
    grads_fwd, _ = backward(g_fwd, tape_g, d_fake)

    cycle = float(cyc_norms.mean())
    reference = float(ref_norms.mean())
    loss = adversarial + lambda_rec * cycle + lambda_ref * reference
    return GeneratorLoss(loss, grads_fwd, grads_bwd, adversarial, cycle, reference)


# --- training ----------------------------------------------------------------

SERIES = (
    "critic_loss", "generator_loss", "adversarial_loss", "cycle_loss",
    "reference_loss", "mismatch_uv", "mismatch_vu",
)


@dataclass(eq=False)
class TrainReport:
    config: TrainConfig
    normalizer: Normalizer
    series: dict[str, list[float]] = field(default_factory=lambda: {k: [] for k in SERIES})
    nets: dict[str, Mlp] = field(default_factory=dict)

    @property
    def epochs(self) -> int:
        return len(self.series["critic_loss"])

    def map_uv(self) -> FeatureMap:
        return FeatureMap(self.nets["g_uv"], self.normalizer)

    def map_vu(self) -> FeatureMap:
        return FeatureMap(self.nets["g_vu"], self.normalizer)

    def checkpoint(self) -> dict:
        return {
            "normalizer": self.normalizer.to_json(),
            "nets": {name: net.to_json() for name, net in sorted(self.nets.items())},
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("epoch",) + SERIES)
        for e in range(self.epochs):
            w.writerow([e + 1] + [repr(float(self.series[k][e])) for k in SERIES])
        return buf.getvalue()


def _check_finite(value: float, what: str, report: TrainReport, nets: dict[str, Mlp]) -> None:
    if not math.isfinite(value) or abs(value) > DIVERGENCE_LIMIT:
        report.nets = dict(nets)
        raise TrainingDiverged(
            f"{what} reached {value!r}; training aborted",
            checkpoint=report.checkpoint(),
            report=report,
        )


def train(
    mu: DiscreteMeasure,
    nu: DiscreteMeasure,
    refs: ReferenceMap,
    config: TrainConfig,
    *,
    eval_cost: CostMatrix | None = None,
    on_epoch=None,
) -> TrainReport:
    """Alternate ``critic_steps`` critic updates per side with one generator
    update per side, with the learning rate decayed linearly to zero.

    ``eval_cost`` (an ``n x m`` task-cost matrix) enables per-epoch
    mismatching-degree tracking; otherwise those series hold NaN.
    ``on_epoch(epoch, report)`` is called after every epoch with the current
    networks installed on the report.
    """
    if refs.source_to_target.shape != (mu.n, nu.dim) or refs.target_to_source.shape != (nu.n, mu.dim):
        raise StructuralError("references do not cover both domains")
    if mu.dim != nu.dim:
        raise StructuralError(f"domains have different feature widths ({mu.dim} vs {nu.dim})")
    rng = np.random.default_rng(config.seed)
    d = mu.dim
    norm = Normalizer.fit(mu.points, nu.points) if config.normalize else Normalizer.identity(d)
    U, V = norm.encode(mu.points), norm.encode(nu.points)
    RU, RV = norm.encode(refs.source_to_target), norm.encode(refs.target_to_source)

    hidden = list(config.hidden)
    nets = {
        "g_uv": init_mlp([d] + hidden + [d], rng),
        "g_vu": init_mlp([d] + hidden + [d], rng),
        "d_u": init_mlp([d] + hidden + [1], rng),
        "d_v": init_mlp([d] + hidden + [1], rng),
    }
    opt = {k: AdamState.for_params(net.params) for k, net in nets.items()}
    report = TrainReport(config, norm)

    n, m = mu.n, nu.n
    kc = min(config.batch, n, m)
    per_epoch = math.ceil(max(n, m) / config.batch)
    total = config.epochs * per_epoch
    step = 0
    for _epoch in range(config.epochs):
        acc = dict.fromkeys(("critic_loss", "generator_loss", "adversarial_loss", "cycle_loss", "reference_loss"), 0.0)
        for _ in range(per_epoch):
            lr = config.lr0 * (1.0 - step / total)
            for _ in range(config.critic_steps):
                iu = rng.permutation(n)[:kc]
                iv = rng.permutation(m)[:kc]
                t = rng.random((2, kc))
                closs = 0.0
                for critic, real, src, gen, tt in (
                    ("d_v", V[iv], U[iu], "g_uv", t[0]),
                    ("d_u", U[iu], V[iv], "g_vu", t[1]),
                ):
                    res = critic_loss(nets[critic], real, nets[gen](src), config.lambda_gp, t=tt)
                    nets[critic], opt[critic] = adam_step(nets[critic], res.grads, opt[critic], lr)
                    closs += res.loss
                _check_finite(closs, "critic loss", report, nets)
            acc["critic_loss"] += closs

            iu = rng.permutation(n)[: min(config.batch, n)]
            iv = rng.permutation(m)[: min(config.batch, m)]
            fwd = generator_loss(nets["g_uv"], nets["g_vu"], nets["d_v"], U[iu], RU[iu],
                                 config.lambda_rec, config.lambda_ref)
            bwd = generator_loss(nets["g_vu"], nets["g_uv"], nets["d_u"], V[iv], RV[iv],
                                 config.lambda_rec, config.lambda_ref)
            gloss = fwd.loss + bwd.loss
            _check_finite(gloss, "generator loss", report, nets)
            g_uv = add_grads(fwd.grads_fwd, bwd.grads_bwd)
            g_vu = add_grads(bwd.grads_fwd, fwd.grads_bwd)
            nets["g_uv"], opt["g_uv"] = adam_step(nets["g_uv"], g_uv, opt["g_uv"], lr)
            nets["g_vu"], opt["g_vu"] = adam_step(nets["g_vu"], g_vu, opt["g_vu"], lr)
            acc["generator_loss"] += gloss
            acc["adversarial_loss"] += fwd.adversarial + bwd.adversarial
            acc["cycle_loss"] += fwd.cycle + bwd.cycle
            acc["reference_loss"] += fwd.reference + bwd.reference
            step += 1

        for key, total_value in acc.items():
            report.series[key].append(total_value / per_epoch)
        if eval_cost is not None:
            report.nets = dict(nets)
            report.series["mismatch_uv"].append(
                mismatching_degree(report.map_uv(), mu, nu, eval_cost))
            report.series["mismatch_vu"].append(
                mismatching_degree(report.map_vu(), nu, mu, eval_cost.T))
        else:
            report.series["mismatch_uv"].append(math.nan)
            report.series["mismatch_vu"].append(math.nan)
        if on_epoch is not None:
            report.nets = dict(nets)
            on_epoch(_epoch, report)
    report.nets = dict(nets)
    return report


def evaluate_generalization(generator, holdout_mu: DiscreteMeasure | None, nu: DiscreteMeasure,
                            eval_cost: CostSpec | CostMatrix, *, images=None) -> float:
    """Mismatching degree of ``generator`` on held-out sources."""
    if holdout_mu is None or holdout_mu.n == 0:
        raise ValueError("holdout set is empty")
    return mismatching_degree(generator, holdout_mu, nu, eval_cost, images=images)


def readout_assignment(generator, mu: DiscreteMeasure, nu: DiscreteMeasure) -> np.ndarray:
    return nearest_index(generator(mu.points), nu)
