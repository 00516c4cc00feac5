"""Synthetic speaker data, experiment orchestration and evaluation metrics."""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .certifier import METHODS, CertificateResult, CertifyConfig, certify
from .embedders import BUILTIN_KINDS, EmbedderError, EmbedderSpec, build_embedder, embed_batch
from .embedding import CentroidSet, build_centroids
from .smoothing import STREAM_ORACLE, STREAM_PREDICT, EmbedderFailure, SmoothingConfig, embed_noisy, sample_noise, smoothed_mean

logger = logging.getLogger(__name__)

ATTACKS = ("gaussian", "fd_pgd")
SWEEP_AXES = ("sigma", "alpha", "n_max", "M", "K", "input_length")
STREAM_ATTACK = 4
DEFAULT_TEST_SPEAKERS = 118

# purposes mixed into per-sample seeds
_SEED_CERTIFY = 0
_SEED_ATTACK = 1


class UnsupportedAttackError(ValueError):
    pass


class PartialRunError(RuntimeError):
    """A run stopped early; ``result`` holds everything finished before the failure."""

    def __init__(self, result: "ExperimentResult", cause: BaseException):
        super().__init__(str(cause))
        self.result = result
        self.cause = cause


class _CertifyInterrupted(RuntimeError):
    def __init__(self, done: list, cause: BaseException):
        super().__init__(str(cause))
        self.done = done
        self.cause = cause


def derive_seed(master_seed: int, index: int, purpose: int = _SEED_CERTIFY) -> int:
    """64-bit seed for one sample, independent of processing order."""
    words = np.random.SeedSequence(int(master_seed), spawn_key=(purpose, index)).generate_state(2, np.uint32)
    return int(words[0]) | (int(words[1]) << 32)


# -- data --------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticDatasetSpec:
    n: int = 128
    K: int = 118
    M: int = 5
    inference_per_speaker: int = 2
    within_speaker_noise: float = 0.05
    seed: int = 0
    # inference speakers are the first ``test_speakers`` enrolled ones
    test_speakers: Optional[int] = None

    def __post_init__(self):
        if self.K < 2:
            raise ValueError("K must be at least 2")
        if self.M < 1:
            raise ValueError("M must be at least 1")
        if self.n < 1 or self.inference_per_speaker < 0:
            raise ValueError("invalid dataset sizes")
        if self.within_speaker_noise < 0:
            raise ValueError("within_speaker_noise must be nonnegative")
        if self.test_speakers is not None and not 1 <= self.test_speakers <= self.K:
            raise ValueError("test_speakers must lie in [1, K]")

    @property
    def n_test_speakers(self) -> int:
        if self.test_speakers is not None:
            return self.test_speakers
        return min(self.K, DEFAULT_TEST_SPEAKERS)


@dataclass
class Dataset:
    spec: SyntheticDatasetSpec
    enroll_x: np.ndarray
    enroll_y: np.ndarray
    infer_x: np.ndarray
    infer_y: np.ndarray


def generate_dataset(spec: SyntheticDatasetSpec) -> Dataset:
    """Sphere prototypes plus Gaussian within-speaker variation.

    Each speaker draws from its own seed stream, so speaker k's prototype and
    utterances do not depend on K.
    """
    ex, ey, ix, iy = [], [], [], []
    tau = spec.within_speaker_noise
    for k in range(spec.K):
        rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(k,)))
        proto = rng.standard_normal(spec.n)
        proto /= np.linalg.norm(proto)
        n_inf = spec.inference_per_speaker if k < spec.n_test_speakers else 0
        for j in range(spec.M + spec.inference_per_speaker):
            noise = rng.standard_normal(spec.n)
            if j >= spec.M + n_inf:
                continue
            if tau == 0:
                utt = proto.copy()
            else:
                utt = proto + tau * noise
                utt /= np.linalg.norm(utt)
            (ex if j < spec.M else ix).append(utt)
            (ey if j < spec.M else iy).append(k)
    empty = np.empty((0, spec.n))
    return Dataset(spec, np.array(ex) if ex else empty, np.array(ey, dtype=np.int64),
                   np.array(ix) if ix else empty, np.array(iy, dtype=np.int64))


def write_dataset(dataset: Dataset, path) -> None:
    s = dataset.spec
    with open(path, "w", newline="") as fh:
        fh.write(f"# n={s.n} d=NA K={s.K} M={s.M} inference_per_speaker={s.inference_per_speaker} "
                 f"within_speaker_noise={s.within_speaker_noise!r} seed={s.seed} "
                 f"test_speakers={s.n_test_speakers}\n")
        for split, xs, ys in (("enroll", dataset.enroll_x, dataset.enroll_y),
                              ("inference", dataset.infer_x, dataset.infer_y)):
            for x, y in zip(xs, ys):
                fh.write(f"{int(y)},{split}," + ",".join(repr(float(v)) for v in x) + "\n")


def read_dataset(path) -> Dataset:
    with open(path) as fh:
        header = fh.readline()
        if not header.startswith("#"):
            raise ValueError("dataset file lacks its header line")
        meta = dict(item.split("=", 1) for item in header[1:].split())
        spec = SyntheticDatasetSpec(
            n=int(meta["n"]), K=int(meta["K"]), M=int(meta["M"]),
            inference_per_speaker=int(meta["inference_per_speaker"]),
            within_speaker_noise=float(meta["within_speaker_noise"]),
            seed=int(meta["seed"]), test_speakers=int(meta["test_speakers"]))
        rows = {"enroll": ([], []), "inference": ([], [])}
        for line in fh:
            parts = line.rstrip("\n").split(",")
            xs, ys = rows[parts[1]]
            ys.append(int(parts[0]))
            xs.append([float(v) for v in parts[2:]])
    out = []
    for split in ("enroll", "inference"):
        xs, ys = rows[split]
        out.append(np.array(xs).reshape(len(xs), spec.n))
        out.append(np.array(ys, dtype=np.int64))
    return Dataset(spec, *out)


def enroll_centroids(dataset: Dataset, embedder, metric: str = "euclidean") -> CentroidSet:
    emb = embed_batch(embedder, dataset.enroll_x)
    groups = {}
    for e, y in zip(emb, dataset.enroll_y):
        groups.setdefault(int(y), []).append(e)
    return build_centroids(groups, metric)


# -- metrics -----------------------------------------------------------------

def certified_accuracy(results: Sequence[CertificateResult], labels: Sequence, epsilon: float) -> float:
    """Fraction certified at radius strictly above epsilon with the correct label."""
    if len(results) != len(labels):
        raise ValueError("results and labels must be aligned")
    if not results:
        return 0.0
    hits = sum(1 for r, y in zip(results, labels)
               if not r.abstained and r.predicted == y and r.radius > epsilon)
    return hits / len(results)


def epsilon_grid(sigma: float, points: int = 16, lo: Optional[float] = None,
                 hi: Optional[float] = None) -> list[float]:
    lo = sigma / 100 if lo is None else lo
    hi = 4 * sigma if hi is None else hi
    return [float(v) for v in np.geomspace(lo, hi, points)]


def _convex_hull_roc(pfa: np.ndarray, pmiss: np.ndarray) -> list[tuple[float, float]]:
    pts = sorted(set(zip(pfa.tolist(), pmiss.tolist())))
    hull = []
    for p in pts:
        while len(hull) >= 2:
            (x1, y1), (x2, y2) = hull[-2], hull[-1]
            # keep only left turns: the lower-left boundary of the ROC region
            if (x2 - x1) * (p[1] - y1) - (y2 - y1) * (p[0] - x1) <= 0:
                hull.pop()
            else:
                break
        hull.append(p)
    return hull


def equal_error_rate(genuine_scores, impostor_scores) -> float:
    """EER from the convex hull of the ROC (higher score means "same speaker").

    Operating points are swept over every threshold of the merged scores and
    the convex hull of (false accept, false reject) pairs is intersected with
    the diagonal FAR = FRR.
    """
    gen = np.asarray(genuine_scores, dtype=np.float64)
    imp = np.asarray(impostor_scores, dtype=np.float64)
    if gen.size == 0 or imp.size == 0:
        raise ValueError("need genuine and impostor scores")
    thresholds = np.concatenate([np.unique(np.concatenate([gen, imp])), [np.inf]])
    pfa = np.array([(imp >= t).mean() for t in thresholds])
    pmiss = np.array([(gen < t).mean() for t in thresholds])
    hull = _convex_hull_roc(pfa, pmiss)
    for (x1, y1), (x2, y2) in zip(hull[:-1], hull[1:]):
        d1, d2 = x1 - y1, x2 - y2
        if d1 <= 0 <= d2:
            if d1 == d2:
                return float(x1)
            t = d1 / (d1 - d2)
            return float(x1 + t * (x2 - x1))
    raise AssertionError("ROC hull does not cross the diagonal")


def verification_scores(embeddings: np.ndarray, labels, centroids: CentroidSet):
    """Cosine scores against every centroid split into genuine and impostor lists."""
    emb = np.asarray(embeddings, dtype=np.float64)
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    scores = (emb / norms) @ centroids.centroids.T
    idx = np.array([centroids.index_of(int(y)) for y in labels])
    mask = np.zeros_like(scores, dtype=bool)
    mask[np.arange(len(idx)), idx] = True
    return scores[mask], scores[~mask]


# -- attacks -----------------------------------------------------------------

@dataclass(frozen=True)
class AttackConfig:
    sigma: float
    n_samples: int = 1000
    repetitions: int = 20
    pgd_steps: int = 10
    grad_samples: int = 64
    fd_step: float = 1e-4
    batch_size: int = 4096


def smoothed_predict(x, embedder, centroids: CentroidSet, sigma: float, n: int, seed: int,
                     stream_id: int = STREAM_PREDICT, batch_size: int = 4096) -> int:
    """Nearest centroid (index) of the n-sample mean of f(x + eps)."""
    g = smoothed_mean(x, embedder, n, SmoothingConfig(sigma, seed, batch_size), stream_id)
    return int(np.argmax(centroids.centroids @ g))


def high_precision_predict(x, embedder, centroids: CentroidSet, sigma: float, seed: int,
                           n_max: int = 10 ** 6, n_start: int = 10 ** 4, z: float = 6.0,
                           batch_size: int = 8192) -> tuple[int, int]:
    """Nearest centroid of g(x), doubling the sample count up to ``n_max``.

    Stops early once the leading centroid's score margin over every other
    centroid exceeds ``z`` standard errors; otherwise the verdict is that of the
    ``n_max``-sample mean.  Returns ``(index, samples_used)``.
    """
    cfg = SmoothingConfig(sigma, seed, batch_size)
    xa = np.asarray(getattr(x, "data", x), dtype=np.float64)
    c = centroids.centroids
    total = np.zeros(c.shape[0])
    total_sq = None
    used = 0
    target = min(n_start, n_max)
    while True:
        rows = embed_noisy(xa, embedder, cfg, STREAM_ORACLE, used, target - used)
        s = rows @ c.T
        total += s.sum(axis=0)
        used = target
        mean = total / used
        top = int(np.argmax(mean))
        diff = s[:, [top]] - s
        sq = np.sum(diff * diff, axis=0)
        total_sq = sq if total_sq is None else total_sq + sq
        if used >= n_max:
            return top, used
        gap = mean[top] - mean
        var = np.maximum(total_sq / used - gap ** 2, 0.0)
        se = np.sqrt(var / used)
        others = np.arange(c.shape[0]) != top
        if np.all(gap[others] > z * se[others] + 1e-15):
            return top, used
        target = min(2 * used, n_max)


def gaussian_perturbations(n: int, level: float, count: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(STREAM_ATTACK,)))
    u = rng.standard_normal((count, n))
    return level * u / np.linalg.norm(u, axis=1, keepdims=True)


def _fd_margin_gradient(embedder, points: np.ndarray, w: np.ndarray, h: float) -> np.ndarray:
    """Central-difference gradient of sum_j <f(p_j), w> along every coordinate."""
    m, n = points.shape
    steps = h * np.eye(n)
    batch = np.concatenate([(points[:, None, :] + steps).reshape(-1, n),
                            (points[:, None, :] - steps).reshape(-1, n)])
    out = embedder(batch) @ w
    diff = (out[: m * n] - out[m * n:]).reshape(m, n)
    return diff.sum(axis=0) / (2.0 * h)


def pgd_perturbation(x, label_index: int, embedder, centroids: CentroidSet, level: float,
                     config: AttackConfig, seed: int) -> np.ndarray:
    """l2 PGD on the smoothed margin, finite-difference gradients, step level/4.

    Each step moves against <g(x + delta), c_true - c_runner_up>, the quantity
    whose sign decides the prediction, using common noise across steps.
    """
    if getattr(embedder, "kind", None) not in BUILTIN_KINDS:
        raise UnsupportedAttackError("fd_pgd needs a built-in embedder")
    xa = np.asarray(getattr(x, "data", x), dtype=np.float64)
    n = xa.size
    delta = np.zeros(n)
    if level <= 0:
        return delta
    noise = sample_noise(n, config.grad_samples, SmoothingConfig(config.sigma, seed), STREAM_ATTACK)
    c = centroids.centroids
    for _ in range(config.pgd_steps):
        pts = xa + delta + noise
        g = embedder(pts).mean(axis=0)
        scores = c @ g
        scores[label_index] = -np.inf
        runner = int(np.argmax(scores))
        w = c[label_index] - c[runner]
        grad = _fd_margin_gradient(embedder, pts, w, config.fd_step)
        norm = float(np.linalg.norm(grad))
        if norm == 0.0:
            break
        delta = delta - (level / 4.0) * grad / norm
        dn = float(np.linalg.norm(delta))
        if dn > level:
            delta *= level / dn
    return delta


def empirical_robust_accuracy(xs, labels, embedder, centroids: CentroidSet, attack: str, level: float,
                              config: AttackConfig, master_seed: int = 0) -> float:
    """Fraction of inputs whose smoothed prediction stays correct under every sampled attack."""
    if level < 0:
        raise ValueError("attack level must be nonnegative")
    if attack not in ATTACKS:
        raise ValueError(f"unknown attack {attack!r}")
    if attack == "fd_pgd" and getattr(embedder, "kind", None) not in BUILTIN_KINDS:
        raise UnsupportedAttackError("fd_pgd needs a built-in embedder")
    xs = np.asarray(xs, dtype=np.float64)
    if len(xs) == 0:
        return 0.0
    hits = 0
    for i, (x, y) in enumerate(zip(xs, labels)):
        hits += _robust_at(x, centroids.index_of(int(y)), embedder, centroids, attack, level, config,
                           derive_seed(master_seed, i, _SEED_ATTACK))
    return hits / len(xs)


def _robust_at(x, yi, embedder, centroids, attack, level, config: AttackConfig, seed: int) -> bool:
    def ok(delta):
        return smoothed_predict(x + delta, embedder, centroids, config.sigma, config.n_samples, seed,
                                batch_size=config.batch_size) == yi

    if attack == "gaussian":
        if level == 0:
            return ok(np.zeros_like(x))
        return all(ok(d) for d in gaussian_perturbations(x.size, level, config.repetitions, seed))
    return ok(pgd_perturbation(x, yi, embedder, centroids, level, config, seed))


# -- experiments -------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentConfig:
    """Flat configuration of one certify-and-evaluate run."""

    # data
    n: int = 128
    K: int = 118
    M: int = 5
    inference_per_speaker: int = 2
    within_speaker_noise: float = 0.05
    test_speakers: Optional[int] = None
    data_seed: int = 0
    # embedder
    embedder: str = "mlp_tanh"
    embed_dim: int = 16
    hidden: int = 64
    embedder_seed: int = 0
    constant_vector: Optional[str] = None
    external_command: Optional[str] = None
    # certification
    sigma: float = 1e-2
    alpha: float = 1e-3
    n_initial: Optional[int] = None
    n_max: int = 100_000
    methods: str = "ours"
    metric: str = "euclidean"
    batch_size: int = 4096
    # evaluation
    eps_points: int = 16
    eps_min: Optional[float] = None
    eps_max: Optional[float] = None
    attacks: str = ""
    attack_levels: Optional[str] = None
    attack_samples: int = 1000
    attack_repetitions: int = 20
    pgd_steps: int = 10
    pgd_grad_samples: int = 64
    fd_step: float = 1e-4
    # run
    master_seed: int = 0
    jobs: int = 1
    record_timings: bool = False

    def __post_init__(self):
        for m in self.method_list:
            if m not in METHODS:
                raise ValueError(f"unknown method {m!r}")
        for a in self.attack_list:
            if a not in ATTACKS:
                raise ValueError(f"unknown attack {a!r}")
        if self.jobs < 1:
            raise ValueError("jobs must be positive")
        # validate eagerly so bad flags fail before any work
        self.dataset_spec()
        self.certify_config(self.method_list[0] if self.method_list else "ours")
        if self.embedder not in ("constant", "normalized_linear", "mlp_tanh", "external"):
            raise ValueError(f"unknown embedder {self.embedder!r}")

    @property
    def method_list(self) -> list[str]:
        return [m for m in self.methods.split(",") if m]

    @property
    def attack_list(self) -> list[str]:
        return [a for a in self.attacks.split(",") if a]

    def dataset_spec(self) -> SyntheticDatasetSpec:
        return SyntheticDatasetSpec(self.n, self.K, self.M, self.inference_per_speaker,
                                    self.within_speaker_noise, self.data_seed, self.test_speakers)

    def embedder_spec(self) -> EmbedderSpec:
        params: dict = {"seed": self.embedder_seed}
        if self.embedder == "mlp_tanh":
            params["hidden"] = [self.hidden, self.hidden]
        elif self.embedder == "constant" and self.constant_vector:
            params["vector"] = [float(v) for v in self.constant_vector.split(",")]
        elif self.embedder == "external":
            params["command"] = self.external_command
        return EmbedderSpec(self.embedder, self.n, self.embed_dim, params)

    def certify_config(self, method: str) -> CertifyConfig:
        return CertifyConfig(self.sigma, self.alpha, self.n_initial, self.n_max, method, self.metric,
                             self.batch_size)

    def attack_config(self) -> AttackConfig:
        return AttackConfig(self.sigma, self.attack_samples, self.attack_repetitions, self.pgd_steps,
                            self.pgd_grad_samples, self.fd_step, self.batch_size)

    def epsilons(self) -> list[float]:
        return epsilon_grid(self.sigma, self.eps_points, self.eps_min, self.eps_max)

    def levels(self) -> list[float]:
        if self.attack_levels:
            return [float(v) for v in self.attack_levels.split(",")]
        return self.epsilons()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class ExperimentResult:
    config: dict
    labels: list
    epsilons: list
    certificates: dict = field(default_factory=dict)
    ca_curves: dict = field(default_factory=dict)
    attack_levels: list = field(default_factory=list)
    era_curves: dict = field(default_factory=dict)
    plain_accuracy: Optional[float] = None
    smoothed_accuracy: Optional[float] = None
    eer_f: Optional[float] = None
    eer_g: Optional[float] = None
    error: Optional[str] = None
    timings: Optional[dict] = None

    def mean_radius(self, method: str) -> float:
        """Mean certified radius with abstentions and wrong predictions counted as 0."""
        certs = self.certificates[method]
        vals = [r.radius if (not r.abstained and r.predicted == y) else 0.0
                for r, y in zip(certs, self.labels)]
        return float(np.mean(vals)) if vals else 0.0

    def max_certified_radius(self, method: str) -> float:
        vals = [r.radius for r, y in zip(self.certificates[method], self.labels)
                if not r.abstained and r.predicted == y]
        return max(vals, default=0.0)

    def to_dict(self) -> dict:
        methods = list(self.certificates)
        per_sample = []
        for i, y in enumerate(self.labels):
            entry = {"index": i, "label": y}
            for m in methods:
                # a failed run may hold only a prefix of the certificates
                if i < len(self.certificates[m]):
                    entry[m] = self.certificates[m][i].to_dict()
            per_sample.append(entry)
        out = {
            "config": self.config,
            "methods": methods,
            "per_sample": per_sample,
            "ca_curve": [dict({"epsilon": e}, **{m: c[j] for m, c in self.ca_curves.items()})
                         for j, e in enumerate(self.epsilons)],
            "era_curves": {a: [{"epsilon": e, "era": v} for e, v in zip(self.attack_levels, vals)]
                           for a, vals in self.era_curves.items()},
            "plain_accuracy": self.plain_accuracy,
            "smoothed_accuracy": self.smoothed_accuracy,
            "eer": {"f": self.eer_f, "g": self.eer_g},
            "error": self.error,
        }
        if self.timings is not None:
            out["timings"] = self.timings
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentResult":
        methods = data["methods"]
        per = data["per_sample"]
        era = data.get("era_curves", {})
        levels = next(([p["epsilon"] for p in v] for v in era.values()), [])
        return cls(
            config=data["config"],
            labels=[p["label"] for p in per],
            epsilons=[row["epsilon"] for row in data["ca_curve"]],
            certificates={m: [CertificateResult.from_dict(p[m]) for p in per if m in p] for m in methods},
            ca_curves={m: [row[m] for row in data["ca_curve"]] for m in methods
                       if data["ca_curve"] and m in data["ca_curve"][0]},
            attack_levels=levels,
            era_curves={a: [p["era"] for p in v] for a, v in era.items()},
            plain_accuracy=data.get("plain_accuracy"),
            smoothed_accuracy=data.get("smoothed_accuracy"),
            eer_f=data["eer"]["f"],
            eer_g=data["eer"]["g"],
            error=data.get("error"),
            timings=data.get("timings"),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "ExperimentResult":
        return cls.from_dict(json.loads(Path(path).read_text()))


_WORKER: dict = {}


def _worker_init(spec_dict):
    _WORKER["embedder"] = build_embedder(EmbedderSpec.from_dict(spec_dict))


def _worker_certify(args):
    x, centroids, cfg, seed = args
    return certify(x, _WORKER["embedder"], centroids, cfg, seed).to_dict()


def certify_all(xs, embedder, spec: EmbedderSpec, centroids, cfg: CertifyConfig, master_seed: int,
                jobs: int = 1) -> list[CertificateResult]:
    seeds = [derive_seed(master_seed, i) for i in range(len(xs))]
    done: list[CertificateResult] = []
    try:
        if jobs <= 1 or len(xs) < 2:
            for x, s in zip(xs, seeds):
                done.append(certify(x, embedder, centroids, cfg, s))
        else:
            with ProcessPoolExecutor(max_workers=jobs, initializer=_worker_init,
                                     initargs=(spec.to_dict(),)) as pool:
                for d in pool.map(_worker_certify, [(x, centroids, cfg, s) for x, s in zip(xs, seeds)]):
                    done.append(CertificateResult.from_dict(d))
    except (EmbedderFailure, EmbedderError) as exc:
        raise _CertifyInterrupted(done, exc) from exc
    return done


def run_experiment(config: ExperimentConfig, dataset: Optional[Dataset] = None,
                   embedder=None) -> ExperimentResult:
    """Enroll, certify every inference sample with each method, and evaluate."""
    timings = {}
    t0 = time.perf_counter()
    dataset = dataset if dataset is not None else generate_dataset(config.dataset_spec())
    spec = config.embedder_spec()
    own = embedder is None
    embedder = build_embedder(spec) if own else embedder
    try:
        centroids = enroll_centroids(dataset, embedder, config.metric)
        labels = [int(y) for y in dataset.infer_y]
        eps = config.epsilons()
        result = ExperimentResult(config.to_dict(), labels, eps)
        base = embed_batch(embedder, dataset.infer_x)
        result.plain_accuracy = float(np.mean(
            [centroids.labels[int(np.argmax(centroids.centroids @ e))] == y for e, y in zip(base, labels)]))
        result.eer_f = equal_error_rate(*verification_scores(base, labels, centroids))
        smooth = SmoothingConfig(config.sigma, 0, config.batch_size)
        g = np.array([smoothed_mean(x, embedder, config.attack_samples,
                                    replace(smooth, seed=derive_seed(config.master_seed, i, _SEED_ATTACK)))
                      for i, x in enumerate(dataset.infer_x)])
        result.smoothed_accuracy = float(np.mean(
            [centroids.labels[int(np.argmax(centroids.centroids @ v))] == y for v, y in zip(g, labels)]))
        result.eer_g = equal_error_rate(*verification_scores(g, labels, centroids))
        timings["setup"] = time.perf_counter() - t0

        for method in config.method_list:
            t = time.perf_counter()
            try:
                certs = certify_all(dataset.infer_x, embedder, spec, centroids, config.certify_config(method),
                                    config.master_seed, config.jobs)
            except _CertifyInterrupted as stop:
                result.certificates[method] = stop.done
                result.error = f"{type(stop.cause).__name__}: {stop.cause}"
                raise PartialRunError(result, stop.cause) from stop.cause
            result.certificates[method] = certs
            result.ca_curves[method] = [certified_accuracy(certs, labels, e) for e in eps]
            timings[f"certify_{method}"] = time.perf_counter() - t

        if config.attack_list:
            result.attack_levels = config.levels()
            acfg = config.attack_config()
            for attack in config.attack_list:
                t = time.perf_counter()
                result.era_curves[attack] = [
                    empirical_robust_accuracy(dataset.infer_x, labels, embedder, centroids, attack, lvl,
                                              acfg, config.master_seed)
                    for lvl in result.attack_levels]
                timings[f"attack_{attack}"] = time.perf_counter() - t
        timings["total"] = time.perf_counter() - t0
        if config.record_timings:
            result.timings = timings
        logger.info("experiment finished in %.1fs", timings["total"])
        return result
    finally:
        if own:
            embedder.close()


def sweep_config(base: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}")
    name = "n" if axis == "input_length" else axis
    cast = float if axis in ("sigma", "alpha") else int
    return replace(base, **{name: cast(value)})


def run_sweep(base: ExperimentConfig, axis: str, values: Sequence, dataset: Optional[Dataset] = None,
              on_result=None) -> list[ExperimentResult]:
    """One experiment per value of ``axis``, all other settings held at ``base``.

    A failing point is recorded as a result with ``error`` set (keeping any
    partial certificates) and the sweep moves on.  ``on_result(value, result)``
    is called as each point finishes.
    """
    if not values:
        raise ValueError("sweep needs at least one value")
    results = []
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}")
    for v in values:
        try:
            res = run_experiment(sweep_config(base, axis, v), dataset)
        except PartialRunError as exc:
            logger.error("sweep point %s=%s failed: %s", axis, v, exc)
            res = exc.result
        except Exception as exc:  # a failed point must not end the sweep
            logger.exception("sweep point %s=%s failed", axis, v)
            snapshot = dict(base.to_dict(), **{"n" if axis == "input_length" else axis: v})
            res = ExperimentResult(snapshot, [], [], error=f"{type(exc).__name__}: {exc}")
        results.append(res)
        if on_result is not None:
            on_result(v, res)
    return results


# -- emission ----------------------------------------------------------------

CA_COLUMNS = (("ca_ours", "ours"), ("ca_se", "smoothed_embeddings"), ("ca_rs", "rs_classification"))


def ca_csv(result: ExperimentResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epsilon"] + [c for c, _ in CA_COLUMNS])
    for j, e in enumerate(result.epsilons):
        w.writerow([repr(e)] + [repr(result.ca_curves[m][j]) if m in result.ca_curves else ""
                                for _, m in CA_COLUMNS])
    return buf.getvalue()


def era_csv(result: ExperimentResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    attacks = list(result.era_curves)
    w.writerow(["epsilon"] + [f"era_{a}" for a in attacks])
    for j, e in enumerate(result.attack_levels):
        w.writerow([repr(e)] + [repr(result.era_curves[a][j]) for a in attacks])
    return buf.getvalue()


def sweep_csv(axis: str, values: Sequence, results: Sequence[ExperimentResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([axis, "epsilon"] + [c for c, _ in CA_COLUMNS])
    for v, res in zip(values, results):
        for j, e in enumerate(res.epsilons):
            w.writerow([v, repr(e)] + [repr(res.ca_curves[m][j]) if m in res.ca_curves else ""
                                       for _, m in CA_COLUMNS])
    return buf.getvalue()


def plot_svg(result: ExperimentResult, path, title: str = "") -> None:
    import matplotlib

    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "embedcert"
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    names = {"ours": "ours", "smoothed_embeddings": "SE", "rs_classification": "RS"}
    for m, curve in result.ca_curves.items():
        ax.plot(result.epsilons, curve, label=names.get(m, m))
    for a, curve in result.era_curves.items():
        ax.plot(result.attack_levels, curve, linestyle="--", label=f"ERA {a}")
    ax.set_xscale("log")
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("attack level")
    ax.set_ylabel("accuracy")
    if title:
        ax.set_title(title)
    ax.legend(loc="lower left")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
