"""Built-in toy embedders and the external (subprocess) embedder client.

Every embedder is a callable mapping an ``(m, n)`` array to ``(m, d)`` unit-norm
rows.  Rows are computed independently of each other, bit for bit, so the
result never depends on how inputs were batched.
"""

from __future__ import annotations

import json
import logging
import math
import shlex
import subprocess
import threading
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

KINDS = ("constant", "normalized_linear", "mlp_tanh", "external")
BUILTIN_KINDS = KINDS[:3]
ZERO_NORM = 1e-12


class EmbedderError(RuntimeError):
    """The embedder could not produce embeddings (zero vector, dead process, bad reply)."""


@dataclass(frozen=True)
class EmbedderSpec:
    kind: str
    n: int
    d: int
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown embedder kind {self.kind!r}")
        if self.n < 1 or self.d < 1:
            raise ValueError("dimensions must be positive")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "n": self.n, "d": self.d, "params": dict(self.params)}

    @classmethod
    def from_dict(cls, data: dict) -> "EmbedderSpec":
        return cls(data["kind"], int(data["n"]), int(data["d"]), dict(data.get("params", {})))


def _matmul(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    # a single row would go through gemv, whose rounding differs from gemm
    if x.shape[0] == 1:
        return (np.vstack([x, x]) @ w)[:1]
    return x @ w


def _normalize_rows(y: np.ndarray) -> np.ndarray:
    norms = np.sqrt(np.sum(y * y, axis=1))
    if np.any(norms < ZERO_NORM):
        raise EmbedderError("embedding is the zero vector before normalization")
    return y / norms[:, None]


class _Builtin:
    kind = ""

    def __init__(self, spec: EmbedderSpec):
        self.spec = spec
        self.n = spec.n
        self.d = spec.d

    def _check(self, x) -> np.ndarray:
        x = np.ascontiguousarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.n:
            raise ValueError(f"expected inputs of length {self.n}, got shape {x.shape}")
        return x

    def __call__(self, x) -> np.ndarray:
        x = self._check(x)
        if x.shape[0] == 0:
            return np.empty((0, self.d))
        return self._forward(x)

    def _forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def close(self):
        pass


class ConstantEmbedder(_Builtin):
    """Ignores its input and returns one fixed unit vector."""

    kind = "constant"

    def __init__(self, spec: EmbedderSpec):
        super().__init__(spec)
        vec = spec.params.get("vector")
        v = np.zeros(spec.d) if vec is None else np.asarray(vec, dtype=np.float64)
        if vec is None:
            v[0] = 1.0
        if v.shape != (spec.d,):
            raise ValueError("constant vector has the wrong length")
        self.vector = _normalize_rows(v[None, :])[0]

    def _forward(self, x):
        return np.tile(self.vector, (x.shape[0], 1))


class NormalizedLinearEmbedder(_Builtin):
    """normalize(A x + b), A given explicitly or drawn N(0, 1/n) from a seed."""

    kind = "normalized_linear"

    def __init__(self, spec: EmbedderSpec):
        super().__init__(spec)
        p = spec.params
        if p.get("matrix") is not None:
            a = np.asarray(p["matrix"], dtype=np.float64)
        else:
            rng = np.random.default_rng(int(p.get("seed", 0)))
            a = rng.standard_normal((spec.d, spec.n)) / math.sqrt(spec.n)
        if a.shape != (spec.d, spec.n):
            raise ValueError(f"projection matrix must be {spec.d}x{spec.n}")
        b = p.get("bias")
        self.bias = np.zeros(spec.d) if b is None else np.asarray(b, dtype=np.float64)
        self.weight = np.ascontiguousarray(a.T)

    def _forward(self, x):
        return _normalize_rows(_matmul(x, self.weight) + self.bias)


class MLPTanhEmbedder(_Builtin):
    """Two tanh hidden layers, a linear head, then l2 normalization.

    Weights and enabled biases are uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)]
    from ``seed``.  ``biases`` is "none", "final" (head only) or "all".  Inputs
    are multiplied by ``input_scale`` (default sqrt(n)) first, so unit-norm
    inputs give O(1) pre-activations.
    """

    kind = "mlp_tanh"

    def __init__(self, spec: EmbedderSpec):
        super().__init__(spec)
        p = spec.params
        hidden = tuple(int(h) for h in p.get("hidden", (64, 64)))
        if len(hidden) != 2:
            raise ValueError("mlp_tanh has exactly two hidden layers")
        biases = p.get("biases", "final")
        if biases not in ("none", "final", "all"):
            raise ValueError(f"unknown biases option {biases!r}")
        self.input_scale = float(p.get("input_scale", math.sqrt(spec.n)))
        rng = np.random.default_rng(int(p.get("seed", 0)))
        sizes = (spec.n,) + hidden + (spec.d,)
        self.weights = []
        self.biases = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = 1.0 / math.sqrt(fan_in)
            self.weights.append(rng.uniform(-bound, bound, (fan_in, fan_out)))
            last = i == len(sizes) - 2
            b = rng.uniform(-bound, bound, fan_out)
            if biases == "all" or (biases == "final" and last):
                self.biases.append(b)
            else:
                self.biases.append(np.zeros(fan_out))

    def _forward(self, x):
        h = x * self.input_scale
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.tanh(_matmul(h, w) + b)
        return _normalize_rows(_matmul(h, self.weights[-1]) + self.biases[-1])


def format_float(v: float) -> str:
    return format(float(v), ".17g")


def encode_vectors(rows) -> str:
    return "[" + ",".join("[" + ",".join(format_float(v) for v in row) + "]" for row in rows) + "]"


class ExternalEmbedder:
    """Client for a child process speaking the line-delimited JSON protocol.

    The child announces ``{"op":"hello","n":..,"d":..}`` on startup, then answers
    each ``{"op":"embed","id":..,"vectors":[...]}`` line with
    ``{"id":..,"embeddings":[...]}``.  Access to one child is serialized.
    """

    kind = "external"

    def __init__(self, spec: EmbedderSpec):
        self.spec = spec
        self.n = spec.n
        self.d = spec.d
        cmd = spec.params.get("command")
        if not cmd:
            raise ValueError("external embedder needs a 'command'")
        self.command = shlex.split(cmd) if isinstance(cmd, str) else list(cmd)
        self._proc: Optional[subprocess.Popen] = None
        self._lock = threading.Lock()
        self._next_id = 0

    def __getstate__(self):
        # the child process stays with its parent; a copy starts its own
        state = self.__dict__.copy()
        state["_proc"] = None
        state["_lock"] = None
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._lock = threading.Lock()

    def _start(self):
        try:
            self._proc = subprocess.Popen(self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                                          stderr=subprocess.PIPE, text=True, bufsize=1)
        except OSError as exc:
            raise EmbedderError(f"cannot start embedder process {self.command!r}: {exc}") from exc
        hello = self._read()
        if hello.get("op") != "hello":
            raise EmbedderError(f"expected handshake, got {hello!r}")
        if int(hello.get("n", -1)) != self.n or int(hello.get("d", -1)) != self.d:
            raise EmbedderError(f"embedder declares n={hello.get('n')}, d={hello.get('d')}; "
                                f"expected n={self.n}, d={self.d}")

    def _read(self) -> dict:
        line = self._proc.stdout.readline()
        if not line:
            code = self._proc.poll()
            err = self._proc.stderr.read() if code is not None else ""
            raise EmbedderError(f"embedder process closed its output (exit code {code}): {err.strip()}")
        try:
            msg = json.loads(line)
        except json.JSONDecodeError as exc:
            raise EmbedderError(f"malformed protocol line: {line[:200]!r}") from exc
        if not isinstance(msg, dict):
            raise EmbedderError(f"protocol message is not an object: {line[:200]!r}")
        return msg

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[1] != self.n:
            raise ValueError(f"expected inputs of length {self.n}, got shape {x.shape}")
        if x.shape[0] == 0:
            return np.empty((0, self.d))
        with self._lock:
            if self._proc is None or self._proc.poll() is not None:
                self._start()
            req_id = self._next_id
            self._next_id += 1
            line = '{"op":"embed","id":%d,"vectors":%s}\n' % (req_id, encode_vectors(x))
            try:
                self._proc.stdin.write(line)
                self._proc.stdin.flush()
            except (BrokenPipeError, OSError) as exc:
                raise EmbedderError(f"embedder process is gone: {exc}") from exc
            reply = self._read()
        if "error" in reply:
            raise EmbedderError(f"embedder reported: {reply['error']}")
        if reply.get("id") != req_id:
            raise EmbedderError(f"reply id {reply.get('id')} does not match request {req_id}")
        emb = np.asarray(reply.get("embeddings"), dtype=np.float64)
        if emb.shape != (x.shape[0], self.d):
            raise EmbedderError(f"reply has shape {emb.shape}, expected {(x.shape[0], self.d)}")
        return emb

    def close(self):
        if self._proc is None:
            return
        try:
            if self._proc.poll() is None:
                self._proc.stdin.write('{"op":"close"}\n')
                self._proc.stdin.flush()
                self._proc.stdin.close()
                self._proc.wait(timeout=5)
        except (OSError, subprocess.TimeoutExpired):
            self._proc.kill()
        finally:
            for stream in (self._proc.stdout, self._proc.stderr):
                if stream:
                    stream.close()
            self._proc = None

    def __del__(self):
        try:
            self.close()
        except Exception:
            pass


_CLASSES = {
    "constant": ConstantEmbedder,
    "normalized_linear": NormalizedLinearEmbedder,
    "mlp_tanh": MLPTanhEmbedder,
    "external": ExternalEmbedder,
}


def build_embedder(spec: EmbedderSpec):
    return _CLASSES[spec.kind](spec)


def embed_batch(spec_or_embedder, inputs: Sequence) -> np.ndarray:
    """One unit-norm embedding per input row, order preserved."""
    embedder = spec_or_embedder
    owned = isinstance(spec_or_embedder, EmbedderSpec)
    if owned:
        embedder = build_embedder(spec_or_embedder)
    x = np.asarray(inputs, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("inputs must be finite")
    try:
        return embedder(x)
    finally:
        if owned:
            embedder.close()


def embed_gradient(embedder, x, directions, h: float = 1e-4) -> np.ndarray:
    """Central-difference Jacobian-vector products (f(x + h v) - f(x - h v)) / 2h.

    ``directions`` is a ``(k, n)`` array; returns ``(k, d)``.  Only built-in
    kinds are accepted: remote models are too slow for this many evaluations.
    """
    if isinstance(embedder, EmbedderSpec):
        embedder = build_embedder(embedder)
    if getattr(embedder, "kind", None) not in BUILTIN_KINDS:
        raise ValueError("finite-difference gradients need a built-in embedder")
    x = np.asarray(x, dtype=np.float64)
    v = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    batch = np.concatenate([x[None, :] + h * v, x[None, :] - h * v], axis=0)
    out = embedder(batch)
    k = v.shape[0]
    return (out[:k] - out[k:]) / (2.0 * h)
