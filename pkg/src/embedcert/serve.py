"""Reference embedding server for the external-embedder wire protocol.

Serves any built-in embedder kind over stdin/stdout::

    python -m embedcert.serve --kind constant --n 16 --d 4
    python -m embedcert.serve --spec '{"kind": "mlp_tanh", "n": 32, "d": 8, "params": {"seed": 3}}'
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .embedders import BUILTIN_KINDS, EmbedderSpec, build_embedder, encode_vectors


def serve(spec: EmbedderSpec, stdin=sys.stdin, stdout=sys.stdout) -> int:
    embedder = build_embedder(spec)
    stdout.write(json.dumps({"op": "hello", "n": spec.n, "d": spec.d}) + "\n")
    stdout.flush()
    for line in stdin:
        line = line.strip()
        if not line:
            continue
        try:
            msg = json.loads(line)
        except json.JSONDecodeError:
            stdout.write(json.dumps({"id": None, "error": "malformed request"}) + "\n")
            stdout.flush()
            continue
        op = msg.get("op")
        if op == "close":
            break
        req_id = msg.get("id")
        if op != "embed":
            reply = json.dumps({"id": req_id, "error": f"unknown op {op!r}"})
        else:
            try:
                emb = embedder(np.asarray(msg["vectors"], dtype=np.float64))
                reply = '{"id":%s,"embeddings":%s}' % (json.dumps(req_id), encode_vectors(emb))
            except Exception as exc:
                reply = json.dumps({"id": req_id, "error": str(exc)})
        stdout.write(reply + "\n")
        stdout.flush()
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--spec", help="embedder spec as JSON")
    parser.add_argument("--kind", choices=BUILTIN_KINDS, default="constant")
    parser.add_argument("--n", type=int, default=16)
    parser.add_argument("--d", type=int, default=4)
    parser.add_argument("--vector", help="comma-separated constant vector")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    if args.spec:
        spec = EmbedderSpec.from_dict(json.loads(args.spec))
    else:
        params = {"seed": args.seed}
        if args.vector:
            params["vector"] = [float(v) for v in args.vector.split(",")]
        spec = EmbedderSpec(args.kind, args.n, args.d, params)
    if spec.kind not in BUILTIN_KINDS:
        parser.error("the reference server only hosts built-in kinds")
    return serve(spec)


if __name__ == "__main__":
    sys.exit(main())
