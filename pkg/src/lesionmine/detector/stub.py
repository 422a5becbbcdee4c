"""Minimal detector process speaking the external-backend wire protocol.

Used by the conformance tests and as a template for wrapping a real model::

    python -m lesionmine.detector.stub --mode fixed --score 0.95
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time


def _reply(obj) -> None:
    sys.stdout.write(json.dumps(obj) + "\n")
    sys.stdout.flush()


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument(
        "--mode",
        default="zero",
        choices=["zero", "fixed", "malformed", "hang", "crash", "wrong-key", "oversize"],
    )
    ap.add_argument("--score", type=float, default=0.95)
    ap.add_argument("--tag", default="lung")
    ap.add_argument("--epochs", type=int, default=0, help="number of epoch checkpoints to report")
    args = ap.parse_args(argv)

    for raw in sys.stdin:
        raw = raw.strip()
        if not raw:
            continue
        try:
            msg = json.loads(raw)
        except json.JSONDecodeError as exc:
            _reply({"ok": False, "error": f"bad request: {exc}"})
            continue
        cmd = msg.get("cmd")
        if cmd == "hello":
            _reply({"ok": True, "protocol": 1, "name": "stub", "mode": args.mode})
        elif cmd == "train":
            out_dir = msg["out_dir"]
            os.makedirs(out_dir, exist_ok=True)
            with open(os.path.join(out_dir, "stub-model.json"), "w") as fh:
                json.dump({"round": msg.get("round"), "manifest": msg.get("manifest")}, fh)
            reply = {"ok": True, "model": out_dir}
            if args.epochs:
                reply["epochs"] = [os.path.join(out_dir, f"epoch_{i}") for i in range(args.epochs)]
            _reply(reply)
        elif cmd == "predict":
            slices = msg.get("slices", [])
            for i, key in enumerate(slices):
                if args.mode == "hang":
                    time.sleep(3600)
                if args.mode == "crash" and i == 1:
                    sys.exit(3)
                if args.mode == "malformed" and i == 1:
                    sys.stdout.write("{not json\n")
                    sys.stdout.flush()
                    continue
                if args.mode == "wrong-key":
                    key = dict(key, patient_id="not-requested")
                if args.mode == "oversize":
                    sys.stdout.write(" " * 100_000 + "\n")
                    sys.stdout.flush()
                    continue
                dets = []
                if args.mode in ("fixed", "crash", "malformed", "wrong-key"):
                    dets.append({"box": [10.0, 10.0, 50.0, 50.0], "tag": args.tag, "score": args.score})
                _reply({"key": key, "detections": dets})
            _reply({"done": True})
        else:
            _reply({"ok": False, "error": f"unknown command {cmd!r}"})
    return 0


if __name__ == "__main__":
    sys.exit(main())
