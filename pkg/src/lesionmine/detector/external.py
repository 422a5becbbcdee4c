"""Drive a detector that lives in another process over line-delimited JSON.

Requests go to the child's stdin, one JSON object per line::

    {"cmd": "hello"}
    {"cmd": "train", "manifest": path, "round": k, "out_dir": path}
    {"cmd": "predict", "model": path, "slices": [key, ...]}

Replies come back on stdout. ``hello`` and ``train`` answer with one line
(``{"ok": true, ...}`` or ``{"ok": false, "error": msg}``); ``predict``
answers with one ``{"key": key, "detections": [...]}`` line per slice and a
closing ``{"done": true}``. A train reply may list per-epoch model paths
under ``"epochs"`` (best first); they back :meth:`epoch_ensemble`.
"""

from __future__ import annotations

import collections
import json
import logging
import os
import queue
import subprocess
import threading
from pathlib import Path
from typing import Sequence

from ..dataset import SliceKey
from ..errors import BackendError, BackendExitError, BackendTimeout, DataError, ProtocolError
from ..fusion import Detection
from .base import ModelHandle

log = logging.getLogger(__name__)

EPOCHS_FILE = "epochs.json"
_EOF = object()


class ExternalBackend:
    def __init__(
        self,
        command: Sequence[str],
        timeout: float = 600.0,
        max_line_length: int = 1 << 20,
        cwd: str | os.PathLike | None = None,
        env: dict | None = None,
    ):
        if not command:
            raise BackendError("external backend needs a command")
        self.command = list(command)
        self.timeout = timeout
        self.max_line_length = max_line_length
        self.cwd = cwd
        self.env = env
        self._proc: subprocess.Popen | None = None
        self._lines: queue.Queue = queue.Queue()
        self._stderr: collections.deque = collections.deque(maxlen=50)
        self._lineno = 0
        self._lock = threading.Lock()

    # -- process management ------------------------------------------------

    def _start(self) -> None:
        log.debug("starting external backend %s", self.command)
        try:
            self._proc = subprocess.Popen(
                self.command,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.PIPE,
                cwd=self.cwd,
                env=self.env,
            )
        except OSError as exc:
            raise BackendExitError(f"cannot start {self.command}: {exc}") from None
        self._lines = queue.Queue()
        self._lineno = 0
        self._stderr.clear()
        threading.Thread(target=self._pump_stdout, args=(self._proc, self._lines), daemon=True).start()
        threading.Thread(target=self._pump_stderr, args=(self._proc,), daemon=True).start()

    def _pump_stdout(self, proc: subprocess.Popen, sink: queue.Queue) -> None:
        limit = self.max_line_length
        try:
            while True:
                chunk = proc.stdout.readline(limit + 1)
                if not chunk:
                    break
                sink.put(chunk)
                if len(chunk) > limit and not chunk.endswith(b"\n"):
                    # drain the rest of the oversized line so the reader stays aligned
                    while chunk and not chunk.endswith(b"\n"):
                        chunk = proc.stdout.readline(limit + 1)
        except (OSError, ValueError):
            # the pipe was closed under us by _kill
            pass
        sink.put(_EOF)

    def _pump_stderr(self, proc: subprocess.Popen) -> None:
        try:
            for raw in proc.stderr:
                self._stderr.append(raw.decode("utf-8", "replace").rstrip())
        except (OSError, ValueError):
            pass

    def _kill(self) -> None:
        proc, self._proc = self._proc, None
        if proc is None:
            return
        if proc.poll() is None:
            proc.kill()
        try:
            proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            pass
        for fh in (proc.stdin, proc.stdout, proc.stderr):
            try:
                fh.close()
            except OSError:
                pass

    def close(self) -> None:
        with self._lock:
            proc = self._proc
            if proc is not None and proc.poll() is None:
                try:
                    proc.stdin.close()
                    proc.wait(timeout=5)
                except (OSError, subprocess.TimeoutExpired):
                    pass
            self._kill()

    def __enter__(self) -> "ExternalBackend":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def __del__(self) -> None:
        try:
            self._kill()
        except Exception:
            pass

    # -- wire --------------------------------------------------------------

    def _send(self, obj: dict) -> None:
        if self._proc is None or self._proc.poll() is not None:
            self._kill()
            self._start()
        try:
            self._proc.stdin.write(json.dumps(obj).encode() + b"\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError):
            self._raise_exit("while sending a request")

    def _raise_exit(self, context: str):
        proc = self._proc
        code = None
        if proc is not None:
            try:
                code = proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                pass
        tail = " | ".join(list(self._stderr)[-5:])
        self._kill()
        raise BackendExitError(f"backend exited with code {code} {context}; stderr: {tail}")

    def _recv(self) -> dict:
        try:
            item = self._lines.get(timeout=self.timeout)
        except queue.Empty:
            self._kill()
            raise BackendTimeout(f"no reply from backend within {self.timeout} s") from None
        if item is _EOF:
            self._raise_exit(f"after line {self._lineno}")
        self._lineno += 1
        text = item.decode("utf-8", "replace")
        if len(item) > self.max_line_length and not text.endswith("\n"):
            self._kill()
            raise ProtocolError(
                f"reply exceeds max line length {self.max_line_length}", self._lineno, text
            )
        try:
            obj = json.loads(text)
        except json.JSONDecodeError:
            self._kill()
            raise ProtocolError("reply is not valid JSON", self._lineno, text.rstrip()) from None
        if not isinstance(obj, dict):
            self._kill()
            raise ProtocolError("reply must be a JSON object", self._lineno, text.rstrip())
        return obj

    def _request(self, obj: dict) -> dict:
        self._send(obj)
        reply = self._recv()
        if reply.get("ok") is True:
            return reply
        if reply.get("ok") is False:
            raise BackendError(f"backend refused {obj.get('cmd')!r}: {reply.get('error')}")
        self._kill()
        raise ProtocolError("reply lacks an 'ok' field", self._lineno, json.dumps(reply))

    # -- contract ----------------------------------------------------------

    def hello(self) -> dict:
        with self._lock:
            return self._request({"cmd": "hello"})

    def train(self, manifest, round: int, out_dir, val_manifest=None) -> ModelHandle:
        out_dir = Path(out_dir).resolve()
        out_dir.mkdir(parents=True, exist_ok=True)
        msg = {"cmd": "train", "manifest": str(Path(manifest).resolve()), "round": round, "out_dir": str(out_dir)}
        if val_manifest is not None:
            msg["val_manifest"] = str(Path(val_manifest).resolve())
        with self._lock:
            reply = self._request(msg)
        model = reply.get("model")
        if not isinstance(model, str):
            raise ProtocolError("train reply lacks a 'model' path", self._lineno, json.dumps(reply))
        epochs = reply.get("epochs")
        if epochs is not None:
            if not isinstance(epochs, list) or not all(isinstance(e, str) for e in epochs):
                raise ProtocolError("'epochs' must be a list of paths", self._lineno, json.dumps(reply))
            Path(model).mkdir(parents=True, exist_ok=True)
            (Path(model) / EPOCHS_FILE).write_text(json.dumps(epochs[:5]) + "\n")
        return ModelHandle(model)

    def predict(self, handle: ModelHandle, slices: Sequence[SliceKey]) -> dict[SliceKey, list[Detection]]:
        wanted = list(slices)
        wanted_set = set(wanted)
        with self._lock:
            self._send({"cmd": "predict", "model": handle.path, "slices": [k.to_json() for k in wanted]})
            out: dict[SliceKey, list[Detection]] = {}
            while True:
                reply = self._recv()
                if reply.get("done") is True:
                    break
                if reply.get("ok") is False:
                    raise BackendError(f"backend refused 'predict': {reply.get('error')}")
                line = json.dumps(reply)
                try:
                    key = SliceKey.from_json(reply["key"])
                    dets = [Detection.from_json(d, model_id=handle.path) for d in reply["detections"]]
                except (KeyError, TypeError, DataError) as exc:
                    self._kill()
                    raise ProtocolError(f"malformed prediction ({exc})", self._lineno, line) from None
                if key not in wanted_set:
                    self._kill()
                    raise ProtocolError(f"prediction for unrequested slice {key}", self._lineno, line)
                out.setdefault(key, []).extend(dets)
        for k in wanted:
            out.setdefault(k, [])
        return out

    def epoch_ensemble(self, handle: ModelHandle) -> list[ModelHandle]:
        path = Path(handle.path) / EPOCHS_FILE
        if path.exists():
            return [ModelHandle(p, epoch=i) for i, p in enumerate(json.loads(path.read_text()))]
        return [handle]
