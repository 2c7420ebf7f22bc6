"""HTTP recall/factor service over immutable pipeline artifacts.

Endpoints: POST /v1/factors, POST /v1/recall, GET /healthz. Requests share
the loaded index/adapters without cross-request mutation; per-request work
is one embedding call, the adapter forward passes, and posting traversal.
"""

from __future__ import annotations

import json
import logging
import threading
import uuid
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from . import adapter as adapter_mod
from . import recall as recall_mod
from .cli import StageContext, load_recall_runtime, recall_for_query

log = logging.getLogger(__name__)


class _BadRequest(Exception):
    pass


class RecallService(ThreadingHTTPServer):
    """HTTP server holding the immutable runtime; 503 until it is loaded."""

    daemon_threads = True

    def __init__(self, address, context: StageContext) -> None:
        super().__init__(address, _Handler)
        self.context = context
        self.runtime = None
        self.load_error: str | None = None

    def load_state(self) -> None:
        try:
            self.runtime = load_recall_runtime(self.context)
        except Exception as exc:
            self.load_error = str(exc)
            log.error("service state failed to load: %s", exc)
            raise


class _Handler(BaseHTTPRequestHandler):
    server: RecallService

    def log_message(self, fmt: str, *args) -> None:
        log.debug("http: " + fmt, *args)

    def _send_json(self, status: int, payload: dict | list) -> None:
        body = json.dumps(payload, ensure_ascii=False).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json; charset=utf-8")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _send_text(self, status: int, text: str) -> None:
        body = text.encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "text/plain; charset=utf-8")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self) -> None:
        if self.path == "/healthz":
            self._send_text(200, "ok")
            return
        self._send_json(404, {"error": "not found"})

    def _read_body(self) -> dict:
        length = int(self.headers.get("Content-Length") or 0)
        raw = self.rfile.read(length) if length else b""
        try:
            payload = json.loads(raw.decode("utf-8")) if raw else {}
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise _BadRequest(f"malformed JSON body: {exc}") from exc
        if not isinstance(payload, dict):
            raise _BadRequest("body must be a JSON object")
        return payload

    def _require_query(self, payload: dict) -> str:
        query = payload.get("query")
        if not isinstance(query, str) or not query.strip():
            raise _BadRequest("'query' must be a non-empty string")
        return query

    def do_POST(self) -> None:
        runtime = self.server.runtime
        if runtime is None:
            self._send_json(503, {"error": "loading" if not self.server.load_error else "unavailable"})
            return
        try:
            payload = self._read_body()
            if self.path == "/v1/factors":
                query = self._require_query(payload)
                predictions = adapter_mod.predict_factors(
                    runtime.adapters,
                    query,
                    runtime.config.factors_per_subset,
                    runtime.embedding_provider.embed,
                    runtime.factor_space,
                )
                factors = {
                    key: [
                        {"id": fid, "text": runtime.graph.factors[fid].text, "score": score}
                        for fid, score in ranked
                    ]
                    for key, ranked in predictions.items()
                }
                self._send_json(200, {"factors": factors})
            elif self.path == "/v1/recall":
                query = self._require_query(payload)
                k = payload.get("k", runtime.config.recall_k)
                if not isinstance(k, int) or isinstance(k, bool) or k < 1:
                    raise _BadRequest("'k' must be a positive integer")
                results = recall_for_query(runtime, query, k)
                self._send_json(200, {"results": results})
            else:
                self._send_json(404, {"error": "not found"})
        except _BadRequest as exc:
            self._send_json(400, {"error": str(exc)})
        except Exception:
            error_id = uuid.uuid4().hex
            log.exception("internal error %s", error_id)
            self._send_json(500, {"error": {"id": error_id}})


def start_service(context: StageContext, port: int = 0) -> tuple[RecallService, threading.Thread]:
    """Bind and serve on a background thread, then load state.

    Returns once the runtime is ready; requests racing the load get 503.
    """
    server = RecallService(("127.0.0.1", port), context)
    thread = threading.Thread(target=server.serve_forever, name="ecare-service", daemon=True)
    thread.start()
    server.load_state()
    return server, thread


def serve_recall(context: StageContext, port: int) -> None:
    """Blocking entry point used by the CLI serve subcommand."""
    server = RecallService(("0.0.0.0", port), context)
    server.load_state()
    log.info("serving on port %d", server.server_address[1])
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.shutdown()
