"""A tiny local labeller speaking the HTTP preference schema.

Answers come from a canned table keyed by ``pair_id``; unknown pairs get
``default``. Used by tests and by ``misodice label --provider http`` dry runs.
"""

from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer


class MockLabeller:
    def __init__(self, table: dict | None = None, default: str = "a", host: str = "127.0.0.1", port: int = 0):
        self.table = dict(table or {})
        self.default = default
        self.requests: list[str] = []
        self._lock = threading.Lock()
        outer = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                n = int(self.headers.get("Content-Length", 0))
                try:
                    pid = json.loads(self.rfile.read(n))["pair_id"]
                except (ValueError, KeyError, TypeError):
                    self.send_error(400, "bad request body")
                    return
                with outer._lock:
                    outer.requests.append(pid)
                answer = outer.table.get(pid, outer.default)
                body = json.dumps({"preferred": answer}).encode()
                self.send_response(200)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def log_message(self, *args):
                pass

        self._server = ThreadingHTTPServer((host, port), Handler)
        self._thread = None

    @property
    def url(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}/label"

    def start(self) -> "MockLabeller":
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self):
        if self._thread is not None:   # shutdown() blocks unless serve_forever is running
            self._server.shutdown()
            self._thread.join()
            self._thread = None
        self._server.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def load_table(path) -> dict:
    """Canned answers from a JSON object ``{pair_id: "a" | "b"}``."""
    with open(path) as fh:
        return json.load(fh)
