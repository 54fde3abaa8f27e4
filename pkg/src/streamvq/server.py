"""Local query server: newline-delimited JSON over TCP, or stdin.

One JSON object per message in both directions. The snapshot reference
is swapped atomically on reload, so in-flight queries keep serving from
the snapshot they started with and later queries cite the new version.
"""

from __future__ import annotations

import json
import socketserver
import threading

from .serving import answer_query
from .snapshot import PostingListSnapshot


class QueryServer:
    """Threaded TCP server answering retrieval queries.

    Queries are read-only over an immutable snapshot, so any number of
    concurrent clients can be served without locks on the hot path;
    set_snapshot is the only writer and replaces a single reference.
    """

    def __init__(
        self,
        host: str = "127.0.0.1",
        port: int = 0,
        *,
        snapshot: PostingListSnapshot | None = None,
        user_vectors=None,
        defaults: dict | None = None,
    ):
        self._snapshot = snapshot
        self._user_vectors = user_vectors
        self._defaults = defaults or {}
        outer = self

        class Handler(socketserver.StreamRequestHandler):
            def handle(self):
                for raw in self.rfile:
                    line = raw.strip()
                    if not line:
                        continue
                    try:
                        request = json.loads(line)
                    except json.JSONDecodeError as exc:
                        response = {"error": f"bad request: {exc}"}
                    else:
                        response = outer.handle_request(request)
                    self.wfile.write(json.dumps(response).encode() + b"\n")
                    self.wfile.flush()

        class Server(socketserver.ThreadingTCPServer):
            daemon_threads = True
            allow_reuse_address = True

        self._server = Server((host, port), Handler)
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address[:2]

    def handle_request(self, request: dict) -> dict:
        snapshot = self._snapshot  # single read: queries see one version
        return answer_query(request, snapshot, self._user_vectors, self._defaults)

    def set_snapshot(self, snapshot: PostingListSnapshot) -> None:
        self._snapshot = snapshot

    def start(self) -> None:
        self._thread = threading.Thread(
            target=self._server.serve_forever, daemon=True
        )
        self._thread.start()

    def serve_forever(self) -> None:
        self._server.serve_forever()

    def shutdown(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)


def serve_stdin(stdin, stdout, snapshot_provider, user_vectors=None, defaults=None):
    """Answer one JSON query per stdin line; used by the CLI."""
    for line in stdin:
        line = line.strip()
        if not line:
            continue
        try:
            request = json.loads(line)
        except json.JSONDecodeError as exc:
            response = {"error": f"bad request: {exc}"}
        else:
            response = answer_query(
                request, snapshot_provider(), user_vectors, defaults
            )
        stdout.write(json.dumps(response) + "\n")
        stdout.flush()
