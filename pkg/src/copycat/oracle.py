"""The black-box boundary.

An ``OracleHandle`` wraps a model so that callers only ever receive hard
labels, and charges every successful query against a budget and a price.
``serve`` exposes a checkpoint over HTTP with the same contract::

    POST /v1/predict   body: PNG bytes   -> 200 {"label": k, "request_id": "<hex>"}
    GET  /v1/info                         -> 200 {"num_classes": K}

Errors: 400 malformed image, 413 body over 1 MiB, 429 rate limited,
500 internal.
"""

import json
import logging
import threading
import time
import uuid
from dataclasses import dataclass, field
from fractions import Fraction
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import requests

from . import model_zoo
from .data import images as _images
from .errors import BudgetExceededError, ProtocolError, TransportError, ValidationError
from .labels import HardLabel, SoftLabel, harden, harden_batch  # noqa: F401  (re-exported)

logger = logging.getLogger(__name__)

MAX_BODY_BYTES = 1 << 20
QUERIES_PER_BATCH = 1000


def as_money(value):
    """Exact rational from int, str, Decimal or Fraction (floats go through str)."""
    if isinstance(value, float):
        value = repr(value)
    return Fraction(value)


class QueryBudget:
    """Thread-safe query counter; ``limit=None`` means unlimited."""

    def __init__(self, limit=None):
        if limit is not None and limit < 1:
            raise ValidationError("budget limit must be a positive integer or None")
        self.limit = limit
        self.used = 0
        self._pending = 0
        self._lock = threading.Lock()

    @property
    def remaining(self):
        if self.limit is None:
            return None
        with self._lock:
            return self.limit - self.used - self._pending

    def reserve(self, n):
        with self._lock:
            if self.limit is not None and self.used + self._pending + n > self.limit:
                raise BudgetExceededError(
                    f"query budget exhausted: {self.used} used, {self._pending} in flight, "
                    f"limit {self.limit}, requested {n}")
            self._pending += n

    def commit(self, n):
        with self._lock:
            self._pending -= n
            self.used += n

    def release(self, n):
        with self._lock:
            self._pending -= n

    def to_dict(self):
        return {"limit": self.limit, "used": self.used}


class LocalBackend:
    """In-process model; preprocessing (resize, channels) stays inside."""

    kind = "LOCAL"

    def __init__(self, ckpt):
        self.ckpt = ckpt

    @property
    def num_classes(self):
        return self.ckpt.model_spec.num_classes

    def _inputs(self, batch):
        shape = self.ckpt.model_spec.input_shape
        return np.stack([_images.to_model_input(a, shape) for a in batch])

    def labels(self, batch):
        probs = model_zoo.predict_soft_batch(self.ckpt, self._inputs(batch))
        return [h.class_index for h in harden_batch(probs)]


class RemoteBackend:
    """HTTP client for the ``/v1`` wire protocol, with retry and backoff."""

    kind = "REMOTE"

    def __init__(self, url, timeout=10.0, retries=3, backoff=0.05, session=None):
        self.url = url.rstrip("/")
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self._local = threading.local()
        self._session = session
        self._num_classes = None

    def _http(self):
        if self._session is not None:
            return self._session
        s = getattr(self._local, "session", None)
        if s is None:
            s = self._local.session = requests.Session()
        return s

    @property
    def num_classes(self):
        if self._num_classes is None:
            r = self._request("GET", "/v1/info")
            self._num_classes = int(r["num_classes"])
        return self._num_classes

    def _request(self, method, path, data=None):
        headers = {"Content-Type": "image/png"} if data is not None else {}
        last = None
        for attempt in range(self.retries + 1):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = self._http().request(method, self.url + path, data=data, headers=headers, timeout=self.timeout)
            except requests.RequestException as e:
                last = f"{type(e).__name__}: {e}"
                continue
            if resp.status_code == 200:
                return resp.json()
            if resp.status_code in (429,) or resp.status_code >= 500:
                last = f"HTTP {resp.status_code}"
                continue
            raise ProtocolError(f"{method} {path} -> HTTP {resp.status_code}: {resp.text[:200]}", resp.status_code)
        raise TransportError(f"{method} {path} failed after {self.retries + 1} attempts ({last})")

    def label(self, image):
        payload = self._request("POST", "/v1/predict", _images.encode_png(image))
        return int(payload["label"])


@dataclass
class OracleHandle:
    """Black-box view of a model: image in, hard label out, every query billed.

    ``price_per_batch`` is the price of 1,000 queries.
    """

    oracle_id: str
    backend: object
    num_classes: int
    budget: QueryBudget = field(default_factory=QueryBudget)
    price_per_batch: Fraction = Fraction(1)
    workers: int = 1

    def __post_init__(self):
        self.price_per_batch = as_money(self.price_per_batch)
        if self.price_per_batch < 0:
            raise ValidationError("price_per_batch must be >= 0")

    @classmethod
    def local(cls, ckpt, budget=None, price_per_batch=1, oracle_id=None):
        return cls(oracle_id or f"local-{ckpt.content_hash[:12]}", LocalBackend(ckpt),
                   ckpt.model_spec.num_classes, QueryBudget(budget), price_per_batch)

    @classmethod
    def remote(cls, url, budget=None, price_per_batch=1, oracle_id=None, workers=4, **client_kw):
        backend = RemoteBackend(url, **client_kw)
        return cls(oracle_id or f"remote-{url}", backend, backend.num_classes, QueryBudget(budget),
                   price_per_batch, workers)

    @property
    def used(self):
        return self.budget.used

    @property
    def accumulated_cost(self):
        return Fraction(self.budget.used) * self.price_per_batch / QUERIES_PER_BATCH

    def query(self, image):
        """Hard label for one image; raises ``BudgetExceededError`` before any backend call."""
        return self.query_many([image])[0]

    def query_many(self, batch, chunk=512):
        """Hard labels for a sequence of images, billed per successful image."""
        batch = list(batch)
        if not batch:
            return []
        self.budget.reserve(len(batch))
        if hasattr(self.backend, "labels"):  # batch-capable (in-process) backend
            done = 0
            try:
                out = []
                for i in range(0, len(batch), chunk):
                    labels = self.backend.labels(batch[i:i + chunk])
                    out.extend(labels)
                    self.budget.commit(len(labels))
                    done += len(labels)
            finally:
                self.budget.release(len(batch) - done)
            return [HardLabel(k, self.num_classes) for k in out]
        return self._query_remote(batch)

    def _query_remote(self, batch):
        results = [None] * len(batch)

        def one(i):
            try:
                k = self.backend.label(batch[i])
            except BaseException:
                self.budget.release(1)
                raise
            self.budget.commit(1)
            results[i] = HardLabel(k, self.num_classes)

        if self.workers <= 1:
            for i in range(len(batch)):
                try:
                    one(i)
                except BaseException:
                    self.budget.release(len(batch) - i - 1)
                    raise
            return results
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(self.workers) as pool:
            futures = [pool.submit(one, i) for i in range(len(batch))]
            errors = [f.exception() for f in futures]
        first = next((e for e in errors if e is not None), None)
        if first is not None:
            raise first
        return results

    def status(self):
        return {
            "oracle_id": self.oracle_id,
            "backend": self.backend.kind,
            "num_classes": self.num_classes,
            "budget": self.budget.to_dict(),
            "price_per_batch": str(self.price_per_batch),
            "accumulated_cost": str(self.accumulated_cost),
        }


# Service -------------------------------------------------------------------

class TokenBucket:
    def __init__(self, rate, burst=None):
        self.rate = float(rate)
        self.capacity = float(burst if burst is not None else max(1.0, rate))
        self._tokens = {}
        self._lock = threading.Lock()

    def allow(self, client):
        now = time.monotonic()
        with self._lock:
            tokens, last = self._tokens.get(client, (self.capacity, now))
            tokens = min(self.capacity, tokens + (now - last) * self.rate)
            ok = tokens >= 1.0
            self._tokens[client] = (tokens - 1.0 if ok else tokens, now)
            return ok


class _Handler(BaseHTTPRequestHandler):
    server_version = "oracle/1"

    def log_message(self, fmt, *args):
        logger.debug("%s " + fmt, self.client_address[0], *args)

    def _send(self, status, payload):
        body = json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self):
        if self.path == "/v1/info":
            self._send(200, {"num_classes": self.server.backend.num_classes})
        else:
            self._send(404, {"error": "not_found"})

    def do_POST(self):
        request_id = uuid.uuid4().hex
        if self.path != "/v1/predict":
            return self._send(404, {"error": "not_found", "request_id": request_id})
        try:
            length = int(self.headers.get("Content-Length", "0"))
        except ValueError:
            return self._send(400, {"error": "bad_length", "request_id": request_id})
        if length > MAX_BODY_BYTES:
            self.close_connection = True
            return self._send(413, {"error": "too_large", "request_id": request_id})
        limiter = self.server.limiter
        if limiter is not None and not limiter.allow(self.client_address[0]):
            self.rfile.read(length)
            return self._send(429, {"error": "rate_limited", "request_id": request_id})
        body = self.rfile.read(length)
        try:
            image = _images.decode_png(body)
        except Exception:
            return self._send(400, {"error": "malformed_image", "request_id": request_id})
        try:
            label = self.server.backend.labels([image])[0]
        except Exception:
            logger.exception("prediction failed")
            return self._send(500, {"error": "internal", "request_id": request_id})
        self._send(200, {"label": int(label), "request_id": request_id})


class OracleServer(ThreadingHTTPServer):
    daemon_threads = True
    block_on_close = False

    def __init__(self, ckpt, bind_address=("127.0.0.1", 0), rate_limit=None):
        self.backend = LocalBackend(ckpt)
        self.limiter = TokenBucket(rate_limit) if rate_limit else None
        self._thread = None
        super().__init__(tuple(bind_address), _Handler)

    @property
    def url(self):
        host, port = self.server_address[:2]
        return f"http://{host}:{port}"

    def start(self):
        if self._thread is not None:
            return self
        self._thread = threading.Thread(target=self.serve_forever, daemon=True, name="oracle-server")
        self._thread.start()
        return self

    def stop(self):
        if self._thread is not None:  # shutdown() blocks unless serve_forever runs
            self.shutdown()
            self._thread.join()
            self._thread = None
        self.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def serve(ckpt, bind_address=("127.0.0.1", 0), rate_limit=None):
    """Start serving ``ckpt`` in a background thread; returns the running server."""
    return OracleServer(ckpt, bind_address, rate_limit).start()

