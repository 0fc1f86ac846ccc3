"""Box-prompted mask enhancement of coarse crown labels.

Coarse masks are upgraded by sending each tile's bounding boxes to an external
box-prompted segmenter and taking one mask per box back. Three transports
share the same JSON schemas: in-process (:class:`MockClient`), HTTP
(``POST /segment``) and a request/response file drop.

Request::

    {"request_id": str, "origin": [x, y], "size": int | null,
     "boxes": [[x, y, w, h], ...], "image_path": str | null,
     "image": {"header": {...rasterbin sidecar...}, "data": base64} (optional)}

Response::

    {"request_id": str,
     "results": [{"bbox": [x, y, w, h], "rle": [...], "confidence": f}
                 | {"failed": true}, ...]}

Boxes and result masks are tile-local pixels.
"""

from __future__ import annotations

import base64
import json
import logging
import threading
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Any, Protocol

import numpy as np
from scipy import ndimage

from crownlabel.errors import InputError, MalformedResponseError, SegmenterError
from crownlabel.labelset import AnnotationSet, InstanceMask, Tile, rle_decode, rle_encode
from crownlabel.raster import Raster, raster_from_parts, raster_header, raster_to_bytes, write_raster

log = logging.getLogger(__name__)

DEFAULT_MOCK_THRESHOLD = 0.2
DEFAULT_ATTEMPTS = 3


class TransportError(SegmenterError):
    """The request never got a well-formed reply (network, timeout, missing file)."""


@dataclass
class SegmenterRequest:
    request_id: str
    origin: tuple[int, int]
    boxes: list[tuple[int, int, int, int]]
    size: int | None = None
    image_path: str | None = None
    image: Raster | None = field(default=None, repr=False)

    def to_json(self, inline_image: bool = True) -> dict[str, Any]:
        d: dict[str, Any] = {
            "request_id": self.request_id,
            "origin": list(self.origin),
            "size": self.size,
            "boxes": [list(b) for b in self.boxes],
            "image_path": self.image_path,
        }
        if inline_image and self.image is not None:
            d["image"] = {"header": raster_header(self.image),
                          "data": base64.b64encode(raster_to_bytes(self.image)).decode("ascii")}
        return d

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "SegmenterRequest":
        try:
            image = None
            if d.get("image") is not None:
                image = raster_from_parts(d["image"]["header"], base64.b64decode(d["image"]["data"]))
            boxes = [tuple(int(v) for v in b) for b in d["boxes"]]
            if any(len(b) != 4 or b[2] < 1 or b[3] < 1 for b in boxes):
                raise ValueError("boxes must be [x, y, w, h] with w, h >= 1")
            return cls(str(d["request_id"]), tuple(int(v) for v in d["origin"]), boxes,
                       d.get("size"), d.get("image_path"), image)
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"malformed segmenter request: {exc}") from None


@dataclass
class BoxResult:
    bbox: tuple[int, int, int, int]
    rle: list[int]
    confidence: float

    def to_array(self) -> np.ndarray:
        return rle_decode(self.rle, self.bbox[2], self.bbox[3])


@dataclass
class SegmenterResponse:
    request_id: str
    results: list[BoxResult | None]

    def to_json(self) -> dict[str, Any]:
        return {
            "request_id": self.request_id,
            "results": [{"failed": True} if r is None else
                        {"bbox": list(r.bbox), "rle": list(r.rle), "confidence": r.confidence}
                        for r in self.results],
        }

    @classmethod
    def from_json(cls, d: Any) -> "SegmenterResponse":
        try:
            results: list[BoxResult | None] = []
            for r in d["results"]:
                if r.get("failed"):
                    results.append(None)
                    continue
                bbox = tuple(int(v) for v in r["bbox"])
                conf = float(r["confidence"])
                if len(bbox) != 4 or bbox[2] < 0 or bbox[3] < 0 or not 0.0 <= conf <= 1.0:
                    raise ValueError(f"bad result {r!r}")
                rle = [int(c) for c in r["rle"]]
                if sum(rle) != bbox[2] * bbox[3] or min(rle, default=0) < 0:
                    raise ValueError("rle does not cover bbox")
                results.append(BoxResult(bbox, rle, conf))
            return cls(str(d["request_id"]), results)
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise MalformedResponseError(f"malformed segmenter response: {exc}") from None


# --------------------------------------------------------------------------
# Deterministic stand-in segmenter


def _flood_box(guide: np.ndarray, valid: np.ndarray) -> np.ndarray | None:
    h, w = valid.shape
    sr, sc = h // 2, w // 2
    if not valid[sr, sc]:
        rr, cc = np.nonzero(valid)
        if rr.size == 0:
            return None
        d2 = (rr - sr) ** 2 + (cc - sc) ** 2
        # nonzero() is row-major, so argmin breaks ties by row then col
        k = int(np.argmin(d2))
        sr, sc = int(rr[k]), int(cc[k])
    labels, _ = ndimage.label(valid)
    return labels == labels[sr, sc]


def mock_segmenter(request: SegmenterRequest, guide_band: Raster,
                   threshold: float = DEFAULT_MOCK_THRESHOLD) -> SegmenterResponse:
    """Answer a request by flooding ``guide_band`` (full-grid raster) inside each box.

    Per box: seed at the center pixel, or the nearest pixel at or above
    ``threshold`` if the center is below it; grow the 4-connected region of
    pixels >= ``threshold`` without leaving the box. Confidence is the
    region's mean guide value clamped to [0, 1]. No region means failure.
    """
    band = guide_band.band(0)
    ok = guide_band.valid(0) & (band >= threshold)
    H, W = band.shape
    ox, oy = request.origin
    results: list[BoxResult | None] = []
    for x, y, w, h in request.boxes:
        gx, gy = ox + x, oy + y
        sub = np.full((h, w), -np.inf)
        sub_ok = np.zeros((h, w), dtype=bool)
        r0, c0, r1, c1 = max(gy, 0), max(gx, 0), min(gy + h, H), min(gx + w, W)
        if r0 < r1 and c0 < c1:
            sub[r0 - gy:r1 - gy, c0 - gx:c1 - gx] = band[r0:r1, c0:c1]
            sub_ok[r0 - gy:r1 - gy, c0 - gx:c1 - gx] = ok[r0:r1, c0:c1]
        region = _flood_box(sub, sub_ok)
        if region is None:
            results.append(None)
            continue
        conf = float(np.clip(sub[region].mean(), 0.0, 1.0))
        results.append(BoxResult((x, y, w, h), rle_encode(region), conf))
    return SegmenterResponse(request.request_id, results)


# --------------------------------------------------------------------------
# Clients


class SegmenterClient(Protocol):
    def segment(self, request: SegmenterRequest) -> SegmenterResponse: ...


@dataclass
class MockClient:
    guide: Raster
    threshold: float = DEFAULT_MOCK_THRESHOLD

    def segment(self, request: SegmenterRequest) -> SegmenterResponse:
        return mock_segmenter(request, self.guide, self.threshold)


@dataclass
class HttpClient:
    endpoint: str
    timeout: float = 120.0

    def segment(self, request: SegmenterRequest) -> SegmenterResponse:
        url = self.endpoint.rstrip("/")
        if not url.endswith("/segment"):
            url += "/segment"
        body = json.dumps(request.to_json(inline_image=True)).encode()
        req = urllib.request.Request(url, data=body, method="POST",
                                     headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = resp.read()
        except (urllib.error.URLError, OSError) as exc:
            raise TransportError(f"POST {url} failed: {exc}") from None
        try:
            doc = json.loads(payload)
        except json.JSONDecodeError as exc:
            raise MalformedResponseError(f"segmenter reply is not JSON: {exc}") from None
        return SegmenterResponse.from_json(doc)


@dataclass
class FileClient:
    """Drops ``requests/<id>.json`` (+ tile rasterbin) and polls ``responses/<id>.json``."""

    directory: Path
    timeout: float = 600.0
    poll_interval: float = 0.2

    def segment(self, request: SegmenterRequest) -> SegmenterResponse:
        root = Path(self.directory)
        req_dir, resp_dir = root / "requests", root / "responses"
        req_dir.mkdir(parents=True, exist_ok=True)
        resp_dir.mkdir(parents=True, exist_ok=True)
        if request.image is not None and request.image_path is None:
            img_path = req_dir / f"{request.request_id}.rasterbin"
            write_raster(request.image, img_path)
            request = replace(request, image_path=str(img_path))
        tmp = req_dir / f".{request.request_id}.json.tmp"
        tmp.write_text(json.dumps(request.to_json(inline_image=False)))
        tmp.replace(req_dir / f"{request.request_id}.json")
        resp_path = resp_dir / f"{request.request_id}.json"
        deadline = time.monotonic() + self.timeout
        while not resp_path.exists():
            if time.monotonic() > deadline:
                raise TransportError(f"no response at {resp_path} after {self.timeout} s")
            time.sleep(self.poll_interval)
        try:
            doc = json.loads(resp_path.read_text())
        except json.JSONDecodeError as exc:
            raise MalformedResponseError(f"{resp_path}: not JSON: {exc}") from None
        return SegmenterResponse.from_json(doc)


def answer_file_requests(directory, guide: Raster, threshold: float = DEFAULT_MOCK_THRESHOLD) -> int:
    """Serve pending file-mode requests with the mock. Returns how many were answered."""
    root = Path(directory)
    n = 0
    for req_path in sorted((root / "requests").glob("*.json")):
        resp_path = root / "responses" / req_path.name
        if resp_path.exists():
            continue
        req = SegmenterRequest.from_json(json.loads(req_path.read_text()))
        resp_path.parent.mkdir(parents=True, exist_ok=True)
        tmp = resp_path.with_name("." + resp_path.name + ".tmp")
        tmp.write_text(json.dumps(mock_segmenter(req, guide, threshold).to_json()))
        tmp.replace(resp_path)
        n += 1
    return n


def make_mock_server(guide: Raster, threshold: float = DEFAULT_MOCK_THRESHOLD,
                     host: str = "127.0.0.1", port: int = 0) -> ThreadingHTTPServer:
    """HTTP server speaking the ``/segment`` protocol, backed by the mock.

    Call ``serve_forever()`` (e.g. in a thread); ``server_address`` holds the
    bound port.
    """

    class Handler(BaseHTTPRequestHandler):
        def do_POST(self):
            if self.path.rstrip("/") != "/segment":
                self.send_error(404)
                return
            length = int(self.headers.get("Content-Length", 0))
            try:
                req = SegmenterRequest.from_json(json.loads(self.rfile.read(length)))
            except (InputError, json.JSONDecodeError) as exc:
                self.send_error(400, str(exc))
                return
            body = json.dumps(mock_segmenter(req, guide, threshold).to_json()).encode()
            self.send_response(200)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def log_message(self, format, *args):
            log.debug("mock segmenter: " + format, *args)

    return ThreadingHTTPServer((host, port), Handler)


# --------------------------------------------------------------------------
# Enhancement


def _request_for(tile: Tile, image: Raster | None) -> SegmenterRequest:
    ox, oy = tile.spec.origin
    return SegmenterRequest(f"tile_{ox}_{oy}", (ox, oy), [i.bbox for i in tile.instances],
                            tile.spec.size, None, image)


def enhance_tile(tile: Tile, image: Raster | None, client: SegmenterClient,
                 attempts: int = DEFAULT_ATTEMPTS) -> Tile:
    """Replace each coarse mask with the segmenter's mask for its bounding box.

    Returned masks are clipped to their prompt box. Failed or empty answers
    keep the coarse mask, flagged ``fallback``. Ids are preserved; bbox and
    centroid are recomputed.
    """
    if not tile.instances:
        return Tile(tile.spec, [])
    request = _request_for(tile, image)
    for attempt in range(1, attempts + 1):
        try:
            response = client.segment(request)
            break
        except TransportError as exc:
            log.warning("segmenter attempt %d/%d for %s failed: %s", attempt, attempts,
                        request.request_id, exc)
    else:
        raise SegmenterError(f"segmenter unreachable for {request.request_id} after {attempts} attempts")
    if response.request_id != request.request_id:
        raise MalformedResponseError(f"response id {response.request_id!r} does not match "
                                     f"request {request.request_id!r}")
    if len(response.results) != len(request.boxes):
        raise MalformedResponseError(f"{request.request_id}: {len(response.results)} results "
                                     f"for {len(request.boxes)} boxes")

    out = []
    for inst, res in zip(tile.instances, response.results):
        enhanced = None
        if res is not None and res.bbox[2] > 0 and res.bbox[3] > 0:
            bits = res.to_array()
            if bits.any():
                full = InstanceMask.from_array(bits, inst.id, res.bbox[:2], score=res.confidence,
                                               height=inst.height)
                bx, by, bw, bh = inst.bbox
                enhanced = full.clip(bx, by, bx + bw, by + bh)
        out.append(enhanced if enhanced is not None else replace(inst, fallback=True))
    return Tile(tile.spec, out)


def _tile_image(ortho: Raster | None, tile: Tile) -> Raster | None:
    if ortho is None or tile.spec.size is None:
        return ortho
    ox, oy = tile.spec.origin
    return ortho.crop(oy, ox, tile.spec.size, tile.spec.size)


def enhance_set(aset: AnnotationSet, client: SegmenterClient, ortho: Raster | None = None,
                jobs: int = 1, attempts: int = DEFAULT_ATTEMPTS) -> AnnotationSet:
    """Enhance every tile; at most ``jobs`` requests are in flight at once."""
    def work(tile):
        return enhance_tile(tile, _tile_image(ortho, tile), client, attempts)

    if jobs <= 1:
        tiles = [work(t) for t in aset.tiles]
    else:
        with ThreadPoolExecutor(jobs) as pool:
            tiles = list(pool.map(work, aset.tiles))
    n_fb = sum(i.fallback for t in tiles for i in t.instances)
    if n_fb:
        log.info("%d instance(s) kept their coarse mask", n_fb)
    return AnnotationSet(aset.cell_size_m, tiles, grid=aset.grid, dropped=aset.dropped)


def serve_in_thread(server: ThreadingHTTPServer) -> threading.Thread:
    t = threading.Thread(target=server.serve_forever, daemon=True)
    t.start()
    return t
