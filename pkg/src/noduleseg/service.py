"""Stateless HTTP correction service on the stdlib http.server.

Three JSON endpoints; volumes travel as the IWV1 header inline plus a
base64-encoded raw payload, byte-identical to the on-disk format:

    GET  /v1/health   -> {"status": "ok", "model_version": ...}
    POST /v1/segment  body {"header": {...}, "data_b64": ...}
    POST /v1/correct  body {"header": {...}, "data_b64": ..., "prior_b64": ...,
                            "points": [[z,y,x],[z,y,x]], "ground_truth_b64"?: ...}

Responses carry {"soft_b64", "mask_b64", "metrics"?, "scale", "model_version"}
with the masks at the request's own grid; "scale" is the per-axis factor that
maps request voxel indices onto the model grid. Every error is JSON
{"code", "message"} with status 400 (malformed body), 409 (coincident
points), 413 (oversize), or 422 (invalid geometry/payload).
"""

from __future__ import annotations

import base64
import binascii
import hashlib
import json
import threading
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from .field import FieldParams, attraction_map
from .interact import validate_user_points
from .loss import LossConfig
from .metrics import asd, iou
from .net import WNet
from .volgrid import (
    BinaryMask,
    ScalarVolume,
    SoftMask,
    VolumeFormatError,
    decode_header,
    resample_iso,
    threshold,
)

MAX_BODY_BYTES = 64 * 1024 * 1024


class RequestError(Exception):
    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status
        self.message = message


@dataclass
class ServiceState:
    """Model plus the field decay used to build weight maps; read-only once serving."""

    net: WNet
    loss_config: LossConfig
    model_version: str
    max_body_bytes: int = MAX_BODY_BYTES

    @classmethod
    def from_net(cls, net: WNet, loss_config: LossConfig | None = None,
                 max_body_bytes: int = MAX_BODY_BYTES) -> "ServiceState":
        blob = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for _, a in net.state())
        version = hashlib.sha256(blob).hexdigest()[:12]
        return cls(net=net, loss_config=loss_config or LossConfig(),
                   model_version=version, max_body_bytes=max_body_bytes)


def _b64_bytes(body: dict, key: str, required: bool = True) -> bytes | None:
    raw = body.get(key)
    if raw is None:
        if required:
            raise RequestError(400, f"missing field {key!r}")
        return None
    if not isinstance(raw, str):
        raise RequestError(400, f"field {key!r} must be a base64 string")
    try:
        return base64.b64decode(raw, validate=True)
    except (binascii.Error, ValueError) as exc:
        raise RequestError(400, f"field {key!r} is not valid base64: {exc}") from exc


def _volume_from(body: dict) -> ScalarVolume:
    header = body.get("header")
    if not isinstance(header, dict):
        raise RequestError(400, "missing or malformed 'header'")
    try:
        kind, geo, np_dtype = decode_header({**header, "kind": "scalar", "dtype": "f32"})
    except VolumeFormatError as exc:
        raise RequestError(422, str(exc)) from exc
    raw = _b64_bytes(body, "data_b64")
    n = geo.dims[0] * geo.dims[1] * geo.dims[2] * np_dtype.itemsize
    if len(raw) != n:
        raise RequestError(422, f"payload is {len(raw)} bytes, dims require {n}")
    return ScalarVolume(geo, np.frombuffer(raw, dtype=np_dtype).reshape(geo.dims))


def _soft_from(body: dict, key: str, geo) -> SoftMask:
    raw = _b64_bytes(body, key)
    n = geo.dims[0] * geo.dims[1] * geo.dims[2] * 4
    if len(raw) != n:
        raise RequestError(422, f"field {key!r} is {len(raw)} bytes, dims require {n}")
    values = np.frombuffer(raw, dtype="<f4").reshape(geo.dims)
    if values.size and (values.min() < 0.0 or values.max() > 1.0):
        raise RequestError(422, f"field {key!r} has values outside [0, 1]")
    return SoftMask(geo, values)


def _mask_from(body: dict, key: str, geo) -> BinaryMask | None:
    raw = _b64_bytes(body, key, required=False)
    if raw is None:
        return None
    n = geo.dims[0] * geo.dims[1] * geo.dims[2]
    if len(raw) != n:
        raise RequestError(422, f"field {key!r} is {len(raw)} bytes, dims require {n}")
    values = np.frombuffer(raw, dtype="u1").reshape(geo.dims)
    if values.size and values.max() > 1:
        raise RequestError(422, f"field {key!r} is not a {{0,1}} mask")
    return BinaryMask(geo, values)


def _to_model_grid(state: ServiceState, volume: ScalarVolume) -> ScalarVolume:
    side = state.net.config.input_side
    if volume.geometry.dims == (side, side, side):
        return volume
    if any(d < 2 for d in volume.geometry.dims):
        raise RequestError(422, f"volume dims {volume.geometry.dims} cannot be resampled")
    return resample_iso(volume, (side, side, side))


def _resample_soft(soft: SoftMask, target_geo) -> SoftMask:
    if soft.geometry.dims == target_geo.dims:
        return SoftMask(target_geo, soft.values)
    back = resample_iso(ScalarVolume(soft.geometry, soft.values), target_geo.dims)
    return SoftMask(target_geo, np.clip(back.values, 0.0, 1.0))


def _encode_soft_mask(soft: SoftMask) -> dict:
    mask = threshold(soft, 0.5)
    return {
        "soft_b64": base64.b64encode(
            np.ascontiguousarray(soft.values, dtype="<f4").tobytes()).decode(),
        "mask_b64": base64.b64encode(mask.values.tobytes()).decode(),
    }


def handle_segment(state: ServiceState, body: dict) -> dict:
    volume = _volume_from(body)
    model_vol = _to_model_grid(state, volume)
    soft = state.net.forward_block1(model_vol)
    out = _resample_soft(soft, volume.geometry)
    side = state.net.config.input_side
    reply = _encode_soft_mask(out)
    reply["scale"] = [side / d for d in volume.geometry.dims]
    reply["model_version"] = state.model_version
    return reply


def _metrics_block(gt: BinaryMask, mask: BinaryMask) -> dict:
    both_empty = not gt.values.any() and not mask.values.any()
    block = {"iou": 1.0 if both_empty else iou(gt, mask)}
    if gt.values.any() and mask.values.any():
        block["asd_mm"] = asd(gt, mask)
    else:
        block["asd_mm"] = None
    return block


def handle_correct(state: ServiceState, body: dict) -> dict:
    volume = _volume_from(body)
    prior = _soft_from(body, "prior_b64", volume.geometry)
    gt = _mask_from(body, "ground_truth_b64", volume.geometry)
    points = body.get("points")
    if (not isinstance(points, list) or len(points) != 2
            or any(not isinstance(p, list) or len(p) != 3 for p in points)):
        raise RequestError(400, "'points' must be two [z, y, x] triples")
    try:
        pair = validate_user_points(points[0], points[1], volume.geometry)
    except ValueError as exc:
        raise RequestError(409, str(exc)) from exc

    side = state.net.config.input_side
    scale = [side / d for d in volume.geometry.dims]
    model_vol = _to_model_grid(state, volume)
    prior_model = _resample_soft(prior, model_vol.geometry)
    scaled = [
        tuple((c + 0.5) * s - 0.5 for c, s in zip(p, scale))
        for p in (pair.p0, pair.p1)
    ]
    try:
        model_pair = validate_user_points(scaled[0], scaled[1], model_vol.geometry)
        wmap = attraction_map(model_pair, FieldParams(decay_p=state.loss_config.decay_p),
                              model_vol.geometry)
    except ValueError as exc:
        raise RequestError(409, str(exc)) from exc

    corrected = state.net.forward_block2(model_vol, prior_model, wmap)
    out = _resample_soft(corrected, volume.geometry)
    reply = _encode_soft_mask(out)
    reply["scale"] = scale
    reply["model_version"] = state.model_version
    if gt is not None:
        if not gt.values.any():
            raise RequestError(422, "ground truth mask is empty")
        reply["metrics"] = {
            "initial": _metrics_block(gt, threshold(prior, 0.5)),
            "corrected": _metrics_block(gt, threshold(out, 0.5)),
        }
    return reply


class _Handler(BaseHTTPRequestHandler):
    state: ServiceState  # injected by make_server
    quiet = True

    def log_message(self, *args):  # noqa: D102 - silence default stderr chatter
        if not self.quiet:
            super().log_message(*args)

    def _reply(self, status: int, payload: dict):
        blob = json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(blob)))
        self.end_headers()
        self.wfile.write(blob)

    def _error(self, status: int, message: str):
        self._reply(status, {"code": status, "message": message})

    def do_GET(self):
        if self.path == "/v1/health":
            self._reply(200, {"status": "ok", "model_version": self.state.model_version})
        else:
            self._error(404, f"unknown path {self.path}")

    def do_POST(self):
        handlers = {"/v1/segment": handle_segment, "/v1/correct": handle_correct}
        fn = handlers.get(self.path)
        if fn is None:
            self._error(404, f"unknown path {self.path}")
            return
        length = int(self.headers.get("Content-Length") or 0)
        if length > self.state.max_body_bytes:
            self._error(413, f"body exceeds {self.state.max_body_bytes} bytes")
            return
        try:
            body = json.loads(self.rfile.read(length).decode())
            if not isinstance(body, dict):
                raise RequestError(400, "body must be a JSON object")
            self._reply(200, fn(self.state, body))
        except RequestError as exc:
            self._error(exc.status, exc.message)
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            self._error(400, f"malformed JSON body: {exc}")
        except Exception as exc:  # noqa: BLE001 - last-resort 500, still JSON
            self._error(500, f"internal error: {exc}")


def make_server(state: ServiceState, host: str = "127.0.0.1", port: int = 0) -> ThreadingHTTPServer:
    handler = type("Handler", (_Handler,), {"state": state})
    return ThreadingHTTPServer((host, port), handler)


def serve_forever(state: ServiceState, host: str, port: int) -> None:
    server = make_server(state, host, port)
    print(f"serving on http://{host}:{server.server_address[1]} "
          f"(model {state.model_version})")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.shutdown()


def run_in_thread(state: ServiceState, host: str = "127.0.0.1") -> tuple[ThreadingHTTPServer, int]:
    """Start the service on an ephemeral port; returns (server, port)."""
    server = make_server(state, host, 0)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return server, server.server_address[1]
