"""Newline-delimited JSON request loop over stdin/stdout.

Requests:  {"id": int, "op": "hello" | "fit_predict" | "shutdown",
            "payload": {...}}
Responses: {"id": int, "status": "ok" | "error", "payload": {...}}

fit_predict payload: {"feature_names": [str], "train_x": [[num]],
"train_y": [num], "test_x": [[num]]} -> {"pred": [num]}.

Each fit_predict is stateless: the model is fit fresh on the request's
training table. Malformed lines answer with id -1 and the loop continues,
so one bad client line never kills the server.
"""

from __future__ import annotations

import argparse
import json
import math
import sys

PROTOCOL_VERSION = "1"


class RequestError(Exception):
    pass


def _validate_fit_predict(payload) -> tuple[list[str], list[list[float]], list[float], list[list[float]]]:
    if not isinstance(payload, dict):
        raise RequestError("fit_predict payload must be an object")
    try:
        names = payload["feature_names"]
        train_x = payload["train_x"]
        train_y = payload["train_y"]
        test_x = payload["test_x"]
    except KeyError as exc:
        raise RequestError(f"fit_predict payload missing field {exc}") from None
    if not isinstance(names, list) or not all(isinstance(n, str) for n in names):
        raise RequestError("feature_names must be a list of strings")
    width = len(names)
    for label, rows in (("train_x", train_x), ("test_x", test_x)):
        if not isinstance(rows, list) or not all(
            isinstance(r, list) and len(r) == width for r in rows
        ):
            raise RequestError(f"{label} rows must match feature_names width {width}")
        for r in rows:
            if not all(isinstance(v, (int, float)) and math.isfinite(v) for v in r):
                raise RequestError(f"{label} contains a non-finite or non-numeric value")
    if not isinstance(train_y, list) or len(train_y) != len(train_x):
        raise RequestError("train_y length must match train_x")
    if not train_y:
        raise RequestError("fit_predict needs at least one training row")
    if not all(isinstance(v, (int, float)) and math.isfinite(v) for v in train_y):
        raise RequestError("train_y contains a non-finite or non-numeric value")
    return names, train_x, train_y, test_x


class MockModel:
    """Dependency-free stand-in: predicts the training-target mean."""

    backend = "mock-mean"

    def fit_predict(self, train_x, train_y, test_x):
        mean = sum(train_y) / len(train_y)
        return [mean] * len(test_x)


class TabPFNModel:
    """Pretrained tabular regressor, fit in-context per request."""

    backend = "tabpfn"

    def __init__(self):
        from tabpfn import TabPFNRegressor  # noqa: F401 (import checked at startup)

        self._regressor_cls = TabPFNRegressor

    def fit_predict(self, train_x, train_y, test_x):
        model = self._regressor_cls(random_state=0)
        model.fit(train_x, train_y)
        pred = model.predict(test_x)
        return [float(v) for v in pred]


def _response(req_id, status, payload):
    return json.dumps({"id": req_id, "status": status, "payload": payload})


def serve(mode: str, stdin=None, stdout=None) -> None:
    """Serve requests until shutdown or EOF."""
    stdin = stdin if stdin is not None else sys.stdin
    stdout = stdout if stdout is not None else sys.stdout
    if mode == "mock":
        model = MockModel()
    elif mode == "real":
        try:
            model = TabPFNModel()
        except ImportError as exc:
            print(f"real mode requires the tabpfn package: {exc}", file=sys.stderr)
            raise SystemExit(2)
    else:
        raise SystemExit(f"unknown mode {mode!r}")

    def emit(text: str) -> None:
        stdout.write(text + "\n")
        stdout.flush()

    from . import __version__

    for line in stdin:
        line = line.strip()
        if not line:
            continue
        try:
            req = json.loads(line)
        except json.JSONDecodeError:
            emit(_response(-1, "error", {"message": "malformed JSON line"}))
            continue
        req_id = req.get("id") if isinstance(req, dict) else None
        if not isinstance(req_id, int):
            emit(_response(-1, "error", {"message": "request id must be an integer"}))
            continue
        op = req.get("op")
        if op == "hello":
            emit(
                _response(
                    req_id,
                    "ok",
                    {"backend": model.backend, "mode": mode, "version": __version__,
                     "protocol": PROTOCOL_VERSION},
                )
            )
        elif op == "fit_predict":
            try:
                _, train_x, train_y, test_x = _validate_fit_predict(req.get("payload"))
                pred = model.fit_predict(train_x, train_y, test_x)
                if not all(math.isfinite(v) for v in pred):
                    raise RequestError("model produced non-finite predictions")
                emit(_response(req_id, "ok", {"pred": pred}))
            except RequestError as exc:
                emit(_response(req_id, "error", {"message": str(exc)}))
            except Exception as exc:  # model failure must not kill the loop
                emit(_response(req_id, "error", {"message": f"{type(exc).__name__}: {exc}"}))
        elif op == "shutdown":
            emit(_response(req_id, "ok", {}))
            break
        else:
            emit(_response(req_id, "error", {"message": f"unknown op {op!r}"}))


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="tabular-bridge", description=__doc__)
    parser.add_argument("--mode", choices=["real", "mock"], default="mock")
    args = parser.parse_args(argv)
    serve(args.mode)
    return 0


if __name__ == "__main__":
    sys.exit(main())
