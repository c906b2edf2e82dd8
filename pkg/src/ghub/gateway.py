"""Simulated IoT gateways: each has its own accounts, issues opaque bearer
tokens when an account is linked, and validates only those tokens on invoke.

Deliberately knows nothing about DIDs, registries, or policy decisions, and
must not import those modules; it stands in for an unmodified commercial
gateway. Every request it observes is logged so tests can prove what a
gateway did and did not see.
"""

from __future__ import annotations

import base64
import hashlib
import json
import secrets
import threading
import time
from dataclasses import dataclass

from .wire import Dispatcher, WireServer

ACTIONS = ("read", "write", "actuate")
TOKEN_BYTES = 32
DEFAULT_TOKEN_LIFETIME = 3600


class BadCredentials(Exception):
    pass


@dataclass(frozen=True)
class GatewayResponse:
    status: str  # "OK" | "Rejected"
    body: object

    @property
    def ok(self) -> bool:
        return self.status == "OK"

    def to_json(self) -> dict:
        return {"status": self.status, "body": self.body}


def _hash_password(password: str, salt: bytes) -> str:
    return hashlib.sha256(salt + password.encode("utf-8")).hexdigest()


class Gateway:
    """One silo's controller: accounts, tokens, resources, and a call log."""

    def __init__(
        self,
        gateway_id: str,
        accounts: dict[str, str],
        resources: dict[str, object],
        token_lifetime: int = DEFAULT_TOKEN_LIFETIME,
    ):
        self.gateway_id = gateway_id
        self._lock = threading.Lock()
        self._accounts = {}
        for username, password in accounts.items():
            salt = secrets.token_bytes(16)
            self._accounts[username] = (salt, _hash_password(password, salt))
        self._tokens: dict[str, tuple[str, int, int]] = {}  # token -> (user, issued, expires)
        self._resources = dict(resources)
        self._token_lifetime = token_lifetime
        self._call_log: list[dict] = []
        self._observed: list[str] = []

    # -- account linking (OAuth-style, reduced to bearer tokens) -------------

    def link_account(self, username: str, password: str, now: int) -> str:
        with self._lock:
            entry = self._accounts.get(username)
            if entry is None or _hash_password(password, entry[0]) != entry[1]:
                raise BadCredentials(f"bad credentials for {username!r}")
            token = base64.b64encode(secrets.token_bytes(TOKEN_BYTES)).decode("ascii")
            self._tokens[token] = (username, now, now + self._token_lifetime)
            return token

    def seed_token(self, token: str, username: str, now: int, expires_at: int | None = None) -> None:
        """Pre-provision a token (config-driven deployments link out of band)."""
        with self._lock:
            self._tokens[token] = (username, now, expires_at if expires_at is not None else now + self._token_lifetime)

    # -- the invoke surface ---------------------------------------------------

    def invoke(self, token: str | None, resource: str, action: str, payload, now: int) -> GatewayResponse:
        with self._lock:
            self._observed.append(
                json.dumps(
                    {"token": token, "resource": resource, "action": action, "payload": payload},
                    sort_keys=True,
                    default=str,
                )
            )
            outcome, body = self._invoke_locked(token, resource, action, payload, now)
            self._call_log.append(
                {
                    "timestamp": now,
                    "token_presented": token is not None,
                    "resource": resource,
                    "action": action,
                    "outcome": outcome,
                }
            )
        status = "OK" if outcome == "ok" else "Rejected"
        return GatewayResponse(status=status, body=body)

    def _invoke_locked(self, token, resource, action, payload, now):
        entry = self._tokens.get(token) if token else None
        if entry is None:
            return "bad-token", {"reason": "bad-token"}
        if now >= entry[2]:
            return "expired-token", {"reason": "expired-token"}
        if resource not in self._resources:
            return "unknown-resource", {"reason": "unknown-resource"}
        if action not in ACTIONS:
            return "bad-action", {"reason": "bad-action"}
        if action == "read":
            return "ok", {"resource": resource, "value": self._resources[resource]}
        self._resources[resource] = payload
        return "ok", {"resource": resource, "value": payload}

    # -- observability hooks for tests ----------------------------------------

    @property
    def call_log(self) -> list[dict]:
        with self._lock:
            return [dict(e) for e in self._call_log]

    def resource_value(self, resource: str):
        with self._lock:
            return self._resources.get(resource)

    def assert_never_saw(self, pattern: str | bytes) -> bool:
        """True iff the pattern appears nowhere in anything this gateway received."""
        if isinstance(pattern, bytes):
            pattern = pattern.decode("utf-8", errors="replace")
        with self._lock:
            transcript = "\n".join(self._observed) + "\n" + json.dumps(self._call_log, default=str)
        return pattern not in transcript

    # -- service face ----------------------------------------------------------

    def dispatcher(self) -> Dispatcher:
        def _invoke(body):
            response = self.invoke(
                body.get("token"),
                str(body.get("resource", "")),
                str(body.get("action", "")),
                body.get("payload"),
                int(body.get("now", time.time())),
            )
            return response.to_json()

        return Dispatcher({"gateway.invoke": _invoke})


def serve_gateway(gateway: Gateway, host: str = "127.0.0.1", port: int = 0) -> WireServer:
    return WireServer(gateway.dispatcher(), host, port).start()
