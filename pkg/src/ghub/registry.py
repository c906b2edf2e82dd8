"""Permissioned, hash-chained, append-only DID registry.

Every committed transaction lives in its own block; blocks are linked by
SHA-256 over their canonical bytes, so any single-byte mutation of the
persisted chain is detectable. Writes are restricted to admitted members
(admitted at genesis or by an admin-signed admission), and owners submit
their own grants: a transaction's controller must be the DID derived from
the submitting member's key, which is what makes ControllerMismatch
checkable here rather than on trust.
"""

from __future__ import annotations

import hashlib
import threading
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

from .canonical import canonical_bytes, parse
from .identity import (
    Did,
    SignedDidDocument,
    as_did,
    b64,
    canonicalize,
    derive_did,
    unb64,
    verify_signature,
)
from .wire import Dispatcher, ServiceError, request

GENESIS_PREV_HASH = "0" * 64

KIND_CREATE = "create"
KIND_UPDATE = "update"
KIND_REVOKE = "revoke"
KIND_ADMIT = "admit"
KIND_GENESIS = "genesis"

DID_TX_KINDS = (KIND_CREATE, KIND_UPDATE, KIND_REVOKE)


class RegistryError(ServiceError):
    pass


class ResolutionStatus(Enum):
    ACTIVE = "Active"
    REVOKED = "Revoked"
    EXPIRED = "Expired"
    NOT_FOUND = "NotFound"


@dataclass(frozen=True)
class MemberId:
    public_key: bytes
    label: str

    def to_json(self) -> dict:
        return {"public_key": b64(self.public_key), "label": self.label}

    @classmethod
    def from_json(cls, obj: dict) -> "MemberId":
        return cls(public_key=unb64(obj["public_key"]), label=str(obj["label"]))


@dataclass(frozen=True)
class RegistryTx:
    kind: str
    did: Did
    payload: SignedDidDocument | None
    submitter: MemberId
    seq: int
    submitter_signature: bytes

    def to_json(self) -> dict:
        obj = {
            "kind": self.kind,
            "did": self.did.render(),
            "submitter": self.submitter.to_json(),
            "seq": self.seq,
            "submitter_signature": b64(self.submitter_signature),
        }
        if self.payload is not None:
            obj["payload"] = self.payload.to_json()
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "RegistryTx":
        payload = obj.get("payload")
        return cls(
            kind=str(obj["kind"]),
            did=Did.parse(obj["did"]),
            payload=SignedDidDocument.from_json(payload) if payload is not None else None,
            submitter=MemberId.from_json(obj["submitter"]),
            seq=int(obj["seq"]),
            submitter_signature=unb64(obj["submitter_signature"]),
        )


def tx_signing_bytes(tx: RegistryTx) -> bytes:
    """Canonical tx bytes minus the signature field; what the submitter signs."""
    obj = tx.to_json()
    obj.pop("submitter_signature")
    return canonical_bytes(obj)


def signed_tx(kind: str, did, payload, submitter_keypair, label: str, seq: int) -> RegistryTx:
    """Build and sign a transaction with the submitting member's key."""
    tx = RegistryTx(
        kind=kind,
        did=as_did(did),
        payload=payload,
        submitter=MemberId(public_key=submitter_keypair.public_key, label=label),
        seq=seq,
        submitter_signature=b"",
    )
    return RegistryTx(
        kind=tx.kind,
        did=tx.did,
        payload=tx.payload,
        submitter=tx.submitter,
        seq=tx.seq,
        submitter_signature=submitter_keypair.sign(tx_signing_bytes(tx)),
    )


def member_admission_bytes(member: MemberId) -> bytes:
    """Canonical member bytes; what the registry admin signs to admit a member."""
    return canonical_bytes(member.to_json())


@dataclass(frozen=True)
class LedgerBlock:
    height: int
    prev_hash: str
    txs: tuple[dict, ...]
    block_hash: str

    def to_json(self) -> dict:
        return {
            "height": self.height,
            "prev_hash": self.prev_hash,
            "txs": list(self.txs),
            "block_hash": self.block_hash,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "LedgerBlock":
        return cls(
            height=int(obj["height"]),
            prev_hash=str(obj["prev_hash"]),
            txs=tuple(obj["txs"]),
            block_hash=str(obj["block_hash"]),
        )


def _block_hash(height: int, prev_hash: str, txs: list[dict]) -> str:
    body = canonical_bytes({"height": height, "prev_hash": prev_hash, "txs": txs})
    return hashlib.sha256(body).hexdigest()


@dataclass(frozen=True)
class ResolutionResult:
    status: ResolutionStatus
    document: SignedDidDocument | None
    as_of: int


class Registry:
    """The ledger plus its materialized state. One writer at a time; a commit
    returning implies visibility to every subsequent resolve (no caching)."""

    def __init__(self, admin_key: bytes, chain_path: str | Path | None = None):
        if len(admin_key) != 32:
            raise RegistryError("MalformedTx", "admin key must be 32 bytes")
        self.admin_key = admin_key
        self._chain_path = Path(chain_path) if chain_path is not None else None
        self._lock = threading.RLock()
        self._blocks: list[LedgerBlock] = []
        self._members: dict[bytes, str] = {}
        self._member_seq: dict[bytes, int] = {}
        # did -> (status: "active"|"revoked", latest signed document)
        self._state: dict[str, tuple[str, SignedDidDocument]] = {}

    # -- construction -------------------------------------------------------

    @classmethod
    def create(
        cls,
        admin_key: bytes,
        initial_members: list[MemberId],
        chain_path: str | Path | None = None,
    ) -> "Registry":
        """Start a fresh chain: genesis at height 0 encodes the admin key and members."""
        reg = cls(admin_key, chain_path)
        seen = set()
        for member in initial_members:
            if member.public_key in seen:
                raise RegistryError("DuplicateMember", f"duplicate member key for {member.label!r}")
            seen.add(member.public_key)
        entry = {
            "kind": KIND_GENESIS,
            "admin_key": b64(admin_key),
            "members": [m.to_json() for m in initial_members],
        }
        with reg._lock:
            reg._commit(entry)
            for member in initial_members:
                reg._members[member.public_key] = member.label
        return reg

    @classmethod
    def load(cls, chain_path: str | Path) -> "Registry":
        """Reload a persisted chain, verifying every hash and signature before serving."""
        path = Path(chain_path)
        lines = [ln for ln in path.read_bytes().split(b"\n") if ln]
        if not lines:
            raise RegistryError("CorruptChain", f"{path} is empty")
        try:
            blocks = [LedgerBlock.from_json(parse(ln)) for ln in lines]
            genesis = blocks[0].txs[0]
            if genesis.get("kind") != KIND_GENESIS:
                raise ValueError("block 0 is not a genesis block")
            admin_key = unb64(genesis["admin_key"])
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise RegistryError("CorruptChain", f"{path}: {exc}") from exc
        reg = cls(admin_key, chain_path=None)
        for block in blocks:
            height = len(reg._blocks)
            prev = reg._blocks[-1].block_hash if reg._blocks else GENESIS_PREV_HASH
            if block.height != height or block.prev_hash != prev:
                raise RegistryError("CorruptChain", f"{path}: broken link at height {height}")
            if _block_hash(block.height, block.prev_hash, list(block.txs)) != block.block_hash:
                raise RegistryError("CorruptChain", f"{path}: hash mismatch at height {height}")
            for entry in block.txs:
                if entry.get("kind") == KIND_GENESIS:
                    if height != 0:
                        raise RegistryError("CorruptChain", f"{path}: genesis at height {height}")
                else:
                    try:
                        reg._validate_entry(entry)
                    except RegistryError as exc:
                        raise RegistryError(
                            "CorruptChain", f"{path}: block {height}: {exc.message}"
                        ) from exc
                try:
                    reg._apply_entry(entry)
                except (RegistryError, ValueError, KeyError, TypeError) as exc:
                    raise RegistryError("CorruptChain", f"{path}: block {height}: {exc}") from exc
            reg._blocks.append(block)
        reg._chain_path = path
        return reg

    # -- write path ----------------------------------------------------------

    def admit_member(self, admin_signature: bytes, new_member: MemberId) -> int:
        """Admit a member by admin signature over the canonical member bytes."""
        entry = {
            "kind": KIND_ADMIT,
            "member": new_member.to_json(),
            "admin_signature": b64(admin_signature),
        }
        with self._lock:
            self._validate_entry(entry)
            self._apply_entry(entry)
            return self._commit(entry)

    def submit(self, tx: RegistryTx) -> int:
        """Validate and commit one DID transaction; returns its block height."""
        entry = tx.to_json()
        with self._lock:
            self._validate_entry(entry)
            self._apply_entry(entry)
            return self._commit(entry)

    def _commit(self, entry: dict) -> int:
        height = len(self._blocks)
        prev_hash = self._blocks[-1].block_hash if self._blocks else GENESIS_PREV_HASH
        block = LedgerBlock(
            height=height,
            prev_hash=prev_hash,
            txs=(entry,),
            block_hash=_block_hash(height, prev_hash, [entry]),
        )
        self._blocks.append(block)
        if self._chain_path is not None:
            with open(self._chain_path, "ab") as fh:
                fh.write(canonical_bytes(block.to_json()) + b"\n")
                fh.flush()
        return height

    # -- validation ----------------------------------------------------------

    def _validate_entry(self, entry: dict) -> None:
        kind = entry.get("kind")
        if kind == KIND_GENESIS:
            raise RegistryError("MalformedTx", "genesis entries only appear at height 0")
        if kind == KIND_ADMIT:
            try:
                member = MemberId.from_json(entry["member"])
                signature = unb64(entry["admin_signature"])
            except (KeyError, ValueError, TypeError) as exc:
                raise RegistryError("MalformedTx", str(exc)) from exc
            if not verify_signature(self.admin_key, signature, member_admission_bytes(member)):
                raise RegistryError("BadAdminSignature", f"admission of {member.label!r} not signed by admin")
            if member.public_key in self._members:
                raise RegistryError("DuplicateMember", f"{member.label!r} is already a member")
            return
        if kind not in DID_TX_KINDS:
            raise RegistryError("MalformedTx", f"unknown tx kind {kind!r}")
        try:
            tx = RegistryTx.from_json(entry)
        except (KeyError, ValueError, TypeError) as exc:
            raise RegistryError("MalformedTx", str(exc)) from exc
        self._check_did_tx(tx)

    def _check_did_tx(self, tx: RegistryTx) -> None:
        if tx.submitter.public_key not in self._members:
            raise RegistryError("NotAMember", f"{tx.submitter.label!r} is not an admitted member")
        if not verify_signature(tx.submitter.public_key, tx.submitter_signature, tx_signing_bytes(tx)):
            raise RegistryError("BadSignature", "submitter signature does not verify")
        last = self._member_seq.get(tx.submitter.public_key, 0)
        if tx.seq <= last:
            raise RegistryError("StaleSeq", f"seq {tx.seq} not greater than last accepted {last}")
        submitter_did = derive_did(tx.submitter.public_key)

        did_key = tx.did.render()
        current = self._state.get(did_key)

        if tx.kind == KIND_CREATE:
            if tx.payload is None:
                raise RegistryError("MalformedTx", "create requires a signed document payload")
            if current is not None:
                raise RegistryError("DuplicateDid", f"{did_key} already exists")
            self._check_payload(tx, expected_controller=submitter_did)
        elif tx.kind == KIND_UPDATE:
            if tx.payload is None:
                raise RegistryError("MalformedTx", "update requires a signed document payload")
            if current is None:
                raise RegistryError("UnknownDid", f"{did_key} was never created")
            if current[0] == "revoked":
                raise RegistryError("RevokedDid", f"{did_key} is revoked")
            if current[1].document.controller != submitter_did:
                raise RegistryError("ControllerMismatch", "update not submitted by the controller")
            self._check_payload(tx, expected_controller=current[1].document.controller)
        else:  # revoke
            if tx.payload is not None:
                raise RegistryError("MalformedTx", "revoke carries no payload")
            if current is None:
                raise RegistryError("UnknownDid", f"{did_key} was never created")
            if current[0] == "revoked":
                raise RegistryError("RevokedDid", f"{did_key} is already revoked")
            if current[1].document.controller != submitter_did:
                raise RegistryError("ControllerMismatch", "revoke not submitted by the controller")

    def _check_payload(self, tx: RegistryTx, expected_controller: Did) -> None:
        sdoc = tx.payload
        assert sdoc is not None
        if sdoc.document.id != tx.did:
            raise RegistryError("MalformedTx", "payload document id does not match the tx did")
        problems = sdoc.document.structural_errors()
        if problems:
            raise RegistryError("MalformedTx", "; ".join(problems))
        if sdoc.document.controller != expected_controller or sdoc.signer != sdoc.document.controller:
            raise RegistryError("ControllerMismatch", "document controller does not match the submitter")
        # the submitter IS the controller, so its member key verifies the owner signature
        if not verify_signature(tx.submitter.public_key, sdoc.signature, canonicalize(sdoc.document)):
            raise RegistryError("BadSignature", "owner signature over the document does not verify")

    def _apply_entry(self, entry: dict) -> None:
        kind = entry["kind"]
        if kind == KIND_GENESIS:
            for m in entry["members"]:
                member = MemberId.from_json(m)
                if member.public_key in self._members:
                    raise RegistryError("DuplicateMember", f"{member.label!r} appears twice in genesis")
                self._members[member.public_key] = member.label
            return
        if kind == KIND_ADMIT:
            member = MemberId.from_json(entry["member"])
            self._members[member.public_key] = member.label
            return
        tx = RegistryTx.from_json(entry)
        self._member_seq[tx.submitter.public_key] = tx.seq
        did_key = tx.did.render()
        if tx.kind in (KIND_CREATE, KIND_UPDATE):
            self._state[did_key] = ("active", tx.payload)
        else:
            self._state[did_key] = ("revoked", self._state[did_key][1])

    # -- read path -----------------------------------------------------------

    @property
    def height(self) -> int:
        with self._lock:
            return len(self._blocks) - 1

    @property
    def blocks(self) -> list[LedgerBlock]:
        with self._lock:
            return list(self._blocks)

    def is_member(self, public_key: bytes) -> bool:
        with self._lock:
            return public_key in self._members

    def resolve(self, did, now: int) -> ResolutionResult:
        did_key = as_did(did).render()
        with self._lock:
            head = len(self._blocks) - 1
            current = self._state.get(did_key)
        if current is None:
            return ResolutionResult(ResolutionStatus.NOT_FOUND, None, head)
        status_tag, sdoc = current
        if status_tag == "revoked":
            return ResolutionResult(ResolutionStatus.REVOKED, sdoc, head)
        if now >= sdoc.document.not_after:
            return ResolutionResult(ResolutionStatus.EXPIRED, sdoc, head)
        return ResolutionResult(ResolutionStatus.ACTIVE, sdoc, head)

    def history(self, did) -> list[tuple[int, RegistryTx]]:
        did_key = as_did(did).render()
        out = []
        with self._lock:
            blocks = list(self._blocks)
        for block in blocks:
            for entry in block.txs:
                if entry.get("kind") in DID_TX_KINDS and entry.get("did") == did_key:
                    out.append((block.height, RegistryTx.from_json(entry)))
        return out

    def verify_chain(self) -> bool:
        """Recompute every hash and signature; False on any discrepancy."""
        with self._lock:
            blocks = list(self._blocks)
        return verify_blocks(blocks)


def verify_blocks(blocks: list[LedgerBlock]) -> bool:
    """Chain verification over raw blocks (also used on reloaded/foreign chains)."""
    try:
        if not blocks:
            return False
        admin_key = None
        members: set[bytes] = set()
        prev_hash = GENESIS_PREV_HASH
        for i, block in enumerate(blocks):
            if block.height != i or block.prev_hash != prev_hash:
                return False
            if _block_hash(block.height, block.prev_hash, list(block.txs)) != block.block_hash:
                return False
            for entry in block.txs:
                kind = entry.get("kind")
                if kind == KIND_GENESIS:
                    if i != 0:
                        return False
                    admin_key = unb64(entry["admin_key"])
                    for m in entry["members"]:
                        members.add(MemberId.from_json(m).public_key)
                elif kind == KIND_ADMIT:
                    if admin_key is None:
                        return False
                    member = MemberId.from_json(entry["member"])
                    if not verify_signature(
                        admin_key, unb64(entry["admin_signature"]), member_admission_bytes(member)
                    ):
                        return False
                    members.add(member.public_key)
                elif kind in DID_TX_KINDS:
                    tx = RegistryTx.from_json(entry)
                    if tx.submitter.public_key not in members:
                        return False
                    if not verify_signature(
                        tx.submitter.public_key, tx.submitter_signature, tx_signing_bytes(tx)
                    ):
                        return False
                else:
                    return False
            if i == 0 and (len(block.txs) != 1 or block.txs[0].get("kind") != KIND_GENESIS):
                return False
            prev_hash = block.block_hash
        return True
    except Exception:
        return False


def init_registry(
    admin_key: bytes, initial_members: list[MemberId], chain_path: str | Path | None = None
) -> Registry:
    """Genesis a new registry; see Registry.create."""
    return Registry.create(admin_key, initial_members, chain_path)


def load_registry(chain_path: str | Path) -> Registry:
    """Reload and fully verify a persisted chain; see Registry.load."""
    return Registry.load(chain_path)


# ---------------------------------------------------------------------------
# Service face

def registry_dispatcher(registry: Registry) -> Dispatcher:
    def _resolve(body):
        result = registry.resolve(Did.parse(body["did"]), int(body["now"]))
        return {
            "status": result.status.value,
            "document": result.document.to_json() if result.document else None,
            "as_of": result.as_of,
        }

    def _submit(body):
        try:
            tx = RegistryTx.from_json(body["tx"])
        except (KeyError, ValueError, TypeError) as exc:
            raise RegistryError("MalformedTx", str(exc)) from exc
        return {"height": registry.submit(tx)}

    def _verify(_body):
        return {"ok": registry.verify_chain()}

    def _history(body):
        entries = registry.history(Did.parse(body["did"]))
        return {"entries": [{"height": h, "tx": tx.to_json()} for h, tx in entries]}

    return Dispatcher(
        {
            "registry.resolve": _resolve,
            "registry.submit": _submit,
            "registry.verify": _verify,
            "registry.history": _history,
        }
    )


class RegistryClient:
    """Wire-backed registry access with the same read/write face as Registry."""

    def __init__(self, endpoint: str, timeout: float = 5.0):
        self.endpoint = endpoint
        self.timeout = timeout

    def _request(self, op: str, body: dict):
        try:
            return request(self.endpoint, op, body, timeout=self.timeout)
        except ServiceError as exc:
            raise RegistryError(exc.code, exc.message) from exc

    def resolve(self, did, now: int) -> ResolutionResult:
        body = self._request("registry.resolve", {"did": as_did(did).render(), "now": now})
        doc = body.get("document")
        return ResolutionResult(
            status=ResolutionStatus(body["status"]),
            document=SignedDidDocument.from_json(doc) if doc else None,
            as_of=int(body["as_of"]),
        )

    def submit(self, tx: RegistryTx) -> int:
        return int(self._request("registry.submit", {"tx": tx.to_json()})["height"])

    def verify_chain(self) -> bool:
        return bool(self._request("registry.verify", {})["ok"])

    def history(self, did) -> list[tuple[int, RegistryTx]]:
        body = self._request("registry.history", {"did": as_did(did).render()})
        return [(int(e["height"]), RegistryTx.from_json(e["tx"])) for e in body["entries"]]
