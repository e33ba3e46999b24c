"""Shared test helpers: a transfer factory and a scripted explorer session."""

from __future__ import annotations

import itertools
import json

from ell.model import AddressLabel, Transfer

EPOCH = 1_700_000_000
TOKEN = "0x" + "feed" * 10

# Global counter keeps default tx hashes unique. No test asserts on generated
# hash values; pass tx_hash explicitly where tie-break order matters.
_seq = itertools.count(1)


def mk_transfer(
    frm,
    to,
    usd=100.0,
    ts=EPOCH,
    raw=None,
    token=TOKEN,
    tx_hash=None,
    block=None,
    gas=0.001,
):
    if raw is None:
        raw = int(usd * 1e9)
    if tx_hash is None:
        tx_hash = f"0x{next(_seq):064x}"
    if block is None:
        block = max(0, (ts - EPOCH) // 3 + 1)
    return Transfer(
        tx_hash=tx_hash,
        block_number=block,
        timestamp=ts,
        from_addr=frm,
        to_addr=to,
        token=token,
        raw_amount=raw,
        usd_value=usd,
        gas_fee=gas,
    )


def mk_label(addr, category="exchange", source="test"):
    return AddressLabel(address=addr, category=category, source=source)


def transfer_row(t: Transfer) -> dict:
    """Transfer rendered as an explorer/JSONL row (csv column names)."""
    return {
        "tx_hash": t.tx_hash,
        "block_number": t.block_number,
        "timestamp": t.timestamp,
        "from": t.from_addr,
        "to": t.to_addr,
        "token": t.token,
        "raw_amount": t.raw_amount,
        "usd_value": t.usd_value,
        "gas_fee": t.gas_fee,
    }


class FakeResponse:
    def __init__(self, status_code, payload=None, text=""):
        self.status_code = status_code
        self._payload = payload
        self.text = text or (json.dumps(payload) if payload is not None else "")

    def json(self):
        if self._payload is None:
            raise ValueError("no body")
        return self._payload


class FakeExplorerSession:
    """Scripted explorer backend.

    ``pages`` maps token -> list of pages (each a list of row dicts); a page
    index past the end returns an empty page. The first ``throttle_first``
    requests answer 429 before real pages are served.
    """

    def __init__(self, pages, throttle_first=0):
        self.pages = pages
        self.throttle_first = throttle_first
        self.calls: list[dict] = []

    def get(self, url, params=None, timeout=None):
        self.calls.append(dict(params))
        if self.throttle_first > 0:
            self.throttle_first -= 1
            return FakeResponse(429, text="rate limit exceeded")
        token = params["token"]
        page = int(params["page"])
        token_pages = self.pages.get(token, [])
        rows = token_pages[page - 1] if page <= len(token_pages) else []
        return FakeResponse(200, {"status": "1", "result": rows})
