"""Loaders for transfer dumps, labels and snapshots, plus an explorer-style
HTTP client with an on-disk page cache.

CSV is the canonical interchange format (exact column order below); JSONL is
accepted for streaming dumps. Timestamps are normalized to UTC unix seconds at
parse time: integers pass through, ISO-8601 strings are converted.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import requests

from .model import (
    AddressLabel,
    CacheCorrupt,
    EmptyDataset,
    EllError,
    HttpError,
    InvariantViolation,
    LiquiditySnapshot,
    MalformedRow,
    MarketSnapshot,
    RateLimited,
    SchemaMismatch,
    Transfer,
    UnknownCategory,
)

log = logging.getLogger(__name__)

CSV_COLUMNS = (
    "tx_hash",
    "block_number",
    "timestamp",
    "from",
    "to",
    "token",
    "raw_amount",
    "usd_value",
    "gas_fee",
)

API_KEY_ENV = "ELL_EXPLORER_API_KEY"


def _parse_timestamp(value) -> int:
    if isinstance(value, (int, float)):
        return int(value)
    text = str(value).strip()
    try:
        return int(text)
    except ValueError:
        pass
    try:
        dt = datetime.fromisoformat(text.replace("Z", "+00:00"))
    except ValueError as exc:
        raise ValueError(f"unparseable timestamp {value!r}") from exc
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def _row_to_transfer(row: dict, index: int) -> Transfer:
    try:
        return Transfer(
            tx_hash=str(row["tx_hash"]),
            block_number=int(row["block_number"]),
            timestamp=_parse_timestamp(row["timestamp"]),
            from_addr=str(row["from"]),
            to_addr=str(row["to"]),
            token=str(row["token"]),
            raw_amount=int(row["raw_amount"]),
            usd_value=float(row["usd_value"]),
            gas_fee=float(row["gas_fee"]),
        )
    except (KeyError, ValueError, TypeError, InvariantViolation) as exc:
        raise MalformedRow(index, str(exc)) from exc


def _sniff_format(path: Path, format: Optional[str]) -> str:
    if format:
        if format not in ("csv", "jsonl"):
            raise SchemaMismatch(f"unsupported format {format!r}")
        return format
    return "jsonl" if path.suffix in (".jsonl", ".ndjson") else "csv"


def parse_transfers(path, format: Optional[str] = None) -> list[Transfer]:
    """Load transfers from a CSV or JSONL dump, sorted by (block, row order).

    Raises SchemaMismatch on a wrong header, MalformedRow on a bad row (with
    its index), EmptyDataset when there are no data rows.
    """
    path = Path(path)
    fmt = _sniff_format(path, format)
    rows: list[Transfer] = []
    if fmt == "csv":
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise EmptyDataset(f"{path} is empty")
            if tuple(header) != CSV_COLUMNS:
                missing = set(CSV_COLUMNS) - set(header)
                raise SchemaMismatch(
                    f"bad header {header}; missing columns {sorted(missing)}"
                )
            for i, raw in enumerate(reader):
                if len(raw) != len(CSV_COLUMNS):
                    raise MalformedRow(i, f"expected {len(CSV_COLUMNS)} fields, got {len(raw)}")
                rows.append(_row_to_transfer(dict(zip(CSV_COLUMNS, raw)), i))
    else:
        with open(path, encoding="utf-8") as fh:
            for i, line in enumerate(fh):
                line = line.strip()
                if not line:
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise MalformedRow(i, f"bad json: {exc}") from exc
                missing = set(CSV_COLUMNS) - set(obj)
                if missing:
                    raise SchemaMismatch(f"row {i} missing keys {sorted(missing)}")
                rows.append(_row_to_transfer(obj, i))
    if not rows:
        raise EmptyDataset(f"{path} has no data rows")
    # stable sort: input order is preserved within a block
    rows.sort(key=lambda t: t.block_number)
    return rows


def write_transfers(transfers: Sequence[Transfer], path, format: Optional[str] = None) -> None:
    path = Path(path)
    fmt = _sniff_format(path, format)
    if fmt == "csv":
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_COLUMNS)
            for t in transfers:
                writer.writerow([
                    t.tx_hash, t.block_number, t.timestamp, t.from_addr, t.to_addr,
                    t.token, t.raw_amount, repr(t.usd_value), repr(t.gas_fee),
                ])
    else:
        with open(path, "w", encoding="utf-8") as fh:
            for t in transfers:
                fh.write(json.dumps({
                    "tx_hash": t.tx_hash,
                    "block_number": t.block_number,
                    "timestamp": t.timestamp,
                    "from": t.from_addr,
                    "to": t.to_addr,
                    "token": t.token,
                    "raw_amount": t.raw_amount,
                    "usd_value": t.usd_value,
                    "gas_fee": t.gas_fee,
                }, sort_keys=True))
                fh.write("\n")


def parse_labels(path) -> list[AddressLabel]:
    """JSON array of {address, category, source}. Categories are a closed
    enumeration; anything else raises UnknownCategory."""
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise MalformedRow(0, f"bad labels json: {exc}") from exc
    if not isinstance(data, list):
        raise SchemaMismatch("labels file must be a JSON array")
    out = []
    for i, entry in enumerate(data):
        if not isinstance(entry, dict):
            raise MalformedRow(i, "label entry must be an object")
        try:
            out.append(AddressLabel(
                address=str(entry["address"]),
                category=str(entry["category"]),
                source=str(entry.get("source", "")),
            ))
        except KeyError as exc:
            raise MalformedRow(i, f"missing key {exc}") from exc
        except UnknownCategory:
            raise
        except InvariantViolation as exc:
            raise MalformedRow(i, str(exc)) from exc
    return out


def load_pool_snapshot(path) -> LiquiditySnapshot:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    try:
        return LiquiditySnapshot(
            q_a=float(data["q_a"]),
            q_b=float(data["q_b"]),
            p_a=float(data["p_a"]),
            p_b=float(data["p_b"]),
            timestamp=int(data["timestamp"]),
        )
    except KeyError as exc:
        raise SchemaMismatch(f"pool snapshot missing {exc}") from exc


def load_market_snapshot(path) -> MarketSnapshot:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    try:
        balances = {
            str(addr).strip().lower(): float(bal)
            for addr, bal in dict(data["balances"]).items()
        }
        return MarketSnapshot(
            volume_24h=float(data["volume_24h"]),
            market_cap=float(data["market_cap"]),
            balances=balances,
            timestamp=int(data["timestamp"]),
        )
    except KeyError as exc:
        raise SchemaMismatch(f"market snapshot missing {exc}") from exc


# --------------------------------------------------------------------------
# dataset bundle

@dataclass(frozen=True)
class DatasetBundle:
    transfers: tuple[Transfer, ...]
    labels: tuple[AddressLabel, ...]
    pool: Optional[LiquiditySnapshot] = None
    market: Optional[MarketSnapshot] = None

    def with_transfers(self, transfers: Iterable[Transfer]) -> "DatasetBundle":
        return DatasetBundle(tuple(transfers), self.labels, self.pool, self.market)


def load_bundle(data_dir) -> DatasetBundle:
    """Load a dataset directory: transfers.csv (or .jsonl), labels.json,
    pool.json, market.json. Snapshots and labels are optional."""
    data_dir = Path(data_dir)
    transfer_path = None
    for name in ("transfers.csv", "transfers.jsonl"):
        if (data_dir / name).exists():
            transfer_path = data_dir / name
            break
    if transfer_path is None:
        raise EmptyDataset(f"no transfers.csv or transfers.jsonl in {data_dir}")
    transfers = parse_transfers(transfer_path)
    labels: list[AddressLabel] = []
    if (data_dir / "labels.json").exists():
        labels = parse_labels(data_dir / "labels.json")
    pool = None
    if (data_dir / "pool.json").exists():
        pool = load_pool_snapshot(data_dir / "pool.json")
    market = None
    if (data_dir / "market.json").exists():
        market = load_market_snapshot(data_dir / "market.json")
    return DatasetBundle(tuple(transfers), tuple(labels), pool, market)


# --------------------------------------------------------------------------
# explorer client

class ExplorerClient:
    """Paginated fetcher with a content-addressed page cache.

    One JSON file per page under cache_dir plus an index.json manifest, so a
    re-run touches the network zero times. Requests are spaced to respect the
    rps ceiling; 429 responses are retried with exponential backoff up to
    max_retries, then surfaced as RateLimited.
    """

    def __init__(
        self,
        endpoint: str,
        api_key: Optional[str] = None,
        page_size: int = 100,
        cache_dir=None,
        rps: float = 5.0,
        session: Optional[requests.Session] = None,
        sleeper: Callable[[float], None] = time.sleep,
        clock: Callable[[], float] = time.monotonic,
        max_retries: int = 5,
        backoff_base: float = 0.5,
        backoff_cap: float = 8.0,
        timeout: float = 30.0,
    ):
        self.endpoint = endpoint
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV, "")
        self.page_size = page_size
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self.min_interval = 1.0 / rps if rps > 0 else 0.0
        self.session = session or requests.Session()
        self.sleeper = sleeper
        self.clock = clock
        self.max_retries = max_retries
        self.backoff_base = backoff_base
        self.backoff_cap = backoff_cap
        self.timeout = timeout
        self._next_allowed = 0.0
        self.requests_made = 0

    # -- cache helpers

    def _cache_key(self, token: str, page: int) -> str:
        blob = f"{self.endpoint}|{token}|{page}|{self.page_size}"
        return hashlib.sha256(blob.encode()).hexdigest()[:24]

    def _index_path(self) -> Path:
        return self.cache_dir / "index.json"

    def _load_index(self) -> dict:
        path = self._index_path()
        if not path.exists():
            return {}
        try:
            with open(path, encoding="utf-8") as fh:
                index = json.load(fh)
            if not isinstance(index, dict):
                raise ValueError("index is not an object")
            return index
        except (json.JSONDecodeError, ValueError) as exc:
            raise CacheCorrupt(f"bad cache index: {exc}") from exc

    def _cache_read(self, key: str) -> Optional[list]:
        if self.cache_dir is None:
            return None
        index = self._load_index()
        entry = index.get(key)
        if entry is None:
            return None
        page_path = self.cache_dir / entry["file"]
        if not page_path.exists():
            raise CacheCorrupt(f"cache index references missing file {entry['file']}")
        try:
            with open(page_path, encoding="utf-8") as fh:
                payload = json.load(fh)
            return list(payload["rows"])
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise CacheCorrupt(f"bad cache page {entry['file']}: {exc}") from exc

    def _cache_write(self, key: str, token: str, page: int, rows: list) -> None:
        if self.cache_dir is None:
            return
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        fname = f"{key}.json"
        with open(self.cache_dir / fname, "w", encoding="utf-8") as fh:
            json.dump(
                {"endpoint": self.endpoint, "token": token, "page": page,
                 "page_size": self.page_size, "rows": rows},
                fh, sort_keys=True)
        index = {}
        if self._index_path().exists():
            index = self._load_index()
        index[key] = {"file": fname, "token": token, "page": page}
        with open(self._index_path(), "w", encoding="utf-8") as fh:
            json.dump(index, fh, sort_keys=True, indent=2)

    # -- http

    def _throttle(self) -> None:
        now = self.clock()
        if now < self._next_allowed:
            self.sleeper(self._next_allowed - now)
        self._next_allowed = max(now, self._next_allowed) + self.min_interval

    def _get_page(self, token: str, page: int) -> list:
        key = self._cache_key(token, page)
        cached = self._cache_read(key)
        if cached is not None:
            return cached
        attempt = 0
        while True:
            self._throttle()
            self.requests_made += 1
            resp = self.session.get(
                self.endpoint,
                params={"token": token, "page": page, "offset": self.page_size,
                        "apikey": self.api_key},
                timeout=self.timeout,
            )
            if resp.status_code == 429:
                if attempt >= self.max_retries:
                    raise RateLimited(f"still throttled after {attempt} retries")
                delay = min(self.backoff_base * (2 ** attempt), self.backoff_cap)
                log.info("429 from explorer, backing off %.2fs (attempt %d)", delay, attempt + 1)
                self.sleeper(delay)
                attempt += 1
                continue
            if resp.status_code != 200:
                raise HttpError(resp.status_code, resp.text)
            try:
                payload = resp.json()
                rows = list(payload["result"])
            except (ValueError, KeyError, TypeError) as exc:
                raise HttpError(resp.status_code, f"unparseable body: {exc}")
            self._cache_write(key, token, page, rows)
            return rows

    def fetch(self, token: str) -> list[Transfer]:
        """Paginate until a short or empty page, returning parsed transfers."""
        all_rows: list[dict] = []
        page = 1
        while True:
            rows = self._get_page(token, page)
            all_rows.extend(rows)
            if len(rows) < self.page_size:
                break
            page += 1
        transfers = [_row_to_transfer(row, i) for i, row in enumerate(all_rows)]
        transfers.sort(key=lambda t: t.block_number)
        return transfers


def fetch_explorer(
    token: str,
    endpoint: str,
    api_key: Optional[str] = None,
    page_size: int = 100,
    **kwargs,
) -> list[Transfer]:
    client = ExplorerClient(endpoint, api_key=api_key, page_size=page_size, **kwargs)
    return client.fetch(token)
