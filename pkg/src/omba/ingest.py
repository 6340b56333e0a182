"""Transaction file parsing and 1-day windowing."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Iterable, Optional

from .model import ANONYMOUS_USER, Basket, Item, Window

log = logging.getLogger(__name__)

SECONDS_PER_DAY = 86400
CANONICAL_HEADER = ["basket_id", "timestamp", "user_id", "product_id", "price"]


class FormatError(ValueError):
    """Fatal configuration problem, e.g. a mapped column missing from the header."""


class OrderError(ValueError):
    pass


@dataclass(frozen=True)
class TransactionRecordFormat:
    basket_id: str = "basket_id"
    timestamp: str = "timestamp"
    user_id: str = "user_id"
    product_id: str = "product_id"
    price: Optional[str] = "price"
    # "seconds" (epoch seconds), "iso" (ISO-8601 date/datetime), or "day" (integer day number)
    timestamp_kind: str = "seconds"
    delimiter: str = ","
    # divide the price column by this column, for sources that store line totals
    quantity: Optional[str] = None

    def __post_init__(self):
        cols = [self.basket_id, self.timestamp, self.user_id, self.product_id]
        if self.price:
            cols.append(self.price)
        if len(set(cols)) != len(cols):
            raise FormatError(f"logical columns must map to distinct physical columns: {cols}")
        if self.timestamp_kind not in ("seconds", "iso", "day"):
            raise FormatError(f"unknown timestamp convention {self.timestamp_kind!r}")


FORMATS = {
    "canonical": TransactionRecordFormat(),
    # Dunnhumby "The Complete Journey" transaction_data.csv
    "cj": TransactionRecordFormat(
        basket_id="BASKET_ID",
        timestamp="DAY",
        user_id="household_key",
        product_id="PRODUCT_ID",
        price="SALES_VALUE",
        quantity="QUANTITY",
        timestamp_kind="day",
    ),
}


@dataclass
class ParseResult:
    baskets: list[Basket]
    skipped: list[tuple[int, str]] = field(default_factory=list)

    @property
    def skipped_count(self) -> int:
        return len(self.skipped)


def _parse_time(raw: str, kind: str) -> float:
    raw = raw.strip()
    if kind == "seconds":
        t = float(raw)
    elif kind == "day":
        t = float(int(raw)) * SECONDS_PER_DAY
    else:
        dt = datetime.fromisoformat(raw)
        # timestamps are naive local time; pin to UTC so arithmetic is stable
        if dt.tzinfo is None:
            dt = dt.replace(tzinfo=timezone.utc)
        t = dt.timestamp()
    if not math.isfinite(t):
        raise ValueError(f"non-finite timestamp {raw!r}")
    return t


def _parse_price(raw: Optional[str], qty: Optional[str]) -> Optional[float]:
    if raw is None or raw.strip() == "":
        return None
    price = float(raw)
    if qty is not None and qty.strip() != "":
        q = float(qty)
        if q > 0:
            price = price / q
    if not math.isfinite(price) or price < 0:
        raise ValueError(f"invalid price {raw!r}")
    return price


def parse_transactions(source, fmt: TransactionRecordFormat = FORMATS["canonical"]) -> ParseResult:
    """Group rows of a delimited file into baskets sorted by (timestamp, basket_id).

    ``source`` may be a binary or text file object, or bytes. Malformed rows
    are skipped and reported in ``ParseResult.skipped`` as (line, reason).
    A price column that is absent from the format yields price 1.0.
    """
    if isinstance(source, (bytes, bytearray)):
        text = io.StringIO(source.decode("utf-8"))
    elif isinstance(source, io.TextIOBase):
        text = source
    else:
        text = io.TextIOWrapper(source, encoding="utf-8", newline="")
    reader = csv.reader(text, delimiter=fmt.delimiter)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise FormatError("missing header row") from None

    required = [fmt.basket_id, fmt.timestamp, fmt.user_id, fmt.product_id]
    if fmt.price:
        required.append(fmt.price)
    if fmt.quantity:
        required.append(fmt.quantity)
    missing = [c for c in required if c not in header]
    if missing:
        raise FormatError(f"missing required column(s): {', '.join(missing)}")
    col = {name: header.index(name) for name in required}

    groups: dict[str, dict] = {}
    skipped: list[tuple[int, str]] = []
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        try:
            if len(row) != len(header):
                raise ValueError(f"expected {len(header)} fields, got {len(row)}")
            bid = row[col[fmt.basket_id]].strip()
            pid = row[col[fmt.product_id]].strip()
            if not bid or not pid:
                raise ValueError("empty basket or product id")
            t = _parse_time(row[col[fmt.timestamp]], fmt.timestamp_kind)
            if fmt.price:
                qty = row[col[fmt.quantity]] if fmt.quantity else None
                price = _parse_price(row[col[fmt.price]], qty)
            else:
                price = 1.0
            user = row[col[fmt.user_id]].strip() or ANONYMOUS_USER
        except ValueError as exc:
            log.warning("line %d skipped: %s", lineno, exc)
            skipped.append((lineno, str(exc)))
            continue

        g = groups.get(bid)
        if g is None:
            groups[bid] = {"t": t, "user": user, "items": {pid: price}}
        else:
            g["t"] = min(g["t"], t)
            g["items"].setdefault(pid, price)

    baskets = [
        Basket(g["t"], g["user"], tuple(Item(p, c) for p, c in g["items"].items()), bid)
        for bid, g in groups.items()
    ]
    baskets.sort(key=lambda b: (b.timestamp, b.basket_id))
    return ParseResult(baskets, skipped)


def read_transactions(path, fmt: TransactionRecordFormat = FORMATS["canonical"]) -> ParseResult:
    with open(path, "rb") as fh:
        return parse_transactions(fh, fmt)


def _midnight(t: float) -> float:
    return math.floor(t / SECONDS_PER_DAY) * SECONDS_PER_DAY


def window_stream(baskets: Iterable[Basket], window_days: int = 1) -> list[Window]:
    """Partition a time-sorted basket list into contiguous fixed-length windows.

    Empty windows are emitted so window indices stay contiguous.
    """
    if window_days < 1:
        raise ValueError("window_days must be positive")
    baskets = list(baskets)
    if not baskets:
        return []
    for i in range(1, len(baskets)):
        if baskets[i].timestamp < baskets[i - 1].timestamp:
            raise OrderError(
                f"baskets not sorted: position {i} ({baskets[i].basket_id!r}, t={baskets[i].timestamp}) "
                f"precedes position {i - 1} (t={baskets[i - 1].timestamp})"
            )
    t0 = _midnight(baskets[0].timestamp)
    span = SECONDS_PER_DAY * window_days
    last = int((baskets[-1].timestamp - t0) // span)
    windows = [Window(i, [], t0 + i * span, t0 + (i + 1) * span) for i in range(last + 1)]
    for b in baskets:
        windows[int((b.timestamp - t0) // span)].baskets.append(b)
    return windows


def write_canonical(baskets: Iterable[Basket], fh) -> None:
    """Write the canonical interchange CSV to a text file object."""
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(CANONICAL_HEADER)
    for b in baskets:
        ts = repr(b.timestamp) if b.timestamp != int(b.timestamp) else str(int(b.timestamp))
        for it in b.items:
            price = "" if it.price is None else repr(float(it.price))
            w.writerow([b.basket_id, ts, b.user, it.product, price])


def summarize(baskets: list[Basket]) -> dict:
    users = {b.user for b in baskets}
    products = {p for b in baskets for p in b.products}
    return {
        "users": len(users),
        "items": len(products),
        "transactions": sum(len(b.items) for b in baskets),
        "baskets": len(baskets),
    }
