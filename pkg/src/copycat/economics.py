"""Attack-viability arithmetic in exact rationals.

Every amount is a ``fractions.Fraction``; floats are only accepted as input
(through their decimal repr) and rendered as strings on output.
"""

import csv
import json
from dataclasses import dataclass
from fractions import Fraction

from .errors import ValidationError
from .oracle import QUERIES_PER_BATCH, as_money


def _money(value, what):
    try:
        m = as_money(value)
    except (TypeError, ValueError, ZeroDivisionError) as e:
        raise ValidationError(f"{what}: not a number ({value!r})") from e
    if m < 0:
        raise ValidationError(f"{what} must be >= 0")
    return m


def _count(value, what, minimum=0):
    if isinstance(value, bool) or int(value) != value:
        raise ValidationError(f"{what} must be an integer")
    value = int(value)
    if value < minimum:
        raise ValidationError(f"{what} must be >= {minimum}")
    return value


def format_money(value, symbol="$", places=2):
    """Round half up to ``places`` decimals; exact values print exactly."""
    value = Fraction(value)
    sign = "-" if value < 0 else ""
    scaled = abs(value) * 10 ** places
    q, r = divmod(scaled.numerator, scaled.denominator)
    if 2 * r >= scaled.denominator:
        q += 1
    whole, frac = divmod(q, 10 ** places)
    body = f"{whole:,}" + (f".{frac:0{places}d}" if places else "")
    return f"{sign}{symbol}{body}"


def attack_cost(num_queries, price_per_batch):
    """Price of ``num_queries`` queries at ``price_per_batch`` per 1,000."""
    n = _count(num_queries, "num_queries")
    return n * _money(price_per_batch, "price_per_batch") / QUERIES_PER_BATCH


def minimum_batch_price(labeling_cost, npdd_size):
    """Batch price at which querying ``npdd_size`` images costs as much as labeling."""
    n = _count(npdd_size, "npdd_size", QUERIES_PER_BATCH)
    return _money(labeling_cost, "labeling_cost") / Fraction(n, QUERIES_PER_BATCH)


@dataclass(frozen=True)
class CostModel:
    price_per_batch: Fraction
    labeling_cost: Fraction
    npdd_size: int
    odd_size: int = None
    problem: str = None

    def __post_init__(self):
        object.__setattr__(self, "price_per_batch", _money(self.price_per_batch, "price_per_batch"))
        object.__setattr__(self, "labeling_cost", _money(self.labeling_cost, "labeling_cost"))
        object.__setattr__(self, "npdd_size", _count(self.npdd_size, "npdd_size", 1))
        if self.odd_size is not None:
            object.__setattr__(self, "odd_size", _count(self.odd_size, "odd_size"))


@dataclass(frozen=True)
class ViabilityReport:
    attack_cost: Fraction
    labeling_cost: Fraction
    viable: bool
    break_even_price: Fraction
    price_per_batch: Fraction
    npdd_size: int

    def to_dict(self, symbol="$"):
        """Exact values as ``"p/q"`` strings, plus rounded display strings."""
        out = {"viable": self.viable, "npdd_size": self.npdd_size}
        for name in ("attack_cost", "labeling_cost", "break_even_price", "price_per_batch"):
            v = getattr(self, name)
            out[name] = str(v) if v is not None else None
            out[name + "_display"] = format_money(v, symbol) if v is not None else "--"
        return out


def viability_report(model):
    """Attack is viable only if it is strictly cheaper than labeling the ODD."""
    cost = attack_cost(model.npdd_size, model.price_per_batch)
    be = minimum_batch_price(model.labeling_cost, model.npdd_size) if model.npdd_size >= QUERIES_PER_BATCH else None
    return ViabilityReport(cost, model.labeling_cost, cost < model.labeling_cost, be,
                           model.price_per_batch, model.npdd_size)


# problem, ODD size, labeling cost, NPDD size (queries for a >90% copy)
LABELING_COST_TABLE = (
    ("ACT101", 1_782_858, Fraction(45_075), 500_000),
    ("DIG10", 60_000, Fraction(2_000), 100_000),
    ("FER7", 55_629, Fraction(1_900), 500_000),
    ("GOC9", 45_000, Fraction(1_575), 100_000),
    ("PED2", 23_520, Fraction(840), 500_000),
    ("SHN10", 47_217, Fraction(1_680), 500_000),
    ("SIG30", 31_775, Fraction(1_120), 100_000),
)

CSV_COLUMNS = ("problem", "odd_size", "labeling_cost", "npdd_size", "minimum_batch_price")


def cost_table(rows=LABELING_COST_TABLE):
    return [{"problem": p, "odd_size": o, "labeling_cost": c, "npdd_size": n,
             "minimum_batch_price": minimum_batch_price(c, n)} for p, o, c, n in rows]


def export_csv(table, path, symbol="$"):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_COLUMNS)
        for r in table:
            w.writerow([r["problem"] or "", "" if r["odd_size"] is None else r["odd_size"],
                        format_money(r["labeling_cost"], symbol), r["npdd_size"],
                        format_money(r["minimum_batch_price"], symbol)])


def export_json(report, path, symbol="$"):
    with open(path, "w") as f:
        json.dump(report if isinstance(report, dict) else report.to_dict(symbol), f, indent=2, sort_keys=True)
        f.write("\n")
