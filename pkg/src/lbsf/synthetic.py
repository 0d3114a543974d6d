"""Seeded synthetic payment histories with planted default patterns.

Negatives behave stationarily over a per-user merchant pool.  Positives carry
one of two planted patterns:

* ``lifestyle_shift``: spend at luxury merchants collapses after a change
  point while a consumer-finance app and everyday basic merchants rise.
* ``impulsive_surge``: a new entertainment merchant appears and its weekly
  transaction count ramps up super-linearly to ``surge_peak_per_week``.

A share of negatives carries look-alike decoys (the same dynamics at
transport or basic merchants), so the merchant identity, not just the shape
of the activity, decides the label.  Descriptions are generic and amounts of
non-luxury tiers overlap, which keeps merchant names the main carrier of tier.
"""

from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np

from .data import Dataset, EmptyDatasetError, PaymentBehavior, UserRecord

DAY = 86400
WEEK = 7 * DAY
WINDOW_END = int(datetime(2024, 7, 1, tzinfo=timezone.utc).timestamp())

CATALOG = {
    "luxury": [
        "Golden Lotus Fine Dining",
        "Maison Blanc Restaurant",
        "Skyline Steakhouse",
        "Orchid Spa Resort",
        "Velvet Lounge Bar",
        "Crown Jewelry Boutique",
        "Aurora Luxury Mall",
        "Premier Golf Club",
    ],
    "basic": [
        "FreshMart Grocery",
        "QuickStop Convenience",
        "Daily Market",
        "ValueMart Supermarket",
        "ShopNow Ecommerce",
        "Corner Bakery",
        "City Pharmacy",
        "Noodle House Canteen",
        "HomeGoods Online",
        "Budget Laundry",
    ],
    "transport": [
        "Metro Transit",
        "City Bus Card",
        "RideNow Taxi",
        "RailWay Tickets",
        "SkyFly Travel",
        "BikeShare Rental",
    ],
    "entertainment": [
        "StarLive Streaming",
        "GameZone Online",
        "FoodDash Delivery",
        "CineMax Cinema",
        "KTV Party Box",
        "MusicBox Premium",
        "eSports Arena Games",
        "Lucky Lottery Club",
    ],
    "finance": [
        "QuickLoan Consumer Finance",
        "PayLater Installments",
        "CreditBridge Lending",
        "Mobile Phone Bill",
        "Utility Power Bill",
        "Insurance Premium",
        "Fund Investment",
        "Rent Payment Portal",
    ],
}
TIER_OF = {m: tier for tier, names in CATALOG.items() for m in names}

# (median, log-sigma) of the log-normal amount per tier
AMOUNT_PARAMS = {
    "luxury": (380.0, 0.5),
    "basic": (35.0, 0.9),
    "transport": (30.0, 0.9),
    "entertainment": (32.0, 0.9),
    "finance": (45.0, 0.9),
}

DESCRIPTIONS = (
    "payment",
    "purchase",
    "order",
    "online payment",
    "qr code payment",
    "card payment",
    "transfer",
    "subscription",
)

SHIFT_RISERS = ("QuickLoan Consumer Finance", "PayLater Installments", "CreditBridge Lending")
SHIFT_BASIC_RISERS = ("ShopNow Ecommerce", "Daily Market", "FreshMart Grocery", "QuickStop Convenience")
SURGE_MERCHANTS = ("StarLive Streaming", "GameZone Online", "eSports Arena Games", "Lucky Lottery Club")
SURGE_COMPANIONS = ("FoodDash Delivery", "KTV Party Box", "MusicBox Premium", "CineMax Cinema")
DECOY_SHIFT_RISERS = ("RailWay Tickets", "Metro Transit", "City Bus Card", "BikeShare Rental")
DECOY_SURGE_MERCHANTS = ("FreshMart Grocery", "Metro Transit", "BikeShare Rental", "Daily Market", "City Pharmacy")


@dataclass(frozen=True)
class SynthesisConfig:
    n_users: int = 2000
    positive_rate: float = 0.10
    t_span_days: int = 90
    mean_behaviors_per_day: float = 1.5
    seed: int = 0
    pattern_mix: tuple = (0.5, 0.5)  # (lifestyle_shift, impulsive_surge)
    surge_peak_per_week: int = 11
    decoy_rate: float = 0.3
    window_end: int = WINDOW_END

    def __post_init__(self):
        object.__setattr__(self, "pattern_mix", tuple(float(x) for x in self.pattern_mix))
        if self.n_users < 0:
            raise ValueError("n_users must be >= 0")
        if not 0.0 < self.positive_rate < 1.0:
            raise ValueError("positive_rate must lie in (0, 1)")
        if self.t_span_days not in (45, 90, 180):
            raise ValueError("t_span_days must be one of 45, 90, 180")
        if self.mean_behaviors_per_day <= 0:
            raise ValueError("mean_behaviors_per_day must be > 0")
        if len(self.pattern_mix) != 2 or min(self.pattern_mix) < 0 or abs(sum(self.pattern_mix) - 1.0) > 1e-9:
            raise ValueError("pattern_mix must be two non-negative fractions summing to 1")
        if not 0.0 <= self.decoy_rate <= 1.0:
            raise ValueError("decoy_rate must lie in [0, 1]")
        if self.surge_peak_per_week < 1:
            raise ValueError("surge_peak_per_week must be >= 1")


@dataclass(frozen=True)
class PlantedPattern:
    """Ground truth for one generated user (kept out of serialized data)."""

    kind: str  # none | lifestyle_shift | impulsive_surge | decoy_shift | decoy_surge
    change_ts: int | None = None
    key_merchants: tuple = ()
    week_anchor: int = 0
    weekly_plan: tuple = field(default=(), compare=False)


def surge_ramp(weeks, peak):
    """Deterministic non-decreasing weekly counts ending at ``peak``."""
    k = np.arange(1, weeks + 1)
    return [int(round(peak * (i / weeks) ** 2)) for i in k]


class _UserSimulator:
    def __init__(self, cfg, rng):
        self.cfg = cfg
        self.rng = rng
        self.end = cfg.window_end
        self.start = cfg.window_end - cfg.t_span_days * DAY
        self.n_days = cfg.t_span_days
        self.n_full_weeks = cfg.t_span_days // 7
        self.week_anchor = self.end - self.n_full_weeks * WEEK
        # diurnal rhythm: mixture of two bumps on the 24h circle
        centers = rng.uniform(0, 24, size=2)
        hours = np.arange(24)
        prof = np.zeros(24)
        for c, w in zip(centers, rng.dirichlet([2.0, 2.0])):
            d = np.minimum(np.abs(hours - c), 24 - np.abs(hours - c))
            prof += w * np.exp(-0.5 * (d / rng.uniform(1.5, 4.0)) ** 2)
        self.hour_p = (prof + 0.02) / (prof + 0.02).sum()
        self.weekday_w = rng.uniform(0.6, 1.4, size=7)
        self.weekday_w[5:] *= rng.uniform(0.8, 1.6)
        self.weekday_w *= 7.0 / self.weekday_w.sum()
        self.behaviors = []

    def day_start(self, d):
        return self.start + d * DAY

    def emit(self, merchant, day):
        ts = self.day_start(day) + int(self.rng.choice(24, p=self.hour_p)) * 3600 + int(self.rng.integers(0, 3600))
        median, sigma = AMOUNT_PARAMS[TIER_OF[merchant]]
        amount = round(float(median * np.exp(sigma * self.rng.standard_normal())), 2)
        desc = DESCRIPTIONS[int(self.rng.integers(len(DESCRIPTIONS)))]
        self.behaviors.append(PaymentBehavior(merchant, desc, int(ts), amount))

    def stationary(self, merchant, daily_rate, multiplier=None):
        """Poisson daily counts; ``multiplier(day)`` scales the rate."""
        for d in range(self.n_days):
            lam = daily_rate * self.weekday_w[(3 + self.day_start(d) // DAY) % 7]
            if multiplier is not None:
                lam *= multiplier(d)
            for _ in range(int(self.rng.poisson(lam))):
                self.emit(merchant, d)

    def weekly_plan(self, merchant, counts):
        """Place exactly ``counts[k]`` behaviors in the k-th of the final full weeks."""
        first_week = self.n_full_weeks - len(counts)
        anchor_day = (self.week_anchor - self.start) // DAY
        for k, c in enumerate(counts):
            base = anchor_day + 7 * (first_week + k)
            for _ in range(c):
                self.emit(merchant, base + int(self.rng.integers(0, 7)))

    def pool(self, required=()):
        rng = self.rng
        chosen = list(required)
        plan = {"luxury": int(rng.integers(0, 3)), "basic": int(rng.integers(3, 5)), "transport": int(rng.integers(1, 3)),
                "entertainment": int(rng.integers(1, 3)), "finance": int(rng.integers(1, 3))}
        for tier, n in plan.items():
            have = sum(1 for m in chosen if TIER_OF[m] == tier)
            options = [m for m in CATALOG[tier] if m not in chosen]
            take = max(0, n - have)
            if take:
                chosen.extend(rng.choice(options, size=min(take, len(options)), replace=False).tolist())
        return chosen

    def rates(self, merchants):
        w = self.rng.dirichlet(np.full(len(merchants), 1.2))
        return {m: self.cfg.mean_behaviors_per_day * wi for m, wi in zip(merchants, w)}


def _simulate(cfg, rng, kind):
    sim = _UserSimulator(cfg, rng)
    planted = {"kind": kind, "week_anchor": sim.week_anchor}
    change_day = None
    if kind in ("lifestyle_shift", "decoy_shift"):
        lux = str(rng.choice(CATALOG["luxury"]))
        if kind == "lifestyle_shift":
            risers = [str(rng.choice(SHIFT_RISERS)), str(rng.choice(SHIFT_BASIC_RISERS))]
        else:
            risers = [str(m) for m in rng.choice(DECOY_SHIFT_RISERS, size=2, replace=False)]
        merchants = sim.pool(required=[lux, *risers])
        rates = sim.rates(merchants)
        rates[lux] = max(rates[lux], rng.uniform(0.25, 0.45))
        days_before_end = int(rng.integers(14, 151))
        change_day = sim.n_days - days_before_end
        for m in merchants:
            if m == lux:
                sim.stationary(m, rates[m], lambda d: 1.0 if d < change_day else 0.12)
            elif m in risers:
                base = max(rates[m], 0.08)
                sim.stationary(m, base, lambda d: 1.0 if d < change_day else 3.5)
            else:
                sim.stationary(m, rates[m])
        planted["key_merchants"] = (lux, *risers)
        planted["change_ts"] = sim.end - days_before_end * DAY
    elif kind in ("impulsive_surge", "decoy_surge"):
        if kind == "impulsive_surge":
            surge = str(rng.choice(SURGE_MERCHANTS))
            companion = str(rng.choice(SURGE_COMPANIONS))
        else:
            surge = str(rng.choice(DECOY_SURGE_MERCHANTS))
            companion = str(rng.choice([m for m in CATALOG["transport"] + CATALOG["basic"] if m != surge]))
        merchants = [m for m in sim.pool(required=[companion]) if m != surge]
        rates = sim.rates(merchants)
        total_weeks = int(rng.integers(3, 11))
        plan = surge_ramp(total_weeks, cfg.surge_peak_per_week)[-sim.n_full_weeks:]
        ramp_start_day = sim.n_days - 7 * len(plan)
        for m in merchants:
            if m == companion:
                sim.stationary(m, max(rates[m], 0.1), lambda d: 1.0 if d < ramp_start_day else 2.5)
            else:
                sim.stationary(m, rates[m])
        sim.weekly_plan(surge, plan)
        planted["key_merchants"] = (surge, companion)
        planted["change_ts"] = sim.end - 7 * total_weeks * DAY
        planted["weekly_plan"] = tuple(plan)
    else:
        merchants = sim.pool()
        for m, r in sim.rates(merchants).items():
            sim.stationary(m, r)
    if not sim.behaviors:
        # every user keeps at least one payment
        sim.emit(merchants[0], sim.n_days - 1)
    sim.behaviors.sort(key=lambda b: b.timestamp)
    return tuple(sim.behaviors), PlantedPattern(**planted)


def generate_synthetic(cfg):
    """Generate a labeled Dataset; a pure function of ``cfg``."""
    if cfg.n_users == 0:
        raise EmptyDatasetError("n_users = 0: empty dataset")
    root = np.random.default_rng(cfg.seed)
    n_pos = int(round(cfg.n_users * cfg.positive_rate))
    order = root.permutation(cfg.n_users)
    positives = set(order[:n_pos].tolist())
    n_shift = int(round(n_pos * cfg.pattern_mix[0]))
    pos_kinds = ["lifestyle_shift"] * n_shift + ["impulsive_surge"] * (n_pos - n_shift)
    pos_kinds = [pos_kinds[i] for i in root.permutation(n_pos)] if n_pos else []
    neg_draw = root.random(cfg.n_users)
    neg_side = root.random(cfg.n_users)
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.n_users)

    records, planted = [], {}
    pos_iter = iter(pos_kinds)
    for i in range(cfg.n_users):
        if i in positives:
            kind, label = next(pos_iter), 1
        else:
            label = 0
            if neg_draw[i] < cfg.decoy_rate:
                kind = "decoy_shift" if neg_side[i] < cfg.pattern_mix[0] else "decoy_surge"
            else:
                kind = "none"
        behaviors, truth = _simulate(cfg, np.random.default_rng(seeds[i]), kind)
        uid = f"u{i:06d}"
        records.append(UserRecord(uid, behaviors, label))
        planted[uid] = truth
    return Dataset(tuple(records), "train", planted)
