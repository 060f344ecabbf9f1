"""Trial scoring, win analysis, statistics battery, and report bundle."""

import csv
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .models import ModelConfig
from .stats import (holm_bonferroni, kruskal_wallis, shapiro_wilk,
                    wilcoxon_signed_rank)
from .training import (STRATEGY_ORDER, StrategyKind, TrialOutcome,
                       VELOCITY_SCALE, _batched_eval, _to_tensors,
                       restore_module)

ACOUSTICS_SPECIFIC = (StrategyKind.MULTIPLE_WITHOUT, StrategyKind.SINGLE_WITH,
                      StrategyKind.MULTIPLE_WITH)

RESULT_COLUMNS = ("k0_encoder", "k0_performer", "k2_encoder", "k2_performer",
                  "k1", "strategy", "mean_l1", "n_notes", "valid", "seed",
                  "epochs_ran", "untrained_l1", "context_accuracy",
                  "learning_rate", "reason")


@dataclass(frozen=True)
class TrialResult:
    """One scored (config, strategy) trial in velocity units (0..127)."""

    config: ModelConfig
    strategy: StrategyKind
    mean_l1: Optional[float]
    n_test_notes: int
    valid: bool
    seed: int = 0
    epochs_ran: int = 0
    untrained_l1: Optional[float] = None
    context_accuracy: Optional[float] = None
    learning_rate: Optional[float] = None
    reason: str = "ok"

    def __post_init__(self):
        if self.valid and (self.mean_l1 is None or self.mean_l1 < 0):
            raise ValueError("valid trials need mean_l1 >= 0")
        if not self.valid and self.mean_l1 is not None:
            raise ValueError("invalid trials carry no mean_l1")


def mean_velocity_error(predicted: Sequence[float],
                        target: Sequence[float]) -> float:
    """Mean absolute velocity error, both series in 0..127 units."""
    predicted = np.asarray(predicted, dtype=float)
    target = np.asarray(target, dtype=float)
    if predicted.shape != target.shape or predicted.size == 0:
        raise ValueError("series must be non-empty and equally long")
    return float(np.mean(np.abs(predicted - target)))


def evaluate_trial(outcome: TrialOutcome, test_notes) -> TrialResult:
    """Score a trained trial on held-out notes."""
    if len(test_notes) == 0:
        raise ValueError("no test notes")
    common = dict(
        config=outcome.config, strategy=outcome.strategy,
        n_test_notes=len(test_notes), seed=outcome.plan.seed,
        epochs_ran=outcome.epochs_ran,
        untrained_l1=outcome.untrained_test_l1,
        learning_rate=outcome.learning_rate, reason=outcome.reason)
    if not outcome.valid or outcome.state is None:
        return TrialResult(mean_l1=None, valid=False,
                           context_accuracy=None, **common)
    module = restore_module(outcome)
    feats, targets, contexts = _to_tensors(test_notes)
    l1, ce, accuracy = _batched_eval(module, feats, targets, contexts)
    return TrialResult(
        mean_l1=l1 * VELOCITY_SCALE, valid=True,
        context_accuracy=accuracy if ce is not None else None, **common)


@dataclass
class WinTable:
    """Per-strategy win counts; last column is the "All" tally."""

    strategies: Tuple[StrategyKind, ...]
    counts: np.ndarray

    def cell(self, row: StrategyKind, col: Union[StrategyKind, str]) -> int:
        i = self.strategies.index(row)
        if isinstance(col, str) and col.lower() == "all":
            return int(self.counts[i, -1])
        return int(self.counts[i, self.strategies.index(col)])

    def to_text(self) -> str:
        names = [s.value for s in self.strategies]
        width = max(len(n) for n in names) + 2
        header = " " * width + "".join(f"{n:>{width}}" for n in names)
        header += f"{'All':>{width}}"
        lines = [header]
        for i, name in enumerate(names):
            cells = []
            for j in range(len(names)):
                cells.append("-" if i == j else str(int(self.counts[i, j])))
            cells.append(str(int(self.counts[i, -1])))
            lines.append(f"{name:>{width}}" + "".join(f"{c:>{width}}" for c in cells))
        return "\n".join(lines) + "\n"


def _group_by_config(results: Sequence[TrialResult]
                     ) -> Dict[ModelConfig, Dict[StrategyKind, float]]:
    grouped: Dict[ModelConfig, Dict[StrategyKind, float]] = {}
    seen = set()
    for r in results:
        key = (r.config, r.strategy)
        if key in seen:
            raise ValueError(f"duplicate trial for {key}")
        seen.add(key)
        if r.valid:
            grouped.setdefault(r.config, {})[r.strategy] = r.mean_l1
    return grouped


def win_table(results: Sequence[TrialResult]) -> WinTable:
    """Pairwise strict-win counts plus the "All" column.

    Cell (x, y) counts configurations where both trials are valid and x
    has strictly lower error; ties count for neither side. "All" counts
    configurations where x is beaten by no valid strategy and strictly
    beats at least one.
    """
    grouped = _group_by_config(results)
    present = {s for vals in grouped.values() for s in vals}
    if len(present) < 2:
        raise ValueError("win analysis needs results for >= 2 strategies")
    strategies = STRATEGY_ORDER
    counts = np.zeros((len(strategies), len(strategies) + 1), dtype=int)
    for vals in grouped.values():
        for i, x in enumerate(strategies):
            if x not in vals:
                continue
            others = [y for y in strategies if y is not x and y in vals]
            for j, y in enumerate(strategies):
                if y is x or y not in vals:
                    continue
                if vals[x] < vals[y]:
                    counts[i, j] += 1
            if others \
                    and all(vals[y] >= vals[x] for y in others) \
                    and any(vals[x] < vals[y] for y in others):
                counts[i, -1] += 1
    return WinTable(strategies=strategies, counts=counts)


def error_reduction(results: Sequence[TrialResult], strategy: StrategyKind
                    ) -> Tuple[List[ModelConfig], np.ndarray]:
    """Per-config baseline error minus `strategy` error, both valid."""
    if strategy is StrategyKind.SINGLE_WITHOUT:
        raise ValueError("reduction is measured against the single-without baseline")
    grouped = _group_by_config(results)
    configs = [c for c in _sorted_configs(grouped)
               if StrategyKind.SINGLE_WITHOUT in grouped[c] and strategy in grouped[c]]
    reduction = np.array([grouped[c][StrategyKind.SINGLE_WITHOUT] - grouped[c][strategy]
                          for c in configs])
    return configs, reduction


def _sorted_configs(grouped) -> List[ModelConfig]:
    return sorted(grouped, key=lambda c: (c.k0_encoder, c.k0_performer,
                                          c.k2_encoder, c.k2_performer))


@dataclass
class OracleComparison:
    """Baseline error vs the per-config best acoustics-specific error."""

    configs: List[ModelConfig]
    baseline: np.ndarray
    oracle: np.ndarray

    @property
    def wins(self) -> int:
        """Configs where the oracle is at least as good as the baseline."""
        return int(np.sum(self.oracle <= self.baseline))

    def wilcoxon(self, alternative: str = "two-sided") -> Tuple[float, float]:
        """Paired signed-rank test of baseline against oracle errors."""
        return wilcoxon_signed_rank(self.baseline, self.oracle,
                                    alternative=alternative)


def oracle_best(results: Sequence[TrialResult]) -> OracleComparison:
    """Per-config minimum over the acoustics-specific strategies."""
    grouped = _group_by_config(results)
    configs, baseline, oracle = [], [], []
    for config in _sorted_configs(grouped):
        vals = grouped[config]
        if StrategyKind.SINGLE_WITHOUT not in vals:
            continue
        specific = [vals[s] for s in ACOUSTICS_SPECIFIC if s in vals]
        if not specific:
            continue
        configs.append(config)
        baseline.append(vals[StrategyKind.SINGLE_WITHOUT])
        oracle.append(min(specific))
    if not configs:
        raise ValueError("no config has both a baseline and a specific strategy")
    return OracleComparison(configs=configs, baseline=np.array(baseline),
                            oracle=np.array(oracle))


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def atomic_write_text(path: Union[str, Path], text: str) -> None:
    """Write via a sibling temp file and rename, so readers never see halves."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def results_to_csv_text(results: Sequence[TrialResult]) -> str:
    """Canonical CSV: fixed columns, config-then-strategy sort, repr floats."""
    order = {s: i for i, s in enumerate(STRATEGY_ORDER)}
    rows = sorted(results, key=lambda r: (
        r.config.k0_encoder, r.config.k0_performer, r.config.k2_encoder,
        r.config.k2_performer, order[r.strategy]))
    lines = [",".join(RESULT_COLUMNS)]
    import io
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    for r in rows:
        writer.writerow([
            r.config.k0_encoder, r.config.k0_performer, r.config.k2_encoder,
            r.config.k2_performer, r.config.k1, r.strategy.value,
            _fmt(r.mean_l1), r.n_test_notes, _fmt(r.valid), r.seed,
            r.epochs_ran, _fmt(r.untrained_l1), _fmt(r.context_accuracy),
            _fmt(r.learning_rate), r.reason])
    return lines[0] + "\n" + buf.getvalue()


def write_results_csv(results: Sequence[TrialResult],
                      path: Union[str, Path]) -> None:
    """Atomically persist the canonical results store."""
    atomic_write_text(path, results_to_csv_text(results))


def read_results_csv(path: Union[str, Path]) -> List[TrialResult]:
    """Load a results store written by write_results_csv."""
    out: List[TrialResult] = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            config = ModelConfig(
                k0_encoder=int(row["k0_encoder"]),
                k0_performer=int(row["k0_performer"]),
                k2_encoder=int(row["k2_encoder"]),
                k2_performer=int(row["k2_performer"]), k1=int(row["k1"]))
            out.append(TrialResult(
                config=config, strategy=StrategyKind(row["strategy"]),
                mean_l1=float(row["mean_l1"]) if row["mean_l1"] else None,
                n_test_notes=int(row["n_notes"]),
                valid=row["valid"] == "true", seed=int(row["seed"]),
                epochs_ran=int(row["epochs_ran"]),
                untrained_l1=float(row["untrained_l1"]) if row["untrained_l1"] else None,
                context_accuracy=(float(row["context_accuracy"])
                                  if row["context_accuracy"] else None),
                learning_rate=(float(row["learning_rate"])
                               if row["learning_rate"] else None),
                reason=row["reason"]))
    return out


def win_table_to_csv_text(table: WinTable) -> str:
    names = [s.value for s in table.strategies]
    lines = [",".join(["strategy"] + names + ["all"])]
    for i, name in enumerate(names):
        cells = [str(int(table.counts[i, j])) for j in range(len(names))]
        lines.append(",".join([name] + cells + [str(int(table.counts[i, -1]))]))
    return "\n".join(lines) + "\n"


def win_table_from_csv_text(text: str) -> WinTable:
    rows = list(csv.reader(text.strip().splitlines()))
    names = rows[0][1:-1]
    strategies = tuple(StrategyKind(n) for n in names)
    counts = np.array([[int(v) for v in row[1:]] for row in rows[1:]], dtype=int)
    return WinTable(strategies=strategies, counts=counts)


def strategy_series(results: Sequence[TrialResult]
                    ) -> Dict[StrategyKind, np.ndarray]:
    """Valid per-config errors of each strategy, config-sorted."""
    grouped = _group_by_config(results)
    configs = _sorted_configs(grouped)
    series: Dict[StrategyKind, np.ndarray] = {}
    for s in STRATEGY_ORDER:
        vals = [grouped[c][s] for c in configs if s in grouped[c]]
        if vals:
            series[s] = np.array(vals)
    return series


def statistics_battery(results: Sequence[TrialResult]) -> dict:
    """Normality, omnibus, paired post-hoc, and oracle tests on the store."""
    series = strategy_series(results)
    battery: dict = {"shapiro": {}, "kruskal": None,
                     "wilcoxon_pairs": [], "oracle": None}
    for s, vals in series.items():
        if 3 <= len(vals) <= 5000 and np.ptp(vals) > 0:
            w, p = shapiro_wilk(vals)
            battery["shapiro"][s.value] = {"w": w, "p": p}
        else:
            battery["shapiro"][s.value] = None
    groups = [vals for vals in series.values() if len(vals) >= 2]
    if len(groups) >= 2:
        h, p = kruskal_wallis(groups)
        battery["kruskal"] = {"h": h, "p": p}
    grouped = _group_by_config(results)
    pairs = []
    order = list(series)
    for i, a in enumerate(order):
        for b in order[i + 1:]:
            shared = [c for c in _sorted_configs(grouped)
                      if a in grouped[c] and b in grouped[c]]
            if len(shared) < 5:
                continue
            xa = np.array([grouped[c][a] for c in shared])
            xb = np.array([grouped[c][b] for c in shared])
            w, p = wilcoxon_signed_rank(xa, xb)
            pairs.append({"a": a.value, "b": b.value, "n": len(shared),
                          "w": w, "p": p})
    if pairs:
        adjusted = holm_bonferroni([p["p"] for p in pairs])
        for entry, adj in zip(pairs, adjusted):
            entry["p_holm"] = float(adj)
    battery["wilcoxon_pairs"] = pairs
    try:
        comparison = oracle_best(results)
    except ValueError:
        comparison = None
    if comparison is not None and len(comparison.configs) >= 5:
        w2, p2 = comparison.wilcoxon("two-sided")
        wg, pg = comparison.wilcoxon("greater")
        battery["oracle"] = {
            "n_configs": len(comparison.configs), "wins": comparison.wins,
            "w_two_sided": w2, "p_two_sided": p2,
            "w_greater": wg, "p_greater": pg,
            "mean_reduction": float(np.mean(comparison.baseline - comparison.oracle))}
    return battery


def make_report(results: Sequence[TrialResult],
                out_dir: Union[str, Path]) -> Dict[str, Path]:
    """Emit the box plot, win table, statistics JSON, and summary."""
    valid = [r for r in results if r.valid]
    if not valid:
        raise ValueError("no valid trials to report on")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths: Dict[str, Path] = {}

    import matplotlib
    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "keyvel"
    import matplotlib.pyplot as plt

    series = strategy_series(results)
    names = [s.value for s in series]
    data = [series[s] for s in series]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.boxplot(data, tick_labels=names, medianprops={"color": "black"})
    means = [float(np.mean(d)) for d in data]
    stds = [float(np.std(d)) for d in data]
    ax.errorbar(range(1, len(data) + 1), means, yerr=stds, fmt="D",
                linestyle=":", color="tab:blue", capsize=4)
    ax.set_ylabel("velocity L1 error")
    ax.set_title("per-strategy error distribution (mean ± std over configs)")
    fig.tight_layout()
    plot_path = out_dir / "strategy_boxplot.svg"
    fig.savefig(plot_path, metadata={"Date": None})
    plt.close(fig)
    paths["boxplot"] = plot_path

    if len(series) >= 2:
        table = win_table(results)
        csv_path = out_dir / "win_table.csv"
        atomic_write_text(csv_path, win_table_to_csv_text(table))
        txt_path = out_dir / "win_table.txt"
        atomic_write_text(txt_path, table.to_text())
        paths["win_table_csv"] = csv_path
        paths["win_table_txt"] = txt_path

    battery = statistics_battery(results)
    stats_path = out_dir / "statistics.json"
    atomic_write_text(stats_path,
                      json.dumps(battery, indent=2, sort_keys=True) + "\n")
    paths["statistics"] = stats_path

    lines = [f"trials: {len(results)} ({len(valid)} valid)"]
    for s, vals in series.items():
        lines.append(f"{s.value}: n={len(vals)} mean={np.mean(vals)!r} "
                     f"median={np.median(vals)!r} std={np.std(vals)!r}")
    if battery["oracle"] is not None:
        o = battery["oracle"]
        lines.append(f"oracle-best wins {o['wins']}/{o['n_configs']} configs, "
                     f"mean reduction {o['mean_reduction']!r}, "
                     f"one-sided p {o['p_greater']!r}")
    summary_path = out_dir / "summary.txt"
    atomic_write_text(summary_path, "\n".join(lines) + "\n")
    paths["summary"] = summary_path
    return paths
