"""Eleven numbered end-to-end acceptance checks.

Criteria 1-7 and 10-11 are property checks that finish in seconds or less.
Criteria 8 and 9 share one session-scoped mining study (10 seeds, three pool
capacities, ~2.5 minutes per run single-core); deselect them with
`-k "not criterion_08 and not criterion_09"` for a fast pass.
"""

import collections
import os
import statistics
import time

import numpy as np
import pytest

from alphamine import dsl
from alphamine.agent import PpoConfig, gradient_check, train
from alphamine.backtest import BacktestConfig, run_topk_dropn
from alphamine.dsl import BEG, DEFAULT_VOCAB, MAX_TOKENS, TokenKind, Vocabulary, parse_infix, parse_rpn
from alphamine.env import MiningEnv, uniform_policy
from alphamine.errors import DegenerateVectorError
from alphamine.evaluator import evaluate
from alphamine.metrics import (
    average_ranks,
    daily_ic,
    mean_ic,
    normalize_cross_section,
    normalize_matrix,
)
from alphamine.pool import AlphaPool, GdConfig
from alphamine.synth import SynthSpec, synth_generate

from test_backtest import panel_from_closes, trades_by_date, walk_panel
from test_cli import SMALL_SYNTH, mine_config, run_cli, sha256, write_config
from test_dsl import enumerate_parseable, random_legal_sequence
from test_evaluator import (
    ORACLE_CS,
    assert_matches,
    make_panel,
    oracle_ts_binary,
    oracle_ts_unary,
)
from test_pool import direct_mse, fake_pool, random_instance


# ---------------------------------------------------------------- criterion 1

def test_criterion_01_cached_loss_equals_direct_mse():
    rng = np.random.default_rng(10)
    start = time.monotonic()
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(3, 21))
        days = int(rng.integers(2, 11))
        k = int(rng.integers(1, 6))
        matrices, target = random_instance(rng, n, days, k)
        pool = fake_pool(matrices, target)
        weights = rng.standard_normal(k)
        cached = pool.loss(weights)
        direct = direct_mse(matrices, weights, target)
        worst = max(worst, abs(cached - direct) / max(1.0, abs(direct)))
    elapsed = time.monotonic() - start
    assert worst <= 1e-10
    assert elapsed < 5.0
    print(f"[PASS] criterion 1: cached quadratic loss == direct MSE, "
          f"100 instances, worst rel err {worst:.3e}, {elapsed:.2f}s")


# ---------------------------------------------------------------- criterion 2

def test_criterion_02_daily_ic_is_normalized_dot_product():
    rng = np.random.default_rng(20)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(3, 51))
        u = rng.standard_normal(n)
        v = rng.standard_normal(n)
        direct = daily_ic(u, v)
        inner = float(normalize_cross_section(u) @ normalize_cross_section(v))
        worst = max(worst, abs(direct - inner))
    assert worst <= 1e-10
    print(f"[PASS] criterion 2: daily IC == <N(u),N(v)> on 1000 pairs, "
          f"worst abs err {worst:.3e}")


# ---------------------------------------------------------------- criterion 3

def test_criterion_03_rank_transform_tie_handling():
    no_ties = average_ranks(np.array([3.0, -2.0, 6.0, 4.0]))
    np.testing.assert_array_equal(no_ties, [2.0, 1.0, 4.0, 3.0])
    tied = average_ranks(np.array([3.0, -2.0, 4.0, 4.0]))
    np.testing.assert_array_equal(tied, [2.0, 1.0, 3.5, 3.5])
    print("[PASS] criterion 3: tied ranks average the positions they span, "
          "(3,-2,4,4) -> (2,1,3.5,3.5)")


# ---------------------------------------------------------------- criterion 4

def test_criterion_04_action_mask_soundness():
    start = time.monotonic()

    # 10,000 uniform-over-mask rollouts: the mask must stay non-empty at
    # every step (asserted inside the walk) and every finished sequence
    # must parse.
    rng = np.random.default_rng(40)
    for _ in range(10_000):
        tokens = random_legal_sequence(DEFAULT_VOCAB, MAX_TOKENS, rng)
        assert len(tokens) <= MAX_TOKENS
        parse_rpn(tokens)

    # Exhaustive cross-check on a reduced vocabulary at cap 8: the mask at
    # every reachable prefix equals the set of tokens that can still lead
    # to a parseable sequence, per brute-force enumeration.
    vocab = Vocabulary(features=("open", "close"), constants=(0.5,),
                       deltas=(10,), operators=("Abs", "Add", "Mean", "Corr"))
    max_len = 8
    accepted = enumerate_parseable(vocab, max_len)
    assert accepted
    children = {}
    for tokens in accepted:
        for i in range(1, len(tokens)):
            children.setdefault(tokens[:i], set()).add(tokens[i])
    frontier = [(BEG,)]
    seen = set()
    while frontier:
        prefix = frontier.pop()
        if prefix in seen or prefix[-1].kind == TokenKind.SEP:
            continue
        seen.add(prefix)
        mask = dsl.action_mask(prefix, vocab, max_len)
        allowed = {vocab.token_of(i) for i in np.nonzero(mask)[0]}
        assert allowed == children.get(prefix, set()), prefix
        frontier.extend(prefix + (t,) for t in allowed)
    elapsed = time.monotonic() - start
    assert len(seen) > 50
    assert elapsed < 120.0
    print(f"[PASS] criterion 4: 10,000 masked rollouts all legal and "
          f"parseable; exhaustive cap-8 mask == completability over "
          f"{len(seen)} prefixes; {elapsed:.1f}s")


# ---------------------------------------------------------------- criterion 5

def test_criterion_05_pool_loss_gradient_check():
    rng = np.random.default_rng(50)
    h = 1e-6
    worst = 0.0
    for _ in range(50):
        n = int(rng.integers(3, 16))
        days = int(rng.integers(2, 9))
        k = int(rng.integers(1, 6))
        matrices, target = random_instance(rng, n, days, k)
        pool = fake_pool(matrices, target)
        w = rng.standard_normal(k)
        grad = pool.loss_gradient(w)
        for i in range(k):
            up, dn = w.copy(), w.copy()
            up[i] += h
            dn[i] -= h
            fd = (pool.loss(up) - pool.loss(dn)) / (2 * h)
            worst = max(worst, abs(grad[i] - fd) / max(abs(grad[i]), abs(fd), 1e-8))
    assert worst <= 1e-6
    print(f"[PASS] criterion 5: analytic pool gradient vs central "
          f"differences on 50 pools, worst rel err {worst:.3e}")


# ---------------------------------------------------------------- criterion 6

def test_criterion_06_policy_loss_gradient_check():
    worst = gradient_check(seed=0)
    assert worst <= 1e-4
    print(f"[PASS] criterion 6: policy/value/entropy loss gradient vs "
          f"finite differences, worst rel err {worst:.3e}")


# ---------------------------------------------------------------- criterion 7

CS_UNARY = ("Abs", "Log")
CS_BINARY = ("Add", "Sub", "Mul", "Div", "Greater", "Less")
TS_UNARY = ("Ref", "Mean", "Med", "Sum", "Std", "Var", "Max", "Min",
            "Mad", "Delta", "WMA", "EMA")
TS_BINARY = ("Cov", "Corr")


def test_criterion_07_operators_match_naive_reference():
    checked = 0
    for name in CS_UNARY:
        rng = np.random.default_rng(hash(name) % 2**32)
        panel = make_panel(rng, 40, 7, nan_rate=0.1, positive=False)
        got = evaluate(parse_infix(f"{name}($close)"), panel, (0, 39)).values
        src = panel.feature("close")
        expected = [[ORACLE_CS[name](src[d, s]) for s in range(7)] for d in range(40)]
        assert_matches(got, expected)
        checked += 1
    for name in CS_BINARY:
        rng = np.random.default_rng(hash(name) % 2**32)
        panel = make_panel(rng, 30, 6, nan_rate=0.1, positive=False)
        got = evaluate(parse_infix(f"{name}($high,$low)"), panel, (0, 29)).values
        hi, lo = panel.feature("high"), panel.feature("low")
        expected = [[ORACLE_CS[name](hi[d, s], lo[d, s]) for s in range(6)]
                    for d in range(30)]
        assert_matches(got, expected)
        checked += 1
    for name in TS_UNARY:
        for t in (10, 30):
            rng = np.random.default_rng((hash(name) + t) % 2**32)
            panel = make_panel(rng, 120, 8, nan_rate=0.06, positive=False)
            got = evaluate(parse_infix(f"{name}($open,{t})"), panel, (0, 119)).values
            src = panel.feature("open")
            expected = np.transpose([
                oracle_ts_unary(name, list(src[:, s]), t) for s in range(8)])
            assert_matches(got, expected)
        checked += 1
    for name in TS_BINARY:
        rng = np.random.default_rng(hash(name) % 2**32)
        panel = make_panel(rng, 90, 6, nan_rate=0.05, positive=False)
        got = evaluate(parse_infix(f"{name}($high,$volume,10)"), panel, (0, 89)).values
        hi, vol = panel.feature("high"), panel.feature("volume")
        expected = np.transpose([
            oracle_ts_binary(name, list(hi[:, s]), list(vol[:, s]), 10)
            for s in range(6)])
        assert_matches(got, expected)
        checked += 1
    assert checked == 22

    # feeding a truncated panel must not change any already-computable day
    rng = np.random.default_rng(70)
    panel = make_panel(rng, 100, 4, positive=False)
    cut = 70
    from alphamine.panel import PanelData
    truncated = PanelData(dates=panel.dates[: cut + 1], symbols=panel.symbols,
                          features=panel.features[: cut + 1].copy())
    texts = [f"{n}($open,10)" for n in TS_UNARY]
    texts += [f"{n}($open,$close,10)" for n in TS_BINARY]
    for text in texts:
        full = evaluate(parse_infix(text), panel, (0, cut)).values
        part = evaluate(parse_infix(text), truncated, (0, cut)).values
        both_nan = np.isnan(full) & np.isnan(part)
        assert (both_nan | (full == part)).all(), text
    print("[PASS] criterion 7: all 22 operators match the loop reference at "
          "1e-10; truncation changes no computable day")


# ----------------------------------------------------- criteria 8 and 9 study

TRAIN_RANGE = (0, 499)
TEST_RANGE = (620, 749)
MINING_SEEDS = tuple(range(10))
MINING_STEPS = 50_000
MINING_CAPACITIES = (1, 10, 20)


def target_rows(panel, day_range):
    return panel.target[day_range[0]: day_range[1] + 1]


def pool_test_ic(pool, panel):
    """Re-evaluate the mined pool over the held-out range, as cmd_eval does."""
    rebuilt = AlphaPool.from_json(pool.to_json(), panel, TEST_RANGE,
                                  target_rows(panel, TEST_RANGE), seed=0)
    return mean_ic(rebuilt.combined_values(), target_rows(panel, TEST_RANGE))


def expression_abs_ic(expr, panel, day_range):
    try:
        values = evaluate(expr, panel, day_range).values
        return abs(mean_ic(normalize_matrix(values), target_rows(panel, day_range)))
    except DegenerateVectorError:
        return 0.0


def mine_one(panel, seed, capacity):
    pool = AlphaPool(target_rows(panel, TRAIN_RANGE), capacity=capacity,
                     gd_config=GdConfig(learning_rate=1.0), seed=seed)
    env = MiningEnv(pool, panel, TRAIN_RANGE)
    config = PpoConfig(seed=seed, max_env_steps=MINING_STEPS,
                       rollout_episodes=16, entropy_coef=0.2,
                       learning_rate=3e-4, epochs_per_update=4)
    tried = set()

    def record(entry):
        if entry["outcome"] in ("added", "invalid"):
            tried.add(entry["expression"])

    start = time.monotonic()
    result, _, _ = train(config, env, episode_callback=record)
    elapsed = time.monotonic() - start
    return {"seed": seed, "capacity": capacity, "env_steps": result.env_steps,
            "seconds": elapsed, "distinct": len(tried),
            "test_ic": pool_test_ic(pool, panel)}


def best_single_by_random_search(panel, seed, distinct_budget):
    """Best single expression from uniform masked sampling, given the same
    number of distinct evaluated expressions as the miner; selected by
    training |IC|, scored on the held-out range."""
    pool = AlphaPool(target_rows(panel, TRAIN_RANGE), capacity=1, seed=seed)
    env = MiningEnv(pool, panel, TRAIN_RANGE)
    rng = np.random.default_rng(seed)
    candidates = set()
    tried = set()
    while len(tried) < distinct_budget:
        _, _, info = env.episode_rollout(uniform_policy, rng)
        outcome = info.get("outcome")
        if outcome in ("added", "invalid"):
            tried.add(info["expression"])
        if outcome == "added":
            candidates.add(info["expression"])
    best_expr, best_train = None, -1.0
    for text in candidates:
        expr = parse_infix(text)
        score = expression_abs_ic(expr, panel, TRAIN_RANGE)
        if score > best_train:
            best_expr, best_train = expr, score
    if best_expr is None:
        return 0.0
    return expression_abs_ic(best_expr, panel, TEST_RANGE)


@pytest.fixture(scope="session")
def mining_study():
    runs = {capacity: [] for capacity in MINING_CAPACITIES}
    margins = []
    baselines = []
    for seed in MINING_SEEDS:
        panel = synth_generate(SynthSpec(seed=seed))
        for capacity in MINING_CAPACITIES:
            outcome = mine_one(panel, seed, capacity)
            runs[capacity].append(outcome)
            line = (f"  study seed={seed} capacity={capacity}: held-out IC "
                    f"{outcome['test_ic']:.4f}, {outcome['distinct']} distinct "
                    f"expressions, {outcome['seconds']:.0f}s")
            if capacity == 10:
                baseline = best_single_by_random_search(
                    panel, seed, outcome["distinct"])
                baselines.append(baseline)
                margins.append(outcome["test_ic"] - baseline)
                line += f", baseline {baseline:.4f}, margin {margins[-1]:+.4f}"
            print(line, flush=True)
    return {"runs": runs, "margins": margins, "baselines": baselines}


def test_criterion_08_synthetic_signal_recovery(mining_study):
    runs = mining_study["runs"][10]
    for outcome in runs:
        assert outcome["env_steps"] <= 100_000
        assert outcome["seconds"] < 1800.0
    median_ic = statistics.median(r["test_ic"] for r in runs)
    median_margin = statistics.median(mining_study["margins"])
    median_baseline = statistics.median(mining_study["baselines"])
    assert median_ic >= 0.4
    assert median_margin >= 0.05
    assert median_ic - median_baseline >= 0.05
    print(f"[PASS] criterion 8: 10-seed median held-out IC {median_ic:.4f} "
          f"(>=0.4), median margin over random search {median_margin:+.4f} "
          f"(>=0.05), baseline median {median_baseline:.4f}")


def test_criterion_09_pool_capacity_trend(mining_study):
    medians = {
        capacity: statistics.median(r["test_ic"] for r in outcomes)
        for capacity, outcomes in mining_study["runs"].items()
    }
    assert medians[10] >= medians[1]
    assert abs(medians[20] - medians[10]) <= 0.02
    print(f"[PASS] criterion 9: median held-out IC by capacity "
          f"1={medians[1]:.4f} 10={medians[10]:.4f} 20={medians[20]:.4f}; "
          f"rising then flat within 0.02")


# --------------------------------------------------------------- criterion 10

def test_criterion_10_backtest_accounting():
    rng = np.random.default_rng(100)
    panel = walk_panel(rng, 500, 20)
    signal = rng.standard_normal((500, 20))
    config = BacktestConfig(top_k=10, drop_n=5, cost_bps=25.0)
    report = run_topk_dropn(panel, signal, (0, 499), config)

    # independent ledger replay: cash plus marked holdings must equal the
    # reported worth every day
    closes = panel.feature("close")
    col = {symbol: j for j, symbol in enumerate(panel.symbols)}
    by_date = trades_by_date(report)
    cash = report.net_worth[0]
    held = {}
    for d, date in enumerate(report.dates):
        for trade in by_date.get(date, []):
            if trade.side == "buy":
                cash -= trade.notional + trade.cost
                held[trade.symbol] = held.get(trade.symbol, 0.0) + trade.shares
            else:
                cash += trade.notional - trade.cost
                assert abs(held[trade.symbol] - trade.shares) <= 1e-12 * trade.shares
                del held[trade.symbol]
        worth = cash + sum(shares * closes[d, col[s]] for s, shares in held.items())
        assert abs(worth - report.net_worth[d + 1]) <= 1e-9 * max(1.0, abs(worth))

    # trade discipline: at most drop_n sells and drop_n buys per day
    for date, trades in by_date.items():
        sides = collections.Counter(t.side for t in trades)
        assert sides["buy"] <= 5, date
        assert sides["sell"] <= 5, date

    # frozen prices: worth must come back exactly, bit for bit
    flat = panel_from_closes(np.ones((120, 12)))
    flat_signal = np.random.default_rng(101).standard_normal((120, 12))
    flat_report = run_topk_dropn(flat, flat_signal, (0, 119),
                                 BacktestConfig(top_k=4, drop_n=4))
    assert flat_report.final_worth == flat_report.net_worth[0]
    np.testing.assert_array_equal(flat_report.net_worth, 1.0)
    print("[PASS] criterion 10: ledger replay matches reported worth at 1e-9 "
          "over 500 days; <=5 trades per side per day; constant prices "
          "conserve worth exactly")


# --------------------------------------------------------------- criterion 11

def test_criterion_11_deterministic_reruns(tmp_path):
    synth_config = write_config(tmp_path, SMALL_SYNTH, name="synth.json")
    synth_outs = [str(tmp_path / f"synth{i}") for i in (1, 2)]
    for out in synth_outs:
        code, _, err = run_cli(["synth", "--config", synth_config, "--out", out])
        assert code == 0, err
    for name in ("panel.csv", "target.csv", "manifest.json"):
        first, second = (sha256(os.path.join(out, name)) for out in synth_outs)
        assert first == second, name

    mine_cfg = write_config(tmp_path, mine_config(synth_outs[0]), name="mine.json")
    mine_outs = [str(tmp_path / f"mine{i}") for i in (1, 2)]
    for out in mine_outs:
        code, _, err = run_cli(["mine", "--config", mine_cfg, "--out", out])
        assert code == 0, err
    for name in ("pool.json", "agent.ckpt", "episodes.jsonl",
                 "training_log.jsonl", "mine_summary.json"):
        first, second = (sha256(os.path.join(out, name)) for out in mine_outs)
        assert first == second, name
    print("[PASS] criterion 11: synth and mine artifacts are "
          "checksum-identical across reruns")
