"""Acceptance criteria, one test each. Every test prints a single PASS/FAIL line.

Run on its own with ``pytest tests/test_acceptance.py -v`` (or ``python tests/test_acceptance.py``).
"""

import contextlib
import json
import statistics
import time

import numpy as np
import pytest

from covmoe.cli import main
from covmoe.config import load_config
from covmoe.cov_smoe import MoEConfig, dense_forward, moe_backward, select_topk
from covmoe.datahub import make_windows, synthetic_frames
from covmoe.evalkit import EXPERT_COUNTS, GATING_ROWS, QuantileForecast, mase, wql
from covmoe.experiment import central_data, robustness_study
from covmoe.fedsim import PHASES, ProtocolError, communication_report, privacy_audit
from covmoe.model import CovMoEModel, ModelConfig, count_params
from covmoe.numkit import GradTape, Rng, Tensor, const, grad_check
from covmoe.records import (
    GATE_HEADER_LEN, FedMessage, decode_message, encode_expert, expert_record_len, message_header_len,
)
from covmoe.trainer import batch_loss, eval_loss, set_scope, train_local

from conftest import make_inputs, make_layer, toy_task
from test_evalkit import mase_oracle, wql_oracle

ROOT = __import__("pathlib").Path(__file__).resolve().parents[1]
DESK = str(ROOT / "configs" / "desk.json")
OFF = GradTape(enabled=False)


@contextlib.contextmanager
def criterion(n, name, capsys):
    t0 = time.perf_counter()
    try:
        yield
    except BaseException as e:
        with capsys.disabled():
            print(f"\nACCEPTANCE {n:>2} FAIL  {name} ({type(e).__name__}: {str(e).splitlines()[0][:120]})")
        raise
    with capsys.disabled():
        print(f"\nACCEPTANCE {n:>2} PASS  {name} [{time.perf_counter() - t0:.1f}s]")


def test_01_gradient_fidelity(capsys):
    with criterion(1, "full-model gradients match central differences (rel < 1e-4)", capsys):
        t0 = time.perf_counter()
        cfg = ModelConfig(T_c=16, H=4, levels=(0.1, 0.5, 0.9),
                          moe=MoEConfig(h=8, h_z=4, h_ff=8, S=1, C=2, M=4, k=2, input_mode="covariate-plus-token"))
        frames = synthetic_frames(2, 3, seed=1)
        windows = [make_windows(f, 16, 4, 16)[0] for f in frames] + [make_windows(frames[0], 16, 4, 16)[1]]
        model = CovMoEModel.build(cfg)
        params = set_scope(model, "moe+tokenizer")
        tape = GradTape()
        loss, routing = batch_loss(model, windows, tape, "softmax-topk")
        tape.backward(loss)
        worst = 0.0
        for p in params:
            def f(theta, p=p):
                old = p.value
                p.value = theta
                val = float(batch_loss(model, windows, OFF, "softmax-topk", forced=routing)[0].value)
                p.value = old
                return val
            # tensors off the tape (e.g. the fallback prior here) have an exact zero gradient
            g = np.zeros_like(p.value) if p.grad is None else p.grad
            worst = max(worst, grad_check(f, p.value, 1e-5, analytic=g))
        assert len(params) == len(model.layer.tensors()) + len(model.tokenizer.tensors())
        assert worst < 1e-4, worst
        assert time.perf_counter() - t0 < 30


def test_02_sparse_dense_equivalence(capsys):
    with criterion(2, "sparse forward == dense oracle (1e-12), unselected grads bitwise 0", capsys):
        t0 = time.perf_counter()
        for seed in range(50):
            rng = Rng(seed, "acc2")
            M = int(rng.integers(1, 7))
            layer = make_layer(seed, S=int(rng.integers(0, 3)), C=int(rng.integers(0, 3)), M=M,
                               k=int(rng.integers(1, M + 1)))
            tokens, inp = make_inputs(layer, 6, seed, usable=rng.uniform(0, 1, 6) > 0.2)
            tape = GradTape()
            x = Tensor(tokens, True, "x")
            out, routing = layer.forward(x, inp, tape)
            assert np.max(np.abs(out.value - dense_forward(layer, tokens, routing))) <= 1e-12
            grads = moe_backward(layer, tape, out, rng.normal(size=out.shape))
            used = set(routing.sel.reshape(-1).tolist())
            for j, e in enumerate(layer.unified()):
                if e.cls != "shared" and j not in used:
                    for t in e.tensors():
                        assert np.array_equal(grads[t.name], np.zeros_like(t.value)), t.name
        assert time.perf_counter() - t0 < 10


def test_03_routing_invariants(capsys):
    with criterion(3, "weights sum to 1, shift-invariant decisions, top-k == sort oracle", capsys):
        for seed in range(100):
            layer = make_layer(seed)
            rng = Rng(seed, "acc3")
            dy = lambda shape: rng.integers(-8, 9, shape) / 8.0  # exact arithmetic under integer shifts
            layer.gate.W_g.value, layer.gate.b_g.value = dy(layer.gate.W_g.shape), dy(4)
            layer.gate.cond_prior.value = dy(2)
            tokens, inp = make_inputs(layer, 8, seed)
            inp.cov_embed.value = dy(inp.cov_embed.shape)
            _, r0 = layer.forward(const(tokens), inp, OFF)
            assert np.all(np.abs(r0.weights.sum(axis=1) - 1.0) <= 1e-12)
            c = float(rng.integers(-100, 101))
            layer.gate.b_g.value = layer.gate.b_g.value + c
            layer.gate.cond_prior.value = layer.gate.cond_prior.value + c
            _, r1 = layer.forward(const(tokens), inp, OFF)
            assert list(r0.decisions()) == list(r1.decisions())
        rng = Rng(3, "topk")
        for i in range(1000):
            n = int(rng.integers(1, 12))
            s = rng.integers(-3, 4, n).astype(float) if i % 2 else rng.normal(size=n)
            k = int(rng.integers(1, n + 1))
            oracle = sorted(sorted(range(n), key=lambda j: (-s[j], j))[:k])
            assert sorted(select_topk(s, k).tolist()) == oracle


def test_04_metric_oracles(capsys):
    with criterion(4, "MASE/WQL match brute force (1e-12); MASE hand example = 0.25", capsys):
        rng = Rng(4, "acc4")
        for _ in range(100):
            H, m = int(rng.integers(1, 9)), int(rng.integers(1, 25))
            ins = rng.normal(size=m + int(rng.integers(1, 50)))
            y, yhat = rng.normal(size=H), rng.normal(size=H)
            levels = np.sort(rng.uniform(0.01, 0.99, int(rng.integers(1, 10))))
            vals = rng.normal(size=(H, len(levels)))
            a, b = mase(yhat, y, ins, m), mase_oracle(yhat, y, ins, m)
            assert abs(a - b) <= 1e-12 * max(1.0, abs(b))
            a, b = wql(QuantileForecast(levels, vals), y), wql_oracle(vals, y, levels)
            assert abs(a - b) <= 1e-12 * max(1.0, abs(b))
        assert mase([3.0, 3.0], [2.0, 3.0], [1.0, 3.0, 2.0, 5.0], m=1) == 0.25


def test_05_protocol(desk, capsys):
    with criterion(5, "3-client one-shot protocol, frozen pool, phase errors, privacy audit", capsys):
        from covmoe.experiment import federation

        t0 = time.perf_counter()
        cfg, frames = desk
        fed = federation(cfg, frames)
        assert len(fed.clients) == 3 and 500 <= sum(len(c.partition.all_windows()) for c in fed.clients) <= 700
        seen = [fed.phase]
        with pytest.raises(ProtocolError):
            fed.build_pool()
        fed.train_clients()
        seen.append(fed.phase)
        with pytest.raises(ProtocolError):
            fed.deploy()
        fed.upload()
        seen.append(fed.phase)
        fed.build_pool()
        seen.append(fed.phase)
        before = [e.fingerprint(base_only=False) for e in fed.server.pool]
        fed.train_gate()
        assert [e.fingerprint(base_only=False) for e in fed.server.pool] == before
        seen.append(fed.phase)
        with pytest.raises(ProtocolError):
            fed.train_gate()
        fed.deploy()
        seen.append(fed.phase)
        assert tuple(seen) == PHASES
        with pytest.raises(ProtocolError):
            fed.upload()
        grams = {c.client_id: c.raw_grams for c in fed.clients}
        assert privacy_audit(fed.archive, grams).passed
        c0 = fed.clients[0]
        msg = decode_message(fed.archive[0])
        (expert,) = msg.records()
        expert.W1.value.reshape(-1)[8:16] = np.frombuffer(sorted(c0.raw_grams)[0], dtype="<f8")
        leaked = FedMessage.build(msg.kind, msg.sender, msg.receiver, msg.round, [encode_expert(expert)])
        assert not privacy_audit([leaked.to_bytes()] + fed.archive[1:], grams).passed
        assert time.perf_counter() - t0 < 120


def test_06_communication(desk_federation, capsys):
    with criterion(6, "ledger bytes == 8 * params + headers; reduction > 0.3", capsys):
        fed = desk_federation
        m = fed.model_cfg.moe
        for e in fed.ledger.entries:
            if e.kind == "ExpertUpload":
                params = fed.cfg.experts_per_client * (2 * m.h * m.h_ff + m.h_ff + m.h)
                headers = message_header_len(e.sender, e.receiver) + fed.cfg.experts_per_client * (
                    expert_record_len(m.h, m.h_ff, 0, e.sender) - 8 * (2 * m.h * m.h_ff + m.h_ff + m.h))
            else:
                gm = fed.server.gate_model.cfg
                params = count_params(gm, "moe-only")
                headers = message_header_len(e.sender, e.receiver) + GATE_HEADER_LEN + sum(
                    expert_record_len(m.h, m.h_ff, 0, x.origin_client) - 8 * x.n_params() for x in fed.server.pool)
            assert e.byte_len == 8 * params + headers
        rep = communication_report(fed.ledger, fed.tokenizer, fed.backbone)
        full = rep["moe_bytes"] + len(fed.ledger) * 8 * (fed.tokenizer.n_params() + fed.backbone.n_params())
        assert rep["full_finetune_bytes"] == full
        assert rep["reduction_fraction"] == round(1 - rep["moe_bytes"] / full, 4) > 0.3


def test_07_learning(desk_federation, capsys):
    with criterion(7, "toy loss halves within 50 steps; gate-only val loss drops from init", capsys):
        model, windows, cfg = toy_task()
        init = eval_loss(model, windows)
        rep = train_local(model, windows, cfg)
        assert rep.steps <= 50 and eval_loss(model, windows) < 0.5 * init
        trace = desk_federation.server.val_trace
        assert trace[-1] < trace[0]


def test_08_robustness(desk, capsys):
    with criterion(8, "median MASE non-decreasing in missing share; 100% runs via fallback", capsys):
        cfg, frames = desk
        res = robustness_study(cfg, central_data(cfg, frames), cfg.eval.robustness_seeds)
        med = [res["median_mase"][k] for k in ("0", "0.2", "0.5", "1")]
        assert len(res["seeds"]) == 5 and all(np.isfinite(med))
        assert all(a <= b for a, b in zip(med, med[1:])), med
        assert res["fallback_fraction"]["1"] == [1.0] * 5
        assert statistics.median(res["fallback_fraction"]["0"]) == 0.0


def _ablate(out):
    assert main(["ablate", "--config", DESK, "--axis", "all", "--out", str(out)]) == 0
    return {a: json.loads((out / f"ablation_{a}.json").read_text())
            for a in ("expert-count", "gating-strategy", "perturbation-grid")}


def test_09_ablation(tmp_path, capsys):
    with criterion(9, "ablation row sets with finite, deterministic (MASE, WQL)", capsys):
        a, b = _ablate(tmp_path / "a"), _ablate(tmp_path / "b")
        assert a == b
        rows = {k: [r["setting"] for r in v["rows"]] for k, v in a.items()}
        assert rows["gating-strategy"] == list(GATING_ROWS)
        assert rows["expert-count"] == [f"N={n}" for n in EXPERT_COUNTS]
        assert len(rows["perturbation-grid"]) == 6
        for v in a.values():
            for r in v["rows"]:
                assert np.isfinite(r["mase"]) and np.isfinite(r["wql"])


def _reports(d, skip=("manifest.json",)):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.name not in skip}


def test_10_determinism(tmp_path, capsys):
    with criterion(10, "train/fed-sim reruns bitwise identical; concurrent == sequential", capsys):
        for cmd in ("train", "fed-sim"):
            for run in ("a", "b"):
                assert main([cmd, "--config", DESK, "--out", str(tmp_path / cmd / run)]) == 0
            a, b = _reports(tmp_path / cmd / "a"), _reports(tmp_path / cmd / "b")
            assert len(a) > 3 and a == b
        conc = tmp_path / "fed-sim" / "concurrent"
        assert main(["fed-sim", "--config", DESK, "--out", str(conc), "--set", "fed.concurrent=true"]) == 0
        skip = ("manifest.json", "resolved_config.json")
        assert _reports(conc, skip) == _reports(tmp_path / "fed-sim" / "a", skip)
        assert load_config(DESK).fed.concurrent is False


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
