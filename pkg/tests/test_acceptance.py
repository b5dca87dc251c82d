"""Acceptance suite. Each test asserts one release criterion and prints a
PASS/FAIL line (run with -s to watch them). The toy training fixture is
session-scoped: two models (all enhancements on; all off) trained once on
the fixed seed and evaluated on held-out synthetic cases.
"""

import base64
import json
import threading

import numpy as np
import pytest

from test_harness import ScriptedSession, brute_force_interior, masks_with_dscs
from test_palm import make_palm, oracle_attention, oracle_layer_norm, oracle_site

from pemed import cli
from pemed import tensor as T
from pemed.backbone import ModelConfig, PemedModel
from pemed.engine import InteractiveSession, binarize, self_loop_init, tsip_combine
from pemed.harness import (
    connected_components,
    dsc,
    engine_session_factory,
    interior_point,
    next_click,
    noc,
    simulate_case,
)
from pemed.prompts import Click, assemble_input, write_pgm
from pemed.service import PemedService, decode_mask_rle, encode_mask_rle, make_server
from pemed.tensor import AttentionConfig, Tensor
from pemed.training import (
    TrainConfig,
    gen_synthetic_sample,
    normalized_focal_loss,
    sample_seed,
    train,
    write_dataset,
)

SEED = 42
N_HELDOUT = 24
CAP = 10

TOY_FULL = ModelConfig(
    input_size=64,
    stage_dims=(16, 32, 64, 128),
    stage_depths=(2, 2, 2, 2),
    stage_heads=(1, 2, 4, 8),
    fusion_dim=64,
    decoder_hidden=64,
    tsip_hidden=16,
    disk_radius=5.0,
)
TOY_BASELINE = ModelConfig(
    **{
        **TOY_FULL.to_dict(),
        "enable_self_loop": False,
        "enable_palm_i": False,
        "enable_palm_o": False,
        "enable_tsip": False,
    }
)
TOY_TRAIN = TrainConfig(
    epochs=8,
    batch_size=8,
    lr=5e-3,
    train_count=200,
    max_train_clicks=5,
    seed=SEED,
)

TINY = ModelConfig(
    input_size=16,
    stage_dims=(4, 4, 8, 8),
    stage_depths=(1, 1, 1, 1),
    stage_heads=(1, 1, 2, 2),
    patch_strides=(2, 2, 2, 2),
    fusion_dim=8,
    decoder_hidden=8,
    tsip_hidden=4,
    disk_radius=2.0,
)

SERVICE_CFG = ModelConfig(
    input_size=32,
    stage_dims=(8, 8, 16, 16),
    stage_depths=(1, 1, 1, 1),
    stage_heads=(1, 1, 2, 2),
    fusion_dim=8,
    decoder_hidden=8,
    tsip_hidden=4,
    disk_radius=3.0,
)


def criterion(name: str, ok: bool, detail: str = ""):
    print(f"\nACCEPTANCE {name}: {'PASS' if ok else 'FAIL'} {detail}".rstrip())
    assert ok, f"{name} failed: {detail}"


def heldout_case(i: int):
    return gen_synthetic_sample(sample_seed(SEED, 10_000_000 + i), TOY_FULL.input_size, TOY_FULL.input_size, TOY_TRAIN)


def evaluate(model):
    factory = engine_session_factory(model)
    curves, roughs, warms = [], [], []
    for i in range(N_HELDOUT):
        image, gt = heldout_case(i)
        res = simulate_case(factory, image, gt, cap=CAP)
        curves.append(res.dscs)
        roughs.append(res.rough_dsc)
        warms.append(res.warm_dsc)
    return np.array(curves), np.array(roughs), np.array(warms)


@pytest.fixture(scope="session")
def toy(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    full_path = root / "full.pemd"
    base_path = root / "baseline.pemd"
    full = train(TOY_TRAIN, TOY_FULL, full_path)
    baseline = train(TOY_TRAIN, TOY_BASELINE, base_path)
    full_curves, full_rough, full_warm = evaluate(full)
    base_curves, _, _ = evaluate(baseline)
    return {
        "root": root,
        "full_path": full_path,
        "full_curves": full_curves,
        "full_rough": full_rough,
        "full_warm": full_warm,
        "base_curves": base_curves,
    }


# -- formula oracles ----------------------------------------------------------


class TestFormulaOracleSuite:
    def test_palm_and_attention_match_float64_brute_force(self):
        rng = np.random.default_rng(SEED)
        checked = 0
        worst = 0.0
        for trial in range(25):
            d = int(rng.choice([2, 4, 8]))
            heads = int(rng.choice([h for h in (1, 2) if d % h == 0]))
            n = int(rng.integers(1, 5))
            palm = make_palm(d=d, heads=heads, seed=1000 + trial)
            mk = lambda s: Tensor(np.random.default_rng(s).normal(size=(n, d)))
            m_pos, m_neg, m_glob = mk(trial * 7 + 1), mk(trial * 7 + 2), mk(trial * 7 + 3)
            f_img, e_p = mk(trial * 7 + 4), mk(trial * 7 + 5)

            hat_pos, hat_neg = palm.enhance_prompts(m_pos, m_neg)
            worst = max(
                worst,
                np.abs(hat_pos.numpy() - oracle_site(palm.site_pos, m_neg.numpy(), m_pos.numpy(), m_pos.numpy())).max(),
                np.abs(hat_neg.numpy() - oracle_site(palm.site_neg, m_pos.numpy(), m_neg.numpy(), m_neg.numpy())).max(),
            )
            hat_glob = palm.enhance_global(m_glob)
            worst = max(
                worst,
                np.abs(hat_glob.numpy() - oracle_site(palm.site_global, m_glob.numpy(), m_glob.numpy(), m_glob.numpy())).max(),
            )
            ep = palm.prompt_feature(hat_pos, hat_neg, hat_glob)
            expected = oracle_site(palm.site_ep_pos, hat_pos.numpy(), hat_glob.numpy(), hat_glob.numpy()) + oracle_site(
                palm.site_ep_neg, hat_neg.numpy(), hat_glob.numpy(), hat_glob.numpy()
            )
            worst = max(worst, np.abs(ep.numpy() - expected).max())
            out = palm.palm_o(f_img, e_p)
            t1 = oracle_layer_norm(
                oracle_site(palm.site_out_image, f_img.numpy(), e_p.numpy(), e_p.numpy()),
                palm.norm_image.g.numpy(),
                palm.norm_image.b.numpy(),
            )
            t2 = oracle_layer_norm(
                oracle_site(palm.site_out_prompt, e_p.numpy(), f_img.numpy(), f_img.numpy()),
                palm.norm_prompt.g.numpy(),
                palm.norm_prompt.b.numpy(),
            )
            worst = max(worst, np.abs(out.numpy() - (f_img.numpy() + t1 + e_p.numpy() + t2)).max())

            # the bare attention primitive, both scale modes
            for mode in ("paper_dk", "sqrt_dk"):
                cfg = AttentionConfig(d_model=d, n_heads=heads, scale_mode=mode)
                q, k, v = mk(trial * 11 + 6), mk(trial * 11 + 7), mk(trial * 11 + 8)
                got = T.attention(q, k, v, cfg).numpy()
                eye, zero = np.eye(d), np.zeros(d)
                exp = oracle_attention(q.numpy(), k.numpy(), v.numpy(), eye, zero, eye, zero, eye, zero, heads, mode)
                worst = max(worst, np.abs(got - exp).max())
            checked += 7
        criterion(
            "formula-oracle-suite",
            checked >= 100 and worst < 1e-5,
            f"{checked} cases, worst |err| {worst:.2e}",
        )


# -- gradients -----------------------------------------------------------------


class TestGradientSuite:
    def test_every_listed_graph_passes_grad_check(self):
        rng = np.random.default_rng(3)
        worst = {}

        q = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        k = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        v = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        cfg = AttentionConfig(d_model=4, n_heads=2)
        worst["attention"] = T.grad_check(lambda: T.tsum(T.attention(q, k, v, cfg)), [q, k, v])

        x = Tensor(rng.normal(size=(5, 6)), requires_grad=True)
        g = Tensor(np.ones(6), requires_grad=True)
        b = Tensor(np.zeros(6), requires_grad=True)
        worst["layer_norm"] = T.grad_check(lambda: T.tsum(T.mul(T.layer_norm(x, g, b), x)), [x, g, b])

        cx = Tensor(rng.normal(size=(2, 6, 6)), requires_grad=True)
        cw = Tensor(rng.normal(size=(3, 2, 3, 3)) * 0.4, requires_grad=True)
        worst["conv2d"] = T.grad_check(lambda: T.tsum(T.conv2d(cx, cw, 1, 1)), [cx, cw])

        lx = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        lw = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
        lb = Tensor(rng.normal(size=3), requires_grad=True)
        worst["linear"] = T.grad_check(lambda: T.tsum(T.gelu(T.linear(lx, lw, lb))), [lx, lw, lb])

        for gamma in (0.0, 2.0):
            logits = Tensor(rng.normal(size=(1, 4, 4)), requires_grad=True)
            gt = rng.random((1, 4, 4)) < 0.5
            worst[f"focal-g{gamma:g}"] = T.grad_check(
                lambda: normalized_focal_loss(logits, gt, gamma), [logits], eps=1e-4
            )

        palm = make_palm(d=4, heads=1, seed=11)
        pimage = Tensor(np.random.default_rng(5).random((1, 8, 8)))
        pprev = Tensor(np.random.default_rng(6).random((1, 8, 8)))
        maps = assemble_input(pimage, [Click(2, 2, "positive"), Click(6, 5, "negative")], pprev, radius=1.5)
        f_img = Tensor(np.random.default_rng(7).normal(size=(4, 4)))
        worst["palm-stack"] = T.grad_check(
            lambda: T.tmean(T.mul(palm.forward(maps, f_img, True, True), f_img)),
            palm.params("palm"),
            eps=1e-4,
            sample_per_param=3,
        )

        tiny = PemedModel(TINY, seed=4, dtype=np.float64)
        n = TINY.input_size
        timage = Tensor(np.random.default_rng(8).random((1, n, n)))
        tprev = Tensor(np.random.default_rng(9).random((1, n, n)))
        tmaps = assemble_input(timage, [Click(4, 4, "positive"), Click(11, 12, "negative")], tprev, radius=2.0)
        o_prev = Tensor(np.random.default_rng(10).normal(size=(1, n, n)))

        def tiny_loss():
            logits = tiny.forward(tmaps)
            combined = tsip_combine(logits, o_prev, tiny)
            gt = np.zeros((1, n, n))
            gt[0, 4:10, 4:10] = 1.0
            return normalized_focal_loss(combined, gt.astype(bool), 2.0)

        worst["tsip+end-to-end"] = T.grad_check(
            tiny_loss, tiny.named_params(), eps=1e-4, sample_per_param=2, rng=np.random.default_rng(12)
        )

        bad = {k: v for k, v in worst.items() if v >= 1e-3}
        criterion(
            "gradient-suite",
            not bad,
            "worst rel err " + ", ".join(f"{k}={v:.1e}" for k, v in worst.items()),
        )


# -- metric oracles --------------------------------------------------------------


class TestMetricOracles:
    def test_dsc_against_pixel_counting(self):
        rng = np.random.default_rng(17)
        exact = True
        for _ in range(1000):
            a = rng.random((6, 7)) < rng.uniform(0, 1)
            b = rng.random((6, 7)) < rng.uniform(0, 1)
            inter = sum(1 for r in range(6) for c in range(7) if a[r, c] and b[r, c])
            total = int(a.sum()) + int(b.sum())
            expected = 1.0 if total == 0 else 2.0 * inter / total
            if dsc(a, b) != expected:
                exact = False
                break
        criterion("metric-oracle-dsc", exact, "1000 random mask pairs, exact")

    def test_noc_against_scripted_sequences(self):
        rng = np.random.default_rng(23)
        ok = True
        for _ in range(50):
            gt = np.zeros((10, 10), dtype=bool)
            gt[2:9, 2:9] = True
            targets = sorted(rng.uniform(0.1, 1.0, size=rng.integers(1, 8)))
            tau = float(rng.uniform(0.2, 1.0))
            masks = masks_with_dscs(gt, targets)
            scripted = [dsc(m >= 0.5, gt) for m in masks]
            count, reached = noc(
                lambda i, g, m=masks: ScriptedSession(m), np.zeros_like(gt), gt, tau=tau, cap=len(masks)
            )
            want = next((i + 1 for i, v in enumerate(scripted) if v >= tau), None)
            if want is None:
                ok &= (count, reached) == (len(masks), False)
            else:
                ok &= (count, reached) == (want, True)
        criterion("metric-oracle-noc", ok, "scripted dice sequences")

    def test_next_click_against_exhaustive_oracle(self):
        rng = np.random.default_rng(29)
        checked = 0
        ok = True
        while checked < 50:
            pred = rng.random((9, 9)) < 0.35
            gt = rng.random((9, 9)) < 0.35
            if not (pred ^ gt).any():
                continue
            checked += 1
            comp = connected_components(pred ^ gt)[0]
            r, c, d = brute_force_interior(comp, 9, 9)
            click = next_click(pred, gt)
            rr, cc, dd = interior_point(comp, 9, 9)
            ok &= (click.y, click.x) == (r, c) and abs(dd - d) < 1e-9
        criterion("metric-oracle-next-click", ok, f"{checked} random error masks")


# -- structural invariants ----------------------------------------------------------


class TestStructuralInvariants:
    def test_first_step_rule_and_self_loop_and_replay_and_schedule(self):
        model = PemedModel(SERVICE_CFG, seed=31)
        image = np.random.default_rng(0).random((1, 32, 32)).astype(np.float32)

        # Eq-style first-step rule: no recurrence term on the first pass
        raw = Tensor(np.random.default_rng(1).normal(size=(1, 32, 32)).astype(np.float32))
        first_rule = tsip_combine(raw, None, model) is raw
        cfg_off = ModelConfig(**{**SERVICE_CFG.to_dict(), "enable_tsip": False, "enable_self_loop": False})
        cfg_on = ModelConfig(**{**SERVICE_CFG.to_dict(), "enable_tsip": True, "enable_self_loop": False})
        a, _, _ = self_loop_init(image, Click(5, 6, "positive"), PemedModel(cfg_off, seed=31))
        b, _, _ = self_loop_init(image, Click(5, 6, "positive"), PemedModel(cfg_on, seed=31))
        first_rule &= np.array_equal(a, b)

        before = model.forward_count
        m0, m1, state = self_loop_init(image, Click(6, 6, "positive"), model)
        two_passes = model.forward_count - before == 2

        clicks = [Click(6, 6, "positive"), Click(20, 25, "negative"), Click(12, 9, "positive")]
        run1 = InteractiveSession(model, image).replay(clicks)
        run2 = InteractiveSession(model, image).replay(clicks)
        replay_ok = np.array_equal(run1, run2)

        sched = ModelConfig().grid_sizes() == [16, 8, 4, 2]
        feats = PemedModel(ModelConfig(), seed=1).forward_encoder(
            assemble_input(
                Tensor(np.random.default_rng(3).random((1, 64, 64), dtype=np.float32)),
                [],
                Tensor(np.zeros((1, 64, 64), dtype=np.float32)),
            )
        )
        sched &= [f.shape for f in feats] == [(256, 16), (64, 32), (16, 64), (4, 128)]

        criterion(
            "structural-invariants",
            first_rule and two_passes and replay_ok and sched,
            f"first-step={first_rule} two-passes={two_passes} replay={replay_ok} schedule={sched}",
        )


# -- toy-scale trends ----------------------------------------------------------------


class TestToyTrends:
    def test_a_heldout_dsc_at_5_clicks(self, toy):
        val = float(toy["full_curves"][:, 4].mean())
        criterion("toy-trend-a-dsc@5", val >= 0.85, f"mean DSC@5 = {val:.4f} (>= 0.85)")

    def test_b_monotone_with_slack(self, toy):
        means = toy["full_curves"].mean(axis=0)
        drops = [float(means[k] - means[k + 1]) for k in range(len(means) - 1)]
        worst = max(drops)
        criterion(
            "toy-trend-b-monotone",
            worst <= 0.01,
            f"worst per-click drop {worst:.4f} (slack 0.01); curve {np.round(means, 3).tolist()}",
        )

    def test_c_warm_start_benefit(self, toy):
        m0 = toy["full_rough"].astype(float)
        m1 = toy["full_warm"].astype(float)
        mean_ok = m1.mean() >= m0.mean() - 0.005
        frac = float(np.mean(m1 > m0))
        criterion(
            "toy-trend-c-self-loop",
            mean_ok and frac >= 0.5,
            f"M0={m0.mean():.4f} M1={m1.mean():.4f} strictly-better={frac:.3f}",
        )

    def test_d_ablation_direction(self, toy):
        full5 = float(toy["full_curves"][:, 4].mean())
        base5 = float(toy["base_curves"][:, 4].mean())
        criterion(
            "toy-trend-d-ablation",
            full5 >= base5 - 0.01,
            f"full DSC@5 {full5:.4f} vs baseline {base5:.4f} (tolerance 0.01)",
        )


# -- benchmark pipeline ----------------------------------------------------------------


class TestBenchmarkPipeline:
    def test_cli_bench_schema_and_exact_aggregates(self, toy, tmp_path, capsys):
        data_dir = tmp_path / "bench_data"
        write_dataset(data_dir, 20, TOY_FULL.input_size, TrainConfig(seed=777))
        out_dir = tmp_path / "bench_out"
        rc = cli.main(
            [
                "bench",
                "--checkpoint",
                str(toy["full_path"]),
                "--data",
                str(data_dir),
                "--cap",
                "10",
                "--tau",
                "0.85,0.90",
                "--out",
                str(out_dir),
            ]
        )
        assert rc == 0
        printed = json.loads(capsys.readouterr().out)
        rows = [json.loads(l) for l in (out_dir / "report.jsonl").read_text().splitlines()]
        summary = json.loads((out_dir / "summary.json").read_text())
        schema_ok = len(rows) == 20
        for row in rows:
            schema_ok &= set(row) == {"case_id", "dsc_per_click", "noc", "reached", "rough_dsc", "warm_dsc"}
            schema_ok &= len(row["dsc_per_click"]) == 10
            schema_ok &= all(0.0 <= v <= 1.0 for v in row["dsc_per_click"])
            schema_ok &= set(row["noc"]) == {"0.85", "0.9"} and set(row["reached"]) == {"0.85", "0.9"}
            schema_ok &= all(1 <= v <= 10 for v in row["noc"].values())
        recompute_ok = summary == printed
        for p in ("1", "2", "3", "5", "10"):
            vals = [r["dsc_per_click"][int(p) - 1] for r in rows]
            recompute_ok &= summary["dsc_mean"][p] == float(np.mean(vals))
            recompute_ok &= summary["dsc_std"][p] == float(np.std(vals))
        for tau in ("0.85", "0.9"):
            counts = [r["noc"][tau] for r in rows]
            recompute_ok &= summary["noc_mean"][tau] == float(np.mean(counts))
            recompute_ok &= summary["noc_std"][tau] == float(np.std(counts))
            fails = [0.0 if r["reached"][tau] else 1.0 for r in rows]
            recompute_ok &= summary["failure_rate"][tau] == float(np.mean(fails))
        criterion(
            "benchmark-pipeline",
            schema_ok and recompute_ok,
            f"20 cases; mean DSC@5 {summary['dsc_mean']['5']:.4f}; NoC@85 {summary['noc_mean']['0.85']:.2f}",
        )


# -- service conformance ----------------------------------------------------------------


class TestServiceConformance:
    def test_service_contract(self):
        import urllib.error
        import urllib.request

        model = PemedModel(SERVICE_CFG, seed=9)
        service = PemedService(model, ttl_minutes=30.0)
        server = make_server(service, port=0)
        thread = threading.Thread(target=server.serve_forever, daemon=True)
        thread.start()
        try:
            def call(method, path, body=None):
                url = f"http://127.0.0.1:{server.server_address[1]}{path}"
                data = None if body is None else json.dumps(body).encode()
                req = urllib.request.Request(url, data=data, method=method)
                try:
                    with urllib.request.urlopen(req) as resp:
                        raw = resp.read()
                        return resp.status, json.loads(raw) if raw else None
                except urllib.error.HTTPError as e:
                    raw = e.read()
                    return e.code, json.loads(raw) if raw else None

            # RLE round trip
            rng = np.random.default_rng(5)
            rle_ok = all(
                np.array_equal(decode_mask_rle(encode_mask_rle(m)), m)
                for m in (rng.random((7, 9)) < rng.uniform(0, 1, size=(50, 1, 1))).astype(np.uint8)
            )

            image = rng.random((32, 32)).astype(np.float32)
            payload = {"image_pgm_b64": base64.b64encode(write_pgm(image)).decode()}
            status, body = call("POST", "/v1/sessions", payload)
            sid = body["session_id"]

            before = model.forward_count
            clicks = [(16, 12, "positive"), (4, 26, "negative"), (22, 18, "positive")]
            service_masks = []
            for x, y, pol in clicks:
                status, body = call("POST", f"/v1/sessions/{sid}/clicks", {"x": x, "y": y, "polarity": pol})
                service_masks.append(decode_mask_rle(body["mask_rle"]))
            self_loop_observed = True
            # first click is 2 passes (warm-start), the rest 1 each
            self_loop_observed &= model.forward_count - before == 2 + (len(clicks) - 1)

            engine_session = InteractiveSession(model, image[None])
            parity = True
            for (x, y, pol), got in zip(clicks, service_masks):
                want = binarize(engine_session.add_click(Click(x, y, pol)))[0]
                parity &= np.array_equal(got, want)

            e404 = call("POST", "/v1/sessions/ffff/clicks", {"x": 1, "y": 1, "polarity": "positive"})[0] == 404
            e400 = call("POST", f"/v1/sessions/{sid}/clicks", {"x": 99, "y": 1, "polarity": "positive"})[0] == 400
            record = service.store.get(sid)
            record.lock.acquire()
            e409 = call("POST", f"/v1/sessions/{sid}/clicks", {"x": 1, "y": 1, "polarity": "positive"})[0] == 409
            record.lock.release()

            criterion(
                "service-conformance",
                rle_ok and parity and self_loop_observed and e404 and e400 and e409,
                f"rle={rle_ok} parity={parity} self-loop={self_loop_observed} 404/400/409={e404}/{e400}/{e409}",
            )
        finally:
            server.shutdown()
            server.server_close()
