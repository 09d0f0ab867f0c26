"""Acceptance criteria, one test each; every test prints a PASS/FAIL line.

The end-to-end pipeline behind criteria 9 and 10 is built once per session
(demo collection, tactile pretraining, two policies, 120 rollouts) and takes
most of the runtime.
"""

import time

import numpy as np
import pytest
from conftest import acceptance, tiny_config, tiny_inputs

from tactile_vla import autodiff as ad
from tactile_vla import dataset as D
from tactile_vla import sim
from tactile_vla.autodiff import Parameter, Tensor
from tactile_vla.checkpoint import CheckpointError, load_policy, module_checksums, policy_from_bytes, save_policy
from tactile_vla.encoders import ViTConfig
from tactile_vla.fusion import film_apply, select_film_blocks
from tactile_vla.harness import probe as PR
from tactile_vla.harness import training as TR
from tactile_vla.harness.config import TrainConfig
from tactile_vla.harness.evaluate import evaluate
from tactile_vla.policy import (
    PolicyConfig, PolicyInput, action_loss, adapter_count, build_policy, encode_text, lora_merge, lora_targets,
    policy_forward,
)
from tactile_vla.rollout import ExpertController, run_episodes

# -- 1 ---------------------------------------------------------------------------


def test_01_fusion_identity():
    cfg = PolicyConfig()
    vo = build_policy(PolicyConfig(variant="VisionOnly"), seed=0)
    tf = build_policy(cfg, seed=0)
    g = np.random.default_rng(0)
    text = np.repeat(encode_text(sim.TASKS["circle2"].instruction, cfg)[None], 100, axis=0)
    inp = PolicyInput(g.random((100, 48, 48, 3)), text, g.random((100, 32, 32, 6)))
    same = np.array_equal(policy_forward(vo, inp).data, policy_forward(tf, inp).data)
    assert acceptance(1, "TacFiLM logits bit-identical to VisionOnly twin at init", same, "100 random observations")


# -- 2 ---------------------------------------------------------------------------


def test_02_sequence_length_invariance():
    g = np.random.default_rng(1)
    pols = {v: build_policy(PolicyConfig(variant=v), 0) for v in ("VisionOnly", "TacFiLM", "TactileConcat")}
    ok = True
    for instruction in {t.instruction for t in sim.TASKS.values()}:
        text = encode_text(instruction, PolicyConfig())[None]
        inp = PolicyInput(g.random((1, 48, 48, 3)), text, g.random((1, 32, 32, 6)))
        n = {v: p.sequence_length(inp) for v, p in pols.items()}
        ok &= n["TacFiLM"] == n["VisionOnly"] and n["TactileConcat"] == n["VisionOnly"] + 16
    assert acceptance(2, "len(TacFiLM) == len(VisionOnly), len(TactileConcat) == len(VisionOnly) + 16", ok, f"lengths {n}")


# -- 3 ---------------------------------------------------------------------------


def _op_errors():
    g = np.random.default_rng(2)

    def P(*shape, s=1.0):
        return Parameter(g.standard_normal(shape) * s)

    def w(*shape):
        return g.standard_normal(shape)

    errs = {}
    a, b = P(3, 4), P(4)
    W = w(3, 4)
    errs["add"] = ad.grad_check(lambda: ad.tsum(ad.mul(ad.add(a, b), W)), [a, b])
    errs["mul/sub"] = ad.grad_check(lambda: ad.tsum((a - b) * a), [a, b])
    x = P(4, 5, s=3.0)
    W5 = w(4, 5)
    errs["gelu"] = ad.grad_check(lambda: ad.tsum(ad.mul(ad.gelu(x), W5)), [x])
    m1, m2 = P(2, 3, 4), P(4, 5)
    W6 = w(2, 3, 5)
    errs["matmul"] = ad.grad_check(lambda: ad.tsum(ad.mul(ad.matmul(m1, m2), W6)), [m1, m2])
    xi, Wl, bl = P(2, 4), P(4, 3), P(3)
    W7 = w(2, 3)
    errs["linear"] = ad.grad_check(lambda: ad.tsum(ad.mul(ad.linear(xi, Wl, bl), W7)), [xi, Wl, bl])
    xn, gn, bn = P(3, 6), P(6), P(6)
    W8 = w(3, 6)
    errs["layer_norm"] = ad.grad_check(lambda: ad.tsum(ad.mul(ad.layer_norm(xn, gn, bn), W8)), [xn, gn, bn])
    xs = P(4, 5)
    W9 = w(4, 5)
    errs["softmax"] = ad.grad_check(lambda: ad.tsum(ad.mul(ad.softmax(xs, ad.causal_mask(5)[:4]), W9)), [xs])
    lg, tg = P(6, 7), g.integers(0, 7, 6)
    errs["cross_entropy"] = ad.grad_check(lambda: ad.softmax_cross_entropy(lg, tg), [lg])
    E, ids = P(5, 3), np.array([[0, 4, 4]])
    W10 = w(1, 3, 3)
    errs["embedding"] = ad.grad_check(lambda: ad.tsum(ad.mul(ad.embedding(E, ids), W10)), [E])
    c1, c2 = P(2, 3), P(2, 2)
    W11 = w(5, 2)
    errs["concat/transpose"] = ad.grad_check(lambda: ad.tsum(ad.mul(ad.transpose(ad.concat([c1, c2], -1)), W11)), [c1, c2])
    xa = P(2, 4, 6)
    wts = [(P(6, 6, s=0.4), P(6)) for _ in range(4)]
    W12 = w(2, 4, 6)
    params = [xa] + [p for pair in wts for p in pair]
    errs["attention"] = ad.grad_check(lambda: ad.tsum(ad.mul(ad.multi_head_attention(xa, *wts, heads=2, causal=True), W12)), params)
    F, ga, be = P(2, 3, 4), P(2, 4), P(2, 4)
    W13 = w(2, 3, 4)
    errs["film"] = ad.grad_check(lambda: ad.tsum(ad.mul(film_apply(F, ga, be), W13)), [F, ga, be])
    return errs


def test_03_gradient_correctness():
    errs = _op_errors()
    vit = ViTConfig(image_size=16, patch_size=8, embed_dim=8, blocks=2, heads=2, mlp_ratio=2.0)
    pol = build_policy(tiny_config("TacFiLM", vit=vit), seed=0)
    g = np.random.default_rng(3)
    for mlp in pol.film.mlps.values():
        mlp.fc2.weight.data = g.standard_normal(mlp.fc2.weight.shape) * 0.1
    inp = tiny_inputs(pol.config, n=1)
    targets = pol.config.action_base + g.integers(0, pol.config.bins, (1, 3))
    e2e = ad.grad_check(lambda: action_loss(pol, inp, targets), pol.trainable(), max_coords=8, rng=np.random.default_rng(4))
    worst = max(errs, key=errs.get)
    ok = e2e < 1e-4 and errs[worst] < 1e-4
    assert acceptance(3, "grad_check end-to-end (2+2 blocks) and every op < 1e-4", ok,
                      f"end-to-end {e2e:.2e}, worst op {worst} {errs[worst]:.2e}")


# -- 4 ---------------------------------------------------------------------------


def test_04_film_oracle():
    g = np.random.default_rng(4)
    worst = 0.0
    for _ in range(1000):
        t, c = g.integers(1, 6), g.integers(1, 6)
        F, gamma, beta = g.standard_normal((t, c)), g.standard_normal(c), g.standard_normal(c)
        out = film_apply(Tensor(F), Tensor(gamma), Tensor(beta)).data
        ref = np.empty((t, c))
        for i in range(t):
            for j in range(c):
                ref[i, j] = F[i, j] * (1.0 + gamma[j]) + beta[j]
        worst = max(worst, float(np.abs(out - ref).max()))
    assert acceptance(4, "film_apply matches scalar-loop oracle to 1e-12", worst <= 1e-12, f"max |diff| {worst:.1e} over 1000 draws")


# -- 5 ---------------------------------------------------------------------------


def test_05_lora_contract():
    cfg = TrainConfig(steps=5, batch_size=4, log_every=1, ckpt_every=0, warmup=0, vit_embed_dim=8, vit_blocks=3, vit_heads=2,
                      d_lm=16, lm_blocks=2, lm_heads=2, dtype="float64", lr=1e-2)
    demos = D.collect_demos("circle3", 3, seed=0)
    base = TR.train(demos, cfg, variant="VisionOnly").policy
    encoder = PR.random_encoder(seed=1, dtype=np.float64)
    res = TR.finetune(base, demos, cfg, encoder, "TacFiLM")
    tuned = res.policy
    before, after = module_checksums(base), module_checksums(tuned)
    frozen = [n for n, p in tuned.named_parameters() if p.frozen and n in before]
    unchanged = all(after[n] == before[n] for n in frozen)
    closed = sum(cfg.lora_r * (lin.d_in + lin.d_out) for _, lin in lora_targets(tuned))
    merged = lora_merge(tuned)
    g = np.random.default_rng(5)
    text = np.repeat(encode_text(demos[0].instruction, tuned.config)[None], 4, axis=0)
    inp = PolicyInput(g.random((4, 48, 48, 3)), text, g.random((4, 32, 32, 6)))
    diff = float(np.abs(policy_forward(merged, inp).data - policy_forward(tuned, inp).data).max())
    moved = any(np.abs(p.data).max() > 0 for n, p in tuned.named_parameters() if n.endswith("lora.B"))
    ok = unchanged and len(frozen) > 0 and moved and adapter_count(tuned) == closed and diff < 1e-10
    assert acceptance(5, "LoRA: frozen checksums unchanged, merge == adapted, adapter count closed form", ok,
                      f"{len(frozen)} frozen tensors, {closed} adapter params, merge diff {diff:.1e}")


# -- 6 ---------------------------------------------------------------------------


def test_06_depth_masks():
    ok = True
    for B in range(3, 13):
        n = -(-B // 3)
        expect = {"All": list(range(B)), "Early": list(range(n)), "Middle": list(range((B - n) // 2, (B - n) // 2 + n)),
                  "Late": list(range(B - n, B))}
        for variant, blocks in expect.items():
            ok &= select_film_blocks(variant, B) == blocks
            vit = ViTConfig(image_size=16, patch_size=8, embed_dim=8, blocks=B, heads=2, mlp_ratio=1.0)
            pol = build_policy(tiny_config("TacFiLM", vit=vit, depth_variant=variant), 0)
            ok &= set(pol.film.mlps) == {f"{s}{b}" for s in "AB" for b in blocks}
    assert acceptance(6, "select_film_blocks closed-form thirds for B in 3..12; only selected blocks carry FiLM", ok)


# -- 7 ---------------------------------------------------------------------------


def test_07_sim_determinism_and_force():
    runs = [run_episodes(sim.TASKS["circle2"], [11, 12, 13], ExpertController(0.3), "Freeze50") for _ in range(2)]
    same = all(
        a.states == b.states and a.infos == b.infos and all(np.array_equal(x, y) for x, y in zip(a.rgb + a.tactile, b.rgb + b.tactile))
        for a, b in zip(*runs)
    )
    errs = []
    for delta in (0.5, 1.0, 2.0):
        st = sim.initial_state(sim.TASKS["circle3"], x=20.0, z=0.0)
        _, _, info = sim.step(st, [0.0, -delta, 0.0])
        errs.append(abs(info.contact_force - 500.0 * delta * 1e-3))
    ok = same and max(errs) <= 1e-12
    assert acceptance(7, "simulator traces bit-identical; static force == k*delta", ok, f"max force error {max(errs):.1e} N")


# -- 8 ---------------------------------------------------------------------------


def test_08_probe_suite():
    sets = PR.make_probe_sets(2000, seed=0)
    pretrained, _ = PR.pretrain_tactile(sets, steps=600, seed=0)
    table = PR.probe_eval({"pretrained": pretrained, "random": PR.random_encoder(seed=1)}, sets, seed=0)
    acc = {(t, e): a for t, row in table.items() for e, a in row.items()}
    mean = {e: np.mean([acc[(t, e)] for t in table]) for e in ("pretrained", "random")}
    ok = (acc[("Contact", "pretrained")] >= 0.95 and acc[("RotationHigh", "pretrained")] >= 0.90
          and all(acc[("RotationLow", e)] <= acc[("RotationHigh", e)] for e in ("pretrained", "random"))
          and mean["pretrained"] > mean["random"])
    detail = "; ".join(f"{t}: " + ", ".join(f"{e} {100 * a:.1f}%" for e, a in row.items()) for t, row in table.items())
    assert acceptance(8, "probe suite floors and orderings", ok, detail)


# -- 9, 10 -------------------------------------------------------------------------

# Recipe for the end-to-end comparison, sized for a one-hour single-core budget (see README).
PIPELINE = dict(task="circle2", demos=80, probe_steps=600, episodes=30, base_seed=1000)
TRAIN = dict(steps=16000, batch_size=16, lr=1e-3, warmup=200, log_every=1000, ckpt_every=0,
             vit_embed_dim=32, vit_blocks=2, d_lm=64, lm_blocks=2)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    out = tmp_path_factory.mktemp("pipeline")
    t0 = time.time()
    demos = D.collect_demos(PIPELINE["task"], PIPELINE["demos"], seed=0, path=out / "demos.tvep")
    encoder, _ = PR.pretrain_tactile(PR.make_probe_sets(2000, seed=0), steps=PIPELINE["probe_steps"], seed=0)
    cfg = TrainConfig(**TRAIN)
    policies = {
        "VisionOnly": TR.train(out / "demos.tvep", cfg, None, out, variant="VisionOnly").policy,
        "TacFiLM": TR.train(out / "demos.tvep", cfg, encoder, out, variant="TacFiLM").policy,
    }
    results = {}
    for name in policies:
        pol = load_policy(out / f"policy_{name}.ckpt", cfg.dtype)
        for cam in ("Clean", "Freeze50"):
            results[(name, cam)] = evaluate(pol, PIPELINE["task"], PIPELINE["episodes"], cam, PIPELINE["base_seed"]).metrics
    return {"results": results, "minutes": (time.time() - t0) / 60, "demos": len(demos)}


def test_09_end_to_end_direction(pipeline):
    r = pipeline["results"]
    vo, tf = r[("VisionOnly", "Clean")], r[("TacFiLM", "Clean")]
    # compare whole episodes; percentages of 30 do not subtract exactly in floating point
    wins = {m: round(r[(m, "Clean")].success_rate * PIPELINE["episodes"] / 100) for m in ("VisionOnly", "TacFiLM")}
    ok = 100 * (wins["TacFiLM"] - wins["VisionOnly"]) >= 10 * PIPELINE["episodes"] and tf.avg_max_force <= vo.avg_max_force and pipeline["minutes"] <= 60
    detail = (f"success TacFiLM {tf.success_rate:.1f}% vs VisionOnly {vo.success_rate:.1f}%, force {tf.avg_max_force:.2f} vs "
              f"{vo.avg_max_force:.2f} N, pipeline {pipeline['minutes']:.1f} min")
    assert acceptance(9, "TacFiLM beats VisionOnly by >= 10 pp on circle2 with no more force", ok, detail)


def test_10_camera_degradation(pipeline):
    r = pipeline["results"]
    n = PIPELINE["episodes"]
    drop = {m: round((r[(m, "Clean")].success_rate - r[(m, "Freeze50")].success_rate) * n / 100) * 100 / n
            for m in ("VisionOnly", "TacFiLM")}
    ok = drop["TacFiLM"] <= drop["VisionOnly"]
    assert acceptance(10, "Freeze50 success drop of TacFiLM <= VisionOnly", ok,
                      f"drop TacFiLM {drop['TacFiLM']:.1f} pp, VisionOnly {drop['VisionOnly']:.1f} pp")


# -- 11 --------------------------------------------------------------------------


def test_11_persistence(tmp_path):
    g = np.random.default_rng(11)
    demos = D.collect_demos("circle3", 2, seed=0)
    data = D.write_episodes(demos, tmp_path / "d.tvep").read_bytes()
    back_eps = D.read_episodes(tmp_path / "d.tvep")
    ep_ok = D.encode_episodes(back_eps) == data and all(
        np.array_equal(a.rgb, b.rgb) and np.array_equal(a.tactile, b.tactile) and np.array_equal(a.action, b.action)
        for a, b in zip(back_eps, demos)
    )
    try:
        D.decode_episodes(data[:-7])
        ep_loc = False
    except D.FormatError as e:
        ep_loc = e.index == 1 and e.offset is not None
    pol = build_policy(tiny_config("TacFiLM"), seed=2)
    pol.norm_stats = D.compute_norm_stats(demos)
    raw = save_policy(pol, tmp_path / "p.ckpt").read_bytes()
    back, _ = policy_from_bytes(raw)
    ck_ok = module_checksums(back) == module_checksums(pol) and save_policy(back, tmp_path / "q.ckpt").read_bytes() == raw
    bad = bytearray(raw)
    pos = int(g.integers(len(raw) - 2000, len(raw)))
    bad[pos] ^= 0x01
    try:
        policy_from_bytes(bytes(bad))
        ck_loc = False
    except CheckpointError as e:
        ck_loc = e.tensor is not None and e.offset is not None and e.offset <= pos
    ok = ep_ok and ep_loc and ck_ok and ck_loc
    assert acceptance(11, "episode and checkpoint files round-trip bit-exactly; corruption located", ok,
                      f"episodes {ep_ok}/{ep_loc}, checkpoint {ck_ok}/{ck_loc}")
