"""Exit-criteria suite.

Each test records one pass/fail line (see ``conftest.py``) and then
asserts. The desk pipeline (2,000 examples per class, 30-epoch cap, the
full attack grid on 100 malicious test examples) is trained once per
session, so a full run takes most of an hour on one core.
"""
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

import spritz
from spritz.attacks import AttackConfig, Cnn2cTarget, LinearTarget, cw, deepfool, eligible, fgsm, ifgsm, jsma, pgd
from spritz.cli import gradcheck_models
from spritz.dataio import load_checkpoint, save_checkpoint, synth_dataset
from spritz.experiment import ExperimentConfig, run_scenario1, run_scenario2, run_train, strip_times
from spritz.metrics import aggregate, l1_mean, max_abs, psnr
from spritz.training import split_dataset, train_ensemble

pytestmark = [pytest.mark.acceptance, pytest.mark.slow]

CONFIGS = Path(spritz.__file__).parent / "configs"
GRADIENT_SIGN = ("fgsm", "ifgsm", "bim", "pgd")


def _config(name, out, **overrides):
    raw = ExperimentConfig.load(CONFIGS / f"{name}.json").as_dict()
    raw.update(out=str(out), **overrides)
    return ExperimentConfig.from_dict(raw)


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    cfg = _config("desk", tmp_path_factory.mktemp("desk"))
    t0 = time.perf_counter()
    doc = run_train(cfg)
    return {"config": cfg, "train": doc, "train_seconds": time.perf_counter() - t0}


@pytest.fixture(scope="session")
def scenario1(desk):
    return run_scenario1(desk["config"])


@pytest.fixture(scope="session")
def scenario2(desk):
    return run_scenario2(desk["config"])


def _row(bundle, family, **params):
    for r in bundle["rows"]:
        p = r["params"]
        if p["family"] == family and all(p[k] == v for k, v in params.items()):
            return r
    raise KeyError((family, params))


def _asr(row):
    return 0.0 if row["failed"] else row["asr"]


# ---------------------------------------------------------------- criterion 1


def test_c01_gradients_match_finite_differences(desk, criterion):
    ckpt = desk["config"].out_dir / "checkpoints" / "ensemble.spz"
    t0 = time.perf_counter()
    reports = gradcheck_models(ckpt, seed=0)
    seconds = time.perf_counter() - t0
    worst = max(r.max_rel_error for r in reports.values())
    ok = all(r.passed for r in reports.values()) and seconds < 120
    criterion(1, ok, f"max rel error {worst:.2e} over {sorted(reports)} in {seconds:.0f}s")
    assert all(r.n_checked > 4000 for r in reports.values())
    assert ok


# ---------------------------------------------------------------- criterion 2


def test_c02_clean_accuracy_ordering(desk, criterion):
    acc = {r["classifier"]: r["accuracy"] for r in desk["train"]["rows"]}
    seconds = desk["train_seconds"]
    ok = acc["2C"] >= 0.99 and acc["cmb"] >= acc["2C"] - 0.01 and seconds < 900
    criterion(2, ok, f"accuracy {acc}, epochs {desk['train']['epochs']}, {seconds:.0f}s")
    assert ok


# ---------------------------------------------------------------- criterion 3


def test_c03_scenario1_attack_efficacy(scenario1, criterion):
    assert scenario1["n_examples"] == 100
    needed = {
        "FGSM 0.1": _row(scenario1, "fgsm", epsilon=0.1),
        "I-FGSM 0.1": _row(scenario1, "ifgsm", epsilon=0.1),
        "BIM": _row(scenario1, "bim"),
        "PGD": _row(scenario1, "pgd"),
        "DeepFool": _row(scenario1, "deepfool"),
        "L-BFGS": _row(scenario1, "lbfgs"),
        "C&W c=0": _row(scenario1, "cw", confidence=0),
    }
    asr = {k: _asr(r) for k, r in needed.items()}
    fgsm_psnr = needed["FGSM 0.1"]["psnr"]
    subtle = all(needed[k]["psnr"] > fgsm_psnr for k in ("DeepFool", "C&W c=0"))
    ok = all(v > 0.5 for v in asr.values()) and subtle
    psnrs = {k: round(needed[k]["psnr"], 2) for k in ("FGSM 0.1", "DeepFool", "C&W c=0")}
    criterion(3, ok, f"asr {asr}, psnr {psnrs}")
    assert ok


# ---------------------------------------------------------------- criterion 4


def test_c04_strength_grows_with_epsilon(scenario1, criterion):
    curves = {fam: [_asr(_row(scenario1, fam, epsilon=e)) for e in (0.001, 0.01, 0.1)]
              for fam in ("fgsm", "ifgsm")}
    ok = all(a <= b <= c for a, b, c in curves.values())
    criterion(4, ok, f"asr over eps 0.001/0.01/0.1: {curves}")
    assert ok


# ---------------------------------------------------------------- criterion 5


def test_c05_transfer_to_the_ensemble_is_rare(scenario1, criterion):
    offenders = {}
    checked = 0
    for row, tr in zip(scenario1["rows"], scenario1["transfer"]):
        assert row["attack"] == tr["attack"]
        direct = _asr(row)
        if direct <= 0.5:
            continue
        checked += 1
        if not (tr["SPRITZ-1.5C"] < 0.1 and tr["SPRITZ-1.5C"] < direct):
            offenders[row["attack"]] = (direct, tr["SPRITZ-1.5C"])
    ok = checked > 0 and not offenders
    criterion(5, ok, f"{checked} attacks above 0.5 direct ASR; (direct, ensemble) offenders: {offenders}")
    assert ok


# ---------------------------------------------------------------- criterion 6


def test_c06_ensemble_hardening(scenario1, scenario2, criterion):
    pairs = {}
    for r1, r2 in zip(scenario1["rows"], scenario2["rows"]):
        assert r1["attack"] == r2["attack"]
        if r1["params"]["family"] in GRADIENT_SIGN:
            pairs[r1["attack"]] = (_asr(r1), _asr(r2))
    # a row the 2C already resists completely cannot go lower, so it only has to stay at zero
    not_harder = {k: v for k, v in pairs.items() if not (v[1] < v[0] or v[0] == v[1] == 0.0)}
    below_bar = sum(_asr(r) < 0.5 for r in scenario2["rows"])
    ok = not not_harder and below_bar >= math.ceil(len(scenario2["rows"]) / 2)
    full = {r["attack"]: _asr(r) for r in scenario2["rows"]}
    criterion(6, ok, f"{below_bar}/{len(full)} rows below 0.5; (2C, ensemble) not hardened: {not_harder}; "
                     f"ensemble asr {full}")
    assert ok


# ---------------------------------------------------------------- criterion 7


def test_c07_attack_invariants(desk, criterion):
    t0 = time.perf_counter()
    failures = []
    rng = np.random.default_rng(7)

    # PGD: bit-exact L-inf ball over 1,000 outcomes
    w = rng.normal(size=(16, 16)) / 6400
    target = LinearTarget(w, 0.0)
    for k in range(1000):
        x = rng.uniform(0, 255, size=(16, 16))
        if k % 3 == 0:
            x = np.round(x)
        alpha = float(rng.choice([0.3, 1.0 / 3.0, 2.5, 16.0]))
        target.b = 5.0 - float((w * x).sum())
        out = pgd(target, x, AttackConfig("pgd", alpha=alpha, step_size=0.7 * alpha, iterations=5))
        if not np.max(np.abs(out.adversarial - x)) <= alpha:
            failures.append(f"pgd ball {k}")

    ens = load_checkpoint(desk["config"].out_dir / "checkpoints" / "ensemble.spz")
    t2c = Cnn2cTarget(ens.cnn2c)
    probe = synth_dataset(10, 0.0, 99)
    xs = probe.x[eligible(t2c, probe.x, probe.y)][:4]
    assert len(xs) >= 2

    for x in xs:
        for budget in (1, 5, 20):
            out = jsma(t2c, x, AttackConfig("jsma", theta=0.1, max_l0=budget))
            if np.count_nonzero(out.adversarial != x) > budget:
                failures.append(f"jsma budget {budget}")
        out = cw(t2c, x, AttackConfig("cw", iterations=40, record_iterates=True))
        if not all(it.min() >= 0 and it.max() <= 255 for it in out.extras["iterates"]):
            failures.append("cw iterate out of range")
        for eps in (0.1, 0.01, 0.001):
            out = fgsm(t2c, x, AttackConfig("fgsm", epsilon=eps))
            _, grad, _ = t2c.loss_grad(x, 1)
            raw = x + eps * np.ptp(x) * np.sign(grad)
            inside = (raw >= 0) & (raw <= 255)
            if not np.array_equal(out.adversarial[inside], raw[inside]):
                failures.append(f"fgsm closed form eps={eps}")
            one = ifgsm(t2c, x, AttackConfig("ifgsm", epsilon=eps, steps=1))
            if not np.array_equal(one.adversarial, out.adversarial):
                failures.append(f"ifgsm S=1 eps={eps}")
    seconds = time.perf_counter() - t0
    ok = not failures and seconds < 300
    criterion(7, ok, f"{len(failures)} violations {failures[:5]} in {seconds:.0f}s")
    assert ok


# ---------------------------------------------------------------- criterion 8


def test_c08_metric_oracles(criterion):
    unit = psnr(np.zeros((64, 64)), np.ones((64, 64)))
    oracle_unit = 20 * math.log10(255.0)
    same = psnr(np.full((64, 64), 3.0), np.full((64, 64), 3.0))

    rng = np.random.default_rng(8)
    orig = rng.uniform(0, 255, size=(6, 64, 64))
    adv = np.clip(orig + rng.normal(0, 4, size=orig.shape), 0, 255)
    adv[4] = orig[4]
    success = np.array([1, 0, 1, 1, 0, 1], dtype=bool)
    rep = aggregate("oracle", orig, adv, success, 0.0)
    d = (adv - orig).reshape(6, -1)
    mse = (d ** 2).mean(axis=1)
    finite = mse > 0
    want = {
        "psnr": float(np.mean(10 * np.log10(255.0 ** 2 / mse[finite]))),
        "l1": float(np.abs(d).mean(axis=1).mean()),
        "max": float(np.abs(d).max(axis=1).mean()),
        "asr": 4 / 6,
    }
    got = {k: getattr(rep, k) for k in want}
    per_example = all(abs(l1_mean(o, a) - np.abs(a - o).mean()) <= 1e-12 and max_abs(o, a) == np.abs(a - o).max()
                      for o, a in zip(orig, adv))
    ok = (abs(unit - 48.1308) <= 1e-3 and abs(unit - oracle_unit) <= 1e-12 and same == math.inf
          and all(abs(got[k] - want[k]) <= 1e-12 for k in want) and per_example)
    criterion(8, ok, f"psnr(unit) {unit:.6f}, psnr(same) {same}, aggregate {got}")
    assert ok


# ---------------------------------------------------------------- criterion 9


def test_c09_deepfool_hyperplane_oracle(criterion):
    errs = []
    for seed in range(10):
        rng = np.random.default_rng(seed)
        w = rng.normal(size=(64, 64)) / 64
        x = rng.uniform(60, 190, size=(64, 64))
        margin = float(rng.uniform(0.5, 5.0))
        target = LinearTarget(w, margin - float((w * x).sum()))
        cfg = AttackConfig("deepfool")
        out = deepfool(target, x, cfg)
        dist = margin / np.linalg.norm(w)
        errs.append(abs(out.extras["r_norm"] - dist) / dist)
        errs.append(abs(np.linalg.norm(out.adversarial - x) - (1 + cfg.overshoot) * dist) / dist)
        assert out.success and out.iterations == 1
    worst = max(errs)
    ok = worst < 1e-6
    criterion(9, ok, f"max relative error {worst:.2e} against the hyperplane distance")
    assert ok


# ---------------------------------------------------------------- criterion 10


def _artifacts(out):
    out = Path(out)
    docs = {}
    for rel in ("train/accuracy.json", "scenario1/table.json", "scenario2/table.json"):
        docs[rel] = json.dumps(strip_times(json.loads((out / rel).read_text())), sort_keys=True).encode()
    for rel in ("train/accuracy.csv", "scenario1/transfer.csv", "checkpoints/ensemble.spz"):
        docs[rel] = (out / rel).read_bytes()
    # npz members carry zip timestamps, so compare their arrays
    for p in [out / "data/test.npz", *sorted((out / "scenario1" / "adversarial").glob("*.npz"))]:
        with np.load(p) as z:
            docs[p.name] = b"".join(z[k].tobytes() for k in sorted(z.files))
    for rel in ("scenario1/table.csv", "scenario2/table.csv"):
        lines = (out / rel).read_text().splitlines()
        docs[rel] = "\n".join(line.rsplit(",", 1)[0] for line in lines).encode()
    return docs


def test_c10_determinism_and_round_trip(tmp_path, criterion):
    runs = []
    for name in ("a", "b"):
        cfg = _config("smoke", tmp_path / name)
        run_train(cfg)
        run_scenario1(cfg)
        run_scenario2(cfg)
        runs.append(_artifacts(cfg.out_dir))
    differing = sorted(k for k in runs[0] if runs[0][k] != runs[1].get(k))
    same_keys = runs[0].keys() == runs[1].keys()

    cfg = _config("smoke", tmp_path / "rt")
    train, val, test = split_dataset(synth_dataset(40, 0.0, 5), cfg.split_spec, 5)
    ens = train_ensemble(train, val, test, cfg.train_config, cfg.ae_config).ensemble
    path = save_checkpoint(ens, tmp_path / "rt.spz")
    back = load_checkpoint(path)
    xs = test.x
    exact = (np.array_equal(ens.predict_proba(xs), back.predict_proba(xs))
             and np.array_equal(ens.cnn2c.predict(xs), back.cnn2c.predict(xs))
             and np.array_equal(ens.leg.predict(xs), back.leg.predict(xs))
             and np.array_equal(ens.mal.predict(xs), back.mal.predict(xs)))
    ok = same_keys and not differing and exact
    criterion(10, ok, f"{len(runs[0])} artifacts compared, differing {differing}; round trip bit-exact {exact}")
    assert ok
