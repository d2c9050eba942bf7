import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dssep import evaluation as E
from dssep import scene
from oracles import si_sdr_reference


def _orthogonal_pair(rng, n=16000, ratio_db=10.0):
    t = rng.standard_normal(n)
    noise = rng.standard_normal(n)
    noise -= (noise @ t) / (t @ t) * t
    noise *= math.sqrt((t @ t) / (noise @ noise) / 10 ** (ratio_db / 10))
    return t, noise


def test_constructed_ten_db(rng):
    t, noise = _orthogonal_pair(rng)
    assert abs(E.si_sdr(t + noise, t) - 10.0) < 1e-6


def test_matches_reference(rng):
    for _ in range(20):
        t = rng.standard_normal(500)
        e = t + rng.uniform(0.1, 3) * rng.standard_normal(500)
        assert E.si_sdr(e, t) == pytest.approx(si_sdr_reference(e, t), abs=1e-9)


def test_caps(rng):
    t = rng.standard_normal(300)
    assert E.si_sdr(t, t) == 60.0
    assert E.si_sdr(2 * t, t) == 60.0
    other = np.zeros(300)
    other[0] = 1.0
    t[0] = 0.0
    assert E.si_sdr(other, t) == -60.0
    with pytest.raises(E.ZeroTargetError):
        E.si_sdr(t, np.zeros(300))
    with pytest.raises(ValueError, match="length"):
        E.si_sdr(t[:-1], t)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), c=st.floats(1e-3, 1e3))
def test_scale_invariance_is_exact(seed, c):
    rng = np.random.default_rng(seed)
    t = rng.standard_normal(256)
    e = t + rng.standard_normal(256)
    # powers of two scale without rounding
    k = 2.0 ** round(math.log2(c))
    assert E.si_sdr(k * e, t) == E.si_sdr(e, t)
    assert E.si_sdr(c * e, t) == pytest.approx(E.si_sdr(e, t), abs=1e-9)


def test_identity_improvement_is_zero(rng):
    m = rng.standard_normal(400)
    t = rng.standard_normal(400)
    assert E.si_sdri(m, m, t) == 0.0


def test_silence_suppression():
    m = np.sin(np.arange(1000) * 0.1)
    assert E.silence_suppression(np.zeros(1000), m) == 80.0
    assert E.silence_suppression(m, m) == 0.0
    assert abs(E.silence_suppression(m / 2, m) - 20 * math.log10(2)) < 1e-12
    assert abs(E.silence_suppression(m / 2, m) - 6.0206) < 1e-4
    with pytest.raises(ValueError, match="non-silent"):
        E.silence_suppression(m, np.zeros(1000))


# --------------------------------------------------------------------------
# scene scoring and aggregation


def test_score_scene_routes_zero_targets(rng):
    m = rng.standard_normal(200)
    near = rng.standard_normal(200)
    s = E.score_scene("x", {"env": "indoor", "far_band": "SR", "n_near": 1, "n_far": 0},
                      m, near, np.zeros(200), near, 0.5 * m)
    assert s.si_sdr_near == 60.0 and s.si_sdr_far is None
    assert s.silence_far == pytest.approx(6.0206, abs=1e-4)
    with pytest.raises(FloatingPointError, match="far"):
        E.score_scene("x", {}, m, near, near, near, np.full(200, np.nan))


def _fake_scores(rng, n=30):
    out = []
    for i in range(n):
        s = E.SceneScore(f"s{i}", rng.choice(["indoor", "outdoor"]), "SR", int(rng.integers(0, 2)), 1)
        s.si_sdri_far = float(rng.standard_normal() * 1e3)
        s.si_sdri_near = float(rng.standard_normal()) if s.n_near else None
        out.append(s)
    return out


def test_aggregate_is_order_independent(rng):
    scores = _fake_scores(rng)
    base = E.aggregate(scores)
    for _ in range(5):
        perm = [scores[i] for i in rng.permutation(len(scores))]
        assert E.aggregate(perm) == base
    assert sum(c.count for c in base) == len(scores)
    for c in base:
        if c.n_near == 0:
            assert c.si_sdri_near is None


def test_format_table(rng):
    text = E.format_table(E.aggregate(_fake_scores(rng)))
    lines = text.splitlines()
    assert lines[0].split()[:3] == ["env", "band", "#n/#f"]
    assert len({len(line) for line in lines[2:-1]}) == 1


def test_evaluate_identity_and_oracle(corpus_mixed, tmp_path):
    records = scene.read_manifest(corpus_mixed)
    _, ident = E.evaluate(lambda m: (m, m), records)
    for c in ident:
        for name in ("si_sdri_near", "si_sdri_far", "silence_near", "silence_far"):
            assert getattr(c, name) in (None, 0.0)
    by_id = {r["id"]: r for r in records}
    waves = {i: E._load_scene(r) for i, r in by_id.items()}
    lookup = {w["mixture"].tobytes(): w for w in waves.values()}

    def oracle(m):
        w = lookup[m.tobytes()]
        return w["near"], w["far"]

    scores, cells = E.evaluate(oracle, records)
    for s in scores:
        for head in ("near", "far"):
            assert getattr(s, f"si_sdr_{head}") in (None, 60.0)
            assert getattr(s, f"silence_{head}") in (None, 80.0)
    out = E.write_report(tmp_path / "r.json", cells, scores, {"checkpoint": "oracle"})
    data = json.loads(out.read_text())
    assert data["checkpoint"] == "oracle" and len(data["scenes"]) == len(records)
    assert "silence" in data["notes"]
    assert (tmp_path / "r.txt").read_text().startswith("env")


def test_evaluate_errors(corpus_mixed, tmp_path):
    records = scene.read_manifest(corpus_mixed)
    with pytest.raises(ValueError, match="band"):
        E.evaluate(lambda m: (m, m), records, bands=["UR9"])
    gone = [dict(records[0], root=str(tmp_path))]
    with pytest.raises(FileNotFoundError, match="missing file"):
        E.evaluate(lambda m: (m, m), gone)
    # band filter drops everything that is not UR1
    scores, cells = E.evaluate(lambda m: (m, m), records, bands=["UR1"])
    assert scores == [] and cells == []
