import math

import numpy as np
import pytest

from conftest import DOMAIN, LEVELS, ConstantModel, linear_scan, random_state
from throttlesim.perfmodel import reference_surrogate
from throttlesim.projection import Scoreboard, ScoreboardEntry, project
from throttlesim.scheduler import SloConfig, SwitchState
from throttlesim.throttle import FrequencyActuator, FrequencyContractError, min_slo_frequency, slo_met_at

def test_binary_search_equals_linear_scan():
    rng = np.random.default_rng(0)
    model = reference_surrogate()
    slo = SloConfig(tbt_slo=0.2)
    hits = set()
    for _ in range(150):
        tp = int(rng.choice([1, 2, 4]))
        sb, now = random_state(rng, model, tp)
        d = min_slo_frequency(project(sb), sb, model, tp, DOMAIN, slo, now)
        assert d.target_mhz == linear_scan(sb, model, slo, now, tp)
        assert d.evaluations <= math.ceil(math.log2(LEVELS.size)) + 1
        hits.add(d.target_mhz)
    # the states exercise more than the two extremes
    assert len(hits) > 10


def test_all_pass_gives_minimum():
    sb = Scoreboard()
    sb.add(ScoreboardEntry(0, 0, 1, 10, deadline=1e9))
    d = min_slo_frequency(project(sb), sb, ConstantModel(50), 1, DOMAIN, SloConfig(), 0.0)
    assert d.target_mhz == 210 and d.evaluations <= 8


def test_only_max_passes():
    model = ConstantModel(50, linear_in_freq=True)
    sb = Scoreboard()
    # 100 iterations at 50 IPS take exactly 2 s; at the next level down they take longer
    sb.add(ScoreboardEntry(0, 0, 1, 100, deadline=2.0 * 1410 / 1395 - 1e-9))
    d = min_slo_frequency(project(sb), sb, model, 1, DOMAIN, SloConfig(), 0.0)
    assert d.target_mhz == 1410


def test_closed_form_threshold():
    # IPS = A f / f_max, n iterations must finish before D: pass iff f > n f_max / (A D)
    A, n, D = 40.0, 300, 11.0
    model = ConstantModel(A, linear_in_freq=True)
    sb = Scoreboard()
    sb.add(ScoreboardEntry(0, 0, 1, n, deadline=D))
    p = project(sb)
    f_star = n * 1410.0 / (A * D)
    for f in LEVELS:
        assert slo_met_at(float(f), p, sb, model, 1, SloConfig(tbt_slo=10.0), 0.0) == (f > f_star)
    d = min_slo_frequency(p, sb, model, 1, DOMAIN, SloConfig(tbt_slo=10.0), 0.0)
    assert d.target_mhz == LEVELS[LEVELS > f_star][0]


def test_predicate_monotone_on_surrogate():
    rng = np.random.default_rng(1)
    model = reference_surrogate()
    for _ in range(20):
        sb, now = random_state(rng, model)
        p = project(sb)
        ok = [slo_met_at(float(f), p, sb, model, 1, SloConfig(), now) for f in LEVELS]
        first = ok.index(True)
        assert all(ok[first:]) and not any(ok[:first])


def test_lost_entry_bypasses():
    sb = Scoreboard()
    sb.add(ScoreboardEntry(0, 0, 1, 10, deadline=1e9))
    sb.add(ScoreboardEntry(1, 0, 1, 10, lost=True))
    d = min_slo_frequency(project(sb), sb, ConstantModel(50), 1, DOMAIN, SloConfig(), 0.0)
    assert d.target_mhz == 1410 and d.bypassed and d.evaluations == 0


def test_empty_projection_gives_minimum():
    sb = Scoreboard()
    assert min_slo_frequency(project(sb), sb, ConstantModel(), 1, DOMAIN, SloConfig(), 0.0).target_mhz == 210


def test_max_failing_is_contract_error():
    sb = Scoreboard()
    sb.add(ScoreboardEntry(0, 0, 1, 100, deadline=0.5))
    with pytest.raises(FrequencyContractError):
        min_slo_frequency(project(sb), sb, ConstantModel(50), 1, DOMAIN, SloConfig(), 0.0)


class _Bumpy(ConstantModel):
    monotone_in_freq = False

    def predict_ips(self, tp, batch, kv, freq):
        f = float(np.asarray(freq))
        # fast only in a narrow band and at the top
        return np.full(np.shape(batch), 100.0 if 600 <= f <= 630 or f == 1410 else 10.0)


def test_non_monotone_uses_linear_scan():
    sb = Scoreboard()
    sb.add(ScoreboardEntry(0, 0, 1, 100, deadline=2.0))
    d = min_slo_frequency(project(sb), sb, _Bumpy(), 1, DOMAIN, SloConfig(), 0.0)
    assert d.target_mhz == 600
    assert d.evaluations == int(np.searchsorted(LEVELS, 600)) + 1


def test_switch_latency_makes_lower_target_harder():
    model = ConstantModel(50, linear_in_freq=True)
    sb = Scoreboard()
    sb.add(ScoreboardEntry(0, 0, 1, 100, deadline=2.5))
    p = project(sb)
    free = min_slo_frequency(p, sb, model, 1, DOMAIN, SloConfig(), 0.0).target_mhz
    slow = min_slo_frequency(p, sb, model, 1, DOMAIN, SloConfig(), 0.0, switch=SwitchState(210, 0.2)).target_mhz
    assert slow > free


def test_actuator_same_target_noop():
    a = FrequencyActuator(1410, 0.2)
    assert a.request(1410, 1.0) is None and a.pending is None and a.switches == 0


def test_actuator_latency():
    a = FrequencyActuator(1410, 0.2)
    done, ver = a.request(900, 10.0)
    assert done == pytest.approx(10.2) and a.effective == 1410
    assert a.complete(ver) and a.effective == 900


def test_actuator_last_writer_wins():
    a = FrequencyActuator(1410, 0.2)
    _, v1 = a.request(900, 10.0)
    done2, v2 = a.request(600, 10.05)
    assert not a.complete(v1) and a.effective == 1410
    assert done2 == pytest.approx(10.25) and a.complete(v2) and a.effective == 600


def test_actuator_rerequest_keeps_completion():
    a = FrequencyActuator(1410, 0.2)
    a.request(900, 10.0)
    assert a.request(900, 10.1) is None and a.done_at == pytest.approx(10.2)


def test_actuator_back_to_current_cancels():
    a = FrequencyActuator(1410, 0.2)
    _, v = a.request(900, 10.0)
    a.request(1410, 10.1)
    assert a.pending is None and not a.complete(v) and a.effective == 1410
