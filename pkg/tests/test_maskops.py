import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from mdlab.denoiser import AttentionRecord
from mdlab.errors import MissingAttentionError
from mdlab.maskops import attention_summary, refine_mask, threshold_map


def _record(values, res, mask=None):
    h, w = res
    v = torch.as_tensor(values, dtype=torch.float32).reshape(1, h * w, 1)
    a = torch.cat([v, 0.5 * v], dim=-1)  # max over tokens picks the first
    m = torch.ones(1, h * w) if mask is None else torch.as_tensor(mask, dtype=torch.float32).reshape(1, h * w)
    return AttentionRecord("anomaly", [a], [res], [m])


def test_all_ones_and_all_zeros():
    assert torch.equal(threshold_map(torch.ones(1, 1, 2, 2), (8, 8)).m_star, torch.ones(1, 1, 8, 8))
    assert torch.equal(threshold_map(torch.zeros(1, 1, 2, 2), (8, 8)).m_star, torch.zeros(1, 1, 8, 8))


def test_hand_case_half_maps_to_one():
    # corner-aligned 2->4: output column 1 sits at source x = 1/3, so
    # row 0 gives 0.25 + 0.75 / 3 = 0.5 exactly
    att = torch.tensor([[[[0.25, 1.0], [0.0, 0.25]]]])
    r = threshold_map(att, (4, 4))
    assert r.attention[0, 0, 0, 1].item() == 0.5
    assert torch.equal(r.m_star[0, 0], (r.attention[0, 0] >= 0.5).float())
    assert r.m_star[0, 0, 0].tolist() == [0, 1, 1, 1]
    assert r.m_star[0, 0, 1].tolist() == [0, 0, 1, 1]
    assert r.m_star[0, 0, 3].tolist() == [0, 0, 0, 0]


def test_summary_uses_top_resolution_and_mask():
    hi = _record([[0.2, 0.8], [0.6, 0.4]], (2, 2), mask=[[1, 1], [0, 1]])
    hi.maps.append(torch.full((1, 1, 2), 9.0))
    hi.resolutions.append((1, 1))
    hi.masks.append(torch.ones(1, 1))
    s = attention_summary([hi, _record([[0.4, 0.4], [0.4, 0.4]], (2, 2))])
    expected = torch.tensor([[0.3, 0.6], [0.2, 0.4]])
    assert torch.allclose(s[0, 0], expected, atol=1e-7)


def test_missing_attention():
    with pytest.raises(MissingAttentionError):
        refine_mask([], (4, 4))
    with pytest.raises(MissingAttentionError):
        attention_summary([AttentionRecord("anomaly")])


_maps = st.lists(st.floats(0, 1, allow_nan=False), min_size=9, max_size=9).map(
    lambda v: torch.tensor(v, dtype=torch.float32).reshape(1, 1, 3, 3)
)


@given(_maps)
def test_threshold_idempotent(att):
    m = threshold_map(att, (7, 7)).m_star
    assert torch.equal(threshold_map(m, (7, 7)).m_star, m)


@given(_maps, _maps)
def test_threshold_monotone(a, b):
    lo, hi = torch.minimum(a, b), torch.maximum(a, b)
    m_lo = threshold_map(lo, (9, 9)).m_star
    m_hi = threshold_map(hi, (9, 9)).m_star
    assert torch.all(m_lo <= m_hi)


@given(_maps, st.floats(0.05, 0.95))
def test_threshold_monotone_in_level(att, level):
    m = threshold_map(att, (6, 6), level).m_star
    assert torch.all(m <= threshold_map(att, (6, 6), level / 2).m_star)
