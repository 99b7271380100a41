from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mca_forge.attention import BranchRole, McaVariant
from mca_forge.errors import PolicyError, ScheduleOverlapError, ScheduleSyntaxError
from mca_forge.schedule import (
    TASKS,
    Interval,
    ScheduleRule,
    SchedulePolicy,
    grid,
    load_schedule,
    parse_schedule,
    preset,
    render_schedule,
    resolve,
    uniform,
)

PRESETS = Path(__file__).resolve().parents[1] / "presets"
SRC, TAR = BranchRole.SRC, BranchRole.TAR

INSERTION_TEXT = """\
task=object_insertion_removal
branch=tar steps=0.0:0.3 layers=all variant=swap_kv
branch=tar steps=0.3:0.7 layers=all variant=concat_kv
branch=tar steps=0.7:1.0 layers=all variant=self
"""


def test_empty_body_is_self_everywhere():
    pol = parse_schedule("task=noop\n")
    assert pol.rules == ()
    assert all(v is McaVariant.SELF for *_, v in grid(pol, 3, 7))


def test_insertion_text_rule_counts():
    pol = parse_schedule(INSERTION_TEXT)
    assert len(pol.rules_for(TAR)) == 3
    assert len(pol.rules_for(SRC)) == 0
    assert pol == preset("object_insertion_removal")


def test_overlap_example_names_both_rules():
    text = (
        "task=t\n"
        "branch=tar steps=0.0:0.5 layers=all variant=swap_kv\n"
        "branch=tar steps=0.4:0.8 layers=all variant=concat_kv\n"
    )
    with pytest.raises(ScheduleOverlapError) as exc:
        parse_schedule(text)
    msg = str(exc.value)
    assert "line 2" in msg and "line 3" in msg and "0.4:0.8" in msg


def test_both_overlaps_either_branch():
    text = "task=t\nbranch=both steps=0:1 layers=all variant=self\nbranch=src steps=0.5:0.6 layers=0:0.5 variant=swap_k\n"
    with pytest.raises(ScheduleOverlapError):
        parse_schedule(text)


def test_disjoint_branches_do_not_overlap():
    text = "task=t\nbranch=src steps=0:1 layers=all variant=swap_k\nbranch=tar steps=0:1 layers=all variant=concat_kv\n"
    assert len(parse_schedule(text).rules) == 2


@pytest.mark.parametrize(
    "text,line",
    [
        ("task=t\nbranch=tar steps=0:1 layers=all variant=swap_v\n", 2),
        ("task=t\n\n# c\nbranch=tar steps=0.5:0.2 layers=all variant=self\n", 4),
        ("task=t\nbranch=tar steps=0:1.5 layers=all variant=self\n", 2),
        ("task=t\nbranch=tar steps=a:b layers=all variant=self\n", 2),
        ("task=t\nbranch=tgt steps=0:1 layers=all variant=self\n", 2),
        ("task=t\ntask=u\n", 2),
        ("task=t\nbranch=tar steps=0:1 variant=self\n", 2),
        ("branch=tar steps=0:1 layers=all variant=self\ntask=t\n", 1),
    ],
)
def test_syntax_errors_carry_line_numbers(text, line):
    with pytest.raises(ScheduleSyntaxError) as exc:
        parse_schedule(text)
    assert exc.value.line == line
    assert str(exc.value).startswith(f"line {line}:")


def test_missing_header():
    with pytest.raises(ScheduleSyntaxError):
        parse_schedule("# nothing\n")


def test_comments_and_blank_lines():
    pol = parse_schedule("# hdr\ntask=t  # trailing\n\n   branch=src  steps=0:0.5   layers=all variant=swap_k # x\n")
    assert pol.task == "t" and pol.rules[0].variant is McaVariant.SWAP_K


# --- presets ---------------------------------------------------------------


def test_preset_examples():
    assert resolve(preset("object_insertion_removal"), TAR, 2, 5, 4, 50) is McaVariant.SWAP_KV
    assert resolve(preset("object_insertion_removal"), SRC, 2, 5, 4, 50) is McaVariant.SELF
    assert resolve(preset("motion_viewpoint"), SRC, 0, 25, 4, 50) is McaVariant.CONCAT_KV


@pytest.mark.parametrize("task", TASKS)
def test_no_swap_late(task):
    pol = preset(task)
    for role in BranchRole:
        for layer in range(4):
            assert not pol.lookup(role, layer / 4, 0.95).is_swap
            for s in range(35, 50):
                assert not resolve(pol, role, layer, s, 4, 50).is_swap


@pytest.mark.parametrize("task", TASKS)
def test_preset_round_trip_and_full_grid(task):
    pol = preset(task)
    text = render_schedule(pol)
    assert parse_schedule(text) == pol
    assert render_schedule(parse_schedule(text)) == text
    cells = list(grid(pol, 4, 50))
    assert len(cells) == 2 * 4 * 50
    assert all(isinstance(v, McaVariant) for *_, v in cells)


def test_preset_shapes():
    lm = preset("local_modification")
    assert [r.variant.value for r in lm.rules] == ["swap_kv", "concat_kv", "self"]
    bg = preset("background_replacement")
    assert resolve(bg, SRC, 0, 0, 3, 10) is McaVariant.SWAP_K
    assert resolve(bg, SRC, 2, 0, 3, 10) is McaVariant.SELF  # deep layer
    cm = preset("color_material")
    assert resolve(cm, TAR, 0, 0, 4, 50) is McaVariant.SWAP_KV
    assert resolve(cm, TAR, 0, 25, 4, 50) is McaVariant.CONCAT_K


def test_preset_bounds_configurable():
    pol = preset("local_modification", stage_bounds=(0.2, 0.5))
    assert resolve(pol, SRC, 0, 3, 4, 10) is McaVariant.CONCAT_KV
    with pytest.raises(PolicyError):
        preset("local_modification", stage_bounds=(0.6, 0.5))
    with pytest.raises(PolicyError):
        preset("nope")


@pytest.mark.parametrize("path", sorted(PRESETS.glob("*.sched")), ids=lambda p: p.name)
def test_shipped_files_match_presets(path):
    pol = parse_schedule(path.read_text(encoding="utf-8"))
    assert path.read_text(encoding="utf-8") == render_schedule(preset(pol.task))


def test_load_schedule_forms(tmp_path):
    assert load_schedule("color_material") == preset("color_material")
    assert load_schedule("all-self").rules == ()
    assert load_schedule("all-concat_kv").lookup(SRC, 0.9, 0.99) is McaVariant.CONCAT_KV
    f = tmp_path / "s.sched"
    f.write_text(INSERTION_TEXT)
    assert load_schedule(str(f)) == preset("object_insertion_removal")


# --- resolve ---------------------------------------------------------------


def test_resolve_bounds():
    pol = uniform("concat_kv")
    assert resolve(pol, SRC, 0, 0, 1, 1) is McaVariant.CONCAT_KV
    for bad in [(4, 0), (-1, 0), (0, 50)]:
        with pytest.raises(PolicyError):
            resolve(pol, SRC, bad[0], bad[1], 4, 50)


def test_boundary_goes_to_later_interval():
    pol = parse_schedule("task=t\nbranch=tar steps=0:0.5 layers=all variant=swap_kv\nbranch=tar steps=0.5:1 layers=all variant=concat_kv\n")
    assert resolve(pol, TAR, 0, 4, 1, 10) is McaVariant.SWAP_KV
    assert resolve(pol, TAR, 0, 5, 1, 10) is McaVariant.CONCAT_KV


def _members(branch):
    return {"src", "tar"} if branch == "both" else {branch}


def _oracle_conflict(a, b):
    la = (0.0, 1.0) if a.layers is None else (a.layers.start, a.layers.end)
    lb = (0.0, 1.0) if b.layers is None else (b.layers.start, b.layers.end)
    return (
        bool(_members(a.branch) & _members(b.branch))
        and max(a.steps.start, b.steps.start) < min(a.steps.end, b.steps.end)
        and max(la[0], lb[0]) < min(la[1], lb[1])
    )


tenths = st.integers(0, 10)


@st.composite
def rule(draw):
    s0 = draw(st.integers(0, 9))
    s1 = draw(st.integers(s0 + 1, 10))
    branch = draw(st.sampled_from(["src", "tar", "both"]))
    if draw(st.booleans()):
        layers = None
    else:
        l0 = draw(st.integers(0, 9))
        layers = Interval(l0 / 10, draw(st.integers(l0 + 1, 10)) / 10)
    return ScheduleRule(branch, Interval(s0 / 10, s1 / 10), layers, draw(st.sampled_from(list(McaVariant))))


@settings(max_examples=300, deadline=None)
@given(st.lists(rule(), max_size=5))
def test_overlap_validation_matches_oracle(rules):
    expected_ok = not any(_oracle_conflict(a, b) for i, a in enumerate(rules) for b in rules[i + 1:])
    try:
        SchedulePolicy("t", tuple(rules))
        ok = True
    except ScheduleOverlapError:
        ok = False
    assert ok == expected_ok


@settings(max_examples=200, deadline=None)
@given(st.lists(rule(), max_size=5), st.integers(1, 6), st.integers(1, 20))
def test_resolve_matches_membership_oracle(rules, L, S):
    try:
        pol = SchedulePolicy("t", tuple(rules))
    except ScheduleOverlapError:
        return
    for role, layer, step, got in grid(pol, L, S):
        lf, sf = layer / L, step / S
        match = [
            r.variant for r in rules
            if role.value in _members(r.branch)
            and r.steps.start <= sf < r.steps.end
            and (r.layers is None or r.layers.start <= lf < r.layers.end)
        ]
        assert len(match) <= 1
        assert got is (match[0] if match else McaVariant.SELF)


@settings(max_examples=200, deadline=None)
@given(st.lists(rule(), max_size=5), st.from_regex(r"[a-z_]{1,12}", fullmatch=True))
def test_round_trip(rules, task):
    try:
        pol = SchedulePolicy(task, tuple(rules))
    except ScheduleOverlapError:
        return
    assert parse_schedule(render_schedule(pol)) == pol
