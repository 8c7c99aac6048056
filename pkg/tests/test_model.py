import numpy as np
import pytest
from hypothesis import given, strategies as st

from tinyssl import tensor as T
from tinyssl.gradcheck import grad_check
from tinyssl.model import (BackboneSpec, HeadSpec, SpecError, align_to_teacher, build_student,
                           count_parameters, micro_spec, full_spec, project_global, project_stages,
                           round_channels, student_forward)


@pytest.fixture(scope="module")
def micro_net():
    return build_student(micro_spec(), HeadSpec(), seed=0, dtype=np.float64)


def images(rng, b, r):
    return rng.random((b, 3, r, r))


def test_build_is_deterministic_in_seed():
    a = build_student(full_spec(), HeadSpec(), seed=42)
    b = build_student(full_spec(), HeadSpec(), seed=42)
    c = build_student(full_spec(), HeadSpec(), seed=43)
    assert a.checksum() == b.checksum() != c.checksum()


def test_full_backbone_near_396k():
    n = count_parameters(build_student(full_spec(), HeadSpec())).deploy
    assert abs(n - 396_000) / 396_000 < 0.05


def test_channel_rounding_rules():
    assert round_channels(32 * 0.35) == 16  # nearest multiple is 8, more than 10% low, so bumped
    assert all(c % 8 == 0 and c >= 8 for c in [round_channels(v) for v in (4.1, 8, 11.2, 22.4, 33.6)])
    with pytest.raises(SpecError):
        BackboneSpec(width_multiplier=0.01)


def test_three_taps_strictly_increasing():
    with pytest.raises(SpecError):
        BackboneSpec(tap_strides=(8, 8, 32))
    with pytest.raises(SpecError):
        BackboneSpec(tap_strides=(8, 16))


def test_stage_sizes_at_128():
    net = build_student(full_spec(), HeadSpec(stage_proj=False, align=False))
    out = student_forward(net, np.zeros((1, 3, 128, 128), np.float32), "eval")
    assert out["h"].shape == (1, 1280)
    assert [s.shape[2:] for s in out["stages"]] == [(16, 16), (8, 8), (4, 4)]


def test_indivisible_resolution_rejected(micro_net):
    with pytest.raises(T.ShapeError):
        student_forward(micro_net, np.zeros((1, 3, 40, 40)), "eval")


def test_doubling_resolution_doubles_stage_side(micro_net, rng):
    small = student_forward(micro_net, images(rng, 1, 32), "eval")["stages"]
    big = student_forward(micro_net, images(rng, 1, 64), "eval")["stages"]
    for s, b in zip(small, big):
        assert b.shape[2] == 2 * s.shape[2] and b.shape[3] == 2 * s.shape[3]


def test_eval_batch_independence_and_determinism(micro_net, rng):
    x = images(rng, 1, 32)
    one = student_forward(micro_net, x, "eval")["h"].data
    two = student_forward(micro_net, np.concatenate([x, x]), "eval")["h"].data
    assert np.allclose(two[0], one[0], atol=1e-12) and np.allclose(two[1], one[0], atol=1e-12)
    again = student_forward(micro_net, x, "eval")["h"].data
    assert np.array_equal(one, again)


def test_project_global_contracts(micro_net, rng):
    h = T.Tensor(rng.standard_normal((4, 1280)), dtype=np.float64)
    z = project_global(micro_net, h).data
    assert np.allclose(np.linalg.norm(z, axis=1), 1, atol=1e-6)
    z10 = project_global(micro_net, T.scale(h, 10.0)).data
    assert np.allclose(z, z10, atol=1e-6)
    zero = project_global(micro_net, T.Tensor(np.zeros((1, 1280)), dtype=np.float64)).data
    assert np.array_equal(zero, np.zeros((1, 256)))


def test_align_is_linear_without_bias(micro_net, rng):
    z1 = T.Tensor(rng.standard_normal((3, 256)), dtype=np.float64)
    z2 = T.Tensor(rng.standard_normal((3, 256)), dtype=np.float64)
    a = align_to_teacher(micro_net, T.add(z1, z2)).data
    b = align_to_teacher(micro_net, z1).data + align_to_teacher(micro_net, z2).data
    assert np.allclose(a, b, atol=1e-6)
    assert a.shape == (3, 384)
    assert np.array_equal(align_to_teacher(micro_net, T.Tensor(np.zeros((2, 256)), dtype=np.float64)).data,
                          np.zeros((2, 384)))


def test_align_xavier_uniform_bounds(micro_net):
    w = micro_net.align.weight.data
    bound = np.sqrt(6 / (256 + 384))
    assert np.abs(w).max() <= bound and np.abs(w).max() > 0.9 * bound


def test_project_stages_shapes_and_channel_check(micro_net, rng):
    stages = student_forward(micro_net, images(rng, 2, 32), "eval")["stages"]
    proj = project_stages(micro_net, stages, "eval")
    assert [p.shape[1] for p in proj] == [384] * 3
    assert [p.shape[2:] for p in proj] == [s.shape[2:] for s in stages]
    again = project_stages(micro_net, stages, "eval")
    assert all(np.array_equal(a.data, b.data) for a, b in zip(proj, again))
    with pytest.raises(T.ShapeError):
        project_stages(micro_net, [stages[1], stages[1], stages[2]], "eval")


def test_gradient_reaches_backbone_through_stage_projection(micro_net, rng):
    stages = student_forward(micro_net, images(rng, 2, 32), "eval")["stages"]
    proj = micro_net.stage_proj[0]
    x = T.Tensor(stages[0].data[:, :, :2, :2].copy(), dtype=np.float64)
    w = rng.standard_normal(proj(x, False).shape)

    def f(s):
        return T.sum(T.mul(proj(s, False), T.Tensor(w, dtype=np.float64)))

    assert grad_check(f, x) < 1e-6


@pytest.mark.parametrize("kind", ["capacity_proportional_linear", "seed_mlp", "none"])
def test_deploy_set_independent_of_head(kind):
    head = HeadSpec(head_kind=kind, align=kind != "none", stage_proj=kind != "none")
    net = build_student(micro_spec(), head)
    pc = count_parameters(net)
    base = count_parameters(build_student(micro_spec(), HeadSpec(head_kind="none", align=False, stage_proj=False)))
    assert pc.deploy == base.deploy
    assert pc.all == pc.deploy + pc.training_only
    assert all(n.startswith("backbone.") for n, _ in net.deploy_parameters())
    assert not any(n.startswith("backbone.") for n, _ in net.training_only_parameters())


def test_heads_have_no_bias():
    net = build_student(micro_spec(), HeadSpec(head_kind="seed_mlp"))
    names = [n for n, _ in net.training_only_parameters() if not n.startswith("stage_proj")]
    assert names and all(n.endswith(".weight") for n in names)
    sizes = dict(net.training_only_parameters())
    assert sum(p.size for n, p in sizes.items() if n.startswith("proj.")) == 1280 * 2048 + 2048 * 256


@given(st.sampled_from([0.25, 0.35, 0.5, 0.75, 1.0]))
def test_channel_counts_multiple_of_eight(alpha):
    stem, groups = BackboneSpec(width_multiplier=alpha).channels()
    assert all(c % 8 == 0 and c >= 8 for c in [stem] + groups)


def test_micro_preset_runs_forward():
    net = build_student(micro_spec(), HeadSpec())
    out = student_forward(net, np.zeros((2, 3, 32, 32), np.float32), "train")
    assert out["h"].shape == (2, 1280) and np.all(np.isfinite(out["h"].data))
    assert count_parameters(net).deploy == 315_744
