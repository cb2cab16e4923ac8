import numpy as np
import pytest

from b2f import blur_synth as bs
from b2f import flow_io as fio


def square_scene(d, size=8, width=32, start=(10.0, 12.0)):
    return bs.SceneSpec(
        height=32, width=width, background_seed=None, background_color=(0.0, 0.0, 0.0),
        sprites=[bs.Sprite(size=(size, size), start=start, displacement=d, depth=0, color=(1, 1, 1))],
    )


@pytest.mark.parametrize("s, n", [(3, 5), (0, 5), (12.4, 13), (5, 5), (16, 16)])
def test_num_subframes(s, n):
    assert bs.num_subframes(s) == n


def test_num_subframes_negative():
    with pytest.raises(ValueError):
        bs.num_subframes(-1.0)


def test_render_frame_endpoints():
    spec = square_scene((6.0, 0.0))
    f0 = bs.render_frame(spec, 0.0)
    f1 = bs.render_frame(spec, 1.0)
    assert f0[12:20, 10:18].min() == 1.0 and f0[:, :10].max() == 0.0
    assert f1[12:20, 16:24].min() == 1.0 and f1[:, :16].max() == 0.0
    with pytest.raises(ValueError):
        bs.render_frame(spec, 1.5)


def test_render_half_displacement_subpixel():
    spec = square_scene((3.0, 0.0))
    mid = bs.render_frame(spec, 0.5)
    # left edge at x = 11.5: pixel 11 half covered, pixel 19 half covered
    assert mid[15, 11, 0] == pytest.approx(0.5)
    assert mid[15, 19, 0] == pytest.approx(0.5)
    assert mid[15, 12, 0] == 1.0


def test_render_textured_sprite_at_midpoint():
    sprite = bs.Sprite(size=(10, 10), start=(4.0, 4.0), displacement=(4.0, 2.0), depth=0, texture_seed=3)
    spec = bs.SceneSpec(height=24, width=24, sprites=[sprite], background_seed=None)
    mid = bs.render_frame(spec, 0.5)
    tex = bs.sprite_texture(sprite)
    # origin moves to (6, 5); integral offset so the lookup is exact
    np.testing.assert_allclose(mid[5 + 4, 6 + 3], tex[4, 3])


def test_static_scene_blur_equals_sharp():
    spec = bs.SceneSpec(height=16, width=16, background_seed=5,
                        sprites=[bs.Sprite((6, 6), (3.0, 3.0), (0.0, 0.0), 0, texture_seed=2)])
    sample = bs.synthesize(spec)
    np.testing.assert_allclose(sample.image, bs.render_frame(spec, 0.0).astype(np.float32), atol=1e-6)
    assert np.all(sample.gt_flow == 0)
    assert sample.n_subframes == 5


def test_single_sprite_flow():
    spec = square_scene((10.0, 0.0))
    sample = bs.synthesize(spec)
    inside = np.zeros((32, 32), bool)
    inside[12:20, 10:18] = True
    assert np.all(sample.gt_flow[inside] == [10.0, 0.0])
    assert np.all(sample.gt_flow[~inside] == 0.0)
    assert sample.n_subframes == 10 and sample.s_max_actual == 10.0


def test_trapezoid_plateau():
    width, d = 12, 6.0
    spec = square_scene((d, 0.0), size=width, width=48, start=(8.0, 10.0))
    sample = bs.synthesize(spec)
    row = sample.image[16, :, 0]
    plateau = np.sum(np.isclose(row, 1.0, atol=1e-6))
    assert plateau == width - int(d)
    # rising and falling edges are monotone and mirror each other
    ramp = row[8:8 + int(d)]
    assert np.all(np.diff(ramp) > 0)
    np.testing.assert_allclose(row[8:8 + width + int(d)], row[8:8 + width + int(d)][::-1], atol=1e-6)


def test_reverse_averaging_same_image():
    rng = np.random.default_rng(0)
    spec = bs.random_scene(rng, bs.SynthConfig())
    a = bs.synthesize(spec).image
    b = bs.synthesize(spec.reversed()).image
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_depth_uniqueness():
    with pytest.raises(ValueError):
        bs.SceneSpec(height=8, width=8, sprites=[bs.Sprite((2, 2), (0, 0), (0, 0), 1),
                                                 bs.Sprite((2, 2), (1, 1), (0, 0), 1)])


def test_topmost_sprite_wins():
    back = bs.Sprite((10, 10), (2.0, 2.0), (3.0, 0.0), depth=0, color=(1, 0, 0))
    front = bs.Sprite((4, 4), (4.0, 4.0), (0.0, 2.0), depth=1, color=(0, 1, 0))
    spec = bs.SceneSpec(height=16, width=16, sprites=[front, back], background_seed=None)
    flow = bs.ground_truth_flow(spec)
    np.testing.assert_array_equal(flow[5, 5], [0.0, 2.0])
    np.testing.assert_array_equal(flow[10, 10], [3.0, 0.0])
    np.testing.assert_array_equal(flow[14, 14], [0.0, 0.0])


def test_camera_motion_moves_background_flow():
    spec = bs.SceneSpec(height=8, width=8, background_seed=1, camera_displacement=(2.0, -1.0))
    assert np.all(bs.ground_truth_flow(spec) == [2.0, -1.0])


def test_random_samples_respect_invariants():
    cfg = bs.SynthConfig(height=32, width=32)
    for i in range(6):
        sample = bs.sample_for_index(7, i, cfg)
        assert sample.image.shape == (32, 32, 3) and sample.gt_flow.shape == (32, 32, 2)
        assert 0.0 <= sample.image.min() and sample.image.max() <= 1.0
        assert sample.s_max_actual <= cfg.discard_threshold
        assert sample.n_subframes == bs.num_subframes(sample.s_max_actual)
        # rightward prior keeps u non-negative
        assert sample.gt_flow[..., 0].min() >= 0.0


def test_all_discarded_raises():
    cfg = bs.SynthConfig(height=16, width=16, s_max=30, discard_threshold=0.0, min_sprites=1,
                         max_attempts=3)
    with pytest.raises(bs.GenerationError, match="master seed 4"):
        bs.sample_for_index(4, 0, cfg)


def test_generate_dataset_deterministic(tmp_path):
    cfg = bs.SynthConfig(height=16, width=16, sprite_min_size=4, sprite_max_size=8, s_max=4)
    a = bs.generate_dataset(3, tmp_path / "a", cfg, seed=11)
    b = bs.generate_dataset(3, tmp_path / "b", cfg, seed=11, workers=2)
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == sorted(p.name for p in (tmp_path / "b").iterdir())
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    pairs = bs.read_manifest(a.manifest)
    assert len(pairs) == 3
    img = fio.read_ppm(pairs[0][0])
    flow = fio.read_flo(pairs[0][1])
    assert img.shape == (16, 16, 3) and flow.shape == (16, 16, 2)
    assert a.mean_n >= 5 and b.s_values == a.s_values


def test_generate_zero(tmp_path):
    out = tmp_path / "empty"
    res = bs.generate_dataset(0, out, bs.SynthConfig())
    assert [p.name for p in out.iterdir()] == ["manifest.txt"]
    assert res.manifest.read_text() == ""
    assert bs.read_manifest(out) == []
