import numpy as np
import pytest

from conftest import lateral_poses, random_rotation
from fruitcount.core import CameraPose, FrameImage, FruitFlag, FruitTrack, Intrinsics, Region, TrackState, project
from fruitcount.ingest import mask_to_regions
from fruitcount.localize import (
    DegenerateGeometry,
    FeatureTrack,
    HighReprojectionError,
    MaskingConfig,
    NoLocalizedFruit,
    associate_features,
    background_intensity,
    boundary_band,
    feature_sufficiency,
    keep_mask,
    load_feature_tracks,
    localize_fruit,
    mask_for_features,
    normalize_sizes,
    restrict_to_mask,
    triangulate,
    triangulate_all,
    write_feature_tracks,
)
from fruitcount.core import Fruit3D
from fruitcount.simulate import SceneConfig, generate

INTR = Intrinsics(100.0, 100.0, 320.0, 240.0)


def two_cams(intr=INTR, baseline=1.0):
    # camera centres at x=0 and x=baseline, both looking down +z
    return [
        CameraPose(0, np.eye(3), np.zeros(3), intr),
        CameraPose(1, np.eye(3), np.array([-baseline, 0.0, 0.0]), intr),
    ]


def observe(point, poses, noise=0.0, rng=None):
    obs = {}
    for p in poses:
        (u, v), _ = project(point, p)
        if noise:
            u += rng.normal(scale=noise)
            v += rng.normal(scale=noise)
        obs[p.frame] = (u, v)
    return obs


def region_at(frame, u, v, half=5, area=None):
    r, c = int(round(u)), int(round(v))
    return Region(frame, (u, v), (r - half, c - half, r + half, c + half), area or (2 * half + 1) ** 2)


def track_of(regions, tid=0):
    return FruitTrack(tid, {r.frame: r for r in regions}, TrackState(np.zeros(4), np.eye(4)))


def rect_union_oracle(shape, boxes, margin):
    h, w = shape
    out = np.zeros(shape, bool)
    for r in range(h):
        for c in range(w):
            for r0, c0, r1, c1 in boxes:
                if r0 - margin <= r <= r1 + margin and c0 - margin <= c <= c1 + margin:
                    out[r, c] = True
                    break
    return out


class TestMasking:
    def test_no_regions(self):
        img = FrameImage(0, np.random.default_rng(0).integers(0, 255, (40, 50)).astype(np.uint8))
        out = mask_for_features(img, [], 77.0)
        assert np.all(out.pixels == 77)

    def test_box_containment(self):
        img = FrameImage(0, np.full((200, 200), 200, np.uint8))
        reg = Region(0, (15.0, 15.0), (10, 10, 20, 20), 121)
        out = mask_for_features(img, [reg], 90.0, MaskingConfig(margin=25))
        assert out.pixels[15, 15] == 200
        assert out.pixels[100, 100] == 90

    @pytest.mark.parametrize("seed", range(4))
    def test_keep_set_matches_rectangle_union(self, seed):
        rng = np.random.default_rng(seed)
        shape = (60, 80)
        boxes = []
        for _ in range(rng.integers(1, 5)):
            r0, c0 = rng.integers(0, 55), rng.integers(0, 75)
            boxes.append((r0, c0, r0 + rng.integers(0, 6), c0 + rng.integers(0, 6)))
        regions = [Region(0, ((b[0] + b[2]) / 2, (b[1] + b[3]) / 2), b, 1) for b in boxes]
        expected = rect_union_oracle(shape, boxes, 7)
        assert np.array_equal(keep_mask(shape, regions, 7), expected)

        img = FrameImage(0, rng.integers(0, 256, shape).astype(np.uint8))
        cfg = MaskingConfig(margin=7, blur_window=5)
        out = mask_for_features(img, regions, 33.0, cfg).pixels
        band = boundary_band(expected, 5)
        assert np.array_equal(out[expected & ~band], img.pixels[expected & ~band])
        assert np.all(out[~expected & ~band] == 33)

    def test_color_image(self):
        img = FrameImage(0, np.full((50, 50, 3), 180, np.uint8))
        reg = Region(0, (25.0, 25.0), (24, 24, 26, 26), 9)
        out = mask_for_features(img, [reg], 10.0, MaskingConfig(margin=3))
        assert out.pixels.shape == (50, 50, 3)
        assert out.pixels[25, 25, 1] == 180 and out.pixels[0, 0, 2] == 10


class TestBackground:
    def test_uniform(self):
        assert background_intensity([np.full((30, 30), 128.0)] * 3) == 128.0

    def test_lower_third(self):
        img = np.full((30, 30), 200.0)
        img[20:] = 90.0
        assert background_intensity([img]) == 90.0

    def test_simulator_direct_sum(self):
        scene = generate(SceneConfig(seed=2, fruit_count_front=5, frame_count=8, width=160, height=120, focal=125.0))
        total, count = 0, 0
        for fr in scene.frames:
            lower = fr.pixels[(2 * fr.height) // 3 :]
            total += sum(int(x) for x in lower.ravel())
            count += lower.size
        assert background_intensity(scene.frames) == total / count


class TestTriangulate:
    def test_noiseless_two_views(self):
        poses = two_cams()
        X = np.array([0.5, 0.0, 5.0])
        tri = triangulate(FeatureTrack(0, observe(X, poses)), poses)
        assert np.max(np.abs(tri.point - X)) < 1e-6
        assert tri.reprojection_error < 1e-6

    def test_noiseless_random_rigs(self, rng):
        for _ in range(100):
            centre = rng.normal(size=3)
            poses = []
            for k in range(rng.integers(2, 6)):
                R = random_rotation(rng)
                C = centre + rng.normal(scale=2.0, size=3)
                poses.append(CameraPose(k, R, -R @ C, INTR))
            # point in front of the first camera, seen by all
            X = poses[0].center + 6.0 * (poses[0].rotation.T @ np.array([0.0, 0.0, 1.0]))
            try:
                obs = observe(X, poses)
            except ValueError:
                continue
            try:
                tri = triangulate(FeatureTrack(0, obs), poses, min_angle_deg=0.0)
            except DegenerateGeometry:
                continue
            assert np.max(np.abs(tri.point - X)) < 1e-6

    def test_noise_matches_first_order_prediction(self, rng):
        # f=100 px, baseline 1, depth 5: depth error ~ Z^2/(f b) * sqrt(2) * sigma
        poses = two_cams()
        X = np.array([0.5, 0.0, 5.0])
        errs = []
        for _ in range(1000):
            obs = observe(X, poses, noise=0.5, rng=rng)
            errs.append(np.linalg.norm(triangulate(FeatureTrack(0, obs), poses).point - X))
        sigma_z = 25.0 / 100.0 * np.sqrt(2) * 0.5
        p95 = np.percentile(errs, 95)
        assert 1.5 * sigma_z < p95 < 2.5 * sigma_z

    def test_same_pose_twice(self):
        p = CameraPose(0, np.eye(3), np.zeros(3), INTR)
        q = CameraPose(1, np.eye(3), np.zeros(3), INTR)
        with pytest.raises(DegenerateGeometry):
            triangulate(FeatureTrack(0, {0: (240.0, 330.0), 1: (240.0, 330.0)}), [p, q])

    def test_single_view(self):
        with pytest.raises(DegenerateGeometry):
            triangulate(FeatureTrack(0, {0: (1.0, 2.0)}), two_cams())

    def test_inconsistent_observations(self):
        poses = two_cams()
        obs = observe(np.array([0.5, 0.0, 5.0]), poses)
        obs[1] = (obs[1][0] + 40.0, obs[1][1])
        with pytest.raises(HighReprojectionError):
            triangulate(FeatureTrack(0, obs), poses)

    def test_triangulate_all_tallies(self):
        poses = two_cams()
        good = FeatureTrack(0, observe(np.array([0.5, 0.0, 5.0]), poses))
        lone = FeatureTrack(1, {0: (1.0, 1.0)})
        ok, failures = triangulate_all([good, lone], poses)
        assert [f.id for f in ok] == [0] and failures["degenerate"] == 1


class TestAssociate:
    def test_inside_one_box(self):
        regs = [region_at(k, 50.0, 50.0 + k) for k in range(4)]
        ft = FeatureTrack(7, {k: (51.0, 49.0 + k) for k in range(4)})
        assert associate_features([ft], [track_of(regs, 3)]) == {3: [7]}

    def test_never_inside(self):
        regs = [region_at(k, 50.0, 50.0) for k in range(4)]
        ft = FeatureTrack(7, {k: (150.0, 150.0) for k in range(4)})
        assert associate_features([ft], [track_of(regs, 3)]) == {3: []}

    def test_majority_required(self):
        regs = [region_at(k, 50.0, 50.0) for k in range(4)]
        ft = FeatureTrack(7, {0: (50.0, 50.0), 1: (50.0, 50.0), 2: (150.0, 150.0), 3: (150.0, 150.0)})
        assert associate_features([ft], [track_of(regs, 3)]) == {3: []}

    def test_tie_goes_to_nearer_centroid(self):
        a = track_of([region_at(k, 50.0, 50.0, half=10) for k in range(3)], 1)
        b = track_of([region_at(k, 50.0, 56.0, half=10) for k in range(3)], 2)
        ft = FeatureTrack(0, {k: (50.0, 55.0) for k in range(3)})
        assert associate_features([ft], [a, b]) == {1: [], 2: [0]}

    def test_simulator_association(self, clean_run):
        scene, result = clean_run
        truth = scene.truth
        owner_of_track = {}
        for t in result.counted:
            f = sorted(t.observations)[len(t.observations) // 2]
            owner_of_track[t.id] = truth.object_at(f, t.observations[f].centroid)
        assoc = associate_features(scene.features, result.counted)
        total = sum(len(v) for v in assoc.values())
        correct = sum(truth.feature_owner[fid] == owner_of_track[tid] for tid, fids in assoc.items() for fid in fids)
        assert total > 0.9 * len(scene.features)
        assert correct / total >= 0.95


class TestLocalizeFruit:
    def test_mean_of_features(self):
        poses = lateral_poses(3)
        regs = [region_at(k, 240.0, 320.0) for k in range(3)]
        feats = [FeatureTrack(0, {}, np.array([1.0, 1.0, 1.0])), FeatureTrack(1, {}, np.array([3.0, 3.0, 3.0]))]
        f = localize_fruit(track_of(regs), feats, poses)
        np.testing.assert_array_equal(f.position, [2.0, 2.0, 2.0])
        assert f.n_features == 2

    def test_no_features(self):
        f = localize_fruit(track_of([region_at(0, 1.0, 1.0)]), [], lateral_poses(1))
        assert FruitFlag.UNLOCALIZED in f.flags and not f.localized

    def test_area_depth_invariance(self):
        intr = Intrinsics(100.0, 100.0, 320.0, 240.0)
        near = CameraPose(0, np.eye(3), np.array([0.0, 0.0, -0.0]), intr)
        far = CameraPose(1, np.eye(3), np.array([0.0, 0.0, 2.0]), intr)
        feat = [FeatureTrack(0, {}, np.array([0.0, 0.0, 2.0]))]
        a = localize_fruit(track_of([region_at(0, 240.0, 320.0, area=400)]), feat, [near, far])
        b = localize_fruit(track_of([region_at(1, 240.0, 320.0, area=100)]), feat, [near, far])
        assert a.raw_size == 1600.0 and b.raw_size == 1600.0

    def test_rendered_depth_invariance(self):
        # the same disk rendered at depth d and 2d
        sizes = []
        for depth in (4.0, 8.0):
            cfg = SceneConfig(seed=0, fruit_count_front=1, frame_count=1, row_depth_front=depth, radius_jitter=0.0,
                              fruit_radius=0.3, width=400, height=400, focal=400.0, camera_speed=0.0)
            scene = generate(cfg)
            (reg,) = mask_to_regions(scene.masks[0], frame=0)
            obj = scene.truth.objects[0]
            f = localize_fruit(track_of([reg]), [FeatureTrack(0, {}, obj.position)], scene.poses)
            sizes.append(f.raw_size)
        assert abs(sizes[0] - sizes[1]) / sizes[0] < 0.05

    def test_similarity_invariance(self, rng):
        poses = lateral_poses(6, speed=0.2)
        worlds = [np.array([x, y, 5.0 + dz]) for x, y, dz in rng.uniform(-0.5, 0.5, size=(5, 3))]
        tracks = []
        for i, X in enumerate(worlds):
            regs = []
            for p in poses:
                (u, v), _ = project(X, p)
                regs.append(region_at(p.frame, u, v, area=int(rng.integers(80, 200))))
            tracks.append(track_of(regs, i))

        def rel_sizes(pose_list, pts):
            fruits = [localize_fruit(t, [FeatureTrack(0, {}, X)], pose_list) for t, X in zip(tracks, pts)]
            normalize_sizes(fruits)
            return np.array([f.rel_size for f in fruits])

        base = rel_sizes(poses, worlds)
        Rg, tg, s = random_rotation(rng), rng.normal(size=3), 3.7
        moved_poses = [CameraPose(p.frame, p.rotation @ Rg.T, s * p.translation - p.rotation @ Rg.T @ tg, p.intrinsics)
                       for p in poses]
        moved_pts = [s * Rg @ X + tg for X in worlds]
        assert np.max(np.abs(rel_sizes(moved_poses, moved_pts) - base)) < 1e-9


class TestNormalize:
    def _fruits(self, sizes):
        return [Fruit3D(i, np.zeros(3), raw_size=s, rel_size=s) for i, s in enumerate(sizes)]

    def test_mean_normalization(self):
        fr = normalize_sizes(self._fruits([2.0, 4.0, 6.0]))
        assert [f.rel_size for f in fr] == [0.5, 1.0, 1.5]

    def test_single(self):
        assert normalize_sizes(self._fruits([7.3]))[0].rel_size == 1.0

    def test_nothing_to_normalize(self):
        with pytest.raises(NoLocalizedFruit):
            normalize_sizes([Fruit3D(0, None, flags={FruitFlag.UNLOCALIZED})])

    def test_simulator_cohort_mean(self, backrow_run):
        _, result = backrow_run
        fr = [Fruit3D(f.track_id, f.position, f.depths, f.raw_size, f.raw_size, set(f.flags) & {FruitFlag.UNLOCALIZED})
              for f in result.fruits]
        normalize_sizes(fr)
        cohort = [f.rel_size for f in fr if f.localized]
        assert abs(np.mean(cohort) - 1.0) < 1e-12


class TestSufficiency:
    def test_all_enough(self):
        assert feature_sufficiency([60, 70, 80], 50)

    def test_all_zero(self):
        assert not feature_sufficiency([0, 0, 0], 50)

    def test_boundary_fraction(self):
        assert feature_sufficiency([0] * 2 + [100] * 8, 50)
        assert not feature_sufficiency([0] * 3 + [100] * 7, 50)

    def test_simulator_flip_point(self):
        cfg = SceneConfig(seed=5, fruit_count_front=8, frame_count=30, width=320, height=240, focal=250.0)
        scene = generate(cfg)
        regions = {k: mask_to_regions(m, frame=k) for k, m in enumerate(scene.masks)}
        _, per_frame = restrict_to_mask(scene.features, regions, (240, 320), 25)
        counts = np.array([per_frame.get(k, 0) for k in range(30)])
        for m in range(0, counts.max() + 2):
            assert feature_sufficiency(counts, m) == (np.mean(counts < m) <= 0.2)
        # the decision flips exactly where the deficient fraction crosses 20%
        flips = [m for m in range(1, counts.max() + 2) if feature_sufficiency(counts, m - 1) != feature_sufficiency(counts, m)]
        assert len(flips) == 1
        m = flips[0]
        assert np.mean(counts < m - 1) <= 0.2 < np.mean(counts < m)


class TestFeatureFiles:
    def test_roundtrip(self, tmp_path):
        tracks = [FeatureTrack(3, {0: (1.5, 2.25), 4: (7.0, 1e-3)}), FeatureTrack(9, {2: (0.1, 0.2), 3: (0.3, 0.4)})]
        write_feature_tracks(tmp_path / "f.txt", tracks, seed=3)
        back = load_feature_tracks(tmp_path / "f.txt")
        assert [(t.id, t.observations) for t in back] == [(t.id, t.observations) for t in tracks]

    def test_bad_record(self, tmp_path):
        (tmp_path / "f.txt").write_text("1 0 2.0\n")
        with pytest.raises(ValueError):
            load_feature_tracks(tmp_path / "f.txt")

    def test_restrict_drops_far_observations(self):
        regs = {0: [region_at(0, 20.0, 20.0)], 1: [region_at(1, 20.0, 20.0)]}
        near = FeatureTrack(0, {0: (21.0, 21.0), 1: (22.0, 22.0)})
        far = FeatureTrack(1, {0: (90.0, 90.0), 1: (91.0, 91.0)})
        kept, counts = restrict_to_mask([near, far], regs, (100, 100), margin=5)
        assert [f.id for f in kept] == [0] and counts == {0: 1, 1: 1}
