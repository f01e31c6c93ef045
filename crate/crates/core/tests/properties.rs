use proptest::prelude::*;

use occdet::augmentation::{sample_aug, transform_boxes, AugSpec};
use occdet::fusion::{bev_to_voxel_repeat, voxel_to_bev_add};
use occdet::geometry::{back_project_pixel, project_point, CameraModel, Transform3D, VoxelGridSpec};
use occdet::heads::{decode_boxes, encode_targets, query_point_classes, Box3D, REG_CHANNELS};
use occdet::losses::{schedule_delta, ScheduleSpec};
use occdet::metrics::{confusion_miou, detection_ap_and_tp_errors};
use occdet::numcore::sample::{bilinear_sample_2d, trilinear_sample_3d};
use occdet::numcore::{Rng, Tensor};
use occdet::synth::{generate_scene, SceneSpec};

fn rand_t(rng: &mut Rng, dims: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(dims, |_| rng.uniform_in(-1.0, 1.0))
}

fn grid() -> VoxelGridSpec {
    VoxelGridSpec { origin: [-4.0, -4.0, 0.0], voxel_size: [0.5, 0.5, 0.5], dims: [16, 16, 4] }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bilinear_exact_on_lattice_and_linear_between(seed in any::<u64>(), x in 0usize..5, y in 0usize..4) {
        let mut rng = Rng::new(seed);
        let f = rand_t(&mut rng, &[2, 5, 6]);
        let pts = Tensor::from_vec(&[3, 2], vec![x as f64, y as f64, x as f64 + 1.0, y as f64, x as f64 + 0.5, y as f64]).unwrap();
        let (s, valid) = bilinear_sample_2d(&f, &pts).unwrap();
        prop_assert_eq!(valid, vec![true; 3]);
        for c in 0..2 {
            prop_assert_eq!(s.at(&[c, 0]), f.at(&[c, y, x]));
            prop_assert!((s.at(&[c, 2]) - 0.5 * (s.at(&[c, 0]) + s.at(&[c, 1]))).abs() < 1e-6);
        }
    }

    #[test]
    fn trilinear_exact_on_lattice_and_linear_between(seed in any::<u64>(), i in prop::array::uniform3(0usize..3), axis in 0usize..3) {
        let mut rng = Rng::new(seed);
        let v = rand_t(&mut rng, &[2, 4, 4, 4]);
        let a = i.map(|k| k as f64);
        let mut b = a;
        b[axis] += 1.0;
        let mut m = a;
        m[axis] += 0.5;
        let pts = Tensor::from_vec(&[3, 3], [a, b, m].concat()).unwrap();
        let (s, valid) = trilinear_sample_3d(&v, &pts).unwrap();
        prop_assert_eq!(valid, vec![true; 3]);
        for c in 0..2 {
            prop_assert_eq!(s.at(&[c, 0]), v.at(&[c, i[0], i[1], i[2]]));
            prop_assert!((s.at(&[c, 2]) - 0.5 * (s.at(&[c, 0]) + s.at(&[c, 1]))).abs() < 1e-6);
        }
    }

    #[test]
    fn projection_round_trip(
        pos in prop::array::uniform3(-10.0..10.0f64),
        off in prop::array::uniform3(-3.0..3.0f64),
        u in 0.0..63.0f64,
        v in 0.0..47.0f64,
        depth in 0.5..30.0f64,
    ) {
        let target = [pos[0] + 4.0 + off[0], pos[1] + off[1], pos[2] + off[2]];
        let cam = CameraModel::look_at(pos, target, 40.0, 42.0, (64, 48));
        let p = back_project_pixel(u, v, depth, &cam).unwrap();
        let q = project_point(p, &cam);
        prop_assert!(q.visible);
        let back = back_project_pixel(q.u, q.v, q.depth, &cam).unwrap();
        prop_assert!((0..3).all(|k| (back[k] - p[k]).abs() < 1e-5));
        prop_assert!((q.u - u).abs() < 1e-6 && (q.v - v).abs() < 1e-6 && (q.depth - depth).abs() < 1e-6);
    }

    #[test]
    fn index_and_coordinate_maps_are_inverse(idx in prop::array::uniform3(-2.0..20.0f64), yaw in -3.2..3.2f64, t in prop::array::uniform3(-5.0..5.0f64)) {
        let g = grid();
        let back = g.coord_to_index(g.index_to_coord(idx));
        prop_assert!((0..3).all(|k| (back[k] - idx[k]).abs() < 1e-12));
        let m = Transform3D::rotation_z(yaw).compose(&Transform3D::translation(t));
        for composed in [g.index_to_coord_matrix().compose(&m), m.compose(&g.coord_to_index_matrix()), g.index_to_coord_matrix().compose(&g.coord_to_index_matrix())] {
            prop_assert_eq!(composed.m[3], [0.0, 0.0, 0.0, 1.0]);
        }
        let round = g.index_to_coord_matrix().compose(&g.coord_to_index_matrix());
        prop_assert!(round.max_abs_diff(&Transform3D::IDENTITY) < 1e-12);
    }

    #[test]
    fn add_after_repeat_scales_by_depth(seed in any::<u64>(), z in 1usize..9) {
        // Multiples of 1/64 keep every partial sum exact.
        let mut rng = Rng::new(seed);
        let b = Tensor::from_fn(&[3, 4, 5], |_| (rng.below(257) as f64 - 128.0) / 64.0);
        let out = voxel_to_bev_add(&bev_to_voxel_repeat(&b, z).unwrap()).unwrap();
        prop_assert_eq!(out, b.map(|v| v * z as f64));
    }

    #[test]
    fn encode_decode_is_identity_inside_the_grid(
        cx in -3.99..3.99f64,
        cy in -3.99..3.99f64,
        cz in 0.2..1.8f64,
        size in prop::array::uniform3(0.3..3.0f64),
        yaw in -3.1..3.1f64,
        vel in prop::array::uniform2(-2.0..2.0f64),
        class_id in 0usize..3,
    ) {
        let g = grid();
        let b = Box3D { center: [cx, cy, cz], size, yaw, velocity: vel, class_id, score: 1.0 };
        let t = encode_targets(std::slice::from_ref(&b), &g, 3).unwrap();
        let mut reg = Tensor::<f64>::zeros(&[REG_CHANNELS, 16, 16]);
        for &((i, j), _, r) in &t.centers {
            for (ch, &v) in r.iter().enumerate() {
                reg.set(&[ch, i, j], v);
            }
        }
        let out = decode_boxes(&t.heatmap, &reg, &g, 0.9, 10).unwrap();
        prop_assert_eq!(out.len(), 1);
        let d = &out[0];
        prop_assert_eq!(d.class_id, class_id);
        prop_assert!((0..3).all(|a| (d.center[a] - b.center[a]).abs() < 1e-5 && (d.size[a] - b.size[a]).abs() < 1e-5));
        prop_assert!((occdet::heads::wrap_angle(d.yaw - b.yaw)).abs() < 1e-5);
        prop_assert!((0..2).all(|a| (d.velocity[a] - b.velocity[a]).abs() < 1e-5));
    }

    #[test]
    fn point_queries_at_centers_are_argmax(seed in any::<u64>()) {
        let g = VoxelGridSpec { origin: [0.0, 0.0, 0.0], voxel_size: [1.0, 0.5, 0.25], dims: [4, 3, 2] };
        let mut rng = Rng::new(seed);
        let logits = rand_t(&mut rng, &[5, 4, 3, 2]);
        let n = g.num_cells();
        let centers: Vec<_> = (0..n).map(|f| g.cell_center(g.unflat(f))).collect();
        let got = query_point_classes(&logits, &centers, &g).unwrap();
        for f in 0..n {
            let want = (0..5).max_by(|&a, &b| logits.data()[a * n + f].total_cmp(&logits.data()[b * n + f])).unwrap();
            prop_assert_eq!(got[f] as usize, want);
        }
    }

    #[test]
    fn schedule_is_monotone_and_clamped(v_max in 0.01..3.0f64, frac in 0.0..1.0f64, n in 1.0..500.0f64, a in 0.0..2000.0f64, b in 0.0..2000.0f64) {
        let s = ScheduleSpec { v_min: v_max * frac, v_max, ramp_epochs: n };
        let (lo, hi) = (a.min(b), a.max(b));
        let (dl, dh) = (schedule_delta(lo, &s), schedule_delta(hi, &s));
        prop_assert!(dl <= dh);
        prop_assert!(dl >= s.v_min && dh <= s.v_max);
    }

    #[test]
    fn miou_is_equivariant_under_relabeling(pairs in prop::collection::vec((0u16..4, 0u16..4), 1..60), perm_seed in any::<u64>()) {
        let mut perm: Vec<u16> = (0..4).collect();
        let mut rng = Rng::new(perm_seed);
        for i in (1..4).rev() {
            perm.swap(i, rng.below(i + 1));
        }
        let (pred, gt): (Vec<u16>, Vec<u16>) = pairs.iter().copied().unzip();
        let a = confusion_miou(&pred, &gt, None, 4).unwrap();
        let pp: Vec<u16> = pred.iter().map(|&c| perm[c as usize]).collect();
        let pg: Vec<u16> = gt.iter().map(|&c| perm[c as usize]).collect();
        let b = confusion_miou(&pp, &pg, None, 4).unwrap();
        // Per-class values match exactly; the mean only up to summation order.
        prop_assert!((a.miou - b.miou).abs() < 1e-12);
        for c in 0..4 {
            prop_assert_eq!(a.per_class[c], b.per_class[perm[c] as usize]);
        }
    }

    #[test]
    fn ap_ignores_monotone_score_rescaling(seed in any::<u64>(), n_pred in 1usize..12, n_gt in 1usize..8) {
        let mut rng = Rng::new(seed);
        let mut bx = |score: f64| Box3D {
            center: [rng.uniform_in(-6.0, 6.0), rng.uniform_in(-6.0, 6.0), 0.5],
            size: [1.5, 1.0, 1.0],
            yaw: 0.0,
            velocity: [0.0; 2],
            class_id: 0,
            score,
        };
        let gts: Vec<Box3D> = (0..n_gt).map(|_| bx(1.0)).collect();
        // Distinct scores so the ranking has no ties to break.
        let preds: Vec<Box3D> = (0..n_pred).map(|i| bx(0.05 + 0.9 * i as f64 / n_pred as f64)).collect();
        let rescaled: Vec<Box3D> = preds.iter().map(|b| Box3D { score: (3.0 * b.score).exp() + 7.0, ..b.clone() }).collect();
        let a = detection_ap_and_tp_errors(&preds, &gts, &[0]).unwrap();
        let b = detection_ap_and_tp_errors(&rescaled, &gts, &[0]).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn box_interior_voxels_stay_inside_after_augmentation(seed in any::<u64>()) {
        let g = grid();
        let b = Box3D { center: [0.7, -0.4, 0.9], size: [1.4, 0.8, 1.0], yaw: 0.3, velocity: [0.5, 0.2], class_id: 1, score: 1.0 };
        let inside: Vec<_> = (0..g.num_cells()).map(|f| g.cell_center(g.unflat(f))).filter(|&c| b.contains(c, 0.0)).collect();
        prop_assert!(!inside.is_empty());
        let a = sample_aug(&mut Rng::new(seed), &AugSpec::default(), g.center());
        let moved = transform_boxes(std::slice::from_ref(&b), &a).remove(0);
        for c in inside {
            prop_assert!(moved.contains(a.m_aug.apply_point(c), 1e-6));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn foreground_voxels_belong_to_their_box(seed in any::<u64>()) {
        let spec = SceneSpec { objects: [2, 4], ..SceneSpec::default() };
        let s = generate_scene(&mut Rng::new(seed), &spec).unwrap();
        let g = &spec.grid;
        for f in 0..g.num_cells() {
            if spec.det_class(s.occ.labels[f]).is_none() {
                continue;
            }
            let c = g.cell_center(g.unflat(f));
            let owners: Vec<&Box3D> = s.boxes.iter().filter(|b| b.contains(c, 0.0)).collect();
            prop_assert_eq!(owners.len(), 1);
            prop_assert_eq!(spec.fg_label(owners[0].class_id), s.occ.labels[f]);
        }
    }
}
