//! Central-difference checks for every differentiable operation, run in
//! 64-bit mode. Used by the `gradcheck` subcommand and the acceptance run.

use crate::augmentation::{resample_features, resample_features_backward, sample_aug, warp_label_indices, AugSpec, Interp};
use crate::error::{Error, Result};
use crate::fusion::{
    bev_to_voxel_repeat, stack_z, unstack_z, voxel_to_bev_add, voxel_to_bev_stack, DeformConv2d, FusionSpec, GlobalBranch,
    LocalBranch, LocalGlobalFusion, NeighborhoodAttention,
};
use crate::geometry::{CameraModel, VoxelGridSpec};
use crate::heads::{encode_targets, Box3D, DetHead, OccHead};
use crate::losses::{depth_loss, detection_loss, occupancy_loss, LossWeights};
use crate::numcore::gradcheck::{gradcheck, gradcheck_module, GradCheck};
use crate::numcore::layers::Linear;
use crate::numcore::nn;
use crate::numcore::sample::{bilinear_sample_2d, bilinear_sample_2d_backward, trilinear_sample_3d, trilinear_sample_3d_backward};
use crate::numcore::{Module, Rng, Tensor};
use crate::synth::ImageEncoder;
use crate::view_transform::{
    fuse_ex_im, fuse_ex_im_backward, DeformableCrossAttention, DepthBins, ImplicitBlock, ImplicitStack, LiftPlan, RefPoints,
};

/// Default tolerance on the maximum relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Tolerance for the two-block implicit stack checked end to end.
pub const STACK_TOLERANCE: f64 = 1e-3;
pub const DEFAULT_SEEDS: u64 = 5;

pub struct Case {
    pub name: &'static str,
    pub tolerance: f64,
    run: fn(u64) -> Result<f64>,
}

impl Case {
    pub fn run(&self, seed: u64) -> Result<f64> {
        (self.run)(seed)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub name: &'static str,
    pub tolerance: f64,
    /// Worst error over the seeds.
    pub max_rel_error: f64,
    pub seeds: u64,
    pub passed: bool,
}

fn rand_t(rng: &mut Rng, dims: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(dims, |_| rng.uniform_in(-scale, scale))
}

fn randomize<M: Module<f64>>(m: &mut M, rng: &mut Rng, scale: f64) {
    m.visit_params(&mut |p| {
        for v in p.value.data_mut() {
            *v = rng.uniform_in(-scale, scale);
        }
    });
}

fn bilinear(seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let feat = rand_t(&mut rng, &[2, 5, 6], 1.0);
    let pts = Tensor::from_fn(&[7, 2], |i| if i % 2 == 0 { rng.uniform_in(0.1, 4.9) } else { rng.uniform_in(0.1, 3.9) });
    gradcheck(
        GradCheck::new(seed).step(1e-6),
        &[feat, pts],
        |x| bilinear_sample_2d(&x[0], &x[1]).expect("valid shapes").0,
        |x, g| {
            let (a, b) = bilinear_sample_2d_backward(&x[0], &x[1], g).expect("valid shapes");
            vec![a, b]
        },
    )
}

fn trilinear(seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let vol = rand_t(&mut rng, &[2, 3, 4, 3], 1.0);
    let pts = Tensor::from_fn(&[6, 3], |i| match i % 3 {
        1 => rng.uniform_in(0.1, 2.9),
        _ => rng.uniform_in(0.1, 1.9),
    });
    gradcheck(
        GradCheck::new(seed).step(1e-6),
        &[vol, pts],
        |x| trilinear_sample_3d(&x[0], &x[1]).expect("valid shapes").0,
        |x, g| {
            let (a, b) = trilinear_sample_3d_backward(&x[0], &x[1], g).expect("valid shapes");
            vec![a, b]
        },
    )
}

fn dense(seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let x = [rand_t(&mut rng, &[4, 4], 1.0), rand_t(&mut rng, &[3, 4], 1.0), rand_t(&mut rng, &[3], 1.0)];
    let a = gradcheck(
        GradCheck::new(seed),
        &x,
        |i| nn::dense(&i[0], &i[1], &i[2]).expect("valid shapes"),
        |i, g| {
            let (a, b, c) = nn::dense_backward(&i[0], &i[1], g).expect("valid shapes");
            vec![a, b, c]
        },
    )?;
    let x = [rand_t(&mut rng, &[3, 5], 1.0), rand_t(&mut rng, &[2, 3], 1.0), rand_t(&mut rng, &[2], 1.0)];
    let b = gradcheck(
        GradCheck::new(seed),
        &x,
        |i| nn::pointwise(&i[0], &i[1], Some(&i[2])).expect("valid shapes"),
        |i, g| {
            let (a, b, c) = nn::pointwise_backward(&i[0], &i[1], g);
            vec![a, b, c]
        },
    )?;
    Ok(a.max(b))
}

fn conv2d(seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let mut worst: f64 = 0.0;
    for stride in [1, 2] {
        let x = [rand_t(&mut rng, &[2, 5, 6], 1.0), rand_t(&mut rng, &[3, 2, 3, 3], 1.0), rand_t(&mut rng, &[3], 1.0)];
        worst = worst.max(gradcheck(
            GradCheck::new(seed),
            &x,
            move |i| nn::conv2d(&i[0], &i[1], &i[2], stride).expect("valid shapes"),
            move |i, g| {
                let (a, b, c) = nn::conv2d_backward(&i[0], &i[1], stride, g).expect("valid shapes");
                vec![a, b, c]
            },
        )?);
    }
    Ok(worst)
}

fn conv3d(seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let mut worst: f64 = 0.0;
    for stride in [[1, 1, 1], [2, 1, 2]] {
        let x = [rand_t(&mut rng, &[2, 4, 3, 4], 1.0), rand_t(&mut rng, &[2, 2, 3, 3, 3], 1.0), rand_t(&mut rng, &[2], 1.0)];
        worst = worst.max(gradcheck(
            GradCheck::new(seed),
            &x,
            move |i| nn::conv3d(&i[0], &i[1], &i[2], stride).expect("valid shapes"),
            move |i, g| {
                let (a, b, c) = nn::conv3d_backward(&i[0], &i[1], stride, g).expect("valid shapes");
                vec![a, b, c]
            },
        )?);
    }
    Ok(worst)
}

fn softmax(seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let x = rand_t(&mut rng, &[3, 4, 2], 2.0);
    let mut worst: f64 = 0.0;
    for axis in 0..3 {
        worst = worst.max(gradcheck(
            GradCheck::new(seed),
            std::slice::from_ref(&x),
            move |i| nn::softmax(&i[0], axis).expect("valid axis"),
            move |i, g| vec![nn::softmax_backward(&nn::softmax(&i[0], axis).expect("valid axis"), g, axis)],
        )?);
    }
    Ok(worst)
}

fn layer_norm(seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let x = [rand_t(&mut rng, &[5, 3], 1.0), rand_t(&mut rng, &[5], 1.0), rand_t(&mut rng, &[5], 1.0)];
    gradcheck(
        GradCheck::new(seed),
        &x,
        |i| nn::layer_norm(&i[0], &i[1], &i[2]).expect("valid shapes").0,
        |i, g| {
            let (_, cache) = nn::layer_norm(&i[0], &i[1], &i[2]).expect("valid shapes");
            let (a, b, c) = nn::layer_norm_backward(&cache, &i[1], g);
            vec![a, b, c]
        },
    )
}

fn activations(seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    // Probed away from the relu kink.
    let x = Tensor::from_fn(&[12], |_| {
        let v = rng.uniform_in(0.1, 1.0);
        if rng.bernoulli(0.5) { v } else { -v }
    });
    let a = gradcheck(GradCheck::new(seed), std::slice::from_ref(&x), |i| nn::relu(&i[0]), |i, g| vec![nn::relu_backward(&i[0], g)])?;
    let b = gradcheck(
        GradCheck::new(seed),
        &[x],
        |i| nn::sigmoid(&i[0]),
        |i, g| vec![nn::sigmoid_backward(&nn::sigmoid(&i[0]), g)],
    )?;
    Ok(a.max(b))
}

fn micro_cams() -> Vec<CameraModel> {
    vec![
        CameraModel::look_at([-4.0, 0.3, 1.2], [0.0, 0.0, 0.8], 3.0, 3.0, (4, 4)),
        CameraModel::look_at([0.2, -4.5, 1.5], [0.0, 0.0, 0.6], 3.5, 3.5, (4, 4)),
    ]
}

fn lift(seed: u64) -> Result<f64> {
    let grid = VoxelGridSpec { origin: [-2.0, -2.0, 0.0], voxel_size: [0.5; 3], dims: [8, 8, 4] };
    let plan = LiftPlan::new(&micro_cams(), &grid, &DepthBins { d_min: 1.5, d_max: 7.5, count: 4 })?;
    let mut rng = Rng::new(seed);
    let probs = nn::softmax(&rand_t(&mut rng, &[2, 4, 4, 4], 2.0), 1)?;
    let feats = rand_t(&mut rng, &[2, 2, 4, 4], 1.0);
    gradcheck(
        GradCheck::new(seed),
        &[probs, feats],
        |x| plan.forward(&x[0], &x[1]).expect("valid shapes"),
        |x, g| {
            let (a, b) = plan.backward(&x[0], &x[1], g).expect("valid shapes");
            vec![a, b]
        },
    )
}

fn dca(seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let (c, ci, n) = (4, 3, 5);
    let uv = (0..2 * n).map(|_| [rng.uniform_in(0.6, 5.4), rng.uniform_in(0.6, 4.4)]).collect();
    let vis = (0..2 * n).map(|i| i % 5 != 3 && i != 4).collect();
    let refs = RefPoints::from_parts(2, uv, vis)?;
    let mut m = DeformableCrossAttention::<f64>::new("dca", c, ci, 2, 2, &mut rng)?;
    m.offsets.w.value = rand_t(&mut rng, &[8, c], 0.3);
    m.attn.w.value = rand_t(&mut rng, &[4, c], 1.0);
    let inputs = [rand_t(&mut rng, &[c, n], 1.0), rand_t(&mut rng, &[2, ci, 6, 7], 1.0)];
    Ok(gradcheck_module(
        &GradCheck::new(seed).step(1e-6),
        m,
        &inputs,
        |m, x| m.forward(&x[0], &x[1], &refs).expect("valid shapes").0,
        |m, x, g| {
            let (_, cache) = m.forward(&x[0], &x[1], &refs).expect("valid shapes");
            let (gq, gf) = m.backward(&cache, &x[1], &refs, g).expect("valid shapes");
            vec![gq, gf]
        },
    )?
    .max_rel_error)
}

fn implicit_setup(seed: u64) -> (Tensor<f64>, RefPoints, Rng) {
    let grid = VoxelGridSpec { origin: [-1.0, -1.0, 0.0], voxel_size: [0.5; 3], dims: [4, 4, 2] };
    let cams = [
        CameraModel::look_at([-4.0, 0.5, 1.5], [0.0, 0.0, 0.5], 4.0, 4.0, (7, 6)),
        CameraModel::look_at([0.5, 4.0, 1.0], [0.0, 0.0, 0.5], 4.0, 4.0, (7, 6)),
    ];
    let mut rng = Rng::new(seed);
    let feats = rand_t(&mut rng, &[2, 3, 6, 7], 1.0);
    (feats, RefPoints::new(&cams, &grid), rng)
}

fn implicit_block(seed: u64) -> Result<f64> {
    let (feats, refs, mut rng) = implicit_setup(seed);
    let mut block = ImplicitBlock::<f64>::new("blk", 4, 3, 2, 2, &mut rng)?;
    block.dca.offsets.w.value = rand_t(&mut rng, &[8, 4], 0.3);
    let q = rand_t(&mut rng, &[4, 4, 4, 2], 1.0);
    Ok(gradcheck_module(
        &GradCheck::new(seed).step(1e-6).max_per_tensor(24),
        block,
        &[q, feats],
        |m, x| m.forward(&x[0], &x[1], &refs).expect("valid shapes").0,
        |m, x, g| {
            let (_, c) = m.forward(&x[0], &x[1], &refs).expect("valid shapes");
            let (gq, gf) = m.backward(&c, &x[1], &refs, g).expect("valid shapes");
            vec![gq, gf]
        },
    )?
    .max_rel_error)
}

fn implicit_stack(seed: u64) -> Result<f64> {
    let (feats, refs, mut rng) = implicit_setup(seed);
    let mut stack = ImplicitStack::<f64>::new(4, 3, [4, 4, 2], 2, 2, 2, &mut rng)?;
    for b in &mut stack.blocks {
        b.dca.offsets.w.value = rand_t(&mut rng, &[8, 4], 0.3);
    }
    Ok(gradcheck_module(
        &GradCheck::new(seed).step(1e-6).max_per_tensor(24),
        stack,
        &[feats],
        |m, x| m.forward(&x[0], &refs).expect("valid shapes").0,
        |m, x, g| {
            let (_, c) = m.forward(&x[0], &refs).expect("valid shapes");
            vec![m.backward(&c, &x[0], &refs, g).expect("valid shapes")]
        },
    )?
    .max_rel_error)
}

fn fuse(seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let x = [rand_t(&mut rng, &[2, 2, 2, 1], 1.0), rand_t(&mut rng, &[3, 2, 2, 1], 1.0)];
    gradcheck(
        GradCheck::new(seed),
        &x,
        |x| fuse_ex_im(&x[0], &x[1]).expect("same grid"),
        |_, g| {
            let (a, b) = fuse_ex_im_backward(g, 2);
            vec![a, b]
        },
    )
}

fn collapse(seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let mut reduce = Linear::<f64>::new("reduce", 6, 3, true, &mut rng);
    randomize(&mut reduce, &mut rng, 0.6);
    let v = rand_t(&mut rng, &[2, 3, 2, 3], 1.0);
    let a = gradcheck_module(
        &GradCheck::new(seed),
        reduce,
        std::slice::from_ref(&v),
        |m, x| voxel_to_bev_stack(&x[0], m).expect("valid shapes"),
        |m, x, g| vec![unstack_z(&m.backward(&stack_z(&x[0]).expect("4d"), g), 3).expect("3d")],
    )?
    .max_rel_error;
    let b = gradcheck(
        GradCheck::new(seed),
        &[v],
        |x| voxel_to_bev_add(&x[0]).expect("4d"),
        |_, g| vec![bev_to_voxel_repeat(g, 3).expect("3d")],
    )?;
    let bev = rand_t(&mut rng, &[2, 3, 2], 1.0);
    let c = gradcheck(
        GradCheck::new(seed),
        &[bev],
        |x| bev_to_voxel_repeat(&x[0], 3).expect("3d"),
        |_, g| vec![voxel_to_bev_add(g).expect("4d")],
    )?;
    Ok(a.max(b).max(c))
}

fn local_branch(seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let mut m = LocalBranch::<f64>::new(2, 2, &mut rng)?;
    randomize(&mut m, &mut rng, 0.6);
    let v = rand_t(&mut rng, &[2, 4, 4, 2], 1.0);
    Ok(gradcheck_module(
        &GradCheck::new(seed).step(1e-6),
        m,
        &[v],
        |m, x| m.forward(&x[0]).expect("divisible").0,
        |m, x, g| {
            let (_, c) = m.forward(&x[0]).expect("divisible");
            vec![m.backward(&c, g).expect("valid cache")]
        },
    )?
    .max_rel_error)
}

fn global_branch_with(seed: u64, deformable: bool) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let mut m = GlobalBranch::<f64>::new(2, 2, deformable, &mut rng)?;
    randomize(&mut m, &mut rng, 0.6);
    let b = rand_t(&mut rng, &[2, 4, 4], 1.0);
    Ok(gradcheck_module(
        &GradCheck::new(seed).step(1e-6),
        m,
        &[b],
        |m, x| m.forward(&x[0]).expect("divisible").0,
        |m, x, g| {
            let (_, c) = m.forward(&x[0]).expect("divisible");
            vec![m.backward(&c, g).expect("valid cache")]
        },
    )?
    .max_rel_error)
}

fn global_branch(seed: u64) -> Result<f64> {
    global_branch_with(seed, false)
}

fn global_branch_deformable(seed: u64) -> Result<f64> {
    global_branch_with(seed, true)
}

fn deform_conv(seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let mut m = DeformConv2d::<f64>::new("deform", 2, 3, &mut rng);
    m.offsets.w.value = rand_t(&mut rng, &[18, 2, 3, 3], 0.2);
    let x = rand_t(&mut rng, &[2, 4, 4], 1.0);
    Ok(gradcheck_module(
        &GradCheck::new(seed).step(1e-6),
        m,
        &[x],
        |m, x| m.forward(&x[0]).expect("valid shapes").0,
        |m, x, g| {
            let (_, c) = m.forward(&x[0]).expect("valid shapes");
            vec![m.backward(&x[0], &c, g).expect("valid cache")]
        },
    )?
    .max_rel_error)
}

fn attention(seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let mut worst: f64 = 0.0;
    for (qd, kd, win) in [(vec![3, 4, 4], vec![2, 4, 4], [3, 3, 1]), (vec![3, 3, 3, 2], vec![2, 3, 3, 2], [3, 3, 3])] {
        let m = NeighborhoodAttention::<f64>::new("attn", 3, 2, 4, win, &mut rng)?;
        let inputs = [rand_t(&mut rng, &qd, 1.0), rand_t(&mut rng, &kd, 1.0)];
        let rep = gradcheck_module(
            &GradCheck::new(seed),
            m,
            &inputs,
            |m, x| m.forward(&x[0], &x[1]).expect("matching maps").0,
            |m, x, g| {
                let (_, c) = m.forward(&x[0], &x[1]).expect("matching maps");
                let (a, b) = m.backward(&x[0], &x[1], &c, g).expect("valid cache");
                vec![a, b]
            },
        )?;
        worst = worst.max(rep.max_rel_error);
    }
    Ok(worst)
}

fn fusion(seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let mut m = LocalGlobalFusion::<f64>::new(2, 2, &FusionSpec::default(), &mut rng)?;
    randomize(&mut m, &mut rng, 0.6);
    let v = rand_t(&mut rng, &[2, 4, 4, 2], 1.0);
    Ok(gradcheck_module(
        &GradCheck::new(seed).step(1e-6),
        m,
        &[v],
        |m, x| {
            let (a, b, _) = m.forward(&x[0]).expect("divisible");
            Tensor::concat0(&[&a.reshape(&[64]).expect("size"), &b.reshape(&[32]).expect("size")]).expect("flat")
        },
        |m, x, g| {
            let (_, _, c) = m.forward(&x[0]).expect("divisible");
            let gv = g.narrow0(0, 64).reshape(&[2, 4, 4, 2]).expect("size");
            let gb = g.narrow0(64, 96).reshape(&[2, 4, 4]).expect("size");
            vec![m.backward(&c, &gv, &gb).expect("valid cache")]
        },
    )?
    .max_rel_error)
}

fn heads(seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let occ = OccHead::<f64>::new(3, 4, 3, &mut rng);
    let v = rand_t(&mut rng, &[3, 2, 2, 2], 1.0);
    let a = gradcheck_module(
        &GradCheck::new(seed).step(1e-6),
        occ,
        &[v],
        |m, x| m.forward(&x[0]).expect("4d").0,
        |m, x, g| {
            let (_, h) = m.forward(&x[0]).expect("4d");
            vec![m.backward(&x[0], &h, g)]
        },
    )?
    .max_rel_error;
    let det = DetHead::<f64>::new(2, 2, &mut rng);
    let b = rand_t(&mut rng, &[2, 3, 3], 1.0);
    let d = gradcheck_module(
        &GradCheck::new(seed),
        det,
        &[b],
        |m, x| {
            let (h, r) = m.forward(&x[0]).expect("3d");
            Tensor::concat0(&[&h, &r]).expect("same plane")
        },
        |m, x, g| {
            let (h, _) = m.forward(&x[0]).expect("3d");
            vec![m.backward(&x[0], &h, &g.narrow0(0, 2), &g.narrow0(2, 12)).expect("valid shapes")]
        },
    )?
    .max_rel_error;
    Ok(a.max(d))
}

fn encoder(seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let x = rand_t(&mut rng, &[2, 3, 4, 5], 1.0);
    let m = ImageEncoder::<f64>::new(3, 4, 3, 4, &mut rng);
    Ok(gradcheck_module(
        &GradCheck::new(seed).step(1e-6).max_per_tensor(16),
        m,
        &[x],
        |m, xs| {
            let (f, p, _) = m.forward(&xs[0]).expect("4d");
            let (nf, np) = (f.numel(), p.numel());
            Tensor::concat0(&[&f.reshape(&[nf]).expect("size"), &p.reshape(&[np]).expect("size")]).expect("flat")
        },
        |m, xs, g| {
            let (f, p, cache) = m.forward(&xs[0]).expect("4d");
            let nf = f.numel();
            let gf = g.narrow0(0, nf).reshape(f.dims()).expect("size");
            let gp = g.narrow0(nf, g.numel()).reshape(p.dims()).expect("size");
            vec![m.backward(&cache, &xs[0], &gf, &gp).expect("valid cache")]
        },
    )?
    .max_rel_error)
}

fn occupancy(seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let labels: Vec<u16> = (0..10).map(|_| rng.below(3) as u16).collect();
    let logits = rand_t(&mut rng, &[3, 10], 2.0);
    let mask: Vec<bool> = (0..10).map(|i| i != 3).collect();
    let zero = LossWeights { ce: 0.0, lovasz: 0.0, geo: 0.0, sem: 0.0, ..LossWeights::default() };
    let terms = [
        LossWeights { ce: 1.0, ..zero },
        LossWeights { lovasz: 1.0, ..zero },
        LossWeights { geo: 1.0, ..zero },
        LossWeights { sem: 1.0, ..zero },
    ];
    let mut worst: f64 = 0.0;
    for w in terms {
        let (l, m) = (&labels, &mask);
        worst = worst.max(gradcheck(
            GradCheck::new(seed).step(1e-6),
            std::slice::from_ref(&logits),
            |x| Tensor::scalar(occupancy_loss(&x[0], l, Some(m), &w).expect("valid shapes").0.total),
            |x, g| {
                let (_, mut gr) = occupancy_loss(&x[0], l, Some(m), &w).expect("valid shapes");
                gr.scale(g.data()[0]);
                vec![gr]
            },
        )?);
    }
    Ok(worst)
}

fn detection(seed: u64) -> Result<f64> {
    let grid = VoxelGridSpec { origin: [0.0; 3], voxel_size: [1.0; 3], dims: [5, 5, 2] };
    let b = Box3D { center: [2.3, 1.6, 0.5], size: [1.0; 3], yaw: 0.2, velocity: [0.1, 0.0], class_id: 0, score: 1.0 };
    let t = encode_targets(&[b], &grid, 2)?;
    let mut rng = Rng::new(seed);
    let heat = Tensor::from_fn(&[2, 5, 5], |_| rng.uniform_in(0.05, 0.95));
    let reg = rand_t(&mut rng, &[10, 5, 5], 1.0);
    let w = LossWeights::default();
    gradcheck(
        GradCheck::new(seed).step(1e-7),
        &[heat, reg],
        |x| Tensor::scalar(detection_loss(&x[0], &x[1], &t, &w).expect("valid shapes").0.total),
        |x, gy| {
            let (_, mut a, mut b) = detection_loss(&x[0], &x[1], &t, &w).expect("valid shapes");
            a.scale(gy.data()[0]);
            b.scale(gy.data()[0]);
            vec![a, b]
        },
    )
}

fn depth(seed: u64) -> Result<f64> {
    let bins = DepthBins { d_min: 1.0, d_max: 5.0, count: 4 };
    let mut rng = Rng::new(seed);
    let logits = rand_t(&mut rng, &[2, 4, 2, 3], 1.0);
    let gt: Vec<f64> = (0..12).map(|_| rng.uniform_in(0.5, 5.5)).collect();
    let valid: Vec<bool> = (0..12).map(|i| i % 4 != 0).collect();
    gradcheck(
        GradCheck::new(seed),
        &[logits],
        |x| Tensor::scalar(depth_loss(&nn::softmax(&x[0], 1).expect("4d"), &gt, &valid, &bins).expect("valid shapes").0),
        |x, gy| {
            let p = nn::softmax(&x[0], 1).expect("4d");
            let (_, mut g) = depth_loss(&p, &gt, &valid, &bins).expect("valid shapes");
            g.scale(gy.data()[0]);
            vec![nn::softmax_backward(&p, &g, 1)]
        },
    )
}

fn resample(seed: u64) -> Result<f64> {
    let grid = VoxelGridSpec { origin: [-2.0, -2.0, 0.0], voxel_size: [0.5; 3], dims: [8, 8, 4] };
    let mut rng = Rng::new(seed);
    let spec = AugSpec { translation: [1.0, 1.0, 0.3], ..AugSpec::default() };
    let a = sample_aug(&mut rng, &spec, grid.center());
    let ids = warp_label_indices(&grid, &a);
    let f = rand_t(&mut rng, &[2, 8, 8, 4], 1.0);
    gradcheck(
        GradCheck::new(seed).step(1e-6),
        &[f],
        |x| resample_features(&x[0], &ids, Interp::Trilinear).expect("matching grid").0,
        |_, gy| vec![resample_features_backward(&[2, 8, 8, 4], &ids, Interp::Trilinear, gy).expect("matching grid")],
    )
}

macro_rules! case {
    ($name:literal, $f:ident) => {
        Case { name: $name, tolerance: TOLERANCE, run: $f }
    };
    ($name:literal, $f:ident, $tol:expr) => {
        Case { name: $name, tolerance: $tol, run: $f }
    };
}

pub const CASES: &[Case] = &[
    case!("bilinear_sample", bilinear),
    case!("trilinear_sample", trilinear),
    case!("dense", dense),
    case!("conv2d", conv2d),
    case!("conv3d", conv3d),
    case!("softmax", softmax),
    case!("layer_norm", layer_norm),
    case!("activations", activations),
    case!("lift_explicit", lift),
    case!("dca", dca),
    case!("implicit_block", implicit_block),
    case!("implicit_stack", implicit_stack, STACK_TOLERANCE),
    case!("fuse_ex_im", fuse),
    case!("collapse_expand", collapse),
    case!("local_branch", local_branch),
    case!("global_branch", global_branch),
    case!("global_branch_deformable", global_branch_deformable),
    case!("deform_conv", deform_conv),
    case!("neighborhood_attention", attention),
    case!("fusion", fusion),
    case!("heads", heads),
    case!("image_encoder", encoder),
    case!("occupancy_loss", occupancy),
    case!("detection_loss", detection),
    case!("depth_loss", depth),
    case!("resample_features", resample),
];

pub fn names() -> Vec<&'static str> {
    CASES.iter().map(|c| c.name).collect()
}

/// Runs the named case (or all of them) over seeds `0..seeds`.
pub fn run(filter: Option<&str>, seeds: u64) -> Result<Vec<CaseResult>> {
    let selected: Vec<&Case> = CASES.iter().filter(|c| filter.is_none_or(|f| c.name == f)).collect();
    if selected.is_empty() {
        return Err(Error::Config(format!("unknown operation {:?}; known: {}", filter.unwrap_or(""), names().join(", "))));
    }
    selected
        .into_iter()
        .map(|c| {
            let mut worst: f64 = 0.0;
            for seed in 0..seeds {
                worst = worst.max(c.run(seed)?);
            }
            Ok(CaseResult { name: c.name, tolerance: c.tolerance, max_rel_error: worst, seeds, passed: worst < c.tolerance })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_operation_is_an_error() {
        assert!(matches!(run(Some("nope"), 1), Err(Error::Config(_))));
    }

    #[test]
    fn single_case_runs() {
        let r = run(Some("dense"), 2).unwrap();
        assert_eq!(r.len(), 1);
        assert!(r[0].passed, "{r:?}");
    }
}
