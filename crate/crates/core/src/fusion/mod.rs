//! Voxel/BEV feature extraction and cross-representation interaction.

mod attention;
mod branches;
mod deform;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::layers::Linear;
use crate::numcore::{Module, Param, Real, Rng, Tensor};

pub use attention::{neighborhood_cross_attention, AttnCache, NeighborhoodAttention};
pub use branches::{
    upsample_nearest, upsample_nearest_backward, Conv2dKind, GlobalBranch, GlobalCache, LocalBranch, LocalCache,
    ResBlock2d, ResBlock3d,
};
pub use deform::DeformConv2d;

fn dims4<S: Real>(v: &Tensor<S>, op: &'static str) -> Result<[usize; 4]> {
    match *v.dims() {
        [c, x, y, z] => Ok([c, x, y, z]),
        _ => Err(Error::shape(op, format!("expected C×X×Y×Z, got {:?}", v.dims()))),
    }
}

/// `C×X×Y×Z` → `(C·Z)×X×Y` with channel `c·Z + z`.
pub fn stack_z<S: Real>(v: &Tensor<S>) -> Result<Tensor<S>> {
    let [c, x, y, z] = dims4(v, "stack_z")?;
    Ok(Tensor::from_fn(&[c * z, x, y], |i| {
        let xy = i % (x * y);
        let cz = i / (x * y);
        v.data()[((cz / z) * x * y + xy) * z + cz % z]
    }))
}

/// Inverse permutation of [`stack_z`].
pub fn unstack_z<S: Real>(s: &Tensor<S>, z: usize) -> Result<Tensor<S>> {
    let [cz, x, y] = *s.dims() else {
        return Err(Error::shape("unstack_z", format!("{:?}", s.dims())));
    };
    let c = cz / z;
    Ok(Tensor::from_fn(&[c, x, y, z], |i| {
        let zz = i % z;
        let xy = (i / z) % (x * y);
        let ch = i / (z * x * y);
        s.data()[(ch * z + zz) * x * y + xy]
    }))
}

/// Collapses `C×X×Y×Z` voxels to BEV: stack along Z then a 1×1 convolution.
pub fn voxel_to_bev_stack<S: Real>(v: &Tensor<S>, reduce: &Linear<S>) -> Result<Tensor<S>> {
    let s = stack_z(v)?;
    if reduce.w.value.dims()[1] != s.dims()[0] {
        return Err(Error::shape(
            "voxel_to_bev_stack",
            format!("{} stacked channels, reduce expects {}", s.dims()[0], reduce.w.value.dims()[1]),
        ));
    }
    reduce.forward(&s)
}

/// Copies each BEV column `z` times.
pub fn bev_to_voxel_repeat<S: Real>(b: &Tensor<S>, z: usize) -> Result<Tensor<S>> {
    let [c, x, y] = *b.dims() else {
        return Err(Error::shape("bev_to_voxel_repeat", format!("{:?}", b.dims())));
    };
    Ok(Tensor::from_fn(&[c, x, y, z], |i| b.data()[i / z]))
}

/// Sums voxels over Z. This is also the backward of [`bev_to_voxel_repeat`].
pub fn voxel_to_bev_add<S: Real>(v: &Tensor<S>) -> Result<Tensor<S>> {
    let [c, x, y, z] = dims4(v, "voxel_to_bev_add")?;
    let mut out = Tensor::zeros(&[c, x, y]);
    for (o, col) in out.data_mut().iter_mut().zip(v.data().chunks(z)) {
        *o = col.iter().fold(S::zero(), |a, &b| a + b);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionSpec {
    pub use_local_branch: bool,
    pub use_global_branch: bool,
    pub use_interaction: bool,
    pub local_scales: usize,
    pub global_scales: usize,
    pub deformable_global: bool,
    pub window_voxel: [usize; 3],
    pub window_bev: [usize; 2],
}

impl Default for FusionSpec {
    fn default() -> Self {
        FusionSpec {
            use_local_branch: true,
            use_global_branch: true,
            use_interaction: true,
            local_scales: 2,
            global_scales: 2,
            deformable_global: false,
            window_voxel: [3, 3, 3],
            window_bev: [3, 3],
        }
    }
}

/// Voxel features in, `(fused voxel, fused BEV)` out. The BEV plane has as
/// many channels as the voxels. Disabled stages pass features through.
#[derive(Clone, Debug)]
pub struct LocalGlobalFusion<S: Real> {
    pub reduce: Linear<S>,
    pub local: Option<LocalBranch<S>>,
    pub global: Option<GlobalBranch<S>>,
    pub attn_voxel: Option<NeighborhoodAttention<S>>,
    pub attn_bev: Option<NeighborhoodAttention<S>>,
}

#[derive(Clone, Debug)]
pub struct FusionCache<S> {
    stacked: Tensor<S>,
    local: Option<LocalCache<S>>,
    v_local: Tensor<S>,
    global: Option<GlobalCache<S>>,
    b_global: Tensor<S>,
    interaction: Option<(Tensor<S>, AttnCache<S>, Tensor<S>, AttnCache<S>)>,
}

impl<S: Real> LocalGlobalFusion<S> {
    pub fn new(c: usize, z: usize, spec: &FusionSpec, rng: &mut Rng) -> Result<Self> {
        if spec.use_interaction && !(spec.use_local_branch && spec.use_global_branch) {
            return Err(Error::Config("interaction requires both branches".into()));
        }
        let [wx, wy, wz] = spec.window_voxel;
        let [bx, by] = spec.window_bev;
        Ok(LocalGlobalFusion {
            reduce: Linear::new("fusion.reduce", c * z, c, true, rng),
            local: if spec.use_local_branch { Some(LocalBranch::new(c, spec.local_scales, rng)?) } else { None },
            global: if spec.use_global_branch {
                Some(GlobalBranch::new(c, spec.global_scales, spec.deformable_global, rng)?)
            } else {
                None
            },
            attn_voxel: if spec.use_interaction {
                Some(NeighborhoodAttention::new("fusion.attn_voxel", c, c, c, [wx, wy, wz], rng)?)
            } else {
                None
            },
            attn_bev: if spec.use_interaction {
                Some(NeighborhoodAttention::new("fusion.attn_bev", c, c, c, [bx, by, 1], rng)?)
            } else {
                None
            },
        })
    }

    pub fn forward(&self, v: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>, FusionCache<S>)> {
        let z = dims4(v, "fusion")?[3];
        let stacked = stack_z(v)?;
        let bev = self.reduce.forward(&stacked)?;
        let (v_local, local) = match &self.local {
            Some(l) => {
                let (y, c) = l.forward(v)?;
                (y, Some(c))
            }
            None => (v.clone(), None),
        };
        let (b_global, global) = match &self.global {
            Some(g) => {
                let (y, c) = g.forward(&bev)?;
                (y, Some(c))
            }
            None => (bev.clone(), None),
        };
        let (vf, bf, interaction) = match (&self.attn_voxel, &self.attn_bev) {
            (Some(av), Some(ab)) => {
                let v_global = bev_to_voxel_repeat(&b_global, z)?;
                let b_local = voxel_to_bev_add(&v_local)?;
                let (vf, cv) = av.forward(&v_local, &v_global)?;
                let (bf, cb) = ab.forward(&b_global, &b_local)?;
                (vf, bf, Some((v_global, cv, b_local, cb)))
            }
            _ => (v_local.clone(), b_global.clone(), None),
        };
        Ok((vf, bf, FusionCache { stacked, local, v_local, global, b_global, interaction }))
    }

    /// Gradient w.r.t. the voxel input given gradients of both outputs.
    pub fn backward(&mut self, cache: &FusionCache<S>, g_vf: &Tensor<S>, g_bf: &Tensor<S>) -> Result<Tensor<S>> {
        let z = cache.v_local.dims()[3];
        let (mut g_vl, mut g_bg) = match (&mut self.attn_voxel, &mut self.attn_bev, &cache.interaction) {
            (Some(av), Some(ab), Some((v_global, cv, b_local, cb))) => {
                let (g_vl, g_vg) = av.backward(&cache.v_local, v_global, cv, g_vf)?;
                let (mut g_bg, g_bl) = ab.backward(&cache.b_global, b_local, cb, g_bf)?;
                g_bg.add_assign(&voxel_to_bev_add(&g_vg)?);
                let mut g_vl = g_vl;
                g_vl.add_assign(&bev_to_voxel_repeat(&g_bl, z)?);
                (g_vl, g_bg)
            }
            _ => (g_vf.clone(), g_bf.clone()),
        };
        let g_bev = match (&mut self.global, &cache.global) {
            (Some(g), Some(c)) => g.backward(c, &g_bg)?,
            _ => std::mem::replace(&mut g_bg, Tensor::zeros(&[0])),
        };
        let mut g_v = match (&mut self.local, &cache.local) {
            (Some(l), Some(c)) => l.backward(c, &g_vl)?,
            _ => std::mem::replace(&mut g_vl, Tensor::zeros(&[0])),
        };
        let g_stacked = self.reduce.backward(&cache.stacked, &g_bev);
        g_v.add_assign(&unstack_z(&g_stacked, z)?);
        Ok(g_v)
    }
}

impl<S: Real> Module<S> for LocalGlobalFusion<S> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        self.reduce.visit_params(f);
        self.local.visit_params(f);
        self.global.visit_params(f);
        self.attn_voxel.visit_params(f);
        self.attn_bev.visit_params(f);
    }
}
