//! Multi-scale residual pyramids: 3D convolutions on voxels (local branch)
//! and 2D convolutions on BEV (global branch). Level `i` has `C·2^i`
//! channels at `1/2^i` resolution; every level is mapped back to `C`
//! channels by a 1×1 projection, nearest-upsampled and summed.

use super::deform::{DeformCache, DeformConv2d};
use crate::error::{Error, Result};
use crate::numcore::layers::{Conv2d, Conv3d, Linear};
use crate::numcore::{nn, Module, Param, Real, Rng, Tensor};

/// Nearest-neighbor upsampling of `C×X×Y×Z` by integer factors.
pub fn upsample_nearest<S: Real>(x: &Tensor<S>, f: [usize; 3]) -> Tensor<S> {
    let [c, a, b, d] = dims4(x);
    let (oa, ob, od) = (a * f[0], b * f[1], d * f[2]);
    Tensor::from_fn(&[c, oa, ob, od], |i| {
        let z = i % od;
        let y = (i / od) % ob;
        let xx = (i / (od * ob)) % oa;
        let ch = i / (od * ob * oa);
        x.data()[((ch * a + xx / f[0]) * b + y / f[1]) * d + z / f[2]]
    })
}

/// Adjoint of [`upsample_nearest`]: sums each block.
pub fn upsample_nearest_backward<S: Real>(g: &Tensor<S>, f: [usize; 3]) -> Tensor<S> {
    let [c, oa, ob, od] = dims4(g);
    let (a, b, d) = (oa / f[0], ob / f[1], od / f[2]);
    let mut out = Tensor::zeros(&[c, a, b, d]);
    for (i, &v) in g.data().iter().enumerate() {
        let z = i % od;
        let y = (i / od) % ob;
        let xx = (i / (od * ob)) % oa;
        let ch = i / (od * ob * oa);
        out.data_mut()[((ch * a + xx / f[0]) * b + y / f[1]) * d + z / f[2]] += v;
    }
    out
}

fn dims4<S: Real>(x: &Tensor<S>) -> [usize; 4] {
    let d = x.dims();
    match d.len() {
        4 => [d[0], d[1], d[2], d[3]],
        3 => [d[0], d[1], d[2], 1],
        _ => panic!("expected a 3D or 4D channel-major tensor, got {d:?}"),
    }
}

fn check_divisible(dims: &[usize], scales: usize, what: &'static str) -> Result<()> {
    let f = 1usize << (scales - 1);
    if dims.iter().any(|&d| d % f != 0) {
        return Err(Error::shape(what, format!("dims {dims:?} not divisible by {f}")));
    }
    Ok(())
}

/// `y = x + conv_b(relu(conv_a(x)))`, `conv_b` zero-initialized.
#[derive(Clone, Debug)]
pub struct ResBlock3d<S: Real> {
    pub conv_a: Conv3d<S>,
    pub conv_b: Conv3d<S>,
}

impl<S: Real> ResBlock3d<S> {
    pub fn new(name: &str, c: usize, rng: &mut Rng) -> Self {
        ResBlock3d {
            conv_a: Conv3d::new(&format!("{name}.conv_a"), c, c, 3, 1, rng),
            conv_b: Conv3d::zeroed(&format!("{name}.conv_b"), c, c, 3, 1),
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>)> {
        let h = self.conv_a.forward(x)?;
        let mut y = self.conv_b.forward(&nn::relu(&h))?;
        y.add_assign(x);
        Ok((y, h))
    }

    pub fn backward(&mut self, x: &Tensor<S>, h: &Tensor<S>, gy: &Tensor<S>) -> Result<Tensor<S>> {
        let gr = self.conv_b.backward(&nn::relu(h), gy)?;
        let mut gx = self.conv_a.backward(x, &nn::relu_backward(h, &gr))?;
        gx.add_assign(gy);
        Ok(gx)
    }
}

impl<S: Real> Module<S> for ResBlock3d<S> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        self.conv_a.visit_params(f);
        self.conv_b.visit_params(f);
    }
}

#[derive(Clone, Debug)]
pub enum Conv2dKind<S: Real> {
    Plain(Conv2d<S>),
    Deformable(DeformConv2d<S>),
}

#[derive(Clone, Debug)]
pub enum Conv2dCache<S> {
    Plain,
    Deformable(DeformCache<S>),
}

impl<S: Real> Conv2dKind<S> {
    pub fn forward(&self, x: &Tensor<S>) -> Result<(Tensor<S>, Conv2dCache<S>)> {
        match self {
            Conv2dKind::Plain(c) => Ok((c.forward(x)?, Conv2dCache::Plain)),
            Conv2dKind::Deformable(d) => {
                let (y, cache) = d.forward(x)?;
                Ok((y, Conv2dCache::Deformable(cache)))
            }
        }
    }

    pub fn backward(&mut self, x: &Tensor<S>, cache: &Conv2dCache<S>, gy: &Tensor<S>) -> Result<Tensor<S>> {
        match (self, cache) {
            (Conv2dKind::Plain(c), _) => c.backward(x, gy),
            (Conv2dKind::Deformable(d), Conv2dCache::Deformable(cache)) => d.backward(x, cache, gy),
            _ => Err(Error::shape("conv2d_backward", "cache does not match layer kind")),
        }
    }
}

impl<S: Real> Module<S> for Conv2dKind<S> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        match self {
            Conv2dKind::Plain(c) => c.visit_params(f),
            Conv2dKind::Deformable(d) => d.visit_params(f),
        }
    }
}

/// 2D residual block; `conv_a` may be deformable.
#[derive(Clone, Debug)]
pub struct ResBlock2d<S: Real> {
    pub conv_a: Conv2dKind<S>,
    pub conv_b: Conv2d<S>,
}

impl<S: Real> ResBlock2d<S> {
    pub fn new(name: &str, c: usize, deformable: bool, rng: &mut Rng) -> Self {
        let a = format!("{name}.conv_a");
        ResBlock2d {
            conv_a: if deformable {
                Conv2dKind::Deformable(DeformConv2d::new(&a, c, c, rng))
            } else {
                Conv2dKind::Plain(Conv2d::new(&a, c, c, 3, 1, rng))
            },
            conv_b: Conv2d::zeroed(&format!("{name}.conv_b"), c, c, 3, 1),
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<(Tensor<S>, (Tensor<S>, Conv2dCache<S>))> {
        let (h, cache) = self.conv_a.forward(x)?;
        let mut y = self.conv_b.forward(&nn::relu(&h))?;
        y.add_assign(x);
        Ok((y, (h, cache)))
    }

    pub fn backward(&mut self, x: &Tensor<S>, cache: &(Tensor<S>, Conv2dCache<S>), gy: &Tensor<S>) -> Result<Tensor<S>> {
        let (h, ac) = cache;
        let gr = self.conv_b.backward(&nn::relu(h), gy)?;
        let mut gx = self.conv_a.backward(x, ac, &nn::relu_backward(h, &gr))?;
        gx.add_assign(gy);
        Ok(gx)
    }
}

impl<S: Real> Module<S> for ResBlock2d<S> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        self.conv_a.visit_params(f);
        self.conv_b.visit_params(f);
    }
}

/// Per-level forward state shared by both pyramids.
#[derive(Clone, Debug)]
pub struct LevelCache<S, B> {
    /// Pre-activation of the stride-2 convolution (levels ≥ 1).
    down: Option<Tensor<S>>,
    block_in: Tensor<S>,
    block: B,
    out: Tensor<S>,
}

#[derive(Clone, Debug)]
pub struct LocalBranch<S: Real> {
    pub downs: Vec<Conv3d<S>>,
    pub blocks: Vec<ResBlock3d<S>>,
    pub merges: Vec<Linear<S>>,
}

pub type LocalCache<S> = Vec<LevelCache<S, Tensor<S>>>;

impl<S: Real> LocalBranch<S> {
    /// Level 0 merge starts as the identity, so a one-scale branch is the
    /// identity at initialization.
    pub fn new(c: usize, scales: usize, rng: &mut Rng) -> Result<Self> {
        if scales == 0 {
            return Err(Error::Config("local branch needs at least one scale".into()));
        }
        let ch = |i: usize| c << i;
        Ok(LocalBranch {
            downs: (1..scales)
                .map(|i| Conv3d::new(&format!("local.down{i}"), ch(i - 1), ch(i), 3, 2, rng))
                .collect(),
            blocks: (0..scales)
                .map(|i| ResBlock3d::new(&format!("local.block{i}"), ch(i), rng))
                .collect(),
            merges: (0..scales)
                .map(|i| {
                    let name = format!("local.merge{i}");
                    if i == 0 {
                        Linear::identity(&name, c, true)
                    } else {
                        Linear::new(&name, ch(i), c, true, rng)
                    }
                })
                .collect(),
        })
    }

    pub fn scales(&self) -> usize {
        self.blocks.len()
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<(Tensor<S>, LocalCache<S>)> {
        check_divisible(&x.dims()[1..], self.scales(), "local_branch")?;
        let mut caches: LocalCache<S> = Vec::with_capacity(self.scales());
        let mut y = x.zeros_like();
        for i in 0..self.scales() {
            let (down, block_in) = if i == 0 {
                (None, x.clone())
            } else {
                let d = self.downs[i - 1].forward(&caches[i - 1].out)?;
                let r = nn::relu(&d);
                (Some(d), r)
            };
            let (out, h) = self.blocks[i].forward(&block_in)?;
            let m = self.merges[i].forward(&out)?;
            y.add_assign(&upsample_nearest(&m, [1 << i; 3]));
            caches.push(LevelCache { down, block_in, block: h, out });
        }
        Ok((y, caches))
    }

    pub fn backward(&mut self, caches: &LocalCache<S>, gy: &Tensor<S>) -> Result<Tensor<S>> {
        let mut g_next: Option<Tensor<S>> = None;
        for i in (0..self.scales()).rev() {
            let c = &caches[i];
            let gm = upsample_nearest_backward(gy, [1 << i; 3]);
            let mut g_out = self.merges[i].backward(&c.out, &gm);
            if let Some(g) = g_next.take() {
                g_out.add_assign(&g);
            }
            let g_in = self.blocks[i].backward(&c.block_in, &c.block, &g_out)?;
            if i > 0 {
                let d = c.down.as_ref().expect("down cache at level > 0");
                let g_d = nn::relu_backward(d, &g_in);
                g_next = Some(self.downs[i - 1].backward(&caches[i - 1].out, &g_d)?);
            } else {
                g_next = Some(g_in);
            }
        }
        Ok(g_next.expect("at least one scale"))
    }
}

impl<S: Real> Module<S> for LocalBranch<S> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        self.downs.visit_params(f);
        self.blocks.visit_params(f);
        self.merges.visit_params(f);
    }
}

#[derive(Clone, Debug)]
pub struct GlobalBranch<S: Real> {
    pub downs: Vec<Conv2d<S>>,
    pub blocks: Vec<ResBlock2d<S>>,
    pub merges: Vec<Linear<S>>,
}

pub type GlobalCache<S> = Vec<LevelCache<S, (Tensor<S>, Conv2dCache<S>)>>;

impl<S: Real> GlobalBranch<S> {
    pub fn new(c: usize, scales: usize, deformable: bool, rng: &mut Rng) -> Result<Self> {
        if scales == 0 {
            return Err(Error::Config("global branch needs at least one scale".into()));
        }
        let ch = |i: usize| c << i;
        Ok(GlobalBranch {
            downs: (1..scales)
                .map(|i| Conv2d::new(&format!("global.down{i}"), ch(i - 1), ch(i), 3, 2, rng))
                .collect(),
            blocks: (0..scales)
                .map(|i| ResBlock2d::new(&format!("global.block{i}"), ch(i), deformable, rng))
                .collect(),
            merges: (0..scales)
                .map(|i| {
                    let name = format!("global.merge{i}");
                    if i == 0 {
                        Linear::identity(&name, c, true)
                    } else {
                        Linear::new(&name, ch(i), c, true, rng)
                    }
                })
                .collect(),
        })
    }

    pub fn scales(&self) -> usize {
        self.blocks.len()
    }

    pub fn forward(&self, b: &Tensor<S>) -> Result<(Tensor<S>, GlobalCache<S>)> {
        check_divisible(&b.dims()[1..], self.scales(), "global_branch")?;
        let mut caches: GlobalCache<S> = Vec::with_capacity(self.scales());
        let mut y = b.zeros_like();
        for i in 0..self.scales() {
            let (down, block_in) = if i == 0 {
                (None, b.clone())
            } else {
                let d = self.downs[i - 1].forward(&caches[i - 1].out)?;
                let r = nn::relu(&d);
                (Some(d), r)
            };
            let (out, bc) = self.blocks[i].forward(&block_in)?;
            let m = self.merges[i].forward(&out)?;
            let up = upsample_nearest(&m, [1 << i, 1 << i, 1]);
            y.add_assign(&up.reshape(b.dims())?);
            caches.push(LevelCache { down, block_in, block: bc, out });
        }
        Ok((y, caches))
    }

    pub fn backward(&mut self, caches: &GlobalCache<S>, gy: &Tensor<S>) -> Result<Tensor<S>> {
        let mut g_next: Option<Tensor<S>> = None;
        for i in (0..self.scales()).rev() {
            let c = &caches[i];
            let f = 1 << i;
            let d = c.out.dims();
            let gm = upsample_nearest_backward(gy, [f, f, 1]).reshape(&[gy.dims()[0], d[1], d[2]])?;
            let mut g_out = self.merges[i].backward(&c.out, &gm);
            if let Some(g) = g_next.take() {
                g_out.add_assign(&g);
            }
            let g_in = self.blocks[i].backward(&c.block_in, &c.block, &g_out)?;
            if i > 0 {
                let pre = c.down.as_ref().expect("down cache at level > 0");
                let g_d = nn::relu_backward(pre, &g_in);
                g_next = Some(self.downs[i - 1].backward(&caches[i - 1].out, &g_d)?);
            } else {
                g_next = Some(g_in);
            }
        }
        Ok(g_next.expect("at least one scale"))
    }
}

impl<S: Real> Module<S> for GlobalBranch<S> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        self.downs.visit_params(f);
        self.blocks.visit_params(f);
        self.merges.visit_params(f);
    }
}
