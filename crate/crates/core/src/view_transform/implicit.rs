//! Stack of residual blocks refining learnable voxel queries:
//! `q' = q + FFN(LN(Conv3d(LN(DCA(LN(q))))))`.

use super::dca::{DcaCache, DeformableCrossAttention, RefPoints};
use crate::error::{Error, Result};
use crate::numcore::layers::{Conv3d, LayerNorm, Linear};
use crate::numcore::nn::{self, LayerNormCache};
use crate::numcore::{Module, Param, Real, Rng, Tensor};

#[derive(Clone, Debug)]
pub struct ImplicitBlock<S: Real> {
    pub norm_q: LayerNorm<S>,
    pub dca: DeformableCrossAttention<S>,
    pub norm_a: LayerNorm<S>,
    pub conv: Conv3d<S>,
    pub norm_b: LayerNorm<S>,
    pub ffn1: Linear<S>,
    pub ffn2: Linear<S>,
}

#[derive(Clone, Debug)]
pub struct BlockCache<S> {
    ln_q: LayerNormCache<S>,
    dca: DcaCache<S>,
    ln_a: LayerNormCache<S>,
    a_n: Tensor<S>,
    ln_b: LayerNormCache<S>,
    b_n: Tensor<S>,
    hidden: Tensor<S>,
}

impl<S: Real> ImplicitBlock<S> {
    pub fn new(name: &str, c: usize, c_img: usize, heads: usize, points: usize, rng: &mut Rng) -> Result<Self> {
        Ok(ImplicitBlock {
            norm_q: LayerNorm::new(&format!("{name}.norm_q"), c),
            dca: DeformableCrossAttention::new(&format!("{name}.dca"), c, c_img, heads, points, rng)?,
            norm_a: LayerNorm::new(&format!("{name}.norm_a"), c),
            conv: Conv3d::new(&format!("{name}.conv"), c, c, 3, 1, rng),
            norm_b: LayerNorm::new(&format!("{name}.norm_b"), c),
            ffn1: Linear::new(&format!("{name}.ffn1"), c, 2 * c, true, rng),
            ffn2: Linear::new(&format!("{name}.ffn2"), 2 * c, c, true, rng),
        })
    }

    pub fn forward(&self, q: &Tensor<S>, feats: &Tensor<S>, refs: &RefPoints) -> Result<(Tensor<S>, BlockCache<S>)> {
        let (x, ln_q) = self.norm_q.forward(q)?;
        let (a, dca) = self.dca.forward(&x, feats, refs)?;
        let (a_n, ln_a) = self.norm_a.forward(&a)?;
        let b = self.conv.forward(&a_n)?;
        let (b_n, ln_b) = self.norm_b.forward(&b)?;
        let hidden = self.ffn1.forward(&b_n)?;
        let mut out = self.ffn2.forward(&nn::relu(&hidden))?;
        out.add_assign(q);
        Ok((out, BlockCache { ln_q, dca, ln_a, a_n, ln_b, b_n, hidden }))
    }

    /// Returns `(g_q, g_feats)`.
    pub fn backward(
        &mut self,
        cache: &BlockCache<S>,
        feats: &Tensor<S>,
        refs: &RefPoints,
        g_out: &Tensor<S>,
    ) -> Result<(Tensor<S>, Tensor<S>)> {
        let g_r = self.ffn2.backward(&nn::relu(&cache.hidden), g_out);
        let g_h = nn::relu_backward(&cache.hidden, &g_r);
        let g_bn = self.ffn1.backward(&cache.b_n, &g_h);
        let g_b = self.norm_b.backward(&cache.ln_b, &g_bn);
        let g_an = self.conv.backward(&cache.a_n, &g_b)?;
        let g_a = self.norm_a.backward(&cache.ln_a, &g_an);
        let (g_x, g_feats) = self.dca.backward(&cache.dca, feats, refs, &g_a)?;
        let mut g_q = self.norm_q.backward(&cache.ln_q, &g_x);
        g_q.add_assign(g_out);
        Ok((g_q, g_feats))
    }
}

impl<S: Real> Module<S> for ImplicitBlock<S> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        self.norm_q.visit_params(f);
        self.dca.visit_params(f);
        self.norm_a.visit_params(f);
        self.conv.visit_params(f);
        self.norm_b.visit_params(f);
        self.ffn1.visit_params(f);
        self.ffn2.visit_params(f);
    }
}

/// Learnable queries `C×X×Y×Z` followed by `N ≥ 1` blocks.
#[derive(Clone, Debug)]
pub struct ImplicitStack<S: Real> {
    pub queries: Param<S>,
    pub blocks: Vec<ImplicitBlock<S>>,
}

pub type ImplicitStackCache<S> = Vec<(Tensor<S>, BlockCache<S>)>;

impl<S: Real> ImplicitStack<S> {
    pub fn new(
        c: usize,
        c_img: usize,
        dims: [usize; 3],
        n_blocks: usize,
        heads: usize,
        points: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if n_blocks == 0 {
            return Err(Error::Config("implicit stack needs at least one block".into()));
        }
        let [x, y, z] = dims;
        let queries = Param::uniform("implicit.queries", &[c, x, y, z], 3, rng);
        let blocks = (0..n_blocks)
            .map(|i| ImplicitBlock::new(&format!("implicit.block{i}"), c, c_img, heads, points, rng))
            .collect::<Result<_>>()?;
        Ok(ImplicitStack { queries, blocks })
    }

    /// Returns `q^N` and the per-block inputs and caches.
    pub fn forward(&self, feats: &Tensor<S>, refs: &RefPoints) -> Result<(Tensor<S>, ImplicitStackCache<S>)> {
        let mut q = self.queries.value.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (next, cache) = b.forward(&q, feats, refs)?;
            caches.push((q, cache));
            q = next;
        }
        Ok((q, caches))
    }

    /// Accumulates into the queries and block parameters; returns `g_feats`.
    pub fn backward(
        &mut self,
        caches: &ImplicitStackCache<S>,
        feats: &Tensor<S>,
        refs: &RefPoints,
        g_out: &Tensor<S>,
    ) -> Result<Tensor<S>> {
        let mut g = g_out.clone();
        let mut g_feats = feats.zeros_like();
        for (b, (_, cache)) in self.blocks.iter_mut().zip(caches).rev() {
            let (gq, gf) = b.backward(cache, feats, refs, &g)?;
            g_feats.add_assign(&gf);
            g = gq;
        }
        self.queries.accumulate(&g);
        Ok(g_feats)
    }
}

impl<S: Real> Module<S> for ImplicitStack<S> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        f(&mut self.queries);
        self.blocks.visit_params(f);
    }
}
