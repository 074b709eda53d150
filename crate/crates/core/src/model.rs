//! Encoder `g`, projectors `p1`/`p2`, their momentum copies, and the linear
//! classifier head used for probing.
//!
//! One [`Architecture`] describes the layer graph; a [`ModelBundle`] or
//! [`MomentumBundle`] is that architecture plus one flat parameter store.
//! Within a bundle there is exactly one encoder, so the InfoMin view and the
//! PatchShuffling view go through the same weights.

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{
    global_avg_pool, global_avg_pool_backward, l2_normalize_rows, l2_normalize_rows_backward, ConvNorm,
    ConvNormCache, Init, Linear, MaxPool, MaxPoolCache, ParamStore, ResBlock, ResBlockCache, Tensor4,
};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Basic,
    Bottleneck,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub width: usize,
    pub blocks: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub block: BlockKind,
    pub stem_width: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub stem_pool: bool,
    pub norm_groups: usize,
    pub stages: Vec<StageConfig>,
}

impl EncoderConfig {
    /// ResNet-50 layout (bottleneck blocks 3-4-6-3, 2048-d output).
    pub fn resnet50() -> Self {
        let stage = |width, blocks, stride| StageConfig { width, blocks, stride };
        Self {
            block: BlockKind::Bottleneck,
            stem_width: 64,
            stem_kernel: 7,
            stem_stride: 2,
            stem_pool: true,
            norm_groups: 32,
            stages: vec![stage(64, 3, 1), stage(128, 4, 2), stage(256, 6, 2), stage(512, 3, 2)],
        }
    }

    /// Three-stage residual CNN for desk-scale runs (64-d output).
    pub fn small() -> Self {
        let stage = |width, blocks, stride| StageConfig { width, blocks, stride };
        Self {
            block: BlockKind::Basic,
            stem_width: 16,
            stem_kernel: 3,
            stem_stride: 2,
            stem_pool: false,
            norm_groups: 8,
            stages: vec![stage(16, 1, 2), stage(32, 1, 2), stage(64, 1, 2)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub projection_dim: usize,
    /// Per-channel normalisation applied when images become network input.
    pub input_mean: [f64; 3],
    pub input_std: [f64; 3],
}

impl ModelConfig {
    pub fn full() -> Self {
        Self {
            encoder: EncoderConfig::resnet50(),
            projection_dim: 128,
            input_mean: [0.485, 0.456, 0.406],
            input_std: [0.229, 0.224, 0.225],
        }
    }

    pub fn desk() -> Self {
        Self {
            encoder: EncoderConfig::small(),
            ..Self::full()
        }
    }
}

/// Which projector a feature goes through: `p1` (InfoMin path, also the
/// probe's input) or `p2` (PatchShuffling path).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    InfoMin,
    Shuffle,
}

/// Two fully connected layers with a ReLU between; hidden width = input width.
#[derive(Debug, Clone)]
pub struct Projector {
    fc1: Linear,
    fc2: Linear,
}

struct ProjectorCache {
    hidden: Array2<f64>,
    z: Array2<f64>,
}

impl Projector {
    fn forward(&self, ps: &ParamStore, f: &Array2<f64>) -> ProjectorCache {
        let mut hidden = self.fc1.forward(ps, f);
        hidden.mapv_inplace(|v| v.max(0.0));
        let z = self.fc2.forward(ps, &hidden);
        ProjectorCache { hidden, z }
    }

    fn backward(&self, ps: &ParamStore, f: &Array2<f64>, cache: &ProjectorCache, dz: &Array2<f64>, grads: &mut ParamStore) -> Array2<f64> {
        let mut dh = self.fc2.backward(ps, &cache.hidden, dz, grads);
        dh.zip_mut_with(&cache.hidden, |d, &h| {
            if h <= 0.0 {
                *d = 0.0
            }
        });
        self.fc1.backward(ps, f, &dh, grads)
    }
}

pub struct EncoderCache {
    stem: ConvNormCache,
    pool: Option<MaxPoolCache>,
    blocks: Vec<ResBlockCache>,
    pub features: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct Architecture {
    pub config: ModelConfig,
    stem: ConvNorm,
    pool: bool,
    blocks: Vec<ResBlock>,
    feature_dim: usize,
    p1: Projector,
    p2: Projector,
}

impl Architecture {
    /// Build the layer graph and freshly initialised parameters
    /// (`g.*`, then `p1.*`, then `p2.*`).
    pub fn build(config: &ModelConfig, init_seed: u64) -> Result<(Arc<Architecture>, ParamStore)> {
        let enc = &config.encoder;
        if enc.stages.is_empty() || config.projection_dim == 0 || enc.stem_width == 0 {
            return Err(Error::Config("encoder needs at least one stage and non-zero widths".into()));
        }
        let mut store = ParamStore::new();
        let mut rng = seed::rng(init_seed);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        let stem = ConvNorm::new(
            &mut init,
            "g.stem",
            3,
            enc.stem_width,
            enc.stem_kernel,
            enc.stem_stride,
            enc.norm_groups,
            true,
        );
        let mut blocks = Vec::new();
        let mut channels = enc.stem_width;
        for (s, stage) in enc.stages.iter().enumerate() {
            for b in 0..stage.blocks {
                let stride = if b == 0 { stage.stride } else { 1 };
                let name = format!("g.stage{s}.block{b}");
                let block = match enc.block {
                    BlockKind::Basic => ResBlock::basic(&mut init, &name, channels, stage.width, stride, enc.norm_groups),
                    BlockKind::Bottleneck => {
                        ResBlock::bottleneck(&mut init, &name, channels, stage.width, stride, enc.norm_groups)
                    }
                };
                channels = block.out_channels();
                blocks.push(block);
            }
        }
        let feature_dim = channels;
        let mut projector = |name: &str| Projector {
            fc1: Linear::new(&mut init, &format!("{name}.fc1"), feature_dim, feature_dim),
            fc2: Linear::new(&mut init, &format!("{name}.fc2"), feature_dim, config.projection_dim),
        };
        let p1 = projector("p1");
        let p2 = projector("p2");
        let arch = Architecture {
            config: config.clone(),
            stem,
            pool: enc.stem_pool,
            blocks,
            feature_dim,
            p1,
            p2,
        };
        Ok((Arc::new(arch), store))
    }

    /// Dimension of the pooled encoder output.
    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn projection_dim(&self) -> usize {
        self.config.projection_dim
    }

    /// Stack equally sized images into a normalised `N x 3 x H x W` tensor.
    pub fn images_to_tensor(&self, images: &[&Image]) -> Result<Tensor4> {
        let first = images
            .first()
            .ok_or_else(|| Error::Shape("empty image batch".into()))?;
        let (h, w) = (first.height(), first.width());
        let mut t = Tensor4::zeros(images.len(), 3, h, w);
        let (mean, std) = (self.config.input_mean, self.config.input_std);
        for (i, img) in images.iter().enumerate() {
            if img.height() != h || img.width() != w {
                return Err(Error::Shape(format!(
                    "image {i} is {}x{}, batch is {h}x{w}",
                    img.height(),
                    img.width()
                )));
            }
            let sample = t.sample_mut(i);
            for (p, px) in img.data().chunks_exact(3).enumerate() {
                for c in 0..3 {
                    sample[c * h * w + p] = (f64::from(px[c]) - mean[c]) / std[c];
                }
            }
        }
        Ok(t)
    }

    fn check_input(&self, x: &Tensor4) -> Result<()> {
        if x.c != 3 || x.n == 0 || x.h == 0 || x.w == 0 {
            return Err(Error::Shape(format!(
                "encoder expects N x 3 x H x W input, got {}x{}x{}x{}",
                x.n, x.c, x.h, x.w
            )));
        }
        Ok(())
    }

    pub fn encode(&self, ps: &ParamStore, x: &Tensor4) -> Result<EncoderCache> {
        self.check_input(x)?;
        let stem = self.stem.forward(ps, x);
        let pool = self.pool.then(|| MaxPool.forward(&stem.out));
        let mut blocks: Vec<ResBlockCache> = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let input = match blocks.last() {
                Some(c) => &c.out,
                None => pool.as_ref().map_or(&stem.out, |p| &p.out),
            };
            blocks.push(block.forward(ps, input));
        }
        let last = blocks.last().map_or(&stem.out, |c| &c.out);
        let features = global_avg_pool(last);
        Ok(EncoderCache {
            stem,
            pool,
            blocks,
            features,
        })
    }

    fn encode_backward(&self, ps: &ParamStore, x: &Tensor4, cache: &EncoderCache, dfeat: &Array2<f64>, grads: &mut ParamStore) {
        let last = cache.blocks.last().map_or(&cache.stem.out, |c| &c.out);
        let mut d = global_avg_pool_backward(dfeat, last.h, last.w);
        let block_input0 = cache.pool.as_ref().map_or(&cache.stem.out, |p| &p.out);
        for i in (0..self.blocks.len()).rev() {
            let input = if i == 0 { block_input0 } else { &cache.blocks[i - 1].out };
            d = self.blocks[i]
                .backward(ps, input, &cache.blocks[i], d, grads, true)
                .expect("input gradient requested");
        }
        if let Some(pool) = &cache.pool {
            d = MaxPool.backward(&cache.stem.out, pool, &d);
        }
        self.stem.backward(ps, x, &cache.stem, d, grads, false);
    }

    fn projector(&self, head: Head) -> &Projector {
        match head {
            Head::InfoMin => &self.p1,
            Head::Shuffle => &self.p2,
        }
    }

    /// Unit-norm projected embedding `normalize(p(g(x)))`, no caches kept.
    pub fn embed(&self, ps: &ParamStore, head: Head, x: &Tensor4) -> Result<Array2<f64>> {
        let f = self.encode(ps, x)?.features;
        let z = self.projector(head).forward(ps, &f).z;
        Ok(l2_normalize_rows(&z).0)
    }
}

#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub arch: Arc<Architecture>,
    pub params: ParamStore,
}

impl ModelBundle {
    pub fn new(config: &ModelConfig, init_seed: u64) -> Result<Self> {
        let (arch, params) = Architecture::build(config, init_seed)?;
        Ok(Self { arch, params })
    }
}

#[derive(Debug, Clone)]
pub struct MomentumBundle {
    pub arch: Arc<Architecture>,
    pub params: ParamStore,
    pub alpha: f64,
}

struct Branch {
    input: Tensor4,
    encoder: EncoderCache,
    projector: ProjectorCache,
    norms: Vec<f64>,
}

/// Result of a query-branch forward pass, retaining what backward needs.
pub struct QueryPass {
    pub q1: Array2<f64>,
    pub q2: Array2<f64>,
    b1: Branch,
    b2: Branch,
}

fn branch_forward(bundle: &ModelBundle, head: Head, input: Tensor4) -> Result<(Array2<f64>, Branch)> {
    let arch = &bundle.arch;
    let encoder = arch.encode(&bundle.params, &input)?;
    let projector = arch.projector(head).forward(&bundle.params, &encoder.features);
    let (q, norms) = l2_normalize_rows(&projector.z);
    Ok((
        q,
        Branch {
            input,
            encoder,
            projector,
            norms,
        },
    ))
}

/// `q1 = normalize(p1(g(v1)))`, `q2 = normalize(p2(g(v3)))`.
pub fn forward_query(bundle: &ModelBundle, v1: Tensor4, v3: Tensor4) -> Result<QueryPass> {
    if v1.n != v3.n {
        return Err(Error::Shape(format!("view batches differ: {} vs {}", v1.n, v3.n)));
    }
    let (q1, b1) = branch_forward(bundle, Head::InfoMin, v1)?;
    let (q2, b2) = branch_forward(bundle, Head::Shuffle, v3)?;
    Ok(QueryPass { q1, q2, b1, b2 })
}

impl QueryPass {
    /// Accumulate parameter gradients for upstream gradients on `q1`, `q2`.
    pub fn backward(&self, bundle: &ModelBundle, dq1: &Array2<f64>, dq2: &Array2<f64>) -> Result<ParamStore> {
        if dq1.dim() != self.q1.dim() || dq2.dim() != self.q2.dim() {
            return Err(Error::Shape("upstream gradient does not match query shape".into()));
        }
        let arch = &bundle.arch;
        let mut grads = bundle.params.zeros_like();
        for (branch, q, dq, head) in [
            (&self.b1, &self.q1, dq1, Head::InfoMin),
            (&self.b2, &self.q2, dq2, Head::Shuffle),
        ] {
            let dz = l2_normalize_rows_backward(q, &branch.norms, dq);
            let df = arch.projector(head).backward(
                &bundle.params,
                &branch.encoder.features,
                &branch.projector,
                &dz,
                &mut grads,
            );
            arch.encode_backward(&bundle.params, &branch.input, &branch.encoder, &df, &mut grads);
        }
        Ok(grads)
    }
}

/// Keys from the momentum branch: `normalize(p1m(gm(v2)))`, `normalize(p2m(gm(v4)))`.
/// Takes the bundle by shared reference; nothing here can write to it.
pub fn forward_momentum(mbundle: &MomentumBundle, v2: &Tensor4, v4: &Tensor4) -> Result<(Array2<f64>, Array2<f64>)> {
    if v2.n != v4.n {
        return Err(Error::Shape(format!("view batches differ: {} vs {}", v2.n, v4.n)));
    }
    let k1 = mbundle.arch.embed(&mbundle.params, Head::InfoMin, v2)?;
    let k2 = mbundle.arch.embed(&mbundle.params, Head::Shuffle, v4)?;
    Ok((k1, k2))
}

/// Momentum copy with `theta_m = theta_q` exactly.
pub fn init_momentum(bundle: &ModelBundle, alpha: f64) -> MomentumBundle {
    MomentumBundle {
        arch: Arc::clone(&bundle.arch),
        params: bundle.params.clone(),
        alpha,
    }
}

/// `theta_m <- alpha * theta_m + (1 - alpha) * theta_q`, elementwise.
pub fn momentum_update(mbundle: &mut MomentumBundle, bundle: &ModelBundle) -> Result<()> {
    mbundle.params.check_structure(&bundle.params)?;
    let alpha = mbundle.alpha;
    for (m, q) in mbundle.params.params_mut().iter_mut().zip(bundle.params.params()) {
        for (mv, qv) in m.data.iter_mut().zip(&q.data) {
            *mv = alpha * *mv + (1.0 - alpha) * qv;
        }
    }
    Ok(())
}

/// Linear classifier `f` on top of the frozen 128-d `p1` embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    /// `C x D` weights.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl ClassifierHead {
    pub fn zeros(n_classes: usize, dim: usize) -> Self {
        Self {
            weight: Array2::zeros((n_classes, dim)),
            bias: Array1::zeros(n_classes),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.weight.nrows()
    }

    pub fn dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn logits(&self, features: ArrayView2<f64>) -> Result<Array2<f64>> {
        if features.ncols() != self.dim() {
            return Err(Error::Shape(format!(
                "classifier expects {}-d features, got {}",
                self.dim(),
                features.ncols()
            )));
        }
        Ok(features.dot(&self.weight.t()) + &self.bias)
    }
}
