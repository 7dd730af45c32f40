use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use super::ToyError;
use crate::objectives::{
    consistency_loss, consistency_loss_with_targets, itc_from_scores, itc_loss_with_queue, itm_loss, logit_grads_to_scores,
    mlm_loss, select_hard_negatives, FeatureQueue, HardNegativeAssignment, LossBundle,
    MaskedBatch, NegativeSampling,
};
use crate::rng::RngStream;
use crate::similarity::DistributionMatrix;
use crate::types::EmbeddingTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub image_dim: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub fusion_hidden: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
}

/// Parameter blocks, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    ImgW,
    ImgB,
    TokEmb,
    TxtW,
    TxtB,
    ProjImg,
    ProjTxt,
    FuseImg,
    FuseTxt,
    FuseB,
    ItmW,
    ItmB,
    MlmW,
    MlmB,
    MlmPos,
}

impl Block {
    pub const ALL: [Block; 15] = [
        Block::ImgW,
        Block::ImgB,
        Block::TokEmb,
        Block::TxtW,
        Block::TxtB,
        Block::ProjImg,
        Block::ProjTxt,
        Block::FuseImg,
        Block::FuseTxt,
        Block::FuseB,
        Block::ItmW,
        Block::ItmB,
        Block::MlmW,
        Block::MlmB,
        Block::MlmPos,
    ];
}

impl ModelDims {
    pub fn shape(&self, b: Block) -> (usize, usize) {
        let (h, f, v) = (self.hidden, self.fusion_hidden, self.vocab_size);
        match b {
            Block::ImgW => (h, self.image_dim),
            Block::ImgB | Block::TxtB => (1, h),
            Block::TokEmb => (v, h),
            Block::TxtW => (h, h),
            Block::ProjImg | Block::ProjTxt => (self.embed_dim, h),
            Block::FuseImg | Block::FuseTxt => (f, h),
            Block::FuseB => (1, f),
            Block::ItmW => (2, f),
            Block::ItmB => (1, 2),
            Block::MlmW => (v, f),
            Block::MlmB => (1, v),
            Block::MlmPos => (self.seq_len, v),
        }
    }

    fn offsets(&self) -> [usize; 16] {
        let mut off = [0; 16];
        for (k, b) in Block::ALL.iter().enumerate() {
            let (r, c) = self.shape(*b);
            off[k + 1] = off[k] + r * c;
        }
        off
    }

    pub fn num_params(&self) -> usize {
        self.offsets()[15]
    }
}

/// Projected unit-norm features plus the intermediates the heads reuse.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub img: EmbeddingTable,
    pub txt: EmbeddingTable,
    pub img_hidden: Array2<f64>,
    pub txt_hidden: Array2<f64>,
    txt_pooled: Array2<f64>,
    img_norms: Vec<f64>,
    txt_norms: Vec<f64>,
}

/// Relative weights of the four heads in the optimised objective. The
/// consistency weight multiplies `lambda_cons`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub itc: f64,
    pub cons: f64,
    pub itm: f64,
    pub mlm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { itc: 1.0, cons: 1.0, itm: 1.0, mlm: 1.0 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossSettings<'a> {
    pub tau: f64,
    pub lambda_cons: f64,
    pub weights: LossWeights,
    pub negatives: NegativeSampling,
    /// Extra contrastive negatives; `None` keeps the loss in-batch.
    pub queue: Option<&'a FeatureQueue>,
    /// Consistency pseudo-targets `(v2t, t2v)`; `None` uses this batch's own
    /// distributions. Either way they are constants.
    pub targets: Option<&'a (DistributionMatrix, DistributionMatrix)>,
}

pub struct BatchData {
    pub images: Array2<f64>,
    pub tokens: Array2<u32>,
    pub masked: MaskedBatch,
}

pub enum NegativeSource<'a> {
    Sample(&'a mut RngStream),
    Fixed(&'a HardNegativeAssignment),
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    /// `total` is the unweighted objective; `grads` follow `LossWeights`.
    pub bundle: LossBundle,
    pub negatives: HardNegativeAssignment,
    pub encoded: Encoded,
    /// Batch similarity matrix `Z_v Z_tᵀ` before the update.
    pub scores: Array2<f64>,
    /// In-batch `(v2t, t2v)` distributions of this forward pass.
    pub distributions: (DistributionMatrix, DistributionMatrix),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    dims: ModelDims,
    offsets: [usize; 16],
    params: Vec<f64>,
}

fn index(b: Block) -> usize {
    Block::ALL.iter().position(|x| *x == b).expect("block listed")
}

struct Grads<'a> {
    dims: ModelDims,
    offsets: [usize; 16],
    data: &'a mut [f64],
}

impl Grads<'_> {
    fn m(&mut self, b: Block) -> ArrayViewMut2<'_, f64> {
        let k = index(b);
        let shape = self.dims.shape(b);
        ArrayViewMut2::from_shape(shape, &mut self.data[self.offsets[k]..self.offsets[k + 1]])
            .expect("layout")
    }

    fn add(&mut self, b: Block, g: &Array2<f64>) {
        let mut m = self.m(b);
        m += g;
    }

    fn add_row(&mut self, b: Block, g: Array1<f64>) {
        let mut m = self.m(b);
        let mut r = m.row_mut(0);
        r += &g;
    }
}

/// Vector-Jacobian product of `z = y / ‖y‖`.
fn normalize_backward(z: ArrayView2<'_, f64>, norms: &[f64], dz: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut dy = dz.to_owned();
    for (i, mut row) in dy.axis_iter_mut(Axis(0)).enumerate() {
        let zi = z.row(i);
        let proj = zi.dot(&dz.row(i));
        row.scaled_add(-proj, &zi);
        row /= norms[i];
    }
    dy
}

fn normalize(y: Array2<f64>) -> Result<(EmbeddingTable, Vec<f64>), ToyError> {
    let norms: Vec<f64> = y.axis_iter(Axis(0)).map(|r| r.dot(&r).sqrt()).collect();
    Ok((EmbeddingTable::normalized(y)?, norms))
}

impl ToyModel {
    /// Gaussian initialisation scaled by fan-in; biases start at zero.
    pub fn new(dims: ModelDims, rng: &mut RngStream) -> Self {
        let offsets = dims.offsets();
        let mut params = vec![0.0; offsets[15]];
        for (k, b) in Block::ALL.iter().enumerate() {
            let (_, fan_in) = dims.shape(*b);
            let scale = match b {
                Block::ImgB | Block::TxtB | Block::FuseB | Block::ItmB | Block::MlmB | Block::MlmPos => 0.0,
                Block::TokEmb => 1.0,
                _ => 1.0 / (fan_in as f64).sqrt(),
            };
            if scale > 0.0 {
                for p in &mut params[offsets[k]..offsets[k + 1]] {
                    *p = scale * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        Self { dims, offsets, params }
    }

    pub fn from_params(dims: ModelDims, params: Vec<f64>) -> Option<Self> {
        let offsets = dims.offsets();
        (params.len() == offsets[15]).then_some(Self { dims, offsets, params })
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn block_range(&self, b: Block) -> std::ops::Range<usize> {
        let k = index(b);
        self.offsets[k]..self.offsets[k + 1]
    }

    pub fn block(&self, b: Block) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape(self.dims.shape(b), &self.params[self.block_range(b)]).expect("layout")
    }

    fn bias(&self, b: Block) -> ArrayView1<'_, f64> {
        self.block(b).index_axis_move(Axis(0), 0)
    }

    pub fn sgd_step(&mut self, grads: &[f64], lr: f64) {
        for (p, g) in self.params.iter_mut().zip(grads) {
            *p -= lr * g;
        }
    }

    fn pool(&self, tokens: ArrayView2<'_, u32>) -> Array2<f64> {
        let emb = self.block(Block::TokEmb);
        let mut pooled = Array2::zeros((tokens.nrows(), self.dims.hidden));
        let inv = 1.0 / tokens.ncols() as f64;
        for (i, row) in tokens.axis_iter(Axis(0)).enumerate() {
            let mut out = pooled.row_mut(i);
            for &t in row {
                out.scaled_add(inv, &emb.row(t as usize));
            }
        }
        pooled
    }

    fn text_hidden(&self, pooled: &Array2<f64>) -> Array2<f64> {
        pooled.dot(&self.block(Block::TxtW).t()) + self.bias(Block::TxtB)
    }

    pub fn encode_batch(
        &self,
        images: ArrayView2<'_, f64>,
        tokens: ArrayView2<'_, u32>,
    ) -> Result<Encoded, ToyError> {
        let img_hidden = images.dot(&self.block(Block::ImgW).t()) + self.bias(Block::ImgB);
        let txt_pooled = self.pool(tokens);
        let txt_hidden = self.text_hidden(&txt_pooled);
        let (img, img_norms) = normalize(img_hidden.dot(&self.block(Block::ProjImg).t()))?;
        let (txt, txt_norms) = normalize(txt_hidden.dot(&self.block(Block::ProjTxt).t()))?;
        Ok(Encoded { img, txt, img_hidden, txt_hidden, txt_pooled, img_norms, txt_norms })
    }

    /// Fusion pre-activations split by pathway: `(F_v h_v, F_t h_t)`.
    fn fusion_parts(&self, img_hidden: &Array2<f64>, txt_hidden: &Array2<f64>, image_off: bool) -> (Array2<f64>, Array2<f64>) {
        let a = if image_off {
            Array2::zeros((img_hidden.nrows(), self.dims.fusion_hidden))
        } else {
            img_hidden.dot(&self.block(Block::FuseImg).t())
        };
        (a, txt_hidden.dot(&self.block(Block::FuseTxt).t()))
    }

    fn fused(&self, a: &Array2<f64>, c: &Array2<f64>, pairs: &[(usize, usize)]) -> Array2<f64> {
        let fb = self.bias(Block::FuseB);
        let mut u = Array2::zeros((pairs.len(), self.dims.fusion_hidden));
        for (r, &(i, j)) in pairs.iter().enumerate() {
            let mut row = u.row_mut(r);
            row.assign(&(&a.row(i) + &c.row(j) + fb));
            row.mapv_inplace(f64::tanh);
        }
        u
    }

    /// Matching logits (`P × 2`) for `(image, text)` index pairs. With
    /// `image_off` the image pathway contributes nothing.
    pub fn fuse(
        &self,
        img_hidden: &Array2<f64>,
        txt_hidden: &Array2<f64>,
        pairs: &[(usize, usize)],
        image_off: bool,
    ) -> Array2<f64> {
        let (a, c) = self.fusion_parts(img_hidden, txt_hidden, image_off);
        let u = self.fused(&a, &c, pairs);
        u.dot(&self.block(Block::ItmW).t()) + self.bias(Block::ItmB)
    }

    /// Vocabulary logits at each masked site `(row, position)`.
    pub fn mlm_logits(
        &self,
        images: ArrayView2<'_, f64>,
        masked_tokens: ArrayView2<'_, u32>,
        sites: &[(usize, usize)],
        image_off: bool,
    ) -> Array2<f64> {
        let img_hidden = images.dot(&self.block(Block::ImgW).t()) + self.bias(Block::ImgB);
        let txt_hidden = self.text_hidden(&self.pool(masked_tokens));
        let (a, c) = self.fusion_parts(&img_hidden, &txt_hidden, image_off);
        let diag: Vec<(usize, usize)> = (0..images.nrows()).map(|i| (i, i)).collect();
        let u = self.fused(&a, &c, &diag);
        self.site_logits(&u, sites)
    }

    fn site_logits(&self, u: &Array2<f64>, sites: &[(usize, usize)]) -> Array2<f64> {
        let rows: Vec<usize> = sites.iter().map(|s| s.0).collect();
        let mut logits = u.select(Axis(0), &rows).dot(&self.block(Block::MlmW).t()) + self.bias(Block::MlmB);
        let pos = self.block(Block::MlmPos);
        for (r, &(_, p)) in sites.iter().enumerate() {
            let mut row = logits.row_mut(r);
            row += &pos.row(p);
        }
        logits
    }

    /// Gradient of `Σ ⟨dz_img, z_img⟩ + ⟨dz_txt, z_txt⟩` w.r.t. the parameters.
    pub fn encoder_vjp(
        &self,
        images: ArrayView2<'_, f64>,
        tokens: ArrayView2<'_, u32>,
        dz_img: ArrayView2<'_, f64>,
        dz_txt: ArrayView2<'_, f64>,
    ) -> Result<Vec<f64>, ToyError> {
        let enc = self.encode_batch(images, tokens)?;
        let mut buf = vec![0.0; self.params.len()];
        let mut g = Grads { dims: self.dims, offsets: self.offsets, data: &mut buf };
        let zeros = Array2::zeros(enc.img_hidden.raw_dim());
        self.encoder_backward(&mut g, images, tokens, &enc, dz_img, dz_txt, zeros.clone(), zeros);
        Ok(buf)
    }

    /// Backward through projections and encoders; `dh_img`/`dh_txt` carry
    /// gradient already accumulated at the hidden layer from the heads.
    #[allow(clippy::too_many_arguments)]
    fn encoder_backward(
        &self,
        g: &mut Grads<'_>,
        images: ArrayView2<'_, f64>,
        tokens: ArrayView2<'_, u32>,
        enc: &Encoded,
        dz_img: ArrayView2<'_, f64>,
        dz_txt: ArrayView2<'_, f64>,
        mut dh_img: Array2<f64>,
        mut dh_txt: Array2<f64>,
    ) {
        let dy_img = normalize_backward(enc.img.view(), &enc.img_norms, dz_img);
        let dy_txt = normalize_backward(enc.txt.view(), &enc.txt_norms, dz_txt);
        g.add(Block::ProjImg, &dy_img.t().dot(&enc.img_hidden));
        g.add(Block::ProjTxt, &dy_txt.t().dot(&enc.txt_hidden));
        dh_img += &dy_img.dot(&self.block(Block::ProjImg));
        dh_txt += &dy_txt.dot(&self.block(Block::ProjTxt));

        g.add(Block::ImgW, &dh_img.t().dot(&images));
        g.add_row(Block::ImgB, dh_img.sum_axis(Axis(0)));
        self.text_backward(g, tokens, &enc.txt_pooled, &dh_txt);
    }

    fn text_backward(&self, g: &mut Grads<'_>, tokens: ArrayView2<'_, u32>, pooled: &Array2<f64>, dh: &Array2<f64>) {
        g.add(Block::TxtW, &dh.t().dot(pooled));
        g.add_row(Block::TxtB, dh.sum_axis(Axis(0)));
        let dpooled = dh.dot(&self.block(Block::TxtW));
        let inv = 1.0 / tokens.ncols() as f64;
        let mut emb = g.m(Block::TokEmb);
        for (i, row) in tokens.axis_iter(Axis(0)).enumerate() {
            for &t in row {
                emb.row_mut(t as usize).scaled_add(inv, &dpooled.row(i));
            }
        }
    }

    /// Forward and backward for all four heads on one batch.
    pub fn loss_and_grad(
        &self,
        batch: &BatchData,
        settings: &LossSettings<'_>,
        negatives: NegativeSource<'_>,
    ) -> Result<StepOutput, ToyError> {
        let w = settings.weights;
        let tau = settings.tau;
        let n = batch.images.nrows();
        let images = batch.images.view();
        let enc = self.encode_batch(images, batch.tokens.view())?;
        let zv = enc.img.view();
        let zt = enc.txt.view();
        let scores = zv.dot(&zt.t());

        // contrastive + consistency, both expressed as dL/dS where possible
        let (itc_in_batch, p_v2t, p_t2v, ds_itc) = itc_from_scores(scores.view(), tau)?;
        let cons = match settings.targets {
            Some((q_v2t, q_t2v)) => consistency_loss_with_targets((q_v2t, q_t2v), (&p_v2t, &p_t2v))?,
            None => consistency_loss(&p_v2t, &p_t2v)?,
        };
        let mut ds = logit_grads_to_scores(cons.grad_logits_v2t.view(), cons.grad_logits_t2v.view(), tau)
            * (w.cons * settings.lambda_cons);
        let (itc, mut dz_img, mut dz_txt) = match settings.queue {
            Some(q) => {
                let out = itc_loss_with_queue(zv, zt, q, tau)?;
                (out.loss, out.grad_img * w.itc, out.grad_txt * w.itc)
            }
            None => {
                ds.scaled_add(w.itc, &ds_itc);
                (itc_in_batch, Array2::zeros(zv.raw_dim()), Array2::zeros(zt.raw_dim()))
            }
        };
        dz_img += &ds.dot(&zt);
        dz_txt += &ds.t().dot(&zv);

        let assignment = match negatives {
            NegativeSource::Sample(rng) => select_hard_negatives(&p_v2t, &p_t2v, settings.negatives, rng)?,
            NegativeSource::Fixed(a) => a.clone(),
        };

        let mut buf = vec![0.0; self.params.len()];
        let mut g = Grads { dims: self.dims, offsets: self.offsets, data: &mut buf };
        let fuse_img = self.block(Block::FuseImg);
        let fuse_txt = self.block(Block::FuseTxt);

        // matching head over positives then both kinds of negatives
        let mut pairs: Vec<(usize, usize)> = (0..n).map(|i| (i, i)).collect();
        pairs.extend(assignment.text_for_image.iter().enumerate().map(|(i, &j)| (i, j)));
        pairs.extend(assignment.image_for_text.iter().enumerate().map(|(j, &i)| (i, j)));
        let (a, c) = self.fusion_parts(&enc.img_hidden, &enc.txt_hidden, false);
        let u = self.fused(&a, &c, &pairs);
        let logits = u.dot(&self.block(Block::ItmW).t()) + self.bias(Block::ItmB);
        let itm = itm_loss(logits.slice(s![..n, ..]), logits.slice(s![n.., ..]))?;
        let mut dlogits = ndarray::concatenate![Axis(0), itm.grad_pos, itm.grad_neg];
        dlogits *= w.itm;
        g.add(Block::ItmW, &dlogits.t().dot(&u));
        g.add_row(Block::ItmB, dlogits.sum_axis(Axis(0)));
        let mut dpre = dlogits.dot(&self.block(Block::ItmW));
        dpre.zip_mut_with(&u, |d, u| *d *= 1.0 - u * u);
        let mut da = Array2::<f64>::zeros(a.raw_dim());
        let mut dc = Array2::<f64>::zeros(c.raw_dim());
        for (r, &(i, j)) in pairs.iter().enumerate() {
            da.row_mut(i).scaled_add(1.0, &dpre.row(r));
            dc.row_mut(j).scaled_add(1.0, &dpre.row(r));
        }
        let mut dfb = dpre.sum_axis(Axis(0));

        // masked-token head on the corrupted text, fused with the same image
        let targets = batch.masked.targets();
        let masked_pooled = self.pool(batch.masked.tokens.view());
        let masked_hidden = self.text_hidden(&masked_pooled);
        let mut mlm_value = 0.0;
        if !targets.is_empty() {
            let cm = masked_hidden.dot(&fuse_txt.t());
            let diag: Vec<(usize, usize)> = (0..n).map(|i| (i, i)).collect();
            let um = self.fused(&a, &cm, &diag);
            let sites: Vec<(usize, usize)> = targets.iter().map(|t| (t.0, t.1)).collect();
            let labels: Vec<u32> = targets.iter().map(|t| t.2).collect();
            let ml = self.site_logits(&um, &sites);
            let out = mlm_loss(ml.view(), &labels)?;
            mlm_value = out.loss;
            let dl = out.grad_logits * w.mlm;
            let rows: Vec<usize> = sites.iter().map(|s| s.0).collect();
            g.add(Block::MlmW, &dl.t().dot(&um.select(Axis(0), &rows)));
            g.add_row(Block::MlmB, dl.sum_axis(Axis(0)));
            {
                let mut pos = g.m(Block::MlmPos);
                for (r, &(_, p)) in sites.iter().enumerate() {
                    pos.row_mut(p).scaled_add(1.0, &dl.row(r));
                }
            }
            let dsite = dl.dot(&self.block(Block::MlmW));
            let mut dum = Array2::<f64>::zeros(um.raw_dim());
            for (r, &i) in rows.iter().enumerate() {
                dum.row_mut(i).scaled_add(1.0, &dsite.row(r));
            }
            dum.zip_mut_with(&um, |d, u| *d *= 1.0 - u * u);
            da += &dum;
            dfb += &dum.sum_axis(Axis(0));
            g.add(Block::FuseTxt, &dum.t().dot(&masked_hidden));
            let dmh = dum.dot(&fuse_txt);
            self.text_backward(&mut g, batch.masked.tokens.view(), &masked_pooled, &dmh);
        }
        g.add_row(Block::FuseB, dfb);
        g.add(Block::FuseImg, &da.t().dot(&enc.img_hidden));
        g.add(Block::FuseTxt, &dc.t().dot(&enc.txt_hidden));
        let dh_img = da.dot(&fuse_img);
        let dh_txt = dc.dot(&fuse_txt);

        self.encoder_backward(
            &mut g,
            images,
            batch.tokens.view(),
            &enc,
            dz_img.view(),
            dz_txt.view(),
            dh_img,
            dh_txt,
        );

        let mut bundle = LossBundle::from_values(itc, cons.loss, itm.loss, mlm_value, settings.lambda_cons);
        bundle.grads = buf;
        Ok(StepOutput { bundle, negatives: assignment, encoded: enc, scores, distributions: (p_v2t, p_t2v) })
    }
}
