use super::params::ParamsLayout;
use super::{MaskTarget, MaskVector, ModelConfig, ModelError, ParamStore};
use crate::autograd::{Graph, Var};
use crate::raster::GrayImage;
use crate::scalar::Scalar;
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq)]
pub struct MgVit<T> {
    cfg: ModelConfig,
    layout: ParamsLayout,
    params: ParamStore<T>,
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// Final-layer class token, `1×D`.
    pub cls: Var,
    /// One `1×classes` cosine-logit row per classifier head.
    pub logits: Vec<Var>,
    /// L2-normalised projection, `1×projection_dim`.
    pub projection: Var,
    /// Attention probabilities, indexed `[layer][head]`.
    pub attention: Vec<Vec<Var>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput<T> {
    pub cls: Vec<T>,
    pub logits: Vec<Vec<T>>,
    pub projection: Vec<T>,
    pub attention: Vec<Vec<Mat<T>>>,
}

impl<T: Scalar> MgVit<T> {
    pub fn new(cfg: ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let (layout, params) = ParamsLayout::init(&cfg);
        Ok(Self { cfg, layout, params })
    }

    /// Wraps existing parameters; names and shapes must match `cfg`.
    pub fn from_params(cfg: ModelConfig, params: ParamStore<T>) -> Result<Self, ModelError> {
        cfg.validate()?;
        let (layout, reference) = ParamsLayout::init::<T>(&cfg);
        if reference.len() != params.len() {
            return Err(ModelError::InvalidConfig(format!(
                "expected {} tensors, found {}",
                reference.len(),
                params.len()
            )));
        }
        for ((rn, rt), (n, t)) in reference.iter().zip(params.iter()) {
            if rn != n || rt.shape() != t.shape() {
                return Err(ModelError::InvalidConfig(format!(
                    "tensor {n} {:?} does not match expected {rn} {:?}",
                    t.shape(),
                    rt.shape()
                )));
            }
        }
        if !params.is_finite() {
            return Err(ModelError::NonFiniteActivation("parameters"));
        }
        Ok(Self { cfg, layout, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &ParamsLayout {
        &self.layout
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Copy with a different number of mask-guided layers; parameters are shared.
    pub fn with_masked_layers(&self, masked_layers: usize) -> Result<Self, ModelError> {
        let cfg = ModelConfig { masked_layers, ..self.cfg.clone() };
        cfg.validate()?;
        Ok(Self { cfg, layout: self.layout.clone(), params: self.params.clone() })
    }

    /// Places every parameter on the tape.
    pub fn bind(&self, g: &mut Graph<T>) -> Vec<Var> {
        (0..self.params.len()).map(|i| g.param(i, self.params.get(i))).collect()
    }

    fn patches(&self, image: &GrayImage) -> Result<Mat<T>, ModelError> {
        let side = self.cfg.input_side;
        if image.width() != side || image.height() != side {
            return Err(ModelError::DimensionMismatch { expected: side, width: image.width(), height: image.height() });
        }
        let p = self.cfg.patch_size;
        let grid = self.cfg.grid();
        Ok(Mat::from_fn(grid * grid, p * p, |n, k| {
            let (gx, gy) = (n % grid, n / grid);
            let (px, py) = (k % p, k / p);
            let v = image.get(gx * p + px, gy * p + py) as f64 / 255.0;
            T::of((v - 0.5) / 0.5)
        }))
    }

    fn mask_matrix(&self, mask: &MaskVector) -> Result<Mat<T>, ModelError> {
        let tokens = self.cfg.num_patches() + 1;
        if mask.additive.len() != tokens {
            return Err(ModelError::DimensionMismatch {
                expected: tokens,
                width: mask.additive.len(),
                height: 1,
            });
        }
        let rows = match self.cfg.mask_target {
            MaskTarget::ClassToken => 0..1,
            MaskTarget::PatchTokens => 1..tokens,
            MaskTarget::AllTokens => 0..tokens,
        };
        Ok(Mat::from_fn(tokens, tokens, |r, c| if rows.contains(&r) { T::of(mask.additive[c]) } else { T::zero() }))
    }

    pub fn forward_vars(
        &self,
        g: &mut Graph<T>,
        bound: &[Var],
        image: &GrayImage,
        mask: &MaskVector,
    ) -> Result<ForwardVars, ModelError> {
        let cfg = &self.cfg;
        let lay = &self.layout;
        let p = |i: usize| bound[i];

        let patches = g.constant(self.patches(image)?);
        let emb = g.matmul(patches, p(lay.patch_w));
        let emb = g.add_row(emb, p(lay.patch_b));
        let tokens = g.concat_rows(&[p(lay.cls_token), emb]);
        let mut x = g.add(tokens, p(lay.pos_embed));

        let mask_const = if cfg.masked_layers > 0 { Some(g.constant(self.mask_matrix(mask)?)) } else { None };
        let dh = cfg.head_dim();
        let inv_sqrt = T::of(1.0 / (dh as f64).sqrt());
        let mut attention = Vec::with_capacity(cfg.num_layers);

        for (l, lp) in lay.layers.iter().enumerate() {
            let h = g.layer_norm(x, p(lp.ln1_gamma), p(lp.ln1_beta));
            let q = g.matmul(h, p(lp.wq));
            let q = g.add_row(q, p(lp.bq));
            let k = g.matmul(h, p(lp.wk));
            let k = g.add_row(k, p(lp.bk));
            let v = g.matmul(h, p(lp.wv));
            let v = g.add_row(v, p(lp.bv));
            let masked = l >= cfg.first_masked_layer();
            let mut heads = Vec::with_capacity(cfg.num_heads);
            let mut layer_attn = Vec::with_capacity(cfg.num_heads);
            for hd in 0..cfg.num_heads {
                let qh = g.slice_cols(q, hd * dh, dh);
                let kh = g.slice_cols(k, hd * dh, dh);
                let vh = g.slice_cols(v, hd * dh, dh);
                let scores = g.matmul_t(qh, kh);
                let mut scores = g.scale(scores, inv_sqrt);
                if masked {
                    scores = g.add(scores, mask_const.expect("mask built when masked_layers > 0"));
                }
                let attn = g.softmax_rows(scores);
                layer_attn.push(attn);
                heads.push(g.matmul(attn, vh));
            }
            attention.push(layer_attn);
            let merged = g.concat_cols(&heads);
            let o = g.matmul(merged, p(lp.wo));
            let o = g.add_row(o, p(lp.bo));
            x = g.add(x, o);

            let h2 = g.layer_norm(x, p(lp.ln2_gamma), p(lp.ln2_beta));
            let f = g.matmul(h2, p(lp.w1));
            let f = g.add_row(f, p(lp.b1));
            let f = g.gelu(f);
            let f = g.matmul(f, p(lp.w2));
            let f = g.add_row(f, p(lp.b2));
            x = g.add(x, f);
        }

        let xn = g.layer_norm(x, p(lay.norm_gamma), p(lay.norm_beta));
        let cls = g.slice_rows(xn, 0, 1);

        let cls_unit = g.l2_normalize_rows(cls);
        let logits = lay
            .classifier
            .iter()
            .map(|&w| {
                let proto = g.l2_normalize_rows(p(w));
                g.matmul_t(cls_unit, proto)
            })
            .collect();

        let mut z = cls;
        for (i, &(w, b)) in lay.projection.iter().enumerate() {
            z = g.matmul(z, p(w));
            z = g.add_row(z, p(b));
            if i < 2 {
                z = g.gelu(z);
            }
        }
        let projection = g.l2_normalize_rows(z);

        if !g.value(cls).is_finite() || !g.value(projection).is_finite() {
            return Err(ModelError::NonFiniteActivation("forward"));
        }
        Ok(ForwardVars { cls, logits, projection, attention })
    }

    /// Parameter gradients of `root` seeded with `cotangent`, dense and in
    /// store order (zeros for parameters `root` does not depend on).
    pub fn backward(&self, g: &Graph<T>, root: Var, cotangent: Mat<T>) -> Result<Vec<Mat<T>>, ModelError> {
        let grads = g.backward(root, cotangent)?;
        Ok(grads
            .params(self.params.len())
            .into_iter()
            .enumerate()
            .map(|(i, gr)| gr.unwrap_or_else(|| {
                let (r, c) = self.params.get(i).shape();
                Mat::zeros(r, c)
            }))
            .collect())
    }

    /// Forward pass without gradient caching.
    pub fn forward(&self, image: &GrayImage, mask: &MaskVector) -> Result<ForwardOutput<T>, ModelError> {
        let mut g = Graph::no_grad();
        let bound = self.bind(&mut g);
        let vars = self.forward_vars(&mut g, &bound, image, mask)?;
        Ok(ForwardOutput {
            cls: g.value(vars.cls).data().to_vec(),
            logits: vars.logits.iter().map(|&v| g.value(v).data().to_vec()).collect(),
            projection: g.value(vars.projection).data().to_vec(),
            attention: vars
                .attention
                .iter()
                .map(|layer| layer.iter().map(|&a| g.value(a).clone()).collect())
                .collect(),
        })
    }
}
