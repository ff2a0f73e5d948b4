use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::ModelConfig;
use crate::scalar::Scalar;
use crate::tensor::Mat;

/// Named trainable tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Mat<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Mat<T>) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn get(&self, i: usize) -> &Mat<T> {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Mat<T> {
        &mut self.tensors[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.data().len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Mat::is_finite)
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { names: self.names.clone(), tensors: self.tensors.iter().map(Mat::cast).collect() }
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerParams {
    pub ln1_gamma: usize,
    pub ln1_beta: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2_gamma: usize,
    pub ln2_beta: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// Indices of every tensor in the [`ParamStore`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamsLayout {
    pub patch_w: usize,
    pub patch_b: usize,
    pub cls_token: usize,
    pub pos_embed: usize,
    pub layers: Vec<LayerParams>,
    pub norm_gamma: usize,
    pub norm_beta: usize,
    /// `(weight, bias)` for the three projection-head layers.
    pub projection: [(usize, usize); 3],
    /// One prototype matrix (`classes × embed_dim`) per classifier head.
    pub classifier: Vec<usize>,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal<T: Scalar>(&mut self, rows: usize, cols: usize, std: f64) -> Mat<T> {
        Mat::from_fn(rows, cols, |_, _| {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            T::of(z * std)
        })
    }

    fn linear<T: Scalar>(&mut self, fan_in: usize, fan_out: usize) -> Mat<T> {
        let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
        self.normal(fan_in, fan_out, std)
    }
}

impl ParamsLayout {
    /// Builds the layout and a freshly initialised store from `cfg.seed`.
    pub fn init<T: Scalar>(cfg: &ModelConfig) -> (ParamsLayout, ParamStore<T>) {
        let mut init = Init { rng: ChaCha8Rng::seed_from_u64(cfg.seed) };
        let mut s = ParamStore::new();
        let d = cfg.embed_dim;
        let patch_in = cfg.patch_size * cfg.patch_size;

        let patch_w = s.push("patch_embed.weight", init.linear(patch_in, d));
        let patch_b = s.push("patch_embed.bias", Mat::zeros(1, d));
        let cls_token = s.push("cls_token", init.normal(1, d, 0.02));
        let pos_embed = s.push("pos_embed", init.normal(cfg.num_patches() + 1, d, 0.02));

        let mut layers = Vec::with_capacity(cfg.num_layers);
        for l in 0..cfg.num_layers {
            let n = |part: &str| format!("blocks.{l}.{part}");
            layers.push(LayerParams {
                ln1_gamma: s.push(n("norm1.weight"), Mat::filled(1, d, T::one())),
                ln1_beta: s.push(n("norm1.bias"), Mat::zeros(1, d)),
                wq: s.push(n("attn.q.weight"), init.linear(d, d)),
                bq: s.push(n("attn.q.bias"), Mat::zeros(1, d)),
                wk: s.push(n("attn.k.weight"), init.linear(d, d)),
                bk: s.push(n("attn.k.bias"), Mat::zeros(1, d)),
                wv: s.push(n("attn.v.weight"), init.linear(d, d)),
                bv: s.push(n("attn.v.bias"), Mat::zeros(1, d)),
                wo: s.push(n("attn.proj.weight"), init.linear(d, d)),
                bo: s.push(n("attn.proj.bias"), Mat::zeros(1, d)),
                ln2_gamma: s.push(n("norm2.weight"), Mat::filled(1, d, T::one())),
                ln2_beta: s.push(n("norm2.bias"), Mat::zeros(1, d)),
                w1: s.push(n("mlp.fc1.weight"), init.linear(d, cfg.mlp_hidden)),
                b1: s.push(n("mlp.fc1.bias"), Mat::zeros(1, cfg.mlp_hidden)),
                w2: s.push(n("mlp.fc2.weight"), init.linear(cfg.mlp_hidden, d)),
                b2: s.push(n("mlp.fc2.bias"), Mat::zeros(1, d)),
            });
        }
        let norm_gamma = s.push("norm.weight", Mat::filled(1, d, T::one()));
        let norm_beta = s.push("norm.bias", Mat::zeros(1, d));

        let hp = cfg.projection_hidden;
        let dims = [(d, hp), (hp, hp), (hp, cfg.projection_dim)];
        let projection = [0, 1, 2].map(|i| {
            let (fi, fo) = dims[i];
            (
                s.push(format!("projection.{i}.weight"), init.linear(fi, fo)),
                s.push(format!("projection.{i}.bias"), Mat::zeros(1, fo)),
            )
        });

        let classifier = (0..cfg.num_heads_classifier)
            .map(|h| s.push(format!("classifier.{h}.prototypes"), init.normal(cfg.num_classes(), d, 1.0)))
            .collect();

        let layout = ParamsLayout {
            patch_w,
            patch_b,
            cls_token,
            pos_embed,
            layers,
            norm_gamma,
            norm_beta,
            projection,
            classifier,
        };
        (layout, s)
    }
}
