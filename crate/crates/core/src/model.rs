//! Small differentiable encoders for images and texts.
//!
//! Both towers are tanh MLPs. The text tower first mean-pools a bottlenecked
//! token embedding (`N × K` lookup followed by a `K × W` projection). Embeddings
//! leave the towers un-normalized; [`normalize_with_grad`] maps them onto the
//! unit sphere and carries gradients back.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossParams;
use crate::math::{dot, norm, Matrix, ZERO_NORM};

static NEXT_ENCODER_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ENCODER_ID.fetch_add(1, Ordering::Relaxed)
}

/// Identifies the exact parameter state a forward cache was built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Stamp {
    encoder: u64,
    version: u64,
}

/// Fully connected tower: tanh on hidden layers, identity on the output.
#[derive(Debug)]
pub struct MlpEncoder {
    layer_dims: Vec<usize>,
    /// `in × out` per layer.
    weights: Vec<Matrix>,
    /// `1 × out` per layer.
    biases: Vec<Matrix>,
    id: u64,
    version: u64,
}

impl Clone for MlpEncoder {
    fn clone(&self) -> Self {
        MlpEncoder {
            layer_dims: self.layer_dims.clone(),
            weights: self.weights.clone(),
            biases: self.biases.clone(),
            id: fresh_id(),
            version: 0,
        }
    }
}

impl PartialEq for MlpEncoder {
    fn eq(&self, other: &Self) -> bool {
        self.layer_dims == other.layer_dims && self.weights == other.weights && self.biases == other.biases
    }
}

/// Activations retained by [`MlpEncoder::forward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    stamp: Stamp,
    /// Input followed by every hidden activation (post-tanh).
    inputs: Vec<Matrix>,
}

/// Parameter gradients of an [`MlpEncoder`], laid out like its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Matrix>,
}

impl MlpGrads {
    /// Flat gradients in [`MlpEncoder::tensors_mut`] order.
    pub fn into_tensors(self) -> Vec<Vec<f64>> {
        self.weights
            .into_iter()
            .zip(self.biases)
            .flat_map(|(w, b)| [w.into_vec(), b.into_vec()])
            .collect()
    }
}

impl MlpEncoder {
    /// Gaussian init with standard deviation `1/√fan_in`, zero biases.
    pub fn new<R: Rng + ?Sized>(layer_dims: &[usize], rng: &mut R) -> Result<Self> {
        let mut enc = MlpEncoder::zeros(layer_dims)?;
        for w in &mut enc.weights {
            let scale = 1.0 / (w.rows() as f64).sqrt();
            for v in w.as_mut_slice() {
                let z: f64 = StandardNormal.sample(rng);
                *v = z * scale;
            }
        }
        Ok(enc)
    }

    pub fn zeros(layer_dims: &[usize]) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return Err(Error::ShapeMismatch(format!(
                "layer dims {layer_dims:?} need an input and an output width, all positive"
            )));
        }
        let weights = layer_dims.windows(2).map(|w| Matrix::zeros(w[0], w[1])).collect();
        let biases = layer_dims[1..].iter().map(|&o| Matrix::zeros(1, o)).collect();
        Ok(MlpEncoder {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
            id: fresh_id(),
            version: 0,
        })
    }

    /// A single linear layer computing the identity map.
    pub fn identity(dim: usize) -> Result<Self> {
        let mut enc = MlpEncoder::zeros(&[dim, dim])?;
        enc.weights[0] = Matrix::identity(dim);
        Ok(enc)
    }

    pub fn from_params(layer_dims: &[usize], weights: Vec<Matrix>, biases: Vec<Matrix>) -> Result<Self> {
        let mut enc = MlpEncoder::zeros(layer_dims)?;
        if weights.len() != enc.weights.len() || biases.len() != enc.biases.len() {
            return Err(Error::ShapeMismatch("layer count mismatch".into()));
        }
        for (slot, w) in enc
            .weights
            .iter_mut()
            .chain(enc.biases.iter_mut())
            .zip(weights.into_iter().chain(biases))
        {
            slot.check_same_shape(&w)?;
            *slot = w;
        }
        Ok(enc)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("at least two dims")
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn biases(&self) -> &[Matrix] {
        &self.biases
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.as_slice().len()).sum()
    }

    fn stamp(&self) -> Stamp {
        Stamp {
            encoder: self.id,
            version: self.version,
        }
    }

    /// Named parameter tensors in a fixed order: each layer's weight then bias.
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        self.weights
            .iter()
            .zip(&self.biases)
            .enumerate()
            .flat_map(|(i, (w, b))| [(format!("layer{i}.weight"), w), (format!("layer{i}.bias"), b)])
            .collect()
    }

    /// Mutable views of the parameters in [`MlpEncoder::tensors`] order.
    /// Invalidates outstanding forward caches.
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.version += 1;
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w.as_mut_slice(), b.as_mut_slice()])
            .collect()
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, ForwardCache)> {
        if x.cols() != self.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "encoder expects {} input features, got {}",
                self.input_dim(),
                x.cols()
            )));
        }
        let last = self.weights.len() - 1;
        let mut inputs = Vec::with_capacity(self.weights.len());
        let mut h = x.clone();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = h.matmul(w)?;
            for i in 0..z.rows() {
                for (v, &bias) in z.row_mut(i).iter_mut().zip(b.as_slice()) {
                    *v += bias;
                }
            }
            if l != last {
                z = z.map(f64::tanh);
            }
            inputs.push(h);
            h = z;
        }
        Ok((
            h,
            ForwardCache {
                stamp: self.stamp(),
                inputs,
            },
        ))
    }

    /// Backpropagates `d_out` (gradient of a scalar w.r.t. the outputs).
    pub fn backward(&self, cache: &ForwardCache, d_out: &Matrix) -> Result<(MlpGrads, Matrix)> {
        if cache.stamp != self.stamp() {
            return Err(Error::StaleCache);
        }
        let n = cache.inputs[0].rows();
        if d_out.shape() != (n, self.output_dim()) {
            return Err(Error::ShapeMismatch(format!(
                "output gradient {:?} for {n} rows of width {}",
                d_out.shape(),
                self.output_dim()
            )));
        }
        let layers = self.weights.len();
        let mut d_weights = vec![Matrix::zeros(1, 1); layers];
        let mut d_biases = vec![Matrix::zeros(1, 1); layers];
        let mut delta = d_out.clone();
        for l in (0..layers).rev() {
            let input = &cache.inputs[l];
            d_weights[l] = input.transposed_matmul(&delta)?;
            let mut db = Matrix::zeros(1, delta.cols());
            for i in 0..delta.rows() {
                for (acc, &v) in db.as_mut_slice().iter_mut().zip(delta.row(i)) {
                    *acc += v;
                }
            }
            d_biases[l] = db;
            let mut d_input = delta.matmul_transposed(&self.weights[l])?;
            if l > 0 {
                // `input` is tanh output of the previous layer: tanh' = 1 − h².
                for (g, &h) in d_input.as_mut_slice().iter_mut().zip(input.as_slice()) {
                    *g *= 1.0 - h * h;
                }
            }
            delta = d_input;
        }
        Ok((
            MlpGrads {
                weights: d_weights,
                biases: d_biases,
            },
            delta,
        ))
    }
}

/// Factorized token embedding: `N × K` lookup then `K × W` projection.
#[derive(Debug, Clone, PartialEq)]
pub struct BottleneckEmbedding {
    pub lookup: Matrix,
    pub projection: Matrix,
}

impl BottleneckEmbedding {
    pub fn new<R: Rng + ?Sized>(vocab: usize, bottleneck: usize, width: usize, rng: &mut R) -> Self {
        let mut draw = |rows: usize, cols: usize, scale: f64| {
            Matrix::from_fn(rows, cols, |_, _| {
                let z: f64 = StandardNormal.sample(rng);
                z * scale
            })
        };
        let lookup = draw(vocab, bottleneck, 1.0);
        let projection = draw(bottleneck, width, 1.0 / (bottleneck as f64).sqrt());
        BottleneckEmbedding { lookup, projection }
    }

    pub fn from_parts(lookup: Matrix, projection: Matrix) -> Result<Self> {
        if lookup.cols() != projection.rows() {
            return Err(Error::ShapeMismatch(format!(
                "lookup width {} vs projection height {}",
                lookup.cols(),
                projection.rows()
            )));
        }
        Ok(BottleneckEmbedding { lookup, projection })
    }

    pub fn vocab(&self) -> usize {
        self.lookup.rows()
    }

    pub fn bottleneck(&self) -> usize {
        self.lookup.cols()
    }

    pub fn width(&self) -> usize {
        self.projection.cols()
    }

    /// `N·K + K·W`.
    pub fn param_count_for(vocab: usize, bottleneck: usize, width: usize) -> usize {
        vocab * bottleneck + bottleneck * width
    }

    pub fn param_count(&self) -> usize {
        Self::param_count_for(self.vocab(), self.bottleneck(), self.width())
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        match ids.iter().find(|&&id| id as usize >= self.vocab()) {
            Some(&id) => Err(Error::OutOfVocab {
                id,
                vocab: self.vocab(),
            }),
            None => Ok(()),
        }
    }

    /// Row `i` is `lookup[ids[i]] · projection`.
    pub fn embed_tokens(&self, ids: &[u32]) -> Result<Matrix> {
        if ids.is_empty() {
            return Err(Error::ShapeMismatch("empty token sequence".into()));
        }
        self.check_ids(ids)?;
        let rows: Vec<Vec<f64>> = ids.iter().map(|&id| self.lookup.row(id as usize).to_vec()).collect();
        Matrix::from_rows(&rows)?.matmul(&self.projection)
    }

    /// Mean of the `K`-dimensional lookup rows of each sequence.
    fn pool(&self, sequences: &[Vec<u32>]) -> Result<Matrix> {
        let mut pooled = Matrix::zeros(sequences.len().max(1), self.bottleneck());
        for (i, ids) in sequences.iter().enumerate() {
            if ids.is_empty() {
                return Err(Error::ShapeMismatch(format!("sequence {i} is empty")));
            }
            self.check_ids(ids)?;
            let inv = 1.0 / ids.len() as f64;
            let row = pooled.row_mut(i);
            for &id in ids {
                for (acc, &v) in row.iter_mut().zip(self.lookup.row(id as usize)) {
                    *acc += v;
                }
            }
            for v in row {
                *v *= inv;
            }
        }
        Ok(pooled)
    }
}

/// Text tower: mean-pooled bottleneck embedding followed by an MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoder {
    pub embedding: BottleneckEmbedding,
    pub mlp: MlpEncoder,
}

/// Cache for [`TextEncoder::backward`].
#[derive(Debug, Clone)]
pub struct TextCache {
    tokens: Vec<Vec<u32>>,
    pooled: Matrix,
    mlp: ForwardCache,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextGrads {
    pub lookup: Matrix,
    pub projection: Matrix,
    pub mlp: MlpGrads,
}

impl TextEncoder {
    pub fn new(embedding: BottleneckEmbedding, mlp: MlpEncoder) -> Result<Self> {
        if mlp.input_dim() != embedding.width() {
            return Err(Error::ShapeMismatch(format!(
                "embedding width {} feeds an MLP expecting {}",
                embedding.width(),
                mlp.input_dim()
            )));
        }
        Ok(TextEncoder { embedding, mlp })
    }

    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![
            ("embedding.lookup".to_string(), &self.embedding.lookup),
            ("embedding.projection".to_string(), &self.embedding.projection),
        ];
        out.extend(self.mlp.tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![
            self.embedding.lookup.as_mut_slice(),
            self.embedding.projection.as_mut_slice(),
        ];
        out.extend(self.mlp.tensors_mut());
        out
    }

    pub fn forward(&self, tokens: &[Vec<u32>]) -> Result<(Matrix, TextCache)> {
        if tokens.is_empty() {
            return Err(Error::ShapeMismatch("empty text batch".into()));
        }
        // Mean pooling commutes with the linear projection, so pool in K.
        let pooled = self.embedding.pool(tokens)?;
        let projected = pooled.matmul(&self.embedding.projection)?;
        let (out, mlp) = self.mlp.forward(&projected)?;
        Ok((
            out,
            TextCache {
                tokens: tokens.to_vec(),
                pooled,
                mlp,
            },
        ))
    }

    pub fn backward(&self, cache: &TextCache, d_out: &Matrix) -> Result<TextGrads> {
        let (mlp, d_projected) = self.mlp.backward(&cache.mlp, d_out)?;
        let projection = cache.pooled.transposed_matmul(&d_projected)?;
        let d_pooled = d_projected.matmul_transposed(&self.embedding.projection)?;
        let mut lookup = Matrix::zeros(self.embedding.vocab(), self.embedding.bottleneck());
        for (i, ids) in cache.tokens.iter().enumerate() {
            let inv = 1.0 / ids.len() as f64;
            for &id in ids {
                for (acc, &g) in lookup.row_mut(id as usize).iter_mut().zip(d_pooled.row(i)) {
                    *acc += g * inv;
                }
            }
        }
        Ok(TextGrads {
            lookup,
            projection,
            mlp,
        })
    }
}

/// Unit-normalizes rows and maps `d_normalized` back to the raw rows:
/// `d_raw_i = (d_i − (d_i·u_i)·u_i) / ‖raw_i‖`.
pub fn normalize_with_grad(raw: &Matrix, d_normalized: &Matrix) -> Result<(Matrix, Matrix)> {
    raw.check_same_shape(d_normalized)?;
    let mut unit = raw.clone();
    let mut d_raw = d_normalized.clone();
    for i in 0..raw.rows() {
        let n = norm(raw.row(i));
        if !(n >= ZERO_NORM) {
            return Err(Error::ZeroRow { row: i, norm: n });
        }
        for v in unit.row_mut(i) {
            *v /= n;
        }
        let radial = dot(d_normalized.row(i), unit.row(i));
        for (g, &u) in d_raw.row_mut(i).iter_mut().zip(unit.row(i)) {
            *g = (*g - radial * u) / n;
        }
    }
    Ok((unit, d_raw))
}

/// Shapes of a [`DualEncoder`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Image tower widths, input first, embedding width last.
    pub image_layers: Vec<usize>,
    pub vocab: usize,
    pub bottleneck: usize,
    pub text_width: usize,
    /// Hidden widths of the text MLP between `text_width` and the embedding.
    pub text_hidden: Vec<usize>,
    /// Zero the image tower's output in the upper half of the embedding and
    /// the text tower's in the lower half, so every image·text dot product is
    /// exactly zero at initialization.
    pub disjoint_init: bool,
}

impl ModelConfig {
    pub fn embed_dim(&self) -> usize {
        *self.image_layers.last().expect("validated image layers")
    }

    pub fn text_layers(&self) -> Vec<usize> {
        let mut dims = vec![self.text_width];
        dims.extend(&self.text_hidden);
        dims.push(self.embed_dim());
        dims
    }
}

/// Image tower, text tower, and the loss's learnable temperature and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoder {
    pub image: MlpEncoder,
    pub text: TextEncoder,
    pub loss_params: LossParams,
}

/// Per-group optimizer treatment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupSettings {
    pub weight_decay_multiplier: f64,
    pub lr_multiplier: f64,
    pub frozen: bool,
}

impl Default for GroupSettings {
    fn default() -> Self {
        GroupSettings {
            weight_decay_multiplier: 1.0,
            lr_multiplier: 1.0,
            frozen: false,
        }
    }
}

/// Mutable parameter views sharing one set of optimizer settings.
#[derive(Debug)]
pub struct ParamGroup<'a> {
    pub name: String,
    pub params: Vec<&'a mut [f64]>,
    pub settings: GroupSettings,
}

/// Gradients for a group, one flat vector per parameter tensor.
pub type GroupGrads = Vec<Vec<f64>>;

/// Gradients of a scalar loss w.r.t. every [`DualEncoder`] parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub image: MlpGrads,
    pub text: TextGrads,
    pub d_t_prime: f64,
    pub d_bias: f64,
}

impl ModelGrads {
    /// Gradients ordered like [`DualEncoder::param_groups`].
    pub fn into_groups(self) -> Vec<GroupGrads> {
        let mut text = vec![self.text.lookup.into_vec(), self.text.projection.into_vec()];
        text.extend(self.text.mlp.into_tensors());
        vec![
            self.image.into_tensors(),
            text,
            vec![vec![self.d_t_prime], vec![self.d_bias]],
        ]
    }
}

pub const IMAGE_GROUP: &str = "image_tower";
pub const TEXT_GROUP: &str = "text_tower";
pub const LOSS_GROUP: &str = "loss";

impl DualEncoder {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, loss_params: LossParams, rng: &mut R) -> Result<Self> {
        if cfg.image_layers.len() < 2 {
            return Err(Error::config("model.image_layers", "need input and output widths"));
        }
        let mut image = MlpEncoder::new(&cfg.image_layers, rng)?;
        let embedding = BottleneckEmbedding::new(cfg.vocab, cfg.bottleneck, cfg.text_width, rng);
        let mut text_mlp = MlpEncoder::new(&cfg.text_layers(), rng)?;
        if cfg.disjoint_init {
            let d = cfg.embed_dim();
            if d < 2 {
                return Err(Error::config(
                    "model.disjoint_init",
                    "needs an embedding width of at least 2",
                ));
            }
            zero_output_columns(&mut image, d / 2..d);
            zero_output_columns(&mut text_mlp, 0..d / 2);
        }
        Ok(DualEncoder {
            image,
            text: TextEncoder::new(embedding, text_mlp)?,
            loss_params,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.image.output_dim()
    }

    /// Parameter groups in the order image tower, text tower, loss.
    pub fn param_groups(
        &mut self,
        image: GroupSettings,
        text: GroupSettings,
        loss: GroupSettings,
    ) -> Vec<ParamGroup<'_>> {
        let loss_params = &mut self.loss_params;
        vec![
            ParamGroup {
                name: IMAGE_GROUP.into(),
                params: self.image.tensors_mut(),
                settings: image,
            },
            ParamGroup {
                name: TEXT_GROUP.into(),
                params: self.text.tensors_mut(),
                settings: text,
            },
            ParamGroup {
                name: LOSS_GROUP.into(),
                params: vec![
                    std::slice::from_mut(&mut loss_params.t_prime),
                    std::slice::from_mut(&mut loss_params.bias),
                ],
                settings: loss,
            },
        ]
    }

    /// Every tensor under a dotted, group-prefixed name.
    pub fn named_tensors(&self) -> Vec<(String, Matrix)> {
        let mut out: Vec<(String, Matrix)> = self
            .image
            .tensors()
            .into_iter()
            .map(|(n, m)| (format!("image.{n}"), m.clone()))
            .collect();
        out.extend(
            self.text
                .tensors()
                .into_iter()
                .map(|(n, m)| (format!("text.{n}"), m.clone())),
        );
        out.push(("loss.t_prime".into(), Matrix::filled(1, 1, self.loss_params.t_prime)));
        out.push(("loss.bias".into(), Matrix::filled(1, 1, self.loss_params.bias)));
        out
    }
}

fn zero_output_columns(enc: &mut MlpEncoder, cols: std::ops::Range<usize>) {
    let last = enc.weights.len() - 1;
    let w = &mut enc.weights[last];
    for i in 0..w.rows() {
        for j in cols.clone() {
            w[(i, j)] = 0.0;
        }
    }
    for j in cols {
        enc.biases[last][(0, j)] = 0.0;
    }
}
