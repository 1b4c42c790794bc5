//! JSON checkpoints of a [`DualEncoder`].
//!
//! A checkpoint is a header plus a map from dotted tensor name to shape and
//! row-major values. Keys are sorted and floats print in shortest
//! round-trip form, so equal models always serialize to identical bytes.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossParams;
use crate::math::Matrix;
use crate::model::{BottleneckEmbedding, DualEncoder, MlpEncoder, TextEncoder};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub image_layers: Vec<usize>,
    pub text_layers: Vec<usize>,
    /// Vocabulary size.
    pub n: usize,
    /// Bottleneck width.
    pub k: usize,
    /// Token embedding width.
    pub w: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub shape: [usize; 2],
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: BTreeMap<String, TensorRecord>,
}

impl Checkpoint {
    pub fn from_model(model: &DualEncoder) -> Self {
        let emb = &model.text.embedding;
        let header = CheckpointHeader {
            format_version: FORMAT_VERSION,
            image_layers: model.image.layer_dims().to_vec(),
            text_layers: model.text.mlp.layer_dims().to_vec(),
            n: emb.vocab(),
            k: emb.bottleneck(),
            w: emb.width(),
        };
        let tensors = model
            .named_tensors()
            .into_iter()
            .map(|(name, m)| {
                let shape = [m.rows(), m.cols()];
                (
                    name,
                    TensorRecord {
                        shape,
                        values: m.into_vec(),
                    },
                )
            })
            .collect();
        Checkpoint { header, tensors }
    }

    fn take(&mut self, name: &str, rows: usize, cols: usize) -> Result<Matrix> {
        let rec = self
            .tensors
            .remove(name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks `{name}`")))?;
        if rec.shape != [rows, cols] {
            return Err(Error::Format(format!(
                "`{name}` has shape {:?}, expected [{rows}, {cols}]",
                rec.shape
            )));
        }
        Matrix::from_vec(rows, cols, rec.values)
    }

    fn take_mlp(&mut self, prefix: &str, dims: &[usize]) -> Result<MlpEncoder> {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (i, pair) in dims.windows(2).enumerate() {
            weights.push(self.take(&format!("{prefix}.layer{i}.weight"), pair[0], pair[1])?);
            biases.push(self.take(&format!("{prefix}.layer{i}.bias"), 1, pair[1])?);
        }
        MlpEncoder::from_params(dims, weights, biases)
    }

    pub fn into_model(mut self) -> Result<DualEncoder> {
        let h = self.header.clone();
        if h.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported format version {}",
                h.format_version
            )));
        }
        let image = self.take_mlp("image", &h.image_layers)?;
        let lookup = self.take("text.embedding.lookup", h.n, h.k)?;
        let projection = self.take("text.embedding.projection", h.k, h.w)?;
        let mlp = self.take_mlp("text", &h.text_layers)?;
        let text = TextEncoder::new(BottleneckEmbedding::from_parts(lookup, projection)?, mlp)?;
        let t_prime = self.take("loss.t_prime", 1, 1)?[(0, 0)];
        let bias = self.take("loss.bias", 1, 1)?[(0, 0)];
        if let Some(extra) = self.tensors.keys().next() {
            return Err(Error::Format(format!("unexpected tensor `{extra}`")));
        }
        if image.output_dim() != text.mlp.output_dim() {
            return Err(Error::Format("tower output widths differ".into()));
        }
        Ok(DualEncoder {
            image,
            text,
            loss_params: LossParams { t_prime, bias },
        })
    }
}

pub fn write_checkpoint<W: Write>(model: &DualEncoder, w: W) -> Result<()> {
    serde_json::to_writer_pretty(w, &Checkpoint::from_model(model)).map_err(|e| Error::Format(e.to_string()))
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<DualEncoder> {
    let ckpt: Checkpoint = serde_json::from_reader(r).map_err(|e| Error::Format(e.to_string()))?;
    ckpt.into_model()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(seed: u64) -> DualEncoder {
        let cfg = ModelConfig {
            image_layers: vec![6, 8, 4],
            vocab: 20,
            bottleneck: 3,
            text_width: 5,
            text_hidden: vec![7],
            disjoint_init: false,
        };
        let params = LossParams {
            t_prime: 1.25,
            bias: -3.5,
        };
        DualEncoder::new(&cfg, params, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model(3);
        let mut buf = Vec::new();
        write_checkpoint(&m, &mut buf).unwrap();
        let back = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back, m);
        let mut again = Vec::new();
        write_checkpoint(&back, &mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn header_records_dims() {
        let h = Checkpoint::from_model(&model(0)).header;
        assert_eq!(h.image_layers, vec![6, 8, 4]);
        assert_eq!(h.text_layers, vec![5, 7, 4]);
        assert_eq!((h.n, h.k, h.w), (20, 3, 5));
    }

    #[test]
    fn rejects_tampered_shapes() {
        let mut ckpt = Checkpoint::from_model(&model(1));
        ckpt.tensors.get_mut("text.embedding.lookup").unwrap().shape = [3, 20];
        assert!(matches!(ckpt.into_model(), Err(Error::Format(_))));

        let mut ckpt = Checkpoint::from_model(&model(1));
        ckpt.tensors.remove("loss.bias");
        assert!(matches!(ckpt.into_model(), Err(Error::Format(_))));
    }
}
