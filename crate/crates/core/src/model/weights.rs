use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::attention::Matrix;
use super::{BlockKind, ModelConfig};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct Projections {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub mlp_in: Matrix,
    pub mlp_out: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub enum BlockWeights {
    MultiStream { text: Projections, image: Projections },
    SingleStream { shared: Projections },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Weights {
    pub text_in: Matrix,
    pub image_in: Matrix,
    pub time_in: Matrix,
    pub blocks: Vec<BlockWeights>,
    pub image_out: Matrix,
}

struct Init {
    rng: ChaCha20Rng,
}

impl Init {
    fn matrix(&mut self, rows: usize, cols: usize, gain: f64) -> Matrix {
        let std = gain / (rows as f64).sqrt();
        let rng = &mut self.rng;
        Matrix::from_shape_simple_fn((rows, cols), || {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
    }

    fn projections(&mut self, dim: usize) -> Projections {
        Projections {
            wq: self.matrix(dim, dim, 1.0),
            wk: self.matrix(dim, dim, 1.0),
            wv: self.matrix(dim, dim, 1.0),
            wo: self.matrix(dim, dim, 0.5),
            mlp_in: self.matrix(dim, 2 * dim, 1.0),
            mlp_out: self.matrix(2 * dim, dim, 0.5),
        }
    }
}

impl Weights {
    pub fn init(config: &ModelConfig) -> Self {
        let mut init = Init {
            rng: ChaCha20Rng::seed_from_u64(config.weight_seed),
        };
        let dim = config.dim;
        let text_in = init.matrix(dim, dim, 1.0);
        let image_in = init.matrix(config.latent_channels, dim, 1.0);
        let time_in = init.matrix(dim, dim, 0.5);
        let blocks = (0..config.num_blocks())
            .map(|b| match config.block_kind(b) {
                BlockKind::MultiStream => BlockWeights::MultiStream {
                    text: init.projections(dim),
                    image: init.projections(dim),
                },
                BlockKind::SingleStream => BlockWeights::SingleStream {
                    shared: init.projections(dim),
                },
            })
            .collect();
        let mut image_out = init.matrix(dim, config.latent_channels, 1.0);
        if config.zero_output {
            image_out.fill(0.0);
        }
        Self {
            text_in,
            image_in,
            time_in,
            blocks,
            image_out,
        }
    }

    /// Every tensor with a stable dotted name, in storage order.
    pub fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<(String, &Matrix)> = vec![
            ("text_in".into(), &self.text_in),
            ("image_in".into(), &self.image_in),
            ("time_in".into(), &self.time_in),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let groups: Vec<(String, &Projections)> = match b {
                BlockWeights::MultiStream { text, image } => vec![
                    (format!("multi_stream_blocks.{i}.text"), text),
                    (format!("multi_stream_blocks.{i}.image"), image),
                ],
                BlockWeights::SingleStream { shared } => {
                    vec![(format!("single_stream_blocks.{i}.shared"), shared)]
                }
            };
            for (prefix, p) in groups {
                for (name, m) in [
                    ("wq", &p.wq),
                    ("wk", &p.wk),
                    ("wv", &p.wv),
                    ("wo", &p.wo),
                    ("mlp_in", &p.mlp_in),
                    ("mlp_out", &p.mlp_out),
                ] {
                    out.push((format!("{prefix}.{name}"), m));
                }
            }
        }
        out.push(("image_out".into(), &self.image_out));
        out
    }

    /// Writes all tensors as little-endian f64 to `data` and returns the
    /// manifest describing where each one lives.
    pub fn dump(&self, data: &mut impl Write) -> Result<WeightManifest> {
        let mut tensors = Vec::new();
        let mut offset = 0usize;
        for (name, m) in self.named_tensors() {
            for v in m.iter() {
                data.write_all(&v.to_le_bytes())?;
            }
            tensors.push(TensorEntry {
                name,
                shape: vec![m.nrows(), m.ncols()],
                offset,
            });
            offset += m.len() * 8;
        }
        Ok(WeightManifest {
            dtype: "f64-le".into(),
            total_bytes: offset,
            tensors,
        })
    }
}

/// JSON description of a flat weight dump. `offset` is in bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightManifest {
    pub dtype: String,
    pub total_bytes: usize,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}
