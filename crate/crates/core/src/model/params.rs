//! Flat parameter storage with a named tensor layout.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub range: Range<usize>,
    /// Whether weight decay applies (matrices only).
    pub decay: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockLayout {
    pub ln1_gain: Range<usize>,
    pub ln1_bias: Range<usize>,
    pub qkv_w: Range<usize>,
    pub qkv_b: Range<usize>,
    pub out_w: Range<usize>,
    pub out_b: Range<usize>,
    pub ln2_gain: Range<usize>,
    pub ln2_bias: Range<usize>,
    pub ffn_in_w: Range<usize>,
    pub ffn_in_b: Range<usize>,
    pub ffn_out_w: Range<usize>,
    pub ffn_out_b: Range<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub tensors: Vec<TensorSpec>,
    pub embedding: Range<usize>,
    pub encoder: Vec<BlockLayout>,
    pub encoder_ln_gain: Range<usize>,
    pub encoder_ln_bias: Range<usize>,
    pub upsample_w: Range<usize>,
    pub upsample_b: Range<usize>,
    pub decoder: Vec<BlockLayout>,
    pub decoder_ln_gain: Range<usize>,
    pub decoder_ln_bias: Range<usize>,
    pub head_w: Range<usize>,
    pub head_b: Range<usize>,
    pub total: usize,
}

struct Builder {
    tensors: Vec<TensorSpec>,
    offset: usize,
}

impl Builder {
    fn add(&mut self, name: String, shape: &[usize]) -> Range<usize> {
        let len: usize = shape.iter().product();
        let range = self.offset..self.offset + len;
        self.offset += len;
        self.tensors.push(TensorSpec {
            name,
            shape: shape.to_vec(),
            range: range.clone(),
            decay: shape.len() == 2,
        });
        range
    }

    fn block(&mut self, prefix: &str, h: usize, f: usize) -> BlockLayout {
        BlockLayout {
            ln1_gain: self.add(format!("{prefix}.ln1.gain"), &[h]),
            ln1_bias: self.add(format!("{prefix}.ln1.bias"), &[h]),
            qkv_w: self.add(format!("{prefix}.attn.qkv.weight"), &[h, 3 * h]),
            qkv_b: self.add(format!("{prefix}.attn.qkv.bias"), &[3 * h]),
            out_w: self.add(format!("{prefix}.attn.out.weight"), &[h, h]),
            out_b: self.add(format!("{prefix}.attn.out.bias"), &[h]),
            ln2_gain: self.add(format!("{prefix}.ln2.gain"), &[h]),
            ln2_bias: self.add(format!("{prefix}.ln2.bias"), &[h]),
            ffn_in_w: self.add(format!("{prefix}.ffn.in.weight"), &[h, f]),
            ffn_in_b: self.add(format!("{prefix}.ffn.in.bias"), &[f]),
            ffn_out_w: self.add(format!("{prefix}.ffn.out.weight"), &[f, h]),
            ffn_out_b: self.add(format!("{prefix}.ffn.out.bias"), &[h]),
        }
    }
}

impl Layout {
    pub fn new(config: &ModelConfig) -> Self {
        let h = config.hidden;
        let f = config.ffn_hidden;
        let t = config.upsample;
        let mut b = Builder {
            tensors: Vec::new(),
            offset: 0,
        };
        let embedding = b.add("embedding".into(), &[config.embedding_rows(), h]);
        let encoder = (0..config.encoder_layers)
            .map(|i| b.block(&format!("encoder.{i}"), h, f))
            .collect();
        let encoder_ln_gain = b.add("encoder.ln.gain".into(), &[h]);
        let encoder_ln_bias = b.add("encoder.ln.bias".into(), &[h]);
        let upsample_w = b.add("upsample.weight".into(), &[h, t * h]);
        let upsample_b = b.add("upsample.bias".into(), &[t * h]);
        let decoder = (0..config.decoder_layers)
            .map(|i| b.block(&format!("decoder.{i}"), h, f))
            .collect();
        let decoder_ln_gain = b.add("decoder.ln.gain".into(), &[h]);
        let decoder_ln_bias = b.add("decoder.ln.bias".into(), &[h]);
        let head_w = b.add("head.weight".into(), &[h, config.output_columns()]);
        let head_b = b.add("head.bias".into(), &[config.output_columns()]);
        Layout {
            total: b.offset,
            tensors: b.tensors,
            embedding,
            encoder,
            encoder_ln_gain,
            encoder_ln_bias,
            upsample_w,
            upsample_b,
            decoder,
            decoder_ln_gain,
            decoder_ln_bias,
            head_w,
            head_b,
        }
    }

    /// Seeded initialization: embeddings ~ N(0, 1), matrices ~ N(0, 1/fan_in)
    /// with residual output projections further scaled by the depth, layer
    /// norm gains one, biases zero.
    pub fn init(&self, config: &ModelConfig) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut data = vec![0.0; self.total];
        let depth = (2 * (config.encoder_layers + config.decoder_layers)).max(1) as f64;
        for spec in &self.tensors {
            let slot = &mut data[spec.range.clone()];
            if spec.name.ends_with(".gain") {
                slot.fill(1.0);
            } else if spec.name == "embedding" {
                let normal = Normal::new(0.0, 1.0).expect("valid std");
                slot.iter_mut().for_each(|x| *x = normal.sample(&mut rng));
            } else if spec.shape.len() == 2 {
                let mut std = 1.0 / (spec.shape[0] as f64).sqrt();
                if spec.name.ends_with("attn.out.weight") || spec.name.ends_with("ffn.out.weight") {
                    std /= depth.sqrt();
                }
                let normal = Normal::new(0.0, std).expect("valid std");
                slot.iter_mut().for_each(|x| *x = normal.sample(&mut rng));
            }
        }
        data
    }
}
