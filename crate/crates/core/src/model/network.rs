//! Encoder, upsampling projection, decoder and output head, with explicit
//! reverse-mode passes.
//!
//! Shapes: source of `N` tokens, hidden size `H`, upsampling `T`, `L = N·T`
//! decoder positions and `C` output columns.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::ops::{self, LayerNormCache};
use super::params::{BlockLayout, Layout};
use crate::emission::EmissionLattice;
use crate::error::{Error, Result};
use crate::lattice::AlignmentLabel;
use crate::vocab::TokenId;

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    layout: Layout,
    params: Vec<f64>,
    positions: Vec<f64>,
}

/// Activations of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardActivations {
    /// Encoder states `r`, `N x H`.
    pub encoder_states: Vec<f64>,
    /// Decoder-layer inputs after upsampling (and any glancing substitution), `L x H`.
    pub decoder_inputs: Vec<f64>,
    pub lattice: EmissionLattice,
}

struct BlockCache {
    ln1: LayerNormCache,
    normed1: Vec<f64>,
    qkv: Vec<f64>,
    probs: Vec<f64>,
    ctx: Vec<f64>,
    mask1: Option<Vec<f64>>,
    ln2: LayerNormCache,
    normed2: Vec<f64>,
    pre_act: Vec<f64>,
    act: Vec<f64>,
    mask2: Option<Vec<f64>>,
}

struct StackCache {
    blocks: Vec<BlockCache>,
    final_ln: LayerNormCache,
}

/// Everything the backward pass needs from a recorded forward pass.
pub struct Trace {
    source: Vec<TokenId>,
    input_mask: Option<Vec<f64>>,
    encoder: StackCache,
    decoder: StackCache,
    head_input: Vec<f64>,
    /// Decoder positions whose inputs were replaced by gold embeddings.
    replaced: Vec<usize>,
    pub activations: ForwardActivations,
}

impl Trace {
    pub fn replaced_positions(&self) -> &[usize] {
        &self.replaced
    }
}

/// Callback deciding which decoder inputs to overwrite with which label
/// embedding, given the first-pass lattice.
pub type GlanceFn<'a> = dyn FnMut(&EmissionLattice) -> Vec<(usize, AlignmentLabel)> + 'a;

fn dropout_mask(len: usize, rate: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect()
}

fn pair_mut(
    v: &mut [f64],
    a: std::ops::Range<usize>,
    b: std::ops::Range<usize>,
) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a.end <= b.start);
    let (left, right) = v.split_at_mut(b.start);
    (&mut left[a], &mut right[..b.end - b.start])
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let params = layout.init(&config);
        Ok(Self::assemble(config, layout, params))
    }

    pub fn from_params(config: ModelConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(Error::dims(
                format!("{} parameters", layout.total),
                format!("{} parameters", params.len()),
            ));
        }
        Ok(Self::assemble(config, layout, params))
    }

    fn assemble(config: ModelConfig, layout: Layout, params: Vec<f64>) -> Self {
        let rows = config.max_source_len * config.upsample;
        let positions = ops::sinusoidal_table(rows, config.hidden);
        Model {
            config,
            layout,
            params,
            positions,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    fn p(&self, r: &std::ops::Range<usize>) -> &[f64] {
        &self.params[r.clone()]
    }

    fn position(&self, p: usize) -> &[f64] {
        let h = self.config.hidden;
        &self.positions[p * h..(p + 1) * h]
    }

    /// Embedding row for an alignment label (tokens, then KEEP, then BLANK).
    pub fn label_embedding(&self, label: AlignmentLabel) -> &[f64] {
        let v = self.config.vocab_size;
        let row = match label {
            AlignmentLabel::Token(t) => t.index(),
            AlignmentLabel::Keep => v,
            AlignmentLabel::Blank => v + 1,
        };
        let h = self.config.hidden;
        let e = self.p(&self.layout.embedding);
        &e[row * h..(row + 1) * h]
    }

    fn check_source(&self, source: &[TokenId]) -> Result<()> {
        if source.is_empty() {
            return Err(Error::InvalidInput("source must contain at least one token".into()));
        }
        if source.len() > self.config.max_source_len {
            return Err(Error::InvalidInput(format!(
                "source length {} exceeds max_source_len {}",
                source.len(),
                self.config.max_source_len
            )));
        }
        if let Some(bad) = source.iter().find(|t| t.index() >= self.config.vocab_size) {
            return Err(Error::UnknownTokenId(bad.0));
        }
        Ok(())
    }

    fn block_forward(
        &self,
        b: &BlockLayout,
        mut x: Vec<f64>,
        len: usize,
        dropout: &mut Option<&mut ChaCha8Rng>,
    ) -> (Vec<f64>, BlockCache) {
        let h = self.config.hidden;
        let f = self.config.ffn_hidden;
        let rate = self.config.dropout;

        let (normed1, ln1) = ops::layer_norm(&x, h, self.p(&b.ln1_gain), self.p(&b.ln1_bias));
        let qkv = ops::linear(&normed1, len, h, self.p(&b.qkv_w), self.p(&b.qkv_b), 3 * h);
        let (ctx, probs) = ops::attention(&qkv, len, h, self.config.heads);
        let mut attn = ops::linear(&ctx, len, h, self.p(&b.out_w), self.p(&b.out_b), h);
        let mask1 = match dropout {
            Some(rng) if rate > 0.0 => Some(dropout_mask(attn.len(), rate, rng)),
            _ => None,
        };
        if let Some(m) = &mask1 {
            attn.iter_mut().zip(m).for_each(|(a, m)| *a *= m);
        }
        x.iter_mut().zip(&attn).for_each(|(x, a)| *x += a);

        let (normed2, ln2) = ops::layer_norm(&x, h, self.p(&b.ln2_gain), self.p(&b.ln2_bias));
        let pre_act = ops::linear(&normed2, len, h, self.p(&b.ffn_in_w), self.p(&b.ffn_in_b), f);
        let act: Vec<f64> = pre_act.iter().map(|&v| ops::gelu(v)).collect();
        let mut out = ops::linear(&act, len, f, self.p(&b.ffn_out_w), self.p(&b.ffn_out_b), h);
        let mask2 = match dropout {
            Some(rng) if rate > 0.0 => Some(dropout_mask(out.len(), rate, rng)),
            _ => None,
        };
        if let Some(m) = &mask2 {
            out.iter_mut().zip(m).for_each(|(a, m)| *a *= m);
        }
        x.iter_mut().zip(&out).for_each(|(x, a)| *x += a);

        (
            x,
            BlockCache {
                ln1,
                normed1,
                qkv,
                probs,
                ctx,
                mask1,
                ln2,
                normed2,
                pre_act,
                act,
                mask2,
            },
        )
    }

    fn block_backward(
        &self,
        b: &BlockLayout,
        cache: &BlockCache,
        dout: Vec<f64>,
        len: usize,
        grads: &mut [f64],
    ) -> Vec<f64> {
        let h = self.config.hidden;
        let f = self.config.ffn_hidden;
        let mut dx = dout;

        // feed-forward branch
        let mut dbranch = dx.clone();
        if let Some(m) = &cache.mask2 {
            dbranch.iter_mut().zip(m).for_each(|(g, m)| *g *= m);
        }
        let (dw, db) = pair_mut(grads, b.ffn_out_w.clone(), b.ffn_out_b.clone());
        let mut dact = ops::linear_backward(&cache.act, &dbranch, len, f, h, self.p(&b.ffn_out_w), dw, db);
        dact.iter_mut()
            .zip(&cache.pre_act)
            .for_each(|(g, &z)| *g *= ops::gelu_grad(z));
        let (dw, db) = pair_mut(grads, b.ffn_in_w.clone(), b.ffn_in_b.clone());
        let dnormed2 = ops::linear_backward(&cache.normed2, &dact, len, h, f, self.p(&b.ffn_in_w), dw, db);
        let (dg, db) = pair_mut(grads, b.ln2_gain.clone(), b.ln2_bias.clone());
        let dres = ops::layer_norm_backward(&cache.ln2, &dnormed2, h, self.p(&b.ln2_gain), dg, db);
        dx.iter_mut().zip(&dres).for_each(|(a, b)| *a += b);

        // attention branch
        let mut dbranch = dx.clone();
        if let Some(m) = &cache.mask1 {
            dbranch.iter_mut().zip(m).for_each(|(g, m)| *g *= m);
        }
        let (dw, db) = pair_mut(grads, b.out_w.clone(), b.out_b.clone());
        let dctx = ops::linear_backward(&cache.ctx, &dbranch, len, h, h, self.p(&b.out_w), dw, db);
        let dqkv = ops::attention_backward(&cache.qkv, &cache.probs, &dctx, len, h, self.config.heads);
        let (dw, db) = pair_mut(grads, b.qkv_w.clone(), b.qkv_b.clone());
        let dnormed1 = ops::linear_backward(&cache.normed1, &dqkv, len, h, 3 * h, self.p(&b.qkv_w), dw, db);
        let (dg, db) = pair_mut(grads, b.ln1_gain.clone(), b.ln1_bias.clone());
        let dres = ops::layer_norm_backward(&cache.ln1, &dnormed1, h, self.p(&b.ln1_gain), dg, db);
        dx.iter_mut().zip(&dres).for_each(|(a, b)| *a += b);
        dx
    }

    fn run_stack(
        &self,
        blocks: &[BlockLayout],
        gain: &std::ops::Range<usize>,
        bias: &std::ops::Range<usize>,
        mut x: Vec<f64>,
        len: usize,
        dropout: &mut Option<&mut ChaCha8Rng>,
    ) -> (Vec<f64>, StackCache) {
        let mut caches = Vec::with_capacity(blocks.len());
        for b in blocks {
            let (y, c) = self.block_forward(b, x, len, dropout);
            x = y;
            caches.push(c);
        }
        let (y, final_ln) = ops::layer_norm(&x, self.config.hidden, self.p(gain), self.p(bias));
        (
            y,
            StackCache {
                blocks: caches,
                final_ln,
            },
        )
    }

    fn stack_backward(
        &self,
        blocks: &[BlockLayout],
        gain: &std::ops::Range<usize>,
        bias: &std::ops::Range<usize>,
        cache: &StackCache,
        dy: &[f64],
        len: usize,
        grads: &mut [f64],
    ) -> Vec<f64> {
        let (dg, db) = pair_mut(grads, gain.clone(), bias.clone());
        let mut dx = ops::layer_norm_backward(&cache.final_ln, dy, self.config.hidden, self.p(gain), dg, db);
        for (b, c) in blocks.iter().zip(&cache.blocks).rev() {
            dx = self.block_backward(b, c, dx, len, grads);
        }
        dx
    }

    fn encoder_input(&self, source: &[TokenId], dropout: &mut Option<&mut ChaCha8Rng>) -> (Vec<f64>, Option<Vec<f64>>) {
        let h = self.config.hidden;
        let emb = self.p(&self.layout.embedding);
        let mut x = Vec::with_capacity(source.len() * h);
        for (i, t) in source.iter().enumerate() {
            let row = &emb[t.index() * h..(t.index() + 1) * h];
            x.extend(row.iter().zip(self.position(i)).map(|(e, p)| e + p));
        }
        let mask = match dropout {
            Some(rng) if self.config.dropout > 0.0 => Some(dropout_mask(x.len(), self.config.dropout, rng)),
            _ => None,
        };
        if let Some(m) = &mask {
            x.iter_mut().zip(m).for_each(|(a, m)| *a *= m);
        }
        (x, mask)
    }

    /// Encoder states `r` (`N x H`) in eval mode.
    pub fn encode(&self, source: &[TokenId]) -> Result<Vec<f64>> {
        self.check_source(source)?;
        let (x, _) = self.encoder_input(source, &mut None);
        let (r, _) = self.run_stack(
            &self.layout.encoder,
            &self.layout.encoder_ln_gain,
            &self.layout.encoder_ln_bias,
            x,
            source.len(),
            &mut None,
        );
        Ok(r)
    }

    /// Projects each encoder state to `T` decoder inputs and adds decoder
    /// position encodings.
    pub fn upsample(&self, encoder_states: &[f64]) -> Result<Vec<f64>> {
        let h = self.config.hidden;
        let t = self.config.upsample;
        if encoder_states.len() % h != 0 || encoder_states.is_empty() {
            return Err(Error::dims(format!("N x {h} encoder states"), encoder_states.len()));
        }
        let n = encoder_states.len() / h;
        if n > self.config.max_source_len {
            return Err(Error::InvalidInput(format!("{n} encoder states exceed max_source_len")));
        }
        let mut u = ops::linear(
            encoder_states,
            n,
            h,
            self.p(&self.layout.upsample_w),
            self.p(&self.layout.upsample_b),
            t * h,
        );
        // The N x TH projection reshapes in place to NT x H.
        for p in 0..n * t {
            u[p * h..(p + 1) * h]
                .iter_mut()
                .zip(self.position(p))
                .for_each(|(x, e)| *x += e);
        }
        Ok(u)
    }

    /// Replaces decoder inputs with gold label embeddings plus the position
    /// encoding of the replaced slot.
    pub fn substitute_inputs(&self, inputs: &mut [f64], replacements: &[(usize, AlignmentLabel)]) -> Result<()> {
        let h = self.config.hidden;
        let rows = inputs.len() / h;
        for &(p, label) in replacements {
            if p >= rows {
                return Err(Error::InvalidInput(format!("glance position {p} outside {rows} positions")));
            }
            let emb = self.label_embedding(label);
            let pos = self.position(p);
            for i in 0..h {
                inputs[p * h + i] = emb[i] + pos[i];
            }
        }
        Ok(())
    }

    fn head(&self, decoder_out: &[f64], rows: usize) -> Vec<f64> {
        let c = self.config.output_columns();
        let mut logits = ops::linear(
            decoder_out,
            rows,
            self.config.hidden,
            self.p(&self.layout.head_w),
            self.p(&self.layout.head_b),
            c,
        );
        ops::log_softmax_rows(&mut logits, c);
        logits
    }

    fn lattice(&self, log_probs: Vec<f64>, n: usize) -> Result<EmissionLattice> {
        if log_probs.iter().any(|x| x.is_nan()) {
            return Err(Error::NonFinite("emission log-probabilities".into()));
        }
        EmissionLattice::from_raw(log_probs, n, self.config.upsample, self.config.vocab_size, self.config.variant)
    }

    /// Decoder layers and head over given decoder inputs, eval mode.
    pub fn decode_inputs(&self, inputs: &[f64]) -> Result<EmissionLattice> {
        let h = self.config.hidden;
        let rows = inputs.len() / h;
        if rows * h != inputs.len() || rows % self.config.upsample != 0 || rows == 0 {
            return Err(Error::dims(format!("(N*T) x {h} decoder inputs"), inputs.len()));
        }
        let (y, _) = self.run_stack(
            &self.layout.decoder,
            &self.layout.decoder_ln_gain,
            &self.layout.decoder_ln_bias,
            inputs.to_vec(),
            rows,
            &mut None,
        );
        let lp = self.head(&y, rows);
        self.lattice(lp, rows / self.config.upsample)
    }

    /// Upsampling, decoder layers and head, eval mode.
    pub fn upsample_decode(&self, encoder_states: &[f64]) -> Result<ForwardActivations> {
        let decoder_inputs = self.upsample(encoder_states)?;
        let lattice = self.decode_inputs(&decoder_inputs)?;
        Ok(ForwardActivations {
            encoder_states: encoder_states.to_vec(),
            decoder_inputs,
            lattice,
        })
    }

    /// Full eval-mode forward pass.
    pub fn forward(&self, source: &[TokenId]) -> Result<ForwardActivations> {
        let r = self.encode(source)?;
        self.upsample_decode(&r)
    }

    pub fn emissions(&self, source: &[TokenId]) -> Result<EmissionLattice> {
        Ok(self.forward(source)?.lattice)
    }

    /// Forward pass that records what [`Model::backward`] needs. With a
    /// dropout rng the pass runs in train mode. With a glance callback, a
    /// first decoder pass (eval mode, not recorded) produces the lattice the
    /// callback plans from, and the recorded second pass runs on the
    /// substituted inputs.
    pub fn trace(
        &self,
        source: &[TokenId],
        mut dropout: Option<&mut ChaCha8Rng>,
        glance: Option<&mut GlanceFn<'_>>,
    ) -> Result<Trace> {
        self.check_source(source)?;
        let n = source.len();
        let (x, input_mask) = self.encoder_input(source, &mut dropout);
        let (r, encoder) = self.run_stack(
            &self.layout.encoder,
            &self.layout.encoder_ln_gain,
            &self.layout.encoder_ln_bias,
            x,
            n,
            &mut dropout,
        );
        let mut inputs = self.upsample(&r)?;
        let mut replaced = Vec::new();
        if let Some(plan) = glance {
            let first = self.decode_inputs(&inputs)?;
            let replacements = plan(&first);
            self.substitute_inputs(&mut inputs, &replacements)?;
            replaced = replacements.iter().map(|&(p, _)| p).collect();
            replaced.sort_unstable();
            replaced.dedup();
        }
        let rows = n * self.config.upsample;
        let (head_input, decoder) = self.run_stack(
            &self.layout.decoder,
            &self.layout.decoder_ln_gain,
            &self.layout.decoder_ln_bias,
            inputs.clone(),
            rows,
            &mut dropout,
        );
        let lp = self.head(&head_input, rows);
        let lattice = self.lattice(lp, n)?;
        Ok(Trace {
            source: source.to_vec(),
            input_mask,
            encoder,
            decoder,
            head_input,
            replaced,
            activations: ForwardActivations {
                encoder_states: r,
                decoder_inputs: inputs,
                lattice,
            },
        })
    }

    pub fn zero_grads(&self) -> Vec<f64> {
        vec![0.0; self.params.len()]
    }

    /// Accumulates `∂loss/∂params` into `grads` given `∂loss/∂log_probs` of
    /// the traced lattice. Replaced decoder inputs are constants, so nothing
    /// flows back through them.
    pub fn backward(&self, trace: &Trace, lattice_grad: &[f64], grads: &mut [f64]) -> Result<()> {
        let lattice = &trace.activations.lattice;
        if lattice_grad.len() != lattice.log_probs().len() {
            return Err(Error::dims(
                format!("{} lattice gradient entries", lattice.log_probs().len()),
                lattice_grad.len(),
            ));
        }
        if grads.len() != self.params.len() {
            return Err(Error::dims(format!("{} gradient slots", self.params.len()), grads.len()));
        }
        let h = self.config.hidden;
        let t = self.config.upsample;
        let n = trace.source.len();
        let rows = n * t;
        let c = self.config.output_columns();

        let dlogits = ops::log_softmax_backward(lattice.log_probs(), lattice_grad, c);
        let (dw, db) = pair_mut(grads, self.layout.head_w.clone(), self.layout.head_b.clone());
        let dhead = ops::linear_backward(&trace.head_input, &dlogits, rows, h, c, self.p(&self.layout.head_w), dw, db);
        let mut du = self.stack_backward(
            &self.layout.decoder,
            &self.layout.decoder_ln_gain,
            &self.layout.decoder_ln_bias,
            &trace.decoder,
            &dhead,
            rows,
            grads,
        );
        for &p in &trace.replaced {
            du[p * h..(p + 1) * h].fill(0.0);
        }

        let (dw, db) = pair_mut(grads, self.layout.upsample_w.clone(), self.layout.upsample_b.clone());
        let dr = ops::linear_backward(
            &trace.activations.encoder_states,
            &du,
            n,
            h,
            t * h,
            self.p(&self.layout.upsample_w),
            dw,
            db,
        );
        let mut dx = self.stack_backward(
            &self.layout.encoder,
            &self.layout.encoder_ln_gain,
            &self.layout.encoder_ln_bias,
            &trace.encoder,
            &dr,
            n,
            grads,
        );
        if let Some(m) = &trace.input_mask {
            dx.iter_mut().zip(m).for_each(|(g, m)| *g *= m);
        }
        let demb = &mut grads[self.layout.embedding.clone()];
        for (i, tok) in trace.source.iter().enumerate() {
            let row = &mut demb[tok.index() * h..(tok.index() + 1) * h];
            row.iter_mut().zip(&dx[i * h..(i + 1) * h]).for_each(|(a, b)| *a += b);
        }
        Ok(())
    }
}
