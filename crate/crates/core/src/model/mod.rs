//! A small, seeded multi-modal diffusion transformer.
//!
//! The network mirrors the block taxonomy of MM-DiT models: a run of
//! multi-stream blocks, where prompt and image tokens have their own
//! projection matrices but attend jointly, followed by single-stream blocks
//! that share one set of projections over the concatenated sequence.
//!
//! Toy choices (not contractual): parameter-free RMS normalisation before
//! attention and before a two-layer tanh-GELU MLP, residual connections, a
//! sinusoidal noise-level embedding added to image tokens, and a final
//! linear read-out of image tokens to latent channels. Weights are Gaussian
//! with variance `1/fan_in`, drawn from ChaCha20 seeded with `weight_seed`,
//! and are never trained.

pub mod attention;
pub mod embed;
pub mod rope;
mod weights;

use ndarray::{concatenate, s, Axis};
use serde::{Deserialize, Serialize};

pub use attention::{
    baseline_attention, weighted_attention, AttentionOutput, AttentionState, HeadOutput,
    HeadState, Matrix,
};
pub use embed::{embed_prompt, TokenSequence};
pub use rope::{PositionalOffset, RopeConfig, TokenPosition};
pub use weights::{BlockWeights, Projections, TensorEntry, WeightManifest, Weights};

use crate::error::{Error, Result};
use crate::extended::AttentionWeights;
use crate::flow::{Latent, Schedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub dim: usize,
    pub head_dim: usize,
    pub num_heads: usize,
    pub num_multi_stream_blocks: usize,
    pub num_single_stream_blocks: usize,
    /// `(height, width)` of the image token grid.
    pub image_grid: (usize, usize),
    pub max_prompt_len: usize,
    pub latent_channels: usize,
    pub weight_seed: u64,
    /// Replace the read-out projection with zeros.
    pub zero_output: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            head_dim: 16,
            num_heads: 4,
            num_multi_stream_blocks: 2,
            num_single_stream_blocks: 2,
            image_grid: (16, 16),
            max_prompt_len: 16,
            latent_channels: 4,
            weight_seed: 0,
            zero_output: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim != self.num_heads * self.head_dim {
            return Err(Error::Config(format!(
                "dim {} must equal num_heads {} x head_dim {}",
                self.dim, self.num_heads, self.head_dim
            )));
        }
        if self.num_heads == 0 || self.latent_channels == 0 || self.max_prompt_len == 0 {
            return Err(Error::Config("sizes must be positive".into()));
        }
        if self.image_grid.0 == 0 || self.image_grid.1 == 0 {
            return Err(Error::Config("image grid must be non-empty".into()));
        }
        if self.num_multi_stream_blocks + self.num_single_stream_blocks == 0 {
            return Err(Error::Config("model needs at least one block".into()));
        }
        RopeConfig::for_head_dim(self.head_dim)?;
        Ok(())
    }

    pub fn num_blocks(&self) -> usize {
        self.num_multi_stream_blocks + self.num_single_stream_blocks
    }

    pub fn block_kind(&self, block: usize) -> BlockKind {
        if block < self.num_multi_stream_blocks {
            BlockKind::MultiStream
        } else {
            BlockKind::SingleStream
        }
    }

    pub fn num_image_tokens(&self) -> usize {
        self.image_grid.0 * self.image_grid.1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    MultiStream,
    SingleStream,
}

/// Which block kinds draw keys and values from the source stream.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ExtensionGate {
    pub multi_stream: bool,
    pub single_stream: bool,
}

impl ExtensionGate {
    pub fn allows(&self, kind: BlockKind) -> bool {
        match kind {
            BlockKind::MultiStream => self.multi_stream,
            BlockKind::SingleStream => self.single_stream,
        }
    }

    pub fn any(&self) -> bool {
        self.multi_stream || self.single_stream
    }
}

/// Post-rotary image keys and values of one stream, `[block][head]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SourceCapture {
    pub blocks: Vec<Vec<(Matrix, Matrix)>>,
}

#[derive(Clone, Copy, Debug)]
pub struct Extension<'a> {
    pub source: &'a SourceCapture,
    pub weights: AttentionWeights,
    pub gate: ExtensionGate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockInfo {
    pub step: usize,
    pub label: u32,
    pub block: usize,
    pub kind: BlockKind,
    pub extended: bool,
}

/// Receives every block's attention during a forward pass.
pub trait AttentionRecorder {
    fn record(&mut self, info: &BlockInfo, state: &AttentionState, output: &AttentionOutput);
}

#[derive(Default)]
pub struct ForwardOptions<'a> {
    pub pos_offset: PositionalOffset,
    pub extension: Option<Extension<'a>>,
    pub capture: bool,
    pub recorder: Option<&'a mut dyn AttentionRecorder>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub velocity: Latent,
    pub capture: Option<SourceCapture>,
}

/// Pre-rotary projections of one head, used by the positional-shift probe.
#[derive(Clone, Debug, PartialEq)]
pub struct RawProjections {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
}

#[derive(Clone, Debug)]
pub struct ToyMmdit {
    config: ModelConfig,
    rope: RopeConfig,
    weights: Weights,
}

fn rms_norm(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
        let inv = 1.0 / (ms + 1e-6).sqrt();
        row.mapv_inplace(|v| v * inv);
    }
    out
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (0.797_884_560_802_865_4 * (x + 0.044715 * x * x * x)).tanh())
}

fn time_features(sigma: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let t = sigma * 1000.0;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (t * freq).cos();
        out[half + i] = (t * freq).sin();
    }
    out
}

struct StreamTokens {
    prompt: Matrix,
    image: Matrix,
}

impl ToyMmdit {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let rope = RopeConfig::for_head_dim(config.head_dim)?;
        let weights = Weights::init(&config);
        Ok(Self {
            config,
            rope,
            weights,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn rope(&self) -> &RopeConfig {
        &self.rope
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    fn check_inputs(&self, x: &Latent, prompt: &TokenSequence) -> Result<()> {
        let (h, w) = self.config.image_grid;
        if x.height != h || x.width != w || x.dim != self.config.latent_channels {
            return Err(Error::ShapeMismatch(format!(
                "latent {:?} does not match model grid {}x{}x{}",
                x.shape(),
                h,
                w,
                self.config.latent_channels
            )));
        }
        if prompt.is_empty() || prompt.len() > self.config.max_prompt_len {
            return Err(Error::InvalidInput(format!(
                "prompt length {} outside 1..={}",
                prompt.len(),
                self.config.max_prompt_len
            )));
        }
        if prompt.embeddings.ncols() != self.config.dim {
            return Err(Error::ShapeMismatch("prompt embedding width".into()));
        }
        x.ensure_finite("latent")
    }

    fn embed(&self, x: &Latent, prompt: &TokenSequence, sigma: f64) -> StreamTokens {
        let w = &self.weights;
        let tokens = Matrix::from_shape_vec((x.num_tokens(), x.dim), x.data.clone())
            .expect("latent layout is token-major");
        let mut image = tokens.dot(&w.image_in);
        let feats = Matrix::from_shape_vec((1, self.config.dim), time_features(sigma, self.config.dim))
            .expect("time feature width");
        let temb = feats.dot(&w.time_in);
        image += &temb.row(0);
        let prompt = prompt.embeddings.dot(&w.text_in);
        StreamTokens { prompt, image }
    }

    fn head_slice(&self, m: &Matrix, head: usize) -> Matrix {
        let d = self.config.head_dim;
        m.slice(s![.., head * d..(head + 1) * d]).to_owned()
    }

    /// Pre-rotary per-head projections of one block.
    fn project(&self, block: usize, tokens: &StreamTokens) -> (Vec<RawProjections>, Vec<RawProjections>) {
        let n_p = tokens.prompt.nrows();
        let (qp, kp, vp, qi, ki, vi) = match &self.weights.blocks[block] {
            BlockWeights::MultiStream { text, image } => {
                let tn = rms_norm(&tokens.prompt);
                let inn = rms_norm(&tokens.image);
                (
                    tn.dot(&text.wq),
                    tn.dot(&text.wk),
                    tn.dot(&text.wv),
                    inn.dot(&image.wq),
                    inn.dot(&image.wk),
                    inn.dot(&image.wv),
                )
            }
            BlockWeights::SingleStream { shared } => {
                let joint = concatenate(Axis(0), &[tokens.prompt.view(), tokens.image.view()])
                    .expect("prompt and image share width");
                let xn = rms_norm(&joint);
                let q = xn.dot(&shared.wq);
                let k = xn.dot(&shared.wk);
                let v = xn.dot(&shared.wv);
                let split = |m: &Matrix| {
                    (
                        m.slice(s![..n_p, ..]).to_owned(),
                        m.slice(s![n_p.., ..]).to_owned(),
                    )
                };
                let (qp, qi) = split(&q);
                let (kp, ki) = split(&k);
                let (vp, vi) = split(&v);
                (qp, kp, vp, qi, ki, vi)
            }
        };
        let heads = |q: &Matrix, k: &Matrix, v: &Matrix| {
            (0..self.config.num_heads)
                .map(|h| RawProjections {
                    q: self.head_slice(q, h),
                    k: self.head_slice(k, h),
                    v: self.head_slice(v, h),
                })
                .collect::<Vec<_>>()
        };
        (heads(&qp, &kp, &vp), heads(&qi, &ki, &vi))
    }

    fn rotate(&self, raw: &RawProjections, positions: &[TokenPosition]) -> (Matrix, Matrix, Matrix) {
        let mut q = raw.q.clone();
        let mut k = raw.k.clone();
        self.rope.apply(&mut q, positions);
        self.rope.apply(&mut k, positions);
        (q, k, raw.v.clone())
    }

    fn merge_heads(&self, out: &AttentionOutput) -> Matrix {
        let views: Vec<_> = out.heads.iter().map(|h| h.hidden.view()).collect();
        concatenate(Axis(1), &views).expect("heads share row count")
    }

    fn mlp(p: &Projections, x: &Matrix) -> Matrix {
        rms_norm(x).dot(&p.mlp_in).mapv(gelu).dot(&p.mlp_out)
    }

    /// Predicts the flow velocity for `x` at schedule step `step`.
    pub fn forward(
        &self,
        x: &Latent,
        prompt: &TokenSequence,
        schedule: &Schedule,
        step: usize,
        mut opts: ForwardOptions<'_>,
    ) -> Result<ForwardOutput> {
        self.check_inputs(x, prompt)?;
        let sigma = schedule.sigma(step)?;
        let label = schedule.label(step)?;
        if let Some(ext) = &opts.extension {
            ext.weights.validate()?;
            if ext.source.blocks.len() != self.config.num_blocks() {
                return Err(Error::ShapeMismatch(format!(
                    "source capture has {} blocks, model has {}",
                    ext.source.blocks.len(),
                    self.config.num_blocks()
                )));
            }
        }
        let (h, w) = self.config.image_grid;
        let text_pos = rope::text_positions(prompt.len());
        let image_pos = opts.pos_offset.grid_positions(h, w);
        let n_p = prompt.len();

        let mut tokens = self.embed(x, prompt, sigma);
        let mut capture = opts.capture.then(SourceCapture::default);

        for block in 0..self.config.num_blocks() {
            let kind = self.config.block_kind(block);
            let (raw_p, raw_i) = self.project(block, &tokens);
            let ext = opts
                .extension
                .as_ref()
                .filter(|e| e.gate.allows(kind));
            let mut heads = Vec::with_capacity(self.config.num_heads);
            let mut captured = Vec::new();
            for head in 0..self.config.num_heads {
                let (q_prompt, k_prompt, v_prompt) = self.rotate(&raw_p[head], &text_pos);
                let (q_target, k_target, v_target) = self.rotate(&raw_i[head], &image_pos);
                if capture.is_some() {
                    captured.push((k_target.clone(), v_target.clone()));
                }
                let (k_source, v_source) = match ext {
                    Some(e) => {
                        let (k, v) = e.source.blocks[block].get(head).ok_or_else(|| {
                            Error::ShapeMismatch("source capture is missing a head".into())
                        })?;
                        (Some(k.clone()), Some(v.clone()))
                    }
                    None => (None, None),
                };
                heads.push(HeadState {
                    q_prompt,
                    q_target,
                    k_prompt,
                    k_target,
                    v_prompt,
                    v_target,
                    k_source,
                    v_source,
                });
            }
            if let Some(c) = capture.as_mut() {
                c.blocks.push(captured);
            }
            let state = AttentionState { heads };
            let weights = ext.map_or(AttentionWeights::UNIT, |e| e.weights);
            let out = weighted_attention(&state, &weights)?;
            if let Some(rec) = opts.recorder.as_deref_mut() {
                let info = BlockInfo {
                    step,
                    label,
                    block,
                    kind,
                    extended: ext.is_some(),
                };
                rec.record(&info, &state, &out);
            }
            let merged = self.merge_heads(&out);
            let merged_p = merged.slice(s![..n_p, ..]);
            let merged_i = merged.slice(s![n_p.., ..]);
            match &self.weights.blocks[block] {
                BlockWeights::MultiStream { text, image } => {
                    tokens.prompt += &merged_p.dot(&text.wo);
                    tokens.image += &merged_i.dot(&image.wo);
                    let dp = Self::mlp(text, &tokens.prompt);
                    let di = Self::mlp(image, &tokens.image);
                    tokens.prompt += &dp;
                    tokens.image += &di;
                }
                BlockWeights::SingleStream { shared } => {
                    let mut joint =
                        concatenate(Axis(0), &[tokens.prompt.view(), tokens.image.view()])
                            .expect("prompt and image share width");
                    joint += &merged.dot(&shared.wo);
                    let d = Self::mlp(shared, &joint);
                    joint += &d;
                    tokens.prompt = joint.slice(s![..n_p, ..]).to_owned();
                    tokens.image = joint.slice(s![n_p.., ..]).to_owned();
                }
            }
        }

        let out = rms_norm(&tokens.image).dot(&self.weights.image_out);
        let velocity = Latent {
            height: h,
            width: w,
            dim: self.config.latent_channels,
            time_label: label,
            data: out.into_raw_vec_and_offset().0,
        };
        velocity.ensure_finite("velocity")?;
        Ok(ForwardOutput { velocity, capture })
    }

    /// Velocity with plain (non-extended) attention.
    pub fn forward_velocity(
        &self,
        x: &Latent,
        prompt: &TokenSequence,
        schedule: &Schedule,
        step: usize,
        recorder: Option<&mut dyn AttentionRecorder>,
    ) -> Result<Latent> {
        let opts = ForwardOptions {
            recorder,
            ..Default::default()
        };
        Ok(self.forward(x, prompt, schedule, step, opts)?.velocity)
    }

    /// Pre-rotary projections of the first block for a stream:
    /// `(prompt heads, image heads)`.
    pub fn first_block_projections(
        &self,
        x: &Latent,
        prompt: &TokenSequence,
        schedule: &Schedule,
        step: usize,
    ) -> Result<(Vec<RawProjections>, Vec<RawProjections>)> {
        self.check_inputs(x, prompt)?;
        let tokens = self.embed(x, prompt, schedule.sigma(step)?);
        Ok(self.project(0, &tokens))
    }

    /// Attention sub-layer of a multi-stream block (normalisation,
    /// projections, rotary encoding, joint attention, output projection),
    /// without residuals. Returns `(prompt_out, image_out)`.
    pub fn attention_sublayer(
        &self,
        block: usize,
        prompt: &Matrix,
        image: &Matrix,
    ) -> Result<(Matrix, Matrix)> {
        let (text, img) = self.multi_stream_weights(block)?;
        let tokens = StreamTokens {
            prompt: prompt.clone(),
            image: image.clone(),
        };
        let (raw_p, raw_i) = self.project(block, &tokens);
        let (text_pos, image_pos) = self.sublayer_positions(prompt.nrows());
        let heads = (0..self.config.num_heads)
            .map(|h| {
                let (q_prompt, k_prompt, v_prompt) = self.rotate(&raw_p[h], &text_pos);
                let (q_target, k_target, v_target) = self.rotate(&raw_i[h], &image_pos);
                HeadState {
                    q_prompt,
                    q_target,
                    k_prompt,
                    k_target,
                    v_prompt,
                    v_target,
                    k_source: None,
                    v_source: None,
                }
            })
            .collect();
        let out = baseline_attention(&AttentionState { heads })?;
        let merged = self.merge_heads(&out);
        let n_p = prompt.nrows();
        Ok((
            merged.slice(s![..n_p, ..]).dot(&text.wo),
            merged.slice(s![n_p.., ..]).dot(&img.wo),
        ))
    }

    /// Forward-mode derivative of [`Self::attention_sublayer`] along the
    /// tangent `(d_prompt, d_image)`.
    pub fn attention_sublayer_jvp(
        &self,
        block: usize,
        prompt: &Matrix,
        image: &Matrix,
        d_prompt: &Matrix,
        d_image: &Matrix,
    ) -> Result<(Matrix, Matrix)> {
        let (text, img) = self.multi_stream_weights(block)?;
        let n_p = prompt.nrows();
        let (text_pos, image_pos) = self.sublayer_positions(n_p);
        let (np_, dnp) = rms_norm_jvp(prompt, d_prompt);
        let (ni, dni) = rms_norm_jvp(image, d_image);

        let lin = |x: &Matrix, dx: &Matrix, wt: &Matrix| (x.dot(wt), dx.dot(wt));
        let (qp, dqp) = lin(&np_, &dnp, &text.wq);
        let (kp, dkp) = lin(&np_, &dnp, &text.wk);
        let (vp, dvp) = lin(&np_, &dnp, &text.wv);
        let (qi, dqi) = lin(&ni, &dni, &img.wq);
        let (ki, dki) = lin(&ni, &dni, &img.wk);
        let (vi, dvi) = lin(&ni, &dni, &img.wv);

        let cat = |a: &Matrix, b: &Matrix| concatenate(Axis(0), &[a.view(), b.view()]).expect("width");
        let mut positions = text_pos.clone();
        positions.extend_from_slice(&image_pos);

        let mut d_heads = Vec::with_capacity(self.config.num_heads);
        let scale = 1.0 / (self.config.head_dim as f64).sqrt();
        for h in 0..self.config.num_heads {
            let hs = |m: &Matrix| self.head_slice(m, h);
            let mut q = cat(&hs(&qp), &hs(&qi));
            let mut dq = cat(&hs(&dqp), &hs(&dqi));
            let mut k = cat(&hs(&kp), &hs(&ki));
            let mut dk = cat(&hs(&dkp), &hs(&dki));
            let v = cat(&hs(&vp), &hs(&vi));
            let dv = cat(&hs(&dvp), &hs(&dvi));
            for m in [&mut q, &mut dq, &mut k, &mut dk] {
                self.rope.apply(m, &positions);
            }
            let logits = q.dot(&k.t()) * scale;
            let d_logits = (dq.dot(&k.t()) + q.dot(&dk.t())) * scale;
            let mut a = logits.clone();
            for mut row in a.rows_mut() {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                row.mapv_inplace(|l| (l - max).exp());
                let z = row.sum();
                row /= z;
            }
            let mut da = &a * &d_logits;
            for (mut row, arow) in da.rows_mut().into_iter().zip(a.rows()) {
                let mean = row.sum();
                for (dv_, av) in row.iter_mut().zip(arow.iter()) {
                    *dv_ -= av * mean;
                }
            }
            d_heads.push(da.dot(&v) + a.dot(&dv));
        }
        let views: Vec<_> = d_heads.iter().map(|m| m.view()).collect();
        let merged = concatenate(Axis(1), &views).expect("heads share rows");
        Ok((
            merged.slice(s![..n_p, ..]).dot(&text.wo),
            merged.slice(s![n_p.., ..]).dot(&img.wo),
        ))
    }

    fn multi_stream_weights(&self, block: usize) -> Result<(&Projections, &Projections)> {
        match self.weights.blocks.get(block) {
            Some(BlockWeights::MultiStream { text, image }) => Ok((text, image)),
            _ => Err(Error::InvalidInput(format!(
                "block {block} is not a multi-stream block"
            ))),
        }
    }

    fn sublayer_positions(&self, n_prompt: usize) -> (Vec<TokenPosition>, Vec<TokenPosition>) {
        let (h, w) = self.config.image_grid;
        (
            rope::text_positions(n_prompt),
            PositionalOffset::ZERO.grid_positions(h, w),
        )
    }
}

fn rms_norm_jvp(x: &Matrix, dx: &Matrix) -> (Matrix, Matrix) {
    let mut y = x.clone();
    let mut dy = dx.clone();
    let n = x.ncols() as f64;
    for ((xr, dxr), (mut yr, mut dyr)) in x
        .rows()
        .into_iter()
        .zip(dx.rows())
        .zip(y.rows_mut().into_iter().zip(dy.rows_mut()))
    {
        let ms = xr.iter().map(|v| v * v).sum::<f64>() / n;
        let r = (ms + 1e-6).sqrt();
        let dr = xr.dot(&dxr) / (n * r);
        for j in 0..xr.len() {
            yr[j] = xr[j] / r;
            dyr[j] = dxr[j] / r - xr[j] * dr / (r * r);
        }
    }
    (y, dy)
}
