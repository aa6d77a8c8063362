//! The editing run: a source stream and a target stream denoised side by
//! side.
//!
//! Per target step, from high noise to low:
//!
//! 1. at the first step the target is initialised by noising the clean
//!    source to `t_struct` with the target's own noise;
//! 2. both streams are evaluated, the target with extended attention over the
//!    source keys and values in gated blocks;
//! 3. both streams take an Euler step;
//! 4. right after the `t_blend` step the subject mask is built from the
//!    recorded attention and the clean estimate, and the target is blended
//!    with the source.
//!
//! In generated mode the source stream is an ordinary sample from its seed.
//! In real mode it is re-synthesised at every step as
//! `(1 - σ_t)·X_source + σ_t·ε` with one fixed `ε`, so at `σ = 0` it is the
//! input image itself.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::blending::{
    aggregate_subject_attention, blend_latents, build_subject_mask, LayerStepSet, Mask, MaskConfig,
    PointSampling, RefineConfig, SubjectMask, SubjectRecorder,
};
use crate::error::{Error, Result};
use crate::extended::{
    attention_spread, AttentionWeights, GammaSolution, GammaSolver, SpreadRecord, SpreadRecorder,
};
use crate::flow::{
    estimate_x0, estimate_x0_exact, euler_step, noise_to, oracle_velocity, oracle_velocity_weighted,
    Latent, NoiseSample, OraclePointSet, Schedule,
};
use crate::model::{
    AttentionOutput, AttentionRecorder, AttentionState, BlockInfo, Extension, ExtensionGate,
    ForwardOptions, SourceCapture, TokenSequence, ToyMmdit,
};

pub const DEFAULT_GAMMA: f64 = 1.05;

/// How the key scales are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GammaRepr", into = "GammaRepr")]
pub enum GammaSetting {
    /// `γ_s = 1`, `γ_p = γ_t = γ`.
    Fixed(f64),
    /// Solve for γ at the first extended step.
    Auto,
    Custom(AttentionWeights),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum GammaRepr {
    Number(f64),
    Name(String),
    Custom(AttentionWeights),
}

impl TryFrom<GammaRepr> for GammaSetting {
    type Error = String;

    fn try_from(r: GammaRepr) -> std::result::Result<Self, String> {
        match r {
            GammaRepr::Number(g) => Ok(GammaSetting::Fixed(g)),
            GammaRepr::Name(s) if s == "auto" => Ok(GammaSetting::Auto),
            GammaRepr::Name(s) => Err(format!("gamma must be a number or \"auto\", got {s:?}")),
            GammaRepr::Custom(w) => Ok(GammaSetting::Custom(w)),
        }
    }
}

impl From<GammaSetting> for GammaRepr {
    fn from(g: GammaSetting) -> Self {
        match g {
            GammaSetting::Fixed(v) => GammaRepr::Number(v),
            GammaSetting::Auto => GammaRepr::Name("auto".into()),
            GammaSetting::Custom(w) => GammaRepr::Custom(w),
        }
    }
}

impl std::str::FromStr for GammaSetting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(GammaSetting::Auto);
        }
        s.parse::<f64>()
            .map(GammaSetting::Fixed)
            .map_err(|_| Error::Config(format!("gamma must be a number or \"auto\", got {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Generated,
    Real,
}

/// Labels down to which extended attention stays on, per block kind.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtensionSchedule {
    pub multi_stream_until: u32,
    pub single_stream_until: u32,
    #[serde(default = "enabled")]
    pub enabled: bool,
}

fn enabled() -> bool {
    true
}

impl Default for ExtensionSchedule {
    fn default() -> Self {
        Self {
            multi_stream_until: 670,
            single_stream_until: 340,
            enabled: true,
        }
    }
}

impl ExtensionSchedule {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    /// Which block kinds are extended at time label `label`.
    pub fn gate(&self, label: u32) -> ExtensionGate {
        ExtensionGate {
            multi_stream: self.enabled && label >= self.multi_stream_until,
            single_stream: self.enabled && label >= self.single_stream_until,
        }
    }
}

/// Replaces the attention-derived mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskOverride {
    /// Keep the source everywhere.
    Zeros,
    /// Keep the target everywhere.
    Ones,
}

/// Which clean-image estimate feeds mask refinement.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum X0Estimate {
    /// One Euler step, `x_t + (σ_{t+1} - σ_t)·v`.
    #[default]
    Euler,
    /// `x_t - σ_t·v`.
    Exact,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskSettings {
    pub otsu_bins: usize,
    pub max_points: usize,
    pub stop_ratio: f64,
    /// Defaults to `ceil(max(h, w) / 8)`.
    pub exclusion_radius: Option<f64>,
    pub tolerance_factor: f64,
    /// Steps before the blend step whose attention is also aggregated.
    pub extra_steps: usize,
}

impl Default for MaskSettings {
    fn default() -> Self {
        Self {
            otsu_bins: 64,
            max_points: 4,
            stop_ratio: 0.35,
            exclusion_radius: None,
            tolerance_factor: 0.2,
            extra_steps: 2,
        }
    }
}

impl MaskSettings {
    pub fn mask_config(&self, height: usize, width: usize) -> MaskConfig {
        let grid = PointSampling::for_grid(height, width);
        MaskConfig {
            otsu_bins: self.otsu_bins,
            sampling: PointSampling {
                max_points: self.max_points,
                stop_ratio: self.stop_ratio,
                exclusion_radius: self.exclusion_radius.unwrap_or(grid.exclusion_radius),
            },
            refine: RefineConfig {
                tolerance_factor: self.tolerance_factor,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub mode: Mode,
    pub num_steps: usize,
    /// Shift of the σ schedule; `None` is linear.
    pub schedule_shift: Option<f64>,
    /// `None` starts the target from pure noise.
    pub t_struct: Option<u32>,
    /// `None` disables blending.
    pub t_blend: Option<u32>,
    /// Blend after every step from `t_blend` on.
    pub blend_every_step: bool,
    pub mask_override: Option<MaskOverride>,
    pub extension: ExtensionSchedule,
    pub gamma: GammaSetting,
    pub source_seed: Option<u64>,
    pub target_seed: u64,
    pub x0_estimate: X0Estimate,
    pub mask: MaskSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Generated,
            num_steps: 30,
            schedule_shift: None,
            t_struct: Some(933),
            t_blend: Some(500),
            blend_every_step: false,
            mask_override: None,
            extension: ExtensionSchedule::default(),
            gamma: GammaSetting::Fixed(DEFAULT_GAMMA),
            source_seed: Some(0),
            target_seed: 1,
            x0_estimate: X0Estimate::Euler,
            mask: MaskSettings::default(),
        }
    }
}

impl PipelineConfig {
    /// Defaults for editing a given image.
    pub fn real() -> Self {
        Self {
            mode: Mode::Real,
            t_struct: Some(867),
            ..Self::default()
        }
    }

    pub fn schedule(&self) -> Result<Schedule> {
        match self.schedule_shift {
            None => Schedule::linear(self.num_steps),
            Some(s) => Schedule::shifted(self.num_steps, s),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_steps == 0 {
            return Err(Error::Config("num_steps must be positive".into()));
        }
        for (name, t) in [
            ("t_struct", self.t_struct),
            ("t_blend", self.t_blend),
            ("multi_stream_until", Some(self.extension.multi_stream_until)),
            ("single_stream_until", Some(self.extension.single_stream_until)),
        ] {
            if let Some(t) = t {
                if t > 1000 {
                    return Err(Error::Config(format!("{name} = {t} is outside [0, 1000]")));
                }
            }
        }
        if self.extension.multi_stream_until < self.extension.single_stream_until {
            return Err(Error::Config(
                "multi_stream_until must not be below single_stream_until".into(),
            ));
        }
        match self.gamma {
            GammaSetting::Fixed(g) => AttentionWeights::balanced(g).validate()?,
            GammaSetting::Custom(w) => w.validate()?,
            GammaSetting::Auto => {}
        }
        if self.mode == Mode::Generated && self.source_seed.is_none() {
            return Err(Error::Config("generated mode needs a source seed".into()));
        }
        let sched = self.schedule()?;
        if let Some(t) = self.t_blend {
            if sched.index_of(t)? >= sched.terminal_step() {
                return Err(Error::Config(format!("t_blend = {t} maps to the terminal step")));
            }
        }
        Ok(())
    }

    /// First target step: the `t_struct` index, or 0 without structure
    /// transfer.
    pub fn start_step(&self, sched: &Schedule) -> Result<usize> {
        match self.t_struct {
            Some(t) => {
                let k = sched.index_of(t)?;
                if k >= sched.terminal_step() {
                    return Err(Error::Config(format!("t_struct = {t} maps to the terminal step")));
                }
                Ok(k)
            }
            None => Ok(0),
        }
    }
}

/// One edit: the source (a seed or an image), the prompts and the config.
#[derive(Clone, Debug, Serialize)]
pub struct EditRequest {
    pub source_prompt: TokenSequence,
    pub target_prompt: TokenSequence,
    /// Clean source latent, required in real mode.
    #[serde(skip)]
    pub source_image: Option<Latent>,
    pub config: PipelineConfig,
}

impl EditRequest {
    pub fn validate(&self, shape: (usize, usize, usize)) -> Result<()> {
        self.config.validate()?;
        match (self.config.mode, &self.source_image) {
            (Mode::Real, None) => Err(Error::Config("real mode needs a source image".into())),
            (Mode::Real, Some(img)) => {
                img.ensure_finite("source image")?;
                if img.shape() != shape {
                    return Err(Error::ShapeMismatch(format!(
                        "source image {:?} vs model latent {:?}",
                        img.shape(),
                        shape
                    )));
                }
                Ok(())
            }
            (Mode::Generated, _) => Ok(()),
        }
    }
}

/// One row of the per-step trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub label: u32,
    pub sigma: f64,
    pub extended_multi: bool,
    pub extended_single: bool,
    pub blended: bool,
    /// Distance between target and source after the step.
    pub distance: f64,
}

pub fn write_trace_csv(rows: &[TraceRow], out: &mut impl Write) -> Result<()> {
    writeln!(out, "step,label,sigma,extended_multi,extended_single,blended,distance")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{:.6},{},{},{},{:.12}",
            r.step,
            r.label,
            r.sigma,
            r.extended_multi as u8,
            r.extended_single as u8,
            r.blended as u8,
            r.distance
        )?;
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct EditResult {
    #[serde(skip)]
    pub output: Latent,
    /// Source stream at `σ = 0`.
    #[serde(skip)]
    pub source: Latent,
    pub weights: AttentionWeights,
    pub solved_gamma: Option<GammaSolution>,
    pub start_step: usize,
    pub blend_step: Option<usize>,
    pub mask: Option<SubjectMask>,
    /// Mask actually applied, after any override.
    pub applied_mask: Option<Mask>,
    pub spread: Vec<SpreadRecord>,
    pub trace: Vec<TraceRow>,
    pub warnings: Vec<String>,
}

/// Velocity source for both streams.
pub trait VelocityBackend {
    /// `(height, width, channels)` of the latents.
    fn latent_shape(&self) -> (usize, usize, usize);

    /// Source-stream velocity, plus the stream's keys and values when
    /// `capture` is set.
    fn source_forward(
        &self,
        x: &Latent,
        prompt: &TokenSequence,
        sched: &Schedule,
        step: usize,
        capture: bool,
    ) -> Result<(Latent, Option<SourceCapture>)>;

    fn target_forward<'a>(
        &self,
        x: &Latent,
        prompt: &TokenSequence,
        sched: &Schedule,
        step: usize,
        extension: Option<Extension<'a>>,
        recorder: Option<&'a mut dyn AttentionRecorder>,
    ) -> Result<Latent>;

    /// State whose prompt-query balance defines the automatic γ.
    fn balance_state(
        &self,
        x: &Latent,
        prompt: &TokenSequence,
        sched: &Schedule,
        step: usize,
        source: &SourceCapture,
    ) -> Result<AttentionState>;
}

struct FirstBlock(Option<AttentionState>);

impl AttentionRecorder for FirstBlock {
    fn record(&mut self, info: &BlockInfo, state: &AttentionState, _output: &AttentionOutput) {
        if info.block == 0 && info.extended {
            self.0 = Some(state.clone());
        }
    }
}

impl VelocityBackend for ToyMmdit {
    fn latent_shape(&self) -> (usize, usize, usize) {
        let c = self.config();
        (c.image_grid.0, c.image_grid.1, c.latent_channels)
    }

    fn source_forward(
        &self,
        x: &Latent,
        prompt: &TokenSequence,
        sched: &Schedule,
        step: usize,
        capture: bool,
    ) -> Result<(Latent, Option<SourceCapture>)> {
        let out = self.forward(
            x,
            prompt,
            sched,
            step,
            ForwardOptions {
                capture,
                ..Default::default()
            },
        )?;
        Ok((out.velocity, out.capture))
    }

    fn target_forward<'a>(
        &self,
        x: &Latent,
        prompt: &TokenSequence,
        sched: &Schedule,
        step: usize,
        extension: Option<Extension<'a>>,
        recorder: Option<&'a mut dyn AttentionRecorder>,
    ) -> Result<Latent> {
        let opts = ForwardOptions {
            extension,
            recorder,
            ..Default::default()
        };
        Ok(self.forward(x, prompt, sched, step, opts)?.velocity)
    }

    fn balance_state(
        &self,
        x: &Latent,
        prompt: &TokenSequence,
        sched: &Schedule,
        step: usize,
        source: &SourceCapture,
    ) -> Result<AttentionState> {
        let mut rec = FirstBlock(None);
        let ext = Extension {
            source,
            weights: AttentionWeights::UNIT,
            gate: ExtensionGate {
                multi_stream: true,
                single_stream: true,
            },
        };
        self.target_forward(x, prompt, sched, step, Some(ext), Some(&mut rec))?;
        rec.0.ok_or_else(|| Error::Degenerate("first block produced no extended state".into()))
    }
}

/// Ties the target data prior to the attention balance: while extension is
/// active, data points flagged as containing the object get prior mass
/// `τ / (τ + s)` where `s` is the probe's source share under the current
/// key scales.
#[derive(Clone, Debug)]
pub struct OracleCoupling {
    pub probe: AttentionState,
    pub object_points: Vec<bool>,
    pub tau: f64,
}

impl OracleCoupling {
    pub fn object_prior(&self, weights: &AttentionWeights) -> Result<f64> {
        let s = attention_spread(&self.probe, weights)?.source;
        Ok(self.tau / (self.tau + s))
    }

    pub fn log_priors(&self, weights: &AttentionWeights) -> Result<Vec<f64>> {
        let p = self.object_prior(weights)?;
        let n_obj = self.object_points.iter().filter(|o| **o).count() as f64;
        let n_bg = self.object_points.len() as f64 - n_obj;
        Ok(self
            .object_points
            .iter()
            .map(|&o| if o { (p / n_obj).ln() } else { ((1.0 - p) / n_bg).ln() })
            .collect())
    }
}

/// Closed-form velocities toward finite point sets, one per stream.
#[derive(Clone, Debug)]
pub struct OracleBackend {
    pub source_data: OraclePointSet,
    pub target_data: OraclePointSet,
    pub coupling: Option<OracleCoupling>,
}

impl OracleBackend {
    pub fn new(source_data: OraclePointSet, target_data: OraclePointSet) -> Result<Self> {
        source_data.points()[0].ensure_same_shape(&target_data.points()[0], "oracle datasets")?;
        Ok(Self {
            source_data,
            target_data,
            coupling: None,
        })
    }

    pub fn with_coupling(mut self, coupling: OracleCoupling) -> Result<Self> {
        if coupling.object_points.len() != self.target_data.len() {
            return Err(Error::InvalidInput(
                "coupling flags must cover every target point".into(),
            ));
        }
        let n_obj = coupling.object_points.iter().filter(|o| **o).count();
        if n_obj == 0 || n_obj == coupling.object_points.len() {
            return Err(Error::InvalidInput(
                "coupling needs both object and background points".into(),
            ));
        }
        if !(coupling.tau > 0.0) {
            return Err(Error::InvalidInput("coupling tau must be positive".into()));
        }
        coupling.probe.validate()?;
        if !coupling.probe.has_source() {
            return Err(Error::MissingSource);
        }
        self.coupling = Some(coupling);
        Ok(self)
    }
}

impl VelocityBackend for OracleBackend {
    fn latent_shape(&self) -> (usize, usize, usize) {
        self.source_data.points()[0].shape()
    }

    fn source_forward(
        &self,
        x: &Latent,
        _prompt: &TokenSequence,
        sched: &Schedule,
        step: usize,
        capture: bool,
    ) -> Result<(Latent, Option<SourceCapture>)> {
        let v = oracle_velocity(x, sched, step, &self.source_data)?;
        Ok((v, capture.then(SourceCapture::default)))
    }

    fn target_forward<'a>(
        &self,
        x: &Latent,
        _prompt: &TokenSequence,
        sched: &Schedule,
        step: usize,
        extension: Option<Extension<'a>>,
        _recorder: Option<&'a mut dyn AttentionRecorder>,
    ) -> Result<Latent> {
        match (&self.coupling, extension) {
            (Some(c), Some(ext)) => {
                let priors = c.log_priors(&ext.weights)?;
                oracle_velocity_weighted(x, sched, step, &self.target_data, Some(&priors))
            }
            _ => oracle_velocity(x, sched, step, &self.target_data),
        }
    }

    fn balance_state(
        &self,
        _x: &Latent,
        _prompt: &TokenSequence,
        _sched: &Schedule,
        _step: usize,
        _source: &SourceCapture,
    ) -> Result<AttentionState> {
        self.coupling
            .as_ref()
            .map(|c| c.probe.clone())
            .ok_or_else(|| Error::Config("automatic gamma needs an attention probe".into()))
    }
}

/// The source stream at `step` in real mode: the clean image noised with
/// the run's fixed `ε`.
pub fn run_real_mode_step(source_clean: &Latent, eps: &NoiseSample, sched: &Schedule, step: usize) -> Result<Latent> {
    noise_to(source_clean, eps, sched, step)
}

struct StepRecorder<'a> {
    spread: &'a mut SpreadRecorder,
    subject: Option<&'a mut SubjectRecorder>,
}

impl AttentionRecorder for StepRecorder<'_> {
    fn record(&mut self, info: &BlockInfo, state: &AttentionState, output: &AttentionOutput) {
        if info.extended {
            self.spread.record(info, state, output);
        }
        if let Some(s) = self.subject.as_deref_mut() {
            s.record(info, state, output);
        }
    }
}

/// Source stream for every step: latents and, where extension is active,
/// captured keys and values.
struct SourceStream {
    latents: Vec<Latent>,
    captures: Vec<Option<SourceCapture>>,
}

fn source_stream(
    backend: &dyn VelocityBackend,
    req: &EditRequest,
    sched: &Schedule,
) -> Result<SourceStream> {
    let cfg = &req.config;
    let (h, w, d) = backend.latent_shape();
    let n = sched.num_steps();
    let mut latents = Vec::with_capacity(n + 1);
    let mut captures = Vec::with_capacity(n);
    match cfg.mode {
        Mode::Generated => {
            let seed = cfg.source_seed.expect("validated");
            let mut x = NoiseSample::new(seed, h, w, d).values;
            for k in 0..n {
                let want = cfg.extension.gate(sched.label(k)?).any();
                let (v, cap) = backend.source_forward(&x, &req.source_prompt, sched, k, want)?;
                latents.push(x.clone());
                captures.push(cap);
                x = euler_step(&x, &v, sched, k)?;
            }
            latents.push(x);
        }
        Mode::Real => {
            let clean = req.source_image.as_ref().expect("validated");
            let eps = NoiseSample::like(cfg.source_seed.unwrap_or(cfg.target_seed), clean);
            for k in 0..=n {
                let x = run_real_mode_step(clean, &eps, sched, k)?;
                let cap = if k < n && cfg.extension.gate(sched.label(k)?).any() {
                    backend.source_forward(&x, &req.source_prompt, sched, k, true)?.1
                } else {
                    None
                };
                latents.push(x);
                if k < n {
                    captures.push(cap);
                }
            }
        }
    }
    Ok(SourceStream { latents, captures })
}

/// Runs one edit.
pub fn run_edit(backend: &dyn VelocityBackend, req: &EditRequest) -> Result<EditResult> {
    req.validate(backend.latent_shape())?;
    let cfg = &req.config;
    let sched = cfg.schedule()?;
    let n = sched.num_steps();
    let (h, w, d) = backend.latent_shape();
    let mut warnings = Vec::new();

    let source = source_stream(backend, req, &sched)?;
    let start = cfg.start_step(&sched)?;
    let eps_target = NoiseSample::new(cfg.target_seed, h, w, d);
    let source_clean = source.latents[n].clone();
    let mut x = match cfg.t_struct {
        Some(_) => noise_to(&source_clean, &eps_target, &sched, start)?,
        None => eps_target.values.clone(),
    };

    let mut blend_step = match cfg.t_blend {
        Some(t) => Some(sched.index_of(t)?),
        None => None,
    };
    if let Some(b) = blend_step {
        if b < start {
            warnings.push(format!(
                "blend step {b} precedes the first target step {start}; blending skipped"
            ));
            blend_step = None;
        } else if cfg.mask_override.is_none() && req.target_prompt.subject_index.is_none() {
            warnings.push("target prompt has no subject token; blending skipped".into());
            blend_step = None;
        }
    }
    let selection = blend_step.map(|b| LayerStepSet {
        steps: (b.saturating_sub(cfg.mask.extra_steps).max(start)..=b).collect(),
        blocks: (0..64).collect(),
    });
    let mut subject = selection.map(SubjectRecorder::new);

    let mut weights = match cfg.gamma {
        GammaSetting::Fixed(g) => AttentionWeights::balanced(g),
        GammaSetting::Custom(w) => w,
        GammaSetting::Auto => AttentionWeights::UNIT,
    };
    let mut solved_gamma = None;
    let mut spread = SpreadRecorder::default();
    let mut mask: Option<SubjectMask> = None;
    let mut applied: Option<Mask> = None;
    let mut trace = Vec::with_capacity(n - start);

    for k in start..n {
        let label = sched.label(k)?;
        let gate = cfg.extension.gate(label);
        let capture = source.captures[k].as_ref().filter(|_| gate.any());
        if let (GammaSetting::Auto, None, Some(cap)) = (cfg.gamma, &solved_gamma, capture) {
            let state = backend.balance_state(&x, &req.target_prompt, &sched, k, cap)?;
            let sol = GammaSolver::default().solve(&state)?;
            weights = AttentionWeights::balanced(sol.gamma);
            solved_gamma = Some(sol);
        }
        let extension = capture.map(|c| Extension {
            source: c,
            weights,
            gate,
        });
        let mut rec = StepRecorder {
            spread: &mut spread,
            subject: subject.as_mut(),
        };
        let v = backend.target_forward(&x, &req.target_prompt, &sched, k, extension, Some(&mut rec))?;
        let mut next = euler_step(&x, &v, &sched, k)?;

        let mut blended = false;
        if blend_step == Some(k) {
            applied = match cfg.mask_override {
                Some(MaskOverride::Zeros) => Some(Mask::filled(h, w, false)),
                Some(MaskOverride::Ones) => Some(Mask::filled(h, w, true)),
                None => {
                    let records = subject.take().map(|s| s.records).unwrap_or_default();
                    if records.is_empty() {
                        warnings.push("backend recorded no attention; blending skipped".into());
                        None
                    } else {
                        let x0 = match cfg.x0_estimate {
                            X0Estimate::Euler => estimate_x0(&x, &v, &sched, k)?,
                            X0Estimate::Exact => estimate_x0_exact(&x, &v, &sched, k)?,
                        };
                        let map = aggregate_subject_attention(
                            &records,
                            req.target_prompt.subject_index,
                            (h, w),
                        )?;
                        let sm = build_subject_mask(map, &x0, &cfg.mask.mask_config(h, w))?;
                        let refined = sm.refined.clone();
                        mask = Some(sm);
                        Some(refined)
                    }
                }
            };
        }
        if let Some(m) = &applied {
            if blend_step == Some(k) || cfg.blend_every_step {
                next = blend_latents(&next, &source.latents[k + 1], m)?;
                blended = true;
            }
        }
        trace.push(TraceRow {
            step: k,
            label,
            sigma: sched.sigma(k)?,
            extended_multi: extension.is_some() && gate.multi_stream,
            extended_single: extension.is_some() && gate.single_stream,
            blended,
            distance: next.distance(&source.latents[k + 1]),
        });
        x = next;
    }

    Ok(EditResult {
        output: x.with_time_label(0),
        source: source_clean,
        weights,
        solved_gamma,
        start_step: start,
        blend_step,
        mask,
        applied_mask: applied,
        spread: spread.records,
        trace,
        warnings,
    })
}

/// Ordinary sampling: Euler integration from the noise of `seed` with plain
/// attention.
pub fn generate(
    backend: &dyn VelocityBackend,
    prompt: &TokenSequence,
    sched: &Schedule,
    seed: u64,
) -> Result<Latent> {
    let (h, w, d) = backend.latent_shape();
    let mut x = NoiseSample::new(seed, h, w, d).values;
    for k in 0..sched.num_steps() {
        let (v, _) = backend.source_forward(&x, prompt, sched, k, false)?;
        x = euler_step(&x, &v, sched, k)?;
    }
    Ok(x)
}

/// The state the automatic γ is solved on: the first target step with the
/// source keys and values of that step. `None` when extension never
/// activates.
pub fn balance_state_for(backend: &dyn VelocityBackend, req: &EditRequest) -> Result<Option<AttentionState>> {
    req.validate(backend.latent_shape())?;
    let cfg = &req.config;
    let sched = cfg.schedule()?;
    let start = cfg.start_step(&sched)?;
    if !cfg.extension.gate(sched.label(start)?).any() {
        return Ok(None);
    }
    let source = source_stream(backend, req, &sched)?;
    let (h, w, d) = backend.latent_shape();
    let eps_target = NoiseSample::new(cfg.target_seed, h, w, d);
    let x = match cfg.t_struct {
        Some(_) => noise_to(&source.latents[sched.num_steps()], &eps_target, &sched, start)?,
        None => eps_target.values,
    };
    let cap = source.captures[start].as_ref().expect("captured at extended steps");
    backend
        .balance_state(&x, &req.target_prompt, &sched, start, cap)
        .map(Some)
}

/// Request that edits `previous`'s output further with `target_prompt`.
pub fn followup_request(previous: &EditRequest, result: &EditResult, target_prompt: TokenSequence) -> EditRequest {
    EditRequest {
        source_prompt: previous.target_prompt.clone(),
        target_prompt,
        source_image: Some(result.output.clone()),
        config: PipelineConfig {
            mode: Mode::Real,
            ..previous.config.clone()
        },
    }
}

/// Runs `initial`, then each follow-up prompt on the previous output.
pub fn chain_edits(
    backend: &dyn VelocityBackend,
    initial: &EditRequest,
    followups: &[TokenSequence],
) -> Result<Vec<EditResult>> {
    let mut results = vec![run_edit(backend, initial)?];
    let mut request = initial.clone();
    for prompt in followups {
        if prompt.subject_index.is_none() {
            return Err(Error::InvalidInput(format!(
                "follow-up prompt {:?} has no subject token",
                prompt.words.join(" ")
            )));
        }
        request = followup_request(&request, results.last().expect("non-empty"), prompt.clone());
        results.push(run_edit(backend, &request)?);
    }
    Ok(results)
}
