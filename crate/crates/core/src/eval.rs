//! Affordance and inclusion metrics, benchmark records, a toy detector and
//! parameter sweeps.
//!
//! A detection is *inside* when at least half of its area falls within the
//! union of the ground-truth boxes. Affordance for one image is the share of
//! its detections that are inside; over a benchmark it is averaged across the
//! images where anything was detected. Inclusion is the share of images with
//! at least one detection scoring at or above the threshold.

use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blending::Mask;
use crate::error::{Error, Result};
use crate::flow::Latent;
use crate::model::embed::split_prompt;
use crate::model::{ModelConfig, TokenSequence};
use crate::pipeline::{run_edit, EditRequest, GammaSetting, PipelineConfig, VelocityBackend};

/// Axis-aligned box: `x` is the left column, `y` the top row.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { x, y, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if ![self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("box coordinates must be finite".into()));
        }
        if !(self.w > 0.0 && self.h > 0.0) {
            return Err(Error::InvalidInput(format!(
                "box size {}x{} must be positive",
                self.w, self.h
            )));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn intersect(&self, other: &BBox) -> Option<BBox> {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = self.right().min(other.right());
        let y1 = self.bottom().min(other.bottom());
        (x1 > x0 && y1 > y0).then(|| BBox {
            x: x0,
            y: y0,
            w: x1 - x0,
            h: y1 - y0,
        })
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox {
            x: self.x + dx,
            y: self.y + dy,
            ..*self
        }
    }

    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x >= 0.0 && self.y >= 0.0 && self.right() <= width && self.bottom() <= height
    }
}

/// Exact area of a union of rectangles by coordinate compression.
pub fn union_area(boxes: &[BBox]) -> f64 {
    if boxes.is_empty() {
        return 0.0;
    }
    let mut xs: Vec<f64> = boxes.iter().flat_map(|b| [b.x, b.right()]).collect();
    let mut ys: Vec<f64> = boxes.iter().flat_map(|b| [b.y, b.bottom()]).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    ys.sort_by(f64::total_cmp);
    ys.dedup();
    let mut area = 0.0;
    for xw in xs.windows(2) {
        for yw in ys.windows(2) {
            let (cx, cy) = ((xw[0] + xw[1]) / 2.0, (yw[0] + yw[1]) / 2.0);
            if boxes
                .iter()
                .any(|b| b.x <= cx && cx < b.right() && b.y <= cy && cy < b.bottom())
            {
                area += (xw[1] - xw[0]) * (yw[1] - yw[0]);
            }
        }
    }
    area
}

/// Area of `b` covered by the union of `gt`.
pub fn covered_area(b: &BBox, gt: &[BBox]) -> f64 {
    let parts: Vec<BBox> = gt.iter().filter_map(|g| b.intersect(g)).collect();
    union_area(&parts)
}

/// At least half of the box lies inside the union of `gt`.
pub fn is_inside(b: &BBox, gt: &[BBox]) -> bool {
    2.0 * covered_area(b, gt) >= b.area()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    pub label: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffordanceScore {
    pub score: f64,
    pub inside: usize,
    pub total: usize,
    /// False when there were no detections; `score` is then 0.
    pub detected: bool,
}

pub fn affordance_score(detections: &[Detection], gt: &[BBox]) -> AffordanceScore {
    let total = detections.len();
    let inside = detections.iter().filter(|d| is_inside(&d.bbox, gt)).count();
    AffordanceScore {
        score: if total == 0 { 0.0 } else { inside as f64 / total as f64 },
        inside,
        total,
        detected: total > 0,
    }
}

pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.5;

/// Whether any detection reaches `threshold`.
pub fn is_included(detections: &[Detection], threshold: f64) -> bool {
    detections.iter().any(|d| d.score >= threshold)
}

/// Share of images with a detection at or above `threshold`; 0 for no
/// images.
pub fn inclusion_rate(per_image: &[Vec<Detection>], threshold: f64) -> f64 {
    if per_image.is_empty() {
        return 0.0;
    }
    let hits = per_image.iter().filter(|d| is_included(d, threshold)).count();
    hits as f64 / per_image.len() as f64
}

/// Finds added objects by comparing two latents.
pub trait Detector: Sync {
    fn detect(&self, before: &Latent, after: &Latent) -> Result<Vec<Detection>>;
}

/// Thresholds the per-token change magnitude at `median + k·σ`, with σ
/// estimated as `1.4826·MAD`, and reports each 4-connected component as a
/// box. The score is the component's mean change relative to the largest
/// change anywhere.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyDetector {
    pub k: f64,
    /// Changes at or below this are never detections.
    pub min_delta: f64,
    pub min_size: usize,
    pub label: String,
}

impl Default for ToyDetector {
    fn default() -> Self {
        Self {
            k: 3.0,
            min_delta: 1e-6,
            min_size: 2,
            label: "object".into(),
        }
    }
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

impl ToyDetector {
    pub fn difference_field(before: &Latent, after: &Latent) -> Result<Vec<f64>> {
        before.ensure_same_shape(after, "detector inputs")?;
        Ok(before
            .tokens()
            .zip(after.tokens())
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (y - x) * (y - x)).sum::<f64>().sqrt())
            .collect())
    }

    pub fn threshold(&self, field: &[f64]) -> f64 {
        let mut sorted = field.to_vec();
        sorted.sort_by(f64::total_cmp);
        let med = median(&sorted);
        let mut dev: Vec<f64> = sorted.iter().map(|v| (v - med).abs()).collect();
        dev.sort_by(f64::total_cmp);
        let sigma = 1.4826 * median(&dev);
        (med + self.k * sigma).max(self.min_delta)
    }
}

impl Detector for ToyDetector {
    fn detect(&self, before: &Latent, after: &Latent) -> Result<Vec<Detection>> {
        let field = Self::difference_field(before, after)?;
        let max = field.iter().cloned().fold(0.0, f64::max);
        if max <= self.min_delta {
            return Ok(Vec::new());
        }
        let thr = self.threshold(&field);
        let mask = Mask {
            height: before.height,
            width: before.width,
            cells: field.iter().map(|d| *d > thr).collect(),
        };
        let w = before.width;
        let mut out = Vec::new();
        for comp in mask.components() {
            if comp.len() < self.min_size {
                continue;
            }
            let rows = comp.iter().map(|i| i / w);
            let cols = comp.iter().map(|i| i % w);
            let (r0, r1) = (rows.clone().min().unwrap(), rows.max().unwrap());
            let (c0, c1) = (cols.clone().min().unwrap(), cols.max().unwrap());
            let score = comp.iter().map(|&i| field[i] / max).sum::<f64>() / comp.len() as f64;
            out.push(Detection {
                bbox: BBox {
                    x: c0 as f64,
                    y: r0 as f64,
                    w: (c1 - c0 + 1) as f64,
                    h: (r1 - r0 + 1) as f64,
                },
                score,
                label: self.label.clone(),
            });
        }
        Ok(out)
    }
}

/// One benchmark entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRecord {
    pub src_prompt: String,
    pub tgt_prompt: String,
    pub subject_token: String,
    pub instruction: String,
    pub gt_boxes: Vec<BBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_image: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl BenchmarkRecord {
    pub fn validate(&self) -> std::result::Result<(), String> {
        let subject = self.subject_token.trim().to_lowercase();
        if !split_prompt(&self.tgt_prompt).contains(&subject) {
            return Err(format!(
                "subject token {:?} does not appear in tgt_prompt",
                self.subject_token
            ));
        }
        if self.gt_boxes.is_empty() {
            return Err("gt_boxes is empty".into());
        }
        for b in &self.gt_boxes {
            b.validate().map_err(|e| e.to_string())?;
        }
        Ok(())
    }
}

/// Parses a JSON list of records; errors name the offending index.
pub fn parse_benchmark(json: &str) -> Result<Vec<BenchmarkRecord>> {
    let values: Vec<serde_json::Value> = serde_json::from_str(json).map_err(|e| Error::Schema {
        index: 0,
        message: format!("expected a JSON list of records: {e}"),
    })?;
    values
        .into_iter()
        .enumerate()
        .map(|(index, v)| {
            let rec: BenchmarkRecord = serde_json::from_value(v).map_err(|e| Error::Schema {
                index,
                message: e.to_string(),
            })?;
            rec.validate().map_err(|message| Error::Schema { index, message })?;
            Ok(rec)
        })
        .collect()
}

/// Outcome for one edited image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageEval {
    pub detections: Vec<Detection>,
    pub affordance: AffordanceScore,
    pub included: bool,
}

pub fn evaluate_image(
    detector: &dyn Detector,
    before: &Latent,
    after: &Latent,
    gt: &[BBox],
    score_threshold: f64,
) -> Result<ImageEval> {
    let detections: Vec<Detection> = detector
        .detect(before, after)?
        .into_iter()
        .filter(|d| d.score >= score_threshold)
        .collect();
    Ok(ImageEval {
        affordance: affordance_score(&detections, gt),
        included: !detections.is_empty(),
        detections,
    })
}

/// `{affordance, inclusion, n}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub affordance: f64,
    pub inclusion: f64,
    pub n: usize,
}

impl EvalSummary {
    pub fn from_images(images: &[ImageEval]) -> Self {
        let detected: Vec<f64> = images
            .iter()
            .filter(|i| i.affordance.detected)
            .map(|i| i.affordance.score)
            .collect();
        let affordance = if detected.is_empty() {
            0.0
        } else {
            detected.iter().sum::<f64>() / detected.len() as f64
        };
        let inclusion = if images.is_empty() {
            0.0
        } else {
            images.iter().filter(|i| i.included).count() as f64 / images.len() as f64
        };
        Self {
            affordance,
            inclusion,
            n: images.len(),
        }
    }
}

/// Builds the edit request for a benchmark record.
pub fn record_request(
    record: &BenchmarkRecord,
    index: usize,
    model: &ModelConfig,
    base: &PipelineConfig,
) -> Result<EditRequest> {
    let seed = record.seed.unwrap_or(index as u64);
    Ok(EditRequest {
        source_prompt: TokenSequence::from_prompt(&record.src_prompt, None, model)?,
        target_prompt: TokenSequence::from_prompt(&record.tgt_prompt, Some(&record.subject_token), model)?,
        source_image: None,
        config: PipelineConfig {
            source_seed: Some(seed),
            target_seed: seed.wrapping_add(1),
            ..base.clone()
        },
    })
}

/// Requests built from benchmark records, with their ground-truth boxes.
#[derive(Clone, Debug)]
pub struct EditRequestSet {
    pub requests: Vec<EditRequest>,
    pub gt: Vec<Vec<BBox>>,
}

impl EditRequestSet {
    pub fn from_records(records: &[BenchmarkRecord], model: &ModelConfig, base: &PipelineConfig) -> Result<Self> {
        let requests = records
            .iter()
            .enumerate()
            .map(|(i, r)| record_request(r, i, model, base))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            requests,
            gt: records.iter().map(|r| r.gt_boxes.clone()).collect(),
        })
    }
}

/// Runs every request, detects against the source and scores each output.
pub fn evaluate_requests(
    backend: &(dyn VelocityBackend + Sync),
    requests: &[EditRequest],
    gt: &[Vec<BBox>],
    detector: &dyn Detector,
    score_threshold: f64,
) -> Result<Vec<ImageEval>> {
    if requests.len() != gt.len() {
        return Err(Error::InvalidInput(format!(
            "{} requests but {} ground-truth sets",
            requests.len(),
            gt.len()
        )));
    }
    requests
        .par_iter()
        .zip(gt.par_iter())
        .map(|(req, boxes)| {
            let res = run_edit(backend, req)?;
            evaluate_image(detector, &res.source, &res.output, boxes, score_threshold)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Gamma,
    TStruct,
    TBlend,
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gamma" => Ok(Self::Gamma),
            "t_struct" | "t-struct" => Ok(Self::TStruct),
            "t_blend" | "t-blend" => Ok(Self::TBlend),
            _ => Err(Error::Config(format!(
                "unknown sweep parameter {s:?}; expected gamma, t_struct or t_blend"
            ))),
        }
    }
}

impl SweepParam {
    pub fn apply(&self, config: &PipelineConfig, value: f64) -> Result<PipelineConfig> {
        let label = || -> Result<u32> {
            if !(0.0..=1000.0).contains(&value) {
                return Err(Error::Config(format!("t label {value} outside [0, 1000]")));
            }
            Ok(value.round() as u32)
        };
        let mut c = config.clone();
        match self {
            Self::Gamma => c.gamma = GammaSetting::Fixed(value),
            Self::TStruct => c.t_struct = Some(label()?),
            Self::TBlend => c.t_blend = Some(label()?),
        }
        Ok(c)
    }
}

/// Parses `lo:hi:step` into `round((hi - lo) / step) + 1` values.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    let nums: Vec<f64> = parts
        .iter()
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("grid {spec:?} is not lo:hi:step")))?;
    let [lo, hi, step] = nums[..] else {
        return Err(Error::Config(format!("grid {spec:?} is not lo:hi:step")));
    };
    if !(step > 0.0) || hi < lo || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Config(format!("grid {spec:?} needs lo <= hi and step > 0")));
    }
    let n = ((hi - lo) / step).round() as usize + 1;
    Ok((0..n).map(|i| lo + i as f64 * step).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub affordance: f64,
    pub inclusion: f64,
    pub n: usize,
}

/// Evaluates every request at every grid value.
pub fn sweep(
    backend: &(dyn VelocityBackend + Sync),
    param: SweepParam,
    grid: &[f64],
    requests: &[EditRequest],
    gt: &[Vec<BBox>],
    detector: &dyn Detector,
    score_threshold: f64,
) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(Error::InvalidInput("sweep grid is empty".into()));
    }
    grid.iter()
        .map(|&value| {
            let reqs = requests
                .iter()
                .map(|r| {
                    Ok(EditRequest {
                        config: param.apply(&r.config, value)?,
                        ..r.clone()
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let images = evaluate_requests(backend, &reqs, gt, detector, score_threshold)?;
            let s = EvalSummary::from_images(&images);
            Ok(SweepRow {
                value,
                affordance: s.affordance,
                inclusion: s.inclusion,
                n: s.n,
            })
        })
        .collect()
}

pub fn write_sweep_csv(param: SweepParam, rows: &[SweepRow], out: &mut impl Write) -> Result<()> {
    let name = match param {
        SweepParam::Gamma => "gamma",
        SweepParam::TStruct => "t_struct",
        SweepParam::TBlend => "t_blend",
    };
    writeln!(out, "{name},affordance,inclusion,n")?;
    for r in rows {
        writeln!(out, "{},{:.6},{:.6},{}", r.value, r.affordance, r.inclusion, r.n)?;
    }
    Ok(())
}
