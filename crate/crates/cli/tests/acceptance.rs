//! Acceptance suite. Each criterion runs against its own time budget and
//! prints one PASS/FAIL line; the process exits non-zero if any fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use ndarray::{concatenate, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use addit_core::blending::{
    blend_latents, histogram_bin, otsu_threshold, rough_mask, sample_points, Mask, PointSampling,
    SubjectAttentionMap,
};
use addit_core::eval::{
    affordance_score, covered_area, is_inside, sweep, BBox, Detection, SweepParam, ToyDetector,
};
use addit_core::extended::{
    attention_spread, extended_attention, AttentionWeights, GammaSolver,
    ShiftProbeHead, ShiftProbeInput,
};
use addit_core::flow::{euler_step, oracle_velocity, Latent, NoiseSample, OraclePointSet, Schedule};
use addit_core::model::attention::{baseline_attention, weighted_attention, AttentionState, HeadState};
use addit_core::model::rope::{PositionalOffset, RopeConfig};
use addit_core::model::{Extension, ExtensionGate, ForwardOptions, ModelConfig, TokenSequence, ToyMmdit};
use addit_core::pipeline::{
    run_edit, run_real_mode_step, EditRequest, ExtensionSchedule,
    OracleBackend, OracleCoupling, PipelineConfig,
};

type Check = Result<String, String>;
type M = Array2<f64>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn core<T>(r: addit_core::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

fn normal(rng: &mut ChaCha20Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn mat(rng: &mut ChaCha20Rng, rows: usize, cols: usize, scale: f64) -> M {
    M::from_shape_simple_fn((rows, cols), || scale * normal(rng))
}

fn random_state(rng: &mut ChaCha20Rng, heads: usize, n_p: usize, n_t: usize, n_s: usize, d: usize) -> AttentionState {
    AttentionState {
        heads: (0..heads)
            .map(|_| HeadState {
                q_prompt: mat(rng, n_p, d, 1.0),
                q_target: mat(rng, n_t, d, 1.0),
                k_prompt: mat(rng, n_p, d, 1.0),
                k_target: mat(rng, n_t, d, 1.0),
                v_prompt: mat(rng, n_p, d, 1.0),
                v_target: mat(rng, n_t, d, 1.0),
                k_source: (n_s > 0).then(|| mat(rng, n_s, d, 1.0)),
                v_source: (n_s > 0).then(|| mat(rng, n_s, d, 1.0)),
            })
            .collect(),
    }
}

fn softmax_rows(mut m: M) -> M {
    for mut row in m.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|x| (x - max).exp());
        let z = row.sum();
        row /= z;
    }
    m
}

/// Keys scaled `(γ_s, γ_p, γ_t)`, concatenated `[source, prompt, target]`.
fn dense_head(h: &HeadState, w: &AttentionWeights) -> (M, M) {
    let q = concatenate(Axis(0), &[h.q_prompt.view(), h.q_target.view()]).unwrap();
    let ks = h.k_source.as_ref().unwrap() * w.gamma_source;
    let kp = &h.k_prompt * w.gamma_prompt;
    let kt = &h.k_target * w.gamma_target;
    let k = concatenate(Axis(0), &[ks.view(), kp.view(), kt.view()]).unwrap();
    let v = concatenate(
        Axis(0),
        &[h.v_source.as_ref().unwrap().view(), h.v_prompt.view(), h.v_target.view()],
    )
    .unwrap();
    let a = softmax_rows(q.dot(&k.t()) / (q.ncols() as f64).sqrt());
    let out = a.dot(&v);
    (a, out)
}

fn max_abs_diff(a: &M, b: &M) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn same_bits(a: &M, b: &M) -> bool {
    a.shape() == b.shape() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

// 1
fn attention_reduction() -> Check {
    let mut r = rng(1);
    for case in 0..100 {
        let (heads, n_p, n_t, n_s) = (r.random_range(1..4), r.random_range(1..6), r.random_range(1..12), r.random_range(1..10));
        let state = random_state(&mut r, heads, n_p, n_t, n_s, 8);
        let reduced = state.without_source();
        let base = core(baseline_attention(&reduced))?;
        let ext = core(weighted_attention(&reduced, &AttentionWeights::balanced(1.0)))?;
        ensure!(ext.n_source == 0, "case {case}: source partition survived removal");
        for (a, b) in base.heads.iter().zip(&ext.heads) {
            ensure!(same_bits(&a.probs, &b.probs) && same_bits(&a.hidden, &b.hidden), "case {case}: outputs differ");
        }
    }

    // whole network: every block un-extended vs no extension at all
    let model = core(ToyMmdit::new(ModelConfig { image_grid: (6, 6), ..ModelConfig::default() }))?;
    let prompt = core(TokenSequence::from_prompt("a red chair", None, model.config()))?;
    let sched = core(Schedule::linear(30))?;
    for seed in 0..3u64 {
        let x = NoiseSample::new(seed, 6, 6, 4).values;
        let src = NoiseSample::new(seed + 50, 6, 6, 4).values;
        let capture = core(model.forward(&src, &prompt, &sched, 3, ForwardOptions { capture: true, ..Default::default() }))?
            .capture
            .ok_or("no capture")?;
        let plain = core(model.forward_velocity(&x, &prompt, &sched, 3, None))?;
        let gated = core(model.forward(
            &x,
            &prompt,
            &sched,
            3,
            ForwardOptions {
                extension: Some(Extension {
                    source: &capture,
                    weights: AttentionWeights::UNIT,
                    gate: ExtensionGate { multi_stream: false, single_stream: false },
                }),
                ..Default::default()
            },
        ))?
        .velocity;
        ensure!(
            plain.data.iter().zip(&gated.data).all(|(a, b)| a.to_bits() == b.to_bits()),
            "network output changed with a closed gate (seed {seed})"
        );
    }
    Ok("100 states and 3 network passes bitwise equal".into())
}

// 2
fn weighted_oracle() -> Check {
    let mut r = rng(2);
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let (heads, n_p, n_t, n_s) = (r.random_range(1..4), r.random_range(1..6), r.random_range(1..12), r.random_range(1..12));
        let state = random_state(&mut r, heads, n_p, n_t, n_s, 8);
        for g in [0.8, 1.0, 1.05, 1.2] {
            let w = AttentionWeights::balanced(g);
            let out = core(extended_attention(&state, &w))?;
            for (h, o) in state.heads.iter().zip(&out.heads) {
                let (a, hid) = dense_head(h, &w);
                let d = max_abs_diff(&a, &o.probs).max(max_abs_diff(&hid, &o.hidden));
                worst = worst.max(d);
                ensure!(d <= 1e-10, "case {case}, gamma {g}: deviation {d:e}");
            }
        }
    }
    Ok(format!("max deviation {worst:.2e}"))
}

/// Mean over heads and prompt rows of source minus target attention mass.
fn balance_oracle(state: &AttentionState, g: f64) -> f64 {
    let mut total = 0.0;
    let mut rows = 0;
    for h in &state.heads {
        let ks = h.k_source.as_ref().unwrap();
        let kp = &h.k_prompt * g;
        let kt = &h.k_target * g;
        let k = concatenate(Axis(0), &[ks.view(), kp.view(), kt.view()]).unwrap();
        let a = softmax_rows(h.q_prompt.dot(&k.t()) / (h.q_prompt.ncols() as f64).sqrt());
        let (n_s, n_t) = (ks.nrows(), kt.nrows());
        for row in a.rows() {
            let s: f64 = row.iter().take(n_s).sum();
            let t: f64 = row.iter().skip(row.len() - n_t).sum();
            total += s - t;
            rows += 1;
        }
    }
    total / rows as f64
}

/// Prompt queries and all keys share a direction, so every logit is
/// positive and the balance residual falls with γ. Target keys are source
/// keys shrunk by `1/g_star` plus noise.
fn aligned_probe(r: &mut ChaCha20Rng, g_star: f64, symmetric: bool) -> AttentionState {
    let d = 8;
    let (n_p, n_s) = (4, 6);
    let heads = (0..2)
        .map(|_| {
            let u: Vec<f64> = (0..d).map(|_| normal(r)).collect();
            let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            let dir = |a: f64, n: usize, r: &mut ChaCha20Rng| {
                M::from_shape_fn((n, d), |(_, c)| a * u[c] / norm) + mat(r, n, d, 0.2)
            };
            let a_q = r.random_range(1.5..3.0);
            let a_k = r.random_range(1.5..3.0);
            let q_prompt = dir(a_q, n_p, r);
            let k_source = dir(a_k, n_s, r);
            let k_target = if symmetric {
                k_source.clone()
            } else {
                &k_source / g_star + mat(r, n_s, d, 0.05)
            };
            HeadState {
                q_prompt,
                q_target: mat(r, n_s, d, 1.0),
                k_prompt: dir(a_k, n_p, r),
                k_target,
                v_prompt: mat(r, n_p, d, 1.0),
                v_target: mat(r, n_s, d, 1.0),
                k_source: Some(k_source),
                v_source: Some(mat(r, n_s, d, 1.0)),
            }
        })
        .collect();
    AttentionState { heads }
}

// 3
fn gamma_solver() -> Check {
    let mut r = rng(3);
    let n = 10_000;
    let cell = 1.5 / (n - 1) as f64;
    let mut worst_gap: f64 = 0.0;
    for case in 0..20 {
        let g_star = r.random_range(0.7..1.5);
        let state = aligned_probe(&mut r, g_star, false);
        ensure!(
            balance_oracle(&state, 0.5) > 0.0 && balance_oracle(&state, 2.0) < 0.0,
            "case {case}: probe does not bracket a root"
        );
        let sol = core(GammaSolver::default().solve(&state))?;
        let f = balance_oracle(&state, sol.gamma);
        ensure!(f.abs() <= 1e-4, "case {case}: |f({})| = {f:e}", sol.gamma);
        let argmin = (0..n)
            .map(|i| 0.5 + 1.5 * i as f64 / (n - 1) as f64)
            .min_by(|a, b| balance_oracle(&state, *a).abs().total_cmp(&balance_oracle(&state, *b).abs()))
            .unwrap();
        let gap = (sol.gamma - argmin).abs();
        worst_gap = worst_gap.max(gap);
        ensure!(gap <= cell * (1.0 + 1e-9), "case {case}: solved {} vs scan {argmin}", sol.gamma);
    }
    let mut sym_worst: f64 = 0.0;
    for case in 0..5 {
        let state = aligned_probe(&mut r, 1.0, true);
        let g = core(GammaSolver::default().solve(&state))?.gamma;
        sym_worst = sym_worst.max((g - 1.0).abs());
        ensure!((g - 1.0).abs() <= 1e-3, "symmetric case {case}: gamma {g}");
    }
    Ok(format!(
        "max gap to scan {worst_gap:.2e} (cell {cell:.2e}); symmetric |γ-1| ≤ {sym_worst:.1e}"
    ))
}

// 4
fn real_reconstruction() -> Check {
    let model = core(ToyMmdit::new(ModelConfig { image_grid: (4, 4), ..ModelConfig::default() }))?;
    let cfg = model.config();
    let src_prompt = core(TokenSequence::from_prompt("a wooden table", None, cfg))?;
    let tgt_prompt = core(TokenSequence::from_prompt("a wooden table with a vase", Some("vase"), cfg))?;
    let sched = core(Schedule::linear(30))?;
    let mut r = rng(4);
    for case in 0..20u64 {
        let image = Latent::from_fn(4, 4, 4, |_, _, _| 3.0 * normal(&mut r));
        let seed: u64 = r.random();
        let eps = NoiseSample::like(seed, &image);
        let direct = core(run_real_mode_step(&image, &eps, &sched, 30))?;
        ensure!(direct.data.iter().zip(&image.data).all(|(a, b)| a.to_bits() == b.to_bits()), "case {case}: noising to σ=0 altered the image");
        let req = EditRequest {
            source_prompt: src_prompt.clone(),
            target_prompt: tgt_prompt.clone(),
            source_image: Some(image.clone()),
            config: PipelineConfig { target_seed: seed, ..PipelineConfig::real() },
        };
        let res = core(run_edit(&model, &req))?;
        ensure!(
            res.source.data.iter().zip(&image.data).all(|(a, b)| a.to_bits() == b.to_bits()),
            "case {case}: reconstructed source differs"
        );
    }
    Ok("20 pairs reconstructed bitwise".into())
}

/// Boundary maximising between-class variance over every split, with
/// class statistics recomputed from scratch at each split.
fn otsu_scan(values: &[f64], bins: usize) -> usize {
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let width = (max - min) / bins as f64;
    let binned: Vec<usize> = values.iter().map(|&v| histogram_bin(v, min, max, bins)).collect();
    let n = values.len() as f64;
    let mut best = (0, f64::NEG_INFINITY);
    for b in 1..bins {
        let (lo, hi): (Vec<usize>, Vec<usize>) = binned.iter().partition(|&&i| i < b);
        if lo.is_empty() || hi.is_empty() {
            continue;
        }
        let centre = |i: &usize| min + (*i as f64 + 0.5) * width;
        let mu0 = lo.iter().map(centre).sum::<f64>() / lo.len() as f64;
        let mu1 = hi.iter().map(centre).sum::<f64>() / hi.len() as f64;
        let var = (lo.len() as f64 / n) * (hi.len() as f64 / n) * (mu0 - mu1).powi(2);
        if var > best.1 {
            best = (b, var);
        }
    }
    best.0
}

// 5
fn otsu_oracle() -> Check {
    let mut r = rng(5);
    let mut maps = Vec::new();
    for _ in 0..50 {
        let (h, w) = (r.random_range(4..20), r.random_range(4..20));
        let vals: Vec<f64> = (0..h * w).map(|_| r.random::<f64>().powi(2)).collect();
        maps.push(SubjectAttentionMap::new(h, w, vals).unwrap());
    }
    for _ in 0..10 {
        let (h, w) = (16, 16);
        let frac = r.random_range(0.1..0.5);
        let vals: Vec<f64> = (0..h * w)
            .map(|_| {
                let centre = if r.random::<f64>() < frac { 0.8 } else { 0.2 };
                (centre + 0.05 * normal(&mut r)).max(0.0)
            })
            .collect();
        maps.push(SubjectAttentionMap::new(h, w, vals).unwrap());
    }
    for (i, map) in maps.iter().enumerate() {
        let res = core(otsu_threshold(map, 64))?;
        let oracle = otsu_scan(&map.values, 64);
        ensure!(res.boundary == oracle, "map {i}: boundary {} vs scan {oracle}", res.boundary);
        let a = r.random_range(0.1..10.0);
        let b = r.random_range(0.0..5.0);
        let scaled = SubjectAttentionMap::new(map.height, map.width, map.values.iter().map(|v| a * v + b).collect()).unwrap();
        let res2 = core(otsu_threshold(&scaled, 64))?;
        ensure!(
            res2.boundary == res.boundary && rough_mask(&scaled, &res2) == rough_mask(map, &res),
            "map {i}: rescaling by {a}·x + {b} changed the mask"
        );
    }
    Ok("60 maps match the exhaustive scan; affine rescaling preserves masks".into())
}

/// Sort every local maximum once, then accept in order while clear of
/// earlier picks.
fn greedy_replay(map: &SubjectAttentionMap, cfg: &PointSampling) -> Vec<(usize, usize)> {
    let (h, w) = (map.height, map.width);
    let mut peaks: Vec<(usize, usize)> = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let v = map.get(r, c);
            let neighbours = (r.saturating_sub(1)..=(r + 1).min(h - 1))
                .flat_map(|nr| (c.saturating_sub(1)..=(c + 1).min(w - 1)).map(move |nc| (nr, nc)));
            if neighbours.clone().all(|(nr, nc)| map.get(nr, nc) <= v) {
                peaks.push((r, c));
            }
        }
    }
    peaks.sort_by(|a, b| map.get(b.0, b.1).total_cmp(&map.get(a.0, a.1)).then(a.cmp(b)));
    let p_max = map.max();
    let mut out: Vec<(usize, usize)> = Vec::new();
    for (r, c) in peaks {
        if out.len() == cfg.max_points {
            break;
        }
        let clear = out.iter().all(|&(pr, pc)| {
            let (dr, dc) = (r as f64 - pr as f64, c as f64 - pc as f64);
            dr * dr + dc * dc > cfg.exclusion_radius * cfg.exclusion_radius
        });
        if !clear {
            continue;
        }
        if !out.is_empty() && map.get(r, c) < cfg.stop_ratio * p_max {
            break;
        }
        out.push((r, c));
    }
    out
}

fn peaks_map(h: usize, w: usize, peaks: &[((usize, usize), f64)]) -> SubjectAttentionMap {
    let mut vals = vec![0.0; h * w];
    for &((r, c), v) in peaks {
        vals[r * w + c] = v;
    }
    SubjectAttentionMap::new(h, w, vals).unwrap()
}

// 6
fn point_sampling() -> Check {
    let mut r = rng(6);
    let mut counts = [0usize; 5];
    for i in 0..100 {
        let (h, w) = (r.random_range(6..24), r.random_range(6..24));
        let vals: Vec<f64> = (0..h * w).map(|_| r.random::<f64>()).collect();
        let map = SubjectAttentionMap::new(h, w, vals).unwrap();
        let cfg = PointSampling::for_grid(h, w);
        let got = sample_points(&map, &cfg);
        let want = greedy_replay(&map, &cfg);
        ensure!(got == want, "map {i}: sampled {got:?}, replay {want:?}");
        counts[got.len()] += 1;
    }

    let cfg = PointSampling::for_grid(16, 16);
    let stop = peaks_map(16, 16, &[((3, 3), 1.0), ((12, 12), 0.3)]);
    let got = sample_points(&stop, &cfg);
    let uncapped = sample_points(&stop, &PointSampling { stop_ratio: 0.0, ..cfg });
    ensure!(got == vec![(3, 3)] && uncapped.len() > 1, "ratio stop not triggered: {got:?}");

    let many: Vec<((usize, usize), f64)> = [(2, 2), (2, 8), (2, 13), (8, 2), (8, 8), (13, 13)]
        .iter()
        .enumerate()
        .map(|(i, &p)| (p, 1.0 - 0.08 * i as f64))
        .collect();
    let cap = peaks_map(16, 16, &many);
    let got = sample_points(&cap, &cfg);
    let more = sample_points(&cap, &PointSampling { max_points: 10, ..cfg });
    ensure!(got == vec![(2, 2), (2, 8), (2, 13), (8, 2)] && more.len() == 6, "cap not triggered: {got:?}");
    ensure!(got == greedy_replay(&cap, &cfg), "cap case disagrees with replay");
    Ok(format!("100 maps replayed (point counts 1..4: {:?}); stop and cap cases hit", &counts[1..]))
}

// 7
fn blending_algebra() -> Check {
    let mut r = rng(7);
    for case in 0..100 {
        let (h, w, d) = (r.random_range(1..10), r.random_range(1..10), r.random_range(1..5));
        let t = Latent::from_fn(h, w, d, |_, _, _| normal(&mut r));
        let s = Latent::from_fn(h, w, d, |_, _, _| normal(&mut r));
        let cells: Vec<bool> = (0..h * w).map(|_| r.random()).collect();
        let m = Mask { height: h, width: w, cells };
        let bits = |l: &Latent| l.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        ensure!(bits(&core(blend_latents(&t, &s, &Mask::filled(h, w, true)))?) == bits(&t), "case {case}: M=1");
        ensure!(bits(&core(blend_latents(&t, &s, &Mask::filled(h, w, false)))?) == bits(&s), "case {case}: M=0");
        let once = core(blend_latents(&t, &s, &m))?;
        let twice = core(blend_latents(&once, &s, &m))?;
        ensure!(bits(&once) == bits(&twice), "case {case}: not idempotent");
        for row in 0..h {
            for col in 0..w {
                let want = if m.get(row, col) { t.token(row, col) } else { s.token(row, col) };
                ensure!(once.token(row, col) == want, "case {case}: cell ({row},{col})");
            }
        }
    }
    Ok("100 triples".into())
}

fn closed_form_velocity(x: &Latent, sigma: f64, points: &[Latent]) -> Vec<f64> {
    let logw: Vec<f64> = points
        .iter()
        .map(|p| {
            -x.data.iter().zip(&p.data).map(|(a, b)| (a - (1.0 - sigma) * b).powi(2)).sum::<f64>()
                / (2.0 * sigma * sigma)
        })
        .collect();
    let top = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logw.iter().map(|l| (l - top).exp()).collect();
    let z: f64 = w.iter().sum();
    (0..x.data.len())
        .map(|i| {
            let mean: f64 = points.iter().zip(&w).map(|(p, wi)| wi * p.data[i]).sum::<f64>() / z;
            (x.data[i] - mean) / sigma
        })
        .collect()
}

// 8
fn oracle_flow() -> Check {
    let mut r = rng(8);
    let points: Vec<Latent> = (0..3).map(|_| Latent::from_fn(4, 4, 2, |_, _, _| normal(&mut r))).collect();
    let data = core(OraclePointSet::new(points.clone()))?;
    let sched = core(Schedule::linear(30))?;
    let mut landed = 0;
    let mut worst_v: f64 = 0.0;
    for seed in 0..200u64 {
        let mut x = NoiseSample::new(seed, 4, 4, 2).values;
        for k in 0..30 {
            let v = core(oracle_velocity(&x, &sched, k, &data))?;
            if seed < 10 {
                let want = closed_form_velocity(&x, sched.sigmas()[k], &points);
                let dev = v.data.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                worst_v = worst_v.max(dev / (1.0 + want.iter().map(|w| w.abs()).fold(0.0, f64::max)));
            }
            x = core(euler_step(&x, &v, &sched, k))?;
        }
        if points.iter().any(|p| p.distance(&x) <= 1e-3) {
            landed += 1;
        }
    }
    ensure!(worst_v <= 1e-12, "velocity deviates from closed form by {worst_v:e}");
    ensure!(landed * 100 >= 95 * 200, "only {landed}/200 landed");
    Ok(format!("{landed}/200 within 1e-3; velocity matches closed form ({worst_v:.1e})"))
}

fn dummy_prompts() -> (TokenSequence, TokenSequence) {
    let cfg = ModelConfig::default();
    (
        TokenSequence::from_prompt("an empty room", None, &cfg).unwrap(),
        TokenSequence::from_prompt("an empty room with a lamp", Some("lamp"), &cfg).unwrap(),
    )
}

// 9
fn structure_transfer() -> Check {
    let mut r = rng(9);
    let (h, w, d) = (4, 4, 2);
    let u = Latent::from_fn(h, w, d, |_, _, _| normal(&mut r));
    let norm = u.data.iter().map(|x| x * x).sum::<f64>().sqrt();
    let c = STRUCTURE_SEPARATION / 2.0;
    let pos = Latent::from_fn(h, w, d, |row, col, ch| c * u.token(row, col)[ch] / norm);
    let neg = pos.axpy(-2.0, &pos);
    let data = core(OraclePointSet::new(vec![pos, neg]))?;
    let backend = core(OracleBackend::new(data.clone(), data))?;
    let (sp, tp) = dummy_prompts();
    let mut means = Vec::new();
    for t in [600u32, 800, 933, 1000] {
        let mut total = 0.0;
        for seed in 0..50u64 {
            let req = EditRequest {
                source_prompt: sp.clone(),
                target_prompt: tp.clone(),
                source_image: None,
                config: PipelineConfig {
                    t_struct: Some(t),
                    t_blend: None,
                    extension: ExtensionSchedule::disabled(),
                    source_seed: Some(seed),
                    target_seed: 10_000 + seed,
                    ..PipelineConfig::default()
                },
            };
            let res = core(run_edit(&backend, &req))?;
            total += res.output.distance(&res.source);
        }
        means.push((t, total / 50.0));
    }
    let text = means.iter().map(|(t, m)| format!("{t}:{m:.3}")).collect::<Vec<_>>().join(" ");
    ensure!(means.windows(2).all(|p| p[1].1 >= p[0].1), "not monotone: {text}");
    ensure!(means[3].1 > means[0].1, "no increase between extremes: {text}");
    Ok(text)
}

const STRUCTURE_SEPARATION: f64 = 11.0;

// 10
fn gamma_direction() -> Check {
    let mut r = rng(10);
    let (h, w, d) = (8, 8, 2);
    let background = Latent::from_fn(h, w, d, |_, _, _| 0.5 * normal(&mut r));
    let object = Latent::from_fn(h, w, d, |row, col, ch| {
        let inside = (2..=4).contains(&row) && (2..=4).contains(&col);
        background.token(row, col)[ch] + if inside { OBJECT_AMPLITUDE } else { 0.0 }
    });

    let head_dim = 8;
    let u: Vec<f64> = (0..head_dim).map(|_| normal(&mut r)).collect();
    let un = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let along = |a: f64, n: usize, r: &mut ChaCha20Rng| {
        M::from_shape_fn((n, head_dim), |(_, c)| a * u[c] / un) + mat(r, n, head_dim, 0.3)
    };
    let probe = AttentionState {
        heads: vec![HeadState {
            q_prompt: along(4.0, 4, &mut r),
            q_target: mat(&mut r, 16, head_dim, 1.0),
            k_prompt: along(3.0, 4, &mut r),
            k_target: along(3.0, 16, &mut r),
            v_prompt: mat(&mut r, 4, head_dim, 1.0),
            v_target: mat(&mut r, 16, head_dim, 1.0),
            k_source: Some(along(3.0, 16, &mut r)),
            v_source: Some(mat(&mut r, 16, head_dim, 1.0)),
        }],
    };
    let coupling = OracleCoupling {
        probe,
        object_points: vec![false, true],
        tau: COUPLING_TAU,
    };
    let share = |g: f64| attention_spread(&coupling.probe, &AttentionWeights::balanced(g)).map(|s| s.source);
    let (s_lo, s_hi) = (core(share(0.9))?, core(share(1.1))?);
    let backend = core(OracleBackend::new(
        core(OraclePointSet::new(vec![background.clone()]))?,
        core(OraclePointSet::new(vec![background, object]))?,
    ))?;
    let backend = core(backend.with_coupling(coupling))?;

    let (sp, tp) = dummy_prompts();
    let requests: Vec<EditRequest> = (0..50u64)
        .map(|seed| EditRequest {
            source_prompt: sp.clone(),
            target_prompt: tp.clone(),
            source_image: None,
            config: PipelineConfig {
                t_blend: None,
                source_seed: Some(seed),
                target_seed: 20_000 + seed,
                ..PipelineConfig::default()
            },
        })
        .collect();
    let gt = vec![vec![BBox::new(2.0, 2.0, 3.0, 3.0).unwrap()]; requests.len()];
    let grid = [0.9, 0.95, 1.0, 1.05, 1.1];
    let rows = core(sweep(&backend, SweepParam::Gamma, &grid, &requests, &gt, &ToyDetector::default(), 0.5))?;
    let text = rows.iter().map(|r| format!("{:.2}:{:.2}", r.value, r.inclusion)).collect::<Vec<_>>().join(" ");
    ensure!(s_hi < s_lo, "source share does not fall with gamma ({s_lo} -> {s_hi})");
    ensure!(rows.windows(2).all(|p| p[1].inclusion >= p[0].inclusion), "inclusion not monotone: {text}");
    ensure!(rows.iter().all(|r| r.affordance == 1.0 || r.inclusion == 0.0), "detections outside the object box: {text}");
    Ok(format!("inclusion {text}"))
}

const OBJECT_AMPLITUDE: f64 = 1.5;
const COUPLING_TAU: f64 = 0.42;

// 11
fn positional_shift() -> Check {
    let head_dim = 16;
    let rope = core(RopeConfig::for_head_dim(head_dim))?;
    let [text_w, row_w, _] = rope.axes;
    let (h, w) = (16, 16);
    let n_img = h * w;
    let n_p = 5;
    let centre = 8 * w + 8;
    let mut r = rng(11);
    let small = |r: &mut ChaCha20Rng, n: usize| mat(r, n, head_dim, 0.01);

    let mut q_prompt = small(&mut r, n_p);
    let mut k_source = small(&mut r, n_img);
    let mut q_target = small(&mut r, n_img);
    for ch in 0..text_w {
        q_prompt[[0, ch]] = 2.0;
        k_source[[centre, ch]] = 6.0;
    }
    for ch in text_w..head_dim {
        let v = if (ch - text_w) % row_w % 2 == 0 { 3.0 } else { 0.0 };
        k_source[[centre, ch]] = v;
        for p in 0..n_img {
            q_target[[p, ch]] = v;
        }
    }
    let input = ShiftProbeInput {
        heads: vec![ShiftProbeHead {
            q_prompt,
            k_prompt: small(&mut r, n_p),
            v_prompt: small(&mut r, n_p),
            q_target,
            k_target: small(&mut r, n_img),
            v_target: small(&mut r, n_img),
            k_source,
            v_source: small(&mut r, n_img),
        }],
        grid: (h, w),
        subject_index: 0,
        rope,
    };
    for a in [-2i64, 0, 2] {
        for b in [-2i64, 0, 2] {
            let rep = core(input.report(PositionalOffset::new(a, b)))?;
            ensure!(rep.before == (8, 8), "unshifted argmax at {:?}", rep.before);
            ensure!(rep.displacement() == (a, b), "offset ({a},{b}) moved argmax by {:?}", rep.displacement());
        }
    }
    Ok("all 9 offsets move the argmax exactly".into())
}

/// Area of `b` inside the union of `gt`, by counting quarter-unit cells.
fn raster_covered(b: &BBox, gt: &[BBox]) -> f64 {
    let q = |v: f64| (v * 4.0).round() as i64;
    let mut cells = 0;
    for y in q(b.y)..q(b.bottom()) {
        for x in q(b.x)..q(b.right()) {
            if gt.iter().any(|g| q(g.x) <= x && x < q(g.right()) && q(g.y) <= y && y < q(g.bottom())) {
                cells += 1;
            }
        }
    }
    cells as f64 / 16.0
}

// 12
fn affordance_metric() -> Check {
    let mut r = rng(12);
    let quarter_box = |r: &mut ChaCha20Rng| {
        let x = r.random_range(0..40) as f64 / 4.0;
        let y = r.random_range(0..40) as f64 / 4.0;
        let w = r.random_range(1..24) as f64 / 4.0;
        let h = r.random_range(1..24) as f64 / 4.0;
        BBox::new(x, y, w, h).unwrap()
    };
    let mut worst: f64 = 0.0;
    for case in 0..200 {
        let gt: Vec<BBox> = (0..r.random_range(1..5)).map(|_| quarter_box(&mut r)).collect();
        let dets: Vec<Detection> = (0..r.random_range(1..6))
            .map(|_| Detection { bbox: quarter_box(&mut r), score: 1.0, label: "x".into() })
            .collect();
        let mut inside = 0;
        for det in &dets {
            let want = raster_covered(&det.bbox, &gt);
            let got = covered_area(&det.bbox, &gt);
            worst = worst.max((want - got).abs());
            ensure!((want - got).abs() <= 1e-9, "case {case}: covered {got} vs raster {want}");
            let raster_inside = 2.0 * want >= det.bbox.area();
            ensure!(is_inside(&det.bbox, &gt) == raster_inside, "case {case}: inside decision differs");
            inside += raster_inside as usize;
        }
        let score = affordance_score(&dets, &gt).score;
        let want = inside as f64 / dets.len() as f64;
        ensure!((score - want).abs() <= 1e-9, "case {case}: affordance {score} vs {want}");
    }
    let det = BBox::new(0.0, 0.0, 2.0, 2.0).unwrap();
    let half = [BBox::new(1.0, -1.0, 3.0, 4.0).unwrap()];
    let split = [BBox::new(0.0, 0.0, 1.0, 1.0).unwrap(), BBox::new(1.0, 1.0, 1.0, 1.0).unwrap()];
    let short = [BBox::new(1.0, 0.0, 1.0, 1.99).unwrap()];
    ensure!(is_inside(&det, &half) && is_inside(&det, &split), "exact half overlap counted outside");
    ensure!(!is_inside(&det, &short), "less than half counted inside");
    Ok(format!("200 configurations, max deviation {worst:.1e}; half overlap counts inside"))
}

fn run_cli(out: &Path) -> Result<BTreeMap<String, String>, String> {
    let status = Command::new(env!("CARGO_BIN_EXE_addit"))
        .args(["--seed", "7", "--gamma", "1.05", "--out"])
        .arg(out)
        .args(["edit", "--prompt", "a cat on a sofa", "--subject", "cat"])
        .status()
        .map_err(|e| e.to_string())?;
    ensure!(status.success(), "addit edit exited with {status}");
    let text = std::fs::read_to_string(out.join("manifest.json")).map_err(|e| e.to_string())?;
    let manifest: serde_json::Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    let mut hashes = BTreeMap::new();
    for a in manifest["outputs"].as_array().ok_or("manifest has no outputs")? {
        let path = a["path"].as_str().ok_or("bad artifact")?.to_string();
        let sha = a["sha256"].as_str().ok_or("bad artifact")?.to_string();
        let bytes = std::fs::read(out.join(&path)).map_err(|e| e.to_string())?;
        ensure!(hex(&Sha256::digest(&bytes)) == sha, "{path}: manifest hash does not match file");
        hashes.insert(path, sha);
    }
    Ok(hashes)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

// 13
fn end_to_end_determinism() -> Check {
    let base: PathBuf = std::env::temp_dir().join(format!("addit-acceptance-{}", std::process::id()));
    let a = run_cli(&base.join("a"))?;
    let b = run_cli(&base.join("b"))?;
    let _ = std::fs::remove_dir_all(&base);
    ensure!(a.contains_key("output.adlt") && a.contains_key("mask.json"), "expected artifacts missing: {:?}", a.keys());
    ensure!(a == b, "artifact hashes differ");
    Ok(format!("{} artifacts identical", a.len()))
}

fn main() -> ExitCode {
    let criteria: [(&str, f64, fn() -> Check); 13] = [
        ("attention reduction equals baseline", 1.0, attention_reduction),
        ("weighted attention matches dense oracle", 5.0, weighted_oracle),
        ("gamma solver", 10.0, gamma_solver),
        ("real-mode reconstruction", 5.0, real_reconstruction),
        ("Otsu oracle and affine invariance", 2.0, otsu_oracle),
        ("point sampling replay", 2.0, point_sampling),
        ("blending algebra", 1.0, blending_algebra),
        ("oracle flow lands on data", 10.0, oracle_flow),
        ("structure transfer direction", 30.0, structure_transfer),
        ("gamma sweep direction", 60.0, gamma_direction),
        ("positional shift probe", 5.0, positional_shift),
        ("affordance metric", 2.0, affordance_metric),
        ("end-to-end determinism", 10.0, end_to_end_determinism),
    ];
    let mut failed = 0;
    for (i, (name, budget, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = start.elapsed();
        let over = elapsed > Duration::from_secs_f64(*budget);
        let (ok, detail) = match outcome {
            Ok(d) if !over => (true, d),
            Ok(d) => (false, format!("{d}; over the {budget} s budget")),
            Err(e) => (false, e),
        };
        failed += !ok as usize;
        println!(
            "{} [{:>2}] {name} ({:.2} s / {budget} s): {detail}",
            if ok { "PASS" } else { "FAIL" },
            i + 1,
            elapsed.as_secs_f64()
        );
    }
    println!("{} of 13 criteria passed", 13 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
