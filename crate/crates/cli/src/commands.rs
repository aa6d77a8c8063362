use std::fmt::Write as _;

use anyhow::{Context, Result};
use serde::Serialize;

use addit_core::blending::SubjectMask;
use addit_core::eval::{
    evaluate_requests, parse_benchmark, parse_grid, sweep, write_sweep_csv,
    BenchmarkRecord, EditRequestSet, EvalSummary, ToyDetector,
};
use addit_core::extended::{write_spread_csv, BalanceProbe, SpreadRecord};
use addit_core::io::{latent_bytes, parse_latent, render_latent, render_map, render_mask};
use addit_core::model::embed::split_prompt;
use addit_core::model::{ModelConfig, TokenSequence, ToyMmdit};
use addit_core::pipeline::{
    balance_state_for, generate, run_edit, write_trace_csv, EditRequest, MaskOverride, Mode,
    PipelineConfig,
};

use crate::config::resolve;
use crate::manifest::Run;
use crate::{Cli, Command, EditArgs, UsageError};

pub fn run(cli: &Cli) -> Result<()> {
    let (model_cfg, pipeline) = resolve(&cli.opts)?;
    let model = ToyMmdit::new(model_cfg.clone())?;
    match &cli.command {
        Command::Generate { prompt } => cmd_generate(cli, &model, pipeline, prompt),
        Command::Edit(args) => cmd_edit(cli, &model, pipeline, args),
        Command::Analyze(args) => cmd_analyze(cli, &model, pipeline, args),
        Command::Sweep {
            param,
            grid,
            benchmark,
            score_threshold,
        } => {
            let mut run = Run::new(&cli.opts.out, "sweep")?;
            let grid = parse_grid(grid)?;
            let set = load_benchmark(&mut run, benchmark, &model_cfg, &pipeline)?;
            let rows = sweep(
                &model,
                *param,
                &grid,
                &set.requests,
                &set.gt,
                &ToyDetector::default(),
                *score_threshold,
            )?;
            let mut csv = Vec::new();
            write_sweep_csv(*param, &rows, &mut csv)?;
            run.write("sweep.csv", &csv)?;
            run.finish(&model_cfg, &pipeline)
        }
        Command::Eval {
            benchmark,
            score_threshold,
        } => {
            let mut run = Run::new(&cli.opts.out, "eval")?;
            let set = load_benchmark(&mut run, benchmark, &model_cfg, &pipeline)?;
            let images = evaluate_requests(
                &model,
                &set.requests,
                &set.gt,
                &ToyDetector::default(),
                *score_threshold,
            )?;
            let mut csv = String::from("index,detections,inside,affordance,detected,included\n");
            for (i, img) in images.iter().enumerate() {
                writeln!(
                    csv,
                    "{i},{},{},{:.6},{},{}",
                    img.affordance.total,
                    img.affordance.inside,
                    img.affordance.score,
                    img.affordance.detected as u8,
                    img.included as u8
                )?;
            }
            run.write("per_image.csv", csv.as_bytes())?;
            run.write_json("eval.json", &EvalSummary::from_images(&images))?;
            run.finish(&model_cfg, &pipeline)
        }
    }
}

fn load_benchmark(
    run: &mut Run,
    path: &std::path::Path,
    model: &ModelConfig,
    pipeline: &PipelineConfig,
) -> Result<EditRequestSet> {
    let bytes = run.read_input(path)?;
    let text = String::from_utf8(bytes).context("benchmark file is not UTF-8")?;
    let records: Vec<BenchmarkRecord> = parse_benchmark(&text)?;
    Ok(EditRequestSet::from_records(&records, model, pipeline)?)
}

fn cmd_generate(cli: &Cli, model: &ToyMmdit, pipeline: PipelineConfig, prompt: &str) -> Result<()> {
    let mut run = Run::new(&cli.opts.out, "generate")?;
    let tokens = TokenSequence::from_prompt(prompt, None, model.config())?;
    let sched = pipeline.schedule()?;
    let latent = generate(model, &tokens, &sched, pipeline.target_seed)?;
    run.write("latent.adlt", &latent_bytes(&latent))?;
    run.write("render.pgm", &render_latent(&latent))?;
    run.finish(model.config(), &pipeline)
}

fn default_source_prompt(prompt: &str, subject: Option<&str>) -> String {
    let subject = subject.map(|s| s.trim().to_lowercase());
    let kept: Vec<String> = split_prompt(prompt)
        .into_iter()
        .filter(|w| Some(w) != subject.as_ref())
        .collect();
    if kept.is_empty() {
        "scene".into()
    } else {
        kept.join(" ")
    }
}

fn build_request(run: &mut Run, model: &ToyMmdit, mut pipeline: PipelineConfig, args: &EditArgs) -> Result<EditRequest> {
    let cfg = model.config();
    if args.blend_all {
        pipeline.mask_override = Some(MaskOverride::Zeros);
        pipeline.blend_every_step = true;
    }
    let source_image = match (pipeline.mode, &args.source) {
        (Mode::Real, Some(path)) => Some(parse_latent(&run.read_input(path)?)?),
        (Mode::Real, None) => {
            return Err(UsageError("--mode real needs --source <latent file>".into()).into())
        }
        (Mode::Generated, Some(_)) => {
            return Err(UsageError("--source is only used with --mode real".into()).into())
        }
        (Mode::Generated, None) => None,
    };
    let target_prompt = TokenSequence::from_prompt(&args.prompt, args.subject.as_deref(), cfg)?;
    let source_text = args
        .source_prompt
        .clone()
        .unwrap_or_else(|| default_source_prompt(&args.prompt, args.subject.as_deref()));
    Ok(EditRequest {
        source_prompt: TokenSequence::from_prompt(&source_text, None, cfg)?,
        target_prompt,
        source_image,
        config: pipeline,
    })
}

#[derive(Serialize)]
struct PointsDoc<'a> {
    points: &'a [(usize, usize)],
    otsu_threshold: f64,
}

fn write_mask(run: &mut Run, mask: &SubjectMask) -> Result<()> {
    run.write("saliency.pgm", &render_map(&mask.saliency))?;
    run.write_json("mask_rough.json", &mask.rough.to_rows())?;
    run.write("mask_rough.pgm", &render_mask(&mask.rough))?;
    run.write_json("mask.json", &mask.refined.to_rows())?;
    run.write("mask.pgm", &render_mask(&mask.refined))?;
    run.write_json(
        "points.json",
        &PointsDoc {
            points: &mask.points,
            otsu_threshold: mask.otsu.threshold,
        },
    )
}

fn spread_csv(records: &[SpreadRecord]) -> Result<Vec<u8>> {
    let mut csv = Vec::new();
    write_spread_csv(records, &mut csv)?;
    Ok(csv)
}

fn cmd_edit(cli: &Cli, model: &ToyMmdit, pipeline: PipelineConfig, args: &EditArgs) -> Result<()> {
    let mut run = Run::new(&cli.opts.out, "edit")?;
    let req = build_request(&mut run, model, pipeline, args)?;
    let result = run_edit(model, &req)?;
    for w in &result.warnings {
        run.warn(w.clone());
    }
    run.write("output.adlt", &latent_bytes(&result.output))?;
    run.write("output.pgm", &render_latent(&result.output))?;
    run.write("source.adlt", &latent_bytes(&result.source))?;
    run.write("source.pgm", &render_latent(&result.source))?;
    if let Some(mask) = &result.mask {
        write_mask(&mut run, mask)?;
    }
    run.write("spread.csv", &spread_csv(&result.spread)?)?;
    let mut trace = Vec::new();
    write_trace_csv(&result.trace, &mut trace)?;
    run.write("trace.csv", &trace)?;
    run.write_json("result.json", &result)?;
    run.solved_gamma = result.solved_gamma.map(|s| s.gamma);
    run.weights = Some(result.weights);
    run.finish(model.config(), &req.config)
}

#[derive(Serialize)]
struct BlockSpread {
    block: usize,
    source: f64,
    prompt: f64,
    target: f64,
    rows: usize,
}

fn cmd_analyze(cli: &Cli, model: &ToyMmdit, pipeline: PipelineConfig, args: &EditArgs) -> Result<()> {
    let mut run = Run::new(&cli.opts.out, "analyze")?;
    let req = build_request(&mut run, model, pipeline, args)?;
    let result = run_edit(model, &req)?;
    run.write("spread.csv", &spread_csv(&result.spread)?)?;

    let mut blocks: Vec<BlockSpread> = Vec::new();
    for r in &result.spread {
        if blocks.iter().all(|b| b.block != r.block) {
            blocks.push(BlockSpread {
                block: r.block,
                source: 0.0,
                prompt: 0.0,
                target: 0.0,
                rows: 0,
            });
        }
        let b = blocks.iter_mut().find(|b| b.block == r.block).expect("inserted");
        b.source += r.source_frac;
        b.prompt += r.prompt_frac;
        b.target += r.target_frac;
        b.rows += 1;
    }
    for b in &mut blocks {
        let n = b.rows as f64;
        b.source /= n;
        b.prompt /= n;
        b.target /= n;
    }
    blocks.sort_by_key(|b| b.block);
    run.write_json("spread_summary.json", &blocks)?;

    match balance_state_for(model, &req)? {
        Some(state) => {
            let probe = BalanceProbe::new(&state)?;
            let mut csv = String::from("gamma,residual\n");
            for i in 0..=150 {
                let g = 0.5 + 0.01 * i as f64;
                writeln!(csv, "{g:.2},{:.12}", probe.residual(g))?;
            }
            run.write("balance.csv", csv.as_bytes())?;
        }
        None => run.warn("extension is never active; no balance curve".into()),
    }
    run.solved_gamma = result.solved_gamma.map(|s| s.gamma);
    run.weights = Some(result.weights);
    run.finish(model.config(), &req.config)
}
