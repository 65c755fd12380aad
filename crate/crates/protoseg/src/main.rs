//! Command-line entry points: training, fold evaluation, dataset
//! generation, the attention cost model, parameter counting, and the
//! gradient verification suite.

use clap::{Args, Parser, Subcommand};
use protoseg::config::Config;
use protoseg::cost::{attention_cost, count_params, param_breakdown, Scheme};
use protoseg::data::{gen_synthetic_dataset, read_manifest, split_folds, ManifestRecord, SynthSpec};
use protoseg::io::{read_checkpoint, write_checkpoint};
use protoseg::metrics::evaluate_fold;
use protoseg::params::ParamSet;
use protoseg::rng::PortableRng;
use protoseg::train::train_run;
use protoseg::verify::{op_grad_checks, pipeline_grad_check, GRAD_TOL};
use protoseg::{Error, Result};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

#[derive(Parser)]
#[command(name = "protoseg", about = "Few-shot segmentation trainer and tools", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Flags shared by train and eval that override config-file values.
#[derive(Args)]
struct ConfigOverrides {
    /// Config file of `key = value` lines; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    fold: Option<usize>,
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    /// Manifest file of the dataset (overrides the config `data` key).
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train on the fold's train classes; writes loss CSV and a checkpoint.
    Train {
        #[command(flatten)]
        overrides: ConfigOverrides,
        /// Output directory for trace.csv, config.txt, and checkpoint/.
        #[arg(long, default_value = "train_out")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the fold's held-out classes.
    Eval {
        #[command(flatten)]
        overrides: ConfigOverrides,
        /// Checkpoint directory written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1000)]
        episodes: usize,
        /// Write per-episode predicted probability maps here.
        #[arg(long)]
        dump_masks: Option<PathBuf>,
        /// Report CSV path.
        #[arg(long, default_value = "eval_report.csv")]
        out: PathBuf,
    },
    /// Generate a synthetic shape dataset with a manifest.
    GenData {
        /// Spec file of `key = value` lines (classes, sizes, noise).
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the attention cost model for both schemes.
    BenchAttn {
        #[arg(long, default_value_t = 64)]
        dim: usize,
        /// Query spatial positions N_q.
        #[arg(long, default_value_t = 3600)]
        nq: usize,
        /// Support spatial positions N_s.
        #[arg(long, default_value_t = 3600)]
        ns: usize,
        #[arg(long, default_value_t = 1)]
        heads: usize,
        /// Also wall-clock the score+aggregation kernels at these sizes.
        #[arg(long)]
        measure: bool,
    },
    /// Count learnable parameters under a config.
    CountParams {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Include the backbone in the total.
        #[arg(long)]
        include_backbone: bool,
    },
    /// Run the gradient verification suite (per-op and whole-pipeline).
    GradCheck,
}

fn load_config(ov: &ConfigOverrides) -> Result<Config> {
    let mut cfg = match &ov.config {
        Some(path) => Config::from_file(path)?,
        None => Config::default(),
    };
    if let Some(s) = ov.seed {
        cfg.seed = s;
    }
    if let Some(f) = ov.fold {
        cfg.fold = f;
    }
    if let Some(k) = ov.shots {
        cfg.shots = k;
    }
    if let Some(n) = ov.steps {
        cfg.steps = n;
    }
    if let Some(d) = &ov.data {
        cfg.data = Some(d.display().to_string());
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Manifest records plus the directory their relative paths resolve in.
fn load_dataset(cfg: &Config) -> Result<(Vec<ManifestRecord>, PathBuf)> {
    let manifest = cfg
        .data
        .as_ref()
        .ok_or_else(|| Error::config("no dataset: set `data` in the config or pass --data"))?;
    let path = PathBuf::from(manifest);
    let records = read_manifest(&path)?;
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    Ok((records, base))
}

fn num_classes(records: &[ManifestRecord]) -> usize {
    records
        .iter()
        .flat_map(|r| r.class_ids.iter())
        .max()
        .map_or(0, |&c| c + 1)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn cmd_train(overrides: &ConfigOverrides, out: &Path) -> Result<()> {
    let cfg = load_config(overrides)?;
    let (records, base) = load_dataset(&cfg)?;
    let split = split_folds(num_classes(&records), cfg.num_folds, cfg.fold)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out.display().to_string(), e))?;
    let t0 = Instant::now();
    let outcome = train_run(&cfg, &records, &base, &split.train_classes, |step, rep| {
        if step % 50 == 0 || step + 1 == cfg.steps {
            eprintln!("step {step:>5}  loss {:.4}  [{:.0?}]", rep.mean, t0.elapsed());
        }
    })?;
    let mut csv = String::from("step,loss\n");
    for (i, rep) in outcome.trace.iter().enumerate() {
        csv.push_str(&format!("{i},{}\n", rep.mean));
    }
    write_file(&out.join("trace.csv"), &csv)?;
    write_file(&out.join("config.txt"), &cfg.to_kv_string())?;
    write_checkpoint(&out.join("checkpoint"), outcome.params.tensors())?;
    println!(
        "trained {} steps on classes {:?}; final loss {:.4}; wrote {}",
        cfg.steps,
        split.train_classes,
        outcome.trace.last().map_or(f32::NAN, |r| r.mean),
        out.display()
    );
    Ok(())
}

fn cmd_eval(
    overrides: &ConfigOverrides,
    checkpoint: &Path,
    episodes: usize,
    dump_masks: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let cfg = load_config(overrides)?;
    let (records, base) = load_dataset(&cfg)?;
    let split = split_folds(num_classes(&records), cfg.num_folds, cfg.fold)?;
    let params = ParamSet::from_tensors(read_checkpoint(checkpoint)?);
    let mut rng = PortableRng::new(cfg.seed ^ 0x517c_c1b7_2722_0a95);
    let report = evaluate_fold(
        &params,
        &cfg,
        &records,
        &base,
        &split.test_classes,
        episodes,
        &mut rng,
        dump_masks,
    )?;
    write_file(out, &report.to_csv())?;
    print!("{}", report.to_text());
    Ok(())
}

fn cmd_gen_data(spec: Option<&Path>, out: &Path, seed: u64) -> Result<()> {
    let spec = match spec {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            SynthSpec::from_str_kv(&text)?
        }
        None => SynthSpec::default(),
    };
    let mut rng = PortableRng::new(seed);
    let records = gen_synthetic_dataset(&spec, out, &mut rng)?;
    println!(
        "wrote {} images across {} classes to {}",
        records.len(),
        spec.classes.len(),
        out.display()
    );
    Ok(())
}

/// Wall-clock one score+aggregation pass: scores of a query block against
/// keys, then the weighted sum of values.
fn measure_score_agg(n_tokens: usize, n_kv: usize, c: usize) -> std::time::Duration {
    let k: Vec<f32> = (0..n_kv * c).map(|i| (i % 13) as f32 * 0.1).collect();
    let q: Vec<f32> = (0..n_tokens * c).map(|i| (i % 7) as f32 * 0.1).collect();
    let mut agg = vec![0.0f32; n_tokens * c];
    let t0 = Instant::now();
    let mut scores = vec![0.0f32; n_kv];
    for t in 0..n_tokens {
        let qrow = &q[t * c..(t + 1) * c];
        for (s, krow) in scores.iter_mut().zip(k.chunks_exact(c)) {
            *s = qrow.iter().zip(krow).map(|(a, b)| a * b).sum();
        }
        let arow = &mut agg[t * c..(t + 1) * c];
        for (s, vrow) in scores.iter().zip(k.chunks_exact(c)) {
            for (a, v) in arow.iter_mut().zip(vrow) {
                *a += s * v;
            }
        }
    }
    std::hint::black_box(&agg);
    t0.elapsed()
}

fn cmd_bench_attn(dim: usize, nq: usize, ns: usize, heads: usize, measure: bool) -> Result<()> {
    if dim == 0 || nq == 0 || ns == 0 || heads == 0 {
        return Err(Error::config("bench-attn sizes must be positive"));
    }
    let proto = attention_cost(Scheme::ProtoQuery, dim, nq, ns, heads);
    let pixel = attention_cost(Scheme::PixelWise, dim, nq, ns, heads);
    println!("C = {dim}, N_q = {nq}, N_s = {ns}, heads = {heads}");
    for e in [&proto, &pixel] {
        println!("{}:", e.scheme);
        println!("  score+agg   {:>16} MACs  ({})", e.score_agg_macs, e.score_agg_formula);
        println!("  projections {:>16} MACs  ({})", e.projection_macs, e.projection_formula);
        println!("  total       {:>16} MACs", e.total_macs());
        println!("  peak attention weights: {} scalars", e.peak_weights);
    }
    println!(
        "score+agg ratio pixel_wise / proto_query = {} (= N_s)",
        pixel.score_agg_macs / proto.score_agg_macs
    );
    if measure {
        let tp = measure_score_agg(1, nq, dim);
        let tw = measure_score_agg(nq, ns, dim);
        println!("measured score+agg: proto_query {tp:?}, pixel_wise {tw:?}");
    }
    Ok(())
}

fn cmd_count_params(config: Option<&Path>, include_backbone: bool) -> Result<()> {
    let cfg = match config {
        Some(path) => Config::from_file(path)?,
        None => Config::default(),
    };
    cfg.validate()?;
    for (component, n) in param_breakdown(&cfg) {
        println!("{component:>10}  {n}");
    }
    let total = count_params(&cfg, include_backbone);
    let scope = if include_backbone { "with backbone" } else { "excluding backbone" };
    println!("total ({scope}): {total}");
    Ok(())
}

fn cmd_grad_check() -> Result<()> {
    let t0 = Instant::now();
    let mut ok = true;
    for (name, err) in op_grad_checks()? {
        let pass = err < GRAD_TOL;
        ok &= pass;
        println!("op {name:<12} max rel err {err:.3e}  {}", if pass { "ok" } else { "FAIL" });
    }
    let err = pipeline_grad_check(3, 7)?;
    let pass = err < GRAD_TOL;
    ok &= pass;
    println!("pipeline       max rel err {err:.3e}  {}", if pass { "ok" } else { "FAIL" });
    println!("elapsed {:.1?}", t0.elapsed());
    if ok {
        Ok(())
    } else {
        Err(Error::contract(format!("gradient check exceeded tolerance {GRAD_TOL:e}")))
    }
}

fn run(cli: Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Train { overrides, out } => cmd_train(overrides, out),
        Cmd::Eval { overrides, checkpoint, episodes, dump_masks, out } => {
            cmd_eval(overrides, checkpoint, *episodes, dump_masks.as_deref(), out)
        }
        Cmd::GenData { spec, out, seed } => cmd_gen_data(spec.as_deref(), out, *seed),
        Cmd::BenchAttn { dim, nq, ns, heads, measure } => {
            cmd_bench_attn(*dim, *nq, *ns, *heads, *measure)
        }
        Cmd::CountParams { config, include_backbone } => {
            cmd_count_params(config.as_deref(), *include_backbone)
        }
        Cmd::GradCheck => cmd_grad_check(),
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors before we get here
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
