use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use handcontact::annotations::{dataset_stats, read_annotations};
use handcontact::baseline::{self, BaselineConfig, FEATURE_DIMS};
use handcontact::checkpoint;
use handcontact::evaluation::{evaluate, read_detections, render_pr_svg, DetectionRecord};
use handcontact::features::{for_each_feature, read_features, Example};
use handcontact::geometry::size_filter;
use handcontact::gradcheck::{grad_check, GradCheckConfig, GradCheckTarget};
use handcontact::head::{predict, ContactModel, ContactState, NUM_STATES};
use handcontact::io::write_records;
use handcontact::synth::{self, PlantedRule, SyntheticSpec};
use handcontact::train::{self, TrainConfig};
use handcontact::Error;

const LOG_ENV: &str = "HANDCONTACT_LOG";

#[derive(Parser)]
#[command(name = "handcontact", version, about = "Hand contact-state estimation toolkit")]
struct Cli {
    /// TOML config file with [synth], [train] and [baseline] tables.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compare analytic gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Generate a synthetic feature file with planted contact rules.
    Gen(GenArgs),
    /// Train the contact head.
    Train(TrainArgs),
    /// Score hands in a feature file with a trained checkpoint.
    Infer(InferArgs),
    /// Joint detection and contact AP.
    Eval(EvalArgs),
    /// Per-state label tallies of an annotation file.
    Stats(StatsArgs),
    /// Pose-heuristic baseline.
    Baseline(BaselineArgs),
}

#[derive(Args)]
struct GradcheckArgs {
    /// Restrict to these modules (repeatable).
    #[arg(long = "module")]
    modules: Vec<GradCheckTarget>,
    #[arg(long, default_value_t = 5)]
    trials: usize,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Default)]
struct SynthFlags {
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    k_min: Option<usize>,
    #[arg(long)]
    k_max: Option<usize>,
    #[arg(long)]
    rule: Option<PlantedRule>,
    #[arg(long)]
    noise_std: Option<f64>,
    #[arg(long)]
    unsure_rate: Option<f64>,
    #[arg(long)]
    synth_seed: Option<u64>,
}

impl SynthFlags {
    fn apply(&self, s: &mut SyntheticSpec) {
        set(&mut s.samples, self.samples);
        set(&mut s.n, self.n);
        set(&mut s.d, self.d);
        set(&mut s.k_min, self.k_min);
        set(&mut s.k_max, self.k_max);
        set(&mut s.rule, self.rule);
        set(&mut s.noise_std, self.noise_std);
        set(&mut s.unsure_rate, self.unsure_rate);
        set(&mut s.seed, self.synth_seed);
    }
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    synth: SynthFlags,
    /// Output feature file.
    #[arg(long)]
    out: PathBuf,
    /// Also write a matching annotation file.
    #[arg(long)]
    annotations: Option<PathBuf>,
}

#[derive(Args, Default)]
struct AblationFlags {
    /// Drop the cross-feature affinity path.
    #[arg(long)]
    ablate_cross: bool,
    /// Drop the spatial attention scores.
    #[arg(long)]
    ablate_spatial: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Labelled feature file; a synthetic set is generated when omitted.
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Metric trace output (one JSON record per step).
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    plateau_patience: Option<usize>,
    #[arg(long)]
    lr_decay: Option<f64>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    fc_width: Option<usize>,
    #[arg(long)]
    maps: Option<usize>,
    #[arg(long)]
    gn_groups: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    ablation: AblationFlags,
    #[command(flatten)]
    synth: SynthFlags,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    features: PathBuf,
    /// Output detection file.
    #[arg(long)]
    out: PathBuf,
    /// Score with the fully-connected paths only.
    #[arg(long)]
    ablate_spatial: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long)]
    detections: PathBuf,
    /// Write precision-recall curves as SVG.
    #[arg(long)]
    plot: Option<PathBuf>,
    /// Write the full result as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    annotations: PathBuf,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long)]
    keypoints: PathBuf,
    /// Held-out annotation and keypoint files.
    #[arg(long, requires = "test_keypoints")]
    test_annotations: Option<PathBuf>,
    #[arg(long, requires = "test_annotations")]
    test_keypoints: Option<PathBuf>,
    /// Write the 52-value features of every hand as CSV.
    #[arg(long)]
    dump: Option<PathBuf>,
    /// Write scored ground-truth boxes of the evaluation set as detections.
    #[arg(long)]
    detections: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct Config {
    synth: SyntheticSpec,
    train: TrainConfig,
    baseline: BaselineConfig,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    let Some(path) = path else {
        return Ok(Config::default());
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())).into())
}

fn echo<T: Serialize>(table: &str, value: &T) -> Result<()> {
    #[derive(Serialize)]
    struct Wrap<'a, T> {
        #[serde(flatten)]
        inner: std::collections::BTreeMap<&'a str, &'a T>,
    }
    let mut inner = std::collections::BTreeMap::new();
    inner.insert(table, value);
    let text = toml::to_string(&Wrap { inner }).context("serialising effective config")?;
    println!("# effective config");
    for line in text.lines() {
        println!("# {line}");
    }
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn fmt_acc(a: Option<f64>) -> String {
    a.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<ExitCode> {
    let cfg = GradCheckConfig {
        targets: if args.modules.is_empty() {
            GradCheckTarget::ALL.to_vec()
        } else {
            args.modules
        },
        trials: args.trials,
        tolerance: args.tolerance,
        seed: args.seed,
        ..GradCheckConfig::default()
    };
    let started = std::time::Instant::now();
    let report = grad_check(&cfg)?;
    for t in &cfg.targets {
        println!("{:<16} max rel err {:.3e}", t.name(), report.max_rel_err_for(*t));
    }
    let failures: Vec<_> = report.failures().collect();
    for f in &failures {
        println!(
            "FAIL {} trial {} (n={}, d={}) tensor {} index {}: analytic {:.6e} numeric {:.6e} rel err {:.3e}",
            f.target, f.trial, f.shape_nd.0, f.shape_nd.1, f.tensor, f.index, f.analytic, f.numeric, f.rel_err
        );
    }
    println!(
        "{} tensors checked in {:.2?}; {} above tolerance {:e}",
        report.tensors.len(),
        started.elapsed(),
        failures.len(),
        cfg.tolerance
    );
    Ok(if failures.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn cmd_gen(args: GenArgs, mut config: Config) -> Result<ExitCode> {
    args.synth.apply(&mut config.synth);
    echo("synth", &config.synth)?;
    let samples = synth::generate(&config.synth)?;
    write_records(&args.out, &synth::to_feature_records(&samples))?;
    if let Some(path) = &args.annotations {
        write_records(path, &synth::to_annotations(&samples))?;
    }
    println!("wrote {} samples to {}", samples.len(), args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(args: TrainArgs, mut config: Config) -> Result<ExitCode> {
    let t = &mut config.train;
    set(&mut t.lr, args.lr);
    set(&mut t.batch, args.batch);
    set(&mut t.max_steps, args.max_steps);
    set(&mut t.plateau_patience, args.plateau_patience);
    set(&mut t.lr_decay, args.lr_decay);
    set(&mut t.eval_every, args.eval_every);
    set(&mut t.lambda, args.lambda);
    set(&mut t.fc_width, args.fc_width);
    set(&mut t.maps, args.maps);
    set(&mut t.gn_groups, args.gn_groups);
    set(&mut t.seed, args.seed);
    t.ablate_cross |= args.ablation.ablate_cross;
    t.ablate_spatial |= args.ablation.ablate_spatial;
    echo("train", &config.train)?;

    let examples: Vec<Example> = match &args.features {
        Some(path) => read_features(path)?.iter().map(|r| r.to_example()).collect(),
        None => {
            args.synth.apply(&mut config.synth);
            echo("synth", &config.synth)?;
            synth::generate(&config.synth)?.into_iter().map(|s| s.example).collect()
        }
    };
    let mut trace = args.trace.as_deref().map(create).transpose()?;
    let (model, report) = train::fit(
        &examples,
        &config.train,
        trace.as_mut().map(|w| w as &mut dyn Write),
    )?;
    if let Some(mut w) = trace {
        w.flush()?;
    }
    checkpoint::save(&args.checkpoint, &model)?;
    println!(
        "trained {} steps; final lr {:e}; trailing-100 loss {:.5}",
        report.steps,
        report.final_lr,
        report.trailing_loss(100)
    );
    if let Some(m) = report.heldout {
        println!("held-out loss {:.5}", m.loss);
        for s in ContactState::ALL {
            println!("  {:<14} accuracy {}", s.name(), fmt_acc(m.accuracy[s.index()]));
        }
    }
    println!("checkpoint written to {}", args.checkpoint.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_infer(args: InferArgs) -> Result<ExitCode> {
    let ckpt = checkpoint::read(&args.checkpoint)?;
    let mut cfg = ckpt.config.clone();
    cfg.use_spatial &= !args.ablate_spatial;
    echo("head", &cfg)?;
    let mut model = ContactModel::new(cfg)?;
    checkpoint::load_into(&ckpt, &mut model)?;

    let mut out = create(&args.out)?;
    let mut written = 0usize;
    let mut correct = [0usize; NUM_STATES];
    let mut total = [0usize; NUM_STATES];
    for_each_feature(&args.features, |rec, line| {
        if rec.unions.is_empty() {
            log::debug!("line {line}: no objects; scoring the hand region alone");
        }
        let logits = model.infer(&rec.hand, &rec.unions)?;
        let probs = predict(&logits);
        if let Some(label) = &rec.label {
            for s in ContactState::ALL {
                if let Some(t) = label.get(s).target() {
                    total[s.index()] += 1;
                    correct[s.index()] += usize::from((probs[s.index()] > 0.5) == (t > 0.5));
                }
            }
        }
        let det = DetectionRecord {
            image_id: rec.image_id,
            bbox: rec.bbox,
            det_score: rec.det_score,
            contact_probs: probs,
        };
        serde_json::to_writer(&mut out, &det).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
        written += 1;
        Ok(())
    })?;
    out.flush()?;
    println!("scored {written} hands into {}", args.out.display());
    if total.iter().any(|&t| t > 0) {
        for s in ContactState::ALL {
            let i = s.index();
            let acc = (total[i] > 0).then(|| correct[i] as f64 / total[i] as f64);
            println!("  {:<14} accuracy {}", s.name(), fmt_acc(acc));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(args: EvalArgs) -> Result<ExitCode> {
    let gts = read_annotations(&args.annotations)?;
    let dets = read_detections(&args.detections)?;
    let summary = evaluate(&dets, &gts)?;
    for c in &summary.per_state {
        let ap = c.ap.map_or_else(|| "n/a".to_string(), |v| format!("{:.4}", 100.0 * v));
        println!(
            "{:<14} AP {:>8}  (gt {}, ignored {})",
            c.state, ap, c.num_gt, c.num_ignored
        );
    }
    println!("mAP {:.4}", 100.0 * summary.map);
    if let Some(path) = &args.plot {
        std::fs::write(path, render_pr_svg(&summary.per_state))?;
    }
    if let Some(path) = &args.json {
        let mut w = create(path)?;
        serde_json::to_writer_pretty(&mut w, &summary)?;
        w.flush()?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_stats(args: StatsArgs) -> Result<ExitCode> {
    let records = read_annotations(&args.annotations)?;
    let stats = dataset_stats(&records);
    let kept: usize = records
        .iter()
        .map(|r| r.hands.iter().filter(|h| size_filter(&h.quad, r.height, r.width)).count())
        .sum();
    println!("images {}", stats.images);
    println!("hands {} ({} pass the size filter)", stats.hands, kept);
    println!("{:<14} {:>8} {:>8} {:>8}", "state", "yes", "no", "unsure");
    for s in ContactState::ALL {
        let t = stats.per_state[s.index()];
        println!("{:<14} {:>8} {:>8} {:>8}", s.name(), t.yes, t.no, t.unsure);
    }
    Ok(ExitCode::SUCCESS)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn cmd_baseline(args: BaselineArgs, mut config: Config) -> Result<ExitCode> {
    set(&mut config.baseline.epochs, args.epochs);
    set(&mut config.baseline.lr, args.lr);
    echo("baseline", &config.baseline)?;
    let load = |ann: &Path, kp: &Path| -> Result<Vec<baseline::HandSample>> {
        let images = read_annotations(ann)?;
        let poses = baseline::read_keypoints(kp)?;
        let (samples, skipped) = baseline::collect_samples(&images, &poses)?;
        println!("{}: {} hands with features, {} skipped", ann.display(), samples.len(), skipped);
        Ok(samples)
    };
    let train_set = load(&args.annotations, &args.keypoints)?;
    let test_set = match (&args.test_annotations, &args.test_keypoints) {
        (Some(a), Some(k)) => Some(load(a, k)?),
        _ => None,
    };

    if let Some(path) = &args.dump {
        let mut w = create(path)?;
        let header: Vec<String> = (0..FEATURE_DIMS).map(|i| format!("h{i}")).collect();
        writeln!(w, "image_id,hand,{}", header.join(","))?;
        for s in &train_set {
            let values: Vec<String> = s.feature.to_vec().iter().map(|v| v.to_string()).collect();
            writeln!(w, "{},{},{}", csv_field(&s.image_id), s.hand_index, values.join(","))?;
        }
        w.flush()?;
    }

    let pairs = |set: &[baseline::HandSample]| -> Vec<(Vec<f64>, _)> {
        set.iter().map(|s| (s.feature.to_vec(), s.label)).collect()
    };
    let train_pairs = pairs(&train_set);
    let model = baseline::train_baseline(&train_pairs, &config.baseline);
    let report = |name: &str, data: &[(Vec<f64>, _)]| {
        let acc = baseline::accuracy(&model, data);
        println!("{name} accuracy");
        for s in ContactState::ALL {
            let trained = if model.states[s.index()].trained { "" } else { " (untrained)" };
            println!("  {:<14} {}{trained}", s.name(), fmt_acc(acc[s.index()]));
        }
    };
    report("training", &train_pairs);
    let scored = match &test_set {
        Some(t) => {
            report("held-out", &pairs(t));
            t
        }
        None => &train_set,
    };
    if let Some(path) = &args.detections {
        let dets: Vec<DetectionRecord> = scored
            .iter()
            .map(|s| DetectionRecord {
                image_id: s.image_id.clone(),
                bbox: s.bbox,
                det_score: 1.0,
                contact_probs: model.predict(&s.feature.to_vec()),
            })
            .collect();
        write_records(path, &dets)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn exit_code_for(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Divergence { .. } | Error::Numeric(_) | Error::Evaluation(_)) => 1,
        _ => 2,
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let config = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Gen(a) => cmd_gen(a, config),
        Command::Train(a) => cmd_train(a, config),
        Command::Infer(a) => cmd_infer(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Stats(a) => cmd_stats(a),
        Command::Baseline(a) => cmd_baseline(a, config),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
