//! `radpath`: batch front end for the registration pipeline, the digital
//! phantom and offline evaluation.
//!
//! Exit status: 0 on success, 1 on any error, 3 when the run finished and
//! wrote its artifacts but at least one slice (or phantom repetition)
//! failed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use radpath::evaluation::{
    dice_case, urethra_deviation, write_metrics_csv, CaseMasks, HausdorffAggregation, MetricReport,
};
use radpath::image::{read_label_volume, read_landmarks, LabelMask2D, LabelVolume3D, PointSet2D};
use radpath::phantom::{generate_case, run_study, StudyConfig};
use radpath::pipeline::{
    evaluate_case, load_case, read_slice_outcomes, run_case, with_threads, write_case_outputs, CaseManifest,
    MriLandmarkEntry,
};
use radpath::registration::RegistrationProfile;

const SLICE_FAILURE: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "radpath", version, about = "Radiology-pathology slice registration")]
struct Cli {
    /// More log output (-v debug, -vv trace).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    /// Only warnings and errors.
    #[arg(short, long, global = true, conflicts_with = "verbose")]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Register one case described by a manifest.
    Register(RegisterArgs),
    /// Generate a phantom case or run a phantom condition sweep.
    #[command(subcommand)]
    Phantom(PhantomCommand),
    /// Score existing results against reference annotations.
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug, Serialize)]
struct Threads {
    /// Worker threads; defaults to all cores.
    #[arg(long, env = "RAPSODI_THREADS")]
    threads: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
struct RegisterArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "standard", value_parser = clap::builder::PossibleValuesParser::new(RegistrationProfile::NAMES))]
    profile: String,
    #[command(flatten)]
    threads: Threads,
    #[arg(long, default_value = "radpath_out")]
    out: PathBuf,
    /// Also write per-stage optimiser traces.
    #[arg(long)]
    traces: bool,
    #[arg(long, value_enum, default_value_t = Aggregation::Mean)]
    hausdorff: Aggregation,
}

#[derive(Subcommand, Debug)]
enum PhantomCommand {
    /// Write one degraded phantom case (manifest, images, ground truth).
    Generate(PhantomArgs),
    /// Run every condition of the study grid and write tables and curves.
    Study(PhantomArgs),
}

#[derive(Args, Debug, Serialize)]
struct PhantomArgs {
    /// Study configuration JSON; omitted fields take their defaults.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Repetitions per condition (study only).
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(RegistrationProfile::NAMES))]
    profile: Option<String>,
    #[command(flatten)]
    threads: Threads,
    #[arg(long, default_value = "phantom_out")]
    out: PathBuf,
    /// Skip the SVG curves (study only).
    #[arg(long)]
    no_curves: bool,
}

#[derive(Args, Debug, Serialize)]
struct EvaluateArgs {
    /// Output directory of a `register` run.
    #[arg(long)]
    results: PathBuf,
    /// Reference annotations: a reference JSON or a case manifest.
    #[arg(long)]
    reference: PathBuf,
    /// Where to write the metrics; defaults to the results directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Aggregation::Mean)]
    hausdorff: Aggregation,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum Aggregation {
    Mean,
    Max,
}

impl From<Aggregation> for HausdorffAggregation {
    fn from(a: Aggregation) -> Self {
        match a {
            Aggregation::Mean => HausdorffAggregation::Mean,
            Aggregation::Max => HausdorffAggregation::Max,
        }
    }
}

/// Written next to every run's outputs.
#[derive(Serialize)]
struct Reproducibility<'a, A: Serialize, C: Serialize> {
    command: &'a str,
    version: &'a str,
    argv: Vec<String>,
    args: &'a A,
    seed: Option<u64>,
    threads: Option<usize>,
    resolved: C,
}

fn write_record<A: Serialize, C: Serialize>(
    dir: &Path,
    command: &str,
    args: &A,
    seed: Option<u64>,
    threads: Option<usize>,
    resolved: C,
) -> Result<()> {
    let record = Reproducibility {
        command,
        version: radpath::VERSION,
        argv: std::env::args().collect(),
        args,
        seed,
        threads,
        resolved,
    };
    let path = dir.join("reproducibility.json");
    fs::write(&path, serde_json::to_string_pretty(&record)?).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

fn log_profile(p: &RegistrationProfile) {
    let levels: Vec<usize> = p.levels().iter().map(|l| l.0).collect();
    if p.fast_mode {
        info!("profile {}: fast mode, Step 1 (stack reconstruction) skipped, pyramid {levels:?}", p.name);
    } else if !p.reconstruct {
        info!("profile {}: Step 1 (stack reconstruction) disabled, pyramid {levels:?}", p.name);
    } else {
        info!("profile {}: pyramid {levels:?}", p.name);
    }
}

fn cmd_register(args: &RegisterArgs) -> Result<u8> {
    let manifest = CaseManifest::load(&args.manifest)
        .with_context(|| format!("manifest {}", args.manifest.display()))?;
    let base = RegistrationProfile::by_name(&args.profile)?;
    let profile = manifest.profile(&base)?;
    log_profile(&profile);
    let inputs = load_case(&manifest).with_context(|| format!("case '{}'", manifest.case_id))?;
    info!("case {}: {} histology slices", inputs.case_id, inputs.slices.len());

    let (_, result) = with_threads(args.threads.threads, || run_case(&inputs, &profile))?
        .with_context(|| format!("case '{}'", inputs.case_id))?;
    let metrics = match evaluate_case(&inputs, &result, args.hausdorff.into()) {
        Ok(m) => Some(m),
        Err(e) => {
            warn!("case {}: no metrics ({e})", inputs.case_id);
            None
        }
    };
    create_dir(&args.out)?;
    write_case_outputs(&args.out, &result, metrics.as_ref(), args.traces)?;
    write_record(
        &args.out,
        "register",
        args,
        None,
        args.threads.threads,
        serde_json::json!({ "manifest": manifest, "profile": profile }),
    )?;
    if let Some(m) = &metrics {
        info!(
            "case {}: dice {:.4}, hausdorff {}, landmarks {}",
            m.case_id,
            m.dice,
            fmt_mm(m.hausdorff_mm),
            fmt_mm(m.landmark_dev_mm)
        );
    }
    for w in &result.warnings {
        warn!("{w}");
    }
    let failed = result.failed_slices();
    if failed.is_empty() {
        return Ok(0);
    }
    eprintln!("{} of {} slices failed:", failed.len(), result.outcomes.len());
    for o in failed {
        eprintln!(
            "  histology slice {} (MRI slice {}): {}",
            o.histology_index,
            o.mri_slice_index,
            o.error.as_deref().unwrap_or("unknown error")
        );
    }
    Ok(SLICE_FAILURE)
}

fn fmt_mm(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |v| format!("{v:.3} mm"))
}

fn load_study(args: &PhantomArgs) -> Result<StudyConfig> {
    let mut config: StudyConfig = match &args.spec {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => StudyConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.degradation.seed = seed;
    }
    if let Some(reps) = args.reps {
        config.grid.reps = reps;
    }
    config.geometry.validate()?;
    config.degradation.validate()?;
    config.grid.validate()?;
    Ok(config)
}

fn study_profile(config: &StudyConfig, name: Option<&str>) -> Result<RegistrationProfile> {
    let base = RegistrationProfile::by_name(name.unwrap_or("standard"))?;
    Ok(match &config.profile {
        Some(o) => base.with_overrides(o)?,
        None => base,
    })
}

fn cmd_phantom_generate(args: &PhantomArgs) -> Result<u8> {
    let config = load_study(args)?;
    let case = generate_case(&config.geometry, &config.appearance, &config.degradation, "phantom")?;
    for w in &case.warnings {
        warn!("{w}");
    }
    create_dir(&args.out)?;
    case.save(&args.out)?;
    write_record(&args.out, "phantom generate", args, Some(config.degradation.seed), None, &config)?;
    info!(
        "phantom case with {} slices written to {}",
        case.inputs.slices.len(),
        args.out.join("manifest.json").display()
    );
    Ok(0)
}

fn cmd_phantom_study(args: &PhantomArgs) -> Result<u8> {
    let config = load_study(args)?;
    let profile = study_profile(&config, args.profile.as_deref())?;
    log_profile(&profile);
    let table = with_threads(args.threads.threads, || {
        run_study(&config.geometry, &config.appearance, &config.degradation, &config.grid, &profile)
    })??;
    create_dir(&args.out)?;
    let written = table.write(&args.out, !args.no_curves)?;
    write_record(
        &args.out,
        "phantom study",
        args,
        Some(config.degradation.seed),
        args.threads.threads,
        serde_json::json!({ "config": config, "profile": profile }),
    )?;
    info!("wrote {} files to {}", written.len(), args.out.display());
    let failed: usize = table.conditions.iter().map(|c| c.failed).sum();
    if failed > 0 {
        eprintln!("{failed} phantom repetitions failed:");
        for c in &table.conditions {
            for r in c.reps.iter().filter(|r| r.error.is_some()) {
                eprintln!("  {} rep {}: {}", c.condition.label(), r.rep, r.error.as_deref().unwrap_or(""));
            }
        }
        return Ok(SLICE_FAILURE);
    }
    Ok(0)
}

/// Reference annotations on the MRI grid.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Reference {
    #[serde(default)]
    case_id: Option<String>,
    prostate_mask: PathBuf,
    #[serde(default)]
    urethra_mask: Option<PathBuf>,
    #[serde(default)]
    cancer_mask: Option<PathBuf>,
    #[serde(default)]
    landmarks: Vec<MriLandmarkEntry>,
    /// MRI slices to score; defaults to the slices the results registered.
    #[serde(default)]
    slices: Option<Vec<usize>>,
}

impl Reference {
    /// Either a reference document or a case manifest, whose MRI side
    /// serves as the reference. Relative paths resolve against the file.
    fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading reference {}", path.display()))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).with_context(|| format!("parsing reference {}", path.display()))?;
        if value.get("mri").is_some() {
            let m = CaseManifest::load(path)?;
            return Ok(Reference {
                case_id: Some(m.case_id.clone()),
                prostate_mask: m.mri.prostate_mask,
                urethra_mask: m.mri.urethra_mask,
                cancer_mask: m.mri.cancer_mask,
                landmarks: m.mri.landmarks.unwrap_or_default(),
                slices: Some(m.histology.slices.iter().map(|s| s.mri_slice_index).collect()),
            });
        }
        let mut r: Reference =
            serde_json::from_value(value).with_context(|| format!("reference {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut r.prostate_mask);
        r.urethra_mask.iter_mut().for_each(fix);
        r.cancer_mask.iter_mut().for_each(fix);
        r.landmarks.iter_mut().for_each(|l| fix(&mut l.path));
        Ok(r)
    }
}

/// Dice and centre-of-mass deviation of a cancer label.
#[derive(Debug, Serialize)]
struct LabelComparison {
    /// Mean Dice over slices where either side is annotated.
    dice: Option<f64>,
    com_dev_mm: Option<f64>,
    n_slices: usize,
    n_com_slices: usize,
}

fn compare_label(reference: &[LabelMask2D], mapped: &[LabelMask2D]) -> Result<LabelComparison> {
    let (a, b): (Vec<LabelMask2D>, Vec<LabelMask2D>) = reference
        .iter()
        .zip(mapped)
        .filter(|(a, b)| a.foreground_count() + b.foreground_count() > 0)
        .map(|(a, b)| (a.foreground(), b.foreground()))
        .unzip();
    let dice = if a.is_empty() { None } else { Some(dice_case(&a, &b, 1)?) };
    let (com_dev_mm, n_com_slices) = match urethra_deviation(&a, &b) {
        Ok((d, n, _)) => (Some(d), n),
        Err(_) => (None, 0),
    };
    Ok(LabelComparison {
        dice,
        com_dev_mm,
        n_slices: a.len(),
        n_com_slices,
    })
}

#[derive(Serialize)]
struct Evaluation {
    report: MetricReport,
    cancer: Option<LabelComparison>,
}

fn slices_of(v: &LabelVolume3D, idx: &[usize]) -> Result<Vec<LabelMask2D>> {
    idx.iter()
        .map(|&k| v.slice(k).map(|s| s.foreground()).with_context(|| format!("MRI slice {k}")))
        .collect()
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<u8> {
    let reference = Reference::load(&args.reference)?;
    let results = &args.results;
    let mapped_path = results.join("mapped_prostate.nii.gz");
    if !mapped_path.exists() {
        bail!("results directory {} has no mapped_prostate.nii.gz", results.display());
    }
    let mapped = read_label_volume(&mapped_path)?;
    let ref_prostate = read_label_volume(&reference.prostate_mask)
        .with_context(|| format!("reference prostate mask {}", reference.prostate_mask.display()))?;
    if !ref_prostate.grid().same_as(mapped.grid()) || ref_prostate.depth() != mapped.depth() {
        bail!("reference prostate mask and mapped volume are on different grids");
    }

    let idx: Vec<usize> = match &reference.slices {
        Some(s) => s.clone(),
        None => match read_slice_outcomes(results) {
            Ok(outcomes) => outcomes.iter().map(|o| o.mri_slice_index).collect(),
            Err(_) => (0..mapped.depth())
                .filter(|&k| {
                    let count = |v: &LabelVolume3D| v.slice(k).map_or(0, |s| s.foreground_count());
                    count(&mapped) + count(&ref_prostate) > 0
                })
                .collect(),
        },
    };
    if idx.is_empty() {
        bail!("no MRI slices to evaluate");
    }
    let optional = |path: PathBuf, what: &str| -> Result<Option<LabelVolume3D>> {
        if path.exists() {
            Ok(Some(read_label_volume(&path).with_context(|| format!("{what} {}", path.display()))?))
        } else {
            Ok(None)
        }
    };
    let mapped_urethra = optional(results.join("mapped_urethra.nii.gz"), "mapped urethra")?;
    let mapped_cancer = optional(results.join("mapped_cancer.nii.gz"), "mapped cancer")?;
    let ref_urethra = reference.urethra_mask.as_ref().map(read_label_volume).transpose()?;
    let ref_cancer = reference.cancer_mask.as_ref().map(read_label_volume).transpose()?;

    let landmarks_path = results.join("mapped_landmarks.json");
    let mapped_landmarks: BTreeMap<usize, PointSet2D> = if landmarks_path.exists() {
        serde_json::from_str(&fs::read_to_string(&landmarks_path)?)
            .with_context(|| format!("parsing {}", landmarks_path.display()))?
    } else {
        BTreeMap::new()
    };
    let mut ref_landmarks = BTreeMap::new();
    for l in &reference.landmarks {
        ref_landmarks.insert(l.mri_slice_index, read_landmarks(&l.path)?);
    }
    let (lr, lm): (Vec<PointSet2D>, Vec<PointSet2D>) = idx
        .iter()
        .filter_map(|k| Some((ref_landmarks.get(k)?.clone(), mapped_landmarks.get(k)?.clone())))
        .unzip();

    let rp = slices_of(&ref_prostate, &idx)?;
    let mp = slices_of(&mapped, &idx)?;
    let (ru, mu) = match (&ref_urethra, &mapped_urethra) {
        (Some(a), Some(b)) => (Some(slices_of(a, &idx)?), Some(slices_of(b, &idx)?)),
        _ => (None, None),
    };
    let masks = CaseMasks {
        mri_prostate: &rp,
        mapped_prostate: &mp,
        mri_urethra: ru.as_deref(),
        mapped_urethra: mu.as_deref(),
        mri_landmarks: (!lr.is_empty()).then_some(lr.as_slice()),
        mapped_landmarks: (!lm.is_empty()).then_some(lm.as_slice()),
    };
    let case_id = reference.case_id.clone().unwrap_or_else(|| "case".into());
    let report = MetricReport::compute(&case_id, &masks, args.hausdorff.into())?;
    let cancer = match (&ref_cancer, &mapped_cancer) {
        (Some(a), Some(b)) => Some(compare_label(&slices_of(a, &idx)?, &slices_of(b, &idx)?)?),
        (Some(_), None) => {
            warn!("reference has a cancer mask but the results have none");
            None
        }
        _ => None,
    };

    let out = args.out.clone().unwrap_or_else(|| results.clone());
    create_dir(&out)?;
    write_metrics_csv(&out.join("evaluation.csv"), &[report.csv_row()])?;
    let evaluation = Evaluation { report, cancer };
    fs::write(out.join("evaluation.json"), serde_json::to_string_pretty(&evaluation)?)?;
    write_record(&out, "evaluate", args, None, None, &reference)?;
    let r = &evaluation.report;
    println!(
        "{}: dice {:.4} hausdorff {} urethra {} landmarks {} ({} slices)",
        r.case_id,
        r.dice,
        fmt_mm(r.hausdorff_mm),
        fmt_mm(r.urethra_dev_mm),
        fmt_mm(r.landmark_dev_mm),
        r.n_slices
    );
    if let Some(c) = &evaluation.cancer {
        println!(
            "cancer: dice {} centre-of-mass deviation {}",
            c.dice.map_or("n/a".into(), |d| format!("{d:.4}")),
            fmt_mm(c.com_dev_mm)
        );
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => "warn",
        (_, 0) => "info",
        (_, 1) => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    let outcome = match &cli.command {
        Command::Register(a) => cmd_register(a),
        Command::Phantom(PhantomCommand::Generate(a)) => cmd_phantom_generate(a),
        Command::Phantom(PhantomCommand::Study(a)) => cmd_phantom_study(a),
        Command::Evaluate(a) => cmd_evaluate(a),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
