//! Command-line harness: phantom generation, per-plane training, three-view
//! inference, metric evaluation, paired statistics, the numerical
//! verification batteries, and weight-map visualization.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use vinn_core::config::RunConfig;
use vinn_core::data::{
    conform, load_checkpoint, load_intensity, load_labels, render_phantom, restore_model,
    save_checkpoint, save_intensity, save_labels, LabelTable, Manifest, ManifestEntry,
    PhantomSpec, Split,
};
use vinn_core::eval::{
    asd, class_mask, dsc, paired_stats, AggregateWeights, EvalError, EvalRecord, MetricKind,
};
use vinn_core::gradcheck;
use vinn_core::loss::{mask_radius, slice_weight_map};
use vinn_core::model::{Model, Plane};
use vinn_core::resnorm::{VOXEL_MM_MIN, VOXEL_MM_MAX};
use vinn_core::trainer::{classes_for_plane, segment_volume, train};

#[derive(Parser)]
#[command(name = "vinn", version, about = "Resolution-independent phantom segmentation harness")]
struct Cli {
    /// Force single-threaded, bit-reproducible execution.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render procedural phantom volumes and a split manifest.
    PhantomGen(PhantomGenArgs),
    /// Train one plane model from a config file and a manifest.
    Train(TrainArgs),
    /// Segment a volume with three per-plane checkpoints.
    Infer(InferArgs),
    /// Score predicted segmentations against manifest ground truth.
    Evaluate(EvaluateArgs),
    /// Paired per-structure Wilcoxon tests between two result files.
    Stats(StatsArgs),
    /// Run the forward-oracle and gradient verification batteries.
    Gradcheck(GradcheckArgs),
    /// Dump the loss weight-map components of one slice as PGM images.
    Masks(MasksArgs),
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run() -> Result<ExitCode> {
    let cli = Cli::parse();
    let workers = effective_workers(cli.deterministic)?;
    debug_assert_eq!(workers, 1);
    match cli.command {
        Command::PhantomGen(a) => cmd_phantom_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Stats(a) => cmd_stats(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Masks(a) => cmd_masks(a),
    }
}

/// Validates `VINN_THREADS` and resolves the worker count. Every numerical
/// path in this build executes single-threaded, so the effective count is
/// capped at 1; the variable is still validated as part of the interface.
fn effective_workers(deterministic: bool) -> Result<usize> {
    let requested = match std::env::var("VINN_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .with_context(|| format!("VINN_THREADS must be a positive integer, got `{v}`"))?,
        Err(_) => 1,
    };
    Ok(if deterministic { 1 } else { requested.min(1) })
}

// ---------------------------------------------------------------------------
// phantom-gen
// ---------------------------------------------------------------------------

#[derive(Args)]
struct PhantomGenArgs {
    /// Directory for volume pairs and the manifest.
    #[arg(long)]
    out_dir: PathBuf,
    /// Base seed; phantom i uses seed + i.
    #[arg(long, default_value_t = 2026)]
    seed: u64,
    /// Number of phantoms to render.
    #[arg(long, default_value_t = 12)]
    count: usize,
    /// Voxel sizes in mm, assigned round-robin.
    #[arg(long, value_delimiter = ',', default_value = "0.7,0.8,1.0")]
    voxel_mm: Vec<f64>,
    /// Override the field of view (mm).
    #[arg(long)]
    fov_mm: Option<f64>,
    /// Override the cortical sulcus width (mm).
    #[arg(long)]
    sulcus_width_mm: Option<f64>,
    /// How many of the last phantoms go to the validation split.
    #[arg(long, default_value_t = 3)]
    val: usize,
    /// How many of the very last phantoms go to the test split.
    #[arg(long, default_value_t = 0)]
    test: usize,
}

fn cmd_phantom_gen(a: PhantomGenArgs) -> Result<ExitCode> {
    if a.voxel_mm.is_empty() {
        bail!("need at least one voxel size");
    }
    if a.val + a.test > a.count {
        bail!("val ({}) + test ({}) exceed count ({})", a.val, a.test, a.count);
    }
    fs::create_dir_all(&a.out_dir)?;
    let table = LabelTable::desk();
    let mut manifest = Manifest::default();
    for i in 0..a.count {
        let mut spec = PhantomSpec::desk(a.seed.wrapping_add(i as u64));
        if let Some(fov) = a.fov_mm {
            spec.fov_mm = fov;
        }
        if let Some(w) = a.sulcus_width_mm {
            spec = spec.with_sulcus_width(w);
        }
        let res = a.voxel_mm[i % a.voxel_mm.len()];
        let split = if i >= a.count - a.test {
            Split::Test
        } else if i >= a.count - a.test - a.val {
            Split::Val
        } else {
            Split::Train
        };
        let (raw, labels) = render_phantom(&spec, res, &table)
            .with_context(|| format!("phantom {i} at {res} mm"))?;
        let image = conform(&raw, [res; 3])?;
        let prefix = format!("p{i:03}");
        save_intensity(&image, &a.out_dir.join(format!("{prefix}.img.vvol")))?;
        save_labels(&labels, &a.out_dir.join(format!("{prefix}.lab.vvol")))?;
        let d = labels.data.dim();
        println!("{prefix}  {res:>4} mm  {}x{}x{}  {split}", d.0, d.1, d.2);
        manifest.entries.push(ManifestEntry { prefix, voxel_mm: res, split });
    }
    let path = a.out_dir.join("manifest.json");
    manifest.save(&path)?;
    println!("wrote {} phantoms and {}", a.count, path.display());
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Args)]
struct TrainArgs {
    /// Run configuration (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset manifest; volume paths resolve relative to its directory.
    #[arg(long)]
    manifest: PathBuf,
    /// Slicing plane of the model to train.
    #[arg(long)]
    plane: Plane,
    /// Output directory for checkpoint, CSV log, and JSON summary.
    #[arg(long)]
    out_dir: PathBuf,
}

fn cmd_train(a: TrainArgs) -> Result<ExitCode> {
    let cfg = match &a.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    };
    cfg.validate()?;
    let manifest = Manifest::load(&a.manifest)?;
    let root = a.manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
    let table = LabelTable::desk();
    let classes = classes_for_plane(&table, a.plane);
    let spec = cfg.network_spec(a.plane, classes);
    let settings = cfg.train_settings();
    fs::create_dir_all(&a.out_dir)?;

    let started = Instant::now();
    let outcome = train(&spec, &settings, &root, &manifest, &table)?;
    let wall = started.elapsed().as_secs_f64();

    let ckpt_path = a.out_dir.join(format!("model-{}.ckpt", a.plane));
    save_checkpoint(&outcome.checkpoint.spec, &outcome.checkpoint.store, &ckpt_path)?;

    let mut csv = String::from("epoch,lr,mean_loss,val_dsc\n");
    for e in &outcome.log {
        writeln!(csv, "{},{},{},{}", e.epoch, e.lr, e.mean_loss, e.val_dsc)?;
    }
    let csv_path = a.out_dir.join(format!("train-{}.csv", a.plane));
    fs::write(&csv_path, csv)?;

    let final_val = outcome.log.last().map(|e| e.val_dsc);
    let summary = serde_json::json!({
        "plane": a.plane.to_string(),
        "spec": outcome.checkpoint.spec,
        "epochs_run": outcome.log.len(),
        "final_val_dsc": final_val,
        "wall_seconds": wall,
        "checkpoint": ckpt_path.file_name().and_then(|s| s.to_str()),
        "diverged": outcome.diverged.as_ref().map(|d| {
            serde_json::json!({ "epoch": d.epoch, "step": d.step })
        }),
    });
    fs::write(
        a.out_dir.join(format!("train-{}.json", a.plane)),
        serde_json::to_string_pretty(&summary)?,
    )?;

    for e in &outcome.log {
        println!(
            "epoch {:>3}  lr {:.6}  loss {:>10.4}  val dsc {:6.2}",
            e.epoch, e.lr, e.mean_loss, e.val_dsc
        );
    }
    if let Some(d) = &outcome.diverged {
        eprintln!(
            "training diverged at epoch {} step {}; checkpoint holds the last completed epoch",
            d.epoch, d.step
        );
        return Ok(ExitCode::from(3));
    }
    println!(
        "trained {} epochs in {wall:.1}s, final val dsc {:.2}, wrote {}",
        outcome.log.len(),
        final_val.unwrap_or(f64::NAN),
        ckpt_path.display()
    );
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// infer
// ---------------------------------------------------------------------------

#[derive(Args)]
struct InferArgs {
    /// Per-plane checkpoints; all three planes must be present.
    #[arg(long, num_args = 1.., required = true)]
    checkpoint: Vec<PathBuf>,
    /// Conformed intensity volume to segment.
    #[arg(long)]
    volume: PathBuf,
    /// Output label volume path.
    #[arg(long)]
    out: PathBuf,
    /// Slices per forward batch.
    #[arg(long, default_value_t = 8)]
    batch: usize,
}

fn cmd_infer(a: InferArgs) -> Result<ExitCode> {
    let mut models: [Option<Model<f32>>; 3] = [None, None, None];
    for path in &a.checkpoint {
        let ckpt = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
        let slot = match ckpt.spec.plane {
            Plane::Axial => 0,
            Plane::Coronal => 1,
            Plane::Sagittal => 2,
        };
        if models[slot].is_some() {
            bail!("two checkpoints for the {} plane", ckpt.spec.plane);
        }
        models[slot] =
            Some(restore_model(&ckpt).with_context(|| format!("restoring {}", path.display()))?);
    }
    let [ax, co, sa] = models;
    let (Some(mut ax), Some(mut co), Some(mut sa)) = (ax, co, sa) else {
        bail!("need one checkpoint per plane (axial, coronal, sagittal)");
    };
    let volume = load_intensity(&a.volume)?;
    if !(VOXEL_MM_MIN..=VOXEL_MM_MAX).contains(&volume.voxel_mm) {
        bail!(
            "volume voxel size {} mm outside supported range [{VOXEL_MM_MIN}, {VOXEL_MM_MAX}]",
            volume.voxel_mm
        );
    }
    let table = LabelTable::desk();
    let started = Instant::now();
    let (seg, report) = segment_volume(
        &mut ax,
        &mut co,
        &mut sa,
        &volume,
        &table,
        AggregateWeights::default(),
        a.batch,
    )?;
    let wall = started.elapsed().as_secs_f64();
    if let Some(parent) = a.out.parent() {
        fs::create_dir_all(parent)?;
    }
    save_labels(&seg, &a.out)?;
    let d = seg.data.dim();
    println!(
        "segmented {}x{}x{} at {} mm in {wall:.1}s ({} laterality component(s) flagged), wrote {}",
        d.0,
        d.1,
        d.2,
        seg.voxel_mm,
        report.flagged.len(),
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

#[derive(Args)]
struct EvaluateArgs {
    /// Dataset manifest holding the ground-truth labels.
    #[arg(long)]
    manifest: PathBuf,
    /// Directory of predictions named `<prefix>.seg.vvol`.
    #[arg(long)]
    pred_dir: PathBuf,
    /// Model label written into the CSV.
    #[arg(long)]
    model: String,
    /// Which manifest split to score.
    #[arg(long, default_value = "test")]
    split: Split,
    /// Output CSV path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<ExitCode> {
    if a.model.contains([',', '\n']) {
        bail!("model label must not contain commas or newlines");
    }
    let manifest = Manifest::load(&a.manifest)?;
    let root = a.manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
    let table = LabelTable::desk();
    let mut csv = String::from("subject,model,structure,dsc,asd,flags\n");
    let mut rows = 0usize;
    for entry in manifest.of_split(a.split) {
        let truth = load_labels(&entry.label_path(&root))?;
        let pred_path = a.pred_dir.join(format!("{}.seg.vvol", entry.prefix));
        let pred = load_labels(&pred_path)
            .with_context(|| format!("loading prediction {}", pred_path.display()))?;
        for e in table.entries() {
            if e.id == 0 {
                continue;
            }
            let y = class_mask(&truth.data, e.id);
            let p = class_mask(&pred.data, e.id);
            let d = dsc(&y, &p)?;
            let mut flags: Vec<&str> = Vec::new();
            if !y.iter().any(|&v| v) {
                flags.push("empty-truth");
            }
            if !p.iter().any(|&v| v) {
                flags.push("empty-pred");
            }
            let asd_text = match asd(&y, &p, truth.voxel_mm) {
                Ok(v) => format!("{v}"),
                Err(EvalError::EmptyStructure) => {
                    flags.push("asd-undefined");
                    String::new()
                }
                Err(e) => return Err(e.into()),
            };
            writeln!(csv, "{},{},{},{},{},{}", entry.prefix, a.model, e.id, d, asd_text, flags.join(";"))?;
            rows += 1;
        }
    }
    if rows == 0 {
        bail!("no {} entries in {}", a.split, a.manifest.display());
    }
    match &a.out {
        Some(p) => {
            fs::write(p, csv)?;
            println!("wrote {rows} rows to {}", p.display());
        }
        None => print!("{csv}"),
    }
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// stats
// ---------------------------------------------------------------------------

#[derive(Args)]
struct StatsArgs {
    /// First evaluation CSV (the A side of A vs B).
    #[arg(long)]
    first: PathBuf,
    /// Second evaluation CSV.
    #[arg(long)]
    second: PathBuf,
    /// Metric to compare: dsc or asd.
    #[arg(long, default_value = "dsc")]
    metric: String,
    /// Output CSV path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_eval_csv(path: &Path) -> Result<Vec<EvalRecord>> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if ln == 0 {
            if line != "subject,model,structure,dsc,asd,flags" {
                bail!("{}: not an evaluation CSV", path.display());
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            bail!("{}:{}: expected 6 fields, got {}", path.display(), ln + 1, fields.len());
        }
        rows.push(EvalRecord {
            subject: fields[0].to_string(),
            model: fields[1].to_string(),
            structure: fields[2].parse().with_context(|| format!("line {}", ln + 1))?,
            dsc: fields[3].parse().with_context(|| format!("line {}", ln + 1))?,
            asd: if fields[4].is_empty() {
                None
            } else {
                Some(fields[4].parse().with_context(|| format!("line {}", ln + 1))?)
            },
        });
    }
    Ok(rows)
}

fn cmd_stats(a: StatsArgs) -> Result<ExitCode> {
    let metric = match a.metric.as_str() {
        "dsc" => MetricKind::Dsc,
        "asd" => MetricKind::Asd,
        other => bail!("unknown metric `{other}` (expected dsc or asd)"),
    };
    let first = parse_eval_csv(&a.first)?;
    let second = parse_eval_csv(&a.second)?;
    let stats = paired_stats(&first, &second, metric)?;
    let mut csv = String::from("structure,W,p_raw,p_bh\n");
    for s in &stats {
        writeln!(csv, "{},{},{},{}", s.structure, s.w_plus, s.p_raw, s.p_bh)?;
    }
    match &a.out {
        Some(p) => {
            fs::write(p, csv)?;
            println!("wrote {} structures to {}", stats.len(), p.display());
        }
        None => print!("{csv}"),
    }
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

#[derive(Args)]
struct GradcheckArgs {
    /// Seed for both batteries.
    #[arg(long, default_value_t = 2026)]
    seed: u64,
    /// Randomized instances per operator in the forward battery.
    #[arg(long, default_value_t = 500)]
    instances: usize,
    /// Random cases per operator in the gradient battery.
    #[arg(long, default_value_t = 100)]
    grad_cases: usize,
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let forward = gradcheck::forward_oracles(a.seed, a.instances);
    print!("{forward}");
    let grads = gradcheck::gradient_checks(a.seed, a.grad_cases);
    print!("{grads}");
    if forward.passed() && grads.passed() {
        println!("all checks passed");
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("checks FAILED");
        Ok(ExitCode::FAILURE)
    }
}

// ---------------------------------------------------------------------------
// masks
// ---------------------------------------------------------------------------

#[derive(Args)]
struct MasksArgs {
    /// Ground-truth label volume.
    #[arg(long)]
    labels: PathBuf,
    /// Slicing plane.
    #[arg(long, default_value = "axial")]
    plane: Plane,
    /// Slice index along the plane axis (default: middle slice).
    #[arg(long)]
    index: Option<usize>,
    /// Amplitude of the two morphological boundary terms.
    #[arg(long, default_value_t = 1.0)]
    w_hires: f64,
    /// Output directory for the PGM images.
    #[arg(long)]
    out_dir: PathBuf,
}

/// 8-bit binary PGM, normalized to the map's own maximum.
fn write_pgm(path: &Path, map: &ndarray::Array2<f64>) -> Result<()> {
    let (h, w) = map.dim();
    let max = map.iter().fold(0f64, |a, &v| a.max(v));
    let mut bytes = Vec::with_capacity(32 + h * w);
    bytes.extend_from_slice(format!("P5\n{w} {h}\n255\n").as_bytes());
    for v in map.iter() {
        let g = if max > 0.0 { (v / max * 255.0).round() as u8 } else { 0 };
        bytes.push(g);
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn cmd_masks(a: MasksArgs) -> Result<ExitCode> {
    let volume = load_labels(&a.labels)?;
    let axis = match a.plane {
        Plane::Axial => ndarray::Axis(0),
        Plane::Coronal => ndarray::Axis(1),
        Plane::Sagittal => ndarray::Axis(2),
    };
    let depth = volume.data.len_of(axis);
    let index = a.index.unwrap_or(depth / 2);
    if index >= depth {
        bail!("slice index {index} out of range (plane has {depth} slices)");
    }
    let slice = volume.data.index_axis(axis, index).to_owned();
    let table = LabelTable::desk();
    let gm_ids = table.gm_ids();
    let brain_ids = table.brain_ids();
    let gm = slice.mapv(|v| gm_ids.contains(&v));
    let brain = slice.mapv(|v| brain_ids.contains(&v));
    let radius = mask_radius(volume.voxel_mm);
    let map = slice_weight_map(&slice, table.num_classes(), &gm, &brain, radius, a.w_hires)?;

    fs::create_dir_all(&a.out_dir)?;
    let parts: [(&str, &ndarray::Array2<f64>); 4] = [
        ("median_freq", &map.median_freq),
        ("gradient", &map.gradient),
        ("outer_gm", &map.gm),
        ("wm_sulci", &map.wm_sulci),
    ];
    for (name, m) in parts {
        write_pgm(&a.out_dir.join(format!("{name}.pgm")), m)?;
    }
    write_pgm(&a.out_dir.join("total.pgm"), &map.total())?;
    println!(
        "{} slice {index} of {}: radius {radius} px at {} mm, wrote 5 maps to {}",
        a.plane,
        a.labels.display(),
        volume.voxel_mm,
        a.out_dir.display()
    );
    Ok(ExitCode::SUCCESS)
}
