//! The `oarseg` command line.
//!
//! Errors go to stderr as a single line `error[<kind>]: <message>`; the exit
//! code is 2 for usage errors and 1 for everything else.

use std::ffi::OsString;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use crate::io::{load_config, load_model, read_image, read_mask, read_volume, save_model, write_mask, write_volume};
use crate::io::{ElementType, ModelMeta, PipelineConfig, VolumeData};
use crate::locator::locate_box;
use crate::metrics::{summarize, EvalFrame, MetricsReport};
use crate::nn::gradcheck::run_suite;
use crate::phantom::{list_cases, write_cases, CaseLayout, PhantomSpec};
use crate::pipeline::{infer_structure, prepare_image, prepare_mask, train_stage, PipelineModel, Stage, TrainCase};
use crate::volume::{Dims, StructureId};
use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "oarseg", version, about = "Two-stage 3D U-Net segmentation of head-and-neck organs at risk")]
pub struct Cli {
    /// Pipeline configuration (TOML). Built-in defaults when absent.
    #[arg(long, global = true, env = "OARSEG_CONFIG", value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Worker threads for case loading and network kernels.
    #[arg(long, global = true, default_value_t = 1, value_name = "N")]
    pub jobs: usize,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic cases: case_NNN/image.nrrd and case_NNN/masks/<structure>.nrrd.
    Phantom(PhantomArgs),
    /// Resample, crop and normalise one case for a structure.
    Preprocess(PreprocessArgs),
    /// Train the locator or the segmenter of one structure.
    Train(TrainArgs),
    /// Segment one structure in a CT volume.
    Infer(InferArgs),
    /// Score a predicted mask against ground truth, or summarise a report.
    Evaluate(EvaluateArgs),
    /// Find the box holding the most foreground of a probability map.
    Locate(LocateArgs),
    /// Compare analytic and numeric gradients of every network layer.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    /// Output directory, created if missing.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Number of cases.
    #[arg(long, default_value_t = 25)]
    pub cases: u64,
    /// Generator seed; case i of a seed is always the same.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Index of the first case.
    #[arg(long, default_value_t = 0)]
    pub first: u64,
    /// Frame size in 1 mm voxels.
    #[arg(long, value_parser = parse_triple, default_value = "64,64,64", value_name = "X,Y,Z")]
    pub size: Dims,
    /// Structure the target blob is labelled as.
    #[arg(long, value_parser = parse_structure, default_value = "brainstem")]
    pub structure: StructureId,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// Case directory with image.nrrd and masks/.
    #[arg(long = "in", value_name = "CASE")]
    pub input: PathBuf,
    /// Output case directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Structure whose crop group applies.
    #[arg(long, value_parser = parse_structure)]
    pub structure: StructureId,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub stage: Stage,
    #[arg(long, value_parser = parse_structure)]
    pub structure: StructureId,
    /// Directory of case_* directories.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Model file to write.
    #[arg(long, value_name = "MODEL")]
    pub out: PathBuf,
    /// Passes over the data [default: train.epochs, 200].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Initialisation and shuffling seed [default: train.seed, 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Top-level channels [default: train.base_channels, 8].
    #[arg(long)]
    pub base_channels: Option<usize>,
    /// Adam step size [default: train.adam.learning_rate, 0.001].
    #[arg(long)]
    pub learning_rate: Option<f64>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long, value_parser = parse_structure)]
    pub structure: StructureId,
    /// Locator model.
    #[arg(long, value_name = "M1")]
    pub locnet: PathBuf,
    /// Segmenter model.
    #[arg(long, value_name = "M2")]
    pub segnet: PathBuf,
    /// CT volume in HU, any spacing.
    #[arg(long, value_name = "VOL")]
    pub image: PathBuf,
    /// Mask file to write.
    #[arg(long, value_name = "MASK")]
    pub out: PathBuf,
    /// Grid of the written mask: the input image grid or the cropped 1 mm frame.
    #[arg(long, value_enum, default_value_t = Frame::Raw)]
    pub frame: Frame,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Frame {
    Iso,
    Raw,
}

impl From<Frame> for EvalFrame {
    fn from(f: Frame) -> Self {
        match f {
            Frame::Iso => EvalFrame::Iso,
            Frame::Raw => EvalFrame::Raw,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Predicted mask.
    #[arg(long, value_name = "MASK", requires = "gt")]
    pub pred: Option<PathBuf>,
    /// Ground-truth mask on the same grid.
    #[arg(long, value_name = "MASK", requires = "pred")]
    pub gt: Option<PathBuf>,
    /// JSON-lines report; a new record is appended.
    #[arg(long, value_name = "OUT")]
    pub report: PathBuf,
    /// Case name stored in the record [default: directory of --gt].
    #[arg(long)]
    pub case: Option<String>,
    #[arg(long, value_parser = parse_structure, default_value = "brainstem")]
    pub structure: StructureId,
    /// Grid the masks live on, stored in the record.
    #[arg(long, value_enum, default_value_t = Frame::Raw)]
    pub frame: Frame,
    /// Print mean ± SD per structure over every record in the report.
    #[arg(long)]
    pub summary: bool,
}

#[derive(Debug, Args)]
pub struct LocateArgs {
    /// Probability map (float) or binary mask (uint8 0/1).
    #[arg(long, value_name = "VOL")]
    pub prob: PathBuf,
    /// Box size in voxels.
    #[arg(long = "box", value_parser = parse_triple, value_name = "H,W,K")]
    pub box_size: Dims,
    /// Cut-off applied to probability maps.
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f32,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Seed for inputs, parameters and sampled coordinates.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn parse_triple(s: &str) -> std::result::Result<Dims, String> {
    let parts: Vec<&str> = s.split([',', 'x']).map(str::trim).collect();
    let nums: Vec<usize> = parts
        .iter()
        .map(|p| p.parse::<usize>().map_err(|_| format!("`{s}` is not three integers like 32,32,16")))
        .collect::<std::result::Result<_, _>>()?;
    <[usize; 3]>::try_from(nums).map_err(|_| format!("`{s}` must have exactly three components"))
}

fn parse_structure(s: &str) -> std::result::Result<StructureId, String> {
    s.parse().map_err(|_| {
        let names: Vec<&str> = StructureId::ALL.iter().map(|id| id.name()).collect();
        format!("unknown structure `{s}` (one of {})", names.join(", "))
    })
}

/// Parse `argv` (program name first), run, and return the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let text = e.to_string();
            let line = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("error[usage]: {}", line.trim_start_matches("error: "));
            return 2;
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {}", e.kind(), e.to_string().replace('\n', " "));
            1
        }
    }
}

/// Run a parsed command.
pub fn execute(cli: &Cli) -> Result<()> {
    if cli.jobs == 0 {
        return Err(Error::config("--jobs", "must be at least 1"));
    }
    let config = match &cli.config {
        Some(path) => load_config(path)?,
        None => PipelineConfig::default(),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build()
        .map_err(|e| Error::config("--jobs", e.to_string()))?;
    pool.install(|| match &cli.command {
        Command::Phantom(a) => phantom(a),
        Command::Preprocess(a) => preprocess(a, &config),
        Command::Train(a) => train(a, &config),
        Command::Infer(a) => infer(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Locate(a) => locate(a),
        Command::Gradcheck(a) => gradcheck(a),
    })
}

fn phantom(a: &PhantomArgs) -> Result<()> {
    let spec = PhantomSpec::with_dims(a.structure, a.seed, a.size);
    spec.validate()?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let spec_path = a.out.join("phantom.json");
    let json = serde_json::to_string_pretty(&spec).expect("spec serializes");
    fs::write(&spec_path, json + "\n").map_err(|e| Error::io(&spec_path, e))?;
    let written: Vec<CaseLayout> = (a.first..a.first + a.cases)
        .into_par_iter()
        .map(|i| write_cases(&spec, &a.out, i, 1).map(|mut v| v.remove(0)))
        .collect::<Result<_>>()?;
    println!("wrote {} cases to {}", written.len(), a.out.display());
    Ok(())
}

fn preprocess(a: &PreprocessArgs, config: &PipelineConfig) -> Result<()> {
    let crop = config.crop_spec(config.structure(a.structure).crop_group);
    let case = CaseLayout::new(&a.input);
    let prepared = prepare_image(&case.read_image()?, &crop)?;
    let out = CaseLayout::new(&a.out);
    let mask_dir = a.out.join("masks");
    fs::create_dir_all(&mask_dir).map_err(|e| Error::io(&mask_dir, e))?;
    write_volume(&prepared.image, ElementType::F32, out.image())?;
    let mut masks = 0;
    for id in StructureId::ALL {
        if case.mask(id).exists() {
            write_mask(&prepare_mask(&case.read_mask(id)?, &crop)?, out.mask(id))?;
            masks += 1;
        }
    }
    println!(
        "{}: window {} of a {:?} isotropic volume, {masks} masks",
        case.name(),
        prepared.crop_box,
        prepared.iso_dims
    );
    Ok(())
}

fn train(a: &TrainArgs, config: &PipelineConfig) -> Result<()> {
    let structure = *config.structure(a.structure);
    let crop = config.crop_spec(structure.crop_group);
    let mut tcfg = config.train;
    if let Some(v) = a.epochs {
        tcfg.epochs = v;
    }
    if let Some(v) = a.seed {
        tcfg.seed = v;
    }
    if let Some(v) = a.base_channels {
        tcfg.base_channels = v;
    }
    if let Some(v) = a.learning_rate {
        tcfg.adam.learning_rate = v;
    }
    tcfg.validate()?;
    if (0..3).any(|i| structure.box_size[i] > crop.window[i]) {
        return Err(Error::config(
            format!("structures.{}.box_size", structure.id),
            format!("{:?} exceeds the crop window {:?}", structure.box_size, crop.window),
        ));
    }
    let layouts = list_cases(&a.data)?;
    if layouts.is_empty() {
        return Err(Error::config("--data", format!("no case_* directories in {}", a.data.display())));
    }
    let cases: Vec<TrainCase> = layouts
        .par_iter()
        .map(|c| {
            Ok(TrainCase {
                name: c.name(),
                image: prepare_image(&c.read_image()?, &crop)?.image,
                mask: prepare_mask(&c.read_mask(a.structure)?, &crop)?,
            })
        })
        .collect::<Result<_>>()?;
    let outcome = train_stage(a.stage, &cases, &structure, &tcfg)?;
    let meta = ModelMeta {
        stage: a.stage,
        unet: tcfg.unet(),
        structure,
        crop,
    };
    save_model(&outcome.model, &meta, &a.out)?;
    let last = outcome.loss_trace.last().map_or("n/a".to_string(), |l| format!("{l:.6}"));
    println!(
        "{} {}: {} cases, {} steps, final loss {last}, saved {}",
        a.structure,
        a.stage.name(),
        cases.len(),
        outcome.loss_trace.len(),
        a.out.display()
    );
    Ok(())
}

fn load_stage(path: &Path, want: Stage, structure: StructureId) -> Result<(ModelMeta, crate::nn::UNetModel<f32>)> {
    let (meta, model) = load_model(path)?;
    let flag = format!("--{}net", want.name());
    if meta.stage != want {
        return Err(Error::config(flag, format!("{} holds a {} model", path.display(), meta.stage.name())));
    }
    if meta.structure.id != structure {
        return Err(Error::config(flag, format!("{} was trained for {}", path.display(), meta.structure.id)));
    }
    Ok((meta, model))
}

fn infer(a: &InferArgs) -> Result<()> {
    let (loc_meta, locnet) = load_stage(&a.locnet, Stage::Loc, a.structure)?;
    let (seg_meta, segnet) = load_stage(&a.segnet, Stage::Seg, a.structure)?;
    if loc_meta.crop != seg_meta.crop || loc_meta.structure != seg_meta.structure {
        return Err(Error::config("--locnet", "locator and segmenter were trained with different settings"));
    }
    let model = PipelineModel::new(seg_meta.structure, seg_meta.crop, locnet, segnet)?;
    let image = read_image(&a.image)?;
    let out = infer_structure(&image, &model)?;
    let mask = match a.frame {
        Frame::Iso => &out.mask_iso,
        Frame::Raw => &out.mask_raw,
    };
    write_mask(mask, &a.out)?;
    println!(
        "{}: window {} in the cropped frame, {} voxels, wrote {}",
        a.structure,
        out.bbox,
        mask.count(),
        a.out.display()
    );
    Ok(())
}

fn read_reports(path: &Path) -> Result<Vec<MetricsReport>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                context: format!("line {}", i + 1),
                message: e.to_string(),
            })
        })
        .collect()
}

fn evaluate(a: &EvaluateArgs) -> Result<()> {
    if a.pred.is_none() && !a.summary {
        return Err(Error::config("--pred", "give --pred and --gt, or --summary"));
    }
    if let (Some(pred), Some(gt)) = (&a.pred, &a.gt) {
        let case = a.case.clone().unwrap_or_else(|| {
            gt.parent()
                .and_then(|p| if p.ends_with("masks") { p.parent() } else { Some(p) })
                .and_then(|p| p.file_name())
                .map_or_else(|| gt.display().to_string(), |n| n.to_string_lossy().into_owned())
        });
        let report = MetricsReport::compute(&case, a.structure, &read_mask(pred)?, &read_mask(gt)?, a.frame.into())?;
        let line = serde_json::to_string(&report).expect("report serializes");
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&a.report)
            .map_err(|e| Error::io(&a.report, e))?;
        writeln!(file, "{line}").map_err(|e| Error::io(&a.report, e))?;
        println!("{line}");
    }
    if a.summary {
        for s in summarize(&read_reports(&a.report)?) {
            println!(
                "{:<14} n={:<3} DSC {:.3} ± {:.3}  95HD {:.2} ± {:.2} mm  PPV {:.3} ± {:.3}  SEN {:.3} ± {:.3}",
                s.structure.name(),
                s.cases,
                s.dsc.mean,
                s.dsc.sd,
                s.hd95.mean,
                s.hd95.sd,
                s.ppv.mean,
                s.ppv.sd,
                s.sen.mean,
                s.sen.sd
            );
        }
    }
    Ok(())
}

fn locate(a: &LocateArgs) -> Result<()> {
    if !(a.threshold > 0.0 && a.threshold < 1.0) {
        return Err(Error::config("--threshold", "must lie strictly between 0 and 1"));
    }
    let mask = match read_volume(&a.prob)? {
        VolumeData::Mask(m) => m,
        VolumeData::Image(v) => v.threshold(a.threshold),
    };
    let b = locate_box(&mask, a.box_size)?;
    println!(
        "{{\"min\":[{},{},{}],\"size\":[{},{},{}]}}",
        b.min[0], b.min[1], b.min[2], b.size[0], b.size[1], b.size[2]
    );
    Ok(())
}

fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    let checks = run_suite(a.seed);
    let mut worst: f64 = 0.0;
    let mut failed = Vec::new();
    for c in &checks {
        worst = worst.max(c.report.max_rel_error);
        println!(
            "{:<18} max rel error {:.3e}  (tolerance {:.0e}, {} coordinates)  {}",
            c.name,
            c.report.max_rel_error,
            c.tolerance,
            c.report.checked,
            if c.passed() { "ok" } else { "FAIL" }
        );
        if !c.passed() {
            failed.push(c.name);
        }
    }
    println!("max relative error {worst:.3e}");
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Verification(format!("gradient check failed for {}", failed.join(", "))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triples_parse() {
        assert_eq!(parse_triple("32,32,16"), Ok([32, 32, 16]));
        assert_eq!(parse_triple("144x144x112"), Ok([144, 144, 112]));
        assert!(parse_triple("1,2").is_err());
        assert!(parse_triple("a,b,c").is_err());
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run(["oarseg", "locate", "--prob", "x.nrrd"]), 2);
        assert_eq!(run(["oarseg", "train", "--stage", "loc", "--bogus"]), 2);
        assert_eq!(run(["oarseg", "phantom", "--out", "x", "--structure", "spleen"]), 2);
        assert_eq!(run(["oarseg", "--help"]), 0);
    }

    #[test]
    fn missing_files_exit_one() {
        assert_eq!(run(["oarseg", "locate", "--prob", "/nonexistent/p.nrrd", "--box", "8,8,8"]), 1);
    }

    #[test]
    fn help_lists_defaults() {
        use clap::CommandFactory;
        let mut cmd = Cli::command();
        let train = cmd.find_subcommand_mut("train").unwrap().render_long_help().to_string();
        assert!(train.contains("200") && train.contains("0.001"), "{train}");
        let phantom = cmd.find_subcommand_mut("phantom").unwrap().render_long_help().to_string();
        assert!(phantom.contains("[default: 64,64,64]"), "{phantom}");
    }
}
