//! Command-line surface. [`run`] takes argv and output sinks and returns the
//! process exit code: 0 on success, 1 on usage errors, 2 on runtime errors.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{ArgGroup, Args, Parser, Subcommand};

use crate::analysis::{exact_mi, flip_sweep, hamming_bound_check, sweep_csv, Codebook};
use crate::channel::ChannelSpec;
use crate::codes::{sign_code, HashIndex};
use crate::config::TrainConfig;
use crate::data::{synth, Dataset, Kind};
use crate::evaluation::{
    checkpoint_hash, distinct_codes, extract_features, retrieval_map, train_linear_probe, Metrics, ProbeConfig,
};
use crate::format::g6;
use crate::model::EncoderModel;
use crate::regions::{build_region_map, region_stats_csv, render_region_svg, resolution_ladder, BBox};
use crate::training::{gradient_suite, train};

type Error = Box<dyn std::error::Error>;
type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Parser)]
#[command(name = "nac", about = "Neural activation coding on toy data", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic labelled dataset as CSV.
    Synth(SynthArgs),
    /// Train an encoder and write its checkpoint.
    Train(TrainArgs),
    /// Linear probe on frozen representations.
    EvalLinear(EvalLinearArgs),
    /// Hamming retrieval mAP of projection codes.
    EvalRetrieve(EvalRetrieveArgs),
    /// Render the activation-region map of a 2-D encoder.
    Regions(RegionsArgs),
    /// Exact mutual information of a codebook through the flip channel.
    MiCheck(MiCheckArgs),
    /// Check the average-Hamming-distance bound on a codebook.
    BoundCheck(BoundCheckArgs),
    /// Train and evaluate once per flip probability.
    Sweep(SweepArgs),
    /// Finite-difference gradient checks of every loss.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    kind: Kind,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Flat `key = value` file; omitted keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_checkpoint: PathBuf,
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalLinearArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out_json: PathBuf,
    /// Seed of the stratified probe split.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct EvalRetrieveArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    index_data: PathBuf,
    #[arg(long)]
    query_data: PathBuf,
    #[arg(long)]
    out_json: PathBuf,
    /// Also write the index as `id,label,bitstring` lines.
    #[arg(long)]
    export_index: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RegionsArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 256)]
    resolution: usize,
    #[arg(long)]
    out_svg: PathBuf,
    #[arg(long)]
    out_csv: PathBuf,
    /// Dataset whose bounding box frames the map and whose points are drawn.
    #[arg(long)]
    data: Option<PathBuf>,
    /// `x0,x1,y0,y1`; defaults to the data box, or [-3, 3]² without data.
    #[arg(long, value_parser = parse_bbox, allow_hyphen_values = true)]
    bbox: Option<[f64; 4]>,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("source").required(true).args(["codes", "checkpoint"])))]
struct MiCheckArgs {
    /// Code file: one bitstring per line.
    #[arg(long)]
    codes: Option<PathBuf>,
    /// Use the projection codes of `--data` under this checkpoint.
    #[arg(long, requires = "data")]
    checkpoint: Option<PathBuf>,
    #[arg(long, requires = "checkpoint")]
    data: Option<PathBuf>,
    #[arg(long)]
    p: f64,
}

#[derive(Debug, Args)]
struct BoundCheckArgs {
    #[arg(long)]
    codes: PathBuf,
    #[arg(long)]
    p: f64,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', required = true)]
    p_list: Vec<f64>,
    #[arg(long)]
    out_csv: PathBuf,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    models: usize,
}

/// Parses `argv` (program name first) and runs the subcommand.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            2
        }
    }
}

fn parse_bbox(s: &str) -> std::result::Result<[f64; 4], String> {
    let v: Vec<f64> = s.split(',').map(|t| t.trim().parse::<f64>().map_err(|e| format!("{t:?}: {e}"))).collect::<std::result::Result<_, _>>()?;
    <[f64; 4]>::try_from(v).map_err(|v| format!("expected x0,x1,y0,y1, got {} values", v.len()))
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()).into())
}

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| format!("{}: {e}", path.display()).into())
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => Ok(TrainConfig::parse(&read(p)?).map_err(|e| format!("{}: {e}", p.display()))?),
        None => Ok(TrainConfig::default()),
    }
}

fn load_data(path: &Path) -> Result<Dataset> {
    Ok(Dataset::load(path)?)
}

fn load_checkpoint(path: &Path) -> Result<(EncoderModel, String)> {
    let bytes = std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let text = std::str::from_utf8(&bytes).map_err(|e| format!("{}: {e}", path.display()))?;
    let model = EncoderModel::from_json(text).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok((model, checkpoint_hash(&bytes)))
}

fn dispatch(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Synth(a) => {
            let data = synth(a.kind, a.n, a.noise, a.classes, a.seed)?;
            data.save(&a.out)?;
        }
        Command::Train(a) => {
            let config = load_config(a.config.as_deref())?;
            let data = load_data(&a.data)?;
            let mut log = match &a.log {
                Some(p) => Some(std::io::BufWriter::new(
                    std::fs::File::create(p).map_err(|e| format!("{}: {e}", p.display()))?,
                )),
                None => None,
            };
            let outcome = train(&data.features, &config, log.as_mut().map(|w| w as &mut dyn Write))?;
            write(&a.out_checkpoint, &outcome.model.to_json())?;
        }
        Command::EvalLinear(a) => {
            let (model, hash) = load_checkpoint(&a.checkpoint)?;
            let data = load_data(&a.data)?;
            let f = extract_features(&model, &data.features)?;
            let probe = train_linear_probe(&f.h, &data.labels, &ProbeConfig { seed: a.seed, ..ProbeConfig::default() })?;
            let metrics = Metrics {
                probe_accuracy: Some(probe.accuracy),
                chosen_lr: Some(probe.chosen_lr),
                map: None,
                distinct_codes: Some(distinct_codes(&f.codes)),
                config_hash: hash,
            };
            write(&a.out_json, &metrics.to_json())?;
        }
        Command::EvalRetrieve(a) => {
            let (model, hash) = load_checkpoint(&a.checkpoint)?;
            let index = load_data(&a.index_data)?;
            let queries = load_data(&a.query_data)?;
            let fi = extract_features(&model, &index.features)?;
            let fq = extract_features(&model, &queries.features)?;
            let report = retrieval_map(&fi.codes, &index.labels, &fq.codes, &queries.labels)?;
            if let Some(p) = &a.export_index {
                let mut hi = HashIndex::new(model.net.code_dim());
                for (i, (c, &l)) in fi.codes.iter().zip(&index.labels).enumerate() {
                    hi.insert(i as u64, c.clone(), l)?;
                }
                write(p, &hi.export())?;
            }
            let metrics = Metrics {
                map: Some(report.map),
                distinct_codes: Some(distinct_codes(&fi.codes)),
                config_hash: hash,
                ..Metrics::default()
            };
            write(&a.out_json, &metrics.to_json())?;
        }
        Command::Regions(a) => {
            let (model, _) = load_checkpoint(&a.checkpoint)?;
            let data = a.data.as_deref().map(load_data).transpose()?;
            let bbox = match (&a.bbox, &data) {
                (Some(b), _) => BBox::new(b[0], b[1], b[2], b[3])?,
                (None, Some(d)) => BBox::around(&d.features, 0.1)?,
                (None, None) => BBox::new(-3.0, 3.0, -3.0, 3.0)?,
            };
            let map = build_region_map(&model, bbox, a.resolution)?;
            let points = data.as_ref().map(|d| (&d.features, d.labels.as_slice()));
            render_region_svg(&map, points, &a.out_svg)?;
            let csv =
                region_stats_csv(&model, bbox, &resolution_ladder(a.resolution), data.as_ref().map(|d| &d.features))?;
            write(&a.out_csv, &csv)?;
        }
        Command::MiCheck(a) => {
            let spec = ChannelSpec::new(a.p)?;
            let book = match (&a.codes, &a.checkpoint, &a.data) {
                (Some(p), _, _) => Codebook::parse(&read(p)?).map_err(|e| format!("{}: {e}", p.display()))?,
                (None, Some(c), Some(d)) => {
                    let (model, _) = load_checkpoint(c)?;
                    let data = load_data(d)?;
                    let act = model.forward(&data.features)?;
                    let codes = (0..act.a.rows()).map(|i| sign_code(act.a.row(i))).collect::<std::result::Result<_, _>>()?;
                    Codebook::new(codes)?
                }
                _ => unreachable!("clap enforces the source group"),
            };
            writeln!(out, "{}", g6(exact_mi(&book, &spec)?))?;
        }
        Command::BoundCheck(a) => {
            let spec = ChannelSpec::new(a.p)?;
            let book = Codebook::parse(&read(&a.codes)?).map_err(|e| format!("{}: {e}", a.codes.display()))?;
            let check = hamming_bound_check(&book, &spec)?;
            writeln!(out, "lhs = {}", g6(check.lhs))?;
            writeln!(out, "rhs = {}", g6(check.rhs))?;
            writeln!(out, "holds = {}", check.holds)?;
        }
        Command::Sweep(a) => {
            let config = load_config(a.config.as_deref())?;
            let rows = flip_sweep(&config, &a.p_list)?;
            write(&a.out_csv, &sweep_csv(&rows))?;
        }
        Command::Gradcheck(a) => {
            let config = load_config(a.config.as_deref())?;
            let cases = gradient_suite(&config, a.models)?;
            let mut failed = 0;
            for c in &cases {
                let r = &c.report;
                writeln!(
                    out,
                    "{} model {}: checked {} skipped {} max_rel {} {}",
                    c.loss,
                    c.model,
                    r.checked,
                    r.skipped.len(),
                    g6(r.max_rel_error),
                    if r.passed { "ok" } else { "FAIL" }
                )?;
                failed += usize::from(!r.passed);
            }
            writeln!(out, "{} of {} checks passed", cases.len() - failed, cases.len())?;
            if failed > 0 {
                return Err(format!("{failed} gradient checks failed").into());
            }
        }
    }
    Ok(())
}
