use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use coopnet::cascade::{ct_range, infer, sweep_ct, CascadeConfig};
use coopnet::golden::{encode_golden, load_golden, trace, verify_golden};
use coopnet::idx::{labels_to_idx, load_labels, Dataset};
use coopnet::model::{self, input_tensor, ArmKind, CoopModel, Topology};
use coopnet::perf::{arm_latency, memory_report, synthetic_profile, LatencyProfile};
use coopnet::synthetic::synthetic_dataset;
use coopnet::Error;

/// Samples traced into the golden file written by `synth`.
const GOLDEN_SAMPLES: usize = 8;

#[derive(Parser)]
#[command(name = "coopnet", version, about = "Cooperative BNN + INT8 inference engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Classify every image of an IDX file, one JSON line per image.
    Run {
        model: PathBuf,
        input: PathBuf,
        /// Confidence threshold in [0, 1).
        #[arg(long)]
        ct: f64,
    },
    /// Evaluate a labelled dataset over several thresholds and emit CSV.
    Sweep {
        model: PathBuf,
        dataset: PathBuf,
        labels: PathBuf,
        /// Comma-separated thresholds, e.g. 0,0.2,0.4.
        #[arg(long, value_delimiter = ',', conflicts_with = "ct_range", required_unless_present = "ct_range")]
        ct_list: Option<Vec<f64>>,
        /// start:end:step, end inclusive.
        #[arg(long)]
        ct_range: Option<String>,
        /// Latency profile JSON; a synthetic profile is used when omitted.
        #[arg(long)]
        profile: Option<PathBuf>,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print memory footprint and arm latencies as JSON.
    Report {
        model: PathBuf,
        #[arg(long)]
        profile: Option<PathBuf>,
    },
    /// List the layers of both arms.
    Inspect { model: PathBuf },
    /// Check a model against golden per-layer outputs; exits 1 on mismatch.
    Verify { model: PathBuf, golden: PathBuf },
    /// Write a randomly initialized model, a synthetic dataset and a synthetic profile.
    Synth {
        #[arg(long, default_value = "tiny")]
        topology: String,
        #[arg(long, default_value_t = model::DEFAULT_SEED)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        /// Fraction of labels replaced by random classes.
        #[arg(long, default_value_t = 0.05)]
        label_noise: f64,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

/// What a command produced: text for stdout and files to write, emitted only
/// once the whole command has succeeded.
#[derive(Default)]
struct Output {
    stdout: String,
    files: Vec<(PathBuf, Vec<u8>)>,
    failed: bool,
}

fn configure_threads() -> Result<(), Error> {
    let Ok(raw) = std::env::var("COOPNET_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::InvalidParam(format!("COOPNET_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::InvalidParam(format!("thread pool: {e}")))
}

fn load_profile(path: Option<&Path>, m: &CoopModel) -> Result<(LatencyProfile, &'static str), Error> {
    match path {
        Some(p) => Ok((LatencyProfile::load(p)?, "file")),
        None => Ok((synthetic_profile(m), "synthetic")),
    }
}

fn run(cmd: Command) -> Result<Output, Error> {
    let mut out = Output::default();
    match cmd {
        Command::Run { model, input, ct } => {
            let cfg = CascadeConfig::new(ct)?;
            let m = model::load(model)?;
            let data = Dataset::load(input)?;
            if data.shape() != m.input_shape() {
                return Err(Error::Shape(format!(
                    "input images are {}, model expects {}",
                    data.shape(),
                    m.input_shape()
                )));
            }
            for i in 0..data.len() {
                let p = infer(&m, &input_tensor(data.sample(i), m.input_shape())?, &cfg)?;
                let line = json!({
                    "index": i,
                    "class": p.top1,
                    "label": m.class_name(p.top1),
                    "probs": p.probs,
                    "cs": p.cs,
                    "gate_cs": p.gate_cs,
                    "source": p.source.name(),
                });
                writeln!(out.stdout, "{line}").expect("string write");
            }
        }
        Command::Sweep { model, dataset, labels, ct_list, ct_range: range, profile, out: dest } => {
            let cts = match (ct_list, range) {
                (Some(list), _) => list,
                (None, Some(r)) => parse_range(&r)?,
                (None, None) => unreachable!("clap requires one of the two"),
            };
            let m = model::load(model)?;
            let data = Dataset::load(dataset)?;
            let labels = load_labels(labels)?;
            let (profile, _) = load_profile(profile.as_deref(), &m)?;
            let rows = sweep_ct(&m, &data, Some(&labels), &cts, &profile)?;
            let mut csv = String::from("ct,accuracy,delta_int8,forwarded_fraction,avg_speedup\n");
            for r in rows {
                writeln!(
                    csv,
                    "{:.6},{:.6},{:.6},{:.6},{:.6}",
                    r.ct,
                    r.accuracy.expect("labels given"),
                    r.delta_vs_int8.expect("labels given"),
                    r.forwarded_fraction,
                    r.avg_speedup
                )
                .expect("string write");
            }
            match dest {
                Some(path) => out.files.push((path, csv.into_bytes())),
                None => out.stdout = csv,
            }
        }
        Command::Report { model, profile } => {
            let m = model::load(model)?;
            let (profile, source) = load_profile(profile.as_deref(), &m)?;
            let report = json!({
                "memory": memory_report(&m),
                "latency_us": {
                    "bnn": arm_latency(m.arm(ArmKind::Bnn), &profile)?,
                    "int8": arm_latency(m.arm(ArmKind::Int8), &profile)?,
                    "l_cs": profile.l_cs,
                    "profile": source,
                },
            });
            out.stdout = serde_json::to_string_pretty(&report).expect("json") + "\n";
        }
        Command::Inspect { model } => {
            out.stdout = model::load(model)?.inspect();
        }
        Command::Verify { model, golden } => {
            let m = model::load(model)?;
            let report = verify_golden(&m, &load_golden(golden)?)?;
            out.failed = !report.passed();
            out.stdout = serde_json::to_string(&report).expect("json") + "\n";
        }
        Command::Synth { topology, seed, samples, label_noise, out_dir } => {
            let topo = Topology::from_name(&topology)
                .ok_or_else(|| Error::InvalidParam(format!("unknown topology `{topology}`")))?;
            if !(0.0..=1.0).contains(&label_noise) {
                return Err(Error::InvalidParam("label noise must be in [0, 1]".into()));
            }
            if samples == 0 {
                return Err(Error::InvalidParam("samples must be positive".into()));
            }
            let m = topo.build(seed);
            let (data, labels) = synthetic_dataset(&m, samples, label_noise, seed)?;
            let mut golden = vec![];
            for i in 0..data.len().min(GOLDEN_SAMPLES) {
                golden.extend(trace(&m, &input_tensor(data.sample(i), m.input_shape())?)?);
            }
            let files = [
                ("model.cpnt", model::to_bytes(&m)),
                ("images.idx", data.to_idx()),
                ("labels.idx", labels_to_idx(&labels)),
                ("profile.json", synthetic_profile(&m).to_json().into_bytes()),
                ("golden.cpgv", encode_golden(&golden)),
            ];
            for (name, bytes) in files {
                writeln!(out.stdout, "{}", out_dir.join(name).display()).expect("string write");
                out.files.push((out_dir.join(name), bytes));
            }
        }
    }
    Ok(out)
}

fn parse_range(text: &str) -> Result<Vec<f64>, Error> {
    let parts: Vec<&str> = text.split(':').collect();
    let bad = || Error::InvalidParam(format!("--ct-range expects start:end:step, got `{text}`"));
    let [a, b, c] = parts[..] else { return Err(bad()) };
    let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
    ct_range(num(a)?, num(b)?, num(c)?)
}

fn emit(out: Output) -> Result<bool, Error> {
    for (path, bytes) in &out.files {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, bytes)?;
    }
    print!("{}", out.stdout);
    Ok(!out.failed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|_| run(cli.command)).and_then(emit);
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("{}", json!({ "error": { "kind": e.kind(), "message": e.to_string() } }));
            ExitCode::FAILURE
        }
    }
}
