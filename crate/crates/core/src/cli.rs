//! Command-line front end. Exit codes: 0 success, 1 validation or usage
//! error, 2 runtime or data error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::analysis::pareto::{analyze, format_front, read_points_csv, rd_search, write_points_csv, ParetoPoint};
use crate::analysis::probe::{ols_r2, partition_code_values, Partition, ProbeReport};
use crate::analysis::train::TrainConfig;
use crate::bitstream::{bitrate, read_tokens, write_tokens, BitrateReport, TokenStream};
use crate::dropout::sample_active_stages;
use crate::error::{Error, Result};
use crate::feature_io::{read_feature_file, write_feature_file, FeatureMatrix};
use crate::param_file::{load_params, save_params, CliConfigDoc};
use crate::quantizer::{decode_indices, encode, init_params, EncodeOptions};
use crate::rng::Rng;
use crate::selftest::{run_selftest, synthetic_features, SelftestOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "bdrfsq", version, about = "Block-diagonal residual FSQ tokenizer tools")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write freshly initialized quantizer parameters.
    Init {
        /// JSON config document; standard defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode emotion and acoustic feature files to a token file.
    Encode {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        emotion: PathBuf,
        #[arg(long)]
        acoustic: PathBuf,
        /// Active stages K'; all stages when omitted.
        #[arg(long)]
        stages: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the cumulative latent after each listed stage count to
        /// `<out>.cum<m>.afct`.
        #[arg(long, value_delimiter = ',')]
        cumulative: Vec<usize>,
    },
    /// Reconstruct the latent from a token file.
    Decode {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        tokens: PathBuf,
        /// Decode only the first K' stages; all encoded stages when omitted.
        #[arg(long)]
        stages: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the bitrate at K' active stages.
    Bitrate {
        #[command(flatten)]
        source: ConfigSource,
        #[arg(long)]
        stages: usize,
    },
    /// OLS probe from emotion code values to a target feature file.
    Probe {
        #[arg(long)]
        tokens: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long, default_value_t = 0.8)]
        split: f64,
        #[arg(long)]
        seed: u64,
        /// Read the acoustic partition's codes instead.
        #[arg(long)]
        acoustic: bool,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Rate-distortion sweep with Pareto front and knee.
    Rdsearch(RdArgs),
    /// Draw active stage counts and tabulate their frequencies.
    SampleDropout {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run the built-in consistency checks.
    Selftest {
        /// Replacement reference-front CSV (d,L,mse rows).
        #[arg(long)]
        fixture: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct ConfigSource {
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RdArgs {
    #[command(flatten)]
    input: RdInput,
    /// A range `1-4` or a list `1,2,3,4`.
    #[arg(long, default_value = "1-4", value_parser = parse_set)]
    dims: IntSet,
    #[arg(long, default_value = "2,3,4", value_parser = parse_set)]
    levels: IntSet,
    #[arg(long, default_value_t = 2)]
    stages: usize,
    #[arg(long, default_value_t = 3000)]
    iters: usize,
    #[arg(long, default_value_t = 256)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct RdInput {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Gaussian data of N frames by D dims, e.g. `20000x16`.
    #[arg(long, value_parser = parse_shape)]
    synthetic: Option<(usize, usize)>,
    /// Recompute efficiencies and the knee from a d,L,mse CSV without training.
    #[arg(long)]
    from_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntSet(pub Vec<usize>);

fn parse_set(s: &str) -> std::result::Result<IntSet, String> {
    let s = s.trim();
    let values: Vec<usize> = if let Some((a, b)) = s.split_once('-') {
        let a: usize = a.trim().parse().map_err(|e| format!("{a:?}: {e}"))?;
        let b: usize = b.trim().parse().map_err(|e| format!("{b:?}: {e}"))?;
        (a..=b).collect()
    } else {
        s.split(',')
            .filter(|p| !p.trim().is_empty())
            .map(|p| p.trim().parse().map_err(|e| format!("{p:?}: {e}")))
            .collect::<std::result::Result<_, _>>()?
    };
    if values.is_empty() {
        return Err("empty set".into());
    }
    Ok(IntSet(values))
}

fn parse_shape(s: &str) -> std::result::Result<(usize, usize), String> {
    let (n, d) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected NxD, got {s:?}"))?;
    let n: usize = n.parse().map_err(|e| format!("{n:?}: {e}"))?;
    let d: usize = d.parse().map_err(|e| format!("{d:?}: {e}"))?;
    if n < 2 || d == 0 {
        return Err(format!("need at least 2 frames and 1 dim, got {n}x{d}"));
    }
    Ok((n, d))
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { write!(err, "{text}") } else { write!(out, "{text}") };
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            if e.is_validation() {
                EXIT_VALIDATION
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

fn stdout_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

fn load_config_doc(path: Option<&Path>) -> Result<CliConfigDoc> {
    match path {
        Some(p) => CliConfigDoc::load(p),
        None => Ok(CliConfigDoc::default()),
    }
}

fn execute(cmd: Command, out: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::Init { config, seed, out: path } => {
            let doc = load_config_doc(config.as_deref())?;
            let cfg = doc.quantizer_config()?;
            let params = init_params(&cfg, &mut Rng::new(seed), doc.input_dims()?)?;
            save_params(&cfg, &params, &path)?;
            writeln!(out, "wrote {}", path.display()).map_err(stdout_err)?;
        }
        Command::Encode {
            params,
            emotion,
            acoustic,
            stages,
            out: path,
            cumulative,
        } => {
            let (cfg, params) = load_params(&params)?;
            let e = read_feature_file(&emotion)?;
            let a = read_feature_file(&acoustic)?;
            let opts = EncodeOptions {
                active_stages: stages,
                cumulative_at: cumulative,
                keep_cache: false,
            };
            let result = encode(&e, &a, &params, &cfg, &opts)?;
            let stream = TokenStream::from_config(&cfg, result.tokens)?;
            write_tokens(&stream, &path)?;
            for (m, latent) in &result.cumulative {
                let cum_path = cumulative_path(&path, *m);
                write_feature_file(&params.apply_post(latent)?, &cum_path)?;
            }
            writeln!(
                out,
                "encoded {} frames x {} stages to {}",
                stream.frames(),
                stream.stages(),
                path.display()
            )
            .map_err(stdout_err)?;
        }
        Command::Decode {
            params,
            tokens,
            stages,
            out: path,
        } => {
            let (cfg, params) = load_params(&params)?;
            let stream = read_tokens(&tokens, stages)?;
            if stream.levels() != cfg.levels() {
                return Err(Error::Shape(format!(
                    "token file levels {:?} differ from the parameter file's {:?}",
                    stream.levels().levels(),
                    cfg.levels().levels()
                )));
            }
            let latent = decode_indices(stream.tokens(), &params, &cfg)?;
            write_feature_file(&latent, &path)?;
            writeln!(
                out,
                "decoded {} frames at {} stages to {}",
                latent.frames(),
                stream.stages(),
                path.display()
            )
            .map_err(stdout_err)?;
        }
        Command::Bitrate { source, stages } => {
            let cfg = match (&source.params, &source.config) {
                (Some(p), _) => load_params(p)?.0,
                (None, c) => load_config_doc(c.as_deref())?.quantizer_config()?,
            };
            let report = bitrate(&cfg, stages)?;
            out.write_all(format_bitrate(&report).as_bytes()).map_err(stdout_err)?;
        }
        Command::Probe {
            tokens,
            target,
            split,
            seed,
            acoustic,
            csv,
        } => {
            let stream = read_tokens(&tokens, None)?;
            let y = read_feature_file(&target)?;
            if y.frames() != stream.frames() {
                return Err(Error::Shape(format!(
                    "token file has {} frames, target has {}",
                    stream.frames(),
                    y.frames()
                )));
            }
            let partition = if acoustic { Partition::Acoustic } else { Partition::Emotion };
            let levels = stream.levels();
            let range = match partition {
                Partition::Emotion => &levels.levels()[..levels.emotion_dims()],
                Partition::Acoustic => &levels.levels()[levels.emotion_dims()..],
            };
            let x = partition_code_values(&stream, partition)?;
            let mut report = ols_r2(&x, &y, split, &mut Rng::new(seed))?;
            report.general_levels = range.iter().any(|&l| l != 2);
            out.write_all(format_probe(&report).as_bytes()).map_err(stdout_err)?;
            if let Some(p) = csv {
                std::fs::write(&p, probe_csv(&report)).map_err(io_err(&p))?;
            }
        }
        Command::Rdsearch(args) => return rdsearch(args, out),
        Command::SampleDropout { n, seed, config, csv } => {
            let doc = load_config_doc(config.as_deref())?;
            let cfg = doc.dropout_config()?;
            cfg.validate()?;
            let mut rng = Rng::new(seed);
            let mut counts = vec![0usize; cfg.full_k + 1];
            for _ in 0..n {
                counts[sample_active_stages(&cfg, &mut rng)] += 1;
            }
            let mut rows = Vec::new();
            if n > 0 {
                for (m, &c) in counts.iter().enumerate() {
                    let expected = cfg.marginal(m);
                    if c > 0 || expected > 0.0 {
                        rows.push((m, c, c as f64 / n as f64, expected));
                    }
                }
            }
            let mut text = format!("{:>6} {:>8} {:>10} {:>10}\n", "stages", "count", "frequency", "expected");
            for (m, c, f, e) in &rows {
                let _ = writeln!(text, "{m:>6} {c:>8} {f:>10.4} {e:>10.4}");
            }
            out.write_all(text.as_bytes()).map_err(stdout_err)?;
            if let Some(p) = csv {
                let mut s = String::from("stages,count,frequency,expected\n");
                for (m, c, f, e) in &rows {
                    let _ = writeln!(s, "{m},{c},{f},{e}");
                }
                std::fs::write(&p, s).map_err(io_err(&p))?;
            }
        }
        Command::Selftest { fixture, seed } => {
            let opts = SelftestOptions {
                seed,
                front_fixture: fixture,
                ..SelftestOptions::default()
            };
            let results = run_selftest(&opts);
            let mut all = true;
            for r in &results {
                all &= r.passed;
                let tag = if r.passed { "PASS" } else { "FAIL" };
                writeln!(out, "{tag} {}: {}", r.name, r.detail).map_err(stdout_err)?;
            }
            return Ok(if all { EXIT_OK } else { EXIT_RUNTIME });
        }
    }
    Ok(EXIT_OK)
}

pub fn cumulative_path(out: &Path, m: usize) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(format!(".cum{m}.afct"));
    PathBuf::from(s)
}

pub fn format_bitrate(r: &BitrateReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "active stages        {}", r.active_stages);
    let _ = writeln!(s, "bits/frame/stage     {}", trim_float(r.bits_per_frame_per_stage));
    let _ = writeln!(s, "bitrate              {} kbps ({} bps)", trim_float(r.total_kbps), trim_float(r.total_bps));
    let _ = writeln!(s, "emotion bits/frame   {}", trim_float(r.emotion_bits_per_frame));
    let _ = writeln!(s, "acoustic bits/frame  {}", trim_float(r.acoustic_bits_per_frame));
    let _ = writeln!(s, "emotion share        {}%", trim_float(r.emotion_ratio * 100.0));
    s
}

fn trim_float(v: f64) -> String {
    let s = format!("{v:.4}");
    let s = s.trim_end_matches('0');
    let s = s.strip_suffix('.').map_or(s.to_string(), |x| format!("{x}.0"));
    s
}

fn format_probe(r: &ProbeReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<22} {:>10}", "metric", "value");
    for (name, v) in [
        ("r2_global", r.r2_global),
        ("r2_per_target_mean", r.r2_per_target_mean),
        ("r2_per_target_median", r.r2_per_target_median),
        ("r2_random_baseline", r.r2_random_baseline),
        ("r2_train_global", r.r2_train_global),
        ("train_test_gap", r.train_test_gap()),
    ] {
        let _ = writeln!(s, "{name:<22} {v:>10.4}");
    }
    let _ = writeln!(s, "{:<22} {:>10}", "n_train", r.n_train);
    let _ = writeln!(s, "{:<22} {:>10}", "n_test", r.n_test);
    let _ = writeln!(s, "{:<22} {:>10}", "n_features", r.n_features);
    if !r.excluded_targets.is_empty() {
        let _ = writeln!(s, "note: constant targets excluded: {:?}", r.excluded_targets);
    }
    if !r.constant_feature_columns.is_empty() {
        let _ = writeln!(s, "note: constant feature columns dropped: {:?}", r.constant_feature_columns);
    }
    if r.general_levels {
        let _ = writeln!(s, "note: features are grid values (some dims have L != 2)");
    }
    s
}

fn probe_csv(r: &ProbeReport) -> String {
    format!(
        "r2_global,r2_per_target_mean,r2_per_target_median,r2_random_baseline,r2_train_global,train_test_gap,n_train,n_test,n_features,excluded_targets,general_levels\n{},{},{},{},{},{},{},{},{},{},{}\n",
        r.r2_global,
        r.r2_per_target_mean,
        r.r2_per_target_median,
        r.r2_random_baseline,
        r.r2_train_global,
        r.train_test_gap(),
        r.n_train,
        r.n_test,
        r.n_features,
        r.excluded_targets.len(),
        u8::from(r.general_levels)
    )
}

fn rdsearch(args: RdArgs, out: &mut dyn Write) -> Result<i32> {
    if args.stages == 0 {
        return Err(Error::InvalidConfig("--stages must be at least 1".into()));
    }
    let levels: Vec<u32> = args
        .levels
        .0
        .iter()
        .map(|&l| u32::try_from(l).ok().filter(|&l| l >= 2))
        .collect::<Option<_>>()
        .ok_or_else(|| Error::InvalidConfig("every level count must be between 2 and 2^32-1".into()))?;
    if args.dims.0.contains(&0) {
        return Err(Error::InvalidConfig("dims must be at least 1".into()));
    }

    let (points, mut text) = if let Some(path) = &args.input.from_csv {
        let file = File::open(path).map_err(io_err(path))?;
        (read_points_csv(file, args.stages)?, String::new())
    } else {
        let Some(seed) = args.seed else {
            return Err(Error::InvalidConfig("--seed is required when training".into()));
        };
        let data: FeatureMatrix = match (&args.input.data, args.input.synthetic) {
            (Some(p), _) => read_feature_file(p)?,
            (None, Some((n, d))) => synthetic_features(n, d, seed)?,
            (None, None) => unreachable!("clap enforces one input"),
        };
        let cfg = TrainConfig {
            iterations: args.iters,
            learning_rate: args.lr,
            batch_size: args.batch,
            seed,
            ..TrainConfig::default()
        };
        cfg.validate()?;
        let cells = rd_search(&data, &args.dims.0, &levels, args.stages, &cfg)?;
        let mut text = format!(
            "{:>4} {:>3} {:>8} {:>8} {:>8} {:>10} {:>10}\n",
            "d", "L", "bits", "mse", "cos_sim", "init_loss", "final_loss"
        );
        let mut points = Vec::new();
        for c in &cells {
            match &c.outcome {
                Ok(m) => {
                    let _ = writeln!(
                        text,
                        "{:>4} {:>3} {:>8.4} {:>8.4} {:>8.4} {:>10.4} {:>10.4}",
                        c.d, c.levels, c.bits, m.mse, m.cosine, m.train.initial_loss, m.train.final_loss
                    );
                    points.push(c.point().unwrap());
                }
                Err(e) => {
                    let _ = writeln!(text, "{:>4} {:>3} {:>8.4} failed: {e}", c.d, c.levels, c.bits);
                }
            }
        }
        text.push('\n');
        (points, text)
    };

    let analysis = match points.len() {
        0 => return Err(Error::Precondition("no successful cells to analyze".into())),
        1 => None,
        _ => Some(analyze(&points)?),
    };
    match &analysis {
        Some(a) if a.front.len() >= 2 => text.push_str(&format_front(a)),
        _ => text.push_str(&single_point(&points)),
    }
    out.write_all(text.as_bytes()).map_err(stdout_err)?;
    if let Some(p) = &args.csv {
        let file = File::create(p).map_err(io_err(p))?;
        write_points_csv(&points, analysis.as_ref(), BufWriter::new(file))?;
    }
    Ok(EXIT_OK)
}

fn single_point(points: &[ParetoPoint]) -> String {
    let p = &points[0];
    format!("single point: d={} L={} bits={:.4} mse={:.4}\n", p.d, p.levels, p.bits, p.mse)
}
