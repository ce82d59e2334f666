use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use featborrow::anchors::{
    coverage_report, design_scales, max_anchor_ar, max_ar_terms, AnchorSpec, CoverageMode, Range,
    DEFAULT_IMAGE_SIZE,
};
use featborrow::autograd::gradcheck;
use featborrow::ffb::forward_with_matchings;
use featborrow::ingest::{ar_stats, load_annotations, DEFAULT_PERCENTILES};
use featborrow::rf::{audit, ChainSpec};
use featborrow::{BorrowNetParams, Error, FeaturePyramid, ForwardStatus, Result};

use crate::config::{load_chain, parse_config, RunConfig};
use crate::selfcheck;
use crate::tensorfile::TensorFile;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_CHECK_FAILED: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "featborrow",
    version,
    about = "Cross-layer feature borrowing and anchor design toolkit"
)]
pub struct Cli {
    /// Worker threads for coverage sampling and finite differences.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Directory for artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the borrowing forward pass on a seeded pyramid.
    Forward {
        #[arg(long)]
        config: PathBuf,
    },
    /// Compare manual gradients with central differences.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Anchor scale design and coverage.
    Anchors {
        #[command(subcommand)]
        command: AnchorsCommand,
    },
    /// Largest anchor aspect ratio needed for a given object aspect ratio.
    Maxar {
        #[arg(long)]
        mar_obj: f64,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
    },
    /// Stride and receptive field along a layer chain.
    Rf {
        /// Chain spec JSON; the VGG-16 SSD300 chain when omitted.
        #[arg(long)]
        chain: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Aspect-ratio statistics of COCO-style annotations.
    Stats {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        category: Option<i64>,
        /// Comma-separated percentiles in (0, 100].
        #[arg(long, value_delimiter = ',')]
        percentiles: Option<Vec<f64>>,
        #[arg(long)]
        json: bool,
    },
    /// Run the bundled property fixtures.
    Selfcheck,
}

#[derive(Debug, Subcommand)]
enum AnchorsCommand {
    /// First- and second-set anchor scales per layer.
    Design(DesignArgs),
    /// IoU coverage of sampled objects by the anchor shapes.
    Coverage(CoverageArgs),
}

#[derive(Debug, Args)]
struct DesignArgs {
    /// Config whose anchor spec is shown; the reference design otherwise.
    #[arg(long, conflicts_with = "sizes")]
    config: Option<PathBuf>,
    /// Comma-separated first-set sizes.
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<f64>>,
    #[arg(long, default_value_t = DEFAULT_IMAGE_SIZE)]
    image_size: f64,
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    ArOnly,
    Joint,
}

#[derive(Debug, Args)]
struct CoverageArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "ar-only")]
    mode: ModeArg,
    /// Object aspect-ratio range `lo:hi`; fractions such as `1/6` are accepted.
    #[arg(long, default_value = "1/6:6", value_parser = parse_range)]
    ar_range: Range,
    /// Object scale range `lo:hi` in pixels.
    #[arg(long, default_value = "32:300", value_parser = parse_range)]
    scale_range: Range,
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
    #[arg(long, default_value_t = 100_000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    json: bool,
}

fn parse_number(s: &str) -> std::result::Result<f64, String> {
    let s = s.trim();
    let value = match s.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.trim().parse().map_err(|_| format!("bad number `{s}`"))?;
            let b: f64 = b.trim().parse().map_err(|_| format!("bad number `{s}`"))?;
            a / b
        }
        None => s.parse().map_err(|_| format!("bad number `{s}`"))?,
    };
    if value.is_finite() {
        Ok(value)
    } else {
        Err(format!("`{s}` is not finite"))
    }
}

fn parse_range(s: &str) -> std::result::Result<Range, String> {
    let (lo, hi) = s
        .split_once(':')
        .ok_or_else(|| format!("expected `lo:hi`, got `{s}`"))?;
    Ok(Range::new(parse_number(lo)?, parse_number(hi)?))
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                EXIT_INVALID
            } else {
                EXIT_OK
            };
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_INVALID
        }
    }
}

fn execute(cli: &Cli) -> Result<i32> {
    let threads = cli.threads.max(1);
    match &cli.command {
        Command::Forward { config } => forward(&parse_config(config)?, cli.out.as_deref()),
        Command::Gradcheck { config, eps, tol } => gradcheck_cmd(
            &parse_config(config)?,
            *eps,
            *tol,
            threads,
            cli.out.as_deref(),
        ),
        Command::Anchors { command } => match command {
            AnchorsCommand::Design(args) => anchors_design(args),
            AnchorsCommand::Coverage(args) => anchors_coverage(args, threads, cli.out.as_deref()),
        },
        Command::Maxar { mar_obj, iou } => {
            let terms = max_ar_terms(*iou)?;
            let value = max_anchor_ar(*mar_obj, *iou)?;
            println!("{value}");
            eprintln!(
                "terms at iou {iou}: [{:.6}, {:.6}, {:.6}]",
                terms[0], terms[1], terms[2]
            );
            Ok(EXIT_OK)
        }
        Command::Rf { chain, json } => {
            let spec = match chain {
                Some(path) => load_chain(path)?,
                None => ChainSpec::vgg16_ssd300(),
            };
            let report = audit(&spec)?;
            if *json {
                println!("{}", to_json(&report)?);
            } else {
                println!("{report}");
            }
            Ok(EXIT_OK)
        }
        Command::Stats {
            annotations,
            category,
            percentiles,
            json,
        } => {
            let mut set = load_annotations(annotations)?;
            if let Some(c) = category {
                set = set.filter_category(*c);
            }
            let ps = percentiles
                .clone()
                .unwrap_or_else(|| DEFAULT_PERCENTILES.to_vec());
            let stats = ar_stats(&set, &ps)?;
            if *json {
                let doc = json!({ "skipped": set.skipped, "stats": stats });
                println!("{}", to_json(&doc)?);
            } else {
                println!("{stats}");
                println!("skipped  {}", set.skipped);
            }
            Ok(EXIT_OK)
        }
        Command::Selfcheck => {
            let results = selfcheck::run_all(threads);
            for r in &results {
                println!("{r}");
            }
            let failed = results.iter().filter(|r| !r.passed).count();
            println!("{} checks, {failed} failed", results.len());
            Ok(if failed == 0 {
                EXIT_OK
            } else {
                EXIT_CHECK_FAILED
            })
        }
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Format {
        detail: e.to_string(),
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.display().to_string(),
        message: e.to_string(),
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::File::create(path)
        .and_then(|mut f| f.write_all(text.as_bytes()))
        .map_err(|e| Error::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })
}

fn out_dir<'a>(flag: Option<&'a Path>, cfg: &'a RunConfig) -> Option<&'a Path> {
    flag.or(cfg.out_dir.as_deref())
}

fn setup(cfg: &RunConfig) -> Result<(FeaturePyramid, BorrowNetParams)> {
    cfg.require_pyramid()?;
    let p = FeaturePyramid::seeded(&cfg.pyramid, cfg.seed)?;
    let params = BorrowNetParams::init(&cfg.pyramid, cfg.init);
    params.validate(&p)?;
    Ok((p, params))
}

fn forward(cfg: &RunConfig, out: Option<&Path>) -> Result<i32> {
    let (p, params) = setup(cfg)?;
    let (y, matchings) = forward_with_matchings(&p, &params)?;

    let layers: Vec<_> = y
        .layers
        .iter()
        .zip(p.layers())
        .map(|(yl, xl)| {
            json!({
                "shape": [yl.h(), yl.w(), yl.c()],
                "max_abs_change": yl.max_abs_diff(xl),
                "l2": yl.data().iter().map(|v| v * v).sum::<f64>().sqrt(),
            })
        })
        .collect();
    let matching: Vec<_> = matchings
        .iter()
        .map(|s| {
            let worst_row = (0..s.m())
                .map(|i| (s.values().row(i).iter().sum::<f64>() - 1.0).abs())
                .fold(0.0, f64::max);
            json!({ "shape": [s.m(), s.d()], "max_row_sum_error": worst_row })
        })
        .collect();
    let summary = json!({
        "status": match y.status {
            ForwardStatus::Ok => "ok",
            ForwardStatus::NoDeeperLayers => "no-deeper-layers",
        },
        "seed": cfg.seed,
        "init": cfg.init.mode.to_string(),
        "param_seed": cfg.init.seed,
        "parameters": params.scalar_count(),
        "layers": layers,
        "matching": matching,
    });
    let text = to_json(&summary)?;
    println!("{text}");

    if let Some(dir) = out_dir(out, cfg) {
        create_dir(dir)?;
        for (n, layer) in y.layers.iter().enumerate() {
            TensorFile::from(layer).save(dir.join(format!("y{n}.pbt")))?;
        }
        for (n, s) in matchings.iter().enumerate() {
            TensorFile::from(s.values()).save(dir.join(format!("s{n}.pbt")))?;
        }
        write_text(&dir.join("summary.json"), &(text + "\n"))?;
    }
    Ok(EXIT_OK)
}

fn gradcheck_cmd(
    cfg: &RunConfig,
    eps: f64,
    tol: f64,
    threads: usize,
    out: Option<&Path>,
) -> Result<i32> {
    let (p, params) = setup(cfg)?;
    let target = FeaturePyramid::seeded(&cfg.pyramid, cfg.target_seed)?.into();
    let report = gradcheck(&p, &params, &target, eps, tol, threads)?;
    println!("{report}");
    if let Some(dir) = out_dir(out, cfg) {
        create_dir(dir)?;
        let groups: Vec<_> = report
            .groups
            .iter()
            .map(|g| {
                json!({
                    "group": g.id.to_string(),
                    "max_rel": g.max_rel,
                    "max_abs": g.max_abs,
                    "passed": g.passed,
                })
            })
            .collect();
        let doc = json!({ "eps": eps, "tol": tol, "passed": report.passed, "groups": groups });
        write_text(&dir.join("gradcheck.json"), &(to_json(&doc)? + "\n"))?;
    }
    Ok(if report.passed {
        EXIT_OK
    } else {
        EXIT_CHECK_FAILED
    })
}

fn anchors_design(args: &DesignArgs) -> Result<i32> {
    let spec = match (&args.config, &args.sizes) {
        (Some(path), _) => parse_config(path)?.anchors,
        (None, Some(sizes)) => {
            let design = design_scales(sizes, args.image_size)?;
            let reference = AnchorSpec::reference();
            let per_layer = (sizes.len() == reference.sizes.len())
                .then(|| reference.layer_aspect_ratios.clone())
                .flatten();
            let spec = AnchorSpec {
                sizes: design.sizes,
                second_sizes: design.second_sizes,
                aspect_ratios: reference.aspect_ratios,
                layer_aspect_ratios: per_layer,
                image_size: args.image_size,
            };
            spec.validate()?;
            spec
        }
        (None, None) => AnchorSpec::reference(),
    };
    if args.json {
        println!("{}", to_json(&spec)?);
        return Ok(EXIT_OK);
    }
    println!(
        "{:<6} {:>10} {:>10}  aspect ratios",
        "layer", "size", "second"
    );
    for k in 0..spec.layers() {
        let second = spec
            .second_sizes
            .get(k)
            .map_or("-".to_string(), |s| format!("{s:.4}"));
        let ars: Vec<String> = spec
            .aspect_ratios_for(k)
            .iter()
            .map(|a| format!("{a:.4}"))
            .collect();
        println!(
            "{:<6} {:>10.4} {:>10}  {}",
            k,
            spec.sizes[k],
            second,
            ars.join(" ")
        );
    }
    println!(
        "image size {}, {} anchors per cell",
        spec.image_size,
        spec.anchors_per_cell()
    );
    Ok(EXIT_OK)
}

fn anchors_coverage(args: &CoverageArgs, threads: usize, out: Option<&Path>) -> Result<i32> {
    let spec = match &args.config {
        Some(path) => parse_config(path)?.anchors,
        None => AnchorSpec::reference(),
    };
    let mode = match args.mode {
        ModeArg::ArOnly => CoverageMode::ArOnly,
        ModeArg::Joint => CoverageMode::Joint,
    };
    let report = coverage_report(
        &spec,
        mode,
        args.ar_range,
        args.scale_range,
        args.iou,
        args.samples,
        args.seed,
        threads,
    )?;
    if args.json {
        println!("{}", to_json(&report)?);
    } else {
        println!("{report}");
    }
    if let Some(dir) = out {
        create_dir(dir)?;
        write_text(&dir.join("coverage.json"), &(to_json(&report)? + "\n"))?;
    }
    Ok(EXIT_OK)
}
