//! `nonosgood`: builds parameter tables, traces trajectories, renders densities and
//! fields, and runs the acceptance checks.
//!
//! Exit status: 0 on success, 1 when `verify` has a failing check, 2 on configuration
//! or construction errors (reported as one JSON object on stderr).

mod config;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use nonosgood::fixpoint::{final_pair, ParamTable};
use nonosgood::geometry::{cantor_center, dyadic_center, LengthSequence, SymbolString};
use nonosgood::traj_field::{integrate, ChiProfile, RkOptions, TrajConfig, TrajField, Trajectory, VectorField};
use nonosgood::verify::Lab;
use nonosgood::FORMAT_VERSION;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "nonosgood", version, about = "Divergence-free fields with non-Osgood moduli")]
struct Cli {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Recursion depth budget.
    #[arg(long, global = true)]
    depth: Option<usize>,
    /// Number of generations of the Cantor field.
    #[arg(long, global = true)]
    nmax: Option<usize>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Write `params.json`.
    BuildParams,
    /// Integrate the Cantor field from every centre up to a generation.
    Trace {
        #[arg(long, default_value_t = 3)]
        generations: usize,
        /// Follow the reversed field from dyadic centres back to Cantor centres.
        #[arg(long)]
        reverse: bool,
        /// With `--reverse`: deepest dyadic generation to start from.
        #[arg(long)]
        from_dyadic: Option<usize>,
    },
    /// Write density snapshots of the level-0 family at the given times in [0, 1].
    Density {
        /// Comma-separated times.
        #[arg(long, value_delimiter = ',', default_value = "0,0.5,1")]
        times: Vec<f64>,
    },
    /// Run the acceptance checks and print JSON lines.
    Verify {
        /// Only these criteria (comma-separated, 1..=10).
        #[arg(long, value_delimiter = ',')]
        criterion: Vec<u8>,
    },
    /// Sample a field on a grid and write a quiver CSV.
    RenderField {
        #[arg(long, default_value_t = 0.5)]
        time: f64,
        /// `final` (the non-unique pair's velocity) or `cantor`.
        #[arg(long, default_value = "final")]
        field: String,
        /// Points per side.
        #[arg(long, default_value_t = 32)]
        points: usize,
    },
}

/// Configuration and construction failures; exit code 2.
#[derive(Debug)]
struct SetupError(anyhow::Error);

fn setup<T>(r: Result<T>) -> std::result::Result<T, SetupError> {
    r.map_err(SetupError)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Ok(n) = std::env::var("NONOSGOOD_THREADS") {
        if let Ok(n) = n.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            let kind = classify(&e.0);
            let obj = json!({ "format_version": FORMAT_VERSION, "error": kind, "message": format!("{:#}", e.0) });
            eprintln!("{obj}");
            ExitCode::from(2)
        }
    }
}

fn classify(e: &anyhow::Error) -> &'static str {
    use nonosgood::fixpoint::FixError;
    use nonosgood::moc::MocError;
    for c in e.chain() {
        if let Some(m) = c.downcast_ref::<MocError>() {
            return if matches!(m, MocError::Divergence { .. }) { "divergence" } else { "modulus" };
        }
        if let Some(f) = c.downcast_ref::<FixError>() {
            return match f {
                FixError::Modulus(MocError::Divergence { .. }) => "divergence",
                FixError::Modulus(_) => "modulus",
                FixError::Growth { .. } | FixError::Construction(_) => "construction",
                FixError::Table(_) => "table",
                _ => "evaluation",
            };
        }
    }
    "config"
}

fn run(cli: Cli) -> std::result::Result<ExitCode, SetupError> {
    let mut cfg = RunConfig::default();
    if let Some(p) = &cli.config {
        setup(cfg.load(p))?;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if let Some(s) = cli.seed {
        cfg.suite.seed = s;
    }
    if let Some(d) = cli.depth {
        cfg.suite.depth = d;
    }
    if let Some(n) = cli.nmax {
        cfg.suite.n_max = n;
    }
    for kv in &cli.set {
        let (k, v) = setup(kv.split_once('=').ok_or_else(|| anyhow::anyhow!("--set expects KEY=VALUE, got `{kv}`")))?;
        setup(cfg.set(k, v))?;
    }
    setup(cfg.validate())?;
    setup(fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display())))?;
    match cli.cmd {
        Cmd::BuildParams => {
            let table = setup(build_table(&cfg))?;
            setup(write_params(&cfg, &table))?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Trace { generations, reverse, from_dyadic } => {
            let n = if reverse { from_dyadic.unwrap_or(generations) } else { generations };
            setup(trace(&cfg, n, reverse))?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Density { times } => {
            let table = setup(load_or_build(&cfg))?;
            setup(density(&cfg, &table, &times))?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Verify { criterion } => {
            let table = setup(load_or_build(&cfg))?;
            let pair = table.pair().clone();
            let lab = setup(Lab::new(cfg.suite.clone(), pair, table).map_err(anyhow::Error::msg))?;
            let list: Vec<u8> = if criterion.is_empty() { (1..=10).collect() } else { criterion };
            let mut all_pass = true;
            let path = cfg.out.join("reports.jsonl");
            let mut file = setup(fs::File::create(&path).with_context(|| format!("creating {}", path.display())).map(BufWriter::new))?;
            for i in list {
                for r in lab.criterion(i) {
                    all_pass &= r.pass;
                    let line = r.json_line();
                    println!("{line}");
                    setup(writeln!(file, "{line}").context("writing reports"))?;
                }
            }
            setup(file.flush().context("writing reports"))?;
            Ok(if all_pass { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Cmd::RenderField { time, field, points } => {
            let table = setup(load_or_build(&cfg))?;
            setup(render_field(&cfg, &table, time, &field, points))?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn build_table(cfg: &RunConfig) -> Result<ParamTable> {
    let pair = cfg.pair()?;
    Ok(ParamTable::choose_eta(&pair, cfg.suite.dim, cfg.level_cap)?)
}

/// `params.json` from the output directory when present, otherwise a fresh build.
fn load_or_build(cfg: &RunConfig) -> Result<ParamTable> {
    let path = cfg.out.join("params.json");
    if path.exists() {
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        Ok(ParamTable::from_json(&text, &cfg.pair()?).with_context(|| format!("loading {}", path.display()))?)
    } else {
        build_table(cfg)
    }
}

fn write_params(cfg: &RunConfig, table: &ParamTable) -> Result<()> {
    let certs: Vec<_> = table
        .certify()?
        .into_iter()
        .map(|(name, stat, thr)| json!({ "name": name, "statistic": stat, "threshold": thr, "pass": stat <= thr }))
        .collect();
    let checks = table.constraint_checks()?;
    let mut v = serde_json::to_value(table)?;
    let obj = v.as_object_mut().expect("table is an object");
    obj.insert("certificates".into(), json!(certs));
    obj.insert("constraint_checks".into(), serde_json::to_value(checks)?);
    let path = cfg.out.join("params.json");
    fs::write(&path, serde_json::to_string_pretty(&v)? + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

#[derive(Serialize)]
struct TraceEntry {
    file: String,
    generation: usize,
    sigma: String,
    start: Vec<f64>,
    end: Option<Vec<f64>>,
    target: Vec<f64>,
    error: Option<f64>,
    /// Error over `ℓ_n` (forward) or over the Cantor cube side (reverse).
    relative_error: Option<f64>,
    steps: usize,
    failure: Option<String>,
}

fn trace(cfg: &RunConfig, generations: usize, reverse: bool) -> Result<()> {
    let s = &cfg.suite;
    let pair = cfg.pair()?;
    let b = TrajField::new(TrajConfig { dim: s.dim, pair, n_max: s.n_max, chi: ChiProfile::Sine })?;
    anyhow::ensure!(generations >= 1 && generations <= s.n_max, "generations must lie in 1..=n_max");
    let lens = LengthSequence::uniform(s.n_max);
    let dir = cfg.out.join(if reverse { "trace_reverse" } else { "trace" });
    fs::create_dir_all(&dir)?;
    let jobs: Vec<(usize, SymbolString)> = (1..=generations).flat_map(|n| SymbolString::all(s.dim, n).into_iter().map(move |sg| (n, sg))).collect();
    let opts = RkOptions { abs_tol: 1e-12, ..Default::default() };
    let rev = b.reversed();
    let t_end = b.final_time();
    let entries: Vec<TraceEntry> = jobs
        .par_iter()
        .map(|(n, sg)| {
            let p = cantor_center(&lens, sg).expect("generation within n_max");
            let q = dyadic_center::<f64>(sg);
            let (start, target) = if reverse { (q, p) } else { (p, q) };
            let name = format!("n{n}_{}.csv", sg.to_string().replace(' ', "_"));
            let res = if reverse {
                integrate(&rev, &start, 0.0, t_end, &opts)
            } else if b.time(*n) <= 0.0 {
                // Generation 1 is in place from the start.
                Ok(Trajectory { times: vec![0.0], points: vec![start.clone()], steps: 0, rejected: 0 })
            } else {
                integrate(&b, &start, 0.0, b.time(*n), &opts)
            };
            let scale = lens.len(*n);
            match res {
                Ok(tr) => {
                    let write = fs::File::create(dir.join(&name)).map(BufWriter::new).and_then(|w| tr.write_csv(w));
                    let end = tr.end().to_vec();
                    let err = end.iter().zip(&target).fold(0.0f64, |m, (a, c)| m.max((a - c).abs()));
                    TraceEntry {
                        file: name,
                        generation: *n,
                        sigma: sg.to_string(),
                        start,
                        end: Some(end),
                        target,
                        error: Some(err),
                        relative_error: Some(err / scale),
                        steps: tr.steps,
                        failure: write.err().map(|e| e.to_string()),
                    }
                }
                Err(e) => TraceEntry {
                    file: name,
                    generation: *n,
                    sigma: sg.to_string(),
                    start,
                    end: None,
                    target,
                    error: None,
                    relative_error: None,
                    steps: 0,
                    failure: Some(e.to_string()),
                },
            }
        })
        .collect();
    let max_rel = entries.iter().filter_map(|e| e.relative_error).fold(0.0f64, f64::max);
    let failures = entries.iter().filter(|e| e.failure.is_some()).count();
    let manifest = json!({
        "format_version": FORMAT_VERSION,
        "direction": if reverse { "reverse" } else { "forward" },
        "dim": s.dim,
        "n_max": s.n_max,
        "generations": generations,
        "trajectories": entries.len(),
        "failures": failures,
        "max_relative_error": max_rel,
        "entries": entries,
    });
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

fn time_label(t: f64) -> String {
    format!("{t}")
}

fn density(cfg: &RunConfig, table: &ParamTable, times: &[f64]) -> Result<()> {
    let depth = cfg.suite.depth;
    for &t in times {
        anyhow::ensure!((0.0..=1.0).contains(&t), "time {t} outside [0, 1]");
        let snap = table.density_theta(0, t, depth)?;
        let cubes = snap.cubes(1 << 16);
        let raster = snap.raster(cfg.grid, cfg.grid);
        let label = time_label(t);
        let frame = format!("frame_t{label}.pgm");
        let doc = json!({
            "format_version": FORMAT_VERSION,
            "theta_time": t,
            "mu_time": 1.0 - t,
            "depth": depth,
            "mass": snap.mass(),
            "disjoint": snap.disjoint(),
            "flagged": snap.approximate,
            "raster_skipped": raster.is_none(),
            "frame": raster.as_ref().map(|_| frame.clone()),
            "snapshot": snap,
            "cubes": cubes,
        });
        fs::write(cfg.out.join(format!("density_t{label}.json")), serde_json::to_string_pretty(&doc)? + "\n")?;
        if let Some(img) = raster {
            write_pgm(&cfg.out.join(frame), cfg.grid, cfg.grid, &img)?;
        }
    }
    Ok(())
}

/// Binary P5 graymap, pixel = round(255 · v / max v).
fn write_pgm(path: &Path, w: usize, h: usize, img: &[f64]) -> Result<()> {
    let max = img.iter().cloned().fold(0.0f64, f64::max);
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(img.iter().map(|v| if max > 0.0 { (255.0 * v / max).round().clamp(0.0, 255.0) as u8 } else { 0 }));
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn render_field(cfg: &RunConfig, table: &ParamTable, t: f64, field: &str, points: usize) -> Result<()> {
    let s = &cfg.suite;
    anyhow::ensure!(s.dim == 2, "render-field draws planar fields only (dim = 2)");
    let cantor;
    let eval: Box<dyn Fn(&[f64]) -> Vec<f64> + Sync> = match field {
        "final" => {
            anyhow::ensure!((0.0..=1.0).contains(&t), "time {t} outside [0, 1]");
            let fp = final_pair(table, s.depth);
            Box::new(move |x: &[f64]| fp.velocity(t, x).unwrap_or_else(|_| vec![0.0; 2]))
        }
        "cantor" => {
            cantor = TrajField::new(TrajConfig { dim: 2, pair: table.pair().clone(), n_max: s.n_max, chi: ChiProfile::Sine })?;
            let c = &cantor;
            Box::new(move |x: &[f64]| c.eval(t, x))
        }
        other => anyhow::bail!("unknown field `{other}` (final | cantor)"),
    };
    let rows: Vec<String> = (0..points * points)
        .into_par_iter()
        .map(|i| {
            let (r, c) = (i / points, i % points);
            let x = [-0.5 + (c as f64 + 0.5) / points as f64, 0.5 - (r as f64 + 0.5) / points as f64];
            let v = eval(&x);
            format!("{},{},{:e},{:e}", x[0], x[1], v[0] + 0.0, v[1] + 0.0)
        })
        .collect();
    let path = cfg.out.join(format!("field_{field}_t{}.csv", time_label(t)));
    let mut w = BufWriter::new(fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?);
    writeln!(w, "# format_version={FORMAT_VERSION} field={field} t={t}")?;
    writeln!(w, "x,y,u,v")?;
    for r in rows {
        writeln!(w, "{r}")?;
    }
    w.flush()?;
    Ok(())
}
