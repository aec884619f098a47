use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use tppca::lattice::LatticeSpec;
use tppca::model_selection::{
    select_dimension, unwrap_for_selection, LrtSelection, SelectionOptions, SelectionReport,
    Selector,
};
use tppca::persist::{ModelDocument, Provenance};
use tppca::simulation::monte_carlo;
use tppca::tppca::{tppca_fit, tppca_scores, TppcaConfig};
use tppca::wrapped_normal::AngleMatrix;

use crate::error::{CliError, CliResult};
use crate::io::{emit, matrix_csv, read_angles, read_bytes, write_atomic, Unit};
use crate::sim_config::SimConfig;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub struct FitOptions {
    pub input: PathBuf,
    pub dim: usize,
    pub unit: Unit,
    pub lattice: u32,
    pub tol: f64,
    pub max_iter: usize,
    pub seed: Option<u64>,
    pub output: PathBuf,
}

pub fn fit(opts: &FitOptions) -> CliResult<()> {
    let (_, y, digest) = read_angles(&opts.input, opts.unit)?;
    let big_d = y.ncols();
    if opts.dim == 0 || opts.dim >= big_d {
        return Err(CliError::Usage(format!(
            "--dim must satisfy 1 ≤ d < D, got d={} with D={big_d} columns",
            opts.dim
        )));
    }
    if y.nrows() <= big_d {
        return Err(CliError::Usage(format!(
            "need more rows than columns, got {} rows and {big_d} columns",
            y.nrows()
        )));
    }
    if !(opts.tol > 0.0) {
        return Err(CliError::Usage(format!(
            "--tol must be positive, got {}",
            opts.tol
        )));
    }
    let mut cfg = TppcaConfig::new(opts.dim).with_lattice(LatticeSpec::new(opts.lattice));
    cfg.outer_tol = opts.tol;
    cfg.outer_max_iter = opts.max_iter;
    cfg.seed = opts.seed;
    let fit = tppca_fit(&y, &cfg)?;
    let doc = ModelDocument::from_fit(
        &fit,
        opts.lattice,
        Provenance {
            seed: opts.seed,
            input_digest: digest,
            tool_version: TOOL_VERSION.to_string(),
        },
    );
    let mut json = doc.to_json()?;
    json.push('\n');
    write_atomic(&opts.output, json.as_bytes())?;

    println!("d = {}", doc.d);
    println!("sigma2 = {}", doc.sigma2);
    println!("final_loglik = {}", doc.convergence.final_loglik);
    println!("iterations = {}", doc.convergence.iterations);
    println!("converged = {}", doc.convergence.converged);
    if !fit.converged {
        return Err(CliError::NotConverged {
            iterations: fit.iterations(),
        });
    }
    Ok(())
}

fn load_model(path: &Path) -> CliResult<ModelDocument> {
    let bytes = read_bytes(path)?;
    let text = String::from_utf8(bytes)
        .map_err(|_| CliError::Other(format!("{}: not UTF-8", path.display())))?;
    Ok(ModelDocument::from_json(&text)?)
}

fn load_matching(
    model: &Path,
    input: &Path,
    unit: Unit,
) -> CliResult<(ModelDocument, Vec<String>, AngleMatrix)> {
    let doc = load_model(model)?;
    let (table, y, _) = read_angles(input, unit)?;
    if y.ncols() != doc.big_d {
        return Err(CliError::Usage(format!(
            "model has D={} but {} has {} columns",
            doc.big_d,
            input.display(),
            y.ncols()
        )));
    }
    Ok((doc, table.names, y))
}

pub fn scores(model: &Path, input: &Path, unit: Unit, output: Option<&Path>) -> CliResult<()> {
    let (doc, _, y) = load_matching(model, input, unit)?;
    let (_, scores) = tppca_scores(&doc.to_model()?, &y, doc.lattice_radius)?;
    let names: Vec<String> = (1..=doc.d).map(|i| format!("PC{i}")).collect();
    emit(output, &matrix_csv(&names, &scores)?)
}

pub fn reconstruct(
    model: &Path,
    input: &Path,
    unit: Unit,
    unwrapped: bool,
    output: Option<&Path>,
) -> CliResult<()> {
    let (doc, names, y) = load_matching(model, input, unit)?;
    let m = doc.to_model()?;
    let (_, scores) = tppca_scores(&m, &y, doc.lattice_radius)?;
    let x = m.reconstruct(&scores)?;
    let out = if unwrapped { x } else { tppca::wrap(&x)? };
    emit(
        output,
        &matrix_csv(&names, &out.map(|v| unit.from_radians(v)))?,
    )
}

pub struct SelectOptions {
    pub input: PathBuf,
    pub selectors: Vec<Selector>,
    pub unit: Unit,
    pub alpha: f64,
    pub threshold: f64,
    pub euclidean: bool,
    pub output: Option<PathBuf>,
}

fn lrt_rows(out: &mut String, name: &str, sel: &LrtSelection) {
    for step in &sel.steps {
        match (&step.result, &step.error) {
            (Some(r), _) => {
                let _ = writeln!(
                    out,
                    "  {name:<5} d={:<3} statistic={:<12.6} df={:<4} p={:<12.6e} {}{}",
                    step.d,
                    r.statistic,
                    r.df,
                    r.p_value,
                    if step.rejected { "reject" } else { "accept" },
                    if r.clamped {
                        " (negative statistic clamped)"
                    } else {
                        ""
                    }
                );
            }
            (None, Some(e)) => {
                let _ = writeln!(out, "  {name:<5} d={:<3} skipped: {e}", step.d);
            }
            (None, None) => {}
        }
    }
}

/// Plain-text summary of a selection report.
pub fn render_report(report: &SelectionReport, selectors: &[Selector]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "n = {}, D = {}", report.n, report.big_d);
    let _ = writeln!(out, "{:<7}{:>9}  note", "method", "chosen_d");
    for &s in selectors {
        let note = match s {
            Selector::Lrt1 => report
                .lrt1
                .as_ref()
                .filter(|r| r.exhausted)
                .map(|_| "every d rejected"),
            Selector::Lrt2 => report
                .lrt2
                .as_ref()
                .filter(|r| r.exhausted)
                .map(|_| "every d rejected"),
            Selector::Kg => report
                .kg
                .as_ref()
                .filter(|r| r.clamped)
                .map(|_| "count clamped to [1, D-1]"),
            Selector::Cv => report
                .cv
                .as_ref()
                .filter(|r| r.truncated)
                .map(|_| "range of m truncated"),
        };
        match report.chosen(s) {
            Some(d) => {
                let _ = writeln!(out, "{:<7}{:>9}  {}", s.name(), d, note.unwrap_or(""));
            }
            None => {
                let err = report
                    .errors
                    .iter()
                    .find(|(n, _)| n == s.name())
                    .map(|(_, e)| e.as_str())
                    .unwrap_or("not run");
                let _ = writeln!(out, "{:<7}{:>9}  {err}", s.name(), "-");
            }
        }
    }
    if let Some(r) = &report.lrt1 {
        lrt_rows(&mut out, "lrt1", r);
    }
    if let Some(r) = &report.lrt2 {
        lrt_rows(&mut out, "lrt2", r);
    }
    if let Some(kg) = &report.kg {
        let eig: Vec<String> = kg.eigenvalues.iter().map(|v| format!("{v:.4}")).collect();
        let _ = writeln!(out, "  kg    correlation eigenvalues: {}", eig.join(" "));
    }
    if let Some(cv) = &report.cv {
        for (m, w) in cv.w.iter().enumerate() {
            let _ = writeln!(
                out,
                "  cv    m={:<3} PRESS={:<12.6} W={:.6}",
                m + 1,
                cv.press[m + 1],
                w
            );
        }
    }
    out
}

pub fn select(opts: &SelectOptions) -> CliResult<()> {
    if !(opts.alpha > 0.0 && opts.alpha < 1.0) {
        return Err(CliError::Usage(format!(
            "--alpha must lie in (0, 1), got {}",
            opts.alpha
        )));
    }
    let sel_opts = SelectionOptions {
        alpha: opts.alpha,
        cv_threshold: opts.threshold,
        ..SelectionOptions::default()
    };
    let x = if opts.euclidean {
        let bytes = read_bytes(&opts.input)?;
        crate::io::parse_table(&opts.input, &bytes)?.values
    } else {
        let (_, y, _) = read_angles(&opts.input, opts.unit)?;
        unwrap_for_selection(&y, &sel_opts.cem)?
    };
    let report = select_dimension(&x, &opts.selectors, &sel_opts);
    if let Some(path) = &opts.output {
        let mut json =
            serde_json::to_string_pretty(&report).map_err(|e| CliError::Other(e.to_string()))?;
        json.push('\n');
        write_atomic(path, json.as_bytes())?;
    }
    print!("{}", render_report(&report, &opts.selectors));
    if let Some((name, e)) = report.errors.first() {
        return Err(CliError::Other(format!("selector {name} failed: {e}")));
    }
    Ok(())
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    tool_version: &'static str,
    config: &'a SimConfig,
    seed: u64,
    cells: usize,
    threads: usize,
    wall_time_seconds: f64,
    outputs: [&'static str; 2],
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const SELECTION_FILE: &str = "selection.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn simulate(config: &Path, outdir: &Path, threads: Option<usize>) -> CliResult<()> {
    let cfg = SimConfig::load(config)?;
    std::fs::create_dir_all(outdir).map_err(|e| CliError::io(outdir, e))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Other(format!("cannot start worker threads: {e}")))?;
    let scenarios = cfg.scenarios();
    let selection = cfg.selection_options();
    let start = Instant::now();
    let table = pool.install(|| monte_carlo(&scenarios, selection.as_ref()))?;
    let wall = start.elapsed().as_secs_f64();

    let mut metrics = Vec::new();
    table.write_metrics_csv(&mut metrics)?;
    write_atomic(&outdir.join(METRICS_FILE), &metrics)?;
    let mut sel = Vec::new();
    table.write_selection_csv(&mut sel)?;
    write_atomic(&outdir.join(SELECTION_FILE), &sel)?;

    let manifest = Manifest {
        tool: "tppca",
        tool_version: TOOL_VERSION,
        config: &cfg,
        seed: cfg.seed,
        cells: scenarios.len(),
        threads: pool.current_num_threads(),
        wall_time_seconds: wall,
        outputs: [METRICS_FILE, SELECTION_FILE],
    };
    let mut json =
        serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Other(e.to_string()))?;
    json.push('\n');
    write_atomic(&outdir.join(MANIFEST_FILE), json.as_bytes())?;

    let failures: usize = table
        .cells
        .iter()
        .flat_map(|c| c.methods.iter().map(|m| m.failures))
        .sum();
    println!(
        "{} cells, {} replications each, {failures} failed fits, {wall:.1}s",
        scenarios.len(),
        cfg.replications
    );
    println!("wrote {}", outdir.join(METRICS_FILE).display());
    println!("wrote {}", outdir.join(SELECTION_FILE).display());
    println!("wrote {}", outdir.join(MANIFEST_FILE).display());
    Ok(())
}
