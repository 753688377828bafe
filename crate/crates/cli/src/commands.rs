//! One function per subcommand. Each reads its inputs, runs the library and
//! writes artifacts that embed the run manifest.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::{Days, NaiveDate};
use serde::{Deserialize, Serialize};
use smsn_nlme::bootstrap::{run_bootstrap, BootstrapConfig, BootstrapResult};
use smsn_nlme::curve::ModelSpec;
use smsn_nlme::data_io::{build_panel, parse_jhu_wide, parse_long, read_panel, scale_panel, write_panel, PreparedPanel};
use smsn_nlme::estimation::{fit, model_selection, Family, FitResult};
use smsn_nlme::prediction::{cumulative_forecast, predict_future};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::manifest::{ManifestBuilder, RunManifest};
use crate::svg::{render, Chart};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum InputFormat {
    Jhu,
    Long,
}

/// The fit file: manifest, readable estimates, and the full result that
/// prediction and bootstrap consume.
#[derive(Debug, Serialize, Deserialize)]
pub struct FitDocument {
    pub manifest: RunManifest,
    pub summary: FitSummary,
    pub result: FitResult,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FitSummary {
    pub family: Family,
    pub converged: bool,
    pub iterations: usize,
    pub loglik: f64,
    pub n_params: usize,
    pub n_obs: usize,
    pub aic: f64,
    pub bic: f64,
    pub k_z: f64,
    pub beta: Vec<f64>,
    pub sigma2: f64,
    /// Symmetric square root `F` of `D` (`F F = D`), row-major.
    pub d_sqrt: Vec<Vec<f64>>,
    pub lambda: Vec<f64>,
    pub mixing: smsn_nlme::smsn::MixingLaw,
    pub subjects: Vec<SubjectSummary>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SubjectSummary {
    pub name: String,
    pub first_death_date: NaiveDate,
    pub b_hat: Vec<f64>,
    pub u_hat: f64,
    /// Curve coefficients; `alpha1` on the scaled response and on counts.
    pub alpha1_scaled: Option<f64>,
    pub alpha1_original: Option<f64>,
    pub alpha2: Option<f64>,
    pub alpha3: Option<f64>,
    pub alpha4: Option<f64>,
    pub peak_time: Option<f64>,
    pub peak_date: Option<NaiveDate>,
    /// Limiting cumulative deaths.
    pub total_asymptote: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct BootstrapDocument {
    pub manifest: RunManifest,
    pub result: BootstrapResult,
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("cannot create {}: {e}", dir.display())))?;
    }
    fs::write(path, text).map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
}

fn utf8(bytes: Vec<u8>, path: &Path) -> Result<String, CliError> {
    String::from_utf8(bytes).map_err(|_| CliError::Io(format!("{} is not UTF-8", path.display())))
}

fn json_line(manifest: &RunManifest, extra: Option<serde_json::Value>) -> String {
    let mut v = serde_json::json!({ "manifest": manifest });
    if let Some(serde_json::Value::Object(m)) = extra {
        v.as_object_mut().expect("object").extend(m);
    }
    format!("# {v}\n")
}

/// Delimited table with the one-line JSON header.
fn table(header_line: String, columns: &[&str], rows: Vec<Vec<String>>) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| CliError::Io(e.to_string());
    w.write_record(columns).map_err(io)?;
    for r in rows {
        w.write_record(r).map_err(io)?;
    }
    let body = w.into_inner().map_err(|e| CliError::Io(e.to_string()))?;
    Ok(header_line + &String::from_utf8(body).expect("csv output is utf-8"))
}

fn read_fit(path: &Path, manifest: &mut ManifestBuilder) -> Result<FitResult, CliError> {
    let text = utf8(manifest.read_input(path)?, path)?;
    let doc: FitDocument =
        serde_json::from_str(&text).map_err(|e| CliError::Io(format!("{} is not a fit file: {e}", path.display())))?;
    Ok(doc.result)
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

pub struct PrepareArgs {
    pub input: PathBuf,
    pub format: InputFormat,
    pub countries: Vec<String>,
    pub through: NaiveDate,
    pub k_z: Option<f64>,
    pub out: PathBuf,
}

pub fn prepare(a: &PrepareArgs) -> Result<(), CliError> {
    if a.countries.is_empty() {
        return Err(CliError::Usage("--countries needs at least one name".into()));
    }
    let mut mb = ManifestBuilder::new(
        "prepare",
        &serde_json::json!({ "countries": a.countries, "through": a.through, "k_z": a.k_z, "format": format!("{:?}", a.format) }),
    );
    let bytes = mb.read_input(&a.input)?;
    let raw = match a.format {
        InputFormat::Jhu => parse_jhu_wide(&bytes)?,
        InputFormat::Long => parse_long(&bytes)?,
    };
    let panel = scale_panel(&build_panel(&raw, &a.countries, a.through)?, a.k_z)?;
    mb.detail("subjects", panel.subjects.len());
    mb.detail("k_z", panel.k_z);
    let manifest = serde_json::to_value(mb.finish()).expect("manifest serializes");
    write_file(&a.out, &write_panel(&panel, Some(manifest))?)?;
    eprintln!("prepared {} subjects (k_z = {}) -> {}", panel.subjects.len(), panel.k_z, a.out.display());
    Ok(())
}

fn load_panel(path: &Path, mb: &mut ManifestBuilder) -> Result<PreparedPanel, CliError> {
    let text = utf8(mb.read_input(path)?, path)?;
    Ok(read_panel(&text)?.0)
}

pub fn summarize(r: &FitResult) -> FitSummary {
    let k = r.panel.k_z;
    let f = r.theta.d_sqrt().unwrap_or_else(|_| r.theta.d());
    let subjects = r
        .panel
        .subjects
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let c = r.model.curve_params(&r.theta.beta, &r.b_hat[i]);
            let peak = c.as_ref().map(|c| c.peak_time());
            SubjectSummary {
                name: s.name.clone(),
                first_death_date: s.first_death_date,
                b_hat: r.b_hat[i].clone(),
                u_hat: r.u_hat[i],
                alpha1_scaled: c.as_ref().map(|c| c.alpha1),
                alpha1_original: c.as_ref().map(|c| c.alpha1 * k),
                alpha2: c.as_ref().map(|c| c.alpha2),
                alpha3: c.as_ref().map(|c| c.alpha3),
                alpha4: c.as_ref().map(|c| c.alpha4),
                peak_time: peak,
                peak_date: peak.filter(|p| p.is_finite() && *p >= 0.0).map(|p| s.date_of(p.round())),
                total_asymptote: c.as_ref().map(|c| c.total_asymptote() * k),
            }
        })
        .collect();
    FitSummary {
        family: r.family,
        converged: r.converged,
        iterations: r.iterations,
        loglik: r.loglik,
        n_params: r.n_params,
        n_obs: r.n_obs,
        aic: r.aic,
        bic: r.bic,
        k_z: k,
        beta: r.theta.beta.clone(),
        sigma2: r.theta.sigma2,
        d_sqrt: f.row_iter().map(|row| row.iter().copied().collect()).collect(),
        lambda: r.theta.lambda.clone(),
        mixing: r.theta.mixing,
        subjects,
    }
}

pub fn fit_cmd(panel: &Path, family: Family, config: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let mut mb = ManifestBuilder::new("fit", &family);
    let cfg = RunConfig::load(config, &mut mb)?;
    let mut mb = rehash(mb, "fit", &(family, &cfg.fit));
    let panel = load_panel(panel, &mut mb)?;
    let res = fit(&ModelSpec::default(), &panel, family, &cfg.fit)?;
    mb.detail("family", family.label());
    mb.detail("n_params", res.n_params);
    mb.detail("loglik", res.loglik);
    mb.detail("converged", res.converged);
    let doc = FitDocument { manifest: mb.finish(), summary: summarize(&res), result: res };
    let text = serde_json::to_string_pretty(&doc).map_err(|e| CliError::Io(e.to_string()))?;
    write_file(out, &(text + "\n"))?;
    eprintln!(
        "{} fit: loglik {:.3}, p = {}, AIC {:.1}, BIC {:.1} -> {}",
        family.label(),
        doc.result.loglik,
        doc.result.n_params,
        doc.result.aic,
        doc.result.bic,
        out.display()
    );
    if !doc.result.converged {
        return Err(CliError::Model(format!("fit did not converge in {} iterations", doc.result.iterations)));
    }
    Ok(())
}

/// Restarts the manifest with the hash of the effective configuration,
/// keeping the input checksums already recorded.
fn rehash(old: ManifestBuilder, command: &str, config: &impl Serialize) -> ManifestBuilder {
    let mut fresh = ManifestBuilder::new(command, config);
    fresh.adopt_inputs(&old);
    fresh
}

pub fn select(panel: &Path, families: &[Family], config: Option<&Path>, out: &Path) -> Result<(), CliError> {
    if families.is_empty() {
        return Err(CliError::Usage("--families needs at least one family".into()));
    }
    let mut mb = ManifestBuilder::new("select", &families);
    let cfg = RunConfig::load(config, &mut mb)?;
    let mut mb = rehash(mb, "select", &(families, &cfg.fit));
    let panel = load_panel(panel, &mut mb)?;
    let (rows, _) = model_selection(&ModelSpec::default(), &panel, families, &cfg.fit);
    let opt = |v: Option<f64>| v.map(fmt).unwrap_or_default();
    let body: Vec<Vec<String>> = rows
        .iter()
        .enumerate()
        .map(|(k, r)| {
            vec![
                (k + 1).to_string(),
                r.family.label().into(),
                opt(r.loglik),
                r.n_params.to_string(),
                opt(r.aic),
                opt(r.bic),
                r.converged.to_string(),
                r.error.clone().unwrap_or_default(),
            ]
        })
        .collect();
    let text = table(
        json_line(&mb.finish(), None),
        &["rank", "family", "loglik", "n_params", "aic", "bic", "converged", "error"],
        body,
    )?;
    write_file(out, &text)?;
    for r in &rows {
        eprintln!("{:>4} loglik {:>12} AIC {:>10} BIC {:>10}", r.family.label(), opt(r.loglik), opt(r.aic), opt(r.bic));
    }
    if rows.iter().all(|r| r.loglik.is_none()) {
        return Err(CliError::Model("every family failed to fit".into()));
    }
    Ok(())
}

pub fn predict(fit_path: &Path, horizons: &[u32], out: &Path) -> Result<(), CliError> {
    if horizons.is_empty() {
        return Err(CliError::Usage("--horizons needs at least one value".into()));
    }
    let mut mb = ManifestBuilder::new("predict", &horizons);
    let res = read_fit(fit_path, &mut mb)?;
    let snapshot = res.panel.snapshot_date;
    let dates: Vec<NaiveDate> = horizons.iter().map(|&h| snapshot + Days::new(h as u64)).collect();
    let mut body = Vec::new();
    for (i, s) in res.panel.subjects.iter().enumerate() {
        let totals = cumulative_forecast(&res, i, &dates)?;
        for ((h, d), tot) in horizons.iter().zip(&dates).zip(totals) {
            body.push(vec![s.name.clone(), h.to_string(), d.to_string(), format!("{}", tot.round())]);
        }
    }
    let text = table(json_line(&mb.finish(), None), &["subject", "horizon", "date", "total_deaths"], body)?;
    write_file(out, &text)
}

pub struct BootstrapArgs {
    pub fit: PathBuf,
    pub replicates: Option<usize>,
    pub trim: Option<f64>,
    pub alpha: Option<f64>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub config: Option<PathBuf>,
    pub out: PathBuf,
}

pub fn bootstrap(a: &BootstrapArgs) -> Result<(), CliError> {
    let mut mb = ManifestBuilder::new("bootstrap", &());
    let file_cfg = RunConfig::load(a.config.as_deref(), &mut mb)?;
    let cfg = BootstrapConfig {
        replicates: a.replicates.unwrap_or(file_cfg.bootstrap.replicates),
        trim_frac: a.trim.unwrap_or(file_cfg.bootstrap.trim_frac),
        alpha: a.alpha.unwrap_or(file_cfg.bootstrap.alpha),
        seed: a.seed.unwrap_or(file_cfg.bootstrap.seed),
        workers: a.workers.unwrap_or(file_cfg.bootstrap.workers),
        ..file_cfg.bootstrap
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let mut mb = rehash(mb, "bootstrap", &cfg);
    mb.seed(cfg.seed);
    mb.detail("workers", cfg.workers);
    let res = read_fit(&a.fit, &mut mb)?;
    let out = run_bootstrap(&res, &cfg)?;
    mb.detail("failures", out.failures.len());
    mb.detail("kept", out.kept);
    let manifest = mb.finish();
    let header = json_line(&manifest, None);

    let mut bands = Vec::new();
    let mut totals = Vec::new();
    let mut peaks = Vec::new();
    for s in &out.subjects {
        for k in 0..s.dates.len() {
            bands.push(vec![s.name.clone(), s.dates[k].to_string(), fmt(s.center[k]), fmt(s.band_lo[k]), fmt(s.band_hi[k])]);
        }
        for h in &s.totals {
            totals.push(vec![s.name.clone(), h.horizon.to_string(), h.date.to_string(), fmt(h.point), fmt(h.lo), fmt(h.hi)]);
        }
        peaks.push(vec![s.name.clone(), s.peak_interval.0.to_string(), s.peak_interval.1.to_string()]);
    }
    let doc = BootstrapDocument { manifest, result: out };
    let json = serde_json::to_string_pretty(&doc).map_err(|e| CliError::Io(e.to_string()))?;
    write_file(&a.out.join("bootstrap.json"), &(json + "\n"))?;
    write_file(&a.out.join("bands.csv"), &table(header.clone(), &["subject", "date", "center", "band_lo", "band_hi"], bands)?)?;
    write_file(&a.out.join("totals.csv"), &table(header.clone(), &["subject", "horizon", "date", "point", "lo", "hi"], totals)?)?;
    write_file(&a.out.join("peaks.csv"), &table(header, &["subject", "peak_lo", "peak_hi"], peaks)?)?;
    eprintln!(
        "bootstrap: {} replicates, {} failed, {} trimmed, {} kept -> {}",
        doc.result.replicates,
        doc.result.failures.len(),
        doc.result.trimmed,
        doc.result.kept,
        a.out.display()
    );
    Ok(())
}

/// File-name-safe form of a subject name.
pub fn slug(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' }).collect()
}

/// Days plotted past the last observation when there is no bootstrap grid.
const REPORT_DAYS_AHEAD: usize = 150;

pub fn report(fit_path: &Path, bootstrap_path: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let mut mb = ManifestBuilder::new("report", &());
    let res = read_fit(fit_path, &mut mb)?;
    let boot = match bootstrap_path {
        Some(p) => {
            let text = utf8(mb.read_input(p)?, p)?;
            let doc: BootstrapDocument =
                serde_json::from_str(&text).map_err(|e| CliError::Io(format!("{} is not a bootstrap file: {e}", p.display())))?;
            Some(doc.result)
        }
        None => {
            eprintln!("warning: no bootstrap results given; charts have no bands or peak interval");
            None
        }
    };
    let manifest = mb.finish();
    let k = res.panel.k_z;
    for (i, s) in res.panel.subjects.iter().enumerate() {
        let bands = match &boot {
            Some(b) => Some(
                b.subjects
                    .iter()
                    .find(|x| x.name == s.name)
                    .ok_or_else(|| CliError::Io(format!("bootstrap results have no subject {:?}", s.name)))?,
            ),
            None => None,
        };
        let (dates, fitted): (Vec<NaiveDate>, Vec<f64>) = match bands {
            Some(b) => (b.dates.clone(), b.center.clone()),
            None => {
                let ahead: Vec<f64> = (1..=REPORT_DAYS_AHEAD).map(|d| s.last_t() + d as f64).collect();
                let pred = predict_future(&res, i, &ahead)?;
                let curve: Vec<f64> = res.fitted(i).iter().chain(&pred).map(|v| v * k).collect();
                let dates = (0..curve.len()).map(|d| s.date_of(d as f64)).collect();
                (dates, curve)
            }
        };
        let observed: Vec<Option<f64>> = dates
            .iter()
            .map(|d| s.t.iter().position(|&t| s.date_of(t) == *d).map(|j| (s.y[j] * k).round()))
            .collect();
        let mut rows = Vec::with_capacity(dates.len());
        for j in 0..dates.len() {
            rows.push(vec![
                dates[j].to_string(),
                observed[j].map(fmt).unwrap_or_default(),
                fmt(fitted[j]),
                bands.map(|b| fmt(b.band_lo[j])).unwrap_or_default(),
                bands.map(|b| fmt(b.band_hi[j])).unwrap_or_default(),
            ]);
        }
        let peak = bands.map(|b| b.peak_interval);
        let extra = serde_json::json!({
            "subject": s.name,
            "peak_interval": peak.map(|(a, b)| [a.to_string(), b.to_string()]),
        });
        let base = out.join(slug(&s.name));
        let csv_text = table(json_line(&manifest, Some(extra)), &["date", "observed", "fitted", "band_lo", "band_hi"], rows)?;
        write_file(&base.with_extension("csv"), &csv_text)?;
        let svg = render(&Chart {
            title: &format!("{} ({} fit)", s.name, res.family.label()),
            dates: &dates,
            observed: &observed,
            fitted: &fitted,
            band: bands.map(|b| (b.band_lo.as_slice(), b.band_hi.as_slice())),
            peak,
        });
        write_file(&base.with_extension("svg"), &svg)?;
    }
    eprintln!("report: {} subjects -> {}", res.panel.subjects.len(), out.display());
    Ok(())
}
