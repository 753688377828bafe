//! Cumulative-deaths ingestion and the prepared, scaled panel.
//!
//! Two input layouts are accepted:
//!
//! * the Johns Hopkins CSSE wide time series
//!   (`Province/State,Country/Region,Lat,Long,1/22/20,1/23/20,...`);
//! * a long table with header `region,date,cumulative_deaths` and ISO dates.
//!
//! Cumulative counts are cleaned with a running maximum before differencing so
//! reporting corrections never produce negative daily counts.

use std::collections::BTreeMap;
use std::path::PathBuf;

use chrono::{Days, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Nine countries of the reference analysis, in table order.
pub const REFERENCE_COUNTRIES: [&str; 9] =
    ["Belgium", "Italy", "United Kingdom", "US", "Brazil", "Mexico", "Peru", "Chile", "Colombia"];

/// Snapshot date of the reference analysis.
pub const REFERENCE_SNAPSHOT: &str = "2020-06-24";

/// File name expected inside the fixture directory.
pub const FIXTURE_FILE_NAME: &str = "time_series_covid19_deaths_global.csv";

/// Environment variable overriding the fixture directory.
pub const FIXTURE_DIR_ENV: &str = "SMSN_NLME_FIXTURE_DIR";

/// Location of the vendored snapshot: `$SMSN_NLME_FIXTURE_DIR` if set, else
/// `fixtures/` at the workspace root.
pub fn fixture_path() -> PathBuf {
    let dir = std::env::var_os(FIXTURE_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures"));
    dir.join(FIXTURE_FILE_NAME)
}

/// One cumulative series as published.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSeries {
    pub country: String,
    pub province: Option<String>,
    pub dates: Vec<NaiveDate>,
    pub cumulative: Vec<i64>,
}

impl RawSeries {
    pub fn region(&self) -> String {
        match &self.province {
            Some(p) => format!("{}/{}", self.country, p),
            None => self.country.clone(),
        }
    }

    /// Restricts the series to dates `<= through`.
    pub fn truncated(&self, through: NaiveDate) -> RawSeries {
        let n = self.dates.iter().take_while(|d| **d <= through).count();
        RawSeries {
            country: self.country.clone(),
            province: self.province.clone(),
            dates: self.dates[..n].to_vec(),
            cumulative: self.cumulative[..n].to_vec(),
        }
    }
}

fn parse_count(field: &str, line: usize) -> Result<i64> {
    let f = field.trim();
    if f.is_empty() {
        return Ok(0);
    }
    f.parse::<i64>()
        .or_else(|_| f.parse::<f64>().map(|v| v.round() as i64))
        .map_err(|_| Error::Parse { line, reason: format!("not a count: {field:?}") })
}

fn check_daily(dates: &[NaiveDate], line: usize) -> Result<()> {
    for w in dates.windows(2) {
        if w[0].checked_add_days(Days::new(1)) != Some(w[1]) {
            return Err(Error::Parse { line, reason: format!("dates not consecutive: {} then {}", w[0], w[1]) });
        }
    }
    Ok(())
}

/// Parses the Johns Hopkins wide layout: one series per input row.
pub fn parse_jhu_wide(bytes: &[u8]) -> Result<Vec<RawSeries>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(false).from_reader(bytes);
    let header = rdr.headers().map_err(|e| Error::Parse { line: 1, reason: e.to_string() })?.clone();
    let expected = ["Province/State", "Country/Region", "Lat", "Long"];
    for (k, name) in expected.iter().enumerate() {
        let got = header.get(k).map(|s| s.trim_start_matches('\u{feff}'));
        if got != Some(*name) {
            return Err(Error::Parse {
                line: 1,
                reason: format!("column {} must be {name:?}, found {:?}", k + 1, header.get(k).unwrap_or("")),
            });
        }
    }
    if header.len() <= 4 {
        return Err(Error::Parse { line: 1, reason: "no date columns".into() });
    }
    let dates = header
        .iter()
        .skip(4)
        .map(|h| {
            NaiveDate::parse_from_str(h.trim(), "%m/%d/%y")
                .map_err(|_| Error::Parse { line: 1, reason: format!("bad date column {h:?} (expected m/d/yy)") })
        })
        .collect::<Result<Vec<_>>>()?;
    check_daily(&dates, 1)?;

    let mut out = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let line = k + 2;
        let rec = rec.map_err(|e| Error::Parse { line, reason: e.to_string() })?;
        let province = rec.get(0).map(str::trim).filter(|s| !s.is_empty()).map(String::from);
        let country = rec.get(1).map(str::trim).unwrap_or("").to_string();
        if country.is_empty() {
            return Err(Error::Parse { line, reason: "empty Country/Region".into() });
        }
        let cumulative = rec.iter().skip(4).map(|f| parse_count(f, line)).collect::<Result<Vec<_>>>()?;
        out.push(RawSeries { country, province, dates: dates.clone(), cumulative });
    }
    Ok(out)
}

/// Parses the long layout `region,date,cumulative_deaths`.
pub fn parse_long(bytes: &[u8]) -> Result<Vec<RawSeries>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
    let header = rdr.headers().map_err(|e| Error::Parse { line: 1, reason: e.to_string() })?.clone();
    let cols: Vec<&str> = header.iter().map(str::trim).collect();
    if cols != ["region", "date", "cumulative_deaths"] {
        return Err(Error::Parse { line: 1, reason: format!("expected header region,date,cumulative_deaths, got {cols:?}") });
    }
    let mut by_region: BTreeMap<String, Vec<(NaiveDate, i64, usize)>> = BTreeMap::new();
    for (k, rec) in rdr.records().enumerate() {
        let line = k + 2;
        let rec = rec.map_err(|e| Error::Parse { line, reason: e.to_string() })?;
        let region = rec.get(0).unwrap_or("").trim().to_string();
        let date = NaiveDate::parse_from_str(rec.get(1).unwrap_or("").trim(), "%Y-%m-%d")
            .map_err(|_| Error::Parse { line, reason: format!("bad ISO date {:?}", rec.get(1)) })?;
        let c = parse_count(rec.get(2).unwrap_or(""), line)?;
        by_region.entry(region).or_default().push((date, c, line));
    }
    let mut out = Vec::new();
    for (region, mut rows) in by_region {
        rows.sort_by_key(|r| r.0);
        let dates: Vec<NaiveDate> = rows.iter().map(|r| r.0).collect();
        check_daily(&dates, rows.last().map(|r| r.2).unwrap_or(1))?;
        out.push(RawSeries { country: region, province: None, dates, cumulative: rows.iter().map(|r| r.1).collect() });
    }
    Ok(out)
}

/// Sums province rows into one series per country, sorted by country name.
pub fn aggregate_countries(series: &[RawSeries]) -> Result<Vec<RawSeries>> {
    let mut acc: BTreeMap<&str, RawSeries> = BTreeMap::new();
    for s in series {
        match acc.get_mut(s.country.as_str()) {
            None => {
                acc.insert(
                    &s.country,
                    RawSeries { country: s.country.clone(), province: None, dates: s.dates.clone(), cumulative: s.cumulative.clone() },
                );
            }
            Some(a) => {
                if a.dates != s.dates {
                    return Err(Error::Input(format!("rows of {} have different date grids", s.country)));
                }
                for (x, y) in a.cumulative.iter_mut().zip(&s.cumulative) {
                    *x += y;
                }
            }
        }
    }
    Ok(acc.into_values().collect())
}

/// Daily counts aligned so that `t = 0` is the first day with a death.
#[derive(Debug, Clone, PartialEq)]
pub struct DailySeries {
    pub first_death_date: NaiveDate,
    pub t: Vec<f64>,
    pub z: Vec<f64>,
}

/// Running-maximum clean, difference, and drop the days before the first
/// death. `None` when the series never records a death.
pub fn to_daily_since_first_death(series: &RawSeries) -> Option<DailySeries> {
    let mut cleaned = Vec::with_capacity(series.cumulative.len());
    let mut run = 0i64;
    for &c in &series.cumulative {
        run = run.max(c);
        cleaned.push(run);
    }
    let start = cleaned.iter().position(|&c| c >= 1)?;
    let mut z = Vec::with_capacity(cleaned.len() - start);
    let mut prev = if start == 0 { 0 } else { cleaned[start - 1] };
    for &c in &cleaned[start..] {
        z.push((c - prev) as f64);
        prev = c;
    }
    let t = (0..z.len()).map(|k| k as f64).collect();
    Some(DailySeries { first_death_date: series.dates[start], t, z })
}

/// One subject's aligned series, on the scaled response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub name: String,
    pub first_death_date: NaiveDate,
    pub t: Vec<f64>,
    pub y: Vec<f64>,
}

impl Subject {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn date_of(&self, t: f64) -> NaiveDate {
        let days = t.round() as i64;
        if days >= 0 {
            self.first_death_date + Days::new(days as u64)
        } else {
            self.first_death_date - Days::new((-days) as u64)
        }
    }

    /// Day index of `date` relative to the first death.
    pub fn t_of(&self, date: NaiveDate) -> f64 {
        (date - self.first_death_date).num_days() as f64
    }

    pub fn last_t(&self) -> f64 {
        self.t.last().copied().unwrap_or(-1.0)
    }
}

/// Aligned subjects, the scaling constant, and the snapshot date.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedPanel {
    pub subjects: Vec<Subject>,
    pub k_z: f64,
    pub snapshot_date: NaiveDate,
}

impl PreparedPanel {
    pub fn n_obs(&self) -> usize {
        self.subjects.iter().map(Subject::len).sum()
    }

    pub fn subject_index(&self, name: &str) -> Option<usize> {
        self.subjects.iter().position(|s| s.name == name)
    }

    /// Observed cumulative total on the original scale.
    pub fn observed_total(&self, i: usize) -> f64 {
        (self.subjects[i].y.iter().sum::<f64>() * self.k_z).round()
    }

    /// Same subjects with responses replaced (a simulated dataset).
    pub fn with_responses(&self, ys: Vec<Vec<f64>>) -> PreparedPanel {
        let subjects = self
            .subjects
            .iter()
            .zip(ys)
            .map(|(s, y)| Subject { name: s.name.clone(), first_death_date: s.first_death_date, t: s.t.clone(), y })
            .collect();
        PreparedPanel { subjects, k_z: self.k_z, snapshot_date: self.snapshot_date }
    }
}

/// Builds the unscaled panel (`k_z = 1`) for the requested regions through
/// `through`. Region names are matched against aggregated countries first,
/// then against `Country/Province` labels of individual rows.
pub fn build_panel(series: &[RawSeries], regions: &[String], through: NaiveDate) -> Result<PreparedPanel> {
    let countries = aggregate_countries(series)?;
    let mut subjects = Vec::with_capacity(regions.len());
    for name in regions {
        let found = countries
            .iter()
            .find(|s| &s.country == name)
            .or_else(|| series.iter().find(|s| &s.region() == name));
        let Some(raw) = found else {
            let mut available: Vec<String> = countries.iter().map(|c| c.country.clone()).collect();
            available.dedup();
            return Err(Error::Input(format!("unknown region {name:?}; available: {}", available.join(", "))));
        };
        let cut = raw.truncated(through);
        if let Some(daily) = to_daily_since_first_death(&cut) {
            subjects.push(Subject { name: name.clone(), first_death_date: daily.first_death_date, t: daily.t, y: daily.z });
        }
    }
    if subjects.is_empty() {
        return Err(Error::Input(format!("no requested region has a death on or before {through}")));
    }
    Ok(PreparedPanel { subjects, k_z: 1.0, snapshot_date: through })
}

fn sample_sd(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    if v.len() < 2 {
        return 0.0;
    }
    let m = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Divides every response by `k`; when `k` is `None` it is the sample
/// standard deviation of the least variable subject. The applied factor
/// accumulates into `k_z`.
pub fn scale_panel(panel: &PreparedPanel, k: Option<f64>) -> Result<PreparedPanel> {
    if panel.subjects.is_empty() {
        return Err(Error::Input("cannot scale an empty panel".into()));
    }
    let k = match k {
        Some(k) => k,
        None => panel.subjects.iter().map(|s| sample_sd(&s.y)).fold(f64::INFINITY, f64::min),
    };
    if !(k.is_finite() && k > 0.0) {
        return Err(Error::Input(format!("scaling constant must be positive and finite, got {k}")));
    }
    let ys = panel.subjects.iter().map(|s| s.y.iter().map(|v| v / k).collect()).collect();
    let mut out = panel.with_responses(ys);
    out.k_z = panel.k_z * k;
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct PanelHeader {
    format: String,
    k_z: f64,
    snapshot_date: NaiveDate,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    manifest: Option<serde_json::Value>,
}

const PANEL_FORMAT: &str = "smsn-nlme-panel/1";

/// Delimited text: a one-line JSON header then `subject,first_death_date,t,y`.
pub fn write_panel(panel: &PreparedPanel, manifest: Option<serde_json::Value>) -> Result<String> {
    let header = PanelHeader { format: PANEL_FORMAT.into(), k_z: panel.k_z, snapshot_date: panel.snapshot_date, manifest };
    let mut out = format!("# {}\n", serde_json::to_string(&header)?);
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(["subject", "first_death_date", "t", "y"]).map_err(io)?;
    for s in &panel.subjects {
        for (t, y) in s.t.iter().zip(&s.y) {
            w.write_record([s.name.clone(), s.first_death_date.to_string(), t.to_string(), y.to_string()]).map_err(io)?;
        }
    }
    let body = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    out.push_str(&String::from_utf8(body).expect("csv output is utf-8"));
    Ok(out)
}

/// Inverse of [`write_panel`]; also returns the embedded manifest.
pub fn read_panel(text: &str) -> Result<(PreparedPanel, Option<serde_json::Value>)> {
    let (first, rest) = text.split_once('\n').ok_or_else(|| Error::Parse { line: 1, reason: "empty panel file".into() })?;
    let json = first.strip_prefix("# ").ok_or_else(|| Error::Parse { line: 1, reason: "missing JSON header line".into() })?;
    let header: PanelHeader =
        serde_json::from_str(json).map_err(|e| Error::Parse { line: 1, reason: format!("bad header: {e}") })?;
    if header.format != PANEL_FORMAT {
        return Err(Error::Parse { line: 1, reason: format!("unsupported panel format {:?}", header.format) });
    }
    let mut rdr = csv::Reader::from_reader(rest.as_bytes());
    let mut subjects: Vec<Subject> = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let line = k + 3;
        let rec = rec.map_err(|e| Error::Parse { line, reason: e.to_string() })?;
        let bad = |what: &str| Error::Parse { line, reason: format!("bad {what}") };
        let name = rec.get(0).ok_or_else(|| bad("subject"))?.to_string();
        let date = NaiveDate::parse_from_str(rec.get(1).ok_or_else(|| bad("date"))?, "%Y-%m-%d").map_err(|_| bad("date"))?;
        let t: f64 = rec.get(2).ok_or_else(|| bad("t"))?.parse().map_err(|_| bad("t"))?;
        let y: f64 = rec.get(3).ok_or_else(|| bad("y"))?.parse().map_err(|_| bad("y"))?;
        match subjects.last_mut() {
            Some(s) if s.name == name => {
                s.t.push(t);
                s.y.push(y);
            }
            _ => subjects.push(Subject { name, first_death_date: date, t: vec![t], y: vec![y] }),
        }
    }
    Ok((PreparedPanel { subjects, k_z: header.k_z, snapshot_date: header.snapshot_date }, header.manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    const WIDE: &str = "Province/State,Country/Region,Lat,Long,1/22/20,1/23/20,1/24/20\n\
        North,Atlantis,0,0,0,1,3\n\
        South,Atlantis,0,0,1,1,2\n\
        ,Lemuria,1,1,0,0,0\n";

    #[test]
    fn aggregates_provinces() {
        let rows = parse_jhu_wide(WIDE.as_bytes()).unwrap();
        assert_eq!(rows.len(), 3);
        let agg = aggregate_countries(&rows).unwrap();
        let atl = agg.iter().find(|s| s.country == "Atlantis").unwrap();
        assert_eq!(atl.cumulative, vec![1, 2, 5]);
        assert_eq!(atl.dates[2], NaiveDate::from_ymd_opt(2020, 1, 24).unwrap());
    }

    #[test]
    fn empty_date_section_is_an_error() {
        let err = parse_jhu_wide(b"Province/State,Country/Region,Lat,Long\n,X,0,0\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
    }

    #[test]
    fn malformed_row_reports_line() {
        let bad = "Province/State,Country/Region,Lat,Long,1/22/20\n,A,0,0,1\n,B,0,0,x\n";
        assert!(matches!(parse_jhu_wide(bad.as_bytes()), Err(Error::Parse { line: 3, .. })));
        let wrong_header = "State,Country,Lat,Long,1/22/20\n";
        assert!(matches!(parse_jhu_wide(wrong_header.as_bytes()), Err(Error::Parse { line: 1, .. })));
    }

    fn raw(c: &[i64]) -> RawSeries {
        let d0 = NaiveDate::from_ymd_opt(2020, 3, 1).unwrap();
        RawSeries {
            country: "X".into(),
            province: None,
            dates: (0..c.len()).map(|k| d0 + Days::new(k as u64)).collect(),
            cumulative: c.to_vec(),
        }
    }

    #[test]
    fn differencing_examples() {
        let d = to_daily_since_first_death(&raw(&[0, 0, 1, 3, 3])).unwrap();
        assert_eq!(d.z, vec![1.0, 2.0, 0.0]);
        assert_eq!(d.t, vec![0.0, 1.0, 2.0]);
        assert_eq!(d.first_death_date, NaiveDate::from_ymd_opt(2020, 3, 3).unwrap());
        let c = to_daily_since_first_death(&raw(&[4, 4, 4])).unwrap();
        assert_eq!(c.z, vec![4.0, 0.0, 0.0]);
        assert!(to_daily_since_first_death(&raw(&[0, 0])).is_none());
    }

    #[test]
    fn corrections_are_cleaned() {
        let d = to_daily_since_first_death(&raw(&[0, 2, 1, 4])).unwrap();
        assert!(d.z.iter().all(|&z| z >= 0.0));
        assert_eq!(d.z.iter().sum::<f64>(), 4.0);
    }

    #[test]
    fn long_format_parses() {
        let txt = "region,date,cumulative_deaths\nA,2020-03-02,3\nA,2020-03-01,1\nB,2020-03-01,0\n";
        let s = parse_long(txt.as_bytes()).unwrap();
        assert_eq!(s[0].cumulative, vec![1, 3]);
        assert_eq!(s[1].country, "B");
    }

    fn small_panel() -> PreparedPanel {
        let d = NaiveDate::from_ymd_opt(2020, 3, 1).unwrap();
        PreparedPanel {
            subjects: vec![
                Subject { name: "Korea, South".into(), first_death_date: d, t: vec![0.0, 1.0, 2.0], y: vec![1.0, 5.0, 2.0] },
                Subject { name: "B".into(), first_death_date: d, t: vec![0.0, 1.0], y: vec![3.0, 30.0] },
            ],
            k_z: 1.0,
            snapshot_date: NaiveDate::from_ymd_opt(2020, 3, 3).unwrap(),
        }
    }

    #[test]
    fn auto_scaling_uses_least_variable_subject() {
        let p = small_panel();
        let s = scale_panel(&p, None).unwrap();
        let sd0 = sample_sd(&[1.0, 5.0, 2.0]);
        assert!((s.k_z - sd0).abs() < 1e-15);
        let back: Vec<f64> = s.subjects[1].y.iter().map(|v| v * s.k_z).collect();
        for (a, b) in back.iter().zip(&p.subjects[1].y) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(scale_panel(&p, Some(1.0)).unwrap(), p);
    }

    #[test]
    fn zero_variance_is_rejected() {
        let mut p = small_panel();
        p.subjects[1].y = vec![2.0, 2.0];
        assert!(scale_panel(&p, None).is_err());
    }

    #[test]
    fn panel_text_roundtrip() {
        let p = scale_panel(&small_panel(), Some(3.7)).unwrap();
        let txt = write_panel(&p, Some(serde_json::json!({"seed": 1}))).unwrap();
        let (back, manifest) = read_panel(&txt).unwrap();
        assert_eq!(back, p);
        assert_eq!(manifest.unwrap()["seed"], 1);
    }

    #[test]
    fn unknown_region_lists_names() {
        let rows = parse_jhu_wide(WIDE.as_bytes()).unwrap();
        let err = build_panel(&rows, &["Mu".into()], NaiveDate::from_ymd_opt(2020, 1, 24).unwrap()).unwrap_err();
        assert!(err.to_string().contains("Atlantis"), "{err}");
        let early = build_panel(&rows, &["Lemuria".into()], NaiveDate::from_ymd_opt(2020, 1, 24).unwrap());
        assert!(early.is_err());
    }
}
