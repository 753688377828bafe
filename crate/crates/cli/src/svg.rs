//! Static SVG chart of one subject: observed points, fitted/predicted
//! curve, bootstrap band and peak interval.

use std::fmt::Write;

use chrono::NaiveDate;

pub struct Chart<'a> {
    pub title: &'a str,
    pub dates: &'a [NaiveDate],
    pub observed: &'a [Option<f64>],
    pub fitted: &'a [f64],
    pub band: Option<(&'a [f64], &'a [f64])>,
    pub peak: Option<(NaiveDate, NaiveDate)>,
}

const W: f64 = 800.0;
const H: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

fn path(points: impl Iterator<Item = (f64, f64)>) -> String {
    let mut d = String::new();
    for (k, (x, y)) in points.enumerate() {
        let _ = write!(d, "{}{x:.2},{y:.2}", if k == 0 { "M" } else { " L" });
    }
    d
}

/// "Nice" tick step for an axis spanning `range`.
fn tick_step(range: f64) -> f64 {
    let raw = range / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| *s >= raw).unwrap_or(10.0 * mag)
}

pub fn render(c: &Chart) -> String {
    let n = c.dates.len().max(2);
    let mut y_max = c.fitted.iter().copied().fold(0.0, f64::max);
    y_max = c.observed.iter().flatten().copied().fold(y_max, f64::max);
    if let Some((_, hi)) = c.band {
        y_max = hi.iter().copied().fold(y_max, f64::max);
    }
    let y_max = if y_max > 0.0 { y_max * 1.05 } else { 1.0 };
    let sx = |k: usize| LEFT + (W - LEFT - RIGHT) * k as f64 / (n - 1) as f64;
    let sy = |v: f64| TOP + (H - TOP - BOTTOM) * (1.0 - v.max(0.0) / y_max);
    let index_of = |d: NaiveDate| (d - c.dates[0]).num_days().clamp(0, n as i64 - 1) as usize;

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" font-size="14" text-anchor="middle">{}</text>"#, W / 2.0, xml_escape(c.title));
    if let Some((a, b)) = c.peak {
        let (x0, x1) = (sx(index_of(a)), sx(index_of(b)));
        let _ = writeln!(
            s,
            r##"<rect class="peak" x="{x0:.2}" y="{TOP}" width="{:.2}" height="{}" fill="#999999" fill-opacity="0.35"/>"##,
            (x1 - x0).max(1.0),
            H - TOP - BOTTOM
        );
    }
    if let Some((lo, hi)) = c.band {
        let upper = (0..hi.len()).map(|k| (sx(k), sy(hi[k])));
        let lower = (0..lo.len()).rev().map(|k| (sx(k), sy(lo[k])));
        let _ = writeln!(s, r##"<path class="band" d="{} Z" fill="#3b6fb6" fill-opacity="0.25" stroke="none"/>"##, path(upper.chain(lower)));
    }
    for (k, v) in c.observed.iter().enumerate() {
        if let Some(v) = v {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="1.6" fill="black"/>"#, sx(k), sy(*v));
        }
    }
    let fitted = (0..c.fitted.len()).map(|k| (sx(k), sy(c.fitted[k])));
    let _ = writeln!(s, r##"<path class="fitted" d="{}" fill="none" stroke="#1f4e9c" stroke-width="1.8"/>"##, path(fitted));

    let (x0, y0, x1, y1) = (LEFT, H - BOTTOM, W - RIGHT, TOP);
    let _ = writeln!(s, r#"<path d="M{x0},{y1} L{x0},{y0} L{x1},{y0}" fill="none" stroke="black"/>"#);
    let step = tick_step(y_max);
    let mut v = 0.0;
    while v <= y_max {
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{v}</text>"#, x0 - 6.0, sy(v) + 4.0);
        v += step;
    }
    for k in (0..n.min(c.dates.len())).step_by(30) {
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, sx(k), y0 + 16.0, c.dates[k]);
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_all_layers() {
        let d0 = NaiveDate::from_ymd_opt(2020, 3, 1).unwrap();
        let dates: Vec<NaiveDate> = (0..40).map(|k| d0 + chrono::Days::new(k)).collect();
        let fitted: Vec<f64> = (0..40).map(|k| k as f64).collect();
        let lo: Vec<f64> = fitted.iter().map(|v| v - 1.0).collect();
        let hi: Vec<f64> = fitted.iter().map(|v| v + 1.0).collect();
        let observed: Vec<Option<f64>> = (0..40).map(|k| (k < 20).then_some(k as f64)).collect();
        let svg = render(&Chart {
            title: "A & B",
            dates: &dates,
            observed: &observed,
            fitted: &fitted,
            band: Some((&lo, &hi)),
            peak: Some((dates[30], dates[35])),
        });
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        assert_eq!(svg.matches("<circle").count(), 20);
        assert!(svg.contains("class=\"band\"") && svg.contains("class=\"peak\"") && svg.contains("A &amp; B"));
    }

    #[test]
    fn tick_steps_are_round() {
        assert_eq!(tick_step(1000.0), 200.0);
        assert_eq!(tick_step(7.0), 2.0);
    }
}
