//! Log-scale decay plots rendered straight to SVG.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use aggnash::solver::Table;
use aggnash::{Error, Result};

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const MARGIN_L: f64 = 78.0;
const MARGIN_R: f64 = 170.0;
const MARGIN_T: f64 = 36.0;
const MARGIN_B: f64 = 52.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub table: Table,
}

/// Expands plot inputs: CSV files as-is, a comparison directory into its
/// two arms, an experiment directory into its averaged table.
pub fn collect(inputs: &[PathBuf]) -> Result<Vec<Series>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let reg = p.join("regularized").join("averaged.csv");
            let unreg = p.join("unregularized").join("averaged.csv");
            if reg.exists() && unreg.exists() {
                out.push(Series { label: "regularized".into(), table: Table::load(&reg)? });
                out.push(Series { label: "unregularized".into(), table: Table::load(&unreg)? });
            } else if p.join("averaged.csv").exists() {
                out.push(Series { label: stem(p), table: Table::load(&p.join("averaged.csv"))? });
            } else {
                return Err(Error::Parse(format!("{}: no averaged.csv or comparison arms", p.display())));
            }
        } else {
            out.push(Series { label: stem(p), table: Table::load(p)? });
        }
    }
    check_schema(&out)?;
    Ok(out)
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .or_else(|| p.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "trace".into())
}

/// All inputs must carry the same metric columns.
pub fn check_schema(series: &[Series]) -> Result<()> {
    let Some(first) = series.first() else {
        return Err(Error::Parse("nothing to plot".into()));
    };
    let names = |t: &Table| -> BTreeSet<String> { t.columns.iter().map(|(n, _)| n.clone()).collect() };
    let want = names(&first.table);
    for s in &series[1..] {
        let got = names(&s.table);
        if got != want {
            let missing: Vec<_> = want.difference(&got).cloned().collect();
            let extra: Vec<_> = got.difference(&want).cloned().collect();
            return Err(Error::Parse(format!(
                "column mismatch between `{}` and `{}`: missing {missing:?}, extra {extra:?}",
                first.label, s.label
            )));
        }
    }
    Ok(())
}

/// Points of one metric that can go on a log axis.
fn points(t: &Table, metric: &str, log_x: bool) -> Vec<(f64, f64)> {
    t.column(metric)
        .map(|c| {
            t.ks.iter()
                .zip(c)
                .filter(|(k, v)| v.is_finite() && **v > 0.0 && (!log_x || **k > 0))
                .map(|(k, v)| (*k as f64, *v))
                .collect()
        })
        .unwrap_or_default()
}

/// Renders one metric for every series, or `None` when nothing is plottable.
pub fn render(series: &[Series], metric: &str, log_x: bool) -> Option<String> {
    let curves: Vec<(&str, Vec<(f64, f64)>)> = series
        .iter()
        .map(|s| (s.label.as_str(), points(&s.table, metric, log_x)))
        .filter(|(_, p)| !p.is_empty())
        .collect();
    if curves.is_empty() {
        return None;
    }
    let tx = |x: f64| if log_x { x.log10() } else { x };
    let all = curves.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all {
        x0 = x0.min(tx(x));
        x1 = x1.max(tx(x));
        y0 = y0.min(y.log10());
        y1 = y1.max(y.log10());
    }
    let (y0, y1) = (y0.floor(), y1.ceil().max(y0.floor() + 1.0));
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let pw = WIDTH - MARGIN_L - MARGIN_R;
    let ph = HEIGHT - MARGIN_T - MARGIN_B;
    let px = |x: f64| MARGIN_L + (tx(x) - x0) / (x1 - x0) * pw;
    let py = |y: f64| MARGIN_T + (y1 - y.log10()) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, MARGIN_L + pw / 2.0, escape(metric));
    // decade gridlines on y
    let mut e = y0 as i32;
    while e as f64 <= y1 {
        let y = MARGIN_T + (y1 - e as f64) / (y1 - y0) * ph;
        let _ = writeln!(s, r##"<line x1="{MARGIN_L}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#ddd"/>"##, MARGIN_L + pw);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">1e{e}</text>"#, MARGIN_L - 6.0, y + 4.0);
        e += 1;
    }
    for i in 0..=4 {
        let v = x0 + (x1 - x0) * i as f64 / 4.0;
        let x = MARGIN_L + pw * i as f64 / 4.0;
        let label = if log_x { format!("1e{v:.1}") } else { format!("{v:.0}") };
        let _ = writeln!(s, r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{label}</text>"#, MARGIN_T + ph + 18.0);
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">iteration k{}</text>"#,
        MARGIN_L + pw / 2.0,
        HEIGHT - 10.0,
        if log_x { " (log)" } else { "" }
    );
    let _ = writeln!(s, r#"<rect x="{MARGIN_L}" y="{MARGIN_T}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
    for (i, (label, pts)) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, path.join(" "));
        let ly = MARGIN_T + 14.0 + 18.0 * i as f64;
        let lx = MARGIN_L + pw + 12.0;
        let _ = writeln!(s, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, lx + 20.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, lx + 26.0, ly + 4.0, escape(label));
    }
    s.push_str("</svg>\n");
    Some(s)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Writes `<metric>.svg` per metric into `out`; returns written files and
/// the metrics skipped for lack of plottable values.
pub fn plot_all(series: &[Series], out: &Path, log_x: bool) -> Result<(Vec<PathBuf>, Vec<String>)> {
    check_schema(series)?;
    fs::create_dir_all(out)?;
    let mut written = Vec::new();
    let mut skipped = Vec::new();
    for (name, _) in &series[0].table.columns {
        match render(series, name, log_x) {
            Some(svg) => {
                let p = out.join(format!("{name}.svg"));
                fs::write(&p, svg)?;
                written.push(p);
            }
            None => skipped.push(name.clone()),
        }
    }
    Ok((written, skipped))
}
