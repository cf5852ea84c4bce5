use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::{Error, Result};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 56.0;

/// Sweep columns drawn as series, with their legend labels and colours.
const SERIES: [(&str, &str, &str); 3] = [
    ("acc", "all", "#1f4e79"),
    ("acc_easy", "easy", "#2e7d32"),
    ("acc_hard", "hard", "#c62828"),
];

/// Mean accuracy per λ for one series.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: &'static str,
    pub color: &'static str,
    pub points: Vec<(f64, f64)>,
}

/// Reads a `sweep.csv` and averages each series over repeats.
pub fn read_sweep_series(path: &Path) -> Result<(Vec<f64>, Vec<Series>)> {
    let csv_err = |e: csv::Error| Error::format(path, e.to_string());
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err)?;
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::format(path, format!("missing column {name:?}")))
    };
    let lambda_col = col("lambda")?;
    let cols: Vec<usize> = SERIES.iter().map(|(c, _, _)| col(c)).collect::<Result<_>>()?;

    let mut rows: Vec<(f64, Vec<Option<f64>>)> = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let bad = |what: &str| Error::format(path, format!("row {k}: bad {what}"));
        let lambda: f64 = rec[lambda_col].parse().map_err(|_| bad("lambda"))?;
        let vals = cols
            .iter()
            .map(|&c| {
                if rec[c].is_empty() {
                    Ok(None)
                } else {
                    rec[c].parse().map(Some).map_err(|_| bad(&headers[c]))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push((lambda, vals));
    }
    let mut lambdas: Vec<f64> = rows.iter().map(|r| r.0).collect();
    lambdas.sort_by(f64::total_cmp);
    lambdas.dedup();

    let mut series = Vec::new();
    for (s, (_, name, color)) in SERIES.iter().enumerate() {
        let mut points = Vec::new();
        for &l in &lambdas {
            let vals: Vec<f64> = rows.iter().filter(|r| r.0 == l).filter_map(|r| r.1[s]).collect();
            if !vals.is_empty() {
                points.push((l, vals.iter().sum::<f64>() / vals.len() as f64));
            }
        }
        if !points.is_empty() {
            series.push(Series { name, color, points });
        }
    }
    if series.is_empty() {
        return Err(Error::InvalidInput(format!("{}: sweep has no finished cells", path.display())));
    }
    Ok((lambdas, series))
}

/// Accuracy-vs-λ chart with one polyline and marker set per series.
///
/// λ values are spaced evenly since sweeps mix signs and magnitudes.
pub fn render_svg(title: &str, lambdas: &[f64], series: &[Series]) -> String {
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let x_of = |l: f64| {
        let i = lambdas.iter().position(|v| *v == l).expect("lambda on axis");
        if lambdas.len() == 1 {
            LEFT + pw / 2.0
        } else {
            LEFT + pw * i as f64 / (lambdas.len() - 1) as f64
        }
    };
    let y_of = |a: f64| TOP + ph * (1.0 - a.clamp(0.0, 1.0));

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        LEFT + pw / 2.0,
        escape(title)
    );
    for k in 0..=5 {
        let a = k as f64 / 5.0;
        let y = y_of(a);
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#dddddd"/>"##,
            LEFT + pw
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{a:.1}</text>"#,
            LEFT - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<line x1="{LEFT:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black"/>"#,
        TOP + ph,
        LEFT + pw,
        TOP + ph
    );
    let _ = writeln!(
        s,
        r#"<line x1="{LEFT:.1}" y1="{TOP:.1}" x2="{LEFT:.1}" y2="{:.1}" stroke="black"/>"#,
        TOP + ph
    );
    for &l in lambdas {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{l}</text>"#,
            x_of(l),
            TOP + ph + 18.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">lambda</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">test accuracy</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0
    );
    for (k, ser) in series.iter().enumerate() {
        let pts: Vec<String> = ser
            .points
            .iter()
            .map(|&(l, a)| format!("{:.1},{:.1}", x_of(l), y_of(a)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline class="series" data-series="{}" fill="none" stroke="{}" stroke-width="2" points="{}"/>"#,
            ser.name,
            ser.color,
            pts.join(" ")
        );
        for &(l, a) in &ser.points {
            let _ = writeln!(
                s,
                r#"<circle class="marker" data-series="{}" cx="{:.1}" cy="{:.1}" r="4" fill="{}"><title>{}: lambda {l}, acc {a:.4}</title></circle>"#,
                ser.name,
                x_of(l),
                y_of(a),
                ser.color,
                ser.name
            );
        }
        let ly = TOP + 10.0 + 20.0 * k as f64;
        let lx = WIDTH - RIGHT + 20.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{}" stroke-width="2"/>"#,
            lx + 24.0,
            ser.color
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}">{}</text>"#,
            lx + 30.0,
            ly + 4.0,
            ser.name
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Renders one SVG per sweep CSV into `out_dir`, named after the sweep's
/// directory. Nothing is written for a CSV that fails to parse or is empty.
pub fn emit_plots(csv_paths: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if csv_paths.is_empty() {
        return Err(Error::InvalidInput("no sweep CSVs given".into()));
    }
    let mut rendered = Vec::with_capacity(csv_paths.len());
    let mut used = BTreeSet::new();
    for p in csv_paths {
        let (lambdas, series) = read_sweep_series(p)?;
        let stem = p
            .parent()
            .and_then(|d| d.file_name())
            .or_else(|| p.file_stem())
            .map_or_else(|| "sweep".to_string(), |s| s.to_string_lossy().into_owned());
        let mut name = stem.clone();
        let mut k = 1;
        while !used.insert(name.clone()) {
            k += 1;
            name = format!("{stem}_{k}");
        }
        rendered.push((out_dir.join(format!("{name}.svg")), render_svg(&stem, &lambdas, &series)));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::with_capacity(rendered.len());
    for (path, svg) in rendered {
        fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
