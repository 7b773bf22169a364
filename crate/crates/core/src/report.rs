//! Comparison tables and sweep plots over finished runs.
//!
//! Runs sharing a config hash (same settings, different seeds) collapse into
//! one row with mean and sample standard deviation of final top-1.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{CrcdError, Result};
use crate::mi::MiReport;
use crate::runner::{load_result, RunResult, RESULT_FILE};

pub const MI_REPORT_FILE: &str = "mi_report.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

impl FromStr for Format {
    type Err = CrcdError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(CrcdError::usage(format!("unknown format `{other}` (csv or json)"))),
        }
    }
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

/// Four significant digits.
pub fn sig4(x: f64) -> String {
    if !x.is_finite() {
        return if x.is_nan() { "nan".into() } else if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0.000".into();
    }
    let mag = x.abs().log10().floor() as i32;
    let scale = 10f64.powi(3 - mag);
    let r = (x * scale).round() / scale;
    let mag = r.abs().log10().floor() as i32;
    let dec = (3 - mag).max(0) as usize;
    format!("{r:.dec$}")
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub method: String,
    pub teacher: String,
    pub student: String,
    pub top1: f64,
    pub top1_std: f64,
    pub seeds: Vec<u64>,
    pub config_hash: String,
}

/// One row per config hash, sorted by method, teacher, student, hash.
pub fn aggregate(runs: &[RunResult]) -> Result<Vec<Row>> {
    if runs.is_empty() {
        return Err(CrcdError::usage("empty run set"));
    }
    let mut groups: BTreeMap<(String, String, String, String), Vec<&RunResult>> = BTreeMap::new();
    for r in runs {
        groups
            .entry((r.method.clone(), r.teacher.clone(), r.student.clone(), r.config_hash.clone()))
            .or_default()
            .push(r);
    }
    Ok(groups
        .into_iter()
        .map(|((method, teacher, student, config_hash), rs)| {
            let accs: Vec<f64> = rs.iter().map(|r| r.final_top1).collect();
            let (top1, top1_std) = mean_std(&accs);
            let mut seeds: Vec<u64> = rs.iter().map(|r| r.seed).collect();
            seeds.sort_unstable();
            Row { method, teacher, student, top1, top1_std, seeds, config_hash }
        })
        .collect())
}

fn seeds_field(seeds: &[u64]) -> String {
    seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(" ")
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn json_str(s: &str) -> String {
    serde_json::to_string(s).expect("string serializes")
}

pub fn render_table(rows: &[Row], format: Format) -> String {
    let mut out = String::new();
    match format {
        Format::Csv => {
            out.push_str("method,teacher,student,top1,top1_std,runs,seeds,config_hash\n");
            for r in rows {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{}",
                    csv_field(&r.method),
                    csv_field(&r.teacher),
                    csv_field(&r.student),
                    sig4(r.top1),
                    sig4(r.top1_std),
                    r.seeds.len(),
                    seeds_field(&r.seeds),
                    &r.config_hash[..12.min(r.config_hash.len())]
                );
            }
        }
        Format::Json => {
            out.push_str("[\n");
            for (i, r) in rows.iter().enumerate() {
                let _ = write!(
                    out,
                    "  {{\"method\": {}, \"teacher\": {}, \"student\": {}, \"top1\": {}, \"top1_std\": {}, \"runs\": {}, \"seeds\": [{}], \"config_hash\": {}}}",
                    json_str(&r.method),
                    json_str(&r.teacher),
                    json_str(&r.student),
                    sig4(r.top1),
                    sig4(r.top1_std),
                    r.seeds.len(),
                    r.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(", "),
                    json_str(&r.config_hash[..12.min(r.config_hash.len())])
                );
                out.push_str(if i + 1 < rows.len() { ",\n" } else { "\n" });
            }
            out.push_str("]\n");
        }
    }
    out
}

pub fn render_mi_table(reports: &[MiReport], format: Format) -> String {
    let mut out = String::new();
    match format {
        Format::Csv => {
            out.push_str("spec,negatives,train_steps,true_mi,final_bound,sound,below_ceiling,monotone\n");
            for r in reports {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{}",
                    csv_field(&r.spec),
                    r.negatives,
                    r.train_steps,
                    sig4(r.true_mi),
                    sig4(r.final_bound),
                    r.sound,
                    r.below_ceiling,
                    r.monotone
                );
            }
        }
        Format::Json => {
            out.push_str("[\n");
            for (i, r) in reports.iter().enumerate() {
                let _ = write!(
                    out,
                    "  {{\"spec\": {}, \"negatives\": {}, \"train_steps\": {}, \"true_mi\": {}, \"final_bound\": {}, \"sound\": {}, \"below_ceiling\": {}, \"monotone\": {}}}",
                    json_str(&r.spec),
                    r.negatives,
                    r.train_steps,
                    sig4(r.true_mi),
                    sig4(r.final_bound),
                    r.sound,
                    r.below_ceiling,
                    r.monotone
                );
                out.push_str(if i + 1 < reports.len() { ",\n" } else { "\n" });
            }
            out.push_str("]\n");
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub x: f64,
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<SweepPoint>,
}

/// Series of runs that differ only in `axis` (and seed), with at least two
/// distinct numeric axis values.
pub fn sweep(runs: &[RunResult], axis: &str) -> Vec<Series> {
    let mut groups: BTreeMap<(String, String), BTreeMap<u64, (f64, Vec<f64>)>> = BTreeMap::new();
    for r in runs {
        let Some(x) = r.config.lookup(axis).and_then(|v| v.as_f64()) else {
            continue;
        };
        let key = (r.method.clone(), r.config.hash_without(&[axis]));
        groups
            .entry(key)
            .or_default()
            .entry(x.to_bits())
            .or_insert_with(|| (x, Vec::new()))
            .1
            .push(r.final_top1);
    }
    let mut series = Vec::new();
    for ((method, hash), pts) in groups {
        if pts.len() < 2 {
            continue;
        }
        let mut points: Vec<SweepPoint> = pts
            .into_values()
            .map(|(x, accs)| {
                let (mean, std) = mean_std(&accs);
                SweepPoint { x, mean, std, runs: accs.len() }
            })
            .collect();
        points.sort_by(|a, b| a.x.total_cmp(&b.x));
        series.push(Series {
            label: format!("{method} ({})", &hash[..8]),
            points,
        });
    }
    series
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Line plot of mean top-1 against the axis value, with ±std whiskers.
pub fn render_svg(axis: &str, series: &[Series]) -> String {
    let (w, h) = (560.0, 360.0);
    let (left, right, top, bottom) = (64.0, 150.0, 28.0, 48.0);
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in pts {
        x0 = x0.min(p.x);
        x1 = x1.max(p.x);
        y0 = y0.min(p.mean - p.std);
        y1 = y1.max(p.mean + p.std);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-9 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let pw = w - left - right;
    let ph = h - top - bottom;
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut s = String::new();
    let _ = writeln!(s, "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"11\">");
    let _ = writeln!(s, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
    let _ = writeln!(s, "<text x=\"{}\" y=\"18\" text-anchor=\"middle\" font-size=\"13\">top-1 vs {}</text>", left + pw / 2.0, xml_escape(axis));
    let _ = writeln!(s, "<line x1=\"{left}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>", top + ph, left + pw, top + ph);
    let _ = writeln!(s, "<line x1=\"{left}\" y1=\"{top}\" x2=\"{left}\" y2=\"{}\" stroke=\"black\"/>", top + ph);
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let xv = x0 + t * (x1 - x0);
        let yv = y0 + t * (y1 - y0);
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>", sx(xv), top + ph + 16.0, sig4(xv));
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>", left - 6.0, sy(yv) + 4.0, sig4(yv));
    }
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>", left + pw / 2.0, h - 10.0, xml_escape(axis));
    let _ = writeln!(s, "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">top-1 (%)</text>", top + ph / 2.0, top + ph / 2.0);
    for (k, se) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let path: Vec<String> = se.points.iter().map(|p| format!("{:.2},{:.2}", sx(p.x), sy(p.mean))).collect();
        let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>", path.join(" "));
        for p in &se.points {
            let (cx, cy) = (sx(p.x), sy(p.mean));
            if p.std > 0.0 {
                let _ = writeln!(s, "<line x1=\"{cx:.2}\" y1=\"{:.2}\" x2=\"{cx:.2}\" y2=\"{:.2}\" stroke=\"{color}\"/>", sy(p.mean - p.std), sy(p.mean + p.std));
            }
            let _ = writeln!(s, "<circle cx=\"{cx:.2}\" cy=\"{cy:.2}\" r=\"3\" fill=\"{color}\"/>");
        }
        let ly = top + 14.0 * k as f64 + 8.0;
        let _ = writeln!(s, "<rect x=\"{}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{color}\"/>", w - right + 10.0, ly - 8.0);
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\">{}</text>", w - right + 24.0, ly + 1.0, xml_escape(&se.label));
    }
    s.push_str("</svg>\n");
    s
}

fn collect_files(dir: &Path, name: &str, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)?
        .collect::<std::result::Result<Vec<_>, _>>()?
        .into_iter()
        .map(|e| e.path())
        .collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_files(&p, name, out)?;
        } else if p.file_name().is_some_and(|f| f == name) {
            out.push(p);
        }
    }
    Ok(())
}

/// Every `result.json` and `mi_report.json` below `dir`, in path order.
pub fn collect_runs(dir: &Path) -> Result<(Vec<RunResult>, Vec<MiReport>)> {
    if !dir.is_dir() {
        return Err(CrcdError::usage(format!("{} is not a directory", dir.display())));
    }
    let mut paths = Vec::new();
    collect_files(dir, RESULT_FILE, &mut paths)?;
    let runs = paths.iter().map(|p| load_result(p)).collect::<Result<Vec<_>>>()?;
    let mut paths = Vec::new();
    collect_files(dir, MI_REPORT_FILE, &mut paths)?;
    let mut mi = Vec::new();
    for p in paths {
        let text = std::fs::read_to_string(&p)?;
        mi.push(serde_json::from_str(&text).map_err(|e| CrcdError::Ingestion(format!("{}: {e}", p.display())))?);
    }
    Ok((runs, mi))
}

/// Rendered report: the main table plus named extra files.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub table: String,
    pub files: Vec<(String, String)>,
}

pub fn emit_report(runs: &[RunResult], mi: &[MiReport], axes: &[String], format: Format) -> Result<Report> {
    if runs.is_empty() && mi.is_empty() {
        return Err(CrcdError::usage("empty run set"));
    }
    let mut files = Vec::new();
    let table = if runs.is_empty() {
        String::new()
    } else {
        render_table(&aggregate(runs)?, format)
    };
    if !table.is_empty() {
        files.push((format!("report.{}", format.extension()), table.clone()));
    }
    if !mi.is_empty() {
        files.push((format!("mi.{}", format.extension()), render_mi_table(mi, format)));
    }
    for axis in axes {
        let series = sweep(runs, axis);
        if series.is_empty() {
            continue;
        }
        let slug = axis.replace('.', "_");
        files.push((format!("sweep_{slug}.svg"), render_svg(axis, &series)));
    }
    let table = if table.is_empty() { render_mi_table(mi, format) } else { table };
    Ok(Report { table, files })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::engine::AccuracyReport;

    pub(crate) fn fake_run(seed: u64, negatives: usize, top1: f64) -> RunResult {
        let mut config = RunConfig::new("fake");
        config.seed = seed;
        config.distill.negatives = negatives;
        let acc = AccuracyReport { top1, top5: None, samples: 100 };
        RunResult {
            run_id: format!("fake-{seed}-{negatives}"),
            name: "fake".into(),
            method: "crcd".into(),
            teacher: "mlp-t".into(),
            student: "mlp-s".into(),
            seed,
            config_hash: config.config_hash(),
            config,
            overrides: vec![],
            teacher_top1: 90.0,
            initial: acc,
            history: vec![],
            final_top1: top1,
            final_top5: None,
            best_top1: top1,
            resumed_from: None,
            queue_restored: false,
            wall_clock_secs: 0.0,
        }
    }

    #[test]
    fn sig4_examples() {
        assert_eq!(sig4(73.2134), "73.21");
        assert_eq!(sig4(0.051234), "0.05123");
        assert_eq!(sig4(9.99968), "10.00");
        assert_eq!(sig4(100.0), "100.0");
        assert_eq!(sig4(12345.0), "12350");
        assert_eq!(sig4(-1.5), "-1.500");
        assert_eq!(sig4(0.0), "0.000");
    }

    #[test]
    fn three_seeds_collapse_to_one_row() {
        let runs = vec![fake_run(0, 500, 70.0), fake_run(1, 500, 72.0), fake_run(2, 500, 74.0)];
        let rows = aggregate(&runs).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].top1, 72.0);
        assert_eq!(rows[0].top1_std, 2.0);
        assert_eq!(rows[0].seeds, vec![0, 1, 2]);
        let csv = render_table(&rows, Format::Csv);
        assert!(csv.starts_with("method,teacher,student,top1,top1_std"));
        assert!(csv.lines().nth(1).unwrap().starts_with("crcd,mlp-t,mlp-s,72.00,2.000,3,0 1 2,"));
    }

    #[test]
    fn duplicate_runs_have_zero_std() {
        let runs = vec![fake_run(0, 500, 71.5), fake_run(0, 500, 71.5)];
        let rows = aggregate(&runs).unwrap();
        assert_eq!(rows[0].top1_std, 0.0);
    }

    #[test]
    fn empty_set_is_usage_error() {
        assert!(matches!(emit_report(&[], &[], &[], Format::Csv), Err(CrcdError::Usage(_))));
        assert!(matches!(aggregate(&[]), Err(CrcdError::Usage(_))));
    }

    #[test]
    fn sweep_over_negatives_gives_three_points() {
        let runs = vec![
            fake_run(0, 100, 60.0),
            fake_run(0, 200, 62.0),
            fake_run(0, 500, 65.0),
            fake_run(1, 500, 67.0),
        ];
        let s = sweep(&runs, "distill.negatives");
        assert_eq!(s.len(), 1);
        let xs: Vec<f64> = s[0].points.iter().map(|p| p.x).collect();
        assert_eq!(xs, vec![100.0, 200.0, 500.0]);
        assert_eq!(s[0].points[2].mean, 66.0);
        let r = emit_report(&runs, &[], &["distill.negatives".into(), "distill.tau".into()], Format::Json).unwrap();
        let names: Vec<&str> = r.files.iter().map(|f| f.0.as_str()).collect();
        assert_eq!(names, vec!["report.json", "sweep_distill_negatives.svg"]);
        let svg = &r.files[1].1;
        assert_eq!(svg.matches("<circle").count(), 3);
        serde_json::from_str::<serde_json::Value>(&r.table).unwrap();
    }

    #[test]
    fn report_is_deterministic() {
        let runs = vec![fake_run(1, 100, 60.0), fake_run(0, 200, 61.25)];
        let a = emit_report(&runs, &[], &["distill.negatives".into()], Format::Csv).unwrap();
        let b = emit_report(&runs, &[], &["distill.negatives".into()], Format::Csv).unwrap();
        assert_eq!(a, b);
        let mut rev = runs.clone();
        rev.reverse();
        assert_eq!(emit_report(&rev, &[], &["distill.negatives".into()], Format::Csv).unwrap(), a);
    }
}
