//! Seed-aggregated run tables and a static AUC-vs-cost scatter.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::trainer::artifact::{read_json, ARGS_FILE, METRICS_FILE};

/// Args that differ between seed replicas of one configuration.
const PER_RUN_ARGS: [&str; 4] = ["seed", "out_dir", "out", "force"];

pub const REPORTED_METRICS: [&str; 6] = ["val_auc", "test_auc", "test_f1_05", "ece", "wall_clock_s", "params"];

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub args: Map<String, Value>,
    pub metrics: Map<String, Value>,
}

impl RunSummary {
    pub fn load(dir: &Path) -> Result<Self> {
        Ok(RunSummary {
            dir: dir.to_path_buf(),
            args: read_json(&dir.join(ARGS_FILE))?,
            metrics: read_json(&dir.join(METRICS_FILE))?,
        })
    }

    fn arg(&self, key: &str) -> String {
        match self.args.get(key) {
            Some(Value::String(s)) => s.clone(),
            Some(v) => v.to_string(),
            None => "?".into(),
        }
    }

    fn group_key(&self) -> String {
        let mut m = self.args.clone();
        for k in PER_RUN_ARGS {
            m.remove(k);
        }
        Value::Object(m).to_string()
    }

    fn label(&self) -> String {
        format!(
            "{}/{}/x={}/e={}/h{}/L{}",
            self.arg("model"),
            self.arg("norm"),
            self.arg("x_aggr"),
            self.arg("edge_scalar"),
            self.arg("hid"),
            self.arg("layers")
        )
    }
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub config: String,
    pub seeds: Vec<String>,
    /// `(mean, sd, count)` per reported metric; runs lacking a value are skipped.
    pub stats: BTreeMap<String, (f64, f64, usize)>,
}

pub fn aggregate(runs: &[RunSummary]) -> Result<Vec<ReportRow>> {
    if runs.is_empty() {
        return Err(Error::Config("no run directories given".into()));
    }
    let mut groups: Vec<(String, Vec<&RunSummary>)> = Vec::new();
    for r in runs {
        let key = r.group_key();
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, g)) => g.push(r),
            None => groups.push((key, vec![r])),
        }
    }
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    let mut rows = Vec::new();
    for (_, members) in groups {
        let mut config = members[0].label();
        let n = seen.entry(config.clone()).or_insert(0);
        *n += 1;
        if *n > 1 {
            write!(config, "#{n}").unwrap();
        }
        let mut stats = BTreeMap::new();
        for m in REPORTED_METRICS {
            let xs: Vec<f64> = members.iter().filter_map(|r| r.metrics.get(m).and_then(Value::as_f64)).collect();
            if !xs.is_empty() {
                let (mean, sd) = mean_sd(&xs);
                stats.insert(m.to_string(), (mean, sd, xs.len()));
            }
        }
        rows.push(ReportRow {
            config,
            seeds: members.iter().map(|r| r.arg("seed")).collect(),
            stats,
        });
    }
    Ok(rows)
}

pub fn to_csv(rows: &[ReportRow]) -> String {
    let mut s = String::from("config,n_runs,seeds");
    for m in REPORTED_METRICS {
        write!(s, ",{m}_mean,{m}_sd").unwrap();
    }
    s.push('\n');
    for r in rows {
        write!(s, "{},{},{}", r.config, r.seeds.len(), r.seeds.join(";")).unwrap();
        for m in REPORTED_METRICS {
            match r.stats.get(m) {
                Some((mean, sd, _)) => write!(s, ",{mean},{sd}").unwrap(),
                None => s.push_str(",,"),
            }
        }
        s.push('\n');
    }
    s
}

/// Parses `to_csv` output back into `(config, column → value)` rows.
pub fn parse_csv(text: &str) -> Result<Vec<(String, BTreeMap<String, f64>)>> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != header.len() {
            return Err(Error::Parse {
                path: PathBuf::from("<report>"),
                line: i + 2,
                msg: format!("expected {} fields", header.len()),
            });
        }
        let mut vals = BTreeMap::new();
        for (h, v) in header.iter().zip(&f).skip(1) {
            if let Ok(x) = v.parse::<f64>() {
                vals.insert(h.to_string(), x);
            }
        }
        out.push((f[0].to_string(), vals));
    }
    Ok(out)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Test AUC against wall-clock seconds; marker area grows with parameter count.
pub fn to_svg(rows: &[ReportRow]) -> String {
    let (w, h, pad) = (640.0, 420.0, 60.0);
    let pts: Vec<(&ReportRow, f64, f64, f64)> = rows
        .iter()
        .filter_map(|r| {
            let auc = r.stats.get("test_auc")?.0;
            let t = r.stats.get("wall_clock_s")?.0;
            let p = r.stats.get("params").map_or(1.0, |s| s.0);
            Some((r, t, auc, p))
        })
        .collect();
    let span = |v: Vec<f64>| {
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !lo.is_finite() {
            (0.0, 1.0)
        } else if hi - lo < 1e-12 {
            (lo - 0.5 * lo.abs().max(1e-3), hi + 0.5 * hi.abs().max(1e-3))
        } else {
            let m = 0.08 * (hi - lo);
            (lo - m, hi + m)
        }
    };
    let (x0, x1) = span(pts.iter().map(|p| p.1).collect());
    let (y0, y1) = span(pts.iter().map(|p| p.2).collect());
    let pmax = pts.iter().map(|p| p.3).fold(1.0, f64::max);
    let sx = |x: f64| pad + (x - x0) / (x1 - x0) * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - (y - y0) / (y1 - y0) * (h - 2.0 * pad);

    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#).unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<line x1="{pad}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{pad}" y1="{pad}" x2="{pad}" y2="{b}" stroke="black"/>"#,
        b = h - pad,
        r = w - pad
    )
    .unwrap();
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{fx:.2}</text>"#, sx(fx), h - pad + 16.0).unwrap();
        writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{fy:.3}</text>"#, pad - 6.0, sy(fy) + 4.0).unwrap();
    }
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">wall-clock (s)</text>"#, w / 2.0, h - 14.0).unwrap();
    writeln!(s, r#"<text x="16" y="{}" transform="rotate(-90 16 {})" text-anchor="middle">test mean AUC</text>"#, h / 2.0, h / 2.0).unwrap();
    for (r, t, auc, p) in &pts {
        let rad = 3.0 + 12.0 * (p / pmax).sqrt();
        writeln!(
            s,
            r#"<circle cx="{:.1}" cy="{:.1}" r="{rad:.1}" fill="steelblue" fill-opacity="0.6"><title>{}</title></circle>"#,
            sx(*t),
            sy(*auc),
            escape(&r.config)
        )
        .unwrap();
        writeln!(s, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, sx(*t) + rad + 2.0, sy(*auc) + 4.0, escape(&r.config)).unwrap();
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn run(seed: u64, model: &str, auc: f64) -> RunSummary {
        let args = json!({"model": model, "norm": "bn", "x_aggr": "sum", "edge_scalar": "sum", "hid": 8, "layers": 2, "seed": seed, "out_dir": format!("r{seed}")});
        let metrics = json!({"test_auc": auc, "val_auc": auc, "wall_clock_s": 1.0, "params": 100});
        RunSummary {
            dir: PathBuf::from("x"),
            args: args.as_object().unwrap().clone(),
            metrics: metrics.as_object().unwrap().clone(),
        }
    }

    #[test]
    fn three_seeds_collapse_to_one_row() {
        let runs = vec![run(1, "sage", 0.7), run(2, "sage", 0.8), run(3, "sage", 0.9), run(1, "mlp", 0.6)];
        let rows = aggregate(&runs).unwrap();
        assert_eq!(rows.len(), 2);
        let (mean, sd, n) = rows[0].stats["test_auc"];
        assert_eq!(n, 3);
        assert!((mean - 0.8).abs() < 1e-12);
        assert!((sd - 0.1).abs() < 1e-12);
        assert_eq!(rows[1].stats["test_auc"].1, 0.0);
    }

    #[test]
    fn csv_reparses() {
        let rows = aggregate(&[run(1, "sage", 0.7), run(2, "sage", 0.8)]).unwrap();
        let back = parse_csv(&to_csv(&rows)).unwrap();
        assert_eq!(back[0].1["test_auc_mean"], rows[0].stats["test_auc"].0);
        assert_eq!(back[0].1["test_auc_sd"], rows[0].stats["test_auc"].1);
        assert!(to_svg(&rows).contains("<circle"));
    }

    #[test]
    fn empty_input_rejected() {
        assert!(aggregate(&[]).is_err());
    }
}
