//! Ablation and ω-sensitivity runs with CSV tables and SVG charts.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::config::Config;
use crate::dataio::{ModalityFeatures, SplitView};
use crate::error::Result;
use crate::eval::MetricsReport;
use crate::model::Variant;
use crate::train::Experiment;

pub const OMEGA_GRID: [f64; 5] = [0.001, 0.01, 0.1, 1.0, 10.0];
pub const SMALL_OMEGA_EXTENSION: [f64; 3] = [1e-4, 1e-5, 1e-6];

pub fn omega_grid(extended: bool) -> Vec<f64> {
    let mut grid = OMEGA_GRID.to_vec();
    if extended {
        grid.extend(SMALL_OMEGA_EXTENSION);
    }
    grid
}

/// One finished run.
#[derive(Debug, Clone, Serialize)]
pub struct RunRow {
    pub label: String,
    pub variant: Variant,
    pub omega: f64,
    pub seed: u64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub valid: MetricsReport,
    pub test: MetricsReport,
}

/// Train one model per config; `on_row` sees each row as it finishes.
pub fn run_configs(
    split: &SplitView,
    features: &[ModalityFeatures],
    runs: Vec<(String, Config)>,
    on_row: &mut dyn FnMut(&RunRow),
) -> Result<Vec<RunRow>> {
    let mut rows = Vec::with_capacity(runs.len());
    for (label, config) in runs {
        let exp = Experiment::new(split.clone(), features.to_vec(), config.clone())?;
        let out = exp.fit(&mut |_| Ok(()))?;
        let hash = config.hash()?;
        let stamp = |mut r: MetricsReport| {
            r.config_hash = Some(hash.clone());
            r.epoch = Some(out.best_epoch);
            r
        };
        let row = RunRow {
            label,
            variant: config.train.variant,
            omega: config.train.omega,
            seed: config.train.seed,
            best_epoch: out.best_epoch,
            epochs_run: out.epochs_run,
            valid: stamp(out.valid.clone()),
            test: stamp(out.test.clone()),
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}

/// Same data, seed and ω for every variant.
pub fn ablation_configs(base: &Config, variants: &[Variant]) -> Vec<(String, Config)> {
    variants
        .iter()
        .map(|&v| {
            let mut c = base.clone();
            c.train.variant = v;
            (v.to_string(), c)
        })
        .collect()
}

pub fn sweep_configs(base: &Config, grid: &[f64]) -> Vec<(String, Config)> {
    grid.iter()
        .map(|&w| {
            let mut c = base.clone();
            c.train.omega = w;
            (format_omega(w), c)
        })
        .collect()
}

pub fn format_omega(w: f64) -> String {
    if w != 0.0 && (w.abs() < 1e-3 || w.abs() >= 1e4) {
        format!("{w:e}")
    } else {
        w.to_string()
    }
}

/// `label,variant,omega,seed,best_epoch,epochs_run`, then valid and test metrics.
pub fn write_rows_csv(path: &Path, rows: &[RunRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if let Some(first) = rows.first() {
        let mut header: Vec<String> = [
            "label",
            "variant",
            "omega",
            "seed",
            "best_epoch",
            "epochs_run",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        header.extend(
            first
                .valid
                .header()
                .into_iter()
                .map(|h| format!("valid_{h}")),
        );
        header.extend(first.test.header().into_iter().map(|h| format!("test_{h}")));
        w.write_record(&header)?;
    }
    for r in rows {
        let mut rec = vec![
            r.label.clone(),
            r.variant.to_string(),
            r.omega.to_string(),
            r.seed.to_string(),
            r.best_epoch.to_string(),
            r.epochs_run.to_string(),
        ];
        rec.extend(r.valid.values().iter().map(|v| v.to_string()));
        rec.extend(r.test.values().iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Test-split series `(HR@k / N@k, values per row)` for charting.
pub fn test_series(rows: &[RunRow]) -> Vec<(String, Vec<f64>)> {
    let Some(first) = rows.first() else {
        return Vec::new();
    };
    first
        .test
        .header()
        .into_iter()
        .enumerate()
        .map(|(c, name)| (name, rows.iter().map(|r| r.test.values()[c]).collect()))
        .collect()
}

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 420.0;
const MARGIN_LEFT: f64 = 60.0;
const MARGIN_RIGHT: f64 = 140.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 60.0;
const PALETTE: [&str; 8] = [
    "#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#76b7b2", "#edc948", "#b07aa1", "#9c755f",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

struct Frame {
    svg: String,
    y_max: f64,
}

impl Frame {
    fn new(title: &str, series: &[(String, Vec<f64>)]) -> Self {
        let top = series
            .iter()
            .flat_map(|(_, v)| v.iter().copied())
            .filter(|v| v.is_finite())
            .fold(0.0f64, f64::max);
        let y_max = if top > 0.0 { nice_ceiling(top) } else { 1.0 };
        let mut svg = String::new();
        let _ = write!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = write!(
            svg,
            r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
        );
        let _ = write!(
            svg,
            r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
            WIDTH / 2.0,
            escape(title)
        );
        let mut frame = Self { svg, y_max };
        frame.axes();
        frame.legend(series);
        frame
    }

    fn plot_w(&self) -> f64 {
        WIDTH - MARGIN_LEFT - MARGIN_RIGHT
    }

    fn plot_h(&self) -> f64 {
        HEIGHT - MARGIN_TOP - MARGIN_BOTTOM
    }

    fn y(&self, v: f64) -> f64 {
        let v = if v.is_finite() {
            v.clamp(0.0, self.y_max)
        } else {
            0.0
        };
        MARGIN_TOP + self.plot_h() * (1.0 - v / self.y_max)
    }

    fn axes(&mut self) {
        let (x0, y0) = (MARGIN_LEFT, MARGIN_TOP + self.plot_h());
        for t in 0..=5 {
            let v = self.y_max * t as f64 / 5.0;
            let y = self.y(v);
            let _ = write!(
                self.svg,
                r##"<line x1="{x0}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#dddddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">{:.3}</text>"##,
                x0 + self.plot_w(),
                x0 - 6.0,
                y + 4.0,
                v
            );
        }
        let _ = write!(
            self.svg,
            r#"<line x1="{x0}" y1="{MARGIN_TOP}" x2="{x0}" y2="{y0}" stroke="black"/><line x1="{x0}" y1="{y0}" x2="{:.2}" y2="{y0}" stroke="black"/>"#,
            x0 + self.plot_w()
        );
    }

    fn legend(&mut self, series: &[(String, Vec<f64>)]) {
        let x = WIDTH - MARGIN_RIGHT + 16.0;
        for (s, (name, _)) in series.iter().enumerate() {
            let y = MARGIN_TOP + 8.0 + 20.0 * s as f64;
            let _ = write!(
                self.svg,
                r#"<rect x="{x}" y="{:.2}" width="12" height="12" fill="{}"/><text x="{}" y="{:.2}">{}</text>"#,
                y - 10.0,
                PALETTE[s % PALETTE.len()],
                x + 18.0,
                y,
                escape(name)
            );
        }
    }

    fn x_label(&mut self, x: f64, text: &str) {
        let _ = write!(
            self.svg,
            r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            MARGIN_TOP + self.plot_h() + 18.0,
            escape(text)
        );
    }

    fn axis_title(&mut self, text: &str) {
        let _ = write!(
            self.svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            MARGIN_LEFT + self.plot_w() / 2.0,
            HEIGHT - 16.0,
            escape(text)
        );
    }

    fn finish(mut self) -> String {
        self.svg.push_str("</svg>\n");
        self.svg
    }
}

fn nice_ceiling(v: f64) -> f64 {
    let mag = 10f64.powf(v.log10().floor());
    [1.0, 2.0, 2.5, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|&c| c >= v)
        .unwrap_or(10.0 * mag)
}

/// Grouped bars: one group per category, one bar per series.
pub fn bar_chart_svg(
    title: &str,
    x_title: &str,
    categories: &[String],
    series: &[(String, Vec<f64>)],
) -> String {
    let mut f = Frame::new(title, series);
    let n = categories.len().max(1) as f64;
    let group_w = f.plot_w() / n;
    let bar_w = group_w * 0.8 / series.len().max(1) as f64;
    let base = f.y(0.0);
    for (c, cat) in categories.iter().enumerate() {
        let gx = MARGIN_LEFT + group_w * c as f64 + group_w * 0.1;
        for (s, (_, values)) in series.iter().enumerate() {
            let v = values.get(c).copied().unwrap_or(0.0);
            let top = f.y(v);
            let _ = write!(
                f.svg,
                r#"<rect x="{:.2}" y="{top:.2}" width="{bar_w:.2}" height="{:.2}" fill="{}"><title>{}: {v}</title></rect>"#,
                gx + bar_w * s as f64,
                base - top,
                PALETTE[s % PALETTE.len()],
                escape(cat)
            );
        }
        f.x_label(MARGIN_LEFT + group_w * (c as f64 + 0.5), cat);
    }
    f.axis_title(x_title);
    f.finish()
}

/// Polylines over evenly spaced categorical x positions.
pub fn line_chart_svg(
    title: &str,
    x_title: &str,
    categories: &[String],
    series: &[(String, Vec<f64>)],
) -> String {
    let mut f = Frame::new(title, series);
    let n = categories.len();
    let plot_w = f.plot_w();
    let x_at = |i: usize| {
        if n > 1 {
            MARGIN_LEFT + plot_w * i as f64 / (n - 1) as f64
        } else {
            MARGIN_LEFT + plot_w / 2.0
        }
    };
    for (s, (_, values)) in series.iter().enumerate() {
        let color = PALETTE[s % PALETTE.len()];
        let points: Vec<String> = values
            .iter()
            .enumerate()
            .map(|(i, &v)| format!("{:.2},{:.2}", x_at(i), f.y(v)))
            .collect();
        let _ = write!(
            f.svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            points.join(" ")
        );
        for (i, &v) in values.iter().enumerate() {
            let _ = write!(
                f.svg,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                x_at(i),
                f.y(v)
            );
        }
    }
    for (i, cat) in categories.iter().enumerate() {
        f.x_label(x_at(i), cat);
    }
    f.axis_title(x_title);
    f.finish()
}

/// `ablation.csv` and `ablation.svg` in `dir`.
pub fn write_ablation(dir: &Path, rows: &[RunRow]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_rows_csv(&dir.join("ablation.csv"), rows)?;
    let cats: Vec<String> = rows.iter().map(|r| r.label.clone()).collect();
    let svg = bar_chart_svg(
        "Ablation (test split)",
        "variant",
        &cats,
        &test_series(rows),
    );
    std::fs::write(dir.join("ablation.svg"), svg)?;
    Ok(())
}

/// `sweep.csv` and `sweep.svg` in `dir`.
pub fn write_sweep(dir: &Path, rows: &[RunRow]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_rows_csv(&dir.join("sweep.csv"), rows)?;
    let cats: Vec<String> = rows.iter().map(|r| r.label.clone()).collect();
    let svg = line_chart_svg(
        "Sensitivity to ω (test split)",
        "ω",
        &cats,
        &test_series(rows),
    );
    std::fs::write(dir.join("sweep.svg"), svg)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids() {
        assert_eq!(omega_grid(false), vec![0.001, 0.01, 0.1, 1.0, 10.0]);
        let ext = omega_grid(true);
        assert_eq!(ext.len(), 8);
        assert_eq!(&ext[5..], &[1e-4, 1e-5, 1e-6]);
        assert_eq!(format_omega(0.001), "0.001");
        assert_eq!(format_omega(1e-5), "1e-5");
    }

    #[test]
    fn nice_ceilings() {
        assert_eq!(nice_ceiling(0.43), 0.5);
        assert_eq!(nice_ceiling(1.0), 1.0);
        assert!((nice_ceiling(0.021) - 0.025).abs() < 1e-12);
    }

    #[test]
    fn escapes_markup() {
        let cats = vec!["a<b".to_string()];
        let svg = bar_chart_svg("t & u", "x", &cats, &[("HR@10".into(), vec![0.5])]);
        assert!(svg.contains("a&lt;b") && svg.contains("t &amp; u"));
        assert!(!svg.contains("a<b"));
    }
}
