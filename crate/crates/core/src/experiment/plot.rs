use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{ExperimentResult, Method, ResultSummary};
use crate::datagen::Scenario;
use crate::error::{Error, Result};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 50.0;

fn colour(method: Method) -> &'static str {
    match method {
        Method::FedHydra => "#c0392b",
        Method::Dense => "#2471a3",
        Method::FedAvg => "#7d8c2e",
    }
}

fn scenario_label(summary: &ResultSummary) -> String {
    match (summary.scenario, summary.alpha) {
        (Scenario::Dirichlet, Some(a)) => format!("dirichlet_a{a}"),
        (Scenario::Dirichlet, None) => "dirichlet".into(),
        (Scenario::TwoClass, _) => "two_class".into(),
        (Scenario::Iid, _) => "iid".into(),
    }
}

fn accuracy_svg(summary: &ResultSummary) -> String {
    let longest = summary.curves.iter().map(|c| c.top1.len()).max().unwrap_or(1).max(2);
    let plot_w = WIDTH - 2.0 * MARGIN;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    let x = |i: usize| MARGIN + plot_w * i as f64 / (longest - 1) as f64;
    let y = |v: f64| HEIGHT - MARGIN - plot_h * v.clamp(0.0, 1.0);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle">test top-1 vs. epoch ({})</text>"#,
        WIDTH / 2.0,
        scenario_label(summary)
    );
    for tick in 0..=5 {
        let v = tick as f64 / 5.0;
        let _ = writeln!(
            s,
            r##"<line x1="{MARGIN}" x2="{}" y1="{y:.1}" y2="{y:.1}" stroke="#ddd"/><text x="{}" y="{:.1}" text-anchor="end">{v:.1}</text>"##,
            WIDTH - MARGIN,
            MARGIN - 6.0,
            y(v) + 4.0,
            y = y(v),
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">epoch</text>"#,
        WIDTH / 2.0,
        HEIGHT - 12.0
    );
    for (n, curve) in summary.curves.iter().enumerate() {
        let points: Vec<String> = curve
            .top1
            .iter()
            .enumerate()
            .map(|(i, &v)| format!("{:.1},{:.1}", x(i), y(v)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline class="curve" fill="none" stroke="{}" stroke-width="1.5" points="{}"><title>{} seed {}</title></polyline>"#,
            colour(curve.method),
            points.join(" "),
            curve.method,
            curve.seed
        );
        let ly = MARGIN + 14.0 * n as f64;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{ly:.1}" fill="{}">{} (seed {})</text>"#,
            WIDTH - MARGIN - 120.0,
            colour(curve.method),
            curve.method,
            curve.seed
        );
    }
    s.push_str("</svg>\n");
    s
}

fn heatmap_svg(u_row: &[Vec<f64>]) -> String {
    let c = u_row.len();
    let m = u_row.first().map_or(0, Vec::len);
    let cell = 32.0;
    let (w, h) = (MARGIN + cell * m as f64 + 10.0, MARGIN + cell * c as f64 + 10.0);
    let max = u_row.iter().flatten().copied().fold(0.0f64, f64::max).max(1e-12);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="10">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for k in 0..m {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">client {k}</text>"#,
            MARGIN + cell * (k as f64 + 0.5),
            MARGIN - 8.0
        );
    }
    for (j, row) in u_row.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end">class {j}</text>"#,
            MARGIN - 4.0,
            MARGIN + cell * (j as f64 + 0.6)
        );
        for (k, &v) in row.iter().enumerate() {
            let shade = 255 - (215.0 * v / max).round() as u8;
            let _ = writeln!(
                s,
                r#"<rect class="cell" x="{:.1}" y="{:.1}" width="{cell}" height="{cell}" fill="rgb({shade},{shade},255)"><title>{v:.4}</title></rect>"#,
                MARGIN + cell * k as f64,
                MARGIN + cell * j as f64
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Write the accuracy chart and, when stratification ran, the capability
/// heatmap. Returns the written paths.
pub fn plot_summary(summary: &ResultSummary, dir: &Path) -> Result<Vec<PathBuf>> {
    if summary.curves.iter().all(|c| c.top1.is_empty()) {
        return Err(Error::invalid("no accuracy trace to plot"));
    }
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let acc = dir.join(format!(
        "accuracy_{}_{}.svg",
        scenario_label(summary),
        summary.config_hash
    ));
    fs::write(&acc, accuracy_svg(summary))?;
    written.push(acc);
    if let Some(h) = &summary.heatmap {
        let path = dir.join(format!("capability_{}.svg", summary.config_hash));
        fs::write(&path, heatmap_svg(&h.u_row))?;
        written.push(path);
    }
    Ok(written)
}

pub fn plot_curves(result: &ExperimentResult, dir: &Path) -> Result<Vec<PathBuf>> {
    plot_summary(&result.summary, dir)
}

/// Plot a previously emitted run from its `results.json`.
pub fn plot_run_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    plot_summary(&super::report::read_summary(dir)?, dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::{Curve, Heatmap};
    use std::collections::BTreeMap;

    fn summary(curves: Vec<Curve>, heatmap: Option<Heatmap>) -> ResultSummary {
        ResultSummary {
            config_hash: "abc123abc123".into(),
            scenario: Scenario::Dirichlet,
            alpha: Some(0.1),
            clients: 2,
            classes: 3,
            rounds: 1,
            methods: vec![Method::FedHydra],
            seeds: vec![0],
            final_top1: vec![],
            mean_top1: BTreeMap::new(),
            curves,
            heatmap,
        }
    }

    #[test]
    fn one_curve_and_a_c_by_m_heatmap() {
        let curve = Curve {
            method: Method::FedHydra,
            seed: 0,
            top1: vec![0.1, 0.5, 0.7],
        };
        let heat = Heatmap {
            seed: 0,
            round: 0,
            u_row: vec![vec![0.5, 0.5], vec![1.0, 0.0], vec![0.2, 0.8]],
        };
        let dir = tempfile::tempdir().unwrap();
        let files = plot_summary(&summary(vec![curve], Some(heat)), dir.path()).unwrap();
        assert_eq!(files.len(), 2);
        let acc = fs::read_to_string(&files[0]).unwrap();
        assert_eq!(acc.matches("class=\"curve\"").count(), 1);
        assert!(files[0].ends_with("accuracy_dirichlet_a0.1_abc123abc123.svg"));
        let heat = fs::read_to_string(&files[1]).unwrap();
        assert_eq!(heat.matches("class=\"cell\"").count(), 6);
    }

    #[test]
    fn missing_heatmap_is_skipped() {
        let curve = Curve {
            method: Method::FedAvg,
            seed: 1,
            top1: vec![0.4],
        };
        let dir = tempfile::tempdir().unwrap();
        let files = plot_summary(&summary(vec![curve], None), dir.path()).unwrap();
        assert_eq!(files.len(), 1);
        assert!(plot_summary(&summary(vec![], None), dir.path()).is_err());
    }
}
