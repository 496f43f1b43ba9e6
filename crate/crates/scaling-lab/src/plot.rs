//! Hand-rolled SVG renderers for the experiment reports.
//!
//! Each renderer is a pure function from report content to SVG text,
//! so rendering the same report twice yields identical bytes. No
//! external plotting tooling is involved.

use std::fmt::Write as _;

use crate::biasvar::BiasVarianceReport;
use crate::cltlab::NoiseScalingReport;
use crate::emergence::{EmergenceCell, EmergenceCurve, ScalingFit};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 440.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 30.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 55.0;

const SERIES_COLORS: [&str; 6] = [
    "#1f6fb4", "#d1495b", "#3a9d5d", "#8f5fb6", "#c78a2d", "#4a4a4a",
];

/// Maps data coordinates to the SVG viewport.
struct Frame {
    xmin: f64,
    xmax: f64,
    ymin: f64,
    ymax: f64,
}

impl Frame {
    fn new(xs: &[f64], ys: &[f64]) -> Frame {
        let (mut xmin, mut xmax) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY);
        for &x in xs {
            xmin = xmin.min(x);
            xmax = xmax.max(x);
        }
        for &y in ys {
            ymin = ymin.min(y);
            ymax = ymax.max(y);
        }
        if !xmin.is_finite() || xmax <= xmin {
            xmax = xmin + 1.0;
        }
        if !ymin.is_finite() || ymax <= ymin {
            ymax = ymin + 1.0;
        }
        // 5% padding so markers do not sit on the frame.
        let (px, py) = (0.05 * (xmax - xmin), 0.05 * (ymax - ymin));
        Frame {
            xmin: xmin - px,
            xmax: xmax + px,
            ymin: ymin - py,
            ymax: ymax + py,
        }
    }

    fn sx(&self, x: f64) -> f64 {
        MARGIN_L + (x - self.xmin) / (self.xmax - self.xmin) * (WIDTH - MARGIN_L - MARGIN_R)
    }

    fn sy(&self, y: f64) -> f64 {
        HEIGHT - MARGIN_B
            - (y - self.ymin) / (self.ymax - self.ymin) * (HEIGHT - MARGIN_T - MARGIN_B)
    }
}

fn open_svg(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"monospace\" font-size=\"12\">"
    );
    let _ = writeln!(
        s,
        "<rect x=\"0\" y=\"0\" width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>"
    );
    let _ = writeln!(
        s,
        "<text x=\"{:.1}\" y=\"24\" text-anchor=\"middle\" font-size=\"14\">{title}</text>",
        WIDTH / 2.0
    );
    s
}

fn axes(s: &mut String, frame: &Frame, xlabel: &str, ylabel: &str) {
    let _ = writeln!(
        s,
        "<rect x=\"{MARGIN_L}\" y=\"{MARGIN_T}\" width=\"{:.1}\" height=\"{:.1}\" \
         fill=\"none\" stroke=\"#333\"/>",
        WIDTH - MARGIN_L - MARGIN_R,
        HEIGHT - MARGIN_T - MARGIN_B
    );
    for i in 0..=4 {
        let fx = frame.xmin + (frame.xmax - frame.xmin) * i as f64 / 4.0;
        let fy = frame.ymin + (frame.ymax - frame.ymin) * i as f64 / 4.0;
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{:.3}</text>",
            frame.sx(fx),
            HEIGHT - MARGIN_B + 18.0,
            fx
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{:.3}</text>",
            MARGIN_L - 6.0,
            frame.sy(fy) + 4.0,
            fy
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{xlabel}</text>",
        WIDTH / 2.0,
        HEIGHT - 14.0
    );
    let _ = writeln!(
        s,
        "<text x=\"16\" y=\"{:.1}\" text-anchor=\"middle\" \
         transform=\"rotate(-90 16 {:.1})\">{ylabel}</text>",
        HEIGHT / 2.0,
        HEIGHT / 2.0
    );
}

fn marker(s: &mut String, x: f64, y: f64, color: &str) {
    let _ = writeln!(
        s,
        "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"3.5\" fill=\"{color}\"/>"
    );
}

fn segment(s: &mut String, x1: f64, y1: f64, x2: f64, y2: f64, color: &str, class: &str, dash: bool) {
    let dash_attr = if dash { " stroke-dasharray=\"6 4\"" } else { "" };
    let _ = writeln!(
        s,
        "<line class=\"{class}\" x1=\"{x1:.2}\" y1=\"{y1:.2}\" x2=\"{x2:.2}\" y2=\"{y2:.2}\" \
         stroke=\"{color}\" stroke-width=\"1.5\"{dash_attr}/>"
    );
}

/// Log-log representation-noise plot: per-layer markers, per-layer
/// fitted power laws, and one slope −1 reference guide.
pub fn variance_scaling_svg(report: &NoiseScalingReport) -> String {
    let xs: Vec<f64> = report.cells.iter().map(|c| (c.n as f64).ln()).collect();
    let ys: Vec<f64> = report
        .cells
        .iter()
        .filter(|c| c.variance > 0.0)
        .map(|c| c.variance.ln())
        .collect();
    let frame = Frame::new(&xs, &ys);
    let mut s = open_svg("representation noise vs context length (log-log)");
    axes(&mut s, &frame, "ln n", "ln variance");
    let mut layers: Vec<usize> = report.cells.iter().map(|c| c.layer).collect();
    layers.sort_unstable();
    layers.dedup();
    for (li, &layer) in layers.iter().enumerate() {
        let color = SERIES_COLORS[li % SERIES_COLORS.len()];
        for c in report.cells.iter().filter(|c| c.layer == layer) {
            if c.variance > 0.0 {
                marker(&mut s, frame.sx((c.n as f64).ln()), frame.sy(c.variance.ln()), color);
            }
        }
        if let Some(fit) = report
            .fits
            .iter()
            .find(|f| f.layer == layer)
            .and_then(|f| f.fit.as_ref())
        {
            let y1 = fit.log_intercept + fit.exponent * frame.xmin;
            let y2 = fit.log_intercept + fit.exponent * frame.xmax;
            segment(
                &mut s,
                frame.sx(frame.xmin),
                frame.sy(y1),
                frame.sx(frame.xmax),
                frame.sy(y2),
                color,
                "fit",
                false,
            );
            let _ = writeln!(
                s,
                "<text x=\"{:.1}\" y=\"{:.1}\" fill=\"{color}\">layer {layer}: slope {:.3}</text>",
                MARGIN_L + 10.0,
                MARGIN_T + 16.0 + 14.0 * li as f64,
                fit.exponent
            );
        }
    }
    // Slope −1 guide through the top-left corner region.
    let y0 = frame.ymax;
    segment(
        &mut s,
        frame.sx(frame.xmin),
        frame.sy(y0),
        frame.sx(frame.xmax),
        frame.sy(y0 - (frame.xmax - frame.xmin)),
        "#999",
        "guide",
        true,
    );
    s.push_str("</svg>\n");
    s
}

/// Accuracy vs ln SNR with the fitted sigmoid and the θ_C marker (or a
/// "no threshold" caption when detection failed).
pub fn emergence_svg(curve: &EmergenceCurve) -> String {
    let mut xs = Vec::new();
    for c in &curve.cells {
        if let Some(snr) = &c.snr {
            if snr.snr > 0.0 {
                xs.push(snr.snr.ln());
            }
        }
    }
    let ys = vec![0.0, 1.0];
    let frame = Frame::new(&xs, &ys);
    let mut s = open_svg("capability accuracy vs ln SNR");
    axes(&mut s, &frame, "ln SNR", "accuracy");
    for c in &curve.cells {
        if let Some(snr) = &c.snr {
            if snr.snr > 0.0 {
                marker(
                    &mut s,
                    frame.sx(snr.snr.ln()),
                    frame.sy(c.accuracy),
                    SERIES_COLORS[c.p_index % SERIES_COLORS.len()],
                );
            }
        }
    }
    if let Some(fit) = &curve.sigmoid {
        let steps = 100;
        let mut path = String::from("M");
        for i in 0..=steps {
            let x = frame.xmin + (frame.xmax - frame.xmin) * i as f64 / steps as f64;
            let y = fit.lower
                + (fit.upper - fit.lower) / (1.0 + (-fit.slope * (x - fit.midpoint)).exp());
            let _ = write!(path, " {:.2} {:.2}", frame.sx(x), frame.sy(y));
        }
        let _ = writeln!(
            s,
            "<path class=\"sigmoid\" d=\"{path}\" fill=\"none\" stroke=\"#222\" stroke-width=\"1.5\"/>"
        );
    }
    // Chance line.
    segment(
        &mut s,
        frame.sx(frame.xmin),
        frame.sy(curve.chance),
        frame.sx(frame.xmax),
        frame.sy(curve.chance),
        "#999",
        "chance",
        true,
    );
    match curve.theta_c {
        Some(theta) => {
            let x = frame.sx(theta.ln());
            segment(
                &mut s,
                x,
                frame.sy(0.0),
                x,
                frame.sy(1.0),
                "#d1495b",
                "threshold",
                true,
            );
            let _ = writeln!(
                s,
                "<text x=\"{:.1}\" y=\"{:.1}\" fill=\"#d1495b\">theta_C = {theta:.3}</text>",
                x + 6.0,
                MARGIN_T + 16.0
            );
        }
        None => {
            let _ = writeln!(
                s,
                "<text x=\"{:.1}\" y=\"{:.1}\" fill=\"#d1495b\">no threshold detected</text>",
                MARGIN_L + 10.0,
                MARGIN_T + 16.0
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

/// ln SNR vs ln D, one series per capacity, with the fitted common
/// slope drawn through each capacity's intercept when available.
pub fn snr_scaling_svg(cells: &[EmergenceCell], fit: Option<&ScalingFit>) -> String {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for c in cells {
        if let Some(snr) = &c.snr {
            if snr.snr > 0.0 {
                xs.push((c.data_tokens as f64).ln());
                ys.push(snr.snr.ln());
            }
        }
    }
    let frame = Frame::new(&xs, &ys);
    let mut s = open_svg("ln SNR vs ln D per capacity");
    axes(&mut s, &frame, "ln D", "ln SNR");
    for c in cells {
        if let Some(snr) = &c.snr {
            if snr.snr > 0.0 {
                marker(
                    &mut s,
                    frame.sx((c.data_tokens as f64).ln()),
                    frame.sy(snr.snr.ln()),
                    SERIES_COLORS[c.p_index % SERIES_COLORS.len()],
                );
            }
        }
    }
    if let Some(fit) = fit {
        for (i, &(p, phi)) in fit.phi.iter().enumerate() {
            let color = SERIES_COLORS[p % SERIES_COLORS.len()];
            let y1 = phi + fit.alpha * frame.xmin;
            let y2 = phi + fit.alpha * frame.xmax;
            segment(
                &mut s,
                frame.sx(frame.xmin),
                frame.sy(y1),
                frame.sx(frame.xmax),
                frame.sy(y2),
                color,
                "fit",
                false,
            );
            let _ = writeln!(
                s,
                "<text x=\"{:.1}\" y=\"{:.1}\" fill=\"{color}\">phi_{p} = {phi:.3}</text>",
                MARGIN_L + 10.0,
                MARGIN_T + 16.0 + 14.0 * i as f64
            );
        }
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\">alpha = {:.3}</text>",
            WIDTH - MARGIN_R - 130.0,
            MARGIN_T + 16.0,
            fit.alpha
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Bias curve (vs capacity) and variance heat map (over the capacity
/// × data grid) side by side.
pub fn biasvar_surfaces_svg(report: &BiasVarianceReport) -> String {
    let mut s = String::new();
    let w = 2.0 * WIDTH;
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {w} {HEIGHT}\" font-family=\"monospace\" font-size=\"12\">"
    );
    let _ = writeln!(
        s,
        "<rect x=\"0\" y=\"0\" width=\"{w}\" height=\"{HEIGHT}\" fill=\"white\"/>"
    );

    // Left panel: B(P) against ln parameter count.
    let xs: Vec<f64> = report
        .capacities
        .iter()
        .map(|c| (c.param_count as f64).ln())
        .collect();
    let ys: Vec<f64> = report.capacities.iter().map(|c| c.bias).collect();
    let frame = Frame::new(&xs, &ys);
    let _ = writeln!(
        s,
        "<text x=\"{:.1}\" y=\"24\" text-anchor=\"middle\" font-size=\"14\">bias vs capacity</text>",
        WIDTH / 2.0
    );
    axes(&mut s, &frame, "ln P", "B(P)");
    for (i, c) in report.capacities.iter().enumerate() {
        let x = frame.sx((c.param_count as f64).ln());
        let y = frame.sy(c.bias);
        marker(&mut s, x, y, SERIES_COLORS[0]);
        if i + 1 < report.capacities.len() {
            let n = &report.capacities[i + 1];
            segment(
                &mut s,
                x,
                y,
                frame.sx((n.param_count as f64).ln()),
                frame.sy(n.bias),
                SERIES_COLORS[0],
                "bias",
                false,
            );
        }
    }

    // Right panel: V(P, D) heat map with annotated values.
    let mut p_vals: Vec<usize> = report.cells.iter().map(|c| c.param_count).collect();
    p_vals.sort_unstable();
    p_vals.dedup();
    let mut d_vals: Vec<usize> = report.cells.iter().map(|c| c.data_tokens).collect();
    d_vals.sort_unstable();
    d_vals.dedup();
    let vmax = report
        .cells
        .iter()
        .map(|c| c.variance_term.abs())
        .fold(0.0, f64::max)
        .max(1e-300);
    let _ = writeln!(
        s,
        "<text x=\"{:.1}\" y=\"24\" text-anchor=\"middle\" font-size=\"14\">variance term V(P, D)</text>",
        WIDTH + WIDTH / 2.0
    );
    let (gx, gy) = (WIDTH + MARGIN_L, MARGIN_T);
    let cw = (WIDTH - MARGIN_L - MARGIN_R) / d_vals.len() as f64;
    let ch = (HEIGHT - MARGIN_T - MARGIN_B) / p_vals.len() as f64;
    for (pi, &p) in p_vals.iter().enumerate() {
        for (di, &d) in d_vals.iter().enumerate() {
            let cell = report
                .cells
                .iter()
                .find(|c| c.param_count == p && c.data_tokens == d);
            let v = cell.map(|c| c.variance_term).unwrap_or(0.0);
            // Blue for positive V, red for negative, white at zero.
            let t = (v.abs() / vmax).sqrt();
            let lvl = (255.0 - 155.0 * t) as u8;
            let color = if v >= 0.0 {
                format!("rgb({lvl},{lvl},255)")
            } else {
                format!("rgb(255,{lvl},{lvl})")
            };
            let x = gx + di as f64 * cw;
            let y = gy + pi as f64 * ch;
            let _ = writeln!(
                s,
                "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{cw:.1}\" height=\"{ch:.1}\" \
                 fill=\"{color}\" stroke=\"#666\"/>"
            );
            let _ = writeln!(
                s,
                "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{v:.2e}</text>",
                x + cw / 2.0,
                y + ch / 2.0 + 4.0
            );
        }
    }
    for (di, &d) in d_vals.iter().enumerate() {
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">D={d}</text>",
            gx + di as f64 * cw + cw / 2.0,
            HEIGHT - MARGIN_B + 18.0
        );
    }
    for (pi, &p) in p_vals.iter().enumerate() {
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">P={p}</text>",
            WIDTH + MARGIN_L - 6.0,
            gy + pi as f64 * ch + ch / 2.0 + 4.0
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cltlab::{LayerFit, VarianceCell};
    use crate::stats::PowerLawFit;

    fn clt_report(n_values: &[usize]) -> NoiseScalingReport {
        NoiseScalingReport {
            cells: n_values
                .iter()
                .map(|&n| VarianceCell {
                    layer: 0,
                    n,
                    variance: 1.0 / n as f64,
                    ci_lo: 0.9 / n as f64,
                    ci_hi: 1.1 / n as f64,
                })
                .collect(),
            fits: vec![LayerFit {
                layer: 0,
                fit: Some(PowerLawFit {
                    exponent: -1.0,
                    log_intercept: 0.0,
                    r_squared: 1.0,
                    exponent_stderr: 0.0,
                    count: n_values.len(),
                }),
            }],
            gaussianity: Vec::new(),
            concentration: None,
            block: None,
            ffn_mapping: Vec::new(),
        }
    }

    #[test]
    fn variance_plot_has_markers_fit_and_guide() {
        let svg = variance_scaling_svg(&clt_report(&[64, 128, 256, 512, 1024]));
        assert_eq!(svg.matches("<circle").count(), 5);
        assert_eq!(svg.matches("class=\"fit\"").count(), 1);
        assert_eq!(svg.matches("class=\"guide\"").count(), 1);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn rendering_is_deterministic() {
        let report = clt_report(&[64, 256, 1024]);
        assert_eq!(variance_scaling_svg(&report), variance_scaling_svg(&report));
    }

    #[test]
    fn emergence_plot_marks_or_flags_threshold() {
        use crate::emergence::{EmergenceCurve, SigmoidFit};
        let cell = |snr: f64, acc: f64| crate::emergence::EmergenceCell {
            p_index: 0,
            param_count: 100,
            data_tokens: 1000,
            seed_index: 0,
            snr: Some(crate::emergence::SnrEstimate {
                signal_power: snr,
                noise_power: 1.0,
                snr,
                class_counts: vec![50; 4],
                dropped_classes: 0,
                snr_ci: (snr, snr),
            }),
            accuracy: acc,
            acc_ci: (acc, acc),
            dominance: None,
        };
        let mut curve = EmergenceCurve {
            cells: vec![cell(0.1, 0.25), cell(1.0, 0.5), cell(10.0, 0.9)],
            chance: 0.25,
            criterion: 0.5,
            sigmoid: Some(SigmoidFit {
                lower: 0.2,
                upper: 0.95,
                midpoint: 0.0,
                slope: 1.0,
                r_squared: 0.99,
                residuals: vec![0.0; 3],
            }),
            theta_c: Some(1.3),
            threshold_accuracy: Some(0.6),
            flags: Vec::new(),
            dominance_accuracy_corr: None,
        };
        let svg = emergence_svg(&curve);
        assert!(svg.contains("class=\"threshold\""));
        assert!(svg.contains("theta_C"));
        curve.theta_c = None;
        let svg = emergence_svg(&curve);
        assert!(!svg.contains("class=\"threshold\""));
        assert!(svg.contains("no threshold detected"));
    }
}
