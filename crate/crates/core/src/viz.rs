//! PCA projection and plain SVG charts.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::trainer::TrainLog;

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues in descending order and the matching unit
/// eigenvectors as columns of a row-major `n × n` matrix.
pub fn symmetric_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(a.len(), n * n, "matrix must be n x n");
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum();
        let scale: f64 = m.iter().map(|x| x * x).sum::<f64>().max(f64::MIN_POSITIVE);
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j * n + j].total_cmp(&m[i * n + i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| m[i * n + i]).collect();
    let mut vectors = vec![0.0; n * n];
    for (col, &src) in order.iter().enumerate() {
        for r in 0..n {
            vectors[r * n + col] = v[r * n + src];
        }
    }
    (values, vectors)
}

/// Scores on the leading principal components. Each component's sign is
/// fixed so that its largest-magnitude loading is positive.
pub fn pca(rows: &[Vec<f64>], components: usize) -> Result<Vec<Vec<f64>>> {
    let n = rows.len();
    if n == 0 {
        return Err(Error::config("pca needs at least one row"));
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::config("pca rows have different widths"));
    }
    if components == 0 || components > d {
        return Err(Error::config(format!("cannot take {components} components of {d} columns")));
    }
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let centered: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    let denom = (n.max(2) - 1) as f64;
    let mut cov = vec![0.0; d * d];
    for r in &centered {
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += r[i] * r[j] / denom;
            }
        }
    }
    let (_, vectors) = symmetric_eigen(&cov, d);
    let mut basis: Vec<Vec<f64>> = (0..components).map(|c| (0..d).map(|r| vectors[r * d + c]).collect()).collect();
    for b in &mut basis {
        let pivot = b.iter().fold(0.0f64, |acc, &x| if x.abs() > acc.abs() { x } else { acc });
        if pivot < 0.0 {
            b.iter_mut().for_each(|x| *x = -*x);
        }
    }
    Ok(centered
        .iter()
        .map(|r| basis.iter().map(|b| r.iter().zip(b).map(|(x, y)| x * y).sum()).collect())
        .collect())
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 48.0;

fn fmt_num(v: f64) -> String {
    format!("{v:.3}")
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn fit(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Self {
        let (x0, x1) = bounds(xs);
        let (y0, y1) = bounds(ys);
        Self { x0, x1, y0, y1 }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x0) / (self.x1 - self.x0) * (WIDTH - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN - (y - self.y0) / (self.y1 - self.y0) * (HEIGHT - 2.0 * MARGIN)
    }

    fn axes(&self, out: &mut String, x_label: &str, y_label: &str) {
        let (l, r, t, b) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
        writeln!(out, r#"<line x1="{l}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/>"#).unwrap();
        writeln!(out, r#"<line x1="{l}" y1="{t}" x2="{l}" y2="{b}" stroke="black"/>"#).unwrap();
        let xl = WIDTH / 2.0;
        let yl = HEIGHT - 12.0;
        writeln!(out, r#"<text x="{xl}" y="{yl}" text-anchor="middle" font-size="12">{x_label}</text>"#).unwrap();
        writeln!(
            out,
            r#"<text x="14" y="{}" text-anchor="middle" font-size="12" transform="rotate(-90 14 {})">{y_label}</text>"#,
            HEIGHT / 2.0,
            HEIGHT / 2.0
        )
        .unwrap();
        for (v, x, y) in [(self.x0, l, b + 14.0), (self.x1, r, b + 14.0)] {
            writeln!(out, r#"<text x="{x}" y="{y}" text-anchor="middle" font-size="10">{}</text>"#, fmt_num(v)).unwrap();
        }
        for (v, y) in [(self.y0, b), (self.y1, t)] {
            writeln!(out, r#"<text x="{}" y="{y}" text-anchor="end" font-size="10">{}</text>"#, l - 4.0, fmt_num(v)).unwrap();
        }
    }
}

fn bounds(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo - 1.0, hi + 1.0)
    } else {
        (lo, hi)
    }
}

fn svg_open() -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    )
}

pub const CURVE_SERIES: [&str; 5] = ["pur", "decorr", "orth", "cal", "task"];
const PALETTE: [&str; 5] = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e"];

/// Loss components against epoch, one polyline per component.
pub fn regularization_svg(log: &TrainLog) -> Result<String> {
    if log.rows.is_empty() {
        return Err(Error::config("training log has no epochs"));
    }
    let series: Vec<Vec<(f64, f64)>> = CURVE_SERIES
        .iter()
        .map(|name| {
            log.rows
                .iter()
                .map(|r| {
                    let v = match *name {
                        "pur" => r.pur,
                        "decorr" => r.decorr,
                        "orth" => r.orth,
                        "cal" => r.cal,
                        _ => r.task,
                    };
                    (r.epoch as f64, v)
                })
                .collect()
        })
        .collect();
    let all = series.iter().flatten();
    let frame = Frame::fit(all.clone().map(|p| p.0), all.map(|p| p.1));
    let mut out = svg_open();
    frame.axes(&mut out, "epoch", "loss");
    for (k, pts) in series.iter().enumerate() {
        let coords: Vec<String> = pts
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", frame.px(x), frame.py(y)))
            .collect();
        writeln!(
            out,
            r#"<polyline data-series="{}" fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
            CURVE_SERIES[k],
            PALETTE[k],
            coords.join(" ")
        )
        .unwrap();
        let ly = MARGIN + 14.0 * k as f64;
        writeln!(
            out,
            r#"<text x="{}" y="{ly}" font-size="11" fill="{}">{}</text>"#,
            WIDTH - MARGIN - 60.0,
            PALETTE[k],
            CURVE_SERIES[k]
        )
        .unwrap();
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Two-dimensional scatter colored on a diverging scale by label.
pub fn scatter_svg(points: &[[f64; 2]], labels: &[f64]) -> Result<String> {
    if points.len() != labels.len() {
        return Err(Error::config("scatter needs one label per point"));
    }
    let frame = Frame::fit(points.iter().map(|p| p[0]), points.iter().map(|p| p[1]));
    let mut out = svg_open();
    frame.axes(&mut out, "PC1", "PC2");
    for (p, &y) in points.iter().zip(labels) {
        let t = ((y + 3.0) / 6.0).clamp(0.0, 1.0);
        let red = (255.0 * t).round() as u8;
        let blue = (255.0 * (1.0 - t)).round() as u8;
        writeln!(
            out,
            r##"<circle cx="{:.2}" cy="{:.2}" r="3" fill="#{red:02x}40{blue:02x}" fill-opacity="0.8"/>"##,
            frame.px(p[0]),
            frame.py(p[1])
        )
        .unwrap();
    }
    out.push_str("</svg>\n");
    Ok(out)
}

pub fn scatter_csv(points: &[[f64; 2]], labels: &[f64]) -> String {
    let mut out = String::from("pc1,pc2,label\n");
    for (p, y) in points.iter().zip(labels) {
        writeln!(out, "{},{},{}", p[0], p[1], y).unwrap();
    }
    out
}
