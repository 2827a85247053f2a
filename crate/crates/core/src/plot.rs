//! Minimal SVG charts: heatmap, bar histogram, box plot, scatter and line.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::Result;
use crate::io_util::write_atomic;
use crate::labels::NUM_CLASSES;
use crate::metrics::ConfusionMatrix;
use crate::uncertainty::PredictionRecord;

const W: f64 = 520.0;
const H: f64 = 400.0;
const MARGIN: f64 = 60.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn open(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
        W / 2.0,
        escape(title)
    )
}

fn axes(svg: &mut String, xlabel: &str, ylabel: &str) {
    let _ = write!(
        svg,
        "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <text x=\"{cx}\" y=\"{xl}\" text-anchor=\"middle\">{}</text>\n\
         <text x=\"16\" y=\"{cy}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {cy})\">{}</text>\n",
        escape(xlabel),
        escape(ylabel),
        m = MARGIN,
        b = H - MARGIN,
        r = W - MARGIN / 2.0,
        cx = (MARGIN + W - MARGIN / 2.0) / 2.0,
        xl = H - 18.0,
        cy = H / 2.0,
    );
}

/// Finite range of `values`, widened when degenerate.
fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x.0) / (self.x.1 - self.x.0) * (W - 1.5 * MARGIN)
    }
    fn py(&self, y: f64) -> f64 {
        H - MARGIN - (y - self.y.0) / (self.y.1 - self.y.0) * (H - 2.0 * MARGIN)
    }
    fn ticks(&self, svg: &mut String) {
        for i in 0..=4 {
            let t = i as f64 / 4.0;
            let xv = self.x.0 + t * (self.x.1 - self.x.0);
            let yv = self.y.0 + t * (self.y.1 - self.y.0);
            let _ = writeln!(
                svg,
                "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"10\">{}</text>",
                self.px(xv),
                H - MARGIN + 14.0,
                fmt_tick(xv)
            );
            let _ = writeln!(
                svg,
                "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" font-size=\"10\">{}</text>",
                MARGIN - 4.0,
                self.py(yv) + 3.0,
                fmt_tick(yv)
            );
        }
    }
}

fn fmt_tick(v: f64) -> String {
    if v.abs() >= 100.0 || v == v.round() {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

fn legend(svg: &mut String, names: &[&str]) {
    for (i, name) in names.iter().enumerate() {
        let y = MARGIN + 16.0 * i as f64;
        let _ = writeln!(
            svg,
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"10\" height=\"10\" fill=\"{}\"/><text x=\"{:.1}\" y=\"{:.1}\">{}</text>",
            W - 150.0,
            y - 9.0,
            PALETTE[i % PALETTE.len()],
            W - 136.0,
            y,
            escape(name)
        );
    }
}

/// Heatmap of a row-major matrix with row/column labels; each cell shows its
/// value.
pub fn heatmap(values: &[Vec<f64>], rows: &[String], cols: &[String], title: &str, xlabel: &str, ylabel: &str) -> String {
    let mut svg = open(title);
    let max = values.iter().flatten().cloned().fold(0.0f64, f64::max).max(1e-12);
    let nr = rows.len().max(1) as f64;
    let nc = cols.len().max(1) as f64;
    let cw = (W - 1.5 * MARGIN) / nc;
    let ch = (H - 2.0 * MARGIN) / nr;
    for (i, row) in values.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let shade = (255.0 * (1.0 - v / max)).round() as u8;
            let (x, y) = (MARGIN + j as f64 * cw, MARGIN + i as f64 * ch);
            let _ = writeln!(
                svg,
                "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{cw:.1}\" height=\"{ch:.1}\" fill=\"rgb({shade},{shade},255)\" stroke=\"#ccc\"/>\
                 <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"10\" fill=\"{}\">{}</text>",
                x + cw / 2.0,
                y + ch / 2.0 + 4.0,
                if v / max > 0.6 { "white" } else { "black" },
                fmt_tick(v)
            );
        }
    }
    for (i, r) in rows.iter().enumerate() {
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" font-size=\"10\">{}</text>",
            MARGIN - 4.0,
            MARGIN + (i as f64 + 0.5) * ch + 4.0,
            escape(r)
        );
    }
    for (j, c) in cols.iter().enumerate() {
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"10\">{}</text>",
            MARGIN + (j as f64 + 0.5) * cw,
            H - MARGIN + 14.0,
            escape(c)
        );
    }
    let _ = write!(
        svg,
        "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n\
         <text x=\"16\" y=\"{cy}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {cy})\">{}</text>\n</svg>\n",
        (MARGIN + W - MARGIN / 2.0) / 2.0,
        H - 18.0,
        escape(xlabel),
        escape(ylabel),
        cy = H / 2.0
    );
    svg
}

/// Bar chart of labelled counts.
pub fn bar_chart(labels: &[String], counts: &[f64], title: &str, xlabel: &str, ylabel: &str) -> String {
    let mut svg = open(title);
    axes(&mut svg, xlabel, ylabel);
    let max = counts.iter().cloned().fold(0.0f64, f64::max).max(1.0);
    let frame = Frame { x: (0.0, labels.len().max(1) as f64), y: (0.0, max) };
    let bw = (W - 1.5 * MARGIN) / labels.len().max(1) as f64;
    for (i, (l, &c)) in labels.iter().zip(counts).enumerate() {
        let x = frame.px(i as f64) + bw * 0.1;
        let y = frame.py(c);
        let _ = writeln!(
            svg,
            "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"{}\"/>\
             <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"10\">{}</text>\
             <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"10\">{}</text>",
            bw * 0.8,
            H - MARGIN - y,
            PALETTE[0],
            x + bw * 0.4,
            H - MARGIN + 14.0,
            escape(l),
            x + bw * 0.4,
            y - 3.0,
            fmt_tick(c)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Box plot (quartiles, whiskers at the extremes) of labelled groups. Empty
/// groups are drawn as a label only.
pub fn box_plot(groups: &[(String, Vec<f64>)], title: &str, xlabel: &str, ylabel: &str) -> String {
    let mut svg = open(title);
    axes(&mut svg, xlabel, ylabel);
    let (lo, hi) = range(groups.iter().flat_map(|(_, v)| v.iter().cloned()));
    let frame = Frame { x: (0.0, groups.len().max(1) as f64), y: (lo, hi) };
    for i in 0..=4 {
        let yv = lo + (hi - lo) * i as f64 / 4.0;
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" font-size=\"10\">{}</text>",
            MARGIN - 4.0,
            frame.py(yv) + 3.0,
            fmt_tick(yv)
        );
    }
    let bw = (W - 1.5 * MARGIN) / groups.len().max(1) as f64;
    for (i, (name, values)) in groups.iter().enumerate() {
        let cx = frame.px(i as f64 + 0.5);
        let _ = writeln!(
            svg,
            "<text x=\"{cx:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"10\">{} (n={})</text>",
            H - MARGIN + 14.0,
            escape(name),
            values.len()
        );
        let mut v: Vec<f64> = values.iter().cloned().filter(|x| x.is_finite()).collect();
        if v.is_empty() {
            continue;
        }
        v.sort_by(f64::total_cmp);
        let (q1, med, q3) = (quantile(&v, 0.25), quantile(&v, 0.5), quantile(&v, 0.75));
        let (min, max) = (v[0], v[v.len() - 1]);
        let half = bw * 0.3;
        let _ = writeln!(
            svg,
            "<line x1=\"{cx:.1}\" y1=\"{:.1}\" x2=\"{cx:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\
             <rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"{}\" fill-opacity=\"0.6\" stroke=\"black\"/>\
             <line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\" stroke-width=\"2\"/>",
            frame.py(min),
            frame.py(max),
            cx - half,
            frame.py(q3),
            2.0 * half,
            (frame.py(q1) - frame.py(q3)).max(0.5),
            PALETTE[i % PALETTE.len()],
            cx - half,
            frame.py(med),
            cx + half,
            frame.py(med)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Scatter plot of labelled point groups.
pub fn scatter_plot(groups: &[(String, Vec<(f64, f64)>)], title: &str, xlabel: &str, ylabel: &str) -> String {
    let mut svg = open(title);
    axes(&mut svg, xlabel, ylabel);
    let frame = Frame {
        x: range(groups.iter().flat_map(|(_, p)| p.iter().map(|q| q.0))),
        y: range(groups.iter().flat_map(|(_, p)| p.iter().map(|q| q.1))),
    };
    frame.ticks(&mut svg);
    for (i, (_, points)) in groups.iter().enumerate() {
        for &(x, y) in points.iter().filter(|(x, y)| x.is_finite() && y.is_finite()) {
            let _ = writeln!(
                svg,
                "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"{}\" fill-opacity=\"0.7\"/>",
                frame.px(x),
                frame.py(y),
                PALETTE[i % PALETTE.len()]
            );
        }
    }
    legend(&mut svg, &groups.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>());
    svg.push_str("</svg>\n");
    svg
}

/// Line plot of several series over shared x values; NaN values break lines.
pub fn line_plot(xs: &[f64], series: &[(String, Vec<f64>)], title: &str, xlabel: &str, ylabel: &str) -> String {
    let mut svg = open(title);
    axes(&mut svg, xlabel, ylabel);
    let frame = Frame {
        x: range(xs.iter().cloned()),
        y: range(series.iter().flat_map(|(_, v)| v.iter().cloned())),
    };
    frame.ticks(&mut svg);
    for (i, (_, ys)) in series.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let mut path = String::new();
        let mut pen_down = false;
        for (&x, &y) in xs.iter().zip(ys) {
            if !y.is_finite() {
                pen_down = false;
                continue;
            }
            let _ = write!(path, "{}{:.1},{:.1} ", if pen_down { "L" } else { "M" }, frame.px(x), frame.py(y));
            pen_down = true;
            let _ = writeln!(svg, "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"{colour}\"/>", frame.px(x), frame.py(y));
        }
        if !path.is_empty() {
            let _ = writeln!(svg, "<path d=\"{}\" fill=\"none\" stroke=\"{colour}\" stroke-width=\"2\"/>", path.trim_end());
        }
    }
    legend(&mut svg, &series.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>());
    svg.push_str("</svg>\n");
    svg
}

/// Confusion heatmap with the invalid-prediction column appended.
pub fn write_confusion_heatmap(cm: &ConfusionMatrix, title: &str, path: &Path) -> Result<()> {
    let values: Vec<Vec<f64>> = (0..NUM_CLASSES)
        .map(|i| cm.counts[i].iter().map(|&c| c as f64).chain([cm.invalid[i] as f64]).collect())
        .collect();
    let rows: Vec<String> = (1..=NUM_CLASSES).map(|c| c.to_string()).collect();
    let mut cols = rows.clone();
    cols.push("inv".into());
    write_atomic(path, heatmap(&values, &rows, &cols, title, "predicted class", "true class").as_bytes())
}

fn error_bucket(r: &PredictionRecord) -> Option<usize> {
    let (p, t) = (r.predicted_class?, r.true_class?);
    Some(p.abs_diff(t) as usize)
}

/// Histogram of absolute class errors; invalid predictions get their own bar.
pub fn write_error_histogram(records: &[PredictionRecord], path: &Path) -> Result<()> {
    let mut counts = vec![0.0; NUM_CLASSES + 1];
    for r in records {
        match error_bucket(r) {
            Some(e) => counts[e] += 1.0,
            None => counts[NUM_CLASSES] += 1.0,
        }
    }
    let labels: Vec<String> = (0..NUM_CLASSES).map(|e| e.to_string()).chain(["invalid".to_string()]).collect();
    write_atomic(path, bar_chart(&labels, &counts, "Absolute class error", "|predicted − true|", "images").as_bytes())
}

/// Uncertainty grouped by absolute error: exact, off by one, off by more,
/// invalid.
pub fn write_uncertainty_boxplot(records: &[PredictionRecord], path: &Path) -> Result<()> {
    let mut groups: Vec<(String, Vec<f64>)> =
        ["exact", "±1", "≥2", "invalid"].iter().map(|n| (n.to_string(), Vec::new())).collect();
    for r in records {
        let g = match error_bucket(r) {
            Some(0) => 0,
            Some(1) => 1,
            Some(_) => 2,
            None => 3,
        };
        groups[g].1.push(r.uncertainty);
    }
    write_atomic(path, box_plot(&groups, "Uncertainty by error", "error", "uncertainty").as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn well_formed(svg: &str) {
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert!(!svg.contains("NaN") && !svg.contains("inf"));
    }

    #[test]
    fn charts_render() {
        well_formed(&heatmap(&[vec![1.0, 0.0], vec![2.0, 3.0]], &["a".into(), "b".into()], &["x".into(), "y".into()], "t", "x", "y"));
        well_formed(&bar_chart(&["0".into(), "1".into()], &[3.0, 0.0], "t", "x", "y"));
        well_formed(&box_plot(&[("a".into(), vec![1.0, 2.0, 3.0]), ("b".into(), vec![])], "t", "x", "y"));
        well_formed(&scatter_plot(&[("a".into(), vec![(0.0, 0.0), (1.0, 2.0)])], "t", "x", "y"));
        well_formed(&line_plot(&[0.0, 1.0, 2.0], &[("a".into(), vec![0.5, f64::NAN, 0.7])], "t<", "x", "y"));
    }

    #[test]
    fn quantiles() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.5), 2.5);
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 4.0);
    }
}
