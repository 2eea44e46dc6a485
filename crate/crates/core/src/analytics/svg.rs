//! Standalone SVG renderings of PCA scatter plots and similarity histograms.

use std::fmt::Write as _;

use super::tfidf::SimilarityHistogram;

const W: f64 = 640.0;
const H: f64 = 480.0;
const PAD: f64 = 48.0;
const PALETTE: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

fn header(title: &str) -> String {
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    let _ = writeln!(s, "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">{}</text>", W / 2.0, escape(title));
    let _ = writeln!(
        s,
        "<rect x=\"{PAD}\" y=\"{PAD}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#888\"/>",
        W - 2.0 * PAD,
        H - 2.0 * PAD
    );
    s
}

fn legend(s: &mut String, names: &[&str]) {
    for (i, name) in names.iter().enumerate() {
        let y = PAD + 16.0 + 18.0 * i as f64;
        let _ = writeln!(
            s,
            "<rect x=\"{}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{}\"/>",
            W - PAD - 120.0,
            y - 9.0,
            PALETTE[i % PALETTE.len()]
        );
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{y}\" font-family=\"sans-serif\" font-size=\"12\">{}</text>",
            W - PAD - 104.0,
            escape(name)
        );
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Scatter of 2-D points, one colour per series.
pub fn scatter_svg(title: &str, series: &[(&str, &[[f64; 2]])]) -> String {
    let all = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in all {
        x0 = x0.min(p[0]);
        x1 = x1.max(p[0]);
        y0 = y0.min(p[1]);
        y1 = y1.max(p[1]);
    }
    if x0 > x1 {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    let sx = (W - 2.0 * PAD) / (x1 - x0).max(1e-12);
    let sy = (H - 2.0 * PAD) / (y1 - y0).max(1e-12);
    let mut s = header(title);
    for (i, (_, points)) in series.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        for p in points.iter() {
            let _ = writeln!(
                s,
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2\" fill=\"{colour}\" fill-opacity=\"0.5\"/>",
                PAD + (p[0] - x0) * sx,
                H - PAD - (p[1] - y0) * sy
            );
        }
    }
    legend(&mut s, &series.iter().map(|(n, _)| *n).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    s
}

/// Overlaid histograms as normalized frequencies; all must share bin edges.
pub fn histogram_svg(title: &str, series: &[(&str, &SimilarityHistogram)]) -> String {
    let mut s = header(title);
    let bins = series.first().map_or(0, |(_, h)| h.counts.len());
    let freq = |h: &SimilarityHistogram, i: usize| h.counts[i] as f64 / h.samples.max(1) as f64;
    let peak = series
        .iter()
        .flat_map(|(_, h)| (0..h.counts.len()).map(move |i| freq(h, i)))
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let bw = (W - 2.0 * PAD) / bins.max(1) as f64;
    for (k, (_, h)) in series.iter().enumerate() {
        let colour = PALETTE[k % PALETTE.len()];
        for i in 0..bins.min(h.counts.len()) {
            let height = freq(h, i) / peak * (H - 2.0 * PAD);
            let _ = writeln!(
                s,
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{height:.2}\" fill=\"{colour}\" fill-opacity=\"0.45\"/>",
                PAD + i as f64 * bw,
                H - PAD - height,
                bw
            );
        }
    }
    for (i, label) in ["0", "0.5", "1"].iter().enumerate() {
        let _ = writeln!(s, "<text x=\"{:.2}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">{label}</text>", PAD + i as f64 * (W - 2.0 * PAD) / 2.0, H - PAD + 16.0);
    }
    legend(&mut s, &series.iter().map(|(n, _)| *n).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    s
}
