//! Minimal SVG line plots.

use std::fmt::Write as _;

const W: f64 = 800.0;
const H: f64 = 300.0;
const PAD: f64 = 30.0;

fn polyline(values: &[f64], lo: f64, hi: f64, style: &str) -> String {
    let span = if hi > lo { hi - lo } else { 1.0 };
    let dx = (W - 2.0 * PAD) / (values.len().max(2) - 1) as f64;
    let mut pts = String::new();
    for (i, v) in values.iter().enumerate() {
        let x = PAD + i as f64 * dx;
        let y = H - PAD - (v - lo) / span * (H - 2.0 * PAD);
        let _ = write!(pts, "{x:.1},{y:.1} ");
    }
    format!("<polyline fill=\"none\" {style} points=\"{}\"/>\n", pts.trim_end())
}

/// Overlays the observation, the reconstruction and (if known) the truth.
pub fn overlay(title: &str, y: &[f64], xhat: &[f64], x: Option<&[f64]>) -> String {
    let all = y.iter().chain(xhat).chain(x.into_iter().flatten());
    let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{PAD}\" y=\"20\" font-family=\"sans-serif\" font-size=\"13\">{title}</text>\n"
    );
    s += &polyline(y, lo, hi, "stroke=\"#999999\" stroke-width=\"1\"");
    if let Some(x) = x {
        s += &polyline(x, lo, hi, "stroke=\"black\" stroke-width=\"1.5\" stroke-dasharray=\"5,3\"");
    }
    s += &polyline(xhat, lo, hi, "stroke=\"#1f77b4\" stroke-width=\"1.5\"");
    let legend = [("observation", "#999999"), ("truth", "black"), ("reconstruction", "#1f77b4")];
    for (i, (name, color)) in legend.iter().enumerate().filter(|(i, _)| *i != 1 || x.is_some()) {
        let lx = W - 160.0;
        let ly = 20.0 + 16.0 * i as f64;
        let _ = write!(
            s,
            "<line x1=\"{lx}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/>\
             <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\">{name}</text>\n",
            lx + 20.0,
            lx + 26.0,
            ly + 4.0
        );
    }
    s + "</svg>\n"
}
