//! Minimal SVG line plots for ROC curves.

use sda_core::eval::RocPoint;

const W: f64 = 440.0;
const H: f64 = 440.0;
const M: f64 = 50.0; // margin

fn x_px(far: f64) -> f64 {
    M + far * (W - 2.0 * M)
}

fn y_px(tpr: f64) -> f64 {
    H - M - tpr * (H - 2.0 * M)
}

const PALETTE: [&str; 9] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22",
];

/// One ROC plot with a named curve per series.
pub fn roc_svg(title: &str, series: &[(String, Vec<RocPoint>)]) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n"
    ));
    s.push_str(&format!(
        "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
        W / 2.0,
        title
    ));
    // axes
    s.push_str(&format!(
        "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n<line x1=\"{m}\" y1=\"{b}\" x2=\"{m}\" y2=\"{t}\" stroke=\"black\"/>\n",
        m = M,
        b = H - M,
        r = W - M,
        t = M
    ));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\">FAR</text>\n",
        W / 2.0,
        H - M / 3.0
    ));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 {x} {y})\">TPR</text>\n",
        M / 3.0,
        H / 2.0,
        x = M / 3.0,
        y = H / 2.0
    ));
    // chance diagonal
    s.push_str(&format!(
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#bbbbbb\" stroke-dasharray=\"4,4\"/>\n",
        x_px(0.0),
        y_px(0.0),
        x_px(1.0),
        y_px(1.0)
    ));
    for (i, (name, points)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = points
            .iter()
            .map(|p| format!("{:.2},{:.2}", x_px(p.far), y_px(p.tpr)))
            .collect();
        s.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            path.join(" ")
        ));
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" fill=\"{color}\">{name}</text>\n",
            W - M - 120.0,
            H - M - 14.0 * (series.len() - i) as f64
        ));
    }
    s.push_str("</svg>\n");
    s
}
