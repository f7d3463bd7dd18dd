//! Small hand-rolled SVG plots; nothing here depends on a model, so the
//! `plot` command can re-render everything from CSVs alone.

const PLOT_W: f64 = 640.0;
const PLOT_H: f64 = 360.0;
const MARGIN: f64 = 46.0;

fn polyline(points: &[(f64, f64)], color: &str) -> String {
    let pts: Vec<String> = points.iter().map(|(x, y)| format!("{x:.1},{y:.1}")).collect();
    format!(
        "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
        pts.join(" ")
    )
}

fn frame(title: &str, x_label: &str, y_label: &str) -> String {
    let (w, h, m) = (PLOT_W, PLOT_H, MARGIN);
    format!(
        concat!(
            "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n",
            "<rect x=\"{m}\" y=\"{m}\" width=\"{iw}\" height=\"{ih}\" fill=\"none\" stroke=\"#444\"/>\n",
            "<text x=\"{cx}\" y=\"22\" text-anchor=\"middle\" font-size=\"14\" font-family=\"sans-serif\">{title}</text>\n",
            "<text x=\"{cx}\" y=\"{xl}\" text-anchor=\"middle\" font-size=\"11\" font-family=\"sans-serif\">{x_label}</text>\n",
            "<text x=\"14\" y=\"{cy}\" text-anchor=\"middle\" font-size=\"11\" font-family=\"sans-serif\" transform=\"rotate(-90 14 {cy})\">{y_label}</text>\n",
        ),
        w = w,
        h = h,
        m = m,
        iw = w - 2.0 * m,
        ih = h - 2.0 * m,
        cx = w / 2.0,
        cy = h / 2.0,
        xl = h - 10.0,
        title = title,
        x_label = x_label,
        y_label = y_label,
    )
}

fn map_series(xs: &[f64], ys: &[f64], y_lo: f64, y_hi: f64) -> Vec<(f64, f64)> {
    let x_lo = xs.first().copied().unwrap_or(0.0);
    let x_hi = xs.last().copied().unwrap_or(1.0).max(x_lo + 1e-9);
    let span_y = (y_hi - y_lo).max(1e-12);
    xs.iter()
        .zip(ys)
        .map(|(&x, &y)| {
            let px = MARGIN + (x - x_lo) / (x_hi - x_lo) * (PLOT_W - 2.0 * MARGIN);
            let py = PLOT_H - MARGIN - (y - y_lo) / span_y * (PLOT_H - 2.0 * MARGIN);
            (px, py)
        })
        .collect()
}

fn svg(body: String) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{PLOT_W}\" height=\"{PLOT_H}\" viewBox=\"0 0 {PLOT_W} {PLOT_H}\">\n{body}</svg>\n"
    )
}

fn legend(entries: &[(&str, &str)]) -> String {
    let mut out = String::new();
    for (i, (label, color)) in entries.iter().enumerate() {
        let x = MARGIN + 10.0 + i as f64 * 90.0;
        out.push_str(&format!(
            "<rect x=\"{x}\" y=\"{y}\" width=\"12\" height=\"4\" fill=\"{color}\"/>\n<text x=\"{tx}\" y=\"{ty}\" font-size=\"11\" font-family=\"sans-serif\">{label}</text>\n",
            x = x,
            y = MARGIN + 8.0,
            color = color,
            tx = x + 16.0,
            ty = MARGIN + 13.0,
            label = label,
        ));
    }
    out
}

/// Per-episode scale-weight time series (w_S, w_M, w_D in [0,1]).
pub fn weight_trace_svg(series: &[(usize, [f32; 3])], title: &str) -> String {
    let xs: Vec<f64> = series.iter().map(|(s, _)| *s as f64).collect();
    let mut body = frame(title, "environment step", "scale weight");
    let colors = ["#1f77b4", "#2ca02c", "#d62728"];
    let labels = ["w_S", "w_M", "w_D"];
    for k in 0..3 {
        let ys: Vec<f64> = series.iter().map(|(_, w)| w[k] as f64).collect();
        body.push_str(&polyline(&map_series(&xs, &ys, 0.0, 1.0), colors[k]));
    }
    body.push_str(&legend(&[(labels[0], colors[0]), (labels[1], colors[1]), (labels[2], colors[2])]));
    svg(body)
}

/// Training curves from metrics rows: L_flow and L_total against step.
pub fn loss_curves_svg(rows: &[(u64, f64, f64)], title: &str) -> String {
    let xs: Vec<f64> = rows.iter().map(|(s, _, _)| *s as f64).collect();
    let flow: Vec<f64> = rows.iter().map(|(_, f, _)| *f).collect();
    let total: Vec<f64> = rows.iter().map(|(_, _, t)| *t).collect();
    let hi = total
        .iter()
        .chain(flow.iter())
        .copied()
        .fold(f64::NEG_INFINITY, f64::max)
        .max(1e-9);
    let mut body = frame(title, "step", "loss");
    body.push_str(&polyline(&map_series(&xs, &flow, 0.0, hi), "#1f77b4"));
    body.push_str(&polyline(&map_series(&xs, &total, 0.0, hi), "#d62728"));
    body.push_str(&legend(&[("L_flow", "#1f77b4"), ("L_total", "#d62728")]));
    svg(body)
}

/// Grouped bar chart of ablation success rates with CI whiskers.
pub fn ablation_bars_svg(rows: &[(String, f64, f64, f64)], title: &str) -> String {
    let mut body = frame(title, "variant", "success rate");
    let n = rows.len().max(1);
    let slot = (PLOT_W - 2.0 * MARGIN) / n as f64;
    for (i, (name, rate, lo, hi)) in rows.iter().enumerate() {
        let x = MARGIN + slot * (i as f64 + 0.25);
        let w = slot * 0.5;
        let y = |v: f64| PLOT_H - MARGIN - v.clamp(0.0, 1.0) * (PLOT_H - 2.0 * MARGIN);
        body.push_str(&format!(
            "<rect x=\"{x:.1}\" y=\"{:.1}\" width=\"{w:.1}\" height=\"{:.1}\" fill=\"#1f77b4\"/>\n",
            y(*rate),
            (y(0.0) - y(*rate)).max(0.0),
        ));
        let cx = x + w / 2.0;
        body.push_str(&format!(
            "<line x1=\"{cx:.1}\" y1=\"{:.1}\" x2=\"{cx:.1}\" y2=\"{:.1}\" stroke=\"#333\"/>\n",
            y(*lo),
            y(*hi),
        ));
        body.push_str(&format!(
            "<text x=\"{cx:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"9\" font-family=\"sans-serif\">{name}</text>\n",
            PLOT_H - MARGIN + 12.0,
        ));
    }
    svg(body)
}
