//! Hand-written SVG charts. Output depends only on the input values, so the
//! same CSV always renders to the same bytes.

use std::fmt::Write;

use super::{summarize, ResultRow, Summary};

const W: f64 = 640.0;
const H: f64 = 360.0;
const MARGIN: f64 = 50.0;
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

fn open(width: f64, height: f64, title: &str) -> String {
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    )
    .unwrap();
    writeln!(
        s,
        r#"<rect width="{width}" height="{height}" fill="white"/>"#
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        width / 2.0,
        escape(title)
    )
    .unwrap();
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Frame with y ticks for a panel at horizontal offset `x0`.
fn axes(s: &mut String, x0: f64, width: f64, y_max: f64, y_label: &str) {
    let (top, bottom) = (MARGIN, H - MARGIN);
    writeln!(
        s,
        r#"<line x1="{x0:.1}" y1="{top:.1}" x2="{x0:.1}" y2="{bottom:.1}" stroke="black"/>"#
    )
    .unwrap();
    writeln!(
        s,
        r#"<line x1="{x0:.1}" y1="{bottom:.1}" x2="{:.1}" y2="{bottom:.1}" stroke="black"/>"#,
        x0 + width
    )
    .unwrap();
    for i in 0..=4 {
        let v = y_max * i as f64 / 4.0;
        let y = bottom - (bottom - top) * i as f64 / 4.0;
        writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.1}</text>"#,
            x0 - 4.0,
            y + 4.0
        )
        .unwrap();
    }
    writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" transform="rotate(-90 {:.1} {:.1})">{}</text>"#,
        x0 - 36.0,
        (top + bottom) / 2.0,
        x0 - 36.0,
        (top + bottom) / 2.0,
        escape(y_label)
    )
    .unwrap();
}

pub fn placeholder(title: &str) -> String {
    let mut s = open(W, H, title);
    writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">no results</text>"#,
        W / 2.0,
        H / 2.0
    )
    .unwrap();
    s.push_str("</svg>\n");
    s
}

/// Mean success per cell with one-standard-deviation whiskers.
pub fn success_bars(summaries: &[Summary], title: &str) -> String {
    if summaries.is_empty() {
        return placeholder(title);
    }
    let mut s = open(W, H, title);
    let width = W - 2.0 * MARGIN;
    axes(&mut s, MARGIN, width, 100.0, "success (%)");
    let slot = width / summaries.len() as f64;
    let scale = (H - 2.0 * MARGIN) / 100.0;
    for (i, m) in summaries.iter().enumerate() {
        let x = MARGIN + slot * i as f64 + slot * 0.15;
        let h = m.success_mean * scale;
        let y = H - MARGIN - h;
        writeln!(
            s,
            r#"<rect x="{x:.1}" y="{y:.1}" width="{:.1}" height="{h:.1}" fill="{}"/>"#,
            slot * 0.7,
            COLORS[i % COLORS.len()]
        )
        .unwrap();
        let cx = x + slot * 0.35;
        let lo = H - MARGIN - (m.success_mean - m.success_std).max(0.0) * scale;
        let hi = H - MARGIN - (m.success_mean + m.success_std).min(100.0) * scale;
        writeln!(
            s,
            r#"<line x1="{cx:.1}" y1="{lo:.1}" x2="{cx:.1}" y2="{hi:.1}" stroke="black"/>"#
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            H - MARGIN + 14.0,
            escape(&m.cell)
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

fn line_panel(
    s: &mut String,
    x0: f64,
    width: f64,
    budgets: &[usize],
    series: &[(String, Vec<f64>)],
    y_max: f64,
    y_label: &str,
) {
    axes(s, x0, width, y_max, y_label);
    let n = budgets.len().max(2) - 1;
    let px = |i: usize| x0 + 10.0 + (width - 20.0) * i as f64 / n as f64;
    let py = |v: f64| H - MARGIN - (H - 2.0 * MARGIN) * v / y_max;
    for (i, b) in budgets.iter().enumerate() {
        writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{b}</text>"#,
            px(i),
            H - MARGIN + 14.0
        )
        .unwrap();
    }
    for (k, (label, ys)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let pts: Vec<String> = ys
            .iter()
            .enumerate()
            .map(|(i, &v)| format!("{:.1},{:.1}", px(i), py(v)))
            .collect();
        writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            pts.join(" ")
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" fill="{color}">{}</text>"#,
            x0 + 8.0,
            MARGIN + 12.0 * (k + 1) as f64,
            escape(label)
        )
        .unwrap();
    }
}

/// Success and runtime against the search budget, one line per cell.
pub fn scaling_panels(summaries: &[Summary], title: &str) -> String {
    if summaries.is_empty() {
        return placeholder(title);
    }
    let mut budgets: Vec<usize> = summaries.iter().map(|m| m.budget).collect();
    budgets.sort_unstable();
    budgets.dedup();
    let mut labels: Vec<String> = Vec::new();
    for m in summaries {
        if !labels.contains(&m.cell) {
            labels.push(m.cell.clone());
        }
    }
    let series = |f: &dyn Fn(&Summary) -> f64| -> Vec<(String, Vec<f64>)> {
        labels
            .iter()
            .map(|l| {
                let ys = budgets
                    .iter()
                    .map(|&b| {
                        summaries
                            .iter()
                            .find(|m| &m.cell == l && m.budget == b)
                            .map_or(0.0, f)
                    })
                    .collect();
                (l.clone(), ys)
            })
            .collect()
    };
    let success = series(&|m| m.success_mean);
    let seconds = series(&|m| m.seconds_mean);
    let top = seconds
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .fold(0.0, f64::max);
    let total = 2.0 * W;
    let mut s = open(total, H, title);
    let width = W - 2.0 * MARGIN;
    line_panel(
        &mut s,
        MARGIN,
        width,
        &budgets,
        &success,
        100.0,
        "success (%)",
    );
    line_panel(
        &mut s,
        W + MARGIN,
        width,
        &budgets,
        &seconds,
        if top > 0.0 { top * 1.1 } else { 1.0 },
        "seconds",
    );
    s.push_str("</svg>\n");
    s
}

/// Histogram of the node depths visited by a search.
pub fn depth_histogram(depths: &[usize], title: &str) -> String {
    if depths.is_empty() {
        return placeholder(title);
    }
    let max_depth = *depths.iter().max().unwrap();
    let mut counts = vec![0usize; max_depth + 1];
    for &d in depths {
        counts[d] += 1;
    }
    let top = *counts.iter().max().unwrap() as f64;
    let mut s = open(W, H, title);
    let width = W - 2.0 * MARGIN;
    axes(&mut s, MARGIN, width, top, "visits");
    let slot = width / counts.len() as f64;
    for (d, &c) in counts.iter().enumerate() {
        let h = (H - 2.0 * MARGIN) * c as f64 / top;
        let x = MARGIN + slot * d as f64 + slot * 0.1;
        writeln!(
            s,
            r#"<rect x="{x:.1}" y="{:.1}" width="{:.1}" height="{h:.1}" fill="{}"/>"#,
            H - MARGIN - h,
            slot * 0.8,
            COLORS[0]
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{d}</text>"#,
            x + slot * 0.4,
            H - MARGIN + 14.0
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

/// Picks the chart for a results file: budget curves when the rows span
/// more than one budget, else success bars.
pub fn plot_results(rows: &[ResultRow], title: &str) -> String {
    let summaries = summarize(rows);
    let mut budgets: Vec<usize> = rows.iter().map(|r| r.budget).collect();
    budgets.sort_unstable();
    budgets.dedup();
    if budgets.len() > 1 {
        scaling_panels(&summaries, title)
    } else {
        success_bars(&summaries, title)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(cell: &str, budget: usize, success: u8) -> ResultRow {
        ResultRow {
            maze: "m".into(),
            planner: cell.into(),
            cell: cell.into(),
            budget,
            task: 0,
            seed: 0,
            success,
            reward: 0.0,
            seconds: budget as f64 * 0.1,
            calls: 1,
            iterations: 1,
            early_stopped: 0,
        }
    }

    #[test]
    fn empty_rows_render_a_placeholder() {
        let s = plot_results(&[], "t");
        assert!(s.contains("no results"));
        assert!(s.starts_with("<svg") && s.ends_with("</svg>\n"));
    }

    #[test]
    fn rendering_is_deterministic() {
        let rows = vec![row("a", 0, 1), row("b", 0, 0), row("a", 0, 0)];
        assert_eq!(plot_results(&rows, "x"), plot_results(&rows, "x"));
        assert_eq!(plot_results(&rows, "x").matches("<rect").count(), 3);
    }

    #[test]
    fn budget_rows_render_two_panels() {
        let rows = vec![
            row("mctd", 10, 0),
            row("mctd", 20, 1),
            row("rs", 10, 0),
            row("rs", 20, 0),
        ];
        let s = plot_results(&rows, "scale");
        assert_eq!(s.matches("<polyline").count(), 4);
        assert!(s.contains("success (%)") && s.contains("seconds"));
    }

    #[test]
    fn histogram_counts_depths() {
        let s = depth_histogram(&[1, 1, 2, 3, 1], "d");
        // one background plus one bar per depth 0..=3
        assert_eq!(s.matches("<rect").count(), 5);
    }
}
