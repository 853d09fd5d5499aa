//! Report rendering: per-session accuracy curves as standalone SVG, an
//! aligned ablation table, and the cross-check that recomputes the average
//! accuracy from each run's CSV.

use casp_core::error::{Error, Result};

use crate::artifacts::SummaryJson;

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 500.0;
const MARGIN_X: f64 = WIDTH * 0.1;
const MARGIN_Y: f64 = HEIGHT * 0.1;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f",
];

fn x_pos(session: usize, max_session: usize) -> f64 {
    let span = WIDTH - 2.0 * MARGIN_X;
    if max_session == 0 {
        return MARGIN_X + span / 2.0;
    }
    MARGIN_X + span * session as f64 / max_session as f64
}

fn y_pos(acc: f64) -> f64 {
    let span = HEIGHT - 2.0 * MARGIN_Y;
    HEIGHT - MARGIN_Y - span * acc.clamp(0.0, 1.0)
}

fn svg_header(desc: &str) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    out.push_str(&format!("<desc>{}</desc>\n", xml_escape(desc)));
    out.push_str(&format!(
        "<rect x=\"0\" y=\"0\" width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n"
    ));
    out
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn axes(max_session: usize, x_label: &str) -> String {
    let mut out = String::new();
    let x0 = MARGIN_X;
    let x1 = WIDTH - MARGIN_X;
    let y0 = HEIGHT - MARGIN_Y;
    let y1 = MARGIN_Y;
    out.push_str(&format!(
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n"
    ));
    out.push_str(&format!(
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>\n"
    ));
    for i in 0..=10 {
        let acc = i as f64 / 10.0;
        let y = y_pos(acc);
        out.push_str(&format!(
            "<line x1=\"{}\" y1=\"{y}\" x2=\"{x0}\" y2=\"{y}\" stroke=\"black\"/>\n",
            x0 - 5.0
        ));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"end\">{acc:.1}</text>\n",
            x0 - 8.0,
            y + 4.0
        ));
    }
    for s in 0..=max_session {
        let x = x_pos(s, max_session);
        out.push_str(&format!(
            "<line x1=\"{x}\" y1=\"{y0}\" x2=\"{x}\" y2=\"{}\" stroke=\"black\"/>\n",
            y0 + 5.0
        ));
        out.push_str(&format!(
            "<text x=\"{x}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">{s}</text>\n",
            y0 + 18.0
        ));
    }
    out.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"14\" text-anchor=\"middle\">{x_label}</text>\n",
        WIDTH / 2.0,
        HEIGHT - 10.0
    ));
    out.push_str(&format!(
        "<text x=\"18\" y=\"{}\" font-size=\"14\" text-anchor=\"middle\" transform=\"rotate(-90 18 {})\">accuracy</text>\n",
        HEIGHT / 2.0,
        HEIGHT / 2.0
    ));
    out
}

/// Session-accuracy line chart: one polyline per run, fixed palette, legend
/// in the top-right corner. No timestamps anywhere, so output is stable.
pub fn sessions_svg(runs: &[SummaryJson]) -> Result<String> {
    if runs.is_empty() {
        return Err(Error::InvalidArgument("no runs to plot".into()));
    }
    let max_session = runs
        .iter()
        .map(|r| r.sessions.len().saturating_sub(1))
        .max()
        .unwrap_or(0);
    let desc: Vec<String> = runs
        .iter()
        .map(|r| format!("{} seed={} config={}", r.tag, r.seed, r.config.echo()))
        .collect();
    let mut out = svg_header(&desc.join(" | "));
    out.push_str(&axes(max_session, "session"));
    for (i, run) in runs.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let points: Vec<String> = run
            .sessions
            .iter()
            .enumerate()
            .map(|(s, &a)| format!("{:.2},{:.2}", x_pos(s, max_session), y_pos(a)))
            .collect();
        out.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
            points.join(" ")
        ));
        for (s, &a) in run.sessions.iter().enumerate() {
            out.push_str(&format!(
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>\n",
                x_pos(s, max_session),
                y_pos(a)
            ));
        }
        let ly = MARGIN_Y + 18.0 * i as f64;
        out.push_str(&format!(
            "<line x1=\"{}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            WIDTH - MARGIN_X - 150.0,
            WIDTH - MARGIN_X - 120.0
        ));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"12\">{}</text>\n",
            WIDTH - MARGIN_X - 114.0,
            ly + 4.0,
            xml_escape(&format!("{} (s{})", run.tag, run.seed))
        ));
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Scatter of a sweep's long-form CSV: one point per grid cell.
pub fn sweep_svg(rows: &[(String, f64)], desc: &str) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument("empty sweep".into()));
    }
    let n = rows.len();
    let mut out = svg_header(desc);
    out.push_str(&axes(n.saturating_sub(1), "grid cell"));
    for (i, (label, a_l)) in rows.iter().enumerate() {
        let x = x_pos(i, n.saturating_sub(1));
        let y = y_pos(*a_l);
        out.push_str(&format!(
            "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"5\" fill=\"{}\"/>\n",
            PALETTE[0]
        ));
        out.push_str(&format!(
            "<text x=\"{x:.2}\" y=\"{:.2}\" font-size=\"9\" text-anchor=\"middle\">{}</text>\n",
            y - 9.0,
            xml_escape(label)
        ));
    }
    out.push_str("</svg>\n");
    Ok(out)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{:.4}", x)).unwrap_or_else(|| "-".into())
}

/// Markdown table with one row per run and the four headline metrics.
pub fn ablation_table(runs: &[SummaryJson]) -> String {
    let mut widths = [3usize, 6, 6, 6, 6];
    let rows: Vec<[String; 5]> = runs
        .iter()
        .map(|r| {
            [
                format!("{} (s{})", r.tag, r.seed),
                format!("{:.4}", r.a_b),
                fmt_opt(r.a_n),
                format!("{:.4}", r.a_l),
                format!("{:.4}", r.a_avg),
            ]
        })
        .collect();
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let header = ["run", "A_B", "A_N", "A_L", "A_avg"];
    for (w, h) in widths.iter_mut().zip(header) {
        *w = (*w).max(h.len());
    }
    let mut out = String::new();
    let fmt_row = |cells: &[String; 5], widths: &[usize; 5]| -> String {
        let padded: Vec<String> = cells
            .iter()
            .zip(widths)
            .map(|(c, &w)| format!("{c:<w$}"))
            .collect();
        format!("| {} |\n", padded.join(" | "))
    };
    let header_cells: [String; 5] = header.map(String::from);
    out.push_str(&fmt_row(&header_cells, &widths));
    let dashes: [String; 5] = widths.map(|w| "-".repeat(w));
    out.push_str(&fmt_row(&dashes, &widths));
    for row in &rows {
        out.push_str(&fmt_row(row, &widths));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;

    fn fake_run(tag: &str, sessions: Vec<f64>) -> SummaryJson {
        let n = sessions.len();
        SummaryJson {
            a_b: sessions[0],
            a_n: Some(0.5),
            a_l: sessions[n - 1],
            a_avg: sessions.iter().sum::<f64>() / n as f64,
            a_n_last_session_only: Some(0.4),
            seed: 1,
            tag: tag.into(),
            sessions,
            rows: vec![],
            csv: "x.csv".into(),
            pretrain_holdout_accuracy: None,
            config: RunConfig::default(),
        }
    }

    #[test]
    fn one_run_one_polyline_with_all_points() {
        let svg = sessions_svg(&[fake_run("a", vec![0.9, 0.8, 0.7])]).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 1);
        // 3 data circles
        assert_eq!(svg.matches("<circle").count(), 3);
        assert!(svg.contains("viewBox=\"0 0 800 500\""));
    }

    #[test]
    fn five_runs_five_polylines() {
        let runs: Vec<SummaryJson> = (0..5)
            .map(|i| fake_run(&format!("r{i}"), vec![0.9, 0.8]))
            .collect();
        let svg = sessions_svg(&runs).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 5);
        let table = ablation_table(&runs);
        assert_eq!(table.lines().count(), 2 + 5);
        assert!(table.contains("A_B") && table.contains("A_avg"));
    }

    #[test]
    fn sweep_plot_has_one_point_per_cell() {
        let rows = vec![
            ("l=0".to_string(), 0.5),
            ("l=0.05".to_string(), 0.6),
            ("l=0.5".to_string(), 0.55),
        ];
        let svg = sweep_svg(&rows, "sweep").unwrap();
        assert_eq!(svg.matches("<circle").count(), 3);
    }

    #[test]
    fn empty_inputs_error() {
        assert!(sessions_svg(&[]).is_err());
        assert!(sweep_svg(&[], "d").is_err());
    }
}
