//! Grouped bar chart of UAR metrics across evaluation reports, as SVG.

use std::fmt::Write as _;

pub const PLOT_HEIGHT: f64 = 200.0;
const TOP: f64 = 20.0;
const LEFT: f64 = 40.0;
const BAR_WIDTH: f64 = 24.0;
const GROUP_GAP: f64 = 24.0;
const SERIES: [(&str, &str); 2] = [("uar_7", "#4c72b0"), ("uar_4", "#dd8452")];

/// One report: a label and its `(metric, value)` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportInput {
    pub label: String,
    pub rows: Vec<(String, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// One group per report, one bar per UAR metric present. Bar heights are
/// `value × PLOT_HEIGHT`, clamped to [0, 1]; missing or NaN values draw no bar.
pub fn uar_bar_svg(reports: &[ReportInput]) -> String {
    let group_w = SERIES.len() as f64 * BAR_WIDTH + GROUP_GAP;
    let width = LEFT + reports.len() as f64 * group_w + GROUP_GAP;
    let height = TOP + PLOT_HEIGHT + 40.0;
    let base = TOP + PLOT_HEIGHT;
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="10">"#
    )
    .unwrap();
    for tick in 0..=4 {
        let v = tick as f64 / 4.0;
        let y = base - v * PLOT_HEIGHT;
        writeln!(
            s,
            r##"<line x1="{LEFT:.0}" y1="{y:.3}" x2="{width:.0}" y2="{y:.3}" stroke="#ddd"/><text x="{:.0}" y="{:.3}" text-anchor="end">{v:.2}</text>"##,
            LEFT - 4.0,
            y + 3.0
        )
        .unwrap();
    }
    for (g, r) in reports.iter().enumerate() {
        let x0 = LEFT + GROUP_GAP + g as f64 * group_w;
        for (i, (metric, color)) in SERIES.iter().enumerate() {
            let Some(v) = r.rows.iter().find(|(k, _)| k == metric).map(|(_, v)| *v) else {
                continue;
            };
            if v.is_nan() {
                continue;
            }
            let h = v.clamp(0.0, 1.0) * PLOT_HEIGHT;
            writeln!(
                s,
                r#"<rect class="bar" data-metric="{metric}" data-value="{v}" x="{:.3}" y="{:.3}" width="{BAR_WIDTH:.0}" height="{h:.3}" fill="{color}"/>"#,
                x0 + i as f64 * BAR_WIDTH,
                base - h
            )
            .unwrap();
        }
        writeln!(
            s,
            r#"<text x="{:.3}" y="{:.0}" text-anchor="middle">{}</text>"#,
            x0 + SERIES.len() as f64 * BAR_WIDTH / 2.0,
            base + 14.0,
            escape(&r.label)
        )
        .unwrap();
    }
    for (i, (metric, color)) in SERIES.iter().enumerate() {
        let x = LEFT + i as f64 * 70.0;
        writeln!(
            s,
            r#"<rect x="{x:.0}" y="{:.0}" width="10" height="10" fill="{color}"/><text x="{:.0}" y="{:.0}">{metric}</text>"#,
            base + 24.0,
            x + 14.0,
            base + 33.0
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(label: &str, u7: f64, u4: f64) -> ReportInput {
        ReportInput {
            label: label.into(),
            rows: vec![("uar_7".into(), u7), ("uar_4".into(), u4), ("n_scored".into(), 10.0)],
        }
    }

    fn bars(svg: &str) -> Vec<(String, f64, f64)> {
        let attr = |line: &str, name: &str| -> String {
            let start = line.find(&format!(" {name}=\"")).unwrap() + name.len() + 3;
            line[start..].split('"').next().unwrap().to_string()
        };
        svg.lines()
            .filter(|l| l.contains(r#"class="bar""#))
            .map(|l| {
                (
                    attr(l, "data-metric"),
                    attr(l, "data-value").parse().unwrap(),
                    attr(l, "height").parse().unwrap(),
                )
            })
            .collect()
    }

    #[test]
    fn single_report_single_group() {
        let svg = uar_bar_svg(&[input("run", 0.5, 0.75)]);
        assert_eq!(bars(&svg).len(), 2);
        assert_eq!(svg.matches("text-anchor=\"middle\"").count(), 1);
    }

    #[test]
    fn heights_are_proportional() {
        let reports = [
            input("a", 0.539, 0.7),
            input("b<c", 0.123456, 1.0),
            input("d", 0.0, f64::NAN),
        ];
        let svg = uar_bar_svg(&reports);
        let b = bars(&svg);
        assert_eq!(b.len(), 5);
        for (_, v, h) in b {
            assert!((h - v * PLOT_HEIGHT).abs() <= 5e-4, "{v} {h}");
        }
        assert!(svg.contains("b&lt;c"));
    }

    #[test]
    fn deterministic_bytes() {
        let r = [input("x", 0.4, 0.6), input("y", 0.45, 0.65)];
        assert_eq!(uar_bar_svg(&r), uar_bar_svg(&r));
    }
}
