use std::fmt::Write as _;

use crate::eval::EvalReport;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// SVG with one precision-recall step curve per class at IoU 0.50.
pub fn pr_curve_svg(report: &EvalReport) -> String {
    let (w, h, m) = (480.0, 360.0, 48.0);
    let px = |r: f64| m + r * (w - 2.0 * m);
    let py = |p: f64| h - m - p * (h - 2.0 * m);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{:.1},{:.1} H{:.1} M{:.1},{:.1} V{:.1}" stroke="black" fill="none"/>"#,
        px(0.0),
        py(0.0),
        px(1.0),
        px(0.0),
        py(0.0),
        py(1.0)
    );
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{t:.2}</text>"#, px(t), py(0.0) + 16.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{t:.2}</text>"#, px(0.0) - 6.0, py(t) + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">recall</text>"#, w / 2.0, h - 10.0);
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">precision</text>"#,
        h / 2.0,
        h / 2.0
    );
    for (i, c) in report.pr_curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut d = format!("M{:.1},{:.1}", px(0.0), py(c.curve.precision.first().copied().unwrap_or(0.0)));
        for (r, p) in c.curve.recall.iter().zip(&c.curve.precision) {
            let _ = write!(d, " V{:.1} H{:.1}", py(*p), px(*r));
        }
        let _ = writeln!(s, r#"<path d="{d}" stroke="{color}" stroke-width="1.5" fill="none"/>"#);
        let ap = report.per_class_ap.get(&c.class).copied().flatten();
        let label = match ap {
            Some(a) => format!("{} (AP {:.3})", c.class, a),
            None => c.class.clone(),
        };
        let y = m + 14.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{y:.1}" fill="{color}" text-anchor="end">{}</text>"#,
            w - m,
            xml_escape(&label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
