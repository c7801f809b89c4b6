//! Self-contained SVG scatter of a sample dump.

use std::fmt::Write;

use reform::trainer::SampleDump;

const PIXELS: u32 = 600;

/// Scatter of latents and actions (first two coordinates) over the latent
/// ball of radius `l` and the action box. The viewBox spans
/// `[-1.1 max(l, 1), 1.1 max(l, 1)]^2` in data units; `y` points up.
pub fn scatter_svg(dump: &SampleDump, l: f64) -> String {
    let half = 1.1 * l.max(1.0);
    let side = 2.0 * half;
    let mark = side / 200.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{PIXELS}" height="{PIXELS}" viewBox="{} {} {} {}">"#,
        -half, -half, side, side
    );
    let _ = writeln!(s, r#"<g transform="scale(1,-1)">"#);
    let _ = writeln!(
        s,
        r#"<rect class="box" x="-1" y="-1" width="2" height="2" fill="none" stroke="gray" stroke-width="{}"/>"#,
        side / 300.0
    );
    let _ = writeln!(
        s,
        r#"<circle class="ball" cx="0" cy="0" r="{l}" fill="none" stroke="black" stroke-width="{}"/>"#,
        side / 300.0
    );
    let xy = |v: &[f64]| (v[0], v.get(1).copied().unwrap_or(0.0));
    for i in 0..dump.len() {
        let (_, z, _) = dump.row(i);
        let (x, y) = xy(z);
        let _ = writeln!(
            s,
            r#"<rect class="latent" x="{}" y="{}" width="{m}" height="{m}" fill="steelblue"/>"#,
            x - mark / 2.0,
            y - mark / 2.0,
            m = mark
        );
    }
    for i in 0..dump.len() {
        let (_, _, a) = dump.row(i);
        let (x, y) = xy(a);
        let _ = writeln!(
            s,
            r#"<rect class="action" x="{}" y="{}" width="{m}" height="{m}" fill="firebrick"/>"#,
            x - mark / 2.0,
            y - mark / 2.0,
            m = mark
        );
    }
    s.push_str("</g>\n</svg>\n");
    s
}
