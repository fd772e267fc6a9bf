//! Static SVG rendering for the CSV artifacts the studies emit. The chart
//! type is chosen from the CSV header, so `eitpt plot --input <file>` works
//! on any study output without extra flags.

use std::path::Path;

use eitpt::lab::RunConfig;
use eitpt::mesh::TriMesh;
use eitpt::{Error, Result};

/// Ten-anchor viridis approximation, interpolated linearly in RGB.
const VIRIDIS: [(u8, u8, u8); 10] = [
    (0x44, 0x01, 0x54),
    (0x48, 0x28, 0x78),
    (0x3e, 0x4a, 0x89),
    (0x31, 0x68, 0x8e),
    (0x26, 0x82, 0x8e),
    (0x1f, 0x9e, 0x89),
    (0x35, 0xb7, 0x79),
    (0x6e, 0xce, 0x58),
    (0xb5, 0xde, 0x2b),
    (0xfd, 0xe7, 0x25),
];

fn viridis(t: f64) -> String {
    let t = t.clamp(0.0, 1.0) * (VIRIDIS.len() - 1) as f64;
    let i = (t.floor() as usize).min(VIRIDIS.len() - 2);
    let f = t - i as f64;
    let mix = |a: u8, b: u8| (a as f64 + f * (b as f64 - a as f64)).round() as u8;
    let (r0, g0, b0) = VIRIDIS[i];
    let (r1, g1, b1) = VIRIDIS[i + 1];
    format!("#{:02x}{:02x}{:02x}", mix(r0, r1), mix(g0, g1), mix(b0, b1))
}

/// Line colors for multi-series charts.
const SERIES_COLORS: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
];

struct Svg {
    w: f64,
    h: f64,
    body: String,
}

impl Svg {
    fn new(w: f64, h: f64) -> Self {
        Svg {
            w,
            h,
            body: String::new(),
        }
    }

    fn finish(self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" \
             viewBox=\"0 0 {} {}\" font-family=\"sans-serif\" font-size=\"12\">\n\
             <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{}</svg>\n",
            self.w, self.h, self.w, self.h, self.body
        )
    }

    fn polygon(&mut self, pts: &[(f64, f64)], fill: &str, stroke: &str) {
        let p: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
        self.body.push_str(&format!(
            "<polygon points=\"{}\" fill=\"{fill}\" stroke=\"{stroke}\" stroke-width=\"0.3\"/>\n",
            p.join(" ")
        ));
    }

    fn polyline(&mut self, pts: &[(f64, f64)], stroke: &str, width: f64) {
        if pts.len() < 2 {
            return;
        }
        let p: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
        self.body.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{stroke}\" stroke-width=\"{width}\"/>\n",
            p.join(" ")
        ));
    }

    fn line(&mut self, a: (f64, f64), b: (f64, f64), stroke: &str, width: f64) {
        self.body.push_str(&format!(
            "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"{stroke}\" stroke-width=\"{width}\"/>\n",
            a.0, a.1, b.0, b.1
        ));
    }

    fn text(&mut self, x: f64, y: f64, anchor: &str, s: &str) {
        self.body.push_str(&format!(
            "<text x=\"{x:.2}\" y=\"{y:.2}\" text-anchor=\"{anchor}\">{s}</text>\n"
        ));
    }
}

/// Maps data coordinates to pixel coordinates inside fixed margins and draws
/// the axis frame with ticks.
struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
    left: f64,
    right: f64,
    top: f64,
    bottom: f64,
    log_y: bool,
}

impl Frame {
    fn new(w: f64, h: f64, x: (f64, f64), y: (f64, f64), log_y: bool) -> Self {
        let (mut y0, mut y1) = y;
        if !log_y {
            // Pad the linear value range so curves do not hug the frame.
            let pad = 0.05 * (y1 - y0).max(1e-300);
            y0 -= pad;
            y1 += pad;
        }
        Frame {
            x0: x.0,
            x1: x.1,
            y0,
            y1,
            left: 62.0,
            right: w - 18.0,
            top: 28.0,
            bottom: h - 42.0,
            log_y,
        }
    }

    fn px(&self, x: f64) -> f64 {
        let t = (x - self.x0) / (self.x1 - self.x0).max(1e-300);
        self.left + t * (self.right - self.left)
    }

    fn py(&self, y: f64) -> f64 {
        let t = if self.log_y {
            (y.max(1e-300).ln() - self.y0.max(1e-300).ln())
                / (self.y1.ln() - self.y0.max(1e-300).ln()).max(1e-300)
        } else {
            (y - self.y0) / (self.y1 - self.y0).max(1e-300)
        };
        self.bottom - t * (self.bottom - self.top)
    }

    fn draw(&self, svg: &mut Svg, x_label: &str, y_label: &str, title: &str) {
        svg.line((self.left, self.bottom), (self.right, self.bottom), "#333", 1.0);
        svg.line((self.left, self.bottom), (self.left, self.top), "#333", 1.0);
        for (v, frac) in ticks(self.x0, self.x1, false) {
            let x = self.px(v);
            svg.line((x, self.bottom), (x, self.bottom + 4.0), "#333", 1.0);
            svg.text(x, self.bottom + 17.0, "middle", &frac);
        }
        for (v, label) in ticks(self.y0, self.y1, self.log_y) {
            let y = self.py(v);
            svg.line((self.left - 4.0, y), (self.left, y), "#333", 1.0);
            svg.text(self.left - 7.0, y + 4.0, "end", &label);
            svg.line((self.left, y), (self.right, y), "#eee", 0.6);
        }
        let cx = 0.5 * (self.left + self.right);
        svg.text(cx, self.bottom + 33.0, "middle", x_label);
        svg.text(cx, 17.0, "middle", title);
        svg.body.push_str(&format!(
            "<text x=\"14\" y=\"{:.2}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {:.2})\">{}</text>\n",
            0.5 * (self.top + self.bottom),
            0.5 * (self.top + self.bottom),
            y_label
        ));
    }
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if a >= 1e4 || a < 1e-3 {
        format!("{v:.0e}")
    } else if a >= 10.0 {
        format!("{v:.0}")
    } else {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

/// Up to ~6 ticks at round values; decade ticks on log axes.
fn ticks(lo: f64, hi: f64, log: bool) -> Vec<(f64, String)> {
    if log {
        let lo = lo.max(1e-300);
        let (e0, e1) = (lo.log10().ceil() as i32, hi.log10().floor() as i32);
        return (e0..=e1)
            .map(|e| {
                let v = 10f64.powi(e);
                (v, format!("1e{e}"))
            })
            .collect();
    }
    let span = (hi - lo).max(1e-300);
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 2.5, 5.0, 10.0]
        .iter()
        .map(|s| s * mag)
        .find(|&s| span / s <= 6.0)
        .unwrap_or(mag * 10.0);
    let mut v = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while v <= hi + 1e-9 * span {
        out.push((v, fmt_tick(v)));
        v += step;
    }
    out
}

// ---- CSV parsing ----

struct Csv {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn read_csv(path: &Path) -> Result<Csv> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::Parse("empty CSV".into()))?
        .split(',')
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<String> = line.split(',').map(str::to_string).collect();
        if row.len() != header.len() {
            return Err(Error::Parse(format!(
                "CSV row has {} fields, header has {}",
                row.len(),
                header.len()
            )));
        }
        rows.push(row);
    }
    Ok(Csv { header, rows })
}

fn num(s: &str) -> Result<f64> {
    s.parse::<f64>()
        .map_err(|_| Error::Parse(format!("not a number: {s}")))
}

fn column(csv: &Csv, idx: usize) -> Result<Vec<f64>> {
    csv.rows.iter().map(|r| num(&r[idx])).collect()
}

fn min_max(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        (0.0, 1.0)
    } else if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

// ---- chart builders ----

fn line_chart(
    series: &[(String, Vec<(f64, f64)>)],
    x_label: &str,
    y_label: &str,
    title: &str,
    log_y: bool,
) -> String {
    let (w, h) = (640.0, 420.0);
    let mut svg = Svg::new(w, h);
    let xs = min_max(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)));
    let ys = min_max(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.1)));
    let frame = Frame::new(w, h, xs, ys, log_y);
    frame.draw(&mut svg, x_label, y_label, title);
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = SERIES_COLORS[i % SERIES_COLORS.len()];
        let px: Vec<(f64, f64)> = pts.iter().map(|&(x, y)| (frame.px(x), frame.py(y))).collect();
        svg.polyline(&px, color, 1.6);
        if !name.is_empty() {
            let y = frame.top + 16.0 * (i as f64 + 0.6);
            svg.line((frame.right - 88.0, y - 4.0), (frame.right - 70.0, y - 4.0), color, 2.0);
            svg.text(frame.right - 65.0, y, "start", name);
        }
    }
    svg.finish()
}

/// Bundle of thin curves per group (used for the principal-angle fans).
fn fan_chart(
    groups: &[(String, &str, Vec<Vec<(f64, f64)>>)],
    x_label: &str,
    y_label: &str,
    title: &str,
) -> String {
    let (w, h) = (640.0, 420.0);
    let mut svg = Svg::new(w, h);
    let all = groups
        .iter()
        .flat_map(|(_, _, curves)| curves.iter().flatten().copied());
    let xs = min_max(all.clone().map(|p| p.0));
    let ys = min_max(all.map(|p| p.1));
    let frame = Frame::new(w, h, xs, ys, false);
    frame.draw(&mut svg, x_label, y_label, title);
    for (i, (name, color, curves)) in groups.iter().enumerate() {
        for pts in curves {
            let px: Vec<(f64, f64)> =
                pts.iter().map(|&(x, y)| (frame.px(x), frame.py(y))).collect();
            svg.polyline(&px, color, 0.8);
        }
        let y = frame.top + 16.0 * (i as f64 + 0.6);
        svg.line((frame.right - 88.0, y - 4.0), (frame.right - 70.0, y - 4.0), color, 2.0);
        svg.text(frame.right - 65.0, y, "start", name);
    }
    svg.finish()
}

/// Conductivity image: every mesh triangle filled by its value, electrodes
/// stroked on the rim, plus a vertical colorbar.
fn image_chart(mesh: &TriMesh, values: &[f64], title: &str) -> String {
    let (w, h) = (560.0, 480.0);
    let mut svg = Svg::new(w, h);
    let r = mesh.radius();
    let scale = (h - 80.0) / (2.0 * r);
    let cx = 40.0 + r * scale;
    let cy = 40.0 + r * scale;
    let px = |p: [f64; 2]| (cx + p[0] * scale, cy - p[1] * scale);
    let (lo, hi) = min_max(values.iter().copied());
    for (e, tri) in mesh.elements().iter().enumerate() {
        let pts: Vec<(f64, f64)> = tri.iter().map(|&n| px(mesh.nodes()[n])).collect();
        let t = (values[e] - lo) / (hi - lo).max(1e-300);
        let color = viridis(t);
        svg.polygon(&pts, &color, &color);
    }
    for edges in mesh.electrodes() {
        for &ei in edges {
            let [a, b] = mesh.boundary_edges()[ei];
            svg.line(px(mesh.nodes()[a]), px(mesh.nodes()[b]), "#111", 4.0);
        }
    }
    svg.text(cx, 22.0, "middle", title);
    // Colorbar.
    let (bx, by0, by1) = (w - 70.0, 40.0 + 2.0 * r * scale, 40.0);
    let steps = 64;
    for k in 0..steps {
        let t0 = k as f64 / steps as f64;
        let t1 = (k + 1) as f64 / steps as f64;
        let ya = by0 + t0 * (by1 - by0);
        let yb = by0 + t1 * (by1 - by0);
        svg.polygon(
            &[(bx, ya), (bx + 16.0, ya), (bx + 16.0, yb), (bx, yb)],
            &viridis(0.5 * (t0 + t1)),
            "none",
        );
    }
    svg.text(bx + 20.0, by0 + 4.0, "start", &fmt_tick(lo));
    svg.text(bx + 20.0, by1 + 4.0, "start", &fmt_tick(hi));
    svg.finish()
}

// ---- dispatch ----

/// Finds the reconstruction ring count whose mesh has exactly `n_elements`
/// elements under the configured electrode layout.
fn mesh_for_elements(cfg: &RunConfig, n_elements: usize) -> Result<TriMesh> {
    let direct = cfg.build_mesh()?;
    if direct.n_elements() == n_elements {
        return Ok(direct);
    }
    for rings in 2..=64 {
        let m = RunConfig {
            n_rings: rings,
            ..cfg.clone()
        }
        .build_mesh()?;
        if m.n_elements() == n_elements {
            return Ok(m);
        }
    }
    Err(Error::InvalidParam(format!(
        "no disc mesh with {n_elements} elements exists for this electrode layout"
    )))
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "plot".into())
}

/// Renders `input` to an SVG chart chosen from its header and returns the
/// written path.
pub fn render(cfg: &RunConfig, input: &Path, out_file: &Path) -> Result<()> {
    let csv = read_csv(input)?;
    let head: Vec<&str> = csv.header.iter().map(String::as_str).collect();
    let name = stem(input);
    let svg = match head.as_slice() {
        ["element", "x", "y", "m"] => {
            let values = column(&csv, 3)?;
            let mesh = mesh_for_elements(cfg, values.len())?;
            image_chart(&mesh, &values, &name)
        }
        ["element", "x", "y", "approx", "approx_freespace", "true"] => {
            let idx: Vec<f64> = (0..csv.rows.len()).map(|i| i as f64).collect();
            let mut series = Vec::new();
            for (col, label) in [(5, "true"), (3, "approx"), (4, "approx freespace")] {
                let v = column(&csv, col)?;
                series.push((
                    label.to_string(),
                    idx.iter().copied().zip(v).collect::<Vec<_>>(),
                ));
            }
            line_chart(&series, "element", "Hessian diagonal", &name, false)
        }
        ["iter", "phi", "rel_resid", "step", "ls_evals"]
        | ["iter", "phi", "rel_resid", "step", "ls_evals", "wall_ms"] => {
            let it = column(&csv, 0)?;
            let rr = column(&csv, 2)?;
            let pts: Vec<(f64, f64)> = it.into_iter().zip(rr).collect();
            line_chart(
                &[(String::new(), pts)],
                "iteration",
                "relative residual",
                &name,
                true,
            )
        }
        ["s", "m"] => {
            let s = column(&csv, 0)?;
            let m = column(&csv, 1)?;
            let pts: Vec<(f64, f64)> = s.into_iter().zip(m).collect();
            line_chart(
                &[(String::new(), pts)],
                "position along x = y",
                "conductivity",
                &name,
                false,
            )
        }
        ["sigma", rest @ ..] if !rest.is_empty() => {
            let sig = column(&csv, 0)?;
            let mut series = Vec::new();
            for (k, label) in rest.iter().enumerate() {
                let v = column(&csv, k + 1)?;
                series.push((
                    label.to_string(),
                    sig.iter().copied().zip(v).collect::<Vec<_>>(),
                ));
            }
            line_chart(&series, "inclusion contrast", "Hessian diagonal", &name, false)
        }
        ["iter", "init", "frob"] => {
            let mut series: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
            for row in &csv.rows {
                let init = row[1].clone();
                let pt = (num(&row[0])?, num(&row[2])?);
                match series.iter_mut().find(|(n, _)| *n == init) {
                    Some((_, v)) => v.push(pt),
                    None => series.push((init, vec![pt])),
                }
            }
            line_chart(
                &series,
                "iteration",
                "relative Frobenius error",
                &name,
                false,
            )
        }
        ["iter", "init", ..] => {
            let n_angles = head.len() - 2;
            let mut groups: Vec<(String, &str, Vec<Vec<(f64, f64)>>)> = Vec::new();
            for row in &csv.rows {
                let init = row[1].clone();
                let iter = num(&row[0])?;
                let gi = match groups.iter().position(|(n, _, _)| *n == init) {
                    Some(i) => i,
                    None => {
                        let color = SERIES_COLORS[groups.len() % SERIES_COLORS.len()];
                        groups.push((init, color, vec![Vec::new(); n_angles]));
                        groups.len() - 1
                    }
                };
                for a in 0..n_angles {
                    groups[gi].2[a].push((iter, num(&row[a + 2])?));
                }
            }
            fan_chart(&groups, "iteration", "principal angle (rad)", &name)
        }
        _ => {
            return Err(Error::InvalidParam(format!(
                "no chart for CSV header: {}",
                csv.header.join(",")
            )))
        }
    };
    std::fs::write(out_file, svg)?;
    Ok(())
}
