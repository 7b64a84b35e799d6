//! Deterministic SVG scatter of sweep results on the size/error plane:
//! log-scaled model size on x, MAE on y, non-dominated points joined by the
//! front polyline, and the seed model as a distinct marker.

/// One plotted model.
#[derive(Debug, Clone, Copy)]
pub struct PlotPoint {
    pub size_bytes: f64,
    pub error: f64,
    pub pareto: bool,
}

const W: f64 = 640.0;
const H: f64 = 440.0;
const ML: f64 = 70.0;
const MR: f64 = 20.0;
const MT: f64 = 36.0;
const MB: f64 = 52.0;

struct Axes {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Axes {
    fn x(&self, size: f64) -> f64 {
        let t = (size.log10() - self.x0) / (self.x1 - self.x0);
        ML + t * (W - ML - MR)
    }

    fn y(&self, err: f64) -> f64 {
        let t = (err - self.y0) / (self.y1 - self.y0);
        // SVG y grows downward.
        H - MB - t * (H - MT - MB)
    }
}

fn axes(points: &[PlotPoint], seed: Option<(f64, f64)>) -> Axes {
    let mut sizes: Vec<f64> = points.iter().map(|p| p.size_bytes).collect();
    let mut errs: Vec<f64> = points.iter().map(|p| p.error).collect();
    if let Some((s, e)) = seed {
        sizes.push(s);
        errs.push(e);
    }
    let min = |v: &[f64]| v.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = |v: &[f64]| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    // Pad a decade fraction horizontally and 10% vertically so markers
    // never sit on the frame; degenerate spans get a fixed pad.
    let (mut x0, mut x1) = (min(&sizes).max(1.0).log10(), max(&sizes).max(1.0).log10());
    if x1 - x0 < 0.2 {
        x0 -= 0.2;
        x1 += 0.2;
    } else {
        let pad = 0.05 * (x1 - x0);
        x0 -= pad;
        x1 += pad;
    }
    let (mut y0, mut y1) = (min(&errs), max(&errs));
    if y1 - y0 < 1e-9 {
        y0 -= 1.0;
        y1 += 1.0;
    } else {
        let pad = 0.1 * (y1 - y0);
        y0 -= pad;
        y1 += pad;
    }
    Axes { x0, x1, y0, y1 }
}

fn fmt_size(bytes: f64) -> String {
    if bytes >= 1024.0 * 1024.0 {
        format!("{:.1}M", bytes / (1024.0 * 1024.0))
    } else if bytes >= 1024.0 {
        format!("{:.0}k", bytes / 1024.0)
    } else {
        format!("{bytes:.0}")
    }
}

/// Render the scatter. `seed` is the trained seed model's (size, error),
/// when known. Output depends only on the arguments.
pub fn scatter(points: &[PlotPoint], seed: Option<(f64, f64)>) -> String {
    let ax = axes(points, seed);
    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    ));
    s.push_str(&format!(
        "  <rect x=\"0\" y=\"0\" width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n"
    ));
    s.push_str(&format!(
        "  <text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">MAE vs model \
         size</text>\n",
        W / 2.0
    ));

    // Frame.
    s.push_str(&format!(
        "  <rect x=\"{ML}\" y=\"{MT}\" width=\"{}\" height=\"{}\" fill=\"none\" \
         stroke=\"black\"/>\n",
        W - ML - MR,
        H - MT - MB
    ));

    // Decade ticks on x, five linear ticks on y.
    for k in (ax.x0.ceil() as i64)..=(ax.x1.floor() as i64) {
        let x = ax.x(10f64.powi(k as i32));
        s.push_str(&format!(
            "  <line x1=\"{x:.1}\" y1=\"{}\" x2=\"{x:.1}\" y2=\"{}\" stroke=\"black\"/>\n",
            H - MB,
            H - MB + 5.0
        ));
        s.push_str(&format!(
            "  <text x=\"{x:.1}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
            H - MB + 18.0,
            fmt_size(10f64.powi(k as i32))
        ));
    }
    for i in 0..=4 {
        let e = ax.y0 + (ax.y1 - ax.y0) * i as f64 / 4.0;
        let y = ax.y(e);
        s.push_str(&format!(
            "  <line x1=\"{}\" y1=\"{y:.1}\" x2=\"{ML}\" y2=\"{y:.1}\" stroke=\"black\"/>\n",
            ML - 5.0
        ));
        s.push_str(&format!(
            "  <text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{e:.2}</text>\n",
            ML - 8.0,
            y + 4.0
        ));
    }
    s.push_str(&format!(
        "  <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">model size (bytes)</text>\n",
        W / 2.0,
        H - 14.0
    ));
    s.push_str(&format!(
        "  <text x=\"18\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 18 {})\">\
         MAE (mmHg)</text>\n",
        H / 2.0,
        H / 2.0
    ));

    // Front polyline beneath its points, left to right.
    let mut front: Vec<&PlotPoint> = points.iter().filter(|p| p.pareto).collect();
    front.sort_by(|a, b| a.size_bytes.partial_cmp(&b.size_bytes).expect("finite"));
    if front.len() > 1 {
        let path: Vec<String> = front
            .iter()
            .map(|p| format!("{:.1},{:.1}", ax.x(p.size_bytes), ax.y(p.error)))
            .collect();
        s.push_str(&format!(
            "  <polyline points=\"{}\" fill=\"none\" stroke=\"#1f77b4\" \
             stroke-width=\"1.5\"/>\n",
            path.join(" ")
        ));
    }
    for p in points {
        let (x, y) = (ax.x(p.size_bytes), ax.y(p.error));
        if p.pareto {
            s.push_str(&format!(
                "  <circle cx=\"{x:.1}\" cy=\"{y:.1}\" r=\"4\" fill=\"#1f77b4\"/>\n"
            ));
        } else {
            s.push_str(&format!(
                "  <circle cx=\"{x:.1}\" cy=\"{y:.1}\" r=\"3.5\" fill=\"none\" \
                 stroke=\"#888888\"/>\n"
            ));
        }
    }
    if let Some((size, err)) = seed {
        let (x, y) = (ax.x(size), ax.y(err));
        s.push_str(&format!(
            "  <path d=\"M {} {y:.1} L {x:.1} {} L {} {y:.1} L {x:.1} {} Z\" \
             fill=\"#d62728\"/>\n",
            x - 5.5,
            y - 5.5,
            x + 5.5,
            y + 5.5
        ));
        s.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{:.1}\" fill=\"#d62728\">seed</text>\n",
            x + 8.0,
            y + 4.0
        ));
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts() -> Vec<PlotPoint> {
        vec![
            PlotPoint { size_bytes: 4000.0, error: 9.0, pareto: true },
            PlotPoint { size_bytes: 40_000.0, error: 7.5, pareto: true },
            PlotPoint { size_bytes: 20_000.0, error: 9.5, pareto: false },
        ]
    }

    #[test]
    fn scatter_draws_every_point_and_the_seed_marker() {
        let svg = scatter(&pts(), Some((3_200_000.0, 8.0)));
        assert_eq!(svg.matches("<circle").count(), 3);
        assert_eq!(svg.matches("<polyline").count(), 1);
        assert!(svg.contains("seed"));
        assert!(svg.contains("MAE vs model size"));
    }

    #[test]
    fn scatter_is_deterministic() {
        assert_eq!(scatter(&pts(), None), scatter(&pts(), None));
    }

    #[test]
    fn degenerate_inputs_stay_finite() {
        let one = vec![PlotPoint { size_bytes: 1000.0, error: 5.0, pareto: true }];
        let svg = scatter(&one, None);
        assert!(!svg.contains("NaN") && !svg.contains("inf"));
    }
}
