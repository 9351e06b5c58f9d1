//! Minimal hand-rolled SVG calibration plots: axes, the diagonal, the
//! estimated curve or scatter, and a rug of predicted values. CSV remains
//! the canonical output; these are quick-look renderings.

use std::fmt::Write;

const SIZE: f64 = 480.0;
const MARGIN: f64 = 52.0;

struct Frame {
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl Frame {
    fn x(&self, v: f64) -> f64 {
        MARGIN + (v - self.x_min) / (self.x_max - self.x_min) * (SIZE - 2.0 * MARGIN)
    }

    fn y(&self, v: f64) -> f64 {
        SIZE - MARGIN - (v - self.y_min) / (self.y_max - self.y_min) * (SIZE - 2.0 * MARGIN)
    }
}

/// Render one state's calibration plot. `scatter` draws points instead of a
/// polyline (the MLR view); `reference` is the true curve when available.
pub fn calibration_plot(
    title: &str,
    points: &[(f64, f64)],
    reference: Option<&[f64]>,
    rug: &[f64],
    scatter: bool,
) -> String {
    let mut x_min: f64 = 0.0;
    let mut x_max: f64 = 1e-9;
    let mut y_min: f64 = 0.0;
    let mut y_max: f64 = 1e-9;
    for &(x, y) in points {
        x_min = x_min.min(x);
        x_max = x_max.max(x);
        y_min = y_min.min(y);
        y_max = y_max.max(y);
    }
    y_max = y_max.max(x_max);
    let frame = Frame {
        x_min,
        x_max: x_max * 1.02,
        y_min,
        y_max: y_max * 1.02,
    };

    let mut svg = String::new();
    let _ = write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SIZE}\" height=\"{SIZE}\" viewBox=\"0 0 {SIZE} {SIZE}\">\n"
    );
    let _ = write!(
        svg,
        "<rect x=\"{m}\" y=\"{m}\" width=\"{w}\" height=\"{w}\" fill=\"white\" stroke=\"black\"/>\n",
        m = MARGIN,
        w = SIZE - 2.0 * MARGIN
    );
    let _ = write!(
        svg,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"14\">{title}</text>\n",
        SIZE / 2.0,
        MARGIN - 18.0
    );
    let _ = write!(
        svg,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\">predicted</text>\n",
        SIZE / 2.0,
        SIZE - 10.0
    );
    let _ = write!(
        svg,
        "<text x=\"14\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 14 {})\">observed</text>\n",
        SIZE / 2.0,
        SIZE / 2.0
    );
    // Diagonal.
    let d0 = frame.x_min.max(frame.y_min);
    let d1 = frame.x_max.min(frame.y_max);
    let _ = write!(
        svg,
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"gray\" stroke-dasharray=\"5,4\"/>\n",
        frame.x(d0),
        frame.y(d0),
        frame.x(d1),
        frame.y(d1)
    );
    // Reference curve (solid thin).
    if let Some(reference) = reference {
        let mut path = String::new();
        for (i, (&(x, _), &r)) in points.iter().zip(reference).enumerate() {
            let _ = write!(
                path,
                "{}{:.2},{:.2} ",
                if i == 0 { "M" } else { "L" },
                frame.x(x),
                frame.y(r)
            );
        }
        let _ = write!(
            svg,
            "<path d=\"{}\" fill=\"none\" stroke=\"#888888\" stroke-width=\"1\"/>\n",
            path.trim_end()
        );
    }
    if scatter {
        for &(x, y) in points {
            let _ = write!(
                svg,
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"1.6\" fill=\"#1f6fb2\" fill-opacity=\"0.5\"/>\n",
                frame.x(x),
                frame.y(y)
            );
        }
    } else {
        let mut path = String::new();
        for (i, &(x, y)) in points.iter().enumerate() {
            let _ = write!(
                path,
                "{}{:.2},{:.2} ",
                if i == 0 { "M" } else { "L" },
                frame.x(x),
                frame.y(y)
            );
        }
        let _ = write!(
            svg,
            "<path d=\"{}\" fill=\"none\" stroke=\"#1f6fb2\" stroke-width=\"1.8\"/>\n",
            path.trim_end()
        );
    }
    // Rug ticks along the bottom edge; thin out to at most 400 ticks.
    let step = (rug.len() / 400).max(1);
    for x in rug.iter().step_by(step) {
        let px = frame.x(*x);
        let _ = write!(
            svg,
            "<line x1=\"{px:.2}\" y1=\"{}\" x2=\"{px:.2}\" y2=\"{}\" stroke=\"black\" stroke-width=\"0.4\"/>\n",
            SIZE - MARGIN,
            SIZE - MARGIN + 7.0
        );
    }
    svg.push_str("</svg>\n");
    svg
}
