//! Deterministic SVG scatter rendering for 2-D embeddings.
//!
//! Point fills come from a fixed hue ramp: each point's color scalar is
//! min–max normalized to `t ∈ [0, 1]` and mapped through HSV
//! `(240°·(1−t), 0.85, 0.95)` — blue at the low end, through green, to red
//! at the high end — then converted to sRGB hex. A degenerate scalar range
//! (all values equal, or no color data) pins every point to the midpoint
//! green. Coordinates are formatted to fixed precision, so identical input
//! yields byte-identical SVG.

use cna_core::datasets::Dataset;
use std::fmt::Write as _;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("embedding has {cols} columns; scatter plots need exactly 2")]
    NotTwoDimensional { cols: usize },
    #[error("color source '{0}' is not in this CSV")]
    MissingColorColumn(String),
    #[error("color source must be auto, color, label, or none, got '{0}'")]
    BadColorSource(String),
    #[error("cannot plot an empty embedding")]
    Empty,
}

/// Which column of the embedding CSV drives point color.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColorSource {
    /// Color column if present, else labels, else uniform.
    Auto,
    Color,
    Label,
    None,
}

impl std::str::FromStr for ColorSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(ColorSource::Auto),
            "color" => Ok(ColorSource::Color),
            "label" => Ok(ColorSource::Label),
            "none" => Ok(ColorSource::None),
            other => Err(Error::BadColorSource(other.to_string())),
        }
    }
}

const CANVAS: f64 = 640.0;
const MARGIN: f64 = 40.0;
const RADIUS: f64 = 2.5;

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (u8, u8, u8) {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    let to_byte = |u: f64| ((u + m) * 255.0).round().clamp(0.0, 255.0) as u8;
    (to_byte(r), to_byte(g), to_byte(b))
}

/// Hex fill for a normalized color scalar.
fn ramp(t: f64) -> String {
    let (r, g, b) = hsv_to_rgb(240.0 * (1.0 - t.clamp(0.0, 1.0)), 0.85, 0.95);
    format!("#{r:02x}{g:02x}{b:02x}")
}

fn color_scalars(ds: &Dataset, source: ColorSource) -> Result<Option<Vec<f64>>> {
    let from_labels = |ls: &[usize]| ls.iter().map(|&l| l as f64).collect::<Vec<f64>>();
    match source {
        ColorSource::None => Ok(None),
        ColorSource::Color => ds
            .colors
            .clone()
            .map(Some)
            .ok_or_else(|| Error::MissingColorColumn("color".into())),
        ColorSource::Label => ds
            .labels()
            .map(from_labels)
            .map(Some)
            .ok_or_else(|| Error::MissingColorColumn("label".into())),
        ColorSource::Auto => Ok(ds
            .colors
            .clone()
            .or_else(|| ds.labels().map(from_labels))),
    }
}

/// Map data values to pixel positions: min–max box, 5% padding, y up.
fn axis_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo > hi {
        return (0.0, 1.0);
    }
    let span = hi - lo;
    if span == 0.0 {
        return (lo - 0.5, hi + 0.5);
    }
    (lo - 0.05 * span, hi + 0.05 * span)
}

/// Render a 2-D embedding as an SVG scatter, one `<circle>` per row.
pub fn render_scatter(ds: &Dataset, source: ColorSource) -> Result<String> {
    if ds.cols() != 2 {
        return Err(Error::NotTwoDimensional { cols: ds.cols() });
    }
    if ds.rows() == 0 {
        return Err(Error::Empty);
    }
    let scalars = color_scalars(ds, source)?;
    let ts: Vec<f64> = match &scalars {
        None => vec![0.5; ds.rows()],
        Some(cs) => {
            let (lo, hi) = cs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, &v| {
                (a.0.min(v), a.1.max(v))
            });
            if hi > lo {
                cs.iter().map(|&v| (v - lo) / (hi - lo)).collect()
            } else {
                vec![0.5; ds.rows()]
            }
        }
    };
    let (x_lo, x_hi) = axis_range((0..ds.rows()).map(|i| ds.data.get(i, 0)));
    let (y_lo, y_hi) = axis_range((0..ds.rows()).map(|i| ds.data.get(i, 1)));
    let inner = CANVAS - 2.0 * MARGIN;
    let px = |x: f64| MARGIN + (x - x_lo) / (x_hi - x_lo) * inner;
    let py = |y: f64| CANVAS - MARGIN - (y - y_lo) / (y_hi - y_lo) * inner;

    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{c}" height="{c}" viewBox="0 0 {c} {c}">"#,
        c = CANVAS as u32
    )
    .expect("string write");
    writeln!(
        svg,
        r##"<rect width="{c}" height="{c}" fill="#ffffff"/>"##,
        c = CANVAS as u32
    )
    .expect("string write");
    for i in 0..ds.rows() {
        writeln!(
            svg,
            r#"<circle cx="{:.2}" cy="{:.2}" r="{RADIUS}" fill="{}"/>"#,
            px(ds.data.get(i, 0)),
            py(ds.data.get(i, 1)),
            ramp(ts[i]),
        )
        .expect("string write");
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}
