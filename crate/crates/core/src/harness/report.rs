//! Metric tables and plots rendered from episode logs.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use thiserror::Error;

use super::metrics::{compute_metrics, MetricsReport};
use crate::env::EpisodeLog;
use crate::geometry::SafetyField;
use crate::scenario::DomainBox;
use crate::value::ValueSlice;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("report i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
    #[error("nothing to report")]
    Empty,
}

const PX_PER_M: f64 = 6.0;
const PALETTE: [[u8; 3]; 6] = [[31, 119, 180], [214, 39, 40], [44, 160, 44], [148, 103, 189], [255, 127, 14], [23, 190, 207]];

/// Rows `label, episodes, success_rate, mfd_m, mnsad_pct, step_p95_ms, braking_episodes`.
pub fn write_metrics_csv(path: &Path, rows: &[(String, MetricsReport)]) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["label", "episodes", "success_rate", "mfd_m", "mnsad_pct", "step_p95_ms", "braking_episodes"])?;
    for (label, m) in rows {
        w.write_record([
            label.clone(),
            m.episodes.to_string(),
            format!("{:.4}", m.success_rate),
            format!("{:.3}", m.mfd),
            format!("{:.3}", m.mnsad_percent()),
            format!("{:.4}", m.timing.p95_ms),
            m.braking_episodes.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

struct Canvas {
    img: RgbImage,
    domain: DomainBox,
}

impl Canvas {
    fn new(domain: DomainBox) -> Self {
        let w = ((domain.x[1] - domain.x[0]) * PX_PER_M).ceil() as u32;
        let h = ((domain.y[1] - domain.y[0]) * PX_PER_M).ceil() as u32;
        Self { img: RgbImage::from_pixel(w.max(1), h.max(1), Rgb([255, 255, 255])), domain }
    }

    /// Pixel centre to world coordinates; image rows grow downwards.
    fn world(&self, px: u32, py: u32) -> (f64, f64) {
        let x = self.domain.x[0] + (px as f64 + 0.5) / PX_PER_M;
        let y = self.domain.y[1] - (py as f64 + 0.5) / PX_PER_M;
        (x, y)
    }

    fn pixel(&self, x: f64, y: f64) -> Option<(u32, u32)> {
        let px = ((x - self.domain.x[0]) * PX_PER_M).floor();
        let py = ((self.domain.y[1] - y) * PX_PER_M).floor();
        let ok = px >= 0.0 && py >= 0.0 && (px as u32) < self.img.width() && (py as u32) < self.img.height();
        ok.then_some((px as u32, py as u32))
    }

    fn obstacle(&mut self, field: &SafetyField) {
        for py in 0..self.img.height() {
            for px in 0..self.img.width() {
                let (x, y) = self.world(px, py);
                if field.h(x, y) >= 0.0 {
                    self.img.put_pixel(px, py, Rgb([90, 90, 90]));
                }
            }
        }
    }

    fn polyline(&mut self, pts: impl Iterator<Item = (f64, f64)>, color: [u8; 3]) {
        let mut prev: Option<(f64, f64)> = None;
        for p in pts {
            if let Some(q) = prev {
                let n = (((p.0 - q.0).hypot(p.1 - q.1)) * PX_PER_M * 2.0).ceil().max(1.0) as usize;
                for k in 0..=n {
                    let t = k as f64 / n as f64;
                    if let Some((px, py)) = self.pixel(q.0 + t * (p.0 - q.0), q.1 + t * (p.1 - q.1)) {
                        self.img.put_pixel(px, py, Rgb(color));
                    }
                }
            }
            prev = Some(p);
        }
    }
}

/// Top-down view of every trajectory over the obstacle, one colour per group.
pub fn render_trajectories(path: &Path, field: &SafetyField, domain: DomainBox, groups: &[(String, Vec<EpisodeLog>)]) -> Result<(), ReportError> {
    let mut c = Canvas::new(domain);
    c.obstacle(field);
    for (g, (_, logs)) in groups.iter().enumerate() {
        for l in logs {
            let pts = l.steps.iter().map(|s| (s.x.x, s.x.y)).chain(std::iter::once((l.final_state.x, l.final_state.y)));
            c.polyline(pts, PALETTE[g % PALETTE.len()]);
        }
    }
    c.img.save(path)?;
    Ok(())
}

/// Diverging heat map of a value slice: red where `V > 0`, blue where
/// `V < 0`, black on the zero crossing between neighbouring cells.
pub fn render_value_slice(path: &Path, slice: &ValueSlice) -> Result<(), ReportError> {
    let scale = slice.values.iter().fold(1e-9_f64, |m, v| m.max(v.abs()));
    let mut img = RgbImage::new(slice.nx as u32, slice.ny as u32);
    for j in 0..slice.ny {
        for i in 0..slice.nx {
            let v = slice.at(i, j);
            let t = (v.abs() / scale).sqrt();
            let fade = (255.0 * (1.0 - t)) as u8;
            let mut px = if v > 0.0 { Rgb([255, fade, fade]) } else { Rgb([fade, fade, 255]) };
            let edge = (i + 1 < slice.nx && (slice.at(i + 1, j) > 0.0) != (v > 0.0)) || (j + 1 < slice.ny && (slice.at(i, j + 1) > 0.0) != (v > 0.0));
            if edge {
                px = Rgb([0, 0, 0]);
            }
            // Flip so +Y is up.
            img.put_pixel(i as u32, (slice.ny - 1 - j) as u32, px);
        }
    }
    img.save(path)?;
    Ok(())
}

/// Write `metrics.csv` and `trajectories.png` into `out`; returns the paths.
pub fn write_report(out: &Path, field: &SafetyField, domain: DomainBox, groups: &[(String, Vec<EpisodeLog>)]) -> Result<Vec<PathBuf>, ReportError> {
    if groups.iter().all(|(_, l)| l.is_empty()) {
        return Err(ReportError::Empty);
    }
    std::fs::create_dir_all(out)?;
    let rows: Vec<(String, MetricsReport)> = groups.iter().map(|(n, l)| (n.clone(), compute_metrics(l))).collect();
    let csv = out.join("metrics.csv");
    write_metrics_csv(&csv, &rows)?;
    let png = out.join("trajectories.png");
    render_trajectories(&png, field, domain, groups)?;
    Ok(vec![csv, png])
}
