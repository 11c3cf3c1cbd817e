//! Explanations: part bounding boxes, reasoning reports and prototype /
//! image rankings, plus PPM overlays.
//!
//! A part sampled at fractional latent position `(x, y)` is drawn as a
//! square of side γ centered at pixel `(γx, γy)`, with γ the image-to-latent
//! downsampling factor.

use std::fmt::{self, Write as _};

use crate::data::{Dataset, RgbImage};
use crate::deform::sample_position;
use crate::error::{Error, Result};
use crate::model::{argmax_first, Model};
use crate::tensor::Tensor4;
use crate::train::{dataset_scores, ProjectionRecord};

#[derive(Clone, Debug, PartialEq)]
pub struct PartBox {
    pub prototype: usize,
    /// Row and column of the part inside the prototype grid.
    pub part: (usize, usize),
    /// Pixel coordinates (row, column) of the box center, unrounded.
    pub center: (f64, f64),
    pub side: f64,
    /// Image the box refers to.
    pub source: String,
}

impl PartBox {
    /// Integer pixel rectangle `(top, left, bottom, right)`, inclusive,
    /// before clipping. Coordinates are floored.
    pub fn raster(&self) -> (i64, i64, i64, i64) {
        let top = (self.center.0 - self.side / 2.0).floor() as i64;
        let left = (self.center.1 - self.side / 2.0).floor() as i64;
        let side = self.side.floor() as i64;
        (top, left, top + side - 1, left + side - 1)
    }
}

/// Box colors indexed by row-major part index.
pub const PALETTE: [[u8; 3]; 9] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [255, 255, 255],
];

const OUTLINE: i64 = 2;

/// Boxes for every part of `prototype` at latent center `(a, b)` with the
/// given per-part offsets.
fn boxes_at(model: &Model, prototype: usize, (a, b): (usize, usize), deltas: &[(f32, f32)], source: &str) -> Result<Vec<PartBox>> {
    let gamma = model.config.gamma()? as f64;
    let grid = model.layer.grid;
    Ok((0..grid.rho())
        .map(|k| {
            let (x, y): (f32, f32) = sample_position(&grid, None, k, a, b);
            let (d1, d2) = deltas[k];
            PartBox {
                prototype,
                part: (k / grid.cols, k % grid.cols),
                center: (gamma * (x as f64 + d1 as f64), gamma * (y as f64 + d2 as f64)),
                side: gamma,
                source: source.to_owned(),
            }
        })
        .collect())
}

/// Part boxes of `prototype` where it fires most strongly on `image`.
pub fn visualize_prototype(model: &Model, image: &Tensor4, prototype: usize, source: &str) -> Result<Vec<PartBox>> {
    if prototype >= model.num_prototypes() {
        return Err(Error::InvalidInput(format!(
            "prototype {prototype} out of range ({} prototypes)",
            model.num_prototypes()
        )));
    }
    let fwd = model.forward(image)?;
    let center = fwd.layer.centers[prototype];
    let deltas: Vec<(f32, f32)> = (0..model.layer.grid.rho())
        .map(|k| fwd.layer.offsets().map_or((0.0, 0.0), |o| o.delta(0, k, center.0, center.1)))
        .collect();
    boxes_at(model, prototype, center, &deltas, source)
}

/// Boxes on the source image of a projected prototype, rebuilt from its
/// projection record.
pub fn projection_boxes(model: &Model, record: &ProjectionRecord) -> Result<Vec<PartBox>> {
    boxes_at(model, record.prototype, record.center, &record.deltas, &record.source)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub prototype: usize,
    pub class: usize,
    /// Index of the prototype within its class.
    pub index: usize,
    pub score: f64,
    /// Connection to the predicted class.
    pub weight: f64,
    pub contribution: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReasoningReport {
    pub rows: Vec<ReportRow>,
    /// Class logits `Σ_p w_{p,c}·score_p`.
    pub class_totals: Vec<f64>,
    pub predicted: usize,
}

impl fmt::Display for ReasoningReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.rows {
            writeln!(
                f,
                "proto={}/{} score={:.6} weight={:.6} contrib={:.6}",
                r.class, r.index, r.score, r.weight, r.contribution
            )?;
        }
        for (c, t) in self.class_totals.iter().enumerate() {
            writeln!(f, "class={c} total={t:.6}")?;
        }
        writeln!(f, "predicted={}", self.predicted)
    }
}

/// Scores, connections and contributions of every prototype towards the
/// predicted class.
pub fn reasoning_report(model: &Model, image: &Tensor4) -> Result<ReasoningReport> {
    let fwd = model.forward(image)?;
    let scores: Vec<f64> = fwd.scores().iter().map(|&s| s as f64).collect();
    let class_totals = model.last.logits_f64(&scores);
    let predicted = argmax_first(&class_totals);
    let rows = model
        .layer
        .prototypes
        .iter()
        .enumerate()
        .map(|(p, proto)| {
            let weight = model.last.get(p, predicted) as f64;
            ReportRow {
                prototype: p,
                class: proto.class_id,
                index: proto.index,
                score: scores[p],
                weight,
                contribution: scores[p] * weight,
            }
        })
        .collect();
    Ok(ReasoningReport {
        rows,
        class_totals,
        predicted,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankedPrototype {
    pub prototype: usize,
    pub score: f64,
    /// Where the prototype fires on the query image.
    pub boxes: Vec<PartBox>,
    /// Where it came from, when it has been projected.
    pub source_boxes: Vec<PartBox>,
}

/// The `top_k` prototypes most similar to `image` (clamped to the number of
/// prototypes), best first; ties keep the lower prototype index.
pub fn local_analysis(
    model: &Model,
    image: &Tensor4,
    name: &str,
    projections: &[ProjectionRecord],
    top_k: usize,
) -> Result<Vec<RankedPrototype>> {
    let fwd = model.forward(image)?;
    let mut order: Vec<usize> = (0..model.num_prototypes()).collect();
    let scores = fwd.scores();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]));
    order
        .into_iter()
        .take(top_k)
        .map(|p| {
            let source_boxes = match projections.iter().find(|r| r.prototype == p) {
                Some(r) => projection_boxes(model, r)?,
                None => Vec::new(),
            };
            Ok(RankedPrototype {
                prototype: p,
                score: scores[p] as f64,
                boxes: visualize_prototype(model, image, p, name)?,
                source_boxes,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankedImage {
    pub image: usize,
    pub name: String,
    pub score: f64,
    pub boxes: Vec<PartBox>,
}

/// The `top_k` images of `dataset` on which `prototype` fires most
/// strongly, best first; ties keep dataset order.
pub fn global_analysis(model: &Model, dataset: &Dataset, prototype: usize, top_k: usize, jobs: usize) -> Result<Vec<RankedImage>> {
    if dataset.is_empty() {
        return Err(Error::InvalidInput("global analysis over an empty dataset".into()));
    }
    if prototype >= model.num_prototypes() {
        return Err(Error::InvalidInput(format!(
            "prototype {prototype} out of range ({} prototypes)",
            model.num_prototypes()
        )));
    }
    let scores = dataset_scores(model, dataset, jobs)?;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.sort_by(|&i, &j| scores[j][prototype].total_cmp(&scores[i][prototype]));
    order
        .into_iter()
        .take(top_k)
        .map(|i| {
            Ok(RankedImage {
                image: i,
                name: dataset.names[i].clone(),
                score: scores[i][prototype],
                boxes: visualize_prototype(model, &dataset.images[i], prototype, &dataset.names[i])?,
            })
        })
        .collect()
}

/// Copy of `image` with a 2-pixel outline per box, clipped to the image.
pub fn draw_boxes(image: &RgbImage, boxes: &[PartBox], grid_cols: usize) -> RgbImage {
    let mut out = image.clone();
    let (h, w) = (image.height as i64, image.width as i64);
    for b in boxes {
        let color = PALETTE[(b.part.0 * grid_cols + b.part.1) % PALETTE.len()];
        let (top, left, bottom, right) = b.raster();
        for r in top..=bottom {
            for c in left..=right {
                let edge = r < top + OUTLINE || r > bottom - OUTLINE || c < left + OUTLINE || c > right - OUTLINE;
                if edge && (0..h).contains(&r) && (0..w).contains(&c) {
                    out.put(r as usize, c as usize, color);
                }
            }
        }
    }
    out
}

/// One line per box with exact, unclipped coordinates.
pub fn sidecar(boxes: &[PartBox], model: &Model) -> String {
    let mut out = String::new();
    for b in boxes {
        let p = &model.layer.prototypes[b.prototype];
        writeln!(
            out,
            "proto={}/{} part={},{} center_row={} center_col={} side={} source={}",
            p.class_id, p.index, b.part.0, b.part.1, b.center.0, b.center.1, b.side, b.source
        )
        .expect("writing to a String");
    }
    out
}
