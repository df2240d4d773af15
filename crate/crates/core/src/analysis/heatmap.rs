//! Encoder cross-attention heatmaps.

use serde::{Deserialize, Serialize};

use crate::analysis::colormap::Colormap;
use crate::attention::{AttentionRecord, AttentionRole, Stage};
use crate::error::{CodecError, Result};
use crate::image::{ImageTensor, CHANNELS};
use crate::nn::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// Max over queries, layers and heads.
    Max,
    /// Mean over layers and heads of one query's row.
    MeanForQuery(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeatmapSpec {
    pub reduction: Reduction,
    pub colormap: Colormap,
    pub overlay_alpha: f64,
}

impl HeatmapSpec {
    pub fn new(reduction: Reduction) -> Self {
        Self {
            reduction,
            colormap: Colormap::default(),
            overlay_alpha: 0.6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    /// Reduced raw scores on the patch grid.
    pub grid: Mat,
    /// `side × side` map, nearest-neighbour upsampled and divided by the
    /// raw maximum so that it lies in `[0, 1]`.
    pub map: Vec<f64>,
    pub side: usize,
    pub raw_min: f64,
    pub raw_max: f64,
}

/// Reduces encoder cross-attention records to a per-patch map for a
/// `side × side` tile.
pub fn attention_heatmap(records: &[AttentionRecord], spec: &HeatmapSpec, side: usize) -> Result<Heatmap> {
    let cross: Vec<&Mat> = records
        .iter()
        .filter(|r| r.stage == Stage::Encoder && r.role == AttentionRole::Cross)
        .map(|r| &r.weights)
        .collect();
    let first = cross.first().ok_or_else(|| {
        CodecError::InvalidInput("no encoder cross-attention records to reduce".into())
    })?;
    let (queries, keys) = first.dim();
    if cross.iter().any(|w| w.dim() != (queries, keys)) {
        return Err(CodecError::Shape("attention records disagree in shape".into()));
    }
    let grid_side = (keys as f64).sqrt().round() as usize;
    if grid_side * grid_side != keys || grid_side == 0 || !side.is_multiple_of(grid_side) {
        return Err(CodecError::Shape(format!(
            "{keys} keys do not form a square grid dividing {side}"
        )));
    }
    let scores: Vec<f64> = match spec.reduction {
        Reduction::Max => (0..keys)
            .map(|k| {
                cross
                    .iter()
                    .flat_map(|w| w.column(k).to_vec())
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect(),
        Reduction::MeanForQuery(q) => {
            if q >= queries {
                return Err(CodecError::InvalidInput(format!(
                    "query index {q} out of range for {queries} queries"
                )));
            }
            let n = cross.len() as f64;
            (0..keys).map(|k| cross.iter().map(|w| w[[q, k]]).sum::<f64>() / n).collect()
        }
    };
    let raw_min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let raw_max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let grid = Mat::from_shape_vec((grid_side, grid_side), scores).expect("square");
    let cell = side / grid_side;
    let norm = if raw_max > 0.0 { raw_max } else { 1.0 };
    let mut map = vec![0.0; side * side];
    for y in 0..side {
        for x in 0..side {
            map[y * side + x] = (grid[[y / cell, x / cell]] / norm).clamp(0.0, 1.0);
        }
    }
    Ok(Heatmap {
        grid,
        map,
        side,
        raw_min,
        raw_max,
    })
}

impl Heatmap {
    pub fn render(&self, colormap: Colormap) -> ImageTensor {
        let data = self.map.iter().flat_map(|&v| colormap.rgb(v)).collect();
        ImageTensor::from_clamped(self.side, self.side, data).expect("map is square")
    }

    /// Colormapped map alpha-blended over `tile`.
    pub fn overlay(&self, tile: &ImageTensor, spec: &HeatmapSpec) -> Result<ImageTensor> {
        if tile.height() != self.side || tile.width() != self.side {
            return Err(CodecError::Shape(format!(
                "{}x{} tile under a {s}x{s} heatmap",
                tile.height(),
                tile.width(),
                s = self.side
            )));
        }
        let a = spec.overlay_alpha.clamp(0.0, 1.0);
        let heat = self.render(spec.colormap);
        let data = tile
            .data()
            .iter()
            .zip(heat.data())
            .map(|(t, h)| (1.0 - a) * t + a * h)
            .collect::<Vec<_>>();
        debug_assert_eq!(data.len(), self.side * self.side * CHANNELS);
        ImageTensor::from_clamped(self.side, self.side, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn record(layer: usize, head: usize, weights: Mat) -> AttentionRecord {
        AttentionRecord {
            stage: Stage::Encoder,
            layer,
            head,
            role: AttentionRole::Cross,
            weights,
        }
    }

    #[test]
    fn uniform_attention_gives_a_constant_map() {
        let recs = vec![record(0, 0, Array2::from_elem((4, 256), 1.0 / 256.0))];
        for reduction in [Reduction::Max, Reduction::MeanForQuery(2)] {
            let h = attention_heatmap(&recs, &HeatmapSpec::new(reduction), 256).unwrap();
            assert!(h.map.iter().all(|&v| v == h.map[0]));
            assert_eq!((h.raw_min, h.raw_max), (1.0 / 256.0, 1.0 / 256.0));
        }
    }

    #[test]
    fn one_hot_attention_marks_its_patch() {
        let mut w = Array2::zeros((1, 256));
        w[[0, 37]] = 1.0;
        let h = attention_heatmap(&[record(0, 0, w)], &HeatmapSpec::new(Reduction::Max), 256).unwrap();
        assert_eq!(h.grid[[2, 5]], 1.0);
        assert_eq!(h.grid.sum(), 1.0);
        // patch 37 is row 2, col 5: pixels [32, 48) × [80, 96)
        assert_eq!(h.map[40 * 256 + 85], 1.0);
        assert_eq!(h.map[40 * 256 + 96], 0.0);
        assert_eq!(h.map.iter().filter(|&&v| v == 1.0).count(), 256);
    }

    #[test]
    fn mean_reduction_averages_layers_and_heads() {
        let mut a = Array2::from_elem((2, 4), 0.25);
        let mut b = a.clone();
        a[[1, 0]] = 0.7;
        a[[1, 1]] = 0.1;
        a[[1, 2]] = 0.1;
        a[[1, 3]] = 0.1;
        b[[1, 0]] = 0.1;
        b[[1, 1]] = 0.1;
        b[[1, 2]] = 0.1;
        b[[1, 3]] = 0.7;
        let h = attention_heatmap(&[record(0, 0, a), record(1, 1, b)], &HeatmapSpec::new(Reduction::MeanForQuery(1)), 4)
            .unwrap();
        for (got, want) in h.grid.iter().zip([0.4, 0.1, 0.1, 0.4]) {
            assert!((got - want).abs() < 1e-15, "{got} vs {want}");
        }
        assert!(h.map.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn errors() {
        let spec = HeatmapSpec::new(Reduction::MeanForQuery(4));
        assert!(attention_heatmap(&[], &spec, 256).is_err());
        let recs = vec![record(0, 0, Array2::from_elem((4, 256), 1.0 / 256.0))];
        assert!(attention_heatmap(&recs, &spec, 256).is_err());
        let mut dec = recs[0].clone();
        dec.stage = Stage::Decoder;
        assert!(attention_heatmap(&[dec], &HeatmapSpec::new(Reduction::Max), 256).is_err());
    }

    #[test]
    fn overlay_blends() {
        let recs = vec![record(0, 0, Array2::from_elem((1, 4), 0.25))];
        let spec = HeatmapSpec {
            reduction: Reduction::Max,
            colormap: Colormap::Gray,
            overlay_alpha: 0.5,
        };
        let h = attention_heatmap(&recs, &spec, 16).unwrap();
        let tile = ImageTensor::filled(16, 16, 0.0).unwrap();
        let o = h.overlay(&tile, &spec).unwrap();
        assert!(o.data().iter().all(|&v| v == 0.5));
    }
}
