use serde::{Deserialize, Serialize};

/// Scalar-to-RGB mapping for heatmaps, inputs in `[0, 1]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Colormap {
    #[default]
    Inferno,
    Gray,
}

const INFERNO: [[f64; 3]; 9] = [
    [0.001, 0.000, 0.014],
    [0.106, 0.047, 0.255],
    [0.290, 0.047, 0.420],
    [0.471, 0.110, 0.427],
    [0.647, 0.173, 0.376],
    [0.812, 0.267, 0.275],
    [0.929, 0.412, 0.145],
    [0.984, 0.608, 0.024],
    [0.988, 1.000, 0.643],
];

impl Colormap {
    pub fn rgb(self, t: f64) -> [f64; 3] {
        let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
        match self {
            Colormap::Gray => [t; 3],
            Colormap::Inferno => {
                let x = t * (INFERNO.len() - 1) as f64;
                let i = (x.floor() as usize).min(INFERNO.len() - 2);
                let f = x - i as f64;
                let (a, b) = (INFERNO[i], INFERNO[i + 1]);
                [0, 1, 2].map(|c| a[c] + f * (b[c] - a[c]))
            }
        }
    }
}
